#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "apam/errors.hpp"

#ifndef APAM_GOLDEN_DIR
#error "APAM_GOLDEN_DIR must point at tests/golden"
#endif

namespace apam::testing {

inline std::string golden_path(const std::string& name) { return std::string(APAM_GOLDEN_DIR) + "/" + name; }

inline nlohmann::json load_golden(const std::string& name) {
  std::ifstream in(golden_path(name));
  if (!in) throw DataError("missing golden file " + golden_path(name) + " (run make_golden)");
  return nlohmann::json::parse(in);
}

}  // namespace apam::testing
