#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "apam/autodiff/tensor.hpp"
#include "apam/errors.hpp"

namespace apam::ckpt {

// Binary layout (all integers little-endian):
//   "APAM" | u16 version | u32 record count
//   per record: u32 name length | utf-8 name | u8 dtype | u8 rank | rank x u64 dims | raw values

inline constexpr char kMagic[4] = {'A', 'P', 'A', 'M'};
inline constexpr std::uint16_t kVersion = 1;

enum class DType : std::uint8_t { u8 = 0, f32 = 1, f64 = 2 };

[[nodiscard]] constexpr std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::u8: return 1;
    case DType::f32: return 4;
    case DType::f64: return 8;
  }
  return 0;
}

struct Record {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;  // little-endian element encoding

  [[nodiscard]] std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  friend bool operator==(const Record&, const Record&) = default;
};

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else return DType::f64;
}

}  // namespace detail

template <class T>
[[nodiscard]] Record make_record(std::string name, const ad::Tensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  Record r;
  r.name = std::move(name);
  r.dtype = detail::dtype_of<T>();
  r.shape = {t.rows(), t.cols()};
  r.bytes.reserve(t.size() * sizeof(T));
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) detail::put_le(r.bytes, std::bit_cast<std::uint32_t>(v));
    else detail::put_le(r.bytes, std::bit_cast<std::uint64_t>(v));
  }
  return r;
}

[[nodiscard]] inline Record make_text_record(std::string name, const std::string& text) {
  Record r;
  r.name = std::move(name);
  r.dtype = DType::u8;
  r.shape = {text.size()};
  r.bytes.assign(text.begin(), text.end());
  return r;
}

[[nodiscard]] inline std::string record_text(const Record& r) {
  if (r.dtype != DType::u8) throw DataError("checkpoint record '" + r.name + "' is not text");
  return std::string(r.bytes.begin(), r.bytes.end());
}

/// Decode a rank-1 or rank-2 float record into a tensor of T (converting precision if needed).
template <class T>
[[nodiscard]] ad::Tensor<T> record_tensor(const Record& r) {
  if (r.dtype == DType::u8 || r.shape.empty() || r.shape.size() > 2) {
    throw DataError("checkpoint record '" + r.name + "' is not a matrix");
  }
  const ad::Shape s{r.shape.size() == 2 ? r.shape[0] : 1, r.shape.back()};
  ad::Tensor<T> t(s);
  const std::uint8_t* p = r.bytes.data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (r.dtype == DType::f32) {
      t[i] = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i)));
    } else {
      t[i] = static_cast<T>(std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i)));
    }
  }
  return t;
}

[[nodiscard]] inline std::vector<std::uint8_t> encode(const std::vector<Record>& records) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  detail::put_le(out, kVersion);
  detail::put_le(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.bytes.size() != r.count() * dtype_size(r.dtype)) {
      throw ContractError("checkpoint record '" + r.name + "' size does not match its shape");
    }
    detail::put_le(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(static_cast<std::uint8_t>(r.dtype));
    out.push_back(static_cast<std::uint8_t>(r.shape.size()));
    for (auto d : r.shape) detail::put_le(out, d);
    out.insert(out.end(), r.bytes.begin(), r.bytes.end());
  }
  return out;
}

[[nodiscard]] inline std::vector<Record> decode(const std::vector<std::uint8_t>& buf) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (buf.size() - pos < n) throw DataError("checkpoint truncated at byte " + std::to_string(pos));
  };
  need(10);
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw DataError("not an APAM checkpoint (bad magic)");
  pos = 4;
  const auto version = detail::get_le<std::uint16_t>(buf.data() + pos);
  pos += 2;
  if (version != kVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto n = detail::get_le<std::uint32_t>(buf.data() + pos);
  pos += 4;
  std::vector<Record> records;
  for (std::uint32_t k = 0; k < n; ++k) {
    Record r;
    need(4);
    const auto len = detail::get_le<std::uint32_t>(buf.data() + pos);
    pos += 4;
    need(len + 2);
    r.name.assign(reinterpret_cast<const char*>(buf.data() + pos), len);
    pos += len;
    const auto tag = buf[pos++];
    if (tag > 2) throw DataError("checkpoint record '" + r.name + "' has unknown dtype");
    r.dtype = static_cast<DType>(tag);
    const auto rank = buf[pos++];
    need(8 * std::size_t(rank));
    for (std::uint8_t d = 0; d < rank; ++d) {
      r.shape.push_back(detail::get_le<std::uint64_t>(buf.data() + pos));
      pos += 8;
    }
    const std::uint64_t bytes = r.count() * dtype_size(r.dtype);
    need(bytes);
    r.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                   buf.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
    pos += bytes;
    records.push_back(std::move(r));
  }
  if (pos != buf.size()) throw DataError("trailing bytes after checkpoint records");
  return records;
}

inline void write_file(const std::string& path, const std::vector<Record>& records) {
  const auto bytes = encode(records);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path + "'");
}

[[nodiscard]] inline std::vector<Record> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

[[nodiscard]] inline const Record* find(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace apam::ckpt
