#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <unistd.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "apam/data.hpp"
#include "apam/synthetic.hpp"

namespace data = apam::data;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("apam_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  [[nodiscard]] std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  for (const auto& l : lines) out << l << '\n';
}

data::Dataset uniform_dataset(std::size_t classes, std::size_t per_class) {
  data::Dataset ds;
  for (std::size_t c = 0; c < classes; ++c) ds.classes.push_back("c" + std::to_string(c));
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      data::Example e;
      e.id = ds.examples.size();
      e.text = "doc " + std::to_string(e.id);
      e.label = e.original_label = c;
      ds.examples.push_back(e);
    }
  }
  return ds;
}

double chi_square_critical(double dof, double alpha) {
  return boost::math::quantile(boost::math::complement(boost::math::chi_squared(dof), alpha));
}

}  // namespace

TEST(Ingest, EmptyFileHasNoExamples) {
  TempDir d;
  write_lines(d.file("e.jsonl"), {});
  try {
    (void)data::ingest(d.file("e.jsonl"));
    FAIL();
  } catch (const apam::IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("no examples"), std::string::npos);
  }
}

TEST(Ingest, MapsLabelsInFirstSeenOrder) {
  TempDir d;
  write_lines(d.file("a.jsonl"), {R"({"text":"good","label":"pos"})", R"({"text":"bad","label":"neg"})",
                                  R"({"text":"fine","label":"pos"})"});
  const auto ds = data::ingest(d.file("a.jsonl"));
  EXPECT_EQ(ds.num_classes(), 2u);
  EXPECT_EQ(ds.classes, (std::vector<std::string>{"pos", "neg"}));
  EXPECT_EQ(ds.class_counts(), (std::vector<std::size_t>{2, 1}));
  for (const auto& e : ds.examples) {
    EXPECT_EQ(e.label, e.original_label);
    EXPECT_FALSE(e.corrupted);
  }
}

TEST(Ingest, IntegerLabelsAndDuplicateTexts) {
  TempDir d;
  write_lines(d.file("a.jsonl"), {R"({"text":"same","label":3})", R"({"text":"same","label":3})", ""});
  const auto ds = data::ingest(d.file("a.jsonl"));
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_NE(ds.examples[0].id, ds.examples[1].id);
  EXPECT_EQ(ds.classes, (std::vector<std::string>{"3"}));
}

TEST(Ingest, ErrorsCarryLineNumbers) {
  TempDir d;
  write_lines(d.file("bad.jsonl"), {R"({"text":"ok","label":"a"})", R"({"text":"oops","label":)"});
  try {
    (void)data::ingest(d.file("bad.jsonl"));
    FAIL();
  } catch (const apam::IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  write_lines(d.file("types.jsonl"), {R"({"text":5,"label":"a"})"});
  EXPECT_THROW((void)data::ingest(d.file("types.jsonl")), apam::IngestError);
  write_lines(d.file("float.jsonl"), {R"({"text":"x","label":1.5})"});
  EXPECT_THROW((void)data::ingest(d.file("float.jsonl")), apam::IngestError);
}

TEST(Ingest, RoundTripKeepsProvenance) {
  TempDir d;
  auto ds = data::inject_uniform_noise(uniform_dataset(4, 50), {0.5, 9});
  data::write_jsonl(d.file("rt.jsonl"), ds);
  const auto back = data::ingest(d.file("rt.jsonl"), &ds.classes);
  EXPECT_EQ(back, ds);
}

TEST(ImbalanceFactor, PresetValues) {
  const std::vector<std::size_t> uniform = {7, 7, 7};
  EXPECT_DOUBLE_EQ(data::imbalance_factor(std::span<const std::size_t>(uniform)), 1.0);
  const std::vector<std::size_t> annotation = {1100, 10};
  EXPECT_DOUBLE_EQ(data::imbalance_factor(std::span<const std::size_t>(annotation)), 110.0);
  const std::vector<std::size_t> review = {513, 10};
  EXPECT_DOUBLE_EQ(data::imbalance_factor(std::span<const std::size_t>(review)), 51.3);
  EXPECT_DOUBLE_EQ(data::imbalance_preset("amazon_review"), 51.3);
  EXPECT_DOUBLE_EQ(data::imbalance_preset("amazon_annotation"), 110.0);
  const std::vector<std::size_t> empty_class = {4, 0};
  EXPECT_THROW((void)data::imbalance_factor(std::span<const std::size_t>(empty_class)), apam::ContractError);
}

TEST(LongTail, ProfileSizes) {
  const std::vector<std::size_t> two = {100, 100};
  EXPECT_EQ(data::longtail_sizes(two, 50.0), (std::vector<std::size_t>{100, 2}));
  const std::vector<std::size_t> three = {1000, 1000, 1000};
  EXPECT_EQ(data::longtail_sizes(three, 100.0), (std::vector<std::size_t>{1000, 100, 10}));
  EXPECT_EQ(data::longtail_sizes(three, 1.0), (std::vector<std::size_t>{1000, 1000, 1000}));
  EXPECT_EQ(data::longtail_sizes(three, 100.0, 500), (std::vector<std::size_t>{500, 50, 5}));
}

TEST(LongTail, RanksFollowSourceSizes) {
  const std::vector<std::size_t> counts = {300, 1000, 600};
  EXPECT_EQ(data::longtail_sizes(counts, 100.0), (std::vector<std::size_t>{10, 1000, 100}));
}

TEST(LongTail, InfeasibleTargetNamesClass) {
  const std::vector<std::size_t> counts = {1000, 50, 1000};
  try {
    (void)data::longtail_sizes(counts, 2.0);
    FAIL();
  } catch (const apam::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
}

TEST(LongTail, SubsetWithoutReplacement) {
  const auto ds = uniform_dataset(5, 400);
  const auto lt = data::make_longtail(ds, 51.3, 3);
  const auto ids = ds.ids();
  std::set<std::uint64_t> seen;
  for (const auto& e : lt.examples) {
    EXPECT_TRUE(ids.contains(e.id));
    EXPECT_TRUE(seen.insert(e.id).second);
  }
  EXPECT_NEAR(data::imbalance_factor(lt), 51.3, 51.3 * 0.5 / 8.0);
  EXPECT_EQ(data::make_longtail(ds, 51.3, 3), lt);
}

TEST(Noise, ZeroRateAndSingleClassAreNoOps) {
  const auto ds = uniform_dataset(3, 100);
  EXPECT_EQ(data::inject_uniform_noise(ds, {0.0, 1}), ds);
  const auto one = uniform_dataset(1, 100);
  EXPECT_EQ(data::inject_uniform_noise(one, {0.9, 1}), one);
}

TEST(Noise, ExcludedIdsUntouchedAndOriginalsPreserved) {
  const auto ds = uniform_dataset(4, 250);
  std::unordered_set<std::uint64_t> exclude;
  for (std::uint64_t i = 0; i < 1000; i += 3) exclude.insert(i);
  const auto noisy = data::inject_uniform_noise(ds, {0.8, 5}, exclude);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& e = noisy.examples[i];
    EXPECT_EQ(e.original_label, ds.examples[i].original_label);
    EXPECT_EQ(e.corrupted, e.label != e.original_label);
    if (exclude.contains(e.id)) {
      EXPECT_EQ(e.label, e.original_label);
    }
  }
}

TEST(Noise, FlipRateAndDestinationUniformity) {
  const std::size_t C = 10, N = 10000;
  const auto ds = uniform_dataset(C, N / C);
  const double crit = chi_square_critical(double(C - 1), 0.01);
  for (double rho : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}) {
    const data::NoiseSpec spec{rho, 77};
    const auto noisy = data::inject_uniform_noise(ds, spec);
    std::size_t flipped = 0, fired = 0;
    std::vector<double> dest(C, 0.0);
    for (const auto& e : noisy.examples) {
      flipped += e.corrupted;
      const auto d = data::uniform_noise_draw(spec, e.id, C);
      if (d.fired) {
        ++fired;
        dest[d.label] += 1;
      }
    }
    const double p = rho * double(C - 1) / double(C);
    EXPECT_LE(std::abs(double(flipped) - p * N), 3 * std::sqrt(N * p * (1 - p))) << "rho=" << rho;
    EXPECT_LE(std::abs(double(fired) - rho * N), 3 * std::sqrt(N * rho * (1 - rho))) << "rho=" << rho;
    double chi2 = 0;
    const double expected = double(fired) / double(C);
    for (double o : dest) chi2 += (o - expected) * (o - expected) / expected;
    EXPECT_LT(chi2, crit) << "rho=" << rho;
  }
}

TEST(Noise, OrderIndependent) {
  auto ds = uniform_dataset(5, 40);
  const auto a = data::inject_uniform_noise(ds, {0.4, 3});
  std::reverse(ds.examples.begin(), ds.examples.end());
  auto b = data::inject_uniform_noise(ds, {0.4, 3});
  std::reverse(b.examples.begin(), b.examples.end());
  EXPECT_EQ(a, b);
}

TEST(MetaSplit, SizesAndDeterminism) {
  const auto ds = uniform_dataset(10, 1000);
  const auto [train, meta] = data::split_meta(ds, 0.01, false, 4);
  EXPECT_EQ(meta.size(), 100u);
  EXPECT_EQ(train.size(), 9900u);
  const auto [train_b, meta_b] = data::split_meta(ds, 0.01, true, 4);
  for (auto c : meta_b.class_counts()) EXPECT_EQ(c, 10u);
  const auto again = data::split_meta(ds, 0.01, false, 4);
  EXPECT_EQ(again.first, train);
  EXPECT_EQ(again.second, meta);
  EXPECT_NE(data::split_meta(ds, 0.01, false, 5).second, meta);
}

TEST(MetaSplit, UnbalancedIsClassProportional) {
  const auto lt = data::make_longtail(uniform_dataset(4, 1000), 10.0, 2);
  const auto [train, meta] = data::split_meta(lt, 0.05, false, 1);
  const auto all = lt.class_counts();
  const auto m = meta.class_counts();
  EXPECT_EQ(meta.size(), static_cast<std::size_t>(std::llround(0.05 * double(lt.size()))));
  for (std::size_t c = 0; c < all.size(); ++c) EXPECT_NEAR(double(m[c]), 0.05 * double(all[c]), 1.0);
}

TEST(MetaSplit, BalancedNeedsEveryClass) {
  auto ds = uniform_dataset(3, 10);
  ds.classes.push_back("empty");
  EXPECT_THROW((void)data::split_meta(ds, 0.1, true, 1), apam::DataError);
}

TEST(Synthesize, PartsDisjointAndCleanWhereRequired) {
  data::SyntheticSpec spec;
  spec.per_class = 300;
  const auto source = data::make_synthetic(spec);
  data::SynthOptions o;
  o.imbalance = 10;
  o.rho = 0.4;
  o.test_per_class = 50;
  o.seed = 8;
  const auto s = data::synthesize(source, o);
  EXPECT_NO_THROW(data::check_disjoint(s));
  for (const auto& e : s.meta.examples) EXPECT_FALSE(e.corrupted);
  for (const auto& e : s.test.examples) EXPECT_FALSE(e.corrupted);
  for (auto c : s.test.class_counts()) EXPECT_EQ(c, 50u);
  std::size_t corrupted = 0;
  for (const auto& e : s.train.examples) corrupted += e.corrupted;
  EXPECT_GT(corrupted, 0u);

  TempDir d;
  data::write_split(d.file(""), s);
  const auto back = data::read_split(d.file(""));
  EXPECT_EQ(back.train, s.train);
  EXPECT_EQ(back.meta, s.meta);
  EXPECT_EQ(back.test, s.test);

  auto overlap = s;
  overlap.meta.examples.push_back(s.train.examples.front());
  EXPECT_THROW(data::check_disjoint(overlap), apam::ConfigError);
}

TEST(Synthetic, DeterministicAndBalanced) {
  data::SyntheticSpec spec;
  spec.per_class = 20;
  const auto a = data::make_synthetic(spec);
  EXPECT_EQ(a, data::make_synthetic(spec));
  for (auto c : a.class_counts()) EXPECT_EQ(c, 20u);
  spec.seed = 2;
  EXPECT_NE(a, data::make_synthetic(spec));
}
