#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "apam/textmodel.hpp"
#include "support/fixtures.hpp"

using apam::ad::Grad;
using apam::ad::Shape;
using apam::ad::Tape;
using apam::ad::Tensor;
namespace text = apam::text;

namespace {

text::ModelConfig small_config(double dropout = 0.1) {
  text::ModelConfig c;
  c.hash_buckets = 257;
  c.dim = 12;
  c.hidden1 = 16;
  c.hidden2 = 8;
  c.dropout_p = dropout;
  return c;
}

double cosine(const Tensor<float>& a, const Tensor<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST(Vocab, TokenizerSplitsPunctuation) {
  text::Vocab v;
  const auto toks = v.tokenize("Hello, World!  it's\tfine");
  const std::vector<std::string> want = {"hello", ",", "world", "!", "it", "'", "s", "fine"};
  EXPECT_EQ(toks, want);
}

TEST(Vocab, BucketIsPureFunctionOfTokenAndSize) {
  text::Vocab a{1000, true}, b{1000, false};
  EXPECT_EQ(a.bucket("token"), b.bucket("token"));
  EXPECT_LT(a.bucket("token"), 1000u);
  EXPECT_EQ(a.buckets("Token token"), (std::vector<std::size_t>{a.bucket("token"), a.bucket("token")}));
}

TEST(Vocab, EmptyTextIsIngestError) {
  text::Vocab v;
  EXPECT_THROW((void)v.buckets("   \t "), apam::IngestError);
}

TEST(Encode, DefaultWidths) {
  text::ModelConfig c;
  EXPECT_EQ(c.hidden1, 256u);
  EXPECT_EQ(c.hidden2, 128u);
  c.hash_buckets = 512;
  const auto p = text::init_encoder<float>(c, 1);
  EXPECT_EQ(text::encode(p, "a b c", 0, false).shape(), (Shape{1, 128}));
}

TEST(Encode, ZeroDropoutViewsAreIdentical) {
  const auto p = text::init_encoder<float>(small_config(0.0), 3);
  EXPECT_EQ(text::encode(p, "some words here", 1, true), text::encode(p, "some words here", 2, true));
}

TEST(Encode, SameSeedIsDeterministic) {
  const auto p = text::init_encoder<float>(small_config(0.3), 3);
  EXPECT_EQ(text::encode(p, "some words here", 9, true), text::encode(p, "some words here", 9, true));
  EXPECT_NE(text::encode(p, "some words here", 9, true), text::encode(p, "some words here", 10, true));
}

TEST(Encode, EvalModeIgnoresSeed) {
  const auto p = text::init_encoder<float>(small_config(0.3), 3);
  EXPECT_EQ(text::encode(p, "x y", 1, false), text::encode(p, "x y", 2, false));
}

TEST(Encode, DropoutViewsAreCloseButDistinct) {
  const auto p = text::init_encoder<float>(small_config(0.1), 4);
  const double c = cosine(text::encode(p, "a fairly ordinary sentence", 1, true),
                          text::encode(p, "a fairly ordinary sentence", 2, true));
  EXPECT_LT(c, 1.0);
  EXPECT_GT(c, 0.5);
}

TEST(Classify, ZeroHeadGivesUniformSoftmax) {
  auto p = text::init_encoder<double>(small_config(), 5);
  text::init_head(p, 4, 5);
  p.head_w.storage().assign(p.head_w.size(), 0.0);
  p.head_b.storage().assign(p.head_b.size(), 0.0);
  Tape<double> t;
  const auto m = text::bind(t, p, true);
  const auto logits = text::classify(t, m, text::encode(t, m, p.config.vocab().buckets("hi there"), 0, false));
  const auto& probs = t.value(t.softmax(logits));
  for (double v : probs.data()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Classify, SoftmaxSumsToOneAndIdenticalEmbeddingsAgree) {
  auto p = text::init_encoder<float>(small_config(), 6);
  text::init_head(p, 5, 6);
  const auto emb = text::encode(p, "repeat me", 0, false);
  const auto a = text::classify(p, emb);
  EXPECT_EQ(a, text::classify(p, emb));
  Tape<float> t;
  const auto& s = t.value(t.softmax(t.constant(a)));
  double sum = 0;
  for (float v : s.data()) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_TRUE(a.all_finite());
}

TEST(Classify, RejectsWrongEmbeddingWidth) {
  auto p = text::init_encoder<float>(small_config(), 6);
  text::init_head(p, 2, 6);
  EXPECT_THROW((void)text::classify(p, Tensor<float>(Shape{1, 7})), apam::ShapeError);
}

TEST(Classify, MatchesGoldenLogits) {
  const auto golden = apam::testing::load_golden("textmodel_logits.json");
  const auto cfg = golden.at("config").get<text::ModelConfig>();
  auto p = text::init_encoder<double>(cfg, golden.at("seed").get<std::uint64_t>());
  text::init_head(p, golden.at("classes").get<std::size_t>(), golden.at("seed").get<std::uint64_t>());
  for (const auto& item : golden.at("cases")) {
    const auto logits = text::logits(p, item.at("text").get<std::string>());
    const auto want = item.at("logits").get<std::vector<double>>();
    ASSERT_EQ(logits.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(logits[i], want[i], 1e-6);
  }
}

TEST(SgdStep, ArithmeticAndNoOps) {
  auto p = text::init_encoder<double>(small_config(), 7);
  text::init_head(p, 3, 7);
  const auto before = p;
  auto g = text::zeros_like(p, text::kModelTensors);
  text::sgd_step(p, g, 0.5);
  EXPECT_EQ(p, before);

  for (auto& grad : g) grad = Grad<double>::from_dense(Tensor<double>(grad.shape(), 1.0));
  text::sgd_step(p, g, 0.0);
  EXPECT_EQ(p, before);

  p.fc1_b[0] = 1.0;
  Tensor<double> two(p.fc1_b.shape(), 0.0);
  two[0] = 2.0;
  g = text::zeros_like(p, text::kModelTensors);
  g[2] = Grad<double>::from_dense(two);
  text::sgd_step(p, g, 0.1);
  EXPECT_NEAR(p.fc1_b[0], 0.8, 1e-15);
}

TEST(SgdStep, NanGradientNamesLayer) {
  auto p = text::init_encoder<float>(small_config(), 8);
  auto g = text::zeros_like(p, text::kEncoderTensors);
  Tensor<float> bad(p.fc2_w.shape(), 0.0f);
  bad[3] = std::nanf("");
  g[3] = Grad<float>::from_dense(bad);
  try {
    text::sgd_step(p, g, 0.1);
    FAIL() << "expected NumericError";
  } catch (const apam::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("fc2.weight"), std::string::npos);
  }
}

TEST(SgdStep, MisalignedGradientsRejected) {
  auto p = text::init_encoder<float>(small_config(), 8);
  auto g = text::zeros_like(p, text::kEncoderTensors);
  g[1] = Grad<float>::from_dense(Tensor<float>(Shape{2, 2}));
  EXPECT_THROW(text::sgd_step(p, g, 0.1), apam::ContractError);
  g.pop_back();
  EXPECT_THROW(text::sgd_step(p, g, 0.1), apam::ContractError);
}

TEST(Gradients, SparseEmbeddingRowsOnly) {
  auto p = text::init_encoder<double>(small_config(), 9);
  text::init_head(p, 3, 9);
  Tape<double> t;
  const auto m = text::bind(t, p, true);
  const auto ids = p.config.vocab().buckets("alpha beta alpha");
  const auto logits = text::classify(t, m, text::encode(t, m, ids, 1, true));
  const auto g = text::collect(t.backward(t.sum(logits)), m);
  ASSERT_TRUE(g[0].sparse());
  EXPECT_LE(g[0].rows().size(), 2u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto p = text::init_encoder<float>(small_config(), 10);
  text::init_head(p, 3, 10);
  const auto path = (std::filesystem::temp_directory_path() / "apam_textmodel_rt.ckpt").string();
  apam::ckpt::write_file(path, text::to_records(p));
  const auto q = text::from_records<float>(apam::ckpt::read_file(path));
  EXPECT_EQ(p, q);
  EXPECT_EQ(apam::ckpt::encode(text::to_records(p)), apam::ckpt::encode(text::to_records(q)));
  std::filesystem::remove(path);
}

TEST(Checkpoint, EncoderOnlyRoundTrip) {
  const auto p = text::init_encoder<double>(small_config(), 11);
  const auto q = text::from_records<double>(apam::ckpt::decode(apam::ckpt::encode(text::to_records(p))));
  EXPECT_EQ(p, q);
  EXPECT_FALSE(q.has_head());
}

TEST(Checkpoint, CorruptInputRejected) {
  const auto p = text::init_encoder<float>(small_config(), 12);
  auto bytes = apam::ckpt::encode(text::to_records(p));
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW((void)apam::ckpt::decode(truncated), apam::DataError);
  bytes[0] = 'X';
  EXPECT_THROW((void)apam::ckpt::decode(bytes), apam::DataError);
}
