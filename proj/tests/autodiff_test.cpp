#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apam/autodiff/tape.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

using apam::ad::Grad;
using apam::ad::NodeId;
using apam::ad::Shape;
using apam::ad::Tape;
using apam::ad::Tensor;

TEST(Forward, ReluClampsNegatives) {
  Tape<double> t;
  NodeId x = t.constant(Tensor<double>::row({-1, 0, 2}));
  const auto& y = t.value(t.relu(x));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
}

TEST(Forward, DropoutWithZeroRateIsIdentity) {
  Tape<float> t;
  auto in = Tensor<float>::row({0.1f, -3.5f, 7.25f, 1e-8f});
  NodeId x = t.constant(in);
  for (std::uint64_t seed : {0ULL, 1ULL, 987654321ULL}) {
    EXPECT_EQ(t.value(t.dropout(x, 0.0, seed)), in);
  }
}

TEST(Forward, DropoutPreservesExpectation) {
  Tape<double> t;
  NodeId x = t.constant(Tensor<double>(Shape{1, 20000}, 1.0));
  const auto& y = t.value(t.dropout(x, 0.3, 42));
  double mean = 0;
  std::size_t zeros = 0;
  for (double v : y.data()) {
    mean += v;
    zeros += v == 0.0;
  }
  mean /= double(y.size());
  EXPECT_NEAR(mean, 1.0, 0.03);
  EXPECT_NEAR(double(zeros) / double(y.size()), 0.3, 0.015);
}

TEST(Forward, DropoutMaskIsSeedDetermined) {
  Tape<double> t;
  NodeId x = t.constant(Tensor<double>(Shape{4, 8}, 1.0));
  EXPECT_EQ(t.value(t.dropout(x, 0.5, 7)), t.value(t.dropout(x, 0.5, 7)));
  EXPECT_NE(t.value(t.dropout(x, 0.5, 7)), t.value(t.dropout(x, 0.5, 8)));
}

TEST(Forward, SoftmaxMatchesScalarOracle) {
  // e^2 / (e^2 + 2) and 1 / (e^2 + 2)
  const double z = std::exp(2.0) + 2.0;
  Tape<double> t;
  const auto& y = t.value(t.softmax(t.constant(Tensor<double>::row({2, 0, 0}))));
  EXPECT_NEAR(y[0], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(y[1], 1.0 / z, 1e-12);
  EXPECT_NEAR(y[0], 0.7870, 5e-5);
  EXPECT_NEAR(y[1], 0.1065, 5e-5);
  EXPECT_NEAR(y[2], 0.1065, 5e-5);
}

TEST(Forward, ShapeMismatchNamesOpAndShapes) {
  Tape<double> t;
  NodeId a = t.constant(Tensor<double>(Shape{2, 3}));
  NodeId b = t.constant(Tensor<double>(Shape{2, 3}));
  try {
    t.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const apam::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(t.add(a, t.constant(Tensor<double>(Shape{3, 2}))), apam::ShapeError);
}

TEST(Forward, DropoutRateOfOneIsDomainError) {
  Tape<double> t;
  NodeId x = t.constant(Tensor<double>(Shape{1, 3}, 1.0));
  EXPECT_THROW(t.dropout(x, 1.0, 0), apam::DomainError);
  EXPECT_THROW(t.dropout(x, -0.1, 0), apam::DomainError);
}

TEST(Forward, ZeroNormRowRejectedByNormalize) {
  Tape<double> t;
  NodeId x = t.constant(Tensor<double>(Shape{2, 3}, 0.0));
  EXPECT_THROW(t.l2_normalize(x), apam::ContractError);
}

TEST(Backward, MeanGivesUniformGradient) {
  Tape<double> t;
  NodeId x = t.parameter(Tensor<double>::row({1, 2, 3, 4, 5}));
  auto g = t.backward(t.mean(x));
  for (double v : g.at(x).dense()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Backward, SigmoidSlopeAtZero) {
  Tape<double> t;
  NodeId x = t.parameter(Tensor<double>::scalar(0.0));
  auto g = t.backward(t.sigmoid(x));
  EXPECT_DOUBLE_EQ(g.at(x).dense()[0], 0.25);
}

TEST(Backward, NonScalarRootRejected) {
  Tape<double> t;
  NodeId x = t.parameter(Tensor<double>::row({1, 2}));
  EXPECT_THROW(t.backward(t.relu(x)), apam::ContractError);
}

TEST(Backward, RepeatedCallsAreIdempotent) {
  Tape<double> t;
  NodeId x = t.parameter(Tensor<double>::row({0.3, -0.2, 0.9}));
  NodeId root = t.sum(t.mul(t.sigmoid(x), x));
  auto g1 = t.backward(root);
  auto g2 = t.backward(root);
  EXPECT_EQ(g1.at(x).to_dense(), g2.at(x).to_dense());
}

TEST(Backward, GradientShapeMatchesValue) {
  Tape<double> t;
  NodeId w = t.parameter(Tensor<double>(Shape{3, 2}, 0.5));
  NodeId unused = t.parameter(Tensor<double>(Shape{4, 5}, 1.0));
  NodeId x = t.constant(Tensor<double>(Shape{1, 3}, 1.0));
  auto g = t.backward(t.sum(t.matmul(x, w)));
  EXPECT_EQ(g.at(w).shape(), (Shape{3, 2}));
  EXPECT_EQ(g.at(unused).shape(), (Shape{4, 5}));
  const auto zeros = g.at(unused).to_dense();
  for (double v : zeros.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SparseTableMatchesDense) {
  std::mt19937_64 rng(5);
  auto table = apam::testing::random_tensor(rng, {10, 3});
  const std::vector<std::size_t> ids{2, 7, 2, 9};
  auto build = [&](Tape<double>& t, NodeId tab) {
    return t.sum(t.sigmoid(t.mean_rows(t.embedding_lookup(tab, ids))));
  };
  Tape<double> dense_tape;
  NodeId d = dense_tape.bind(table);
  const auto gd = dense_tape.backward(build(dense_tape, d)).at(d);
  Tape<double> sparse_tape;
  NodeId s = sparse_tape.bind_sparse(table);
  const auto gs = sparse_tape.backward(build(sparse_tape, s)).at(s);
  ASSERT_TRUE(gs.sparse());
  EXPECT_EQ(gs.rows(), (std::vector<std::size_t>{2, 7, 9}));
  EXPECT_EQ(gs.to_dense(), gd.to_dense());
  EXPECT_NEAR(apam::ad::dot(gs, gd), apam::ad::dot(gd, gd), 1e-15);
}

TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor<double>> in{
        apam::testing::random_tensor(rng, {3, 4}),  // batch
        apam::testing::random_tensor(rng, {4, 5}),  // w1
        apam::testing::random_tensor(rng, {1, 5}),  // b1
        apam::testing::random_tensor(rng, {5, 2}),  // w2
    };
    auto fn = [](Tape<double>& t, const std::vector<NodeId>& p) {
      std::vector<NodeId> rows;
      for (std::size_t r = 0; r < 3; ++r) {
        NodeId xr = t.gather(p[0], {r * 4, r * 4 + 1, r * 4 + 2, r * 4 + 3});
        NodeId h = t.sigmoid(t.add(t.matmul(t.transpose(xr), p[1]), p[2]));
        rows.push_back(t.matmul(h, p[3]));
      }
      return t.mean(t.log_softmax(t.concat_rows(rows)));
    };
    EXPECT_LT(apam::testing::gradcheck(fn, in), 1e-6) << "trial " << trial;
  }
}

TEST(Backward, EveryOpPassesFiniteDifferenceCheck) {
  std::mt19937_64 rng(2024);
  for (const auto& gen : apam::testing::op_case_generators()) {
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      auto c = gen.make(rng);
      worst = std::max(worst, apam::testing::gradcheck(c.fn, c.inputs));
    }
    EXPECT_LT(worst, 1e-6) << gen.name;
  }
}

namespace {

struct Batch {
  Tape<double> tape;
  NodeId w = 0;
  NodeId table = 0;
  NodeId losses = 0;
};

// Per-example paths sharing `w` and `table`; example e uses rows ids[e].
void build_batch(Batch& b, const Tensor<double>& w, const Tensor<double>& table,
                 const std::vector<std::vector<std::size_t>>& ids) {
  b.w = b.tape.bind(w);
  b.table = b.tape.bind_sparse(table);
  std::vector<NodeId> per;
  for (const auto& row : ids) {
    NodeId pooled = b.tape.mean_rows(b.tape.embedding_lookup(b.table, row));
    NodeId logits = b.tape.matmul(b.tape.relu(pooled), b.w);
    per.push_back(b.tape.scale(b.tape.gather(b.tape.log_softmax(logits), {0}), -1.0));
  }
  b.losses = b.tape.concat_rows(per);
}

}  // namespace

TEST(PerSample, SingleExampleEqualsBackward) {
  std::mt19937_64 rng(3);
  auto w = apam::testing::random_tensor(rng, {3, 4});
  auto table = apam::testing::random_tensor(rng, {6, 3});
  Batch b;
  build_batch(b, w, table, {{1, 4}});
  const NodeId leaves[] = {b.w, b.table};
  auto per = b.tape.per_sample_grads(b.losses, leaves);
  ASSERT_EQ(per.size(), 1u);
  auto full = b.tape.backward(b.tape.sum(b.losses));
  EXPECT_EQ(per[0].at(b.w).to_dense(), full.at(b.w).to_dense());
  EXPECT_EQ(per[0].at(b.table).to_dense(), full.at(b.table).to_dense());
}

TEST(PerSample, DuplicateExamplesGetEqualGradients) {
  std::mt19937_64 rng(4);
  auto w = apam::testing::random_tensor(rng, {3, 4});
  auto table = apam::testing::random_tensor(rng, {6, 3});
  Batch b;
  build_batch(b, w, table, {{0, 5, 2}, {0, 5, 2}, {3}});
  const NodeId leaves[] = {b.w, b.table};
  auto per = b.tape.per_sample_grads(b.losses, leaves);
  EXPECT_EQ(per[0].at(b.w).to_dense(), per[1].at(b.w).to_dense());
  EXPECT_EQ(per[0].at(b.table).to_dense(), per[1].at(b.table).to_dense());
}

TEST(PerSample, SumOfMapsEqualsBackwardOfSum) {
  std::mt19937_64 rng(6);
  auto w = apam::testing::random_tensor(rng, {3, 4});
  auto table = apam::testing::random_tensor(rng, {8, 3});
  Batch b;
  build_batch(b, w, table, {{0, 1}, {2, 3, 3}, {7}, {1, 6}});
  const NodeId leaves[] = {b.w, b.table};
  auto per = b.tape.per_sample_grads(b.losses, leaves);
  ASSERT_EQ(per.size(), 4u);
  auto full = b.tape.backward(b.tape.sum(b.losses));
  for (NodeId leaf : leaves) {
    Grad<double> acc(full.at(leaf).shape(), true);
    for (const auto& m : per) acc.add_scaled(m.at(leaf), 1.0);
    const auto expect = full.at(leaf).to_dense();
    EXPECT_LT(apam::testing::relative_error(acc.to_dense().data(), expect.data()), 1e-6);
  }
}

TEST(PerSample, RejectsMatrixLosses) {
  Tape<double> t;
  NodeId x = t.parameter(Tensor<double>(Shape{2, 2}, 1.0));
  const NodeId leaves[] = {x};
  EXPECT_THROW(t.per_sample_grads(t.relu(x), leaves), apam::ContractError);
}

TEST(Determinism, IdenticalSeedsGiveBitwiseIdenticalTapes) {
  auto run = [] {
    Tape<float> t(99);
    NodeId x = t.parameter(Tensor<float>(Shape{3, 16}, 0.25f));
    NodeId y = t.dropout(x, 0.4, t.next_seed());
    NodeId z = t.softmax(t.dropout(y, 0.2, t.next_seed()));
    auto g = t.backward(t.mean(t.log(z)));
    return std::pair{t.value(z), g.at(x).to_dense()};
  };
  EXPECT_EQ(run(), run());
}
