#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "sagdrive/autodiff.hpp"
#include "sagdrive/optim.hpp"
#include "sagdrive/rng.hpp"
#include "probe_util.hpp"
#include "test_util.hpp"

using namespace sagdrive;

TEST(TensorOps, SoftmaxSymmetry) {
  Graph g;
  Var x = g.input(Tensor({2}, {0.0, 0.0}));
  Var y = softmax_last(x);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(TensorOps, SoftmaxRowsSumToOne) {
  Rng rng(11);
  Graph g;
  Var x = g.input(rng.normal_tensor({7, 13}, 3.0));
  Var y = softmax_last(x);
  for (int64_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < 13; ++j) s += y.value().at2(r, j);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(TensorOps, LayerNormConstantVectorIsZero) {
  Graph g;
  Var x = g.input(Tensor::full({1, 8}, 3.7));
  Var gamma = g.input(Tensor::full({8}, 1.0));
  Var beta = g.input(Tensor::zeros({8}));
  Var y = layer_norm(x, gamma, beta);
  for (int64_t j = 0; j < 8; ++j) EXPECT_NEAR(y.value()[j], 0.0, 1e-9);
}

TEST(TensorOps, MatmulIdentity) {
  Rng rng(3);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at2(i, i) = 1.0;
  Tensor x = rng.normal_tensor({3, 3});
  Graph g;
  Var y = matmul(g.input(eye), g.input(x));
  for (int64_t i = 0; i < 9; ++i) EXPECT_NEAR(y.value()[i], x[i], 1e-15);
}

TEST(TensorOps, ShapeMismatchNamesBothShapes) {
  Graph g;
  Var a = g.input(Tensor::zeros({2, 3}));
  Var b = g.input(Tensor::zeros({4, 5}));
  try {
    matmul(a, b);
    FAIL() << "expected shape error";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, b), std::invalid_argument);
}

TEST(TensorOps, OpsDoNotMutateInputs) {
  Rng rng(5);
  Tensor x = rng.normal_tensor({4, 4});
  Tensor x_copy = x;
  Graph g;
  Var vx = g.input(x);
  softmax_last(vx);
  gelu(vx);
  layer_norm(vx, g.input(Tensor::full({4}, 1.0)), g.input(Tensor::zeros({4})));
  matmul(vx, vx);
  for (int64_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(vx.value()[i], x_copy[i]);
}

TEST(TensorOps, MaskedFillSuppressesWeights) {
  Rng rng(9);
  Graph g;
  Var logits = g.input(rng.normal_tensor({6, 6}, 2.0));
  Tensor allow({6, 6});
  for (int64_t q = 0; q < 6; ++q)
    for (int64_t k = 0; k <= q; ++k) allow.at2(q, k) = 1.0;  // causal
  Var w = softmax_last(masked_fill(logits, allow));
  for (int64_t q = 0; q < 6; ++q)
    for (int64_t k = q + 1; k < 6; ++k) EXPECT_LE(w.value().at2(q, k), 1e-12);
}

TEST(Backward, SumOfSquares) {
  Graph g;
  Var x = g.input(Tensor({2}, {1.0, 2.0}));
  Var loss = sum_all(square(x));
  g.backward(loss);
  EXPECT_DOUBLE_EQ(g.grad_of(x)[0], 2.0);
  EXPECT_DOUBLE_EQ(g.grad_of(x)[1], 4.0);
}

TEST(Backward, LinearGradMatchesOuterStructure) {
  Graph g;
  Tensor xv({3, 1}, {1.0, -2.0, 0.5});
  Var w = g.input(Tensor::full({2, 3}, 0.3));
  Var x = g.input(xv);
  Var loss = sum_all(matmul(w, x));
  g.backward(loss);
  const Tensor& gw = g.grad_of(w);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(gw.at2(i, j), xv[j]);
}

TEST(Backward, NonScalarLossRejected) {
  Graph g;
  Var x = g.input(Tensor::zeros({3}));
  EXPECT_THROW(g.backward(x), std::invalid_argument);
}

TEST(Backward, UnreachableLeafGetsZeroGrad) {
  Graph g;
  Var x = g.input(Tensor({2}, {1.0, 1.0}));
  Var orphan = g.input(Tensor({2}, {5.0, 5.0}));
  g.backward(sum_all(x));
  EXPECT_DOUBLE_EQ(g.grad_of(orphan)[0], 0.0);
  EXPECT_DOUBLE_EQ(g.grad_of(orphan)[1], 0.0);
}


TEST(FiniteDifference, AllOpsGradCheck) {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    ParamStore store = oracle::all_ops_params(seed);
    double err = oracle::fd_max_rel_err(store, oracle::all_ops_builder());
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(FiniteDifference, TwoLayerNetwork) {
  Rng rng(42);
  ParamStore store;
  store.create("w1", rng.normal_tensor({6, 8}, 0.5));
  store.create("b1", rng.normal_tensor({8}, 0.1));
  store.create("w2", rng.normal_tensor({8, 4}, 0.5));
  store.create("b2", rng.normal_tensor({4}, 0.1));
  store.create("in", rng.normal_tensor({3, 6}));
  auto build = [](Graph& g, GraphParams& p) {
    Var h = tanh_op(add(matmul(p("in"), p("w1")), p("b1")));
    Var out = add(matmul(h, p("w2")), p("b2"));
    return mean_all(square(out));
  };
  EXPECT_LE(oracle::fd_max_rel_err(store, build), 1e-4);
}

TEST(Adam, ZeroGradLeavesParamsUnchanged) {
  ParamStore store;
  store.create("p", Tensor({2}, {1.5, -0.5}));
  std::map<std::string, Tensor> grads;
  grads.emplace("p", Tensor::zeros({2}));
  EXPECT_TRUE(store.adam_step(grads, AdamConfig{}));
  EXPECT_DOUBLE_EQ(store.value("p")[0], 1.5);
  EXPECT_DOUBLE_EQ(store.value("p")[1], -0.5);
  EXPECT_EQ(store.step(), 1);
}

TEST(Adam, SingleStepOnQuadratic) {
  ParamStore store;
  store.create("x", Tensor({1}, {1.0}));
  AdamConfig cfg;
  cfg.lr = 0.1;
  std::map<std::string, Tensor> grads;
  grads.emplace("x", Tensor({1}, {2.0}));  // d/dx x^2 at 1
  store.adam_step(grads, cfg);
  EXPECT_NEAR(store.value("x")[0], 0.9, 1e-6);
}

TEST(Adam, ConvergesOnQuadratic) {
  ParamStore store;
  store.create("x", Tensor({1}, {1.0}));
  AdamConfig cfg;
  cfg.lr = 0.1;
  for (int i = 0; i < 500; ++i) {
    std::map<std::string, Tensor> grads;
    grads.emplace("x", Tensor({1}, {2.0 * store.value("x")[0]}));
    store.adam_step(grads, cfg);
  }
  EXPECT_LT(std::abs(store.value("x")[0]), 1e-2);
}

TEST(Adam, NonFiniteGradRejected) {
  ParamStore store;
  store.create("x", Tensor({1}, {1.0}));
  std::map<std::string, Tensor> grads;
  grads.emplace("x", Tensor({1}, {std::nan("")}));
  EXPECT_FALSE(store.adam_step(grads, AdamConfig{}));
  EXPECT_DOUBLE_EQ(store.value("x")[0], 1.0);
  EXPECT_EQ(store.step(), 0);
}

TEST(Checkpoint, RoundTripBitExact) {
  Rng rng(77);
  std::vector<std::pair<std::string, Tensor>> records;
  records.emplace_back("layer.weight", rng.normal_tensor({4, 3}));
  records.emplace_back("layer.bias", rng.normal_tensor({3}));
  records.emplace_back("meta.step", Tensor::scalar(123.0));
  std::string path = (std::filesystem::temp_directory_path() / "sag_ckpt_test.bin").string();
  save_checkpoint(path, records);
  auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.size(), records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(loaded[i].first, records[i].first);
    EXPECT_EQ(loaded[i].second.shape, records[i].second.shape);
    EXPECT_EQ(loaded[i].second.data, records[i].second.data);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagicRejected) {
  std::string path = (std::filesystem::temp_directory_path() / "sag_ckpt_bad.bin").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTCK00000000";
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}
