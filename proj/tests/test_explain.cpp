#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "xcvae/explain.hpp"

namespace xcvae {
namespace {

using testing::random_tensor;

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

TEST(Lrp0, HandCase) {
  // One output unit: z = 1*1 + 2*(-1) = -1.
  Tensor w({1, 2}, std::vector<double>{1, -1});
  EXPECT_EQ(lrp_linear_0(vec({10}), vec({1, 2}), w, {}, 0.0), vec({-10, 20}));
  Tensor r = lrp_linear_0(vec({10}), vec({1, 2}), w);
  EXPECT_NEAR(r[0], -10.0, 1e-7);
  EXPECT_NEAR(r[1], 20.0, 1e-7);
}

TEST(Lrp0, TrivialCases) {
  EXPECT_NEAR(lrp_linear_0(vec({3}), vec({2}), Tensor({1, 1}, 0.7))[0], 3.0, 1e-8);
  std::mt19937_64 rng(1);
  Tensor w = random_tensor({3, 4}, rng);
  EXPECT_EQ(lrp_linear_0(Tensor({3}), random_tensor({4}, rng), w).sum(), 0.0);
}

TEST(LrpAlphaBeta, HandCase) {
  Tensor w({1, 2}, std::vector<double>{1, -1});
  EXPECT_EQ(lrp_linear_alphabeta(vec({10}), vec({1, 2}), w, 2, -1, {}, 0.0), vec({20, -10}));
  Tensor r = lrp_linear_alphabeta(vec({10}), vec({1, 2}), w, 2, -1);
  EXPECT_NEAR(r.sum(), 10.0, 1e-7);
}

TEST(LrpAlphaBeta, RejectsBadWeights) {
  Tensor w({1, 2}, std::vector<double>{1, -1});
  EXPECT_THROW(lrp_linear_alphabeta(vec({1}), vec({1, 2}), w, 2, 0), ValidationError);
  EXPECT_THROW(lrp_conv_alphabeta(Tensor({1, 2, 2}), Tensor({1, 2, 2}), Tensor({1, 1, 1, 1}), 1.5,
                                  -0.4),
               ValidationError);
}

TEST(LrpAlphaBeta, AlphaOneEqualsLrp0OnPositiveInputs) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor w = random_tensor({5, 7}, rng, 0.01, 1.0);
    Tensor x = random_tensor({7}, rng, 0.01, 1.0);
    Tensor r = random_tensor({5}, rng);
    Tensor a = lrp_linear_alphabeta(r, x, w, 1, 0), b = lrp_linear_0(r, x, w);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);

    Tensor k = random_tensor({3, 2, 3, 3}, rng, 0.01, 1.0);
    Tensor xi = random_tensor({2, 5, 4}, rng, 0.01, 1.0);
    Tensor ro = random_tensor({3, 5, 4}, rng);
    Tensor c = lrp_conv_alphabeta(ro, xi, k, 1, 0), d = lrp_conv_0(ro, xi, k);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], d[i], 1e-9);
  }
}

TEST(LrpAlphaBeta, ConvMatchesUnrolledDense) {
  std::mt19937_64 rng(3);
  const std::size_t C = 2, O = 3, H = 4, W = 5, k = 3;
  Tensor kernel = random_tensor({O, C, k, k}, rng);
  Tensor x = random_tensor({C, H, W}, rng);
  Tensor r = random_tensor({O, H, W}, rng);
  // Unroll the convolution into its (O*H*W, C*H*W) matrix column by column.
  Tensor dense({O * H * W, C * H * W});
  for (std::size_t i = 0; i < C * H * W; ++i) {
    Tensor e({C, H, W});
    e[i] = 1.0;
    Tensor col = nn::conv2d_no_bias(e, kernel);
    for (std::size_t j = 0; j < col.size(); ++j) dense.at(j, i) = col[j];
  }
  Tensor conv = lrp_conv_alphabeta(r, x, kernel, 2, -1);
  Tensor flat = lrp_linear_alphabeta(r.reshaped({O * H * W}), x.reshaped({C * H * W}), dense, 2, -1);
  for (std::size_t i = 0; i < conv.size(); ++i) EXPECT_NEAR(conv[i], flat[i], 1e-9);
}

TEST(LrpAlphaBeta, ZeroRelevance) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({2, 4, 4}, rng);
  EXPECT_EQ(lrp_conv_alphabeta(Tensor({3, 4, 4}), x, random_tensor({3, 2, 3, 3}, rng), 2, -1).sum(),
            0.0);
}

TEST(WinnerPath, MaxPoolHandCase) {
  Tensor x({1, 2, 2}, std::vector<double>{1, 4, 2, 3});
  nn::PoolRecord rec = nn::max_pool2(x);
  Tensor r = lrp_maxpool(Tensor({1, 1, 1}, 5.0), rec);
  EXPECT_EQ(r, Tensor({1, 2, 2}, std::vector<double>{0, 5, 0, 0}));
}

TEST(WinnerPath, ConservesExactly) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 11, 9}, rng);
  nn::PoolRecord rec = spp(x);
  Tensor r = random_tensor(rec.output.shape(), rng);
  // Same terms summed in another order.
  EXPECT_NEAR(lrp_maxpool(r, rec).sum(), r.sum(), 1e-12);
}

TEST(WinnerPath, OverlappingBinsAccumulate) {
  // A 1x5 row pooled onto 1x3 bins [0,2), [1,4), [3,5): the 9 wins both of
  // the first two bins.
  Tensor x({1, 1, 5}, std::vector<double>{0, 9, 1, 2, 3});
  nn::PoolRecord rec = nn::adaptive_max_pool(x, 1, 3);
  Tensor r = lrp_maxpool(Tensor({1, 1, 3}, std::vector<double>{2, 5, 7}), rec);
  EXPECT_EQ(r, Tensor({1, 1, 5}, std::vector<double>{0, 7, 0, 0, 7}));
}

TEST(WinnerPath, MissingRecord) {
  EXPECT_THROW(lrp_maxpool(Tensor({1}), nn::PoolRecord{}), ValidationError);
}

TEST(ZB, SinglePath) {
  Tensor r = lrp_linear_zB(vec({4}), vec({0.3}), Tensor({1, 1}, -2.0), 0.0, 1.0);
  EXPECT_NEAR(r[0], 4.0, 1e-8);
  Tensor rc = lrp_input_zB(Tensor({1, 1, 1}, 4.0), Tensor({1, 1, 1}, 0.3), Tensor({1, 1, 1, 1}, 2.0),
                           0.0, 1.0);
  EXPECT_NEAR(rc[0], 4.0, 1e-8);
}

TEST(ZB, InputAtLowerBound) {
  // x = l = 0, h = 1, w = [1, -1]: z = -h w^- = 1; all relevance goes to the
  // pixel with the negative weight.
  Tensor r = lrp_linear_zB(vec({6}), vec({0, 0}), Tensor({1, 2}, std::vector<double>{1, -1}), 0.0,
                           1.0, 0.0);
  EXPECT_EQ(r, vec({0, 6}));
}

TEST(ZB, ConservesOnConv) {
  std::mt19937_64 rng(6);
  Tensor k = random_tensor({3, 1, 5, 5}, rng);
  Tensor x = random_tensor({1, 8, 8}, rng, 0, 1);
  Tensor r = random_tensor({3, 8, 8}, rng);
  Tensor back = lrp_input_zB(r, x, k, 0.0, 1.0);
  EXPECT_NEAR(back.sum(), r.sum(), 1e-5 * std::abs(r.sum()) + 1e-9);
  EXPECT_EQ(lrp_input_zB(Tensor({3, 8, 8}), x, k, 0.0, 1.0).sum(), 0.0);
}

TEST(ZB, RejectsOutOfBox) {
  EXPECT_THROW(lrp_linear_zB(vec({1}), vec({1.5}), Tensor({1, 1}, 1.0), 0.0, 1.0), ValidationError);
  EXPECT_THROW(lrp_input_zB(Tensor({1, 1, 1}), Tensor({1, 1, 1}, -0.1), Tensor({1, 1, 1, 1}, 1.0),
                            0.0, 1.0),
               ValidationError);
}

TEST(GradientTimesInput, LinearStageMatchesLrp0) {
  std::mt19937_64 rng(7);
  Tensor w = random_tensor({3, 4}, rng), r = random_tensor({3}, rng);
  Tensor ones({4}, 1.0);
  EXPECT_EQ(gxi_linear(r, ones, w), lrp_linear_0(r, ones, w));
  EXPECT_EQ(gxi_linear(r, Tensor({4}), w).sum(), 0.0);
}

TEST(GradientTimesInput, Gate) {
  Tensor g({1, 1, 3}, std::vector<double>{2, -1, 3});
  Tensor s({1, 1, 3}, std::vector<double>{1, 1, 0});
  GateRelevance rg = gxi_gate(Tensor({1, 1, 3}, std::vector<double>{6, 5, 7}), g, s, 0.0);
  EXPECT_EQ(rg.global, Tensor({1, 1, 3}, std::vector<double>{6, 0, 0}));
  EXPECT_EQ(rg.side, rg.global);
}

TEST(GradientTimesInput, ContextGateWithConstantGate) {
  nn::Dense cg(3, 3);
  cg.bias = vec({0.2, -1.0, 3.0});
  Tensor f = vec({1.5, -2.0, 0.5}), r = vec({1, 2, 3});
  Tensor back = gxi_context_gate(r, f, cg, 0.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back[i], r[i], 1e-12);
  EXPECT_EQ(gxi_context_gate(r, Tensor({3}), cg).sum(), 0.0);
}

TEST(GradientTimesInput, NetVladFrozenAssignment) {
  Tensor x({2, 2}, std::vector<double>{1, 0, 0, 2});
  Tensor a({2, 2}, std::vector<double>{1, 0, 0.5, 0.5});
  Tensor c({2, 2}, std::vector<double>{0, 0, 1, 1});
  // Cluster 1 residual is (1, 1): dimension 0 comes from x1 alone, dimension 1
  // from 0.5 * x2.
  Tensor r = gxi_netvlad(Tensor({4}, std::vector<double>{4, 3, 0, 0}), x, a, c, 0.0);
  EXPECT_EQ(r, Tensor({2, 2}, std::vector<double>{4, 0, 0, 3}));
  EXPECT_EQ(gxi_netvlad(Tensor({4}, 1.0), Tensor({2, 2}), a, c).sum(), 0.0);
}

ClassifierConfig small_classifier() { return testing::explain_classifier_config(); }

std::vector<Volume> volumes(std::size_t n, std::uint64_t seed = 9) {
  return testing::positive_phantoms(n, seed);
}

TEST(ExplainVolume, ConservationOnBiasFreeNetwork) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ClassifierState s = testing::bias_free_classifier(seed);
    for (const Volume& v : volumes(2, seed)) {
      for (int c : {0, 1}) {
        RelevanceMap m = explain_volume(s, v, c);
        ASSERT_EQ(m.stages.size(), 15u);
        EXPECT_LT(testing::worst_conservation_error(m), 1e-5) << "seed " << seed << " class " << c;
        EXPECT_DOUBLE_EQ(m.stages[0].relevance_out, m.score);
      }
    }
  }
}

TEST(ExplainVolume, ShapesAndDeterminism) {
  ClassifierState s = init_classifier(small_classifier(), 4);
  for (const Volume& v : volumes(2)) {
    RelevanceMap a = explain_volume(s, v, 1), b = explain_volume(s, v, 1);
    EXPECT_EQ(a.image_relevance.shape(), v.intensities.shape());
    EXPECT_EQ(a.mask_relevance.shape(), v.intensities.shape());
    EXPECT_TRUE(a.image_relevance.all_finite());
    EXPECT_EQ(a.image_relevance, b.image_relevance);
    EXPECT_EQ(a.mask_relevance, b.mask_relevance);
  }
}

TEST(ExplainVolume, ZeroHeadGivesZeroMaps) {
  ClassifierState s = init_classifier(small_classifier(), 5);
  s.head.weight.fill(0.0);
  s.head.bias.fill(0.0);
  RelevanceMap m = explain_volume(s, volumes(1)[0], 1);
  for (double v : m.image_relevance.values()) EXPECT_EQ(v, 0.0);
  for (double v : m.mask_relevance.values()) EXPECT_EQ(v, 0.0);
}

TEST(ExplainVolume, RejectsBadInputs) {
  ClassifierState s = init_classifier(small_classifier(), 6);
  const Volume v = volumes(1)[0];
  EXPECT_THROW(explain_volume(s, v, 2), ValidationError);
  s.post_spp.weight[3] = std::nan("");
  EXPECT_THROW(explain_volume(s, v, 1), ValidationError);
  ExplainOptions o;
  o.rules.alpha = 3.0;
  EXPECT_THROW(explain_volume(init_classifier(small_classifier(), 6), v, 1, o), ValidationError);
}

TEST(Smoothing, PreservesConstantsAndMass) {
  Tensor c({2, 9, 7}, 0.4);
  Tensor s = gaussian_smooth(c, 1.5);
  for (double v : s.values()) EXPECT_NEAR(v, 0.4, 1e-14);
  Tensor spike({1, 21, 21});
  spike.at(0, 10, 10) = 1.0;
  Tensor blurred = gaussian_smooth(spike, 1.5);
  EXPECT_NEAR(blurred.sum(), 1.0, 1e-12);
  EXPECT_LT(blurred.at(0, 10, 10), 1.0);
  EXPECT_EQ(gaussian_smooth(spike, 0.0), spike);
}

}  // namespace
}  // namespace xcvae
