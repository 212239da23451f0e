#include <gtest/gtest.h>

#include "test_support.hpp"

namespace xcvae {
namespace {

using testing::random_mask;
using testing::random_tensor;

constexpr double kTol = 1e-4;
constexpr int kConfigs = 5;

TEST(Gradients, EncoderGateMergeContextGate) {
  for (int trial = 0; trial < kConfigs; ++trial) {
    const auto r = testing::encoder_gradient_case(trial);
    EXPECT_LT(r.relative_error, kTol) << "trial " << trial << " worst " << r.worst;
  }
}

TEST(Gradients, Elbo) {
  for (int trial = 0; trial < kConfigs; ++trial) {
    const auto r = testing::elbo_gradient_case(trial);
    EXPECT_LT(r.relative_error, kTol) << "trial " << trial << " worst " << r.worst;
  }
}

TEST(Gradients, ElboGradientReturnsLoss) {
  std::mt19937_64 rng(250);
  CvaeConfig cfg;
  cfg.encoder = testing::tiny_encoder(8, rng);
  cfg.latent_dim = 3;
  CvaeState s = init_cvae(cfg, 1);
  const Tensor image = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
  const Tensor mask = random_mask({1, 8, 8}, rng);
  const Tensor eps = random_tensor({3}, rng);
  CvaeState grad = zeros_like(s);
  EXPECT_DOUBLE_EQ(elbo_gradient(image, mask, 1, s, eps, grad).total(),
                   elbo_loss(image, mask, 1, s, eps).total());
}

TEST(Gradients, SppNetVladHeadFocalLoss) {
  for (int trial = 0; trial < kConfigs; ++trial) {
    const auto r = testing::classifier_gradient_case(trial);
    EXPECT_LT(r.relative_error, kTol) << "trial " << trial << " worst " << r.worst;
  }
}

TEST(Gradients, ClassifierGradientReturnsLoss) {
  std::mt19937_64 rng(350);
  ClassifierConfig cfg;
  cfg.encoder = testing::tiny_encoder(24, rng);
  cfg.descriptor_dim = 5;
  cfg.clusters = 3;
  ClassifierState s = init_classifier(cfg, 2);
  const Volume v = testing::random_volume(3, 24, 1, rng);
  ClassifierState grad = zeros_like(s);
  EXPECT_NEAR(classifier_gradient(v, 1, s, FocalLossParams{}, true, grad),
              focal_loss(classify_volume(v, s).positive, 1, FocalLossParams{}), 1e-12);
}

TEST(Gradients, NetVladLayerAlone) {
  for (int trial = 0; trial < kConfigs; ++trial) {
    std::mt19937_64 rng(400 + trial);
    const std::size_t n = 1 + trial, dim = 3 + trial % 2, clusters = 2 + trial % 3;
    NetVlad layer{random_tensor({clusters, dim}, rng), nn::Dense(clusters, dim)};
    layer.assign.weight = random_tensor({clusters, dim}, rng);
    layer.assign.bias = random_tensor({clusters}, rng);
    const Tensor x = random_tensor({n, dim}, rng);
    const Tensor w = random_tensor({clusters * dim}, rng);
    auto loss = [&](const NetVlad& l, const Tensor& in) {
      const NetVladTrace t = netvlad_forward(in, l);
      double s = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * t.output[i];
      return s;
    };
    NetVlad grad{Tensor(layer.centers.shape()), nn::Dense(clusters, dim)};
    const Tensor dx = netvlad_backward(netvlad_forward(x, layer), layer, w, grad);
    // descriptors
    double diff2 = 0.0, ref2 = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double h = 1e-6, orig = probe[i];
      probe[i] = orig + h;
      const double up = loss(layer, probe);
      probe[i] = orig - h;
      const double down = loss(layer, probe);
      probe[i] = orig;
      const double fd = (up - down) / (2 * h);
      diff2 += (fd - dx[i]) * (fd - dx[i]);
      ref2 += fd * fd;
    }
    EXPECT_LT(std::sqrt(diff2 / ref2), kTol) << "trial " << trial;
    // centers
    diff2 = ref2 = 0.0;
    NetVlad pl = layer;
    for (std::size_t i = 0; i < pl.centers.size(); ++i) {
      const double h = 1e-6, orig = pl.centers[i];
      pl.centers[i] = orig + h;
      const double up = loss(pl, x);
      pl.centers[i] = orig - h;
      const double down = loss(pl, x);
      pl.centers[i] = orig;
      const double fd = (up - down) / (2 * h);
      diff2 += (fd - grad.centers[i]) * (fd - grad.centers[i]);
      ref2 += fd * fd;
    }
    EXPECT_LT(std::sqrt(diff2 / ref2), kTol) << "trial " << trial;
  }
}

}  // namespace
}  // namespace xcvae
