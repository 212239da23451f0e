#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "test_support.hpp"
#include "xcvae/cvae.hpp"

namespace xcvae {
namespace {

using testing::random_tensor;

LatentGaussian gaussian(std::vector<double> mu, std::vector<double> sigma) {
  const std::size_t n = mu.size();
  return {Tensor({n}, std::move(mu)), Tensor({n}, std::move(sigma))};
}

using testing::kl_monte_carlo;

TEST(Kl, ClosedFormValues) {
  EXPECT_NEAR(kl_diag_gaussian(gaussian({1}, {1}), gaussian({0}, {1})), 0.5, 1e-15);
  // variance 4 against variance 1
  EXPECT_NEAR(kl_diag_gaussian(gaussian({0}, {2}), gaussian({0}, {1})),
              std::log(0.5) + 2.0 - 0.5, 1e-15);
  EXPECT_NEAR(kl_diag_gaussian(gaussian({0}, {2}), gaussian({0}, {1})), 0.8069, 1e-4);
}

TEST(Kl, MonteCarloAgrees) {
  EXPECT_NEAR(kl_monte_carlo(1, 1, 0, 1, 1'000'000, 1), 0.5, 1e-2);
  EXPECT_NEAR(kl_monte_carlo(0, 2, 0, 1, 1'000'000, 2), 0.8069, 1e-2);
  EXPECT_NEAR(kl_monte_carlo(0.3, 0.7, -0.2, 1.4, 1'000'000, 3),
              kl_diag_gaussian(gaussian({0.3}, {0.7}), gaussian({-0.2}, {1.4})), 1e-2);
}

TEST(Kl, NonNegativeAndZeroOnlyAtEquality) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> m(-2, 2), s(0.2, 3);
  for (int trial = 0; trial < 200; ++trial) {
    LatentGaussian q = gaussian({m(rng), m(rng), m(rng)}, {s(rng), s(rng), s(rng)});
    LatentGaussian p = gaussian({m(rng), m(rng), m(rng)}, {s(rng), s(rng), s(rng)});
    EXPECT_GT(kl_diag_gaussian(q, p), 1e-9);
    EXPECT_NEAR(kl_diag_gaussian(q, q), 0.0, 1e-9);
  }
}

TEST(Reparameterize, HandExample) {
  Tensor z = reparameterize(gaussian({1, 2}, {1, 0.5}), Tensor({2}, std::vector<double>{-1, 2}));
  EXPECT_EQ(z, Tensor({2}, std::vector<double>{0, 3}));
}

TEST(Reparameterize, ZeroNoiseAndVanishingSigma) {
  LatentGaussian g = gaussian({0.3, -1.2}, {2, 3});
  EXPECT_EQ(reparameterize(g, Tensor({2})), g.mu);
  LatentGaussian tight = gaussian({0.3, -1.2}, {1e-300, 1e-300});
  Tensor z = reparameterize(tight, Tensor({2}, std::vector<double>{5, -7}));
  EXPECT_DOUBLE_EQ(z[0], 0.3);
  EXPECT_DOUBLE_EQ(z[1], -1.2);
}

TEST(Reparameterize, SampleStatistics) {
  LatentGaussian g = gaussian({1.5, -4.0}, {0.8, 2.0});
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = 100'000;
  double s[2] = {0, 0}, ss[2] = {0, 0};
  Tensor eps({2});
  for (std::size_t i = 0; i < n; ++i) {
    eps[0] = normal(rng);
    eps[1] = normal(rng);
    Tensor z = reparameterize(g, eps);
    for (int k = 0; k < 2; ++k) {
      s[k] += z[k];
      ss[k] += z[k] * z[k];
    }
  }
  for (int k = 0; k < 2; ++k) {
    const double mean = s[k] / n, sd = std::sqrt(ss[k] / n - mean * mean);
    EXPECT_NEAR(mean, g.mu[k], 0.01 * std::abs(g.mu[k]));
    EXPECT_NEAR(sd, g.sigma[k], 0.01 * g.sigma[k]);
  }
}

CvaeConfig small_cvae(std::size_t size = 16) {
  CvaeConfig c;
  c.encoder.slice_height = c.encoder.slice_width = size;
  return c;
}

TEST(LatentParams, ZeroParametersGiveStandardNormal) {
  CvaeState s = make_cvae(small_cvae());
  std::mt19937_64 rng(6);
  for (LatentHead h : {LatentHead::prior, LatentHead::posterior}) {
    LatentGaussian g = latent_params(random_tensor({16, 16}, rng, 0, 1),
                                     testing::random_mask({16, 16}, rng), 1, h, s);
    ASSERT_EQ(g.mu.size(), 16u);
    for (std::size_t i = 0; i < 16; ++i) {
      EXPECT_EQ(g.mu[i], 0.0);
      EXPECT_EQ(g.sigma[i], 1.0);
    }
  }
}

TEST(LatentParams, HandSetTwoDimHead) {
  CvaeConfig c = small_cvae(8);
  c.latent_dim = 2;
  c.encoder.embed_dim = c.encoder.pre_merge_dim = c.encoder.merge_dim = 2;
  CvaeState s = make_cvae(c);
  s.encoder.embed_table = Tensor({2, 2}, std::vector<double>{0, 0, 1, 2});
  s.encoder.merge.weight = Tensor({2, 4}, std::vector<double>{0, 0, 1, 0, 0, 0, 0, 1});
  // f = [1, 2]; zero context layer gates by 0.5 -> [0.5, 1]
  s.posterior_head.weight = Tensor({4, 2}, std::vector<double>{1, 0, 0, 1, 0, 0, 1, -1});
  s.posterior_head.bias = Tensor({4}, std::vector<double>{0, 0, 0.5, 0});
  LatentGaussian g = latent_params(Tensor({8, 8}), Tensor({8, 8}), 1, LatentHead::posterior, s);
  EXPECT_DOUBLE_EQ(g.mu[0], 0.5);
  EXPECT_DOUBLE_EQ(g.mu[1], 1.0);
  EXPECT_DOUBLE_EQ(g.sigma[0], std::exp(0.5));
  EXPECT_DOUBLE_EQ(g.sigma[1], std::exp(-0.5));
  LatentGaussian p = latent_params(Tensor({8, 8}), Tensor({8, 8}), 1, LatentHead::prior, s);
  EXPECT_EQ(p.sigma[0], 1.0);
}

TEST(Decode, ShapeAndZeros) {
  CvaeState zero = make_cvae(small_cvae(24));
  Reconstruction r = decode(Tensor({16}), zero);
  EXPECT_EQ(r.x_hat.shape(), (Shape{1, 24, 24}));
  for (double v : r.x_hat.values()) EXPECT_EQ(v, 0.0);
  CvaeState s = init_cvae(small_cvae(24), 7);
  std::mt19937_64 rng(7);
  Reconstruction q = decode(random_tensor({16}, rng), s);
  EXPECT_EQ(q.x_hat.shape(), (Shape{1, 24, 24}));
  EXPECT_TRUE(q.x_hat.all_finite());
  EXPECT_THROW(decode(Tensor({3}), s), ValidationError);
}

TEST(Elbo, ValueDecomposes) {
  CvaeState s = init_cvae(small_cvae(), 8);
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({16, 16}, rng, 0, 1), m = testing::random_mask({16, 16}, rng);
  Tensor eps = random_tensor({16}, rng);
  ElboTerms t = elbo_loss(x, m, 0, s, eps);
  LatentGaussian q = latent_params(x, m, 0, LatentHead::posterior, s);
  LatentGaussian p = latent_params(x, m, 0, LatentHead::prior, s);
  EXPECT_NEAR(t.kl, kl_diag_gaussian(q, p), 1e-12);
  Tensor xh = decode(reparameterize(q, eps), s).x_hat;
  double sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sse += (xh[i] - x[i]) * (xh[i] - x[i]);
  EXPECT_NEAR(t.reconstruction, 0.5 * sse, 1e-10);
  CvaeState g = zeros_like(s);
  ElboTerms tg = elbo_gradient(x, m, 0, s, eps, g);
  EXPECT_EQ(tg.total(), t.total());
}

TEST(Elbo, PerfectReconstructionWithEqualHeadsIsZero) {
  // All-zero model: posterior = prior = N(0, 1), decoder emits zeros.
  CvaeState s = make_cvae(small_cvae());
  ElboTerms t = elbo_loss(Tensor({16, 16}), Tensor({16, 16}), 1, s, Tensor({16}, 0.3));
  EXPECT_EQ(t.reconstruction, 0.0);
  EXPECT_EQ(t.kl, 0.0);
}

PhantomConfig tiny_phantom() {
  PhantomConfig p;
  p.height = p.width = 32;
  p.slices = {2, 3};
  p.seed = 3;
  return p;
}

TEST(Training, DeterministicAndFinite) {
  auto vols = generate_dataset(tiny_phantom(), 4);
  std::vector<const Volume*> train;
  for (const Volume& v : vols) train.push_back(&v);
  CvaeConfig c = small_cvae(32);
  CvaeTrainConfig hp;
  hp.epochs = 3;
  hp.batch_size = 4;
  hp.seed = 11;
  CvaeTrainResult a = train_cvae(train, c, hp), b = train_cvae(train, c, hp);
  ASSERT_EQ(a.trace.size(), 3u);
  for (const EpochLoss& e : a.trace) EXPECT_TRUE(std::isfinite(e.total));
  EXPECT_LT(a.trace.back().total, a.trace.front().total);
  auto pa = collect_params(a.state);
  auto pb = collect_params(b.state);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(*pa[i].tensor == *pb[i].tensor) << pa[i].name;
  }
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

TEST(Training, FrozenSideBiasSilencesEmptyMask) {
  auto vols = generate_dataset(tiny_phantom(), 4);
  std::vector<const Volume*> train;
  for (const Volume& v : vols) train.push_back(&v);
  CvaeConfig c = small_cvae(32);
  c.encoder.side_bias = false;
  CvaeTrainConfig hp;
  hp.epochs = 2;
  hp.batch_size = 4;
  CvaeTrainResult r = train_cvae(train, c, hp);
  for (const auto& p : collect_params(r.state)) {
    if (p.name.starts_with("encoder.side.") && p.name.ends_with(".bias")) {
      EXPECT_EQ(max_abs(*p.tensor), 0.0) << p.name;
    }
  }
  EXPECT_GT(max_abs(r.state.encoder.side.conv1.weight), 0.0);
  const Tensor empty({32, 32});
  EXPECT_EQ(max_abs(branch_forward(empty, r.state.encoder.side).out), 0.0);
}

TEST(Training, NonFiniteLossAborts) {
  auto vols = generate_dataset(tiny_phantom(), 1);
  vols[0].intensities[5] = std::nan("");
  std::vector<const Volume*> train{&vols[0]};
  CvaeTrainConfig hp;
  hp.epochs = 1;
  try {
    train_cvae(train, small_cvae(32), hp);
    FAIL() << "expected RuntimeError";
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Training, EmptySplitRejected) {
  EXPECT_THROW(train_cvae({}, small_cvae(32), CvaeTrainConfig{}), ValidationError);
}

}  // namespace
}  // namespace xcvae
