#pragma once

// Conditional VAE over single slices. Prior and posterior Gaussians share the
// encoder trunk and differ only in their dense heads; the decoder projects a
// latent onto a coarse grid and restores full resolution through three
// transposed-conv + bilinear stages. The generative variance is fixed, so the
// reconstruction term is half the summed squared error.

#include <cstdint>
#include <functional>
#include <vector>

#include "xcvae/encoder.hpp"
#include "xcvae/layers.hpp"
#include "xcvae/phantom.hpp"
#include "xcvae/tensor.hpp"

namespace xcvae {

inline constexpr std::size_t kLatentDim = 16;

struct LatentGaussian {
  Tensor mu;
  Tensor sigma;

  void validate() const;
};

struct CvaeConfig {
  EncoderConfig encoder;
  std::size_t latent_dim = kLatentDim;
  std::size_t grid_channels = 64;
  std::size_t tconv1_filters = 32;
  std::size_t tconv1_kernel = 3;
  std::size_t tconv2_filters = 16;
  std::size_t tconv2_kernel = 3;
  std::size_t tconv3_kernel = 2;
};

struct CvaeState {
  CvaeConfig config;
  EncoderState encoder;
  nn::Dense prior_head;      // merge_dim -> (mu, log sigma)
  nn::Dense posterior_head;  // merge_dim -> (mu, log sigma)
  nn::Dense project;         // latent -> grid_channels * (H/8) * (W/8)
  nn::ConvTranspose2d tconv1, tconv2, tconv3;
};

template <class S, class Fn>
  requires StateOf<S, CvaeState>
void visit_params(S& c, const std::string& prefix, Fn&& fn) {
  visit_params(c.encoder, prefix + "encoder.", fn);
  visit_params(c.prior_head, prefix + "prior_head", fn);
  visit_params(c.posterior_head, prefix + "posterior_head", fn);
  visit_params(c.project, prefix + "decoder.project", fn);
  visit_params(c.tconv1, prefix + "decoder.tconv1", fn);
  visit_params(c.tconv2, prefix + "decoder.tconv2", fn);
  visit_params(c.tconv3, prefix + "decoder.tconv3", fn);
}

CvaeState make_cvae(const CvaeConfig& cfg);
CvaeState init_cvae(const CvaeConfig& cfg, std::uint64_t seed);

enum class LatentHead { prior, posterior };

LatentGaussian latent_params(const Tensor& image, const Tensor& mask, int label, LatentHead head,
                             const CvaeState& state);

/// mu + sigma ⊙ eps.
Tensor reparameterize(const LatentGaussian& g, const Tensor& eps);

struct Reconstruction {
  Tensor x_hat;  // (1, H, W)
};

Reconstruction decode(const Tensor& z, const CvaeState& state);

/// Closed-form KL(q || p) for diagonal Gaussians, summed over dimensions.
double kl_diag_gaussian(const LatentGaussian& q, const LatentGaussian& p);

struct ElboTerms {
  double reconstruction = 0.0;  // 0.5 * sum (x_hat - x)^2
  double kl = 0.0;
  double total() const { return reconstruction + kl; }
};

/// Negative ELBO for one slice with externally supplied noise.
ElboTerms elbo_loss(const Tensor& image, const Tensor& mask, int label, const CvaeState& state,
                    const Tensor& eps);
/// Same value as elbo_loss; accumulates d(loss)/d(params) into grad.
ElboTerms elbo_gradient(const Tensor& image, const Tensor& mask, int label,
                        const CvaeState& state, const Tensor& eps, CvaeState& grad);

struct CvaeTrainConfig {
  int epochs = 200;
  double learning_rate = 5e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  /// When false every mask is replaced by ones, which makes the gate a
  /// pass-through of the global branch.
  bool use_side_information = true;
};

struct EpochLoss {
  int epoch = 0;
  double reconstruction = 0.0;  // per-slice means
  double kl = 0.0;
  double total = 0.0;
};

struct CvaeTrainResult {
  CvaeState state;
  std::vector<EpochLoss> trace;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

/// Adam over every slice of every training volume, each slice paired with
/// its volume label. Deterministic given the seeds.
CvaeTrainResult train_cvae(const std::vector<const Volume*>& train, const CvaeConfig& model,
                           const CvaeTrainConfig& hp, const EpochCallback& on_epoch = {});

}  // namespace xcvae
