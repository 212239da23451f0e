#include "xcvae/cvae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "xcvae/optim.hpp"

namespace xcvae {
namespace {

struct DecoderTrace {
  Tensor z;
  Tensor proj_z;
  Tensor grid;
  Tensor t1_z, up1;
  Tensor t2_z, up2;
  Tensor t3_z;
  Tensor out;
};

DecoderTrace decoder_forward(const Tensor& z, const CvaeState& s) {
  const auto& cfg = s.config;
  if (z.size() != cfg.latent_dim) {
    throw ValidationError("decode: latent of size " + std::to_string(z.size()) + ", expected " +
                          std::to_string(cfg.latent_dim));
  }
  DecoderTrace t;
  t.z = z;
  t.proj_z = nn::dense_forward(z, s.project);
  t.grid = nn::leaky_relu(t.proj_z);
  t.grid.reshape({cfg.grid_channels, cfg.encoder.pooled_height(), cfg.encoder.pooled_width()});
  t.t1_z = nn::conv_transpose2d_forward(t.grid, s.tconv1);
  t.up1 = nn::upsample_bilinear2x(nn::leaky_relu(t.t1_z));
  t.t2_z = nn::conv_transpose2d_forward(t.up1, s.tconv2);
  t.up2 = nn::upsample_bilinear2x(nn::leaky_relu(t.t2_z));
  t.t3_z = nn::conv_transpose2d_forward(t.up2, s.tconv3);
  t.out = nn::upsample_bilinear2x(nn::leaky_relu(t.t3_z));
  return t;
}

Tensor decoder_backward(const CvaeState& s, const DecoderTrace& t, const Tensor& grad_out,
                        CvaeState& g) {
  Tensor d = nn::upsample_bilinear2x_backward(grad_out, t.t3_z.shape());
  d = nn::leaky_relu_backward(t.t3_z, d);
  Tensor d_in;
  nn::conv_transpose2d_backward(t.up2, s.tconv3, d, g.tconv3, &d_in);
  d = nn::leaky_relu_backward(t.t2_z, nn::upsample_bilinear2x_backward(d_in, t.t2_z.shape()));
  nn::conv_transpose2d_backward(t.up1, s.tconv2, d, g.tconv2, &d_in);
  d = nn::leaky_relu_backward(t.t1_z, nn::upsample_bilinear2x_backward(d_in, t.t1_z.shape()));
  nn::conv_transpose2d_backward(t.grid, s.tconv1, d, g.tconv1, &d_in);
  d_in.reshape(t.proj_z.shape());
  Tensor d_z;
  nn::dense_backward(t.z, s.project, nn::leaky_relu_backward(t.proj_z, d_in), g.project, &d_z);
  return d_z;
}

LatentGaussian split_head(const Tensor& raw, std::size_t latent) {
  LatentGaussian g{Tensor({latent}), Tensor({latent})};
  for (std::size_t i = 0; i < latent; ++i) {
    g.mu[i] = raw[i];
    g.sigma[i] = std::exp(raw[latent + i]);
  }
  return g;
}

Tensor squeeze_slice(const Tensor& x) {
  if (x.rank() == 2) return x.reshaped({1, x.dim(0), x.dim(1)});
  return x;
}

}  // namespace

void LatentGaussian::validate() const {
  require_same_shape(mu, sigma, "latent gaussian");
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!std::isfinite(mu[i]) || !std::isfinite(sigma[i]) || !(sigma[i] > 0)) {
      throw ValidationError("latent gaussian: mu must be finite and sigma positive");
    }
  }
}

CvaeState make_cvae(const CvaeConfig& cfg) {
  CvaeState s;
  s.config = cfg;
  s.encoder = make_encoder(cfg.encoder);
  const std::size_t m = cfg.encoder.merge_dim;
  s.prior_head = nn::Dense(2 * cfg.latent_dim, m);
  s.posterior_head = nn::Dense(2 * cfg.latent_dim, m);
  s.project = nn::Dense(
      cfg.grid_channels * cfg.encoder.pooled_height() * cfg.encoder.pooled_width(), cfg.latent_dim);
  s.tconv1 = nn::ConvTranspose2d(cfg.grid_channels, cfg.tconv1_filters, cfg.tconv1_kernel);
  s.tconv2 = nn::ConvTranspose2d(cfg.tconv1_filters, cfg.tconv2_filters, cfg.tconv2_kernel);
  s.tconv3 = nn::ConvTranspose2d(cfg.tconv2_filters, 1, cfg.tconv3_kernel);
  return s;
}

CvaeState init_cvae(const CvaeConfig& cfg, std::uint64_t seed) {
  CvaeState s = make_cvae(cfg);
  nn::Rng rng(seed);
  init_encoder(s.encoder, rng);
  nn::init_glorot(s.prior_head, rng);
  nn::init_glorot(s.posterior_head, rng);
  // Heads start near N(0, 1) so the first KL terms stay small.
  s.prior_head.weight *= 0.1;
  s.posterior_head.weight *= 0.1;
  nn::init_he(s.project, rng);
  nn::init_he(s.tconv1, rng);
  nn::init_he(s.tconv2, rng);
  nn::init_he(s.tconv3, rng);
  return s;
}

LatentGaussian latent_params(const Tensor& image, const Tensor& mask, int label, LatentHead head,
                             const CvaeState& state) {
  const EncoderTrace t = encoder_forward(state.encoder, image, mask, label);
  const nn::Dense& d = head == LatentHead::prior ? state.prior_head : state.posterior_head;
  return split_head(nn::dense_forward(t.output(), d), state.config.latent_dim);
}

Tensor reparameterize(const LatentGaussian& g, const Tensor& eps) {
  require_same_shape(g.mu, eps, "reparameterize");
  Tensor z(g.mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = g.mu[i] + g.sigma[i] * eps[i];
  return z;
}

Reconstruction decode(const Tensor& z, const CvaeState& state) {
  return {decoder_forward(z, state).out};
}

double kl_diag_gaussian(const LatentGaussian& q, const LatentGaussian& p) {
  require_same_shape(q.mu, p.mu, "kl");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.mu.size(); ++i) {
    const double vq = q.sigma[i] * q.sigma[i], vp = p.sigma[i] * p.sigma[i];
    const double dm = q.mu[i] - p.mu[i];
    kl += std::log(p.sigma[i] / q.sigma[i]) + (vq + dm * dm) / (2 * vp) - 0.5;
  }
  return kl;
}

namespace {

ElboTerms elbo_impl(const Tensor& image_in, const Tensor& mask, int label, const CvaeState& s,
                    const Tensor& eps, CvaeState* grad) {
  const Tensor image = squeeze_slice(image_in);
  const std::size_t L = s.config.latent_dim;
  const EncoderTrace enc = encoder_forward(s.encoder, image, mask, label);
  const Tensor post_raw = nn::dense_forward(enc.output(), s.posterior_head);
  const Tensor prior_raw = nn::dense_forward(enc.output(), s.prior_head);
  const LatentGaussian q = split_head(post_raw, L);
  const LatentGaussian p = split_head(prior_raw, L);
  const Tensor z = reparameterize(q, eps);
  const DecoderTrace dec = decoder_forward(z, s);

  ElboTerms terms;
  Tensor d_xhat(dec.out.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double r = dec.out[i] - image[i];
    terms.reconstruction += 0.5 * r * r;
    d_xhat[i] = r;
  }
  terms.kl = kl_diag_gaussian(q, p);
  if (!grad) return terms;

  const Tensor d_z = decoder_backward(s, dec, d_xhat, *grad);
  Tensor d_post({2 * L}), d_prior({2 * L});
  for (std::size_t i = 0; i < L; ++i) {
    const double vq = q.sigma[i] * q.sigma[i], vp = p.sigma[i] * p.sigma[i];
    const double dm = q.mu[i] - p.mu[i];
    d_post[i] = d_z[i] + dm / vp;
    d_post[L + i] = d_z[i] * q.sigma[i] * eps[i] + (vq / vp - 1.0);
    d_prior[i] = -dm / vp;
    d_prior[L + i] = 1.0 - (vq + dm * dm) / vp;
  }
  Tensor d_h, d_h_prior;
  nn::dense_backward(enc.output(), s.posterior_head, d_post, grad->posterior_head, &d_h);
  nn::dense_backward(enc.output(), s.prior_head, d_prior, grad->prior_head, &d_h_prior);
  d_h += d_h_prior;
  encoder_backward(s.encoder, enc, d_h, grad->encoder);
  return terms;
}

}  // namespace

ElboTerms elbo_loss(const Tensor& image, const Tensor& mask, int label, const CvaeState& state,
                    const Tensor& eps) {
  return elbo_impl(image, mask, label, state, eps, nullptr);
}

ElboTerms elbo_gradient(const Tensor& image, const Tensor& mask, int label,
                        const CvaeState& state, const Tensor& eps, CvaeState& grad) {
  return elbo_impl(image, mask, label, state, eps, &grad);
}

CvaeTrainResult train_cvae(const std::vector<const Volume*>& train, const CvaeConfig& model,
                           const CvaeTrainConfig& hp, const EpochCallback& on_epoch) {
  struct Sample {
    std::size_t volume, slice;
  };
  std::vector<Sample> samples;
  for (std::size_t v = 0; v < train.size(); ++v) {
    for (std::size_t s = 0; s < train[v]->slices(); ++s) samples.push_back({v, s});
  }
  if (samples.empty()) throw ValidationError("train_cvae: empty training split");
  if (hp.batch_size == 0) throw ValidationError("train_cvae: batch_size must be positive");

  CvaeTrainResult result{init_cvae(model, hp.seed), {}};
  CvaeState& state = result.state;
  CvaeState grad = zeros_like(state);
  Adam adam(AdamConfig{.learning_rate = hp.learning_rate});
  std::mt19937_64 rng(hp.seed ^ 0xC0FFEE1234ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor eps({model.latent_dim});

  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    std::shuffle(samples.begin(), samples.end(), rng);
    EpochLoss acc{epoch};
    for (std::size_t start = 0, batch = 0; start < samples.size(); start += hp.batch_size, ++batch) {
      const std::size_t end = std::min(samples.size(), start + hp.batch_size);
      visit_params(grad, "", [](const std::string&, Tensor& t) { t.fill(0.0); });
      for (std::size_t k = start; k < end; ++k) {
        const Volume& v = *train[samples[k].volume];
        const Tensor image = v.image_slice(samples[k].slice);
        Tensor mask = v.mask_slice(samples[k].slice);
        if (!hp.use_side_information) mask.fill(1.0);
        for (double& e : eps.values()) e = normal(rng);
        const ElboTerms t = elbo_gradient(image, mask, v.label, state, eps, grad);
        if (!std::isfinite(t.total())) {
          std::ostringstream msg;
          msg << "train_cvae: non-finite loss at epoch " << epoch << ", batch " << batch
              << " (volume " << v.id << ", slice " << samples[k].slice
              << "): reconstruction=" << t.reconstruction << " kl=" << t.kl;
          throw RuntimeError(msg.str());
        }
        acc.reconstruction += t.reconstruction;
        acc.kl += t.kl;
      }
      const double scale = 1.0 / double(end - start);
      visit_params(grad, "", [&](const std::string&, Tensor& t) { t *= scale; });
      adam.step(state, grad, [&](const std::string& name) {
        return !side_bias_frozen(model.encoder, name);
      });
    }
    const double n = double(samples.size());
    acc.reconstruction /= n;
    acc.kl /= n;
    acc.total = acc.reconstruction + acc.kl;
    result.trace.push_back(acc);
    if (on_epoch) on_epoch(acc);
  }
  return result;
}

}  // namespace xcvae
