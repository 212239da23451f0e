#include "xcvae/classifier.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "xcvae/optim.hpp"

namespace xcvae {
namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;

constexpr double kNormEps = 1e-12;
constexpr std::size_t kDefaultLevels[] = {5, 3, 2};

ConstMapRM rows_of(const Tensor& t) {
  return ConstMapRM(t.data(), Eigen::Index(t.dim(0)), Eigen::Index(t.size() / t.dim(0)));
}
MapRM rows_of(Tensor& t) {
  return MapRM(t.data(), Eigen::Index(t.dim(0)), Eigen::Index(t.size() / t.dim(0)));
}

void check_shapes(const Branch& src, const Branch& dst, const std::string& prefix) {
  const auto a = collect_params(src, prefix);
  const auto b = collect_params(dst, prefix);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tensor->shape() != b[i].tensor->shape()) {
      throw ValidationError("transfer_weights: shape mismatch for " + a[i].name + ": source " +
                            to_string(a[i].tensor->shape()) + ", target " +
                            to_string(b[i].tensor->shape()));
    }
  }
}

void init_aggregation(ClassifierState& s, nn::Rng& rng) {
  nn::init_he(s.post_spp, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto C = rows_of(s.netvlad.centers);
  for (Eigen::Index k = 0; k < C.rows(); ++k) {
    for (Eigen::Index j = 0; j < C.cols(); ++j) C(k, j) = normal(rng);
    C.row(k).normalize();
  }
  nn::init_glorot(s.netvlad.assign, rng);
  nn::init_glorot(s.head, rng);
}

}  // namespace

std::size_t ClassifierConfig::spp_length() const {
  std::size_t bins = 0;
  for (std::size_t l : spp_levels) bins += l * l;
  return encoder.conv3_filters * bins;
}

void ClassifierConfig::validate() const {
  if (spp_levels.empty()) throw ValidationError("classifier: no pyramid levels");
  const std::size_t largest = *std::max_element(spp_levels.begin(), spp_levels.end());
  if (encoder.slice_height / 4 < largest || encoder.slice_width / 4 < largest) {
    throw ValidationError("classifier: slices of " + std::to_string(encoder.slice_height) + "x" +
                          std::to_string(encoder.slice_width) +
                          " give conv3 maps smaller than the largest pyramid level");
  }
  if (!descriptor_dim || !clusters) throw ValidationError("classifier: empty NetVLAD layer");
}

ClassifierState make_classifier(const ClassifierConfig& cfg) {
  cfg.validate();
  ClassifierState s;
  s.config = cfg;
  s.global = make_branch(cfg.encoder);
  s.side = make_branch(cfg.encoder);
  s.post_spp = nn::Dense(cfg.descriptor_dim, cfg.spp_length());
  s.netvlad.centers = Tensor({cfg.clusters, cfg.descriptor_dim});
  s.netvlad.assign = nn::Dense(cfg.clusters, cfg.descriptor_dim);
  s.head = nn::Dense(2, cfg.clusters * cfg.descriptor_dim);
  return s;
}

ClassifierState init_classifier(const ClassifierConfig& cfg, std::uint64_t seed) {
  ClassifierState s = make_classifier(cfg);
  nn::Rng rng(seed);
  for (Branch* b : {&s.global, &s.side}) {
    nn::init_he(b->conv1, rng);
    nn::init_he(b->conv2, rng);
    nn::init_he(b->conv3, rng);
  }
  init_aggregation(s, rng);
  return s;
}

ClassifierState transfer_weights(const CvaeState& cvae, const ClassifierConfig& cfg,
                                 std::uint64_t seed) {
  ClassifierState s = make_classifier(cfg);
  check_shapes(cvae.encoder.global, s.global, "encoder.global");
  check_shapes(cvae.encoder.side, s.side, "encoder.side");
  s.global = cvae.encoder.global;
  s.side = cvae.encoder.side;
  nn::Rng rng(seed);
  // Burn the draws a fresh branch init would take so aggregation layers match
  // the random-init variant for the same seed.
  ClassifierState scratch = make_classifier(cfg);
  for (Branch* b : {&scratch.global, &scratch.side}) {
    nn::init_he(b->conv1, rng);
    nn::init_he(b->conv2, rng);
    nn::init_he(b->conv3, rng);
  }
  init_aggregation(s, rng);
  return s;
}

nn::PoolRecord spp(const Tensor& feature_map, std::span<const std::size_t> levels) {
  if (levels.empty()) levels = kDefaultLevels;
  return nn::spatial_pyramid_pool(feature_map, levels);
}

Tensor vlad_residuals(const Tensor& x, const Tensor& a, const Tensor& centers) {
  const auto X = rows_of(x);
  const auto A = rows_of(a);
  const auto C = rows_of(centers);
  Tensor v({centers.dim(0), centers.dim(1)});
  auto V = rows_of(v);
  V.noalias() = A.transpose() * X;
  const Eigen::VectorXd mass = A.colwise().sum().transpose();
  for (Eigen::Index k = 0; k < V.rows(); ++k) V.row(k) -= mass(k) * C.row(k);
  return v;
}

NetVladTrace netvlad_forward(const Tensor& descriptors, const NetVlad& layer) {
  if (descriptors.rank() != 2 || descriptors.dim(0) == 0) {
    throw ValidationError("netvlad: need at least one descriptor");
  }
  const std::size_t n = descriptors.dim(0), d = descriptors.dim(1);
  const std::size_t M = layer.centers.dim(0);
  if (d != layer.centers.dim(1)) throw ValidationError("netvlad: descriptor dimension mismatch");

  NetVladTrace t;
  t.descriptors = descriptors;
  t.assignment = Tensor({n, M});
  auto A = rows_of(t.assignment);
  A.noalias() = rows_of(descriptors) * rows_of(layer.assign.weight).transpose();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = A.row(Eigen::Index(i));
    for (std::size_t k = 0; k < M; ++k) row(Eigen::Index(k)) += layer.assign.bias[k];
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  t.residual = vlad_residuals(descriptors, t.assignment, layer.centers);
  t.intra = t.residual;
  auto U = rows_of(t.intra);
  for (Eigen::Index k = 0; k < U.rows(); ++k) {
    U.row(k) /= std::sqrt(U.row(k).squaredNorm() + kNormEps);
  }
  t.output = t.intra.reshaped({M * d});
  const double norm = std::sqrt(rows_of(t.intra).squaredNorm() + kNormEps);
  t.output *= 1.0 / norm;
  return t;
}

Tensor netvlad_backward(const NetVladTrace& t, const NetVlad& layer, const Tensor& grad_output,
                        NetVlad& grad) {
  const std::size_t M = layer.centers.dim(0), d = layer.centers.dim(1);
  const auto U = rows_of(t.intra);
  const auto V = rows_of(t.residual);
  const auto X = rows_of(t.descriptors);
  const auto A = rows_of(t.assignment);
  const ConstMapRM dv(grad_output.data(), Eigen::Index(M), Eigen::Index(d));

  const double n = std::sqrt(U.squaredNorm() + kNormEps);
  const MatRM dU = dv / n - U * (U.cwiseProduct(dv).sum() / (n * n * n));
  MatRM dV(M, d);
  for (Eigen::Index k = 0; k < Eigen::Index(M); ++k) {
    const double nk = std::sqrt(V.row(k).squaredNorm() + kNormEps);
    dV.row(k) = dU.row(k) / nk - V.row(k) * (V.row(k).dot(dU.row(k)) / (nk * nk * nk));
  }
  const auto C = rows_of(layer.centers);
  auto dC = rows_of(grad.centers);
  const Eigen::VectorXd mass = A.colwise().sum().transpose();
  for (Eigen::Index k = 0; k < Eigen::Index(M); ++k) dC.row(k) -= mass(k) * dV.row(k);

  // dA_ik = dV_k . (x_i - c_k)
  MatRM dA = X * dV.transpose();
  const Eigen::VectorXd cdot = (C.cwiseProduct(dV)).rowwise().sum();
  dA.rowwise() -= cdot.transpose();
  MatRM dlogit = A.cwiseProduct(dA);
  const Eigen::VectorXd rowdot = dlogit.rowwise().sum();
  dlogit -= A.cwiseProduct(rowdot.replicate(1, Eigen::Index(M)));

  rows_of(grad.assign.weight).noalias() += dlogit.transpose() * X;
  Eigen::Map<Eigen::VectorXd>(grad.assign.bias.data(), Eigen::Index(M)) +=
      dlogit.colwise().sum().transpose();

  Tensor dx(t.descriptors.shape());
  auto dX = rows_of(dx);
  dX.noalias() = A * dV + dlogit * rows_of(layer.assign.weight);
  return dx;
}

ClassifierTrace classifier_forward(const Volume& v, const ClassifierState& s, bool use_mask) {
  if (v.slices() == 0) throw ValidationError("classify: volume " + v.id + " has no slices");
  ClassifierTrace t;
  t.slices.resize(v.slices());
  const std::size_t D = s.config.descriptor_dim;
  Tensor descriptors({v.slices(), D});
  for (std::size_t i = 0; i < v.slices(); ++i) {
    SliceTrace& st = t.slices[i];
    st.global = branch_forward(v.image_slice(i), s.global);
    Tensor mask = v.mask_slice(i);
    if (!use_mask) mask.fill(1.0);
    st.side = branch_forward(mask, s.side);
    st.gated = gate(st.global.out, st.side.out);
    st.pyramid = spp(st.gated, s.config.spp_levels);
    st.post_z = nn::dense_forward(st.pyramid.output, s.post_spp);
    st.descriptor = nn::relu(st.post_z);
    std::copy_n(st.descriptor.data(), D, descriptors.data() + i * D);
  }
  t.vlad = netvlad_forward(descriptors, s.netvlad);
  t.logits = nn::dense_forward(t.vlad.output, s.head);
  const double mx = std::max(t.logits[0], t.logits[1]);
  const double e0 = std::exp(t.logits[0] - mx), e1 = std::exp(t.logits[1] - mx);
  t.probs = Tensor({2}, {e0 / (e0 + e1), e1 / (e0 + e1)});
  return t;
}

Probabilities classify_volume(const Volume& v, const ClassifierState& s, bool use_mask) {
  const ClassifierTrace t = classifier_forward(v, s, use_mask);
  return {t.probs[0], t.probs[1]};
}

double focal_loss(double p, int label, const FocalLossParams& fp, FocalDiagnostics* diag) {
  if (label != 0 && label != 1) throw ValidationError("focal_loss: label must be 0 or 1");
  const double clamped = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  if (diag && (clamped != p || !std::isfinite(p))) ++diag->clamped;
  const double pt = label == 1 ? clamped : 1.0 - clamped;
  const double lambda = label == 1 ? fp.lambda_positive : fp.lambda_negative;
  return -lambda * std::pow(1.0 - pt, fp.gamma) * std::log(pt);
}

double focal_loss_derivative(double p, int label, const FocalLossParams& fp) {
  if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) return 0.0;
  const double pt = label == 1 ? p : 1.0 - p;
  const double lambda = label == 1 ? fp.lambda_positive : fp.lambda_negative;
  const double q = 1.0 - pt;
  const double dpt = lambda * (fp.gamma * std::pow(q, fp.gamma - 1.0) * std::log(pt) -
                               std::pow(q, fp.gamma) / pt);
  return label == 1 ? dpt : -dpt;
}

double classifier_gradient(const Volume& v, int label, const ClassifierState& s,
                           const FocalLossParams& fp, bool use_mask, ClassifierState& g) {
  const ClassifierTrace t = classifier_forward(v, s, use_mask);
  const double p = t.probs[1];
  const double loss = focal_loss(p, label, fp);
  const double dp = focal_loss_derivative(p, label, fp);
  const double dz = dp * p * (1.0 - p);  // p = sigmoid(l1 - l0)
  const Tensor d_logits({2}, {-dz, dz});

  Tensor d_vlad;
  nn::dense_backward(t.vlad.output, s.head, d_logits, g.head, &d_vlad);
  const Tensor d_desc = netvlad_backward(t.vlad, s.netvlad, d_vlad, g.netvlad);
  const std::size_t D = s.config.descriptor_dim;
  for (std::size_t i = 0; i < t.slices.size(); ++i) {
    const SliceTrace& st = t.slices[i];
    Tensor dd({D});
    std::copy_n(d_desc.data() + i * D, D, dd.data());
    Tensor d_pyr;
    nn::dense_backward(st.pyramid.output, s.post_spp, nn::relu_backward(st.post_z, dd), g.post_spp,
                       &d_pyr);
    const Tensor d_gated = nn::pool_scatter(st.pyramid, d_pyr);
    Tensor d_g, d_s;
    gate_backward(st.global.out, st.side.out, d_gated, d_g, d_s);
    branch_backward(s.global, st.global, d_g, g.global);
    branch_backward(s.side, st.side, d_s, g.side);
  }
  return loss;
}

double mean_focal_loss(const std::vector<const Volume*>& volumes, const ClassifierState& s,
                       const FocalLossParams& fp, bool use_mask) {
  if (volumes.empty()) return 0.0;
  double sum = 0.0;
  for (const Volume* v : volumes) sum += focal_loss(classify_volume(*v, s, use_mask).positive, v->label, fp);
  return sum / double(volumes.size());
}

void kmeans_init_netvlad(ClassifierState& s, const std::vector<const Volume*>& train,
                         bool use_mask, std::uint64_t seed) {
  std::vector<Eigen::VectorXd> points;
  for (const Volume* v : train) {
    const ClassifierTrace t = classifier_forward(*v, s, use_mask);
    for (const SliceTrace& st : t.slices) {
      points.emplace_back(Eigen::Map<const Eigen::VectorXd>(st.descriptor.data(),
                                                            Eigen::Index(st.descriptor.size())));
    }
  }
  const std::size_t M = s.config.clusters;
  if (points.size() < M) throw ValidationError("kmeans: fewer descriptors than clusters");
  std::mt19937_64 rng(seed);

  // k-means++ seeding, then Lloyd iterations.
  std::vector<Eigen::VectorXd> centres;
  centres.push_back(points[std::uniform_int_distribution<std::size_t>(0, points.size() - 1)(rng)]);
  std::vector<double> d2(points.size(), std::numeric_limits<double>::max());
  while (centres.size() < M) {
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::min(d2[i], (points[i] - centres.back()).squaredNorm());
    }
    std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
    centres.push_back(points[pick(rng)]);
  }
  std::vector<std::size_t> owner(points.size());
  double mean_sq = 0.0;
  for (int iter = 0; iter < 20; ++iter) {
    mean_sq = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double best = std::numeric_limits<double>::max();
      for (std::size_t k = 0; k < M; ++k) {
        const double dk = (points[i] - centres[k]).squaredNorm();
        if (dk < best) best = dk, owner[i] = k;
      }
      mean_sq += best;
    }
    mean_sq /= double(points.size());
    std::vector<Eigen::VectorXd> sum(M, Eigen::VectorXd::Zero(centres[0].size()));
    std::vector<std::size_t> count(M, 0);
    for (std::size_t i = 0; i < points.size(); ++i) sum[owner[i]] += points[i], ++count[owner[i]];
    for (std::size_t k = 0; k < M; ++k) {
      if (count[k]) centres[k] = sum[k] / double(count[k]);
    }
  }
  const double alpha = 1.0 / std::max(mean_sq, 1e-12);
  auto C = rows_of(s.netvlad.centers);
  auto W = rows_of(s.netvlad.assign.weight);
  for (std::size_t k = 0; k < M; ++k) {
    C.row(Eigen::Index(k)) = centres[k].transpose();
    W.row(Eigen::Index(k)) = 2.0 * alpha * centres[k].transpose();
    s.netvlad.assign.bias[k] = -alpha * centres[k].squaredNorm();
  }
}

ClassifierTrainResult train_classifier(const std::vector<const Volume*>& train,
                                       const std::vector<const Volume*>& validation,
                                       ClassifierState initial, const ClassifierTrainConfig& hp,
                                       const ClassifierEpochCallback& on_epoch) {
  if (train.empty() || validation.empty()) {
    throw ValidationError("train_classifier: train and validation splits must be nonempty");
  }
  if (hp.batch_size == 0) throw ValidationError("train_classifier: batch_size must be positive");
  if (hp.netvlad_init == NetVladInit::kmeans) {
    kmeans_init_netvlad(initial, train, hp.use_side_information, hp.seed ^ 0x4B4D45414E53ULL);
  }
  ClassifierTrainResult result{initial, {}, 0, false};
  ClassifierState state = std::move(initial);
  ClassifierState grad = zeros_like(state);
  Adam adam(AdamConfig{.learning_rate = hp.learning_rate, .weight_decay = hp.weight_decay});
  auto trainable = [&](const std::string& name) {
    if (side_bias_frozen(state.config.encoder, name)) return false;
    return !(hp.freeze_side_branch && name.rfind("encoder.side", 0) == 0);
  };

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(hp.seed ^ 0xC1A551F1E5ULL);
  double best = mean_focal_loss(validation, state, hp.focal, hp.use_side_information);
  int since_best = 0;

  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_loss = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += hp.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      visit_params(grad, "", [](const std::string&, Tensor& t) { t.fill(0.0); });
      for (std::size_t k = start; k < end; ++k) {
        const Volume& v = *train[order[k]];
        const double loss =
            classifier_gradient(v, v.label, state, hp.focal, hp.use_side_information, grad);
        if (!std::isfinite(loss)) {
          std::ostringstream msg;
          msg << "train_classifier: non-finite focal loss at epoch " << epoch << ", batch " << batch
              << " (volume " << v.id << ")";
          throw RuntimeError(msg.str());
        }
        train_loss += loss;
      }
      const double scale = 1.0 / double(end - start);
      visit_params(grad, "", [&](const std::string&, Tensor& t) { t *= scale; });
      adam.step(state, grad, trainable);
    }
    ClassifierEpoch rec{epoch, train_loss / double(train.size()),
                        mean_focal_loss(validation, state, hp.focal, hp.use_side_information)};
    if (!std::isfinite(rec.validation_loss)) {
      throw RuntimeError("train_classifier: non-finite validation loss at epoch " +
                         std::to_string(epoch));
    }
    result.trace.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.validation_loss < best) {
      best = rec.validation_loss;
      result.state = state;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= hp.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace xcvae
