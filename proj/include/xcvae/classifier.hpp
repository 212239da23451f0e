#pragma once

// Volume-level diagnosis network built on the transferred encoder branches:
// gated conv3 maps are pooled by a spatial pyramid, projected to slice
// descriptors, aggregated over the whole volume by NetVLAD and scored by a
// two-way linear head.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "xcvae/cvae.hpp"
#include "xcvae/encoder.hpp"
#include "xcvae/layers.hpp"
#include "xcvae/phantom.hpp"

namespace xcvae {

struct ClassifierConfig {
  EncoderConfig encoder;
  std::vector<std::size_t> spp_levels{5, 3, 2};
  std::size_t descriptor_dim = 512;
  std::size_t clusters = 64;

  std::size_t spp_length() const;
  void validate() const;
};

struct NetVlad {
  Tensor centers;     // (clusters, dim)
  nn::Dense assign;   // dim -> clusters
};

struct ClassifierState {
  ClassifierConfig config;
  Branch global;
  Branch side;
  nn::Dense post_spp;  // spp_length -> descriptor_dim
  NetVlad netvlad;
  nn::Dense head;      // clusters * dim -> 2
};

template <class S, class Fn>
  requires StateOf<S, ClassifierState>
void visit_params(S& c, const std::string& prefix, Fn&& fn) {
  visit_params(c.global, prefix + "encoder.global", fn);
  visit_params(c.side, prefix + "encoder.side", fn);
  visit_params(c.post_spp, prefix + "post_spp", fn);
  fn(prefix + "netvlad.centers", c.netvlad.centers);
  visit_params(c.netvlad.assign, prefix + "netvlad.assign", fn);
  visit_params(c.head, prefix + "head", fn);
}

ClassifierState make_classifier(const ClassifierConfig& cfg);
/// Fresh random initialisation of every array (the "no CVAE" variant).
ClassifierState init_classifier(const ClassifierConfig& cfg, std::uint64_t seed);
/// Random initialisation of the aggregation layers with both encoder branches
/// copied from the CVAE. Throws ValidationError naming the first parameter
/// whose shape differs.
ClassifierState transfer_weights(const CvaeState& cvae, const ClassifierConfig& cfg,
                                 std::uint64_t seed);

/// Adaptive max pooling of a (C, h, w) map onto each pyramid level.
nn::PoolRecord spp(const Tensor& feature_map, std::span<const std::size_t> levels = {});

struct NetVladTrace {
  Tensor descriptors;  // (n, dim)
  Tensor assignment;   // (n, clusters), rows sum to 1
  Tensor residual;     // (clusters, dim) before normalisation
  Tensor intra;        // (clusters, dim) after per-cluster L2
  Tensor output;       // (clusters * dim) after global L2
};

/// Soft-assignment VLAD with intra- then global L2 normalisation.
/// `descriptors` is (n, dim).
NetVladTrace netvlad_forward(const Tensor& descriptors, const NetVlad& layer);
/// Returns dL/d(descriptors) and accumulates layer gradients.
Tensor netvlad_backward(const NetVladTrace& trace, const NetVlad& layer, const Tensor& grad_output,
                        NetVlad& grad);
/// Residual sum for a fixed assignment matrix (n, clusters).
Tensor vlad_residuals(const Tensor& descriptors, const Tensor& assignment, const Tensor& centers);

struct SliceTrace {
  BranchTrace global;
  BranchTrace side;
  Tensor gated;
  nn::PoolRecord pyramid;
  Tensor post_z;
  Tensor descriptor;
};

struct ClassifierTrace {
  std::vector<SliceTrace> slices;
  NetVladTrace vlad;
  Tensor logits;  // (2)
  Tensor probs;   // softmax(logits)
};

struct Probabilities {
  double negative = 0.5;
  double positive = 0.5;
};

/// When use_mask is false the side branch sees an all-ones mask.
ClassifierTrace classifier_forward(const Volume& v, const ClassifierState& state,
                                   bool use_mask = true);
Probabilities classify_volume(const Volume& v, const ClassifierState& state, bool use_mask = true);

struct FocalLossParams {
  double gamma = 5.0;
  double lambda_negative = 0.25;
  double lambda_positive = 0.35;
};

inline constexpr double kProbabilityClamp = 1e-7;

struct FocalDiagnostics {
  long clamped = 0;
};

/// -lambda_t (1 - p_t)^gamma log(p_t), with p clamped into [1e-7, 1 - 1e-7].
double focal_loss(double p_positive, int label, const FocalLossParams& params,
                  FocalDiagnostics* diagnostics = nullptr);
/// d(focal_loss)/d(p_positive); zero where the clamp is active.
double focal_loss_derivative(double p_positive, int label, const FocalLossParams& params);

/// Focal loss of one volume; accumulates parameter gradients into grad.
double classifier_gradient(const Volume& v, int label, const ClassifierState& state,
                           const FocalLossParams& params, bool use_mask, ClassifierState& grad);

enum class NetVladInit { random, kmeans };

struct ClassifierTrainConfig {
  int epochs = 200;
  double learning_rate = 1e-5;
  double weight_decay = 1e-5;
  int patience = 20;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  bool use_side_information = true;
  bool freeze_side_branch = false;
  NetVladInit netvlad_init = NetVladInit::random;
  FocalLossParams focal;
};

struct ClassifierEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct ClassifierTrainResult {
  ClassifierState state;  // best validation epoch
  std::vector<ClassifierEpoch> trace;
  int best_epoch = 0;
  bool stopped_early = false;
};

using ClassifierEpochCallback = std::function<void(const ClassifierEpoch&)>;

/// Runs k-means over slice descriptors of `train` and reseeds the NetVLAD
/// centres and assignment layer from the result.
void kmeans_init_netvlad(ClassifierState& state, const std::vector<const Volume*>& train,
                         bool use_mask, std::uint64_t seed);

ClassifierTrainResult train_classifier(const std::vector<const Volume*>& train,
                                       const std::vector<const Volume*>& validation,
                                       ClassifierState initial, const ClassifierTrainConfig& hp,
                                       const ClassifierEpochCallback& on_epoch = {});

/// Mean focal loss over a set of volumes.
double mean_focal_loss(const std::vector<const Volume*>& volumes, const ClassifierState& state,
                       const FocalLossParams& params, bool use_mask);

}  // namespace xcvae
