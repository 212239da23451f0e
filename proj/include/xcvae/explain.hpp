#pragma once

// Composite layer-wise relevance propagation for the volume classifier.
//
//   head, post-SPP dense      LRP-0
//   NetVLAD                   gradient x input with the soft assignment frozen
//   SPP and max pools         winner path
//   gate                      gradient x input
//   conv2, conv3              LRP-alpha-beta
//   conv1 (pixels)            LRP-zB with box [low, high]
//
// Relevance absorbed by biases is dropped. LeakyReLU/ReLU pass relevance
// through unchanged.

#include <string>
#include <vector>

#include "xcvae/classifier.hpp"
#include "xcvae/tensor.hpp"

namespace xcvae {

inline constexpr double kLrpEpsilon = 1e-9;

struct RuleAssignment {
  double alpha = 2.0;
  double beta = -1.0;
  /// Pixel box for the input rule.
  double low = 0.0;
  double high = 1.0;
  double epsilon = kLrpEpsilon;

  void validate() const;
};

/// z + sign(z) * eps with sign(0) = +1.
double stabilize(double z, double eps = kLrpEpsilon);

// Dense rules. `weight` is (out, in) as in nn::Dense; `bias` may be empty.

Tensor lrp_linear_0(const Tensor& relevance_out, const Tensor& input, const Tensor& weight,
                    const Tensor& bias = {}, double eps = kLrpEpsilon);
Tensor lrp_linear_alphabeta(const Tensor& relevance_out, const Tensor& input, const Tensor& weight,
                            double alpha, double beta, const Tensor& bias = {},
                            double eps = kLrpEpsilon);
Tensor lrp_linear_zB(const Tensor& relevance_out, const Tensor& input, const Tensor& weight,
                     double low, double high, double eps = kLrpEpsilon);

// Alpha-beta units whose contributions all share one sign pass their whole
// relevance through that sign.

// Convolution rules on "same" stride-1 convolutions. Inputs are (C, H, W),
// kernels (out, in, k, k).

Tensor lrp_conv_0(const Tensor& relevance_out, const Tensor& input, const Tensor& kernel,
                  const Tensor& bias = {}, double eps = kLrpEpsilon);
Tensor lrp_conv_alphabeta(const Tensor& relevance_out, const Tensor& input, const Tensor& kernel,
                          double alpha, double beta, const Tensor& bias = {},
                          double eps = kLrpEpsilon);
Tensor lrp_input_zB(const Tensor& relevance_out, const Tensor& input, const Tensor& kernel,
                    double low, double high, double eps = kLrpEpsilon);

/// Winner-path rule; throws if the record does not match R_out.
Tensor lrp_maxpool(const Tensor& relevance_out, const nn::PoolRecord& record);

// Gradient x input: R_in = x ⊙ J^T (R_out / y).

/// Linear stage y = W x.
Tensor gxi_linear(const Tensor& relevance_out, const Tensor& input, const Tensor& weight,
                  double eps = kLrpEpsilon);

struct GateRelevance {
  Tensor global;
  Tensor side;
};

/// Gate F = ReLU(g ⊙ s); each factor receives the relevance of its product.
GateRelevance gxi_gate(const Tensor& relevance_out, const Tensor& global_map,
                       const Tensor& side_map, double eps = kLrpEpsilon);

/// Context gate f̂ = sigmoid(W f + b) ⊙ f.
Tensor gxi_context_gate(const Tensor& relevance_out, const Tensor& f, const nn::Dense& context,
                        double eps = kLrpEpsilon);

/// NetVLAD treated as the linear map x -> sum_i a_k(x_i)(x_i - c_k) with the
/// assignment frozen; normalisation is a frozen rescaling. `relevance_out` is
/// (clusters, dim) or flat. Returns (n, dim).
Tensor gxi_netvlad(const Tensor& relevance_out, const Tensor& descriptors,
                   const Tensor& assignment, const Tensor& centers, double eps = kLrpEpsilon);

struct StageSum {
  std::string stage;
  double relevance_out = 0.0;  // summed over slices where applicable
  double relevance_in = 0.0;
};

struct RelevanceMap {
  Tensor image_relevance;  // (slices, H, W)
  Tensor mask_relevance;   // (slices, H, W)
  int class_index = 1;
  double score = 0.0;      // pre-softmax score the relevance started from
  std::vector<StageSum> stages;
};

struct ExplainOptions {
  RuleAssignment rules;
  bool smooth = false;
  double smooth_sigma = 1.5;
  bool use_mask = true;
};

RelevanceMap explain_volume(const ClassifierState& state, const Volume& v, int class_index,
                            const ExplainOptions& options = {});

/// Separable Gaussian filter applied independently to each (H, W) plane.
Tensor gaussian_smooth(const Tensor& planes, double sigma);

}  // namespace xcvae
