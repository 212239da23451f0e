#pragma once

// Two-branch gated convolutional encoder. The global branch sees the image
// slice, the side branch sees the binary lesion mask; both share one filter
// layout. Their conv3 maps are fused by a rectified Hadamard gate. The CVAE
// trunk then pools, projects, merges with a label embedding and applies
// context gating.

#include <cstddef>
#include <string>

#include "xcvae/layers.hpp"
#include "xcvae/params.hpp"
#include "xcvae/tensor.hpp"

namespace xcvae {

struct EncoderConfig {
  std::size_t conv1_filters = 16;
  std::size_t conv1_kernel = 5;
  std::size_t conv2_filters = 32;
  std::size_t conv2_kernel = 3;
  std::size_t conv3_filters = 64;
  std::size_t conv3_kernel = 3;
  std::size_t embed_dim = 64;
  std::size_t pre_merge_dim = 64;
  std::size_t merge_dim = 64;
  /// When false the side-branch biases stay at zero through training, so an
  /// empty mask yields an exactly zero side map and the gate closes there.
  bool side_bias = true;
  /// Slice size the trunk's dense projection is built for.
  std::size_t slice_height = 128;
  std::size_t slice_width = 128;

  /// Spatial size of the gated map after the trunk's third pool.
  std::size_t pooled_height() const { return slice_height / 8; }
  std::size_t pooled_width() const { return slice_width / 8; }
  void validate() const;
};

/// One convolutional branch: conv(5x5)+ReLU+pool, conv(3x3)+LeakyReLU+pool,
/// conv(3x3)+LeakyReLU.
struct Branch {
  nn::Conv2d conv1, conv2, conv3;
};

struct EncoderState {
  EncoderConfig config;
  Branch global;
  Branch side;
  Tensor embed_table;  // (2, embed_dim)
  nn::Dense pre_merge;
  nn::Dense merge;
  nn::Dense context;
};

template <class S, class Fn>
  requires StateOf<S, Branch>
void visit_params(S& b, const std::string& prefix, Fn&& fn) {
  visit_params(b.conv1, prefix + ".conv1", fn);
  visit_params(b.conv2, prefix + ".conv2", fn);
  visit_params(b.conv3, prefix + ".conv3", fn);
}

template <class S, class Fn>
  requires StateOf<S, EncoderState>
void visit_params(S& e, const std::string& prefix, Fn&& fn) {
  visit_params(e.global, prefix + "global", fn);
  visit_params(e.side, prefix + "side", fn);
  fn(prefix + "embed_table", e.embed_table);
  visit_params(e.pre_merge, prefix + "pre_merge", fn);
  visit_params(e.merge, prefix + "merge", fn);
  visit_params(e.context, prefix + "context", fn);
}

enum class BranchKind { global, side };

Branch make_branch(const EncoderConfig& cfg);
/// True for a parameter the optimiser must leave untouched under cfg.side_bias.
bool side_bias_frozen(const EncoderConfig& cfg, const std::string& name);
/// All-zero state with the shapes implied by cfg.
EncoderState make_encoder(const EncoderConfig& cfg);
void init_encoder(EncoderState& state, nn::Rng& rng);

/// Smallest slice edge the branch accepts (two 2x pools).
inline constexpr std::size_t kMinBranchInput = 4;

/// Cached activations of one branch pass, enough for backward and relevance.
struct BranchTrace {
  Tensor input;  // (1, H, W)
  Tensor z1;     // conv1 pre-activation
  nn::PoolRecord pool1;
  Tensor z2;
  nn::PoolRecord pool2;
  Tensor z3;
  Tensor out;  // LeakyReLU(z3)
};

/// `slice` is (H, W) or (1, H, W).
BranchTrace branch_forward(const Tensor& slice, const Branch& branch);
/// Accumulates parameter gradients given dL/d(out).
void branch_backward(const Branch& branch, const BranchTrace& trace, const Tensor& grad_out,
                     Branch& grad);

/// ReLU(F_g ⊙ F_s).
Tensor gate(const Tensor& global_map, const Tensor& side_map);
void gate_backward(const Tensor& global_map, const Tensor& side_map, const Tensor& grad_out,
                   Tensor& grad_global, Tensor& grad_side);

/// Row `label` of the embedding table (identity activation).
Tensor embed_label(int label, const Tensor& embed_table);

struct MergeTrace {
  Tensor flat;     // flattened gated map
  Tensor pre_z;    // pre_merge pre-activation
  Tensor joined;   // [LeakyReLU(pre_z), e]
  Tensor merge_z;  // merge pre-activation
  Tensor f;        // LeakyReLU(merge_z)
};

/// f = LeakyReLU(merge([LeakyReLU(pre_merge(flatten(F))), e])).
MergeTrace merge_forward(const Tensor& gated, const Tensor& embedding, const nn::Dense& pre_merge,
                         const nn::Dense& merge);
/// Returns dL/d(embedding); accumulates dense gradients and writes dL/dF.
Tensor merge_backward(const MergeTrace& trace, const nn::Dense& pre_merge, const nn::Dense& merge,
                      const Tensor& grad_f, nn::Dense& grad_pre_merge, nn::Dense& grad_merge,
                      Tensor& grad_gated);

struct ContextGateTrace {
  Tensor f;
  Tensor gate;  // sigmoid(context(f))
  Tensor out;   // gate ⊙ f
};

ContextGateTrace context_gate_forward(const Tensor& f, const nn::Dense& context);
/// Returns dL/df and accumulates the context-layer gradient.
Tensor context_gate_backward(const ContextGateTrace& trace, const nn::Dense& context,
                             const Tensor& grad_out, nn::Dense& grad_context);

/// Full trunk pass for one slice: both branches, gate, pool, merge with the
/// label embedding, context gating.
struct EncoderTrace {
  BranchTrace global;
  BranchTrace side;
  Tensor gated;
  nn::PoolRecord pool3;
  Tensor embedding;
  int label = 0;
  MergeTrace merge;
  ContextGateTrace context;

  const Tensor& output() const { return context.out; }
};

EncoderTrace encoder_forward(const EncoderState& state, const Tensor& image, const Tensor& mask,
                             int label);
void encoder_backward(const EncoderState& state, const EncoderTrace& trace,
                      const Tensor& grad_output, EncoderState& grad);

}  // namespace xcvae
