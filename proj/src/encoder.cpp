#include "xcvae/encoder.hpp"

#include <algorithm>

namespace xcvae {

void EncoderConfig::validate() const {
  if (slice_height < 8 || slice_width < 8 || slice_height % 8 || slice_width % 8) {
    throw ValidationError("encoder: slice size " + std::to_string(slice_height) + "x" +
                          std::to_string(slice_width) + " must be a positive multiple of 8");
  }
  if (!conv1_filters || !conv2_filters || !conv3_filters || !embed_dim || !pre_merge_dim ||
      !merge_dim) {
    throw ValidationError("encoder: layer widths must be positive");
  }
  if (!conv1_kernel || !conv2_kernel || !conv3_kernel) {
    throw ValidationError("encoder: kernel sizes must be positive");
  }
}

bool side_bias_frozen(const EncoderConfig& cfg, const std::string& name) {
  if (cfg.side_bias) return false;
  const std::size_t at = name.find("encoder.side.");
  return at != std::string::npos && name.ends_with(".bias");
}

Branch make_branch(const EncoderConfig& cfg) {
  return Branch{nn::Conv2d(cfg.conv1_filters, 1, cfg.conv1_kernel),
                nn::Conv2d(cfg.conv2_filters, cfg.conv1_filters, cfg.conv2_kernel),
                nn::Conv2d(cfg.conv3_filters, cfg.conv2_filters, cfg.conv3_kernel)};
}

EncoderState make_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderState s;
  s.config = cfg;
  s.global = make_branch(cfg);
  s.side = make_branch(cfg);
  s.embed_table = Tensor({2, cfg.embed_dim});
  s.pre_merge =
      nn::Dense(cfg.pre_merge_dim, cfg.conv3_filters * cfg.pooled_height() * cfg.pooled_width());
  s.merge = nn::Dense(cfg.merge_dim, cfg.pre_merge_dim + cfg.embed_dim);
  s.context = nn::Dense(cfg.merge_dim, cfg.merge_dim);
  return s;
}

void init_encoder(EncoderState& s, nn::Rng& rng) {
  for (Branch* b : {&s.global, &s.side}) {
    nn::init_he(b->conv1, rng);
    nn::init_he(b->conv2, rng);
    nn::init_he(b->conv3, rng);
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : s.embed_table.values()) v = normal(rng);
  nn::init_he(s.pre_merge, rng);
  nn::init_he(s.merge, rng);
  nn::init_glorot(s.context, rng);
}

BranchTrace branch_forward(const Tensor& slice, const Branch& branch) {
  Tensor input = slice;
  if (input.rank() == 2) input.reshape({1, slice.dim(0), slice.dim(1)});
  if (input.rank() != 3 || input.dim(0) != 1) {
    throw ValidationError("branch_forward: expected a single-channel slice, got " +
                          to_string(slice.shape()));
  }
  if (input.dim(1) < kMinBranchInput || input.dim(2) < kMinBranchInput) {
    throw ValidationError("branch_forward: slice " + to_string(slice.shape()) +
                          " is smaller than the 4x4 minimum");
  }
  BranchTrace t;
  t.z1 = nn::conv2d_forward(input, branch.conv1);
  t.pool1 = nn::max_pool2(nn::relu(t.z1));
  t.z2 = nn::conv2d_forward(t.pool1.output, branch.conv2);
  t.pool2 = nn::max_pool2(nn::leaky_relu(t.z2));
  t.z3 = nn::conv2d_forward(t.pool2.output, branch.conv3);
  t.out = nn::leaky_relu(t.z3);
  t.input = std::move(input);
  return t;
}

void branch_backward(const Branch& branch, const BranchTrace& t, const Tensor& grad_out,
                     Branch& grad) {
  Tensor d = nn::leaky_relu_backward(t.z3, grad_out);
  Tensor d_in;
  nn::conv2d_backward(t.pool2.output, branch.conv3, d, grad.conv3, &d_in);
  d = nn::leaky_relu_backward(t.z2, nn::pool_scatter(t.pool2, d_in));
  nn::conv2d_backward(t.pool1.output, branch.conv2, d, grad.conv2, &d_in);
  d = nn::relu_backward(t.z1, nn::pool_scatter(t.pool1, d_in));
  nn::conv2d_backward(t.input, branch.conv1, d, grad.conv1, nullptr);
}

Tensor gate(const Tensor& global_map, const Tensor& side_map) {
  require_same_shape(global_map, side_map, "gate");
  Tensor out(global_map.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::max(0.0, global_map[i] * side_map[i]);
  }
  return out;
}

void gate_backward(const Tensor& g, const Tensor& s, const Tensor& grad_out, Tensor& grad_g,
                   Tensor& grad_s) {
  grad_g = Tensor(g.shape());
  grad_s = Tensor(s.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] * s[i] > 0) {
      grad_g[i] = grad_out[i] * s[i];
      grad_s[i] = grad_out[i] * g[i];
    }
  }
}

Tensor embed_label(int label, const Tensor& table) {
  if (label != 0 && label != 1) {
    throw ValidationError("embed_label: label must be 0 or 1, got " + std::to_string(label));
  }
  const std::size_t d = table.dim(1);
  Tensor e({d});
  std::copy_n(table.data() + std::size_t(label) * d, d, e.data());
  return e;
}

MergeTrace merge_forward(const Tensor& gated, const Tensor& embedding, const nn::Dense& pre_merge,
                         const nn::Dense& merge) {
  MergeTrace t;
  t.flat = gated.reshaped({gated.size()});
  t.pre_z = nn::dense_forward(t.flat, pre_merge);
  const Tensor pre_a = nn::leaky_relu(t.pre_z);
  t.joined = Tensor({pre_a.size() + embedding.size()});
  std::copy_n(pre_a.data(), pre_a.size(), t.joined.data());
  std::copy_n(embedding.data(), embedding.size(), t.joined.data() + pre_a.size());
  t.merge_z = nn::dense_forward(t.joined, merge);
  t.f = nn::leaky_relu(t.merge_z);
  return t;
}

Tensor merge_backward(const MergeTrace& t, const nn::Dense& pre_merge, const nn::Dense& merge,
                      const Tensor& grad_f, nn::Dense& grad_pre_merge, nn::Dense& grad_merge,
                      Tensor& grad_gated) {
  Tensor d_joined;
  nn::dense_backward(t.joined, merge, nn::leaky_relu_backward(t.merge_z, grad_f), grad_merge,
                     &d_joined);
  const std::size_t n_pre = t.pre_z.size();
  Tensor d_pre({n_pre});
  std::copy_n(d_joined.data(), n_pre, d_pre.data());
  Tensor d_embed({d_joined.size() - n_pre});
  std::copy_n(d_joined.data() + n_pre, d_embed.size(), d_embed.data());
  Tensor d_flat;
  nn::dense_backward(t.flat, pre_merge, nn::leaky_relu_backward(t.pre_z, d_pre), grad_pre_merge,
                     &d_flat);
  grad_gated = std::move(d_flat);
  return d_embed;
}

ContextGateTrace context_gate_forward(const Tensor& f, const nn::Dense& context) {
  ContextGateTrace t;
  t.f = f;
  t.gate = nn::sigmoid(nn::dense_forward(f, context));
  t.out = Tensor(f.shape());
  for (std::size_t i = 0; i < f.size(); ++i) t.out[i] = t.gate[i] * f[i];
  return t;
}

Tensor context_gate_backward(const ContextGateTrace& t, const nn::Dense& context,
                             const Tensor& grad_out, nn::Dense& grad_context) {
  Tensor d_f(t.f.shape());
  Tensor d_gate(t.f.shape());
  for (std::size_t i = 0; i < d_f.size(); ++i) {
    d_f[i] = grad_out[i] * t.gate[i];
    d_gate[i] = grad_out[i] * t.f[i];
  }
  Tensor d_f_via_gate;
  nn::dense_backward(t.f, context, nn::sigmoid_backward_from_output(t.gate, d_gate), grad_context,
                     &d_f_via_gate);
  d_f += d_f_via_gate;
  return d_f;
}

EncoderTrace encoder_forward(const EncoderState& s, const Tensor& image, const Tensor& mask,
                             int label) {
  const auto& cfg = s.config;
  const std::size_t h = image.rank() == 3 ? image.dim(1) : image.dim(0);
  const std::size_t w = image.rank() == 3 ? image.dim(2) : image.dim(1);
  if (h != cfg.slice_height || w != cfg.slice_width) {
    throw ValidationError("encoder: slice " + to_string(image.shape()) + " does not match the " +
                          std::to_string(cfg.slice_height) + "x" +
                          std::to_string(cfg.slice_width) + " trunk");
  }
  EncoderTrace t;
  t.label = label;
  t.embedding = embed_label(label, s.embed_table);
  t.global = branch_forward(image, s.global);
  t.side = branch_forward(mask, s.side);
  t.gated = gate(t.global.out, t.side.out);
  t.pool3 = nn::max_pool2(t.gated);
  t.merge = merge_forward(t.pool3.output, t.embedding, s.pre_merge, s.merge);
  t.context = context_gate_forward(t.merge.f, s.context);
  return t;
}

void encoder_backward(const EncoderState& s, const EncoderTrace& t, const Tensor& grad_output,
                      EncoderState& grad) {
  const Tensor d_f = context_gate_backward(t.context, s.context, grad_output, grad.context);
  Tensor d_pooled;
  const Tensor d_embed =
      merge_backward(t.merge, s.pre_merge, s.merge, d_f, grad.pre_merge, grad.merge, d_pooled);
  const std::size_t d = s.embed_table.dim(1);
  for (std::size_t i = 0; i < d; ++i) grad.embed_table[std::size_t(t.label) * d + i] += d_embed[i];
  const Tensor d_gated = nn::pool_scatter(t.pool3, d_pooled);
  Tensor d_g, d_s;
  gate_backward(t.global.out, t.side.out, d_gated, d_g, d_s);
  branch_backward(s.global, t.global, d_g, grad.global);
  branch_backward(s.side, t.side, d_s, grad.side);
}

}  // namespace xcvae
