#include "xcvae/explain.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <utility>

namespace xcvae {
namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapRM = Eigen::Map<const MatRM>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;

ConstMapRM dense_weight(const Tensor& w) {
  return ConstMapRM(w.data(), Eigen::Index(w.dim(0)), Eigen::Index(w.dim(1)));
}

ConstVec flat(const Tensor& t) { return ConstVec(t.data(), Eigen::Index(t.size())); }

Tensor from_vector(const Eigen::VectorXd& v, const Shape& shape) {
  Tensor t(shape);
  std::copy_n(v.data(), t.size(), t.data());
  return t;
}

void check_dense(const Tensor& r, const Tensor& x, const Tensor& w, const char* what) {
  if (w.rank() != 2 || w.dim(0) != r.size() || w.dim(1) != x.size()) {
    throw ValidationError(std::string(what) + ": weight " + to_string(w.shape()) +
                          " does not map input of size " + std::to_string(x.size()) +
                          " to relevance of size " + std::to_string(r.size()));
  }
}

void check_alpha_beta(double alpha, double beta) {
  if (std::abs(alpha + beta - 1.0) > 1e-12) {
    throw ValidationError("LRP alpha-beta: alpha + beta must equal 1 (got " +
                          std::to_string(alpha) + " + " + std::to_string(beta) + ")");
  }
}

Tensor positive_part(const Tensor& t) {
  Tensor p = t;
  for (double& v : p.values()) v = std::max(v, 0.0);
  return p;
}

Tensor negative_part(const Tensor& t) {
  Tensor n = t;
  for (double& v : n.values()) v = std::min(v, 0.0);
  return n;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

void add_bias_part(Tensor& z, const Tensor& bias, bool positive) {
  if (bias.empty()) return;
  const std::size_t plane = z.size() / bias.size();
  for (std::size_t o = 0; o < bias.size(); ++o) {
    const double b = positive ? std::max(bias[o], 0.0) : std::min(bias[o], 0.0);
    for (std::size_t i = 0; i < plane; ++i) z[o * plane + i] += b;
  }
}

void check_box(const Tensor& x, double low, double high) {
  if (low > high) throw ValidationError("LRP zB: low bound exceeds high bound");
  for (double v : x.values()) {
    if (v < low - 1e-12 || v > high + 1e-12) {
      throw ValidationError("LRP zB: input value " + std::to_string(v) + " outside [" +
                            std::to_string(low) + ", " + std::to_string(high) + "]");
    }
  }
}

/// Per-unit (alpha, beta). A unit with no negative (positive) contributions
/// sends all of its relevance through the other part, which keeps the rule
/// conservative.
std::pair<double, double> split_weights(double zp, double zn, double alpha, double beta) {
  if (zn == 0.0) return {1.0, 0.0};
  if (zp == 0.0) return {0.0, 1.0};
  return {alpha, beta};
}

}  // namespace

void RuleAssignment::validate() const {
  check_alpha_beta(alpha, beta);
  if (low > high) throw ValidationError("rules: low bound exceeds high bound");
  if (!(epsilon >= 0)) throw ValidationError("rules: epsilon must be non-negative");
}

double stabilize(double z, double eps) { return z + (z >= 0 ? eps : -eps); }

Tensor lrp_linear_0(const Tensor& r, const Tensor& x, const Tensor& w, const Tensor& bias,
                    double eps) {
  check_dense(r, x, w, "LRP-0");
  Eigen::VectorXd z = dense_weight(w) * flat(x);
  if (!bias.empty()) z += flat(bias);
  Eigen::VectorXd s(z.size());
  for (Eigen::Index j = 0; j < z.size(); ++j) s(j) = r[std::size_t(j)] / stabilize(z(j), eps);
  const Eigen::VectorXd c = dense_weight(w).transpose() * s;
  return from_vector(flat(x).cwiseProduct(c), x.shape());
}

Tensor lrp_linear_alphabeta(const Tensor& r, const Tensor& x, const Tensor& w, double alpha,
                            double beta, const Tensor& bias, double eps) {
  check_alpha_beta(alpha, beta);
  check_dense(r, x, w, "LRP-alpha-beta");
  const auto W = dense_weight(w);
  Tensor out(x.shape());
  for (Eigen::Index j = 0; j < W.rows(); ++j) {
    double zp = 0.0, zn = 0.0;
    for (Eigen::Index i = 0; i < W.cols(); ++i) {
      const double c = x[std::size_t(i)] * W(j, i);
      (c > 0 ? zp : zn) += c;
    }
    if (!bias.empty()) {
      const double b = bias[std::size_t(j)];
      (b > 0 ? zp : zn) += b;
    }
    const auto [a, b] = split_weights(zp, zn, alpha, beta);
    const double sp = a * r[std::size_t(j)] / (zp + eps);
    const double sn = b * r[std::size_t(j)] / (zn - eps);
    for (Eigen::Index i = 0; i < W.cols(); ++i) {
      const double c = x[std::size_t(i)] * W(j, i);
      out[std::size_t(i)] += c > 0 ? c * sp : c * sn;
    }
  }
  return out;
}

Tensor lrp_linear_zB(const Tensor& r, const Tensor& x, const Tensor& w, double low, double high,
                     double eps) {
  check_dense(r, x, w, "LRP-zB");
  check_box(x, low, high);
  const auto W = dense_weight(w);
  const MatRM Wp = W.cwiseMax(0.0), Wn = W.cwiseMin(0.0);
  const Eigen::VectorXd X = flat(x);
  const Eigen::VectorXd L = Eigen::VectorXd::Constant(X.size(), low);
  const Eigen::VectorXd Hh = Eigen::VectorXd::Constant(X.size(), high);
  const Eigen::VectorXd z = W * X - Wp * L - Wn * Hh;
  Eigen::VectorXd s(z.size());
  for (Eigen::Index j = 0; j < z.size(); ++j) s(j) = r[std::size_t(j)] / stabilize(z(j), eps);
  const Eigen::VectorXd R = X.cwiseProduct(W.transpose() * s) - L.cwiseProduct(Wp.transpose() * s) -
                            Hh.cwiseProduct(Wn.transpose() * s);
  return from_vector(R, x.shape());
}

Tensor lrp_conv_0(const Tensor& r, const Tensor& x, const Tensor& kernel, const Tensor& bias,
                  double eps) {
  Tensor z = nn::conv2d_no_bias(x, kernel);
  require_same_shape(z, r, "LRP-0 conv");
  if (!bias.empty()) {
    const std::size_t plane = z.size() / bias.size();
    for (std::size_t o = 0; o < bias.size(); ++o) {
      for (std::size_t i = 0; i < plane; ++i) z[o * plane + i] += bias[o];
    }
  }
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = r[i] / stabilize(z[i], eps);
  return hadamard(x, nn::conv2d_input_adjoint(z, kernel, x.dim(1), x.dim(2)));
}

Tensor lrp_conv_alphabeta(const Tensor& r, const Tensor& x, const Tensor& kernel, double alpha,
                          double beta, const Tensor& bias, double eps) {
  check_alpha_beta(alpha, beta);
  const Tensor xp = positive_part(x), xn = negative_part(x);
  const Tensor wp = positive_part(kernel), wn = negative_part(kernel);
  Tensor zp = nn::conv2d_no_bias(xp, wp);
  zp += nn::conv2d_no_bias(xn, wn);
  Tensor zn = nn::conv2d_no_bias(xp, wn);
  zn += nn::conv2d_no_bias(xn, wp);
  require_same_shape(zp, r, "LRP-alpha-beta conv");
  add_bias_part(zp, bias, true);
  add_bias_part(zn, bias, false);
  for (std::size_t i = 0; i < zp.size(); ++i) {
    const auto [a, b] = split_weights(zp[i], zn[i], alpha, beta);
    zp[i] = a * r[i] / (zp[i] + eps);
    zn[i] = b * r[i] / (zn[i] - eps);
  }
  const std::size_t H = x.dim(1), W = x.dim(2);
  Tensor pos = hadamard(xp, nn::conv2d_input_adjoint(zp, wp, H, W));
  pos += hadamard(xn, nn::conv2d_input_adjoint(zp, wn, H, W));
  Tensor neg = hadamard(xp, nn::conv2d_input_adjoint(zn, wn, H, W));
  neg += hadamard(xn, nn::conv2d_input_adjoint(zn, wp, H, W));
  pos += neg;
  return pos;
}

Tensor lrp_input_zB(const Tensor& r, const Tensor& x, const Tensor& kernel, double low,
                    double high, double eps) {
  check_box(x, low, high);
  const Tensor wp = positive_part(kernel), wn = negative_part(kernel);
  const Tensor lo(x.shape(), low), hi(x.shape(), high);
  Tensor z = nn::conv2d_no_bias(x, kernel);
  require_same_shape(z, r, "LRP-zB conv");
  const Tensor zl = nn::conv2d_no_bias(lo, wp), zh = nn::conv2d_no_bias(hi, wn);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = r[i] / stabilize(z[i] - zl[i] - zh[i], eps);
  const std::size_t H = x.dim(1), W = x.dim(2);
  Tensor out = hadamard(x, nn::conv2d_input_adjoint(z, kernel, H, W));
  const Tensor cl = hadamard(lo, nn::conv2d_input_adjoint(z, wp, H, W));
  const Tensor ch = hadamard(hi, nn::conv2d_input_adjoint(z, wn, H, W));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= cl[i] + ch[i];
  return out;
}

Tensor lrp_maxpool(const Tensor& r, const nn::PoolRecord& record) {
  if (record.argmax.empty() || record.input_shape.empty()) {
    throw ValidationError("LRP pool: missing argmax record");
  }
  return nn::pool_scatter(record, r);
}

Tensor gxi_linear(const Tensor& r, const Tensor& x, const Tensor& w, double eps) {
  return lrp_linear_0(r, x, w, {}, eps);
}

GateRelevance gxi_gate(const Tensor& r, const Tensor& g, const Tensor& s, double eps) {
  require_same_shape(g, s, "gate relevance");
  require_same_shape(g, r, "gate relevance");
  GateRelevance out{Tensor(g.shape()), Tensor(s.shape())};
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double f = g[i] * s[i];
    if (f > 0) {
      // g * (dF/dg) * R/F = g * s * R/F, and symmetrically for s.
      const double share = f * r[i] / stabilize(f, eps);
      out.global[i] = share;
      out.side[i] = share;
    }
  }
  return out;
}

Tensor gxi_context_gate(const Tensor& r, const Tensor& f, const nn::Dense& context, double eps) {
  const ContextGateTrace t = context_gate_forward(f, context);
  Eigen::VectorXd s(Eigen::Index(f.size())), u(Eigen::Index(f.size()));
  for (std::size_t i = 0; i < f.size(); ++i) {
    s(Eigen::Index(i)) = r[i] / stabilize(t.out[i], eps);
    u(Eigen::Index(i)) = f[i] * t.gate[i] * (1.0 - t.gate[i]) * s(Eigen::Index(i));
  }
  const Eigen::VectorXd back = dense_weight(context.weight).transpose() * u;
  Tensor out(f.shape());
  for (std::size_t i = 0; i < f.size(); ++i) {
    out[i] = f[i] * (t.gate[i] * s(Eigen::Index(i)) + back(Eigen::Index(i)));
  }
  return out;
}

Tensor gxi_netvlad(const Tensor& r, const Tensor& x, const Tensor& a, const Tensor& centers,
                   double eps) {
  const std::size_t M = centers.dim(0), D = centers.dim(1), n = x.dim(0);
  if (r.size() != M * D) throw ValidationError("NetVLAD relevance: size mismatch");
  const Tensor v = vlad_residuals(x, a, centers);
  MatRM S(M, D);
  for (std::size_t k = 0; k < M; ++k) {
    for (std::size_t j = 0; j < D; ++j) S(Eigen::Index(k), Eigen::Index(j)) = r[k * D + j] / stabilize(v[k * D + j], eps);
  }
  const ConstMapRM A(a.data(), Eigen::Index(n), Eigen::Index(M));
  const MatRM back = A * S;
  Tensor out({n, D});
  for (std::size_t i = 0; i < n * D; ++i) out[i] = x[i] * back.data()[i];
  return out;
}

namespace {

struct StageLog {
  std::vector<StageSum> stages;

  void add(const std::string& name, const Tensor& out, const Tensor& in) {
    for (StageSum& s : stages) {
      if (s.stage == name) {
        s.relevance_out += out.sum();
        s.relevance_in += in.sum();
        return;
      }
    }
    stages.push_back({name, out.sum(), in.sum()});
  }
};

Tensor explain_branch(const Branch& b, const BranchTrace& t, const Tensor& r_out,
                      const RuleAssignment& rules, const std::string& name, StageLog& log) {
  // LeakyReLU after conv3 passes relevance unchanged.
  Tensor r_p2 = lrp_conv_alphabeta(r_out, t.pool2.output, b.conv3.weight, rules.alpha, rules.beta,
                                   b.conv3.bias, rules.epsilon);
  log.add(name + ".conv3", r_out, r_p2);
  Tensor r_a2 = lrp_maxpool(r_p2, t.pool2);
  log.add(name + ".pool2", r_p2, r_a2);
  Tensor r_p1 = lrp_conv_alphabeta(r_a2, t.pool1.output, b.conv2.weight, rules.alpha, rules.beta,
                                   b.conv2.bias, rules.epsilon);
  log.add(name + ".conv2", r_a2, r_p1);
  Tensor r_a1 = lrp_maxpool(r_p1, t.pool1);
  log.add(name + ".pool1", r_p1, r_a1);
  Tensor r_x = lrp_input_zB(r_a1, t.input, b.conv1.weight, rules.low, rules.high, rules.epsilon);
  log.add(name + ".conv1", r_a1, r_x);
  return r_x;
}

}  // namespace

RelevanceMap explain_volume(const ClassifierState& state, const Volume& v, int class_index,
                            const ExplainOptions& options) {
  if (class_index != 0 && class_index != 1) {
    throw ValidationError("explain: class index must be 0 or 1");
  }
  if (!all_finite(state)) throw ValidationError("explain: classifier state has non-finite values");
  options.rules.validate();
  const RuleAssignment& rules = options.rules;
  const ClassifierTrace t = classifier_forward(v, state, options.use_mask);
  StageLog log;

  Tensor r_logits({2});
  r_logits[std::size_t(class_index)] = t.logits[std::size_t(class_index)];
  const Tensor r_vlad =
      lrp_linear_0(r_logits, t.vlad.output, state.head.weight, state.head.bias, rules.epsilon);
  log.add("head", r_logits, r_vlad);
  const Tensor r_desc = gxi_netvlad(r_vlad, t.vlad.descriptors, t.vlad.assignment,
                                    state.netvlad.centers, rules.epsilon);
  log.add("netvlad", r_vlad, r_desc);

  RelevanceMap out;
  out.class_index = class_index;
  out.score = t.logits[std::size_t(class_index)];
  const std::size_t S = v.slices(), H = v.height(), W = v.width(), D = state.config.descriptor_dim;
  out.image_relevance = Tensor({S, H, W});
  out.mask_relevance = Tensor({S, H, W});
  for (std::size_t i = 0; i < S; ++i) {
    const SliceTrace& st = t.slices[i];
    Tensor r_d({D});
    std::copy_n(r_desc.data() + i * D, D, r_d.data());
    const Tensor r_spp = lrp_linear_0(r_d, st.pyramid.output, state.post_spp.weight,
                                      state.post_spp.bias, rules.epsilon);
    log.add("post_spp", r_d, r_spp);
    const Tensor r_gated = lrp_maxpool(r_spp, st.pyramid);
    log.add("spp", r_spp, r_gated);
    const GateRelevance rg = gxi_gate(r_gated, st.global.out, st.side.out, rules.epsilon);
    Tensor both = rg.global;
    both += rg.side;
    log.add("gate", r_gated, both);
    const Tensor r_img = explain_branch(state.global, st.global, rg.global, rules, "global", log);
    const Tensor r_msk = explain_branch(state.side, st.side, rg.side, rules, "side", log);
    std::copy_n(r_img.data(), H * W, out.image_relevance.data() + i * H * W);
    std::copy_n(r_msk.data(), H * W, out.mask_relevance.data() + i * H * W);
  }
  if (options.smooth) {
    out.image_relevance = gaussian_smooth(out.image_relevance, options.smooth_sigma);
    out.mask_relevance = gaussian_smooth(out.mask_relevance, options.smooth_sigma);
  }
  out.stages = std::move(log.stages);
  return out;
}

Tensor gaussian_smooth(const Tensor& planes, double sigma) {
  if (!(sigma > 0)) return planes;
  const auto radius = std::ptrdiff_t(std::ceil(3.0 * sigma));
  std::vector<double> k(std::size_t(2 * radius + 1));
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    k[std::size_t(i + radius)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  }
  const std::size_t P = planes.dim(0), H = planes.dim(1), W = planes.dim(2);
  Tensor tmp(planes.shape()), out(planes.shape());
  auto pass = [&](const Tensor& src, Tensor& dst, bool horizontal) {
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          double acc = 0.0, norm = 0.0;
          for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
            const std::ptrdiff_t yy = std::ptrdiff_t(y) + (horizontal ? 0 : d);
            const std::ptrdiff_t xx = std::ptrdiff_t(x) + (horizontal ? d : 0);
            if (yy < 0 || xx < 0 || yy >= std::ptrdiff_t(H) || xx >= std::ptrdiff_t(W)) continue;
            const double w = k[std::size_t(d + radius)];
            acc += w * src.at(p, std::size_t(yy), std::size_t(xx));
            norm += w;
          }
          dst.at(p, y, x) = acc / norm;
        }
      }
    }
  };
  pass(planes, tmp, true);
  pass(tmp, out, false);
  return out;
}

}  // namespace xcvae
