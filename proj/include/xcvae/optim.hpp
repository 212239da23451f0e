#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xcvae/params.hpp"
#include "xcvae/tensor.hpp"

namespace xcvae {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// L2 penalty added to the gradient before the moment updates.
  double weight_decay = 0.0;
};

/// Adam with bias correction. Moment buffers are bound to the position of each
/// tensor in the list passed to step(), so callers must keep the order fixed.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads);

  template <class State, class Keep>
  void step(State& params, const State& grads, Keep&& keep) {
    std::vector<Tensor*> p;
    std::vector<const Tensor*> g;
    for (auto& np : collect_params(params)) {
      if (keep(np.name)) p.push_back(np.tensor);
    }
    for (auto& ng : collect_params(grads)) {
      if (keep(ng.name)) g.push_back(ng.tensor);
    }
    step(p, g);
  }

  template <class State>
  void step(State& params, const State& grads) {
    step(params, grads, [](const std::string&) { return true; });
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace xcvae
