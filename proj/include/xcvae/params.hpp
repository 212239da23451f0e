#pragma once

#include <string>
#include <type_traits>
#include <vector>

#include "xcvae/layers.hpp"
#include "xcvae/tensor.hpp"

namespace xcvae {

/// Marks a parameter struct for visit_params. Same-qualified Tensor refs are
/// passed to the callback, so const states yield const Tensor&.
template <class S, class T>
concept StateOf = std::is_same_v<std::remove_const_t<S>, T>;

template <class S, class Fn>
  requires StateOf<S, nn::Conv2d>
void visit_params(S& conv, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".weight", conv.weight);
  fn(prefix + ".bias", conv.bias);
}

template <class S, class Fn>
  requires StateOf<S, nn::ConvTranspose2d>
void visit_params(S& conv, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".weight", conv.weight);
  fn(prefix + ".bias", conv.bias);
}

template <class S, class Fn>
  requires StateOf<S, nn::Dense>
void visit_params(S& dense, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".weight", dense.weight);
  fn(prefix + ".bias", dense.bias);
}

template <class State>
struct NamedParam {
  std::string name;
  std::conditional_t<std::is_const_v<State>, const Tensor*, Tensor*> tensor;
};

template <class State>
std::vector<NamedParam<State>> collect_params(State& state, const std::string& prefix = "") {
  std::vector<NamedParam<State>> out;
  visit_params(state, prefix, [&](const std::string& name, auto& t) {
    out.push_back({name, &t});
  });
  return out;
}

/// Same structure as `state`, every array zero.
template <class State>
State zeros_like(const State& state) {
  State z = state;
  visit_params(z, "", [](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

template <class State>
std::size_t parameter_count(const State& state) {
  std::size_t n = 0;
  visit_params(state, "", [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

template <class State>
bool all_finite(const State& state) {
  bool ok = true;
  visit_params(state, "", [&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

}  // namespace xcvae
