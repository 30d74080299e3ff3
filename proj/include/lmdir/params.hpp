#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>

#include "lmdir/autodiff.hpp"
#include "lmdir/random.hpp"

namespace lmdir {

// Named parameter tensors. std::map keeps iteration order, and therefore
// initialisation, serialisation and optimizer updates, deterministic.
template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

template <typename U, typename T>
ParamSet<U> cast_params(const ParamSet<T>& params) {
  ParamSet<U> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<U>());
  return out;
}

template <typename T>
std::int64_t parameter_count(const ParamSet<T>& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

inline std::string join_name(std::string_view prefix, std::string_view name) {
  if (prefix.empty()) return std::string(name);
  std::string s(prefix);
  s += '.';
  s += name;
  return s;
}

// Exposes a ParamSet to a Graph as leaf Vars, bound lazily and once per name.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Graph<T>& graph, const ParamSet<T>& params, bool trainable = true)
      : graph_(graph), params_(params), trainable_(trainable) {}

  Var<T> get(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) throw Error(ErrorCode::NotFound, "parameter '" + name + "' is not defined");
    Var<T> v = graph_.leaf(p->second, trainable_);
    bound_.emplace(name, v);
    return v;
  }

  const Tensor<T>& raw(const std::string& name) const {
    auto p = params_.find(name);
    if (p == params_.end()) throw Error(ErrorCode::NotFound, "parameter '" + name + "' is not defined");
    return p->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Graph<T>& graph() const { return graph_; }
  const ParamSet<T>& params() const { return params_; }

  // Gradients for every parameter; unused ones are zero.
  ParamSet<T> gradients() const {
    ParamSet<T> out;
    for (const auto& [name, t] : params_) {
      auto it = bound_.find(name);
      if (it != bound_.end() && !it->second.grad().empty()) {
        out.emplace(name, it->second.grad());
      } else {
        out.emplace(name, Tensor<T>(t.shape()));
      }
    }
    return out;
  }

 private:
  Graph<T>& graph_;
  const ParamSet<T>& params_;
  bool trainable_;
  std::map<std::string, Var<T>> bound_;
};

// A prefix into a ParamBinding, e.g. "enc.0.1" -> "enc.0.1.attn.qkv.w".
template <typename T>
class Scope {
 public:
  Scope(ParamBinding<T>& binding, std::string prefix = {}) : binding_(&binding), prefix_(std::move(prefix)) {}

  Var<T> operator[](std::string_view name) const { return binding_->get(join_name(prefix_, name)); }
  const Tensor<T>& raw(std::string_view name) const { return binding_->raw(join_name(prefix_, name)); }
  bool has(std::string_view name) const { return binding_->has(join_name(prefix_, name)); }
  Scope sub(std::string_view name) const { return Scope(*binding_, join_name(prefix_, name)); }

  Graph<T>& graph() const { return binding_->graph(); }
  const std::string& prefix() const { return prefix_; }

 private:
  ParamBinding<T>* binding_;
  std::string prefix_;
};

// Adds freshly initialised parameters under a prefix. Values are drawn in
// double and rounded, so float and double parameter sets built from the same
// seed agree to float precision.
template <typename T>
class ParamInit {
 public:
  ParamInit(ParamSet<T>& params, Rng& rng, std::string prefix = {})
      : params_(&params), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamInit sub(std::string_view name) const { return ParamInit(*params_, *rng_, join_name(prefix_, name)); }

  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void uniform(std::string_view name, Shape shape, std::int64_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng_->uniform(-bound, bound));
    put(name, std::move(t));
  }

  void constant(std::string_view name, Shape shape, T value) { put(name, Tensor<T>(std::move(shape), value)); }
  void zeros(std::string_view name, Shape shape) { constant(name, std::move(shape), T{0}); }

  Rng& rng() { return *rng_; }

 private:
  void put(std::string_view name, Tensor<T> t) {
    auto [it, inserted] = params_->emplace(join_name(prefix_, name), std::move(t));
    if (!inserted) throw Error(ErrorCode::InvalidConfig, "duplicate parameter '" + it->first + "'");
  }

  ParamSet<T>* params_;
  Rng* rng_;
  std::string prefix_;
};

}  // namespace lmdir
