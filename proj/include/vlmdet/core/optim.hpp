#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vlmdet/core/tensor.hpp"

namespace vlmdet {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

// Named parameters in registration order. Names are hierarchical paths
// ("visual.blocks.0.attn.qkv.w") and must be unique.
template <class T>
class ParameterSet {
 public:
  void add(std::string name, Tensor<T> tensor, bool trainable = true) {
    if (index_.count(name) != 0) throw PreconditionError("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(tensor), trainable});
  }

  std::size_t size() const { return params_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("no parameter named " + name);
    return params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->at(name);
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t numel(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p.trainable) n += p.tensor.numel();
    return n;
  }

  void set_trainable(bool trainable) {
    for (auto& p : params_) {
      p.trainable = trainable;
      p.tensor.set_requires_grad(trainable);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update with bias correction for step t (t >= 1). Moments are
// updated in place.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 const AdamHyper& h, std::size_t t) {
  if (t == 0) throw PreconditionError("adam step counter starts at 1");
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam: parameter has " + std::to_string(param.size()) + " values, grad " +
                     std::to_string(grad.size()));
  }
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T step = static_cast<T>(h.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(h.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    param[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
  }
}

// Adam over a ParameterSet. Only trainable parameters that hold a gradient
// are touched; everything else stays bitwise identical.
template <class T>
class Adam {
 public:
  explicit Adam(AdamHyper h = {}) : hyper_(h) {}

  const AdamHyper& hyper() const { return hyper_; }
  void set_lr(double lr) { hyper_.lr = lr; }
  std::size_t steps() const { return t_; }

  void step(ParameterSet<T>& params) {
    ++t_;
    for (auto& p : params) {
      if (!p.trainable || !p.tensor.has_grad()) continue;
      auto& st = state_[p.name];
      if (st.m.empty()) {
        st.m.assign(p.tensor.numel(), T(0));
        st.v.assign(p.tensor.numel(), T(0));
      }
      adam_update<T>(p.tensor.mutable_data(), p.tensor.grad(), st.m, st.v, hyper_, t_);
    }
  }

  struct Moments {
    std::vector<T> m, v;
  };
  const Moments* moments(const std::string& name) const {
    auto it = state_.find(name);
    return it == state_.end() ? nullptr : &it->second;
  }

 private:
  AdamHyper hyper_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace vlmdet
