#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vlmdet/core/tensor.hpp"

namespace vlmdet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

// |a - n| / max(|a|, |n|, floor). The floor is the magnitude below which a
// derivative counts as zero, so structurally zero coordinates compare their
// absolute error against it instead of against each other.
inline double relative_error(double a, double n, double floor = 1e-12) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Fourth-order central-difference check of d f / d inputs. f must take no arguments and
// read the inputs by reference; each input must require grad. At most
// `max_coords` coordinates per tensor are checked (evenly strided).
template <class T>
GradCheckResult finite_diff_grad_check(const std::function<Tensor<T>()>& f,
                                       std::vector<Tensor<T>> inputs, double h = 1e-5,
                                       std::size_t max_coords = 0, double floor = 1e-12) {
  if (!(h > 0.0)) throw PreconditionError("grad check step must be positive");
  for (auto& x : inputs) {
    if (!x.requires_grad()) throw PreconditionError("grad check input does not require grad");
    x.zero_grad();
  }
  std::vector<std::vector<T>> analytic;
  double f0 = 0.0;
  {
    Tape<T> tape;
    Tensor<T> y = f();
    if (y.numel() != 1) throw PreconditionError("grad check needs a scalar-valued function");
    f0 = static_cast<double>(y.item());
    backward(y);
    for (auto& x : inputs) {
      if (x.has_grad())
        analytic.emplace_back(x.grad().begin(), x.grad().end());
      else
        analytic.emplace_back(x.numel(), T(0));
    }
  }
  // The tape above is gone, so the probing evaluations below record nothing.
  auto eval = [&f]() { return static_cast<double>(f().item()); };
  if (eval() != f0 || eval() != f0) {
    throw PreconditionError("grad check: function is not deterministic");
  }

  GradCheckResult res;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto values = inputs[ti].mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride = (max_coords == 0 || n <= max_coords) ? 1 : n / max_coords;
    for (std::size_t i = 0; i < n; i += stride) {
      const T orig = values[i];
      auto at = [&](double dx) {
        values[i] = static_cast<T>(orig + dx);
        return eval();
      };
      const double f1 = at(h), fm1 = at(-h), f2 = at(2 * h), fm2 = at(-2 * h);
      values[i] = orig;
      const double num = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h);
      const double ana = static_cast<double>(analytic[ti][i]);
      const double err = relative_error(ana, num, floor);
      if (err > res.max_rel_error || res.coords_checked == 0) {
        res.max_rel_error = err;
        res.worst_tensor = ti;
        res.worst_index = i;
        res.analytic = ana;
        res.numeric = num;
      }
      ++res.coords_checked;
    }
  }
  for (auto& x : inputs) x.zero_grad();
  return res;
}

// Single-input form: f maps x to a scalar.
template <class T>
double finite_diff_grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                              double h = 1e-5) {
  if (!x.requires_grad()) x.set_requires_grad(true);
  std::function<Tensor<T>()> g = [&f, &x]() { return f(x); };
  return finite_diff_grad_check<T>(g, {x}, h).max_rel_error;
}

}  // namespace vlmdet
