// Shared helpers for the unit and acceptance suites.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "selfdenoise/autodiff.hpp"
#include "selfdenoise/rng.hpp"
#include "selfdenoise/tensor.hpp"

namespace selfdenoise::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T = double>
Variable<T> random_variable(std::string name, Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  return Variable<T>{std::move(name), random_tensor<T>(std::move(shape), seed, lo, hi), {}, true};
}

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t failures = 0;
  std::size_t kinked = 0;  // stencil straddled a non-differentiable point
  double max_rel_error = 0;
  std::string first_failure;
};

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences with step `h`, for every entry of every variable.
///
/// Relative error is |a − n| / max(|a|, |n|, 1e-6); the floor sits above the
/// ~1e-11 round-off of a central difference at h = 1e-5. A stencil that straddles
/// a kink (ReLU-type or |·|) shows up as disagreeing one-sided slopes; the
/// networks here are piecewise linear along any single coordinate, so the
/// analytic value must then match the slope of one side exactly, possibly
/// after shrinking the step.
inline GradCheckResult gradcheck(const std::function<Node<double>(Tape<double>&)>& loss,
                                 const std::vector<Variable<double>*>& vars, double h = 1e-5, double tol = 1e-4) {
  auto eval = [&] {
    Tape<double> tape;
    return loss(tape).value()[0];
  };
  for (auto* v : vars) v->zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  std::vector<Tensor<double>> analytic;
  for (auto* v : vars) analytic.push_back(v->has_grad() ? v->grad : Tensor<double>(v->value.shape()));
  for (auto* v : vars) v->zero_grad();

  auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); };

  GradCheckResult r;
  const double f0 = eval();
  for (std::size_t k = 0; k < vars.size(); ++k) {
    auto& val = vars[k]->value;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double saved = val[i];
      const double a = analytic[k][i];
      double e = 0, central = 0;
      // A parameter shared by many units (a bias) can have several kinks
      // near it; shrinking the step separates them.
      for (double step = h; step >= h * 1e-2; step /= 10) {
        val[i] = saved + step;
        const double fp = eval();
        val[i] = saved - step;
        const double fm = eval();
        val[i] = saved;
        central = (fp - fm) / (2 * step);
        e = rel(a, central);
        if (e < tol) break;
        const double fwd = (fp - f0) / step, bwd = (f0 - fm) / step;
        if (rel(fwd, bwd) < tol) break;
        if (step == h) ++r.kinked;
        e = std::min(rel(a, fwd), rel(a, bwd));
        if (e < tol) break;
      }
      ++r.checked;
      r.max_rel_error = std::max(r.max_rel_error, e);
      if (e >= tol) {
        if (r.failures++ == 0)
          r.first_failure = vars[k]->name + "[" + std::to_string(i) + "]: analytic " + std::to_string(a) +
                            " numeric " + std::to_string(central);
      }
    }
  }
  return r;
}

}  // namespace selfdenoise::testing
