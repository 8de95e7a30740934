// Empirical parameter-gradient kernels and gradient-flow traces for tiny
// models.
//
// During gradient descent on L = Σ_i l_i, a scalar probe p of the model
// output moves by
//
//   p(f_{n+1}(x)) − p(f_n(x)) ≈ γ Σ_i α_i · κ(x, x_i),
//
// where α_i = −∂l_i/∂f(x_i) and κ is the tangent kernel. Contracting α_i with
// the output-space kernel is the same as −∇θ p(f(x)) · ∇θ l_i, which is what
// the trace stores per (probe, sample, step). Summing those terms with the
// left-point rule reproduces the discrete Euler trajectory exactly for models
// that are linear in θ.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfdenoise/model.hpp"
#include "selfdenoise/training.hpp"

namespace selfdenoise {

/// A differentiable model plus its training loss, as seen by the flow code.
template <typename T>
struct FlowSubject {
  /// Output heads, coarse to fine; the last one is probed.
  std::function<std::vector<Node<T>>(Tape<T>&, const Tensor<T>&)> forward;
  /// Batch loss; must be the batch mean of identical per-sample terms.
  std::function<Node<T>(const std::vector<Node<T>>&, const Tensor<T>&)> loss;
  std::function<std::vector<Variable<T>*>()> parameters;
};

template <typename T>
FlowSubject<T> autoencoder_subject(AutoencoderModel<T>& model) {
  FlowSubject<T> s;
  s.forward = [&model](Tape<T>& tape, const Tensor<T>& x) { return model.forward(tape, x).heads; };
  s.loss = [](const std::vector<Node<T>>& heads, const Tensor<T>& x) {
    MultiScaleOutput<T> out;
    out.heads = heads;
    return mcnn_loss(out, x);
  };
  s.parameters = [&model] { return model.parameters(); };
  return s;
}

/// f(x) = θᵀx, realised as a single full-image correlation. Its training
/// target is each sample's mean intensity, fitted with squared error.
template <typename T>
class LinearModel {
 public:
  LinearModel(std::size_t channels, std::size_t size, std::uint64_t seed)
      : theta_{"theta", Tensor<T>(Shape{1, channels, size, size}), {}, true} {
    Rng rng(seed);
    const double limit = std::sqrt(3.0 / static_cast<double>(theta_.value.size()));
    for (auto& v : theta_.value.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  }

  Variable<T>& theta() { return theta_; }

  FlowSubject<T> subject() {
    FlowSubject<T> s;
    s.forward = [this](Tape<T>& tape, const Tensor<T>& x) {
      return std::vector<Node<T>>{conv2d(tape.constant(x, "input"), tape.variable(theta_), std::optional<Node<T>>{}, 1, 0)};
    };
    s.loss = [](const std::vector<Node<T>>& heads, const Tensor<T>& x) {
      const std::size_t N = x.dim(0), per = x.size() / N;
      Tensor<T> target(Shape{N, 1, 1, 1});
      for (std::size_t n = 0; n < N; ++n) {
        T acc{0};
        for (std::size_t k = 0; k < per; ++k) acc += x[n * per + k];
        target[n] = acc / static_cast<T>(per);
      }
      return mse_loss(heads.back(), heads.back().tape->constant(target, "target"));
    };
    s.parameters = [this] { return std::vector<Variable<T>*>{&theta_}; };
    return s;
  }

 private:
  Variable<T> theta_;
};

/// Linear scalar reduction of the finest output head of one sample.
template <typename T>
struct KernelProbe {
  Tensor<T> weights;

  /// Mean over the square of side `extent` at the centre of a [1,C,S,S] output.
  static KernelProbe center_mean(std::size_t channels, std::size_t size, std::size_t extent) {
    KernelProbe p{Tensor<T>(Shape{1, channels, size, size})};
    const std::size_t lo = (size - extent) / 2;
    const T w = T{1} / static_cast<T>(channels * extent * extent);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = lo; i < lo + extent; ++i)
        for (std::size_t j = lo; j < lo + extent; ++j) p.weights.at(0, c, i, j) = w;
    return p;
  }
};

namespace detail {

template <typename T>
std::vector<T> probe_gradient(const FlowSubject<T>& subject, const Tensor<T>& x, const KernelProbe<T>& probe,
                              T* value = nullptr) {
  auto params = subject.parameters();
  Tape<T> tape;
  auto heads = subject.forward(tape, x);
  auto s = weighted_sum(heads.back(), probe.weights);
  if (value) *value = s.value()[0];
  zero_grads<T>(params);
  tape.backward(s);
  auto g = flatten_grads<T>(params);
  zero_grads<T>(params);
  return g;
}

template <typename T>
T dot(const std::vector<T>& a, const std::vector<T>& b) {
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// κ(x_a, x_b): inner product of the parameter gradients of probe∘f at both inputs.
template <typename T>
T empirical_kernel(const FlowSubject<T>& subject, const Tensor<T>& x_a, const Tensor<T>& x_b,
                   const KernelProbe<T>& probe) {
  return detail::dot(detail::probe_gradient(subject, x_a, probe), detail::probe_gradient(subject, x_b, probe));
}

/// Gram matrix of κ over `inputs`.
template <typename T>
Eigen::MatrixXd kernel_gram(const FlowSubject<T>& subject, std::span<const Tensor<T>> inputs,
                            const KernelProbe<T>& probe) {
  std::vector<std::vector<T>> g;
  for (const auto& x : inputs) g.push_back(detail::probe_gradient(subject, x, probe));
  Eigen::MatrixXd K(g.size(), g.size());
  for (std::size_t a = 0; a < g.size(); ++a)
    for (std::size_t b = 0; b <= a; ++b) K(a, b) = K(b, a) = static_cast<double>(detail::dot(g[a], g[b]));
  return K;
}

/// α = −∂L/∂f for the finest head of every sample in `batch`.
template <typename T>
Tensor<T> alpha_finest(const FlowSubject<T>& subject, const Tensor<T>& batch) {
  auto params = subject.parameters();
  Tape<T> tape;
  auto heads = subject.forward(tape, batch);
  auto loss = subject.loss(heads, batch);
  tape.backward(loss);
  zero_grads<T>(params);
  Tensor<T> a = tape.grad(heads.back());
  for (auto& v : a.data()) v = -v;
  return a;
}

struct FlowStep {
  double time = 0;
  double loss = 0;
  Eigen::MatrixXd gram;                                // κ over probes
  std::vector<double> probe_values;                    // p(f_t(x_probe))
  std::vector<std::vector<double>> contributions;      // [probe][sample] α_i·κ(x_probe, x_i)
  std::vector<double> alpha_l1;                        // per sample Σ|α_i|
};

template <typename T>
struct FlowTrace {
  double step = 0;
  std::vector<Tensor<T>> probes;
  std::vector<FlowStep> steps;

  void write_csv(std::ostream& os) const {
    const std::size_t P = probes.size();
    os << "t,loss";
    for (std::size_t a = 0; a < P; ++a)
      for (std::size_t b = a; b < P; ++b) os << ",kappa_" << a << '_' << b;
    if (!steps.empty())
      for (std::size_t i = 0; i < steps[0].alpha_l1.size(); ++i) os << ",alpha_l1_" << i;
    for (std::size_t a = 0; a < P; ++a) os << ",probe_" << a;
    os << '\n';
    os.precision(12);
    for (const auto& s : steps) {
      os << s.time << ',' << s.loss;
      for (std::size_t a = 0; a < P; ++a)
        for (std::size_t b = a; b < P; ++b) os << ',' << s.gram(a, b);
      for (double v : s.alpha_l1) os << ',' << v;
      for (double v : s.probe_values) os << ',' << v;
      os << '\n';
    }
  }
};

/// Raised when the flow diverges; carries the trace up to that point.
template <typename T>
class FlowDiverged : public std::runtime_error {
 public:
  FlowDiverged(std::string what, FlowTrace<T> trace) : std::runtime_error(std::move(what)), trace_(std::move(trace)) {}
  const FlowTrace<T>& trace() const noexcept { return trace_; }

 private:
  FlowTrace<T> trace_;
};

/// Forward-Euler integration of dθ/dt = −∇L(θ) on the full batch `data`
/// up to time `horizon`, recording kernels at every step. The subject's
/// parameters end at θ_T.
template <typename T>
FlowTrace<T> gradient_flow(const FlowSubject<T>& subject, const Tensor<T>& data, double step, double horizon,
                           std::span<const Tensor<T>> probes, const KernelProbe<T>& probe) {
  if (!(step > 0)) throw std::invalid_argument("gradient_flow: step must be positive");
  if (!(horizon >= 0)) throw std::invalid_argument("gradient_flow: horizon must be non-negative");
  const auto n_steps = static_cast<std::size_t>(std::llround(horizon / step));
  const std::size_t N = data.dim(0);
  std::vector<Tensor<T>> samples;
  for (std::size_t i = 0; i < N; ++i) samples.push_back(batch_item(data, i));

  FlowTrace<T> trace;
  trace.step = step;
  trace.probes.assign(probes.begin(), probes.end());
  auto params = subject.parameters();

  for (std::size_t n = 0;; ++n) {
    FlowStep rec;
    rec.time = static_cast<double>(n) * step;

    std::vector<std::vector<T>> gp;
    for (const auto& x : probes) {
      T v{};
      gp.push_back(detail::probe_gradient(subject, x, probe, &v));
      rec.probe_values.push_back(static_cast<double>(v));
    }
    rec.gram.resize(static_cast<Eigen::Index>(gp.size()), static_cast<Eigen::Index>(gp.size()));
    for (std::size_t a = 0; a < gp.size(); ++a)
      for (std::size_t b = 0; b <= a; ++b)
        rec.gram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
            rec.gram(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) =
                static_cast<double>(detail::dot(gp[a], gp[b]));

    // Each sample's share of the batch-mean loss is 1/N of its own loss.
    rec.contributions.assign(gp.size(), std::vector<double>(N));
    for (std::size_t i = 0; i < N; ++i) {
      Tape<T> tape;
      auto heads = subject.forward(tape, samples[i]);
      auto li = subject.loss(heads, samples[i]);
      zero_grads<T>(params);
      tape.backward(li);
      const auto gi = flatten_grads<T>(params);
      for (std::size_t a = 0; a < gp.size(); ++a)
        rec.contributions[a][i] = -static_cast<double>(detail::dot(gp[a], gi)) / static_cast<double>(N);
    }

    Tape<T> tape;
    auto heads = subject.forward(tape, data);
    auto loss = subject.loss(heads, data);
    rec.loss = static_cast<double>(loss.value()[0]);
    zero_grads<T>(params);
    tape.backward(loss);
    const auto& dfine = tape.grad(heads.back());
    const std::size_t per = dfine.size() / N;
    for (std::size_t i = 0; i < N; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < per; ++k) s += std::abs(static_cast<double>(dfine[i * per + k]));
      rec.alpha_l1.push_back(s);
    }

    const double initial = trace.steps.empty() ? rec.loss : trace.steps.front().loss;
    const double previous = trace.steps.empty() ? rec.loss : trace.steps.back().loss;
    trace.steps.push_back(std::move(rec));
    const double current = trace.steps.back().loss;
    if (!std::isfinite(current) || current > 10 * initial) {
      zero_grads<T>(params);
      throw FlowDiverged<T>("gradient_flow: loss diverged at step " + std::to_string(n), std::move(trace));
    }
    if (n > 0 && n <= 10 && current > previous) {
      zero_grads<T>(params);
      throw std::invalid_argument("gradient_flow: loss increased at step " + std::to_string(n) +
                                  "; use a smaller step");
    }
    if (n == n_steps) {
      zero_grads<T>(params);
      break;
    }
    sgd_step<T>(params, step);
  }
  return trace;
}

/// Relative residual of the weighted-query decomposition for probe input `x`:
/// |b0 + Σ_i Σ_n γ α_i·κ(x, x_i) − p(f_T(x))| / |p(f_T(x)) − b0|, where b0 is
/// the probe value at initialisation and f_T is the subject's current state.
template <typename T>
double verify_query_decomposition(const FlowTrace<T>& trace, const FlowSubject<T>& subject, const Tensor<T>& x,
                                  const KernelProbe<T>& probe) {
  std::size_t p = trace.probes.size();
  for (std::size_t k = 0; k < trace.probes.size(); ++k)
    if (trace.probes[k] == x) {
      p = k;
      break;
    }
  if (p == trace.probes.size()) throw std::invalid_argument("verify_query_decomposition: input is not a traced probe");
  if (trace.steps.empty()) throw std::invalid_argument("verify_query_decomposition: empty trace");

  const double b0 = trace.steps.front().probe_values[p];
  double integral = 0;
  for (std::size_t n = 0; n + 1 < trace.steps.size(); ++n)
    for (double c : trace.steps[n].contributions[p]) integral += trace.step * c;
  T actual{};
  detail::probe_gradient(subject, x, probe, &actual);
  const double err = std::abs(b0 + integral - static_cast<double>(actual));
  const double change = std::abs(static_cast<double>(actual) - b0);
  if (err == 0) return 0;
  return change > 0 ? err / change : std::numeric_limits<double>::infinity();
}

}  // namespace selfdenoise
