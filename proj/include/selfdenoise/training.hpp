// Gradient-descent training with identical noisy input and target.
#pragma once

#include <Eigen/Core>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "selfdenoise/dataset.hpp"
#include "selfdenoise/model.hpp"
#include "selfdenoise/rng.hpp"

namespace selfdenoise {

enum class Optimizer { sgd, adam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  std::size_t patch_size = 64;
  bool augment = true;
  std::uint64_t seed = 0;
  bool deterministic_order = true;

  void validate() const {
    if (!(learning_rate >= 0 && learning_rate < 1))
      throw std::invalid_argument("train config: learning_rate must lie in [0,1)");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw std::invalid_argument("train config: adam betas must lie in [0,1)");
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_mcnn_loss = 0;
  double mean_l1 = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;

  void write_csv(std::ostream& os) const {
    os << "epoch,mean_mcnn_loss,mean_l1,seconds\n";
    os.precision(9);
    for (const auto& e : epochs)
      os << e.epoch << ',' << e.mean_mcnn_loss << ',' << e.mean_l1 << ',' << e.seconds << '\n';
  }
};

/// Raised when a training step produces a non-finite loss.
class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(std::size_t step, double last_finite)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + " (last finite loss " +
                           std::to_string(last_finite) + ")"),
        step_(step),
        last_finite_(last_finite) {}
  std::size_t step() const noexcept { return step_; }
  double last_finite_loss() const noexcept { return last_finite_; }

 private:
  std::size_t step_;
  double last_finite_;
};

namespace detail {
template <typename T>
void require_grad(const Variable<T>& p) {
  if (!p.has_grad()) throw std::logic_error("optimizer step: parameter '" + p.name + "' has no gradient");
}
}  // namespace detail

/// θ ← θ − γ·∇θ, then clears gradients.
template <typename T>
void sgd_step(std::span<Variable<T>* const> params, double learning_rate) {
  for (auto* p : params) {
    if (!p->requires_grad) continue;
    detail::require_grad(*p);
    const T lr = static_cast<T>(learning_rate);
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
    p->zero_grad();
  }
}

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
};

/// Bias-corrected Adam update; `step_index` counts from 1.
template <typename T>
void adam_step(std::span<Variable<T>* const> params, AdamState<T>& state, const TrainConfig& config,
               std::size_t step_index) {
  if (state.m.empty())
    for (auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step_index));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step_index));
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    if (!p->requires_grad) continue;
    detail::require_grad(*p);
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T g = p->grad[i];
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p->value[i] -= static_cast<T>(config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_epsilon));
    }
    p->zero_grad();
  }
}

// Dihedral group of the square: index d in [0,8) means mirror columns when
// d >= 4, then rotate counter-clockwise by (d % 4) quarter turns.

template <typename T>
Tensor<T> rot90(const Tensor<T>& img) {
  const std::size_t C = img.dim(0), S = img.dim(1);
  Tensor<T> out(img.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) out[(c * S + i) * S + j] = img[(c * S + j) * S + (S - 1 - i)];
  return out;
}

template <typename T>
Tensor<T> mirror(const Tensor<T>& img) {
  const std::size_t C = img.dim(0), S = img.dim(1);
  Tensor<T> out(img.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) out[(c * S + i) * S + j] = img[(c * S + i) * S + (S - 1 - j)];
  return out;
}

template <typename T>
Tensor<T> dihedral(const Tensor<T>& img, unsigned d) {
  if (img.rank() != 3 || img.dim(1) != img.dim(2))
    throw DimensionError("dihedral: expected square [C,S,S], got " + shape_str(img.shape()));
  Tensor<T> out = d >= 4 ? mirror(img) : img;
  for (unsigned r = 0; r < d % 4; ++r) out = rot90(out);
  return out;
}

constexpr unsigned dihedral_inverse(unsigned d) { return d < 4 ? (4 - d) % 4 : d; }

/// Uniform random crops of `patch_size` from `sources` ([C,H,W] each), each
/// optionally passed through a uniformly chosen dihedral transform.
template <typename T>
PatchDataset<T> sample_patches(std::span<const Tensor<T>> sources, std::size_t patch_size, std::size_t count,
                               bool augment, std::uint64_t seed) {
  if (sources.empty()) throw std::invalid_argument("sample_patches: no source images");
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& s = sources[i];
    if (s.rank() != 3 || s.dim(1) < patch_size || s.dim(2) < patch_size)
      throw DimensionError("sample_patches: source image " + std::to_string(i) + " " + shape_str(s.shape()) +
                           " is smaller than patch size " + std::to_string(patch_size));
  }
  Rng rng(seed);
  PatchDataset<T> out{{}, "patches", seed};
  out.patches.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto& src = sources[rng.index(sources.size())];
    const std::size_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
    const std::size_t top = rng.index(H - patch_size + 1);
    const std::size_t left = rng.index(W - patch_size + 1);
    Tensor<T> p(Shape{C, patch_size, patch_size});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < patch_size; ++i)
        for (std::size_t j = 0; j < patch_size; ++j)
          p[(c * patch_size + i) * patch_size + j] = src[(c * H + top + i) * W + left + j];
    if (augment) p = dihedral(p, static_cast<unsigned>(rng.index(8)));
    out.patches.push_back(std::move(p));
  }
  return out;
}

/// Expands a dataset with all 8 dihedral transforms of every patch.
template <typename T>
PatchDataset<T> dihedral_expand(const PatchDataset<T>& data) {
  PatchDataset<T> out{{}, data.kind, data.seed};
  for (const auto& p : data.patches)
    for (unsigned d = 0; d < 8; ++d) out.patches.push_back(dihedral(p, d));
  return out;
}

/// Called every step with the input batch and the finest-scale loss target as
/// they were recorded on the tape.
template <typename T>
using StepHook = std::function<void(const Tensor<T>& input, const Tensor<T>& target)>;

namespace detail {
class ThreadScope {
 public:
  explicit ThreadScope(bool single) : saved_(Eigen::nbThreads()) {
    if (single) Eigen::setNbThreads(1);
  }
  ~ThreadScope() { Eigen::setNbThreads(saved_); }

 private:
  int saved_;
};
}  // namespace detail

/// Trains `model` in place on `data`, each batch serving as its own target.
template <typename T>
TrainReport train(AutoencoderModel<T>& model, const PatchDataset<T>& data, const TrainConfig& config,
                  const std::type_identity_t<StepHook<T>>& hook = {}) {
  config.validate();
  TrainReport report;
  if (config.epochs == 0) return report;
  data.validate();
  const auto& mc = model.config();
  const Shape expected{mc.input_channels, mc.input_size, mc.input_size};
  if (data.patch_shape() != expected)
    throw DimensionError("train: patches are " + shape_str(data.patch_shape()) + " but the model expects " +
                         shape_str(expected));
  if (config.patch_size != mc.input_size)
    throw std::invalid_argument("train: patch_size " + std::to_string(config.patch_size) +
                                " differs from model input_size " + std::to_string(mc.input_size));

  detail::ThreadScope threads(config.deterministic_order);
  auto params = model.parameters();
  AdamState<T> adam;
  std::size_t step = 0;
  double last_finite = 0;
  std::vector<std::size_t> order(data.size());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(config.seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

    double sum_loss = 0, sum_l1 = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Tensor<T> batch = data.batch(std::span(order).subspan(start, end - start));
      if (config.augment) {
        const std::size_t per = batch.size() / (end - start);
        for (std::size_t b = 0; b < end - start; ++b) {
          const auto t = dihedral(batch_item(batch, b).reshaped(expected), static_cast<unsigned>(rng.index(8)));
          std::copy(t.data().begin(), t.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(b * per));
        }
      }
      Tape<T> tape;
      auto out = model.forward(tape, batch);
      auto terms = mcnn_loss_terms(out, batch);
      Node<T> loss = terms[0];
      for (std::size_t k = 1; k < terms.size(); ++k) loss = add(loss, terms[k]);
      if (hook) hook(out.input.value(), tape.value(tape.entry(terms.back().id).inputs[1]));

      const double lv = static_cast<double>(loss.value()[0]);
      ++step;
      if (!std::isfinite(lv)) throw NumericalAbort(step, last_finite);
      last_finite = lv;
      const double w = static_cast<double>(end - start);
      sum_loss += lv * w;
      sum_l1 += static_cast<double>(terms.back().value()[0]) * w;
      report.step_losses.push_back(lv);

      zero_grads<T>(params);
      tape.backward(loss);
      if (config.optimizer == Optimizer::sgd)
        sgd_step<T>(params, config.learning_rate);
      else
        adam_step<T>(params, adam, config, step);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double n = static_cast<double>(data.size());
    report.epochs.push_back(EpochStats{epoch + 1, sum_loss / n, sum_l1 / n, secs});
  }
  return report;
}

}  // namespace selfdenoise
