// Compressive convolutional autoencoder with one output head per decoder scale.
//
// Encoder stage:  conv3x3 -> act -> conv3x3/stride 2 -> act
// Bottleneck:     conv1x1 down to `bottleneck_channels` (linear)
// Decoder stage:  transpose-conv4x4/stride 2 -> act -> conv3x3 -> act -> head (conv1x1)
//
// There is no path from the encoder to the decoder that avoids the bottleneck,
// so the network cannot learn the identity on its training images.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "selfdenoise/autodiff.hpp"
#include "selfdenoise/ops.hpp"
#include "selfdenoise/rng.hpp"

namespace selfdenoise {

struct ModelConfig {
  std::size_t input_size = 64;
  std::size_t input_channels = 1;
  std::size_t stages = 4;
  std::size_t base_width = 16;
  std::size_t bottleneck_channels = 64;
  double activation_slope = 0.01;

  std::size_t bottleneck_size() const { return input_size >> stages; }

  /// Channels after encoder stage `s`: base doubled per stage, capped at 8x base.
  std::size_t width(std::size_t s) const { return base_width * std::min<std::size_t>(std::size_t{1} << std::min<std::size_t>(s, 3), 8); }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (input_size == 0 || input_channels == 0 || stages == 0 || base_width == 0)
      fail("sizes must be positive");
    if (input_size & (input_size - 1)) fail("input_size must be a power of two");
    if (stages >= 31 || (input_size >> stages) < 4)
      fail("input_size / 2^stages must be at least 4 (input " + std::to_string(input_size) + ", stages " +
           std::to_string(stages) + ")");
    if (bottleneck_channels == 0) fail("bottleneck_channels must be >= 1");
    if (!(activation_slope >= 0 && activation_slope < 1)) fail("activation_slope must lie in [0,1)");
    if (bottleneck_channels * bottleneck_size() * bottleneck_size() >= input_size * input_size * input_channels)
      fail("bottleneck does not compress the input");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// All decoder heads of one forward pass plus the node ids needed for the
/// structural check. `heads` run coarse to fine; `heads.back()` is the
/// denoised prediction.
template <typename T>
struct MultiScaleOutput {
  std::vector<Node<T>> heads;
  Node<T> input;
  std::vector<std::size_t> encoder_nodes;
  std::size_t bottleneck_node = 0;

  Node<T> finest() const { return heads.back(); }
};

template <typename T>
class AutoencoderModel {
 public:
  struct Layer {
    enum class Kind { conv, conv_transpose } kind;
    std::size_t weight, bias;  // indices into params_
    std::size_t stride, padding;
  };

  AutoencoderModel() = default;

  const ModelConfig& config() const noexcept { return config_; }

  std::vector<Variable<T>*> parameters() {
    std::vector<Variable<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  const std::vector<Variable<T>>& named_parameters() const noexcept { return params_; }
  std::vector<Variable<T>>& named_parameters() noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  MultiScaleOutput<T> forward(Tape<T>& tape, const Tensor<T>& batch) {
    const auto& c = config_;
    if (batch.rank() != 4 || batch.dim(1) != c.input_channels || batch.dim(2) != c.input_size ||
        batch.dim(3) != c.input_size)
      throw DimensionError("model forward: expected [N," + std::to_string(c.input_channels) + "," +
                           std::to_string(c.input_size) + "," + std::to_string(c.input_size) + "], got " +
                           shape_str(batch.shape()));
    const T slope = static_cast<T>(c.activation_slope);
    MultiScaleOutput<T> out;
    out.input = tape.constant(batch, "input");
    out.encoder_nodes.push_back(out.input.id);

    Node<T> h = out.input;
    std::size_t li = 0;
    for (std::size_t s = 0; s < c.stages; ++s) {
      for (int k = 0; k < 2; ++k) {
        h = leaky_relu(apply(tape, layers_[li++], h), slope);
        out.encoder_nodes.push_back(h.id - 1);
        out.encoder_nodes.push_back(h.id);
      }
    }
    h = apply(tape, layers_[li++], h);
    out.bottleneck_node = h.id;
    for (std::size_t k = 0; k < c.stages; ++k) {
      h = leaky_relu(apply(tape, layers_[li++], h), slope);
      h = leaky_relu(apply(tape, layers_[li++], h), slope);
      out.heads.push_back(apply(tape, layers_[li++], h));
    }
    return out;
  }

  /// Glorot-uniform weights drawn from `seed`, zero biases.
  static AutoencoderModel build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    AutoencoderModel m;
    m.config_ = config;
    Rng rng(seed);
    const std::size_t S = config.stages;
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t in = s == 0 ? config.input_channels : config.width(s - 1);
      const std::size_t w = config.width(s);
      m.add_conv("enc" + std::to_string(s) + ".conv_a", Shape{w, in, 3, 3}, 1, 1, rng);
      m.add_conv("enc" + std::to_string(s) + ".conv_b", Shape{w, w, 3, 3}, 2, 1, rng);
    }
    m.add_conv("bottleneck", Shape{config.bottleneck_channels, config.width(S - 1), 1, 1}, 1, 0, rng);
    for (std::size_t k = 0; k < S; ++k) {
      const std::size_t in = k == 0 ? config.bottleneck_channels : config.width(S - k);
      const std::size_t w = config.width(S - 1 - k);
      const std::string p = "dec" + std::to_string(k);
      m.add_layer(p + ".up", Layer::Kind::conv_transpose, Shape{in, w, 4, 4}, w, 2, 1, rng);
      m.add_conv(p + ".conv", Shape{w, w, 3, 3}, 1, 1, rng);
      m.add_conv("head" + std::to_string(k), Shape{config.input_channels, w, 1, 1}, 1, 0, rng);
    }
    return m;
  }

  /// Same topology and parameter values at another precision.
  template <typename U>
  AutoencoderModel<U> cast() const {
    AutoencoderModel<U> m;
    m.config_ = config_;
    for (const auto& l : layers_)
      m.layers_.push_back({static_cast<typename AutoencoderModel<U>::Layer::Kind>(l.kind), l.weight, l.bias,
                           l.stride, l.padding});
    for (const auto& p : params_) m.params_.push_back(Variable<U>{p.name, p.value.template cast<U>(), {}, p.requires_grad});
    return m;
  }

  /// Builds the topology for `config` and takes parameter values from `values`
  /// (matched by name and shape).
  static AutoencoderModel from_parameters(const ModelConfig& config, const std::vector<Variable<T>>& values) {
    AutoencoderModel m = build(config, 0);
    if (values.size() != m.params_.size())
      throw std::invalid_argument("parameter count " + std::to_string(values.size()) + " does not match model (" +
                                  std::to_string(m.params_.size()) + ")");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].name != m.params_[i].name || values[i].value.shape() != m.params_[i].value.shape())
        throw std::invalid_argument("parameter '" + values[i].name + "' " + shape_str(values[i].value.shape()) +
                                    " does not match expected '" + m.params_[i].name + "' " +
                                    shape_str(m.params_[i].value.shape()));
      m.params_[i].value = values[i].value;
    }
    return m;
  }

 private:
  template <typename U>
  friend class AutoencoderModel;

  Node<T> apply(Tape<T>& tape, const Layer& l, Node<T> x) {
    auto w = tape.variable(params_[l.weight]);
    auto b = tape.variable(params_[l.bias]);
    return l.kind == Layer::Kind::conv ? conv2d(x, w, std::optional(b), l.stride, l.padding)
                                       : conv2d_transpose(x, w, std::optional(b), l.stride, l.padding);
  }

  void add_conv(const std::string& name, Shape kshape, std::size_t stride, std::size_t pad, Rng& rng) {
    const std::size_t out = kshape[0];
    add_layer(name, Layer::Kind::conv, std::move(kshape), out, stride, pad, rng);
  }

  void add_layer(const std::string& name, typename Layer::Kind kind, Shape kshape, std::size_t out_channels,
                 std::size_t stride, std::size_t pad, Rng& rng) {
    const double receptive = static_cast<double>(kshape[2] * kshape[3]);
    const double fan_in = static_cast<double>(kshape[1]) * receptive;
    const double fan_out = static_cast<double>(kshape[0]) * receptive;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor<T> w(kshape);
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-limit, limit));
    params_.push_back(Variable<T>{name + ".weight", std::move(w), {}, true});
    params_.push_back(Variable<T>{name + ".bias", Tensor<T>(Shape{out_channels}), {}, true});
    layers_.push_back(Layer{kind, params_.size() - 2, params_.size() - 1, stride, pad});
  }

  ModelConfig config_;
  std::vector<Layer> layers_;
  std::vector<Variable<T>> params_;
};

/// Target pyramid: `levels` tensors, finest first, each an avg_pool2 of the previous.
template <typename T>
std::vector<Tensor<T>> target_pyramid(const Tensor<T>& target, std::size_t levels) {
  std::vector<Tensor<T>> out{target};
  while (out.size() < levels) out.push_back(avg_pool2(out.back()));
  return out;
}

/// Per-scale L1 terms, coarse to fine, matching `output.heads`.
template <typename T>
std::vector<Node<T>> mcnn_loss_terms(const MultiScaleOutput<T>& output, const Tensor<T>& target) {
  if (output.heads.empty()) throw std::invalid_argument("mcnn_loss: no heads");
  Tape<T>& tape = *output.heads.back().tape;
  require_same_shape(output.heads.back().value(), target, "mcnn_loss target");
  const auto pyramid = target_pyramid(target, output.heads.size());
  std::vector<Node<T>> terms;
  for (std::size_t k = 0; k < output.heads.size(); ++k) {
    const auto& t = pyramid[output.heads.size() - 1 - k];
    terms.push_back(l1_loss(output.heads[k], tape.constant(t, "target")));
  }
  return terms;
}

/// Σ_k l1(head_k, pool^k(target)), equal weights.
template <typename T>
Node<T> mcnn_loss(const MultiScaleOutput<T>& output, const Tensor<T>& target) {
  auto terms = mcnn_loss_terms(output, target);
  Node<T> total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  return total;
}

/// True iff no head is reachable from an encoder node without passing through
/// the bottleneck node.
template <typename T>
bool has_no_skip_connections(const Tape<T>& tape, const MultiScaleOutput<T>& out) {
  std::vector<std::vector<std::size_t>> consumers(tape.size());
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (auto in : tape.entry(i).inputs) consumers[in].push_back(i);

  std::vector<char> seen(tape.size(), 0);
  std::deque<std::size_t> queue;
  for (auto e : out.encoder_nodes)
    if (e != out.bottleneck_node && !seen[e]) seen[e] = 1, queue.push_back(e);
  while (!queue.empty()) {
    const auto n = queue.front();
    queue.pop_front();
    for (auto c : consumers[n])
      if (c != out.bottleneck_node && !seen[c]) seen[c] = 1, queue.push_back(c);
  }
  return std::none_of(out.heads.begin(), out.heads.end(), [&](const Node<T>& h) { return seen[h.id] != 0; });
}

template <typename T>
bool assert_no_skip_connections(AutoencoderModel<T>& model) {
  const auto& c = model.config();
  Tape<T> tape;
  auto out = model.forward(tape, Tensor<T>(Shape{1, c.input_channels, c.input_size, c.input_size}));
  return has_no_skip_connections(tape, out);
}

}  // namespace selfdenoise
