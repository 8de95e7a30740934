// Flat dotted-key run configuration shared by the command-line tools.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "selfdenoise/io.hpp"
#include "selfdenoise/model.hpp"
#include "selfdenoise/synth.hpp"
#include "selfdenoise/training.hpp"

namespace selfdenoise {

/// Bad flags or configuration values (maps to the CLI's usage exit code).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const KeyValues& defaults() {
    static const KeyValues d = [] {
      const ModelConfig m;
      const TrainConfig t;
      const CorpusStyle s;
      auto num = [](auto v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
      };
      return KeyValues{
          {"model.input_size", num(m.input_size)},
          {"model.channels", num(m.input_channels)},
          {"model.stages", num(m.stages)},
          {"model.base_width", num(m.base_width)},
          {"model.bottleneck_channels", num(m.bottleneck_channels)},
          {"model.activation_slope", num(m.activation_slope)},
          {"model.seed", "0"},
          {"train.optimizer", "adam"},
          {"train.lr", num(t.learning_rate)},
          {"train.beta1", num(t.beta1)},
          {"train.beta2", num(t.beta2)},
          {"train.epsilon", num(t.adam_epsilon)},
          {"train.batch_size", num(t.batch_size)},
          {"train.epochs", num(t.epochs)},
          {"train.patches", "0"},
          {"train.augment", "true"},
          {"train.seed", num(t.seed)},
          {"train.deterministic", "true"},
          {"data.kind", "glyph"},
          {"data.count", "256"},
          {"data.size", "64"},
          {"data.seed", "1"},
          {"data.corpus", ""},
          {"data.glyph_strokes_min", num(s.glyph_strokes_min)},
          {"data.glyph_strokes_max", num(s.glyph_strokes_max)},
          {"data.glyph_width_min", num(s.glyph_width_min)},
          {"data.glyph_width_max", num(s.glyph_width_max)},
          {"data.glyph_grid", num(s.glyph_grid)},
          {"noise.low", "-2"},
          {"noise.high", "2"},
          {"noise.seed", "0"},
          {"denoise.checkpoint", ""},
          {"denoise.inputs", ""},
          {"denoise.tile", "false"},
          {"eval.denoised", ""},
          {"eval.clean", ""},
          {"theory.model", "autoencoder"},
          {"theory.samples", "4"},
          {"theory.step", "0.001"},
          {"theory.steps", "100"},
          {"output.dir", ""},
      };
    }();
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.contains(key)) throw UsageError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Parses `key=value`.
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw UsageError("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void merge_file(const fs::path& path) {
    for (const auto& [k, v] : read_key_values(path)) {
      if (!values_.contains(k)) throw UsageError(path.string() + ": unknown config key '" + k + "'");
      values_[k] = v;
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::logic_error("RunConfig: no key " + key);
    return it->second;
  }

  std::uint64_t integer(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw UsageError(key + ": expected a non-negative integer, got '" + s + "'");
    return v;
  }

  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }

  double number(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(key + ": expected a number, got '" + s + "'");
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw UsageError(key + ": expected true or false, got '" + s + "'");
  }

  ModelConfig model() const {
    ModelConfig m;
    m.input_size = count("model.input_size");
    m.input_channels = count("model.channels");
    m.stages = count("model.stages");
    m.base_width = count("model.base_width");
    m.bottleneck_channels = count("model.bottleneck_channels");
    m.activation_slope = number("model.activation_slope");
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    const auto& opt = str("train.optimizer");
    if (opt == "adam")
      t.optimizer = Optimizer::adam;
    else if (opt == "sgd")
      t.optimizer = Optimizer::sgd;
    else
      throw UsageError("train.optimizer: expected adam or sgd, got '" + opt + "'");
    t.learning_rate = number("train.lr");
    t.beta1 = number("train.beta1");
    t.beta2 = number("train.beta2");
    t.adam_epsilon = number("train.epsilon");
    t.batch_size = count("train.batch_size");
    t.epochs = count("train.epochs");
    t.patch_size = count("model.input_size");
    t.augment = flag("train.augment");
    t.seed = integer("train.seed");
    t.deterministic_order = flag("train.deterministic");
    return t;
  }

  NoisePipelineConfig noise() const {
    NoisePipelineConfig n{number("noise.low"), number("noise.high"), integer("noise.seed")};
    return n;
  }

  CorpusStyle style() const {
    CorpusStyle s;
    s.glyph_strokes_min = count("data.glyph_strokes_min");
    s.glyph_strokes_max = count("data.glyph_strokes_max");
    s.glyph_width_min = count("data.glyph_width_min");
    s.glyph_width_max = count("data.glyph_width_max");
    s.glyph_grid = count("data.glyph_grid");
    if (s.glyph_strokes_min == 0 || s.glyph_strokes_min > s.glyph_strokes_max || s.glyph_width_min == 0 ||
        s.glyph_width_min > s.glyph_width_max || s.glyph_grid == 0)
      throw UsageError("data.glyph_*: need 1 <= min <= max and grid >= 1");
    return s;
  }

  const KeyValues& values() const noexcept { return values_; }

  void write(const fs::path& path) const { write_key_values(path, values_); }

 private:
  KeyValues values_;
};

inline constexpr const char* kResolvedConfigName = "config.txt";

}  // namespace selfdenoise
