// Procedural clean images and the uniform-noise corruption pipeline.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfdenoise/dataset.hpp"
#include "selfdenoise/rng.hpp"
#include "selfdenoise/tensor.hpp"

namespace selfdenoise {

enum class ImageKind { glyph, lattice, blobs, antidiagonal, user };

inline std::string to_string(ImageKind k) {
  switch (k) {
    case ImageKind::glyph: return "glyph";
    case ImageKind::lattice: return "lattice";
    case ImageKind::blobs: return "blobs";
    case ImageKind::antidiagonal: return "antidiagonal";
    case ImageKind::user: return "user";
  }
  return "unknown";
}

inline ImageKind parse_image_kind(const std::string& s) {
  for (auto k : {ImageKind::glyph, ImageKind::lattice, ImageKind::blobs, ImageKind::antidiagonal, ImageKind::user})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown image kind '" + s + "'");
}

/// [C,H,W] image with values in [0,1].
template <typename T>
struct CleanImage {
  Tensor<T> pixels;
  ImageKind kind = ImageKind::user;
};

struct NoisePipelineConfig {
  double noise_low = -2.0;
  double noise_high = 2.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(noise_low <= noise_high)) throw std::invalid_argument("noise range must satisfy low <= high");
  }
};

/// Rasterises an anti-aliased line of the given width into a [1,S,S] image
/// (max-composited). Pixel (i,j) has its centre at x=j, y=i; coverage is
/// clamp(width/2 + 1/2 - distance, 0, 1).
template <typename T>
void draw_stroke(Tensor<T>& img, double x0, double y0, double x1, double y1, double width) {
  const std::size_t H = img.dim(1), W = img.dim(2);
  const double dx = x1 - x0, dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  const double reach = width / 2 + 0.5;
  const long i_lo = std::max(0L, static_cast<long>(std::floor(std::min(y0, y1) - reach)));
  const long i_hi = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(std::max(y0, y1) + reach)));
  const long j_lo = std::max(0L, static_cast<long>(std::floor(std::min(x0, x1) - reach)));
  const long j_hi = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(std::max(x0, x1) + reach)));
  for (long i = i_lo; i <= i_hi; ++i)
    for (long j = j_lo; j <= j_hi; ++j) {
      double t = len2 > 0 ? ((j - x0) * dx + (i - y0) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double px = x0 + t * dx - j, py = y0 + t * dy - i;
      const double cov = std::clamp(reach - std::sqrt(px * px + py * py), 0.0, 1.0);
      T& v = img[static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)];
      v = std::max(v, static_cast<T>(cov));
    }
}

/// Random horizontal, vertical and "\"-diagonal strokes on a dark background.
/// Stroke offsets and lengths are multiples of `grid` pixels.
template <typename T>
CleanImage<T> gen_glyph(std::size_t size, std::size_t stroke_count, std::size_t stroke_width, std::uint64_t seed,
                        std::size_t grid = 1) {
  if (size < 16) throw std::invalid_argument("gen_glyph: size must be at least 16");
  if (stroke_width >= size) throw std::invalid_argument("gen_glyph: stroke_width must be smaller than size");
  if (grid == 0 || grid > size / 4) throw std::invalid_argument("gen_glyph: grid must lie in [1, size/4]");
  Tensor<T> img(Shape{1, size, size});
  Rng rng(seed);
  const double S = static_cast<double>(size), g = static_cast<double>(grid);
  const double margin = std::floor(S / 8);
  // Centre lines sit on pixel centres for odd widths and between pixels for
  // even widths, so axis-aligned strokes cover exactly `width` pixel rows.
  const double parity = stroke_width % 2 ? 0.0 : 0.5;
  // Grid point in [lo, hi - 1].
  auto pos = [&](double lo, double hi) {
    const auto n = static_cast<std::size_t>(std::max(0.0, std::floor((hi - lo - 1) / g)));
    return lo + g * static_cast<double>(rng.index(n + 1)) + parity;
  };
  const auto len_lo = static_cast<std::size_t>(std::ceil(S / 4 / g));
  const auto len_hi = static_cast<std::size_t>(std::floor((S - 2 * margin - 1) / g));
  for (std::size_t k = 0; k < stroke_count; ++k) {
    const auto type = rng.index(3);
    const double len = g * static_cast<double>(len_lo + rng.index(len_hi - len_lo + 1));
    const double a = pos(margin, S - margin);
    const double b = pos(margin, S - margin - len + 1);
    const double w = static_cast<double>(stroke_width);
    if (type == 0)
      draw_stroke(img, b, a, b + len, a, w);
    else if (type == 1)
      draw_stroke(img, a, b, a, b + len, w);
    else {
      const double d = g * std::floor(len / std::sqrt(2.0) / g);
      const double x = pos(margin, S - margin - d), y = pos(margin, S - margin - d);
      draw_stroke(img, x, y, x + d, y + d, w);
    }
  }
  return {std::move(img), ImageKind::glyph};
}

/// `count` evenly spaced thin "/" strokes spanning the image. This pattern
/// never appears among gen_glyph strokes.
template <typename T>
CleanImage<T> gen_antidiagonal(std::size_t size, std::size_t count, std::size_t stroke_width,
                               std::uint64_t seed) {
  if (size < 16) throw std::invalid_argument("gen_antidiagonal: size must be at least 16");
  Tensor<T> img(Shape{1, size, size});
  Rng rng(seed);
  const double S = static_cast<double>(size);
  const double spacing = 2 * S / static_cast<double>(count + 1);
  const double shift = rng.uniform(-spacing / 4, spacing / 4);
  for (std::size_t k = 1; k <= count; ++k) {
    // Line x + y = c, clipped to the image.
    const double c = static_cast<double>(k) * spacing + shift;
    draw_stroke(img, c - S, S, c + 1, -1, static_cast<double>(stroke_width));
  }
  return {std::move(img), ImageKind::antidiagonal};
}

/// Gaussian blobs of width `sigma` on a square grid of pitch `spacing`, each
/// site displaced by up to `jitter` pixels per axis; peak-normalised to 1.
template <typename T>
CleanImage<T> gen_lattice(std::size_t size, double spacing, double sigma, double jitter, std::uint64_t seed) {
  if (!(sigma > 0) || spacing < 4 * sigma)
    throw std::invalid_argument("gen_lattice: spacing must be at least 4*sigma");
  const double S = static_cast<double>(size);
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(S / spacing));
  const double offset = (S - 1 - static_cast<double>(n - 1) * spacing) / 2;
  Rng rng(seed);
  std::vector<std::pair<double, double>> sites;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const double jx = jitter > 0 ? rng.uniform(-jitter, jitter) : 0.0;
      const double jy = jitter > 0 ? rng.uniform(-jitter, jitter) : 0.0;
      sites.emplace_back(offset + static_cast<double>(b) * spacing + jx,
                         offset + static_cast<double>(a) * spacing + jy);
    }
  std::vector<double> acc(size * size, 0.0);
  const double inv = 1.0 / (2 * sigma * sigma);
  for (auto [x, y] : sites)
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double dx = static_cast<double>(j) - x, dy = static_cast<double>(i) - y;
        acc[i * size + j] += std::exp(-(dx * dx + dy * dy) * inv);
      }
  const double peak = *std::max_element(acc.begin(), acc.end());
  Tensor<T> img(Shape{1, size, size});
  for (std::size_t k = 0; k < acc.size(); ++k) img[k] = static_cast<T>(peak > 0 ? acc[k] / peak : 0.0);
  return {std::move(img), ImageKind::lattice};
}

/// A handful of Gaussian blobs with random positions and widths.
template <typename T>
CleanImage<T> gen_blobs(std::size_t size, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  const double S = static_cast<double>(size);
  std::vector<double> acc(size * size, 0.0);
  for (std::size_t k = 0; k < count; ++k) {
    const double x = rng.uniform(0, S), y = rng.uniform(0, S);
    const double sigma = rng.uniform(S / 32, S / 10);
    const double amp = rng.uniform(0.5, 1.0);
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double dx = static_cast<double>(j) - x, dy = static_cast<double>(i) - y;
        acc[i * size + j] += amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
  }
  const double peak = *std::max_element(acc.begin(), acc.end());
  Tensor<T> img(Shape{1, size, size});
  for (std::size_t k = 0; k < acc.size(); ++k) img[k] = static_cast<T>(peak > 0 ? acc[k] / peak : 0.0);
  return {std::move(img), ImageKind::blobs};
}

/// Min-max rescale to [0,1]; constant tensors are returned unchanged.
template <typename T>
Tensor<T> renormalize(const Tensor<T>& t, bool* degenerate = nullptr) {
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  Tensor<T> out = t;
  const T min = *lo, max = *hi;
  if (degenerate) *degenerate = !(max > min);
  if (!(max > min)) return out;
  for (auto& v : out.data()) v = (v - min) / (max - min);
  return out;
}

template <typename T>
struct CorruptResult {
  Tensor<T> noisy;         // final image in [0,1]
  Tensor<T> unnormalized;  // after clamping, before the final renormalisation
  Tensor<T> additive;      // clean + noise, before clamping
  bool degenerate = false; // clamp left a constant image; `noisy` is all zeros
};

/// The four-step pipeline with an explicit noise field: normalise the clean
/// image to [0,1], add `noise`, clamp negatives to 0, renormalise to [0,1].
template <typename T>
CorruptResult<T> corrupt_with_noise(const Tensor<T>& clean, const Tensor<T>& noise) {
  require_same_shape(clean, noise, "corrupt");
  CorruptResult<T> r;
  r.additive = renormalize(clean);
  for (std::size_t i = 0; i < noise.size(); ++i) r.additive[i] += noise[i];
  r.unnormalized = r.additive;
  for (auto& v : r.unnormalized.data()) v = std::max(v, T{0});
  r.noisy = renormalize(r.unnormalized, &r.degenerate);
  if (r.degenerate) r.noisy.fill(T{0});
  return r;
}

template <typename T>
Tensor<T> uniform_noise(const Shape& shape, double low, double high, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> n(shape);
  for (auto& v : n.data()) v = static_cast<T>(rng.uniform(low, high));
  return n;
}

template <typename T>
CorruptResult<T> corrupt(const CleanImage<T>& clean, const NoisePipelineConfig& config) {
  config.validate();
  for (T v : clean.pixels.data())
    if (!(v >= T{0} && v <= T{1})) throw std::invalid_argument("corrupt: clean image must lie in [0,1]");
  return corrupt_with_noise(clean.pixels,
                            uniform_noise<T>(clean.pixels.shape(), config.noise_low, config.noise_high, config.seed));
}

/// Parameters for the procedural generators used by build_corpus.
struct CorpusStyle {
  std::size_t glyph_strokes_min = 3;
  std::size_t glyph_strokes_max = 5;
  std::size_t glyph_width_min = 2;
  std::size_t glyph_width_max = 3;
  std::size_t glyph_grid = 1;
  std::size_t antidiagonal_count = 5;
  std::size_t antidiagonal_width = 2;
  double lattice_spacing = 12;
  double lattice_sigma = 2;
  double lattice_jitter = 1;
  std::size_t blob_count = 6;
};

template <typename T>
CleanImage<T> generate(ImageKind kind, std::size_t size, std::uint64_t seed, const CorpusStyle& style = {}) {
  Rng rng(seed);
  switch (kind) {
    case ImageKind::glyph: {
      const auto strokes = style.glyph_strokes_min + rng.index(style.glyph_strokes_max - style.glyph_strokes_min + 1);
      const auto width = style.glyph_width_min + rng.index(style.glyph_width_max - style.glyph_width_min + 1);
      return gen_glyph<T>(size, strokes, width, rng.bits(), std::min(style.glyph_grid, size / 4));
    }
    case ImageKind::antidiagonal:
      return gen_antidiagonal<T>(size, style.antidiagonal_count, style.antidiagonal_width, rng.bits());
    case ImageKind::lattice:
      return gen_lattice<T>(size, style.lattice_spacing, style.lattice_sigma, style.lattice_jitter, rng.bits());
    case ImageKind::blobs:
      return gen_blobs<T>(size, style.blob_count, rng.bits());
    case ImageKind::user: break;
  }
  throw std::invalid_argument("generate: kind '" + to_string(kind) + "' has no generator");
}

/// Paired noisy/clean corpus. Only `noisy` is meant for training.
template <typename T>
struct Corpus {
  PatchDataset<T> noisy;
  PatchDataset<T> clean;
  std::vector<Tensor<T>> unnormalized;
  std::vector<bool> degenerate;
};

template <typename T>
Corpus<T> build_corpus(ImageKind kind, std::size_t count, std::size_t size, const NoisePipelineConfig& noise,
                       std::uint64_t seed, const CorpusStyle& style = {}) {
  if (count == 0) throw std::invalid_argument("build_corpus: count must be at least 1");
  noise.validate();
  Corpus<T> c;
  c.noisy = {{}, to_string(kind), seed};
  c.clean = {{}, to_string(kind), seed};
  for (std::size_t i = 0; i < count; ++i) {
    auto img = generate<T>(kind, size, mix_seed(seed, 2 * i), style);
    NoisePipelineConfig nc = noise;
    nc.seed = mix_seed(mix_seed(noise.seed, seed), 2 * i + 1);
    auto r = corrupt(img, nc);
    c.clean.patches.push_back(img.pixels);
    c.noisy.patches.push_back(std::move(r.noisy));
    c.unnormalized.push_back(std::move(r.unnormalized));
    c.degenerate.push_back(r.degenerate);
  }
  return c;
}

/// Pooled 10·log10(Σ clean² / Σ (unnormalized − clean)²) over the corpus.
template <typename T>
double corpus_snr(const Corpus<T>& c) {
  long double ps = 0, pn = 0;
  for (std::size_t i = 0; i < c.clean.size(); ++i) {
    const auto& s = c.clean.patches[i];
    const auto& u = c.unnormalized[i];
    for (std::size_t k = 0; k < s.size(); ++k) {
      const long double d = static_cast<long double>(u[k]) - s[k];
      ps += static_cast<long double>(s[k]) * s[k];
      pn += d * d;
    }
  }
  if (pn == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(10 * std::log10(ps / pn));
}

}  // namespace selfdenoise
