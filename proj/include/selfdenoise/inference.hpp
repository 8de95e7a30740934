// Whole-image prediction with the finest decoder head.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "selfdenoise/model.hpp"

namespace selfdenoise {

/// Mirror index into [0, n) without repeating the edge sample.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

/// Finest-head prediction for a batch, clamped to [0,1].
template <typename T>
Tensor<T> predict(AutoencoderModel<T>& model, const Tensor<T>& batch) {
  Tape<T> tape;
  auto out = model.forward(tape, batch);
  Tensor<T> y = out.finest().value();
  for (auto& v : y.data()) v = std::clamp(v, T{0}, T{1});
  return y;
}

/// Denoises one [C,H,W] image. Without `tile` the image must match the model
/// input size; with it, the image is reflection-padded to whole tiles, each
/// tile predicted independently, and the result cropped back.
template <typename T>
Tensor<T> denoise_image(AutoencoderModel<T>& model, const Tensor<T>& img, bool tile, std::size_t batch_size = 16) {
  const auto& c = model.config();
  if (img.rank() != 3 || img.dim(0) != c.input_channels)
    throw DimensionError("denoise: expected [" + std::to_string(c.input_channels) + ",H,W], got " +
                         shape_str(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2), S = c.input_size;
  if (!tile) {
    if (H != S || W != S)
      throw DimensionError("denoise: image is " + std::to_string(H) + "x" + std::to_string(W) + " but the model takes " +
                           std::to_string(S) + "x" + std::to_string(S) + "; use --tile");
    return predict(model, img.reshaped({1, C, S, S})).reshaped({C, S, S});
  }
  const std::size_t rows = (H + S - 1) / S, cols = (W + S - 1) / S;
  std::vector<Tensor<T>> tiles;
  for (std::size_t tr = 0; tr < rows; ++tr)
    for (std::size_t tc = 0; tc < cols; ++tc) {
      Tensor<T> t(Shape{C, S, S});
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t i = 0; i < S; ++i)
          for (std::size_t j = 0; j < S; ++j) {
            const auto y = reflect_index(static_cast<std::ptrdiff_t>(tr * S + i), H);
            const auto x = reflect_index(static_cast<std::ptrdiff_t>(tc * S + j), W);
            t[(ch * S + i) * S + j] = img[(ch * H + y) * W + x];
          }
      tiles.push_back(std::move(t));
    }
  Tensor<T> out(Shape{C, H, W});
  for (std::size_t first = 0; first < tiles.size(); first += batch_size) {
    const std::size_t n = std::min(batch_size, tiles.size() - first);
    const auto pred = predict(model, stack<T>(std::vector<Tensor<T>>(tiles.begin() + first, tiles.begin() + first + n)));
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t tr = (first + k) / cols, tc = (first + k) % cols;
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t i = 0; i < S && tr * S + i < H; ++i)
          for (std::size_t j = 0; j < S && tc * S + j < W; ++j)
            out[(ch * H + tr * S + i) * W + tc * S + j] = pred[((k * C + ch) * S + i) * S + j];
    }
  }
  return out;
}

}  // namespace selfdenoise
