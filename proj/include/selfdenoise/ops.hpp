// Differentiable primitives recorded on a Tape. Layout is NCHW throughout.
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfdenoise/autodiff.hpp"

namespace selfdenoise {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t channels, height, width;  // image side of the im2col transform
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;             // patch grid

  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * P;
        const T* src = img + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.height)) {
            std::fill(row, row + g.out_w, T{0});
            continue;
          }
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            row[ow] = (iw < 0 || iw >= static_cast<long>(g.width))
                          ? T{0}
                          : src[static_cast<std::size_t>(ih) * g.width + static_cast<std::size_t>(iw)];
          }
        }
      }
}

// Adjoint of im2col: scatter-adds columns back into the image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * P;
        T* dst = img + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          const T* row = src + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            dst[static_cast<std::size_t>(ih) * g.width + static_cast<std::size_t>(iw)] += row[ow];
          }
        }
      }
}

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(s));
}

template <typename T>
void check_bias(const std::optional<Node<T>>& bias, std::size_t channels, const char* what) {
  if (bias && (bias->shape().size() != 1 || bias->shape()[0] != channels))
    throw DimensionError(std::string(what) + ": bias shape " + shape_str(bias->shape()) +
                         " does not match " + std::to_string(channels) + " output channels");
}

}  // namespace detail

/// Cross-correlation of input [N,C,H,W] with kernel [F,C,kh,kw] and zero padding.
template <typename T>
Node<T> conv2d(Node<T> input, Node<T> kernel, std::optional<Node<T>> bias, std::size_t stride,
               std::size_t padding) {
  using namespace detail;
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  require_rank(xs, 4, "conv2d input");
  require_rank(ks, 4, "conv2d kernel");
  if (ks[1] != xs[1])
    throw DimensionError("conv2d: kernel expects " + std::to_string(ks[1]) +
                         " input channels, input has " + std::to_string(xs[1]));
  if (ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding)
    throw DimensionError("conv2d: kernel " + shape_str(ks) + " larger than padded input " +
                         shape_str(xs));
  check_bias(bias, ks[0], "conv2d");

  const std::size_t N = xs[0], F = ks[0];
  ConvGeometry g{xs[1], xs[2], xs[3], ks[2], ks[3], stride, padding,
                 (xs[2] + 2 * padding - ks[2]) / stride + 1, (xs[3] + 2 * padding - ks[3]) / stride + 1};
  const std::size_t K = g.rows(), P = g.cols();

  Tensor<T> out(Shape{N, F, g.out_h, g.out_w});
  Storage<T> cols(K * P);
  CMapMat<T> W(kernel.value().data().data(), F, K);
  for (std::size_t n = 0; n < N; ++n) {
    im2col(input.value().data().data() + n * g.channels * g.height * g.width, g, cols.data());
    MapMat<T> O(out.data().data() + n * F * P, F, P);
    O.noalias() = W * CMapMat<T>(cols.data(), K, P);
    if (bias)
      for (std::size_t f = 0; f < F; ++f) O.row(f).array() += bias->value()[f];
  }

  std::vector<std::size_t> inputs{input.id, kernel.id};
  if (bias) inputs.push_back(bias->id);
  const bool has_bias = bias.has_value();
  return input.tape->record(
      "conv2d", inputs, std::move(out), [g, N, F, has_bias](Tape<T>& tape, std::size_t self) {
        const auto& e = tape.entry(self);
        const std::size_t xi = e.inputs[0], wi = e.inputs[1];
        const std::size_t K = g.rows(), P = g.cols(), img = g.channels * g.height * g.width;
        const T* dout = tape.grad(self).data().data();
        const T* x = tape.value(xi).data().data();
        CMapMat<T> W(tape.value(wi).data().data(), F, K);
        Storage<T> cols(K * P);
        T* dx = tape.needs_grad(xi) ? tape.grad_buffer(xi).data().data() : nullptr;
        T* dw = tape.needs_grad(wi) ? tape.grad_buffer(wi).data().data() : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
          CMapMat<T> dO(dout + n * F * P, F, P);
          if (dw) {
            im2col(x + n * img, g, cols.data());
            MapMat<T>(dw, F, K).noalias() += dO * CMapMat<T>(cols.data(), K, P).transpose();
          }
          if (dx) {
            MapMat<T>(cols.data(), K, P).noalias() = W.transpose() * dO;
            col2im(cols.data(), g, dx + n * img);
          }
        }
        if (has_bias && tape.needs_grad(e.inputs[2])) {
          auto& db = tape.grad_buffer(e.inputs[2]);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f) db[f] += CMapMat<T>(dout + n * F * P, F, P).row(f).sum();
        }
      });
}

/// Transposed convolution (adjoint of conv2d) of input [N,Cin,H,W] with kernel
/// [Cin,Cout,kh,kw]; output extent (H-1)*stride - 2*padding + kh.
template <typename T>
Node<T> conv2d_transpose(Node<T> input, Node<T> kernel, std::optional<Node<T>> bias,
                         std::size_t stride, std::size_t padding) {
  using namespace detail;
  if (stride == 0) throw std::invalid_argument("conv2d_transpose: stride must be positive");
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  require_rank(xs, 4, "conv2d_transpose input");
  require_rank(ks, 4, "conv2d_transpose kernel");
  if (ks[0] != xs[1])
    throw DimensionError("conv2d_transpose: kernel expects " + std::to_string(ks[0]) +
                         " input channels, input has " + std::to_string(xs[1]));
  const long oh = static_cast<long>((xs[2] - 1) * stride + ks[2]) - 2 * static_cast<long>(padding);
  const long ow = static_cast<long>((xs[3] - 1) * stride + ks[3]) - 2 * static_cast<long>(padding);
  if (oh <= 0 || ow <= 0)
    throw DimensionError("conv2d_transpose: padding " + std::to_string(padding) +
                         " leaves no output for input " + shape_str(xs));
  check_bias(bias, ks[1], "conv2d_transpose");

  const std::size_t N = xs[0], Cin = ks[0], Cout = ks[1];
  // Geometry of the forward conv this op is the adjoint of: output image is
  // the im2col "image" side, the input grid is its patch grid.
  ConvGeometry g{Cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), ks[2], ks[3], stride,
                 padding, xs[2], xs[3]};
  const std::size_t K = g.rows(), P = g.cols(), img = Cout * g.height * g.width;

  Tensor<T> out(Shape{N, Cout, g.height, g.width});
  Storage<T> cols(K * P);
  CMapMat<T> W(kernel.value().data().data(), Cin, K);
  for (std::size_t n = 0; n < N; ++n) {
    MapMat<T>(cols.data(), K, P).noalias() =
        W.transpose() * CMapMat<T>(input.value().data().data() + n * Cin * P, Cin, P);
    T* o = out.data().data() + n * img;
    col2im(cols.data(), g, o);
    if (bias)
      for (std::size_t c = 0; c < Cout; ++c)
        for (std::size_t i = 0; i < g.height * g.width; ++i) o[c * g.height * g.width + i] += bias->value()[c];
  }

  std::vector<std::size_t> inputs{input.id, kernel.id};
  if (bias) inputs.push_back(bias->id);
  const bool has_bias = bias.has_value();
  return input.tape->record(
      "conv2d_transpose", inputs, std::move(out),
      [g, N, Cin, has_bias](Tape<T>& tape, std::size_t self) {
        const auto& e = tape.entry(self);
        const std::size_t xi = e.inputs[0], wi = e.inputs[1];
        const std::size_t K = g.rows(), P = g.cols(), img = g.channels * g.height * g.width;
        const T* dout = tape.grad(self).data().data();
        const T* x = tape.value(xi).data().data();
        CMapMat<T> W(tape.value(wi).data().data(), Cin, K);
        Storage<T> cols(K * P);
        T* dx = tape.needs_grad(xi) ? tape.grad_buffer(xi).data().data() : nullptr;
        T* dw = tape.needs_grad(wi) ? tape.grad_buffer(wi).data().data() : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
          if (!dx && !dw) break;
          im2col(dout + n * img, g, cols.data());
          CMapMat<T> G(cols.data(), K, P);
          if (dx) MapMat<T>(dx + n * Cin * P, Cin, P).noalias() += W * G;
          if (dw) MapMat<T>(dw, Cin, K).noalias() += CMapMat<T>(x + n * Cin * P, Cin, P) * G.transpose();
        }
        if (has_bias && tape.needs_grad(e.inputs[2])) {
          auto& db = tape.grad_buffer(e.inputs[2]);
          const std::size_t plane = g.height * g.width;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < g.channels; ++c) {
              T s{0};
              const T* p = dout + n * img + c * plane;
              for (std::size_t i = 0; i < plane; ++i) s += p[i];
              db[c] += s;
            }
        }
      });
}

/// x if x >= 0 else slope*x. The derivative at 0 is taken as `slope`.
template <typename T>
Node<T> leaky_relu(Node<T> input, T slope) {
  if (!(slope >= T{0} && slope < T{1}))
    throw std::invalid_argument("leaky_relu: slope must lie in [0,1)");
  Tensor<T> out = input.value();
  for (auto& v : out.data())
    if (v < T{0}) v *= slope;
  return input.tape->record("leaky_relu", {input.id}, std::move(out),
                            [slope](Tape<T>& tape, std::size_t self) {
                              const std::size_t xi = tape.entry(self).inputs[0];
                              const auto& x = tape.value(xi);
                              const auto& g = tape.grad(self);
                              auto& dx = tape.grad_buffer(xi);
                              for (std::size_t i = 0; i < x.size(); ++i)
                                dx[i] += x[i] > T{0} ? g[i] : slope * g[i];
                            });
}

/// Mean over non-overlapping 2x2 blocks.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "avg_pool2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2)
    throw std::invalid_argument("avg_pool2: spatial extents must be even, got " + shape_str(x.shape()));
  Tensor<T> out(Shape{N, C, H / 2, W / 2});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H / 2; ++h)
        for (std::size_t w = 0; w < W / 2; ++w)
          out.at(n, c, h, w) = (x.at(n, c, 2 * h, 2 * w) + x.at(n, c, 2 * h, 2 * w + 1) +
                                x.at(n, c, 2 * h + 1, 2 * w) + x.at(n, c, 2 * h + 1, 2 * w + 1)) /
                               T{4};
  return out;
}

template <typename T>
Node<T> avg_pool2(Node<T> input) {
  return input.tape->record("avg_pool2", {input.id}, avg_pool2(input.value()),
                            [](Tape<T>& tape, std::size_t self) {
                              const std::size_t xi = tape.entry(self).inputs[0];
                              const auto& g = tape.grad(self);
                              auto& dx = tape.grad_buffer(xi);
                              const std::size_t N = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
                              for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t c = 0; c < C; ++c)
                                  for (std::size_t h = 0; h < H; ++h)
                                    for (std::size_t w = 0; w < W; ++w) {
                                      const T q = g.at(n, c, h, w) / T{4};
                                      dx.at(n, c, 2 * h, 2 * w) += q;
                                      dx.at(n, c, 2 * h, 2 * w + 1) += q;
                                      dx.at(n, c, 2 * h + 1, 2 * w) += q;
                                      dx.at(n, c, 2 * h + 1, 2 * w + 1) += q;
                                    }
                            });
}

/// Mean absolute difference. Subgradient 0 where pred == target.
template <typename T>
Node<T> l1_loss(Node<T> pred, Node<T> target) {
  require_same_shape(pred.value(), target.value(), "l1_loss");
  const auto& p = pred.value();
  const auto& t = target.value();
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(static_cast<long double>(p[i]) - t[i]);
  const T n = static_cast<T>(p.size());
  return pred.tape->record(
      "l1_loss", {pred.id, target.id}, Tensor<T>::scalar(static_cast<T>(s / p.size())),
      [n](Tape<T>& tape, std::size_t self) {
        const auto& e = tape.entry(self);
        const auto& p = tape.value(e.inputs[0]);
        const auto& t = tape.value(e.inputs[1]);
        const T g = tape.grad(self)[0] / n;
        for (int side = 0; side < 2; ++side) {
          if (!tape.needs_grad(e.inputs[side])) continue;
          auto& d = tape.grad_buffer(e.inputs[side]);
          const T sgn = side == 0 ? g : -g;
          for (std::size_t i = 0; i < p.size(); ++i)
            d[i] += p[i] > t[i] ? sgn : (p[i] < t[i] ? -sgn : T{0});
        }
      });
}

/// Mean squared difference.
template <typename T>
Node<T> mse_loss(Node<T> pred, Node<T> target) {
  require_same_shape(pred.value(), target.value(), "mse_loss");
  const auto& p = pred.value();
  const auto& t = target.value();
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const long double d = static_cast<long double>(p[i]) - t[i];
    s += d * d;
  }
  const T n = static_cast<T>(p.size());
  return pred.tape->record(
      "mse_loss", {pred.id, target.id}, Tensor<T>::scalar(static_cast<T>(s / p.size())),
      [n](Tape<T>& tape, std::size_t self) {
        const auto& e = tape.entry(self);
        const auto& p = tape.value(e.inputs[0]);
        const auto& t = tape.value(e.inputs[1]);
        const T g = T{2} * tape.grad(self)[0] / n;
        for (int side = 0; side < 2; ++side) {
          if (!tape.needs_grad(e.inputs[side])) continue;
          auto& d = tape.grad_buffer(e.inputs[side]);
          const T sgn = side == 0 ? g : -g;
          for (std::size_t i = 0; i < p.size(); ++i) d[i] += sgn * (p[i] - t[i]);
        }
      });
}

template <typename T>
Node<T> add(Node<T> a, Node<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record("add", {a.id, b.id}, std::move(out), [](Tape<T>& tape, std::size_t self) {
    const auto& e = tape.entry(self);
    const auto& g = tape.grad(self);
    for (auto in : e.inputs) {
      if (!tape.needs_grad(in)) continue;
      auto& d = tape.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Node<T> scale(Node<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape->record("scale", {a.id}, std::move(out), [factor](Tape<T>& tape, std::size_t self) {
    const std::size_t in = tape.entry(self).inputs[0];
    const auto& g = tape.grad(self);
    auto& d = tape.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

template <typename T>
Node<T> square(Node<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= v;
  return a.tape->record("square", {a.id}, std::move(out), [](Tape<T>& tape, std::size_t self) {
    const std::size_t in = tape.entry(self).inputs[0];
    const auto& x = tape.value(in);
    const auto& g = tape.grad(self);
    auto& d = tape.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += T{2} * x[i] * g[i];
  });
}

/// Σ weights ⊙ a, a linear functional of `a`.
template <typename T>
Node<T> weighted_sum(Node<T> a, const Tensor<T>& weights) {
  require_same_shape(a.value(), weights, "weighted_sum");
  long double s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<long double>(weights[i]) * a.value()[i];
  return a.tape->record("weighted_sum", {a.id}, Tensor<T>::scalar(static_cast<T>(s)),
                        [weights](Tape<T>& tape, std::size_t self) {
                          const std::size_t in = tape.entry(self).inputs[0];
                          const T g = tape.grad(self)[0];
                          auto& d = tape.grad_buffer(in);
                          for (std::size_t i = 0; i < weights.size(); ++i) d[i] += g * weights[i];
                        });
}

template <typename T>
Node<T> sum(Node<T> a) {
  return weighted_sum(a, Tensor<T>(a.shape(), T{1}));
}

}  // namespace selfdenoise
