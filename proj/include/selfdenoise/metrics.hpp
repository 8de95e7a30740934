// Image quality and spectral metrics. Inputs are [H,W] or [C,H,W]; channels
// are evaluated independently and averaged.
#pragma once

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfdenoise/tensor.hpp"

namespace selfdenoise {

struct MetricReport {
  double ssim = 0;
  double psnr = 0;
  double snr = 0;
  double hf_energy = 0;
};

namespace detail {

struct Plane {
  std::size_t h, w;
  std::vector<double> v;
};

template <typename T>
std::vector<Plane> planes(const Tensor<T>& t, const char* what) {
  std::size_t C, H, W;
  if (t.rank() == 2)
    C = 1, H = t.dim(0), W = t.dim(1);
  else if (t.rank() == 3)
    C = t.dim(0), H = t.dim(1), W = t.dim(2);
  else if (t.rank() == 4 && t.dim(0) == 1)
    C = t.dim(1), H = t.dim(2), W = t.dim(3);
  else
    throw DimensionError(std::string(what) + ": expected [H,W] or [C,H,W], got " + shape_str(t.shape()));
  std::vector<Plane> out;
  for (std::size_t c = 0; c < C; ++c) {
    Plane p{H, W, {}};
    p.v.assign(t.data().begin() + static_cast<std::ptrdiff_t>(c * H * W),
               t.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * H * W));
    out.push_back(std::move(p));
  }
  return out;
}

// Valid-mode separable correlation with a 1-D kernel along both axes.
inline Plane filter_valid(const Plane& p, const std::vector<double>& k) {
  const std::size_t n = k.size();
  const std::size_t oh = p.h - n + 1, ow = p.w - n + 1;
  std::vector<double> rows(p.h * ow);
  for (std::size_t i = 0; i < p.h; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < n; ++t) s += k[t] * p.v[i * p.w + j + t];
      rows[i * ow + j] = s;
    }
  Plane out{oh, ow, std::vector<double>(oh * ow)};
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < n; ++t) s += k[t] * rows[(i + t) * ow + j];
      out.v[i * ow + j] = s;
    }
  return out;
}

}  // namespace detail

constexpr std::size_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

/// Normalised 1-D Gaussian taps; the 2-D SSIM window is their outer product.
inline std::vector<double> ssim_taps() {
  std::vector<double> k(kSsimWindow);
  double s = 0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double x = static_cast<double>(i) - (kSsimWindow - 1) / 2.0;
    k[i] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

/// Mean SSIM over all valid 11x11 Gaussian-window positions.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double dynamic_range = 1.0) {
  require_same_shape(a, b, "ssim");
  if (!(dynamic_range > 0)) throw std::invalid_argument("ssim: dynamic_range must be positive");
  const auto pa = detail::planes(a, "ssim"), pb = detail::planes(b, "ssim");
  if (pa[0].h < kSsimWindow || pa[0].w < kSsimWindow)
    throw DimensionError("ssim: image " + shape_str(a.shape()) + " is smaller than the 11x11 window");
  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  const auto taps = ssim_taps();
  double total = 0;
  for (std::size_t c = 0; c < pa.size(); ++c) {
    detail::Plane aa = pa[c], bb = pb[c], ab = pa[c];
    for (std::size_t i = 0; i < aa.v.size(); ++i) {
      aa.v[i] = pa[c].v[i] * pa[c].v[i];
      bb.v[i] = pb[c].v[i] * pb[c].v[i];
      ab.v[i] = pa[c].v[i] * pb[c].v[i];
    }
    const auto mu_a = detail::filter_valid(pa[c], taps), mu_b = detail::filter_valid(pb[c], taps);
    const auto e_aa = detail::filter_valid(aa, taps), e_bb = detail::filter_valid(bb, taps);
    const auto e_ab = detail::filter_valid(ab, taps);
    double s = 0;
    for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
      const double ma = mu_a.v[i], mb = mu_b.v[i];
      const double va = e_aa.v[i] - ma * ma, vb = e_bb.v[i] - mb * mb, cov = e_ab.v[i] - ma * mb;
      s += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total += s / static_cast<double>(mu_a.v.size());
  }
  return total / static_cast<double>(pa.size());
}

/// 10·log10(L²/MSE); +inf for identical images.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double dynamic_range = 1.0) {
  require_same_shape(a, b, "psnr");
  long double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  const double mse = static_cast<double>(se / a.size());
  return 10 * std::log10(dynamic_range * dynamic_range / mse);
}

/// 10·log10(Σ signal² / Σ (noisy − signal)²); +inf when there is no noise.
template <typename T>
double snr(const Tensor<T>& signal, const Tensor<T>& noisy) {
  require_same_shape(signal, noisy, "snr");
  long double ps = 0, pn = 0;
  for (std::size_t i = 0; i < signal.size(); ++i) {
    const long double s = signal[i], d = static_cast<long double>(noisy[i]) - s;
    ps += s * s;
    pn += d * d;
  }
  if (pn == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(10 * std::log10(ps / pn));
}

/// Fraction of non-DC spectral power at radial frequency above Nyquist/4
/// (0.125 cycles/pixel).
template <typename T>
double hf_energy(const Tensor<T>& a) {
  const auto ps = detail::planes(a, "hf_energy");
  const std::size_t H = ps[0].h, W = ps[0].w;
  if ((H & (H - 1)) || (W & (W - 1))) throw DimensionError("hf_energy: extents must be powers of two");
  Eigen::FFT<double> fft;
  double sum = 0;
  for (const auto& p : ps) {
    std::vector<std::complex<double>> freq(H * W);
    std::vector<std::complex<double>> row, col(H), out;
    for (std::size_t i = 0; i < H; ++i) {
      std::vector<double> r(p.v.begin() + static_cast<std::ptrdiff_t>(i * W),
                            p.v.begin() + static_cast<std::ptrdiff_t>((i + 1) * W));
      fft.fwd(row, r);
      for (std::size_t j = 0; j < W; ++j) freq[i * W + j] = row[j];
    }
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) col[i] = freq[i * W + j];
      fft.fwd(out, col);
      for (std::size_t i = 0; i < H; ++i) freq[i * W + j] = out[i];
    }
    const double dc = std::norm(freq[0]);
    double total = 0, high = 0;
    for (std::size_t u = 0; u < H; ++u)
      for (std::size_t v = 0; v < W; ++v) {
        if (u == 0 && v == 0) continue;
        const double fu = static_cast<double>(std::min(u, H - u)) / static_cast<double>(H);
        const double fv = static_cast<double>(std::min(v, W - v)) / static_cast<double>(W);
        const double pw = std::norm(freq[u * W + v]);
        total += pw;
        if (fu * fu + fv * fv > 0.125 * 0.125) high += pw;
      }
    // Round-off leaks a little power out of DC for constant images.
    sum += total > 1e-24 * dc ? high / total : 0.0;
  }
  return sum / static_cast<double>(ps.size());
}

template <typename T>
MetricReport evaluate(const Tensor<T>& estimate, const Tensor<T>& reference, double dynamic_range = 1.0) {
  return MetricReport{ssim(estimate, reference, dynamic_range), psnr(estimate, reference, dynamic_range),
                      snr(reference, estimate), hf_energy(estimate)};
}

}  // namespace selfdenoise
