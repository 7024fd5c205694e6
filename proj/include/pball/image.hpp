#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "pball/error.hpp"
#include "pball/tensor.hpp"

namespace pball {

/// Normalised 1-D Gaussian taps for offsets -r..r with r = ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw ValidationError("gaussian blur: sigma must be non-negative");
  if (sigma == 0.0) return {1.0};
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur of an [H,W] map with zero padding; sigma = 0 is the
/// identity. Mass that would land outside the image is lost.
inline Tensor gaussian_blur(const Tensor& map, double sigma) {
  require_rank(map, 2, "gaussian_blur");
  const auto k = gaussian_kernel(sigma);
  if (k.size() == 1) return map;
  const long r = static_cast<long>(k.size() / 2);
  const long h = static_cast<long>(map.dim(0)), w = static_cast<long>(map.dim(1));
  Tensor tmp(map.shape()), out(map.shape());
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      const long lo = std::max(-r, -x), hi = std::min(r, w - 1 - x);
      for (long d = lo; d <= hi; ++d) s += k[static_cast<std::size_t>(d + r)] * map[static_cast<std::size_t>(y * w + x + d)];
      tmp[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
  for (long y = 0; y < h; ++y) {
    const long lo = std::max(-r, -y), hi = std::min(r, h - 1 - y);
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long d = lo; d <= hi; ++d) s += k[static_cast<std::size_t>(d + r)] * tmp[static_cast<std::size_t>((y + d) * w + x)];
      out[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
  return out;
}

/// Blurs each channel of a [C,H,W] image independently.
inline Tensor gaussian_blur_channels(const Tensor& image, double sigma) {
  require_rank(image, 3, "gaussian_blur_channels");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor plane(Shape{h, w}, std::vector<double>(image.data().begin() + static_cast<long>(ch * h * w),
                                                 image.data().begin() + static_cast<long>((ch + 1) * h * w)));
    const Tensor b = gaussian_blur(plane, sigma);
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<long>(ch * h * w));
  }
  return out;
}

/// Bilinear resampling with half-pixel centres (edge samples clamp). Accepts
/// [H,W] or [C,H,W].
inline Tensor resize_bilinear(const Tensor& src, std::size_t out_h, std::size_t out_w) {
  if (src.rank() != 2 && src.rank() != 3) throw ShapeError("resize_bilinear: expected [H,W] or [C,H,W]");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: target extents must be positive");
  const bool planar = src.rank() == 2;
  const std::size_t c = planar ? 1 : src.dim(0);
  const std::size_t h = src.dim(planar ? 0 : 1), w = src.dim(planar ? 1 : 2);
  Tensor out(planar ? Shape{out_h, out_w} : Shape{c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = ch * h * w;
        const double top = src[base + y0 * w + x0] * (1 - tx) + src[base + y0 * w + x1] * tx;
        const double bot = src[base + y1 * w + x0] * (1 - tx) + src[base + y1 * w + x1] * tx;
        out[ch * out_h * out_w + y * out_w + x] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

}  // namespace pball
