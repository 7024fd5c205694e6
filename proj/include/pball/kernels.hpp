#pragma once

// Forward and backward kernels for the layer types a small VGG-style network
// needs. Straight loops over contiguous rows; no im2col.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pball/tensor.hpp"

namespace pball::kernels {

struct ConvGeometry {
  std::size_t in_channels, out_channels, height, width, kernel_h, kernel_w, stride, pad;
  std::size_t out_h, out_w;
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, const Tensor& bias,
                                  std::size_t stride, std::size_t pad) {
  require_rank(input, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  require_rank(bias, 1, "conv2d bias");
  ConvGeometry g{};
  g.in_channels = input.dim(0);
  g.height = input.dim(1);
  g.width = input.dim(2);
  g.out_channels = weight.dim(0);
  g.kernel_h = weight.dim(2);
  g.kernel_w = weight.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (weight.dim(1) != g.in_channels) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, input has " + std::to_string(g.in_channels));
  }
  if (bias.dim(0) != g.out_channels) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                     " != output channels " + std::to_string(g.out_channels));
  }
  if (g.kernel_h % 2 == 0 || g.kernel_w % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd, got " + shape_str(weight.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t span_h = g.height + 2 * pad;
  const std::size_t span_w = g.width + 2 * pad;
  if (span_h < g.kernel_h || span_w < g.kernel_w) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  if ((span_h - g.kernel_h) % stride != 0 || (span_w - g.kernel_w) % stride != 0) {
    throw ShapeError("conv2d: output extent is not integral for input " +
                     shape_str(input.shape()) + ", stride " + std::to_string(stride) +
                     ", pad " + std::to_string(pad));
  }
  g.out_h = (span_h - g.kernel_h) / stride + 1;
  g.out_w = (span_w - g.kernel_w) / stride + 1;
  return g;
}

namespace detail {

// Output columns [lo, hi) whose input column ow*stride + kw - pad lies in [0, width).
inline void valid_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t in_extent,
                        std::size_t out_extent, std::size_t& lo, std::size_t& hi) {
  // need ow*stride + k >= pad  and  ow*stride + k < in_extent + pad
  lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  const std::size_t upper = in_extent + pad;  // exclusive bound on ow*stride + k
  hi = upper > k ? (upper - k + stride - 1) / stride : 0;
  hi = std::min(hi, out_extent);
  if (lo > hi) lo = hi;
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input, weight, bias, stride, pad);
  Tensor out(Shape{g.out_channels, g.out_h, g.out_w});
  const double* in = input.data().data();
  const double* wt = weight.data().data();
  double* o = out.data().data();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
    double* oplane = o + oc * plane;
    std::fill(oplane, oplane + plane, bias[oc]);
    for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
      const double* iplane = in + ic * g.height * g.width;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        std::size_t oh_lo, oh_hi;
        detail::valid_range(kh, pad, stride, g.height, g.out_h, oh_lo, oh_hi);
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          std::size_t ow_lo, ow_hi;
          detail::valid_range(kw, pad, stride, g.width, g.out_w, ow_lo, ow_hi);
          const double wv = wt[((oc * g.in_channels + ic) * g.kernel_h + kh) * g.kernel_w + kw];
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const double* irow = iplane + (oh * stride + kh - pad) * g.width;
            double* orow = oplane + oh * g.out_w;
            if (stride == 1) {
              const double* src = irow + kw - pad;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * src[ow];
            } else {
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                orow[ow] += wv * irow[ow * stride + kw - pad];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Accumulates conv2d gradients. Any of the output pointers may be null.
inline void conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& bias,
                            std::size_t stride, std::size_t pad, const Tensor& grad_out,
                            Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) {
  const ConvGeometry g = conv_geometry(input, weight, bias, stride, pad);
  const double* in = input.data().data();
  const double* wt = weight.data().data();
  const double* go = grad_out.data().data();
  const std::size_t plane = g.out_h * g.out_w;
  double* gi = grad_input ? grad_input->data().data() : nullptr;
  double* gw = grad_weight ? grad_weight->data().data() : nullptr;
  for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
    const double* gplane = go + oc * plane;
    if (grad_bias) {
      double s = 0.0;
      for (std::size_t k = 0; k < plane; ++k) s += gplane[k];
      (*grad_bias)[oc] += s;
    }
    if (!gi && !gw) continue;
    for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
      const std::size_t ioff = ic * g.height * g.width;
      for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
        std::size_t oh_lo, oh_hi;
        detail::valid_range(kh, pad, stride, g.height, g.out_h, oh_lo, oh_hi);
        for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
          std::size_t ow_lo, ow_hi;
          detail::valid_range(kw, pad, stride, g.width, g.out_w, ow_lo, ow_hi);
          const std::size_t widx = ((oc * g.in_channels + ic) * g.kernel_h + kh) * g.kernel_w + kw;
          const double wv = wt[widx];
          double wacc = 0.0;
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t irow = ioff + (oh * stride + kh - pad) * g.width;
            const double* grow = gplane + oh * g.out_w;
            if (stride == 1) {
              const std::size_t base = irow + kw - pad;
              if (gi) {
                double* dst = gi + base;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += wv * grow[ow];
              }
              if (gw) {
                const double* src = in + base;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) wacc += grow[ow] * src[ow];
              }
            } else {
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                const std::size_t idx = irow + ow * stride + kw - pad;
                if (gi) gi[idx] += wv * grow[ow];
                if (gw) wacc += grow[ow] * in[idx];
              }
            }
          }
          if (gw) gw[widx] += wacc;
        }
      }
    }
  }
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

// Subgradient at 0 is 0.
inline void relu_backward(const Tensor& input, const Tensor& grad_out, Tensor& grad_input) {
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (input[i] > 0.0) grad_input[i] += grad_out[i];
  }
}

inline void require_even_spatial(const Tensor& input) {
  require_rank(input, 3, "maxpool2");
  if (input.dim(1) % 2 != 0 || input.dim(2) % 2 != 0) {
    throw ShapeError("maxpool2: spatial extents must be even, got " + shape_str(input.shape()));
  }
}

// 2x2 non-overlapping max pool. `argmax` receives the flat input index chosen
// for every output cell; ties go to the first cell in row-major window order.
inline Tensor maxpool2(const Tensor& input, std::vector<std::size_t>* argmax = nullptr) {
  require_even_spatial(input);
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  Tensor out(Shape{c, h / 2, w / 2});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oh = 0; oh < h / 2; ++oh) {
      for (std::size_t ow = 0; ow < w / 2; ++ow, ++o) {
        const std::size_t base = (ch * h + 2 * oh) * w + 2 * ow;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (input[cand[k]] > input[best]) best = cand[k];
        }
        out[o] = input[best];
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

inline void maxpool2_backward(const std::vector<std::size_t>& argmax, const Tensor& grad_out,
                              Tensor& grad_input) {
  for (std::size_t o = 0; o < argmax.size(); ++o) grad_input[argmax[o]] += grad_out[o];
}

inline constexpr double kBatchNormEps = 1e-5;

inline void check_batchnorm(const Tensor& input, const Tensor& mean, const Tensor& var,
                            const Tensor& gamma, const Tensor& beta) {
  require_rank(input, 3, "batchnorm input");
  const std::size_t c = input.dim(0);
  for (const Tensor* t : {&mean, &var, &gamma, &beta}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw ShapeError("batchnorm: per-channel parameter has shape " + shape_str(t->shape()) +
                       ", expected [" + std::to_string(c) + "]");
    }
  }
  for (double v : var.data()) {
    if (!(v >= 0.0)) throw ValidationError("batchnorm: variance must be non-negative");
  }
}

inline Tensor batchnorm_eval(const Tensor& input, const Tensor& mean, const Tensor& var,
                             const Tensor& gamma, const Tensor& beta,
                             double eps = kBatchNormEps) {
  check_batchnorm(input, mean, var, gamma, beta);
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  Tensor out(input.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(var[ch] + eps);
    const double scale = gamma[ch] * inv;
    for (std::size_t k = 0; k < plane; ++k) {
      const std::size_t i = ch * plane + k;
      out[i] = (input[i] - mean[ch]) * scale + beta[ch];
    }
  }
  return out;
}

inline void batchnorm_eval_backward(const Tensor& input, const Tensor& mean, const Tensor& var,
                                    const Tensor& gamma, const Tensor& grad_out,
                                    Tensor* grad_input, Tensor* grad_gamma, Tensor* grad_beta,
                                    double eps = kBatchNormEps) {
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(var[ch] + eps);
    const double scale = gamma[ch] * inv;
    double sg = 0.0, sb = 0.0;
    for (std::size_t k = 0; k < plane; ++k) {
      const std::size_t i = ch * plane + k;
      if (grad_input) (*grad_input)[i] += grad_out[i] * scale;
      sg += grad_out[i] * (input[i] - mean[ch]) * inv;
      sb += grad_out[i];
    }
    if (grad_gamma) (*grad_gamma)[ch] += sg;
    if (grad_beta) (*grad_beta)[ch] += sb;
  }
}

inline void check_linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 1, "linear input");
  require_rank(weight, 2, "linear weight");
  require_rank(bias, 1, "linear bias");
  if (weight.dim(1) != input.dim(0)) {
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " cannot take input of length " +
                     std::to_string(input.dim(0)));
  }
  if (bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear: bias length " + std::to_string(bias.dim(0)) + " != " +
                     std::to_string(weight.dim(0)) + " outputs");
  }
}

inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  check_linear(input, weight, bias);
  const std::size_t k_out = weight.dim(0), f = weight.dim(1);
  Tensor out(Shape{k_out});
  const double* w = weight.data().data();
  const double* x = input.data().data();
  for (std::size_t k = 0; k < k_out; ++k) {
    double s = 0.0;
    const double* row = w + k * f;
    for (std::size_t j = 0; j < f; ++j) s += row[j] * x[j];
    out[k] = s + bias[k];
  }
  return out;
}

inline void linear_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                            Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) {
  const std::size_t k_out = weight.dim(0), f = weight.dim(1);
  const double* w = weight.data().data();
  const double* x = input.data().data();
  for (std::size_t k = 0; k < k_out; ++k) {
    const double g = grad_out[k];
    if (grad_bias) (*grad_bias)[k] += g;
    if (grad_input) {
      double* gi = grad_input->data().data();
      const double* row = w + k * f;
      for (std::size_t j = 0; j < f; ++j) gi[j] += row[j] * g;
    }
    if (grad_weight) {
      double* gw = grad_weight->data().data() + k * f;
      for (std::size_t j = 0; j < f; ++j) gw[j] += g * x[j];
    }
  }
}

// Per-channel spatial max of a [C,H,W] map; ties go to the first position.
inline Tensor channel_max(const Tensor& input, std::vector<std::size_t>* argmax = nullptr) {
  require_rank(input, 3, "channel_max");
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  Tensor out(Shape{c});
  if (argmax) argmax->assign(c, 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const auto values = input.data().subspan(ch * plane, plane);
    const std::size_t best = pball::argmax(values);
    out[ch] = values[best];
    if (argmax) (*argmax)[ch] = ch * plane + best;
  }
  return out;
}

inline Tensor softmax(const Tensor& logits) {
  Tensor out = logits;
  const double m = logits.max();
  double z = 0.0;
  for (double& v : out.data()) {
    v = std::exp(v - m);
    z += v;
  }
  for (double& v : out.data()) v /= z;
  return out;
}

inline double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace pball::kernels
