#include "cpli/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cpli {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_mask(std::span<const std::uint8_t> mask, std::size_t channels) {
  if (mask.empty()) return;
  require(mask.size() == channels, "mask length " + std::to_string(mask.size()) +
                                       " does not match input channels " +
                                       std::to_string(channels));
  for (auto m : mask) require(m == 0 || m == 1, "mask entries must be 0 or 1");
}

bool mask_is_full(std::span<const std::uint8_t> mask) {
  return std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m == 1; });
}

Tensor apply_mask(const Tensor& input, std::span<const std::uint8_t> mask) {
  Tensor out = input;
  const std::size_t plane = input.dim(1) * input.dim(2);
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (mask[c] == 0) std::fill_n(out.data() + c * plane, plane, 0.0);
  }
  return out;
}

struct ConvShape {
  std::size_t c_in, h_in, w_in, c_out, kh, kw, h_out, w_out;
};

ConvShape check_conv(const Tensor& input, const Tensor& weights, std::size_t stride,
                     std::size_t pad) {
  require(input.rank() == 3, "conv2d input must be [c_in,h_in,w_in], got " +
                                 dims_to_string(input.dims()));
  require(weights.rank() == 4, "conv2d weights must be [c_out,c_in,h_k,w_k], got " +
                                   dims_to_string(weights.dims()));
  require(stride >= 1, "conv2d stride must be >= 1");
  ConvShape s{};
  s.c_in = input.dim(0);
  s.h_in = input.dim(1);
  s.w_in = input.dim(2);
  s.c_out = weights.dim(0);
  s.kh = weights.dim(2);
  s.kw = weights.dim(3);
  require(weights.dim(1) == s.c_in, "conv2d c_in mismatch: input has " + std::to_string(s.c_in) +
                                        " channels, weights expect " +
                                        std::to_string(weights.dim(1)));
  s.h_out = conv_output_extent(s.h_in, s.kh, stride, pad);
  s.w_out = conv_output_extent(s.w_in, s.kw, stride, pad);
  return s;
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad) {
  require(in + 2 * pad >= kernel, "kernel extent " + std::to_string(kernel) +
                                      " exceeds padded input extent " +
                                      std::to_string(in + 2 * pad));
  return (in + 2 * pad - kernel) / stride + 1;
}

MatrixXdR im2col(const Tensor& input, const ConvGeometry& g) {
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t h_out = conv_output_extent(h, g.kernel_h, g.stride, g.pad);
  const std::size_t w_out = conv_output_extent(w, g.kernel_w, g.stride, g.pad);
  MatrixXdR cols(static_cast<Eigen::Index>(c_in * g.kernel_h * g.kernel_w),
                 static_cast<Eigen::Index>(h_out * w_out));
  const double* src = input.data();
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const auto row = static_cast<Eigen::Index>((c * g.kernel_h + ky) * g.kernel_w + kx);
        double* dst = cols.row(row).data();
        for (std::size_t oy = 0; oy < h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            dst[oy * w_out + ox] = inside ? src[(c * h + iy) * w + ix] : 0.0;
          }
        }
      }
    }
  }
  return cols;
}

Eigen::VectorXd extract_patch(const Tensor& input, const ConvGeometry& g, std::size_t out_y,
                              std::size_t out_x) {
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  Eigen::VectorXd patch(static_cast<Eigen::Index>(c_in * g.kernel_h * g.kernel_w));
  Eigen::Index k = 0;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      const auto iy = static_cast<std::ptrdiff_t>(out_y * g.stride + ky) -
                      static_cast<std::ptrdiff_t>(g.pad);
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const auto ix = static_cast<std::ptrdiff_t>(out_x * g.stride + kx) -
                        static_cast<std::ptrdiff_t>(g.pad);
        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                            ix < static_cast<std::ptrdiff_t>(w);
        patch[k++] = inside ? input.data()[(c * h + iy) * w + ix] : 0.0;
      }
    }
  }
  return patch;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      std::span<const std::uint8_t> mask, std::size_t stride, std::size_t pad) {
  const ConvShape s = check_conv(input, weights, stride, pad);
  require(bias.size() == s.c_out, "conv2d bias length " + std::to_string(bias.size()) +
                                      " does not match c_out " + std::to_string(s.c_out));
  check_mask(mask, s.c_in);

  const ConvGeometry g{s.kh, s.kw, stride, pad};
  const MatrixXdR cols = mask_is_full(mask) ? im2col(input, g) : im2col(apply_mask(input, mask), g);

  Tensor out({s.c_out, s.h_out, s.w_out});
  auto y = out.matrix();
  y.noalias() = weights.matrix() * cols;
  y.colwise() += bias.flat();
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& d_output,
                          std::span<const std::uint8_t> mask, std::size_t stride,
                          std::size_t pad) {
  const ConvShape s = check_conv(input, weights, stride, pad);
  require(d_output.dims() == Dims{s.c_out, s.h_out, s.w_out},
          "conv2d d_output dims " + dims_to_string(d_output.dims()) + " do not match output " +
              dims_to_string({s.c_out, s.h_out, s.w_out}));
  check_mask(mask, s.c_in);

  const ConvGeometry g{s.kh, s.kw, stride, pad};
  const bool full = mask_is_full(mask);
  const MatrixXdR cols = full ? im2col(input, g) : im2col(apply_mask(input, mask), g);
  const auto dy = d_output.matrix();

  ConvGrads grads{Tensor(input.dims()), Tensor(weights.dims()), Tensor({s.c_out})};
  grads.d_weights.matrix().noalias() = dy * cols.transpose();
  grads.d_bias.flat() = dy.rowwise().sum();

  const MatrixXdR dcols = weights.matrix().transpose() * dy;
  double* dx = grads.d_input.data();
  for (std::size_t c = 0; c < s.c_in; ++c) {
    if (!full && mask[c] == 0) continue;
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        const double* src = dcols.row(static_cast<Eigen::Index>((c * s.kh + ky) * s.kw + kx)).data();
        for (std::size_t oy = 0; oy < s.h_out; ++oy) {
          const auto iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s.h_in)) continue;
          for (std::size_t ox = 0; ox < s.w_out; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s.w_in)) continue;
            dx[(c * s.h_in + iy) * s.w_in + ix] += src[oy * s.w_out + ox];
          }
        }
      }
    }
  }
  return grads;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& d_output) {
  require(input.dims() == d_output.dims(), "relu backward shape mismatch: " +
                                               dims_to_string(input.dims()) + " vs " +
                                               dims_to_string(d_output.dims()));
  Tensor dx(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) dx[i] = input[i] > 0.0 ? d_output[i] : 0.0;
  return dx;
}

PoolResult maxpool2d_forward(const Tensor& input, std::size_t window, std::size_t stride) {
  require(input.rank() == 3, "maxpool2d input must be [c,h,w], got " + dims_to_string(input.dims()));
  require(window >= 1 && stride >= 1, "maxpool2d window and stride must be >= 1");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t h_out = conv_output_extent(h, window, stride, 0);
  const std::size_t w_out = conv_output_extent(w, window, stride, 0);
  PoolResult r{Tensor({c, h_out, w_out}), std::vector<std::size_t>(c * h_out * w_out)};
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < h_out; ++oy) {
      for (std::size_t ox = 0; ox < w_out; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = (ch * h + oy * stride) * w + ox * stride;
        // Row-major scan with strict '>' keeps the lowest flat index on ties.
        for (std::size_t ky = 0; ky < window; ++ky) {
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::size_t idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
            if (input[idx] > best) {
              best = input[idx];
              best_idx = idx;
            }
          }
        }
        r.output[o] = best;
        r.argmax[o] = best_idx;
      }
    }
  }
  return r;
}

Tensor maxpool2d_backward(const Dims& input_dims, std::span<const std::size_t> argmax,
                          const Tensor& d_output) {
  require(argmax.size() == d_output.size(), "maxpool2d backward: argmax/gradient size mismatch");
  Tensor dx(input_dims);
  for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += d_output[o];
  return dx;
}

Tensor flatten_forward(const Tensor& input) {
  Tensor out = input;
  out.reshape({input.size()});
  return out;
}

Tensor linear_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  require(weights.rank() == 2, "linear weights must be [out,in], got " +
                                   dims_to_string(weights.dims()));
  require(input.size() == weights.dim(1), "linear in_features mismatch: input has " +
                                              std::to_string(input.size()) + ", weights expect " +
                                              std::to_string(weights.dim(1)));
  require(bias.size() == weights.dim(0), "linear bias length does not match out_features");
  Tensor out({weights.dim(0)});
  out.flat().noalias() = weights.matrix() * input.flat();
  out.flat() += bias.flat();
  return out;
}

LinearGrads linear_backward(const Tensor& input, const Tensor& weights, const Tensor& d_output) {
  require(d_output.size() == weights.dim(0), "linear backward: d_output size mismatch");
  require(input.size() == weights.dim(1), "linear backward: input size mismatch");
  LinearGrads g{Tensor(input.dims()), Tensor(weights.dims()), Tensor({weights.dim(0)})};
  g.d_weights.matrix().noalias() = d_output.flat() * input.flat().transpose();
  g.d_bias.flat() = d_output.flat();
  g.d_input.flat().noalias() = weights.matrix().transpose() * d_output.flat();
  return g;
}

Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  const double mx = logits.flat().maxCoeff();
  auto v = p.flat();
  v = (v.array() - mx).exp();
  v /= v.sum();
  return p;
}

double cross_entropy(const Tensor& logits, std::size_t label) {
  require(label < logits.size(), "label " + std::to_string(label) + " out of range for " +
                                     std::to_string(logits.size()) + " classes");
  const auto v = logits.flat();
  const double mx = v.maxCoeff();
  const double lse = mx + std::log((v.array() - mx).exp().sum());
  return lse - v[static_cast<Eigen::Index>(label)];
}

Tensor cross_entropy_grad(const Tensor& logits, std::size_t label) {
  require(label < logits.size(), "label " + std::to_string(label) + " out of range for " +
                                     std::to_string(logits.size()) + " classes");
  Tensor g = softmax(logits);
  g[label] -= 1.0;
  return g;
}

}  // namespace cpli
