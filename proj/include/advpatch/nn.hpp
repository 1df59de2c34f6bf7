#pragma once

// Minimal CNN building blocks with explicit backward passes. Feature maps are
// (channels x height*width) matrices, one column per spatial position.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "advpatch/core.hpp"
#include "advpatch/rng.hpp"

namespace advpatch::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr double kLeakySlope = 0.1;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct FeatureMap {
  int channels = 0, height = 0, width = 0;
  Mat data;  // channels x (height*width)
};

// Average-pools an HWC raster by `factor` into a CHW feature map.
inline FeatureMap avg_pool_image(const Raster& img, int factor) {
  FeatureMap f;
  f.channels = img.channels();
  f.height = img.height() / factor;
  f.width = img.width() / factor;
  f.data = Mat::Zero(f.channels, f.height * f.width);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < f.height * factor; ++y) {
    const int py = y / factor;
    for (int x = 0; x < f.width * factor; ++x) {
      const int col = py * f.width + x / factor;
      for (int c = 0; c < f.channels; ++c) f.data(c, col) += img.at(y, x, c) * inv;
    }
  }
  return f;
}

inline Raster avg_pool_image_backward(const FeatureMap& grad, int factor, int height, int width) {
  Raster g(height, width, grad.channels, 0.0);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < grad.height * factor; ++y) {
    const int py = y / factor;
    for (int x = 0; x < grad.width * factor; ++x) {
      const int col = py * grad.width + x / factor;
      for (int c = 0; c < grad.channels; ++c) g.at(y, x, c) = grad.data(c, col) * inv;
    }
  }
  return g;
}

struct ConvShape {
  int in_channels = 3;
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  // Odd kernels use "same" padding; even kernels are non-overlapping (kernel == stride).
  int pad() const { return kernel % 2 ? kernel / 2 : 0; }
};

// Convolution + optional leaky ReLU, via im2col and a single GEMM.
struct Conv {
  ConvShape shape;
  bool activate = true;
  Mat weight;  // out x (in*k*k)
  Vec bias;

  Conv() = default;
  Conv(ConvShape s, bool act, Rng& rng) : shape(s), activate(act) {
    const int fan_in = s.in_channels * s.kernel * s.kernel;
    weight = Mat(s.out_channels, fan_in);
    const double stdv = std::sqrt(2.0 / fan_in);
    for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = gaussian(rng, 0.0, stdv);
    bias = Vec::Zero(s.out_channels);
  }

  int out_size(int in) const { return (in + 2 * shape.pad() - shape.kernel) / shape.stride + 1; }

  Mat im2col(const FeatureMap& in, int oh, int ow) const {
    const int k = shape.kernel, pad = shape.pad(), st = shape.stride;
    Mat cols = Mat::Zero(in.channels * k * k, oh * ow);
    for (int c = 0; c < in.channels; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int row = (c * k + ky) * k + kx;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * st + ky - pad;
            if (iy < 0 || iy >= in.height) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * st + kx - pad;
              if (ix < 0 || ix >= in.width) continue;
              cols(row, oy * ow + ox) = in.data(c, iy * in.width + ix);
            }
          }
        }
    return cols;
  }

  void col2im(const Mat& dcols, FeatureMap& din, int oh, int ow) const {
    const int k = shape.kernel, pad = shape.pad(), st = shape.stride;
    for (int c = 0; c < din.channels; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int row = (c * k + ky) * k + kx;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * st + ky - pad;
            if (iy < 0 || iy >= din.height) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * st + kx - pad;
              if (ix < 0 || ix >= din.width) continue;
              din.data(c, iy * din.width + ix) += dcols(row, oy * ow + ox);
            }
          }
        }
  }

  struct Cache {
    Mat cols;
    Mat pre;  // pre-activation output
    int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  };

  FeatureMap forward(const FeatureMap& in, Cache& cache) const {
    cache.in_h = in.height;
    cache.in_w = in.width;
    cache.out_h = out_size(in.height);
    cache.out_w = out_size(in.width);
    if (shape.kernel == 1 && shape.stride == 1)
      cache.cols = in.data;
    else
      cache.cols = im2col(in, cache.out_h, cache.out_w);
    cache.pre.noalias() = weight * cache.cols;
    cache.pre.colwise() += bias;
    FeatureMap out{shape.out_channels, cache.out_h, cache.out_w, cache.pre};
    if (activate)
      out.data = cache.pre.unaryExpr([](double v) { return v > 0 ? v : kLeakySlope * v; });
    return out;
  }

  // Returns d/d(input); accumulates weight/bias gradients when pointers are given.
  FeatureMap backward(const Cache& cache, const Mat& grad_out, Mat* dweight, Vec* dbias,
                      bool need_input_grad = true) const {
    Mat dpre = grad_out;
    if (activate)
      dpre = grad_out.binaryExpr(cache.pre, [](double g, double p) { return p > 0 ? g : kLeakySlope * g; });
    if (dweight) dweight->noalias() += dpre * cache.cols.transpose();
    if (dbias) *dbias += dpre.rowwise().sum();
    FeatureMap din{shape.in_channels, cache.in_h, cache.in_w, Mat()};
    if (!need_input_grad) return din;
    const Mat dcols = weight.transpose() * dpre;
    if (shape.kernel == 1 && shape.stride == 1) {
      din.data = dcols;
    } else {
      din.data = Mat::Zero(shape.in_channels, cache.in_h * cache.in_w);
      col2im(dcols, din, cache.out_h, cache.out_w);
    }
    return din;
  }
};

// Spatial pyramid pooling block: concatenates the input with stride-1 "same" max-pools
// of each kernel size along the channel axis.
struct SppCache {
  std::vector<std::vector<int>> argmax;  // per pool: source column per (channel, column)
};

inline FeatureMap spp_forward(const FeatureMap& in, const std::vector<int>& kernels, SppCache& cache) {
  const int C = in.channels, H = in.height, W = in.width;
  FeatureMap out{C * static_cast<int>(1 + kernels.size()), H, W, Mat(C * (1 + kernels.size()), H * W)};
  out.data.topRows(C) = in.data;
  cache.argmax.assign(kernels.size(), std::vector<int>(static_cast<std::size_t>(C) * H * W));
  for (std::size_t p = 0; p < kernels.size(); ++p) {
    const int r = kernels[p] / 2;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          int best = y * W + x;
          for (int yy = std::max(0, y - r); yy <= std::min(H - 1, y + r); ++yy)
            for (int xx = std::max(0, x - r); xx <= std::min(W - 1, x + r); ++xx)
              if (in.data(c, yy * W + xx) > in.data(c, best)) best = yy * W + xx;
          out.data(C * (1 + p) + c, y * W + x) = in.data(c, best);
          cache.argmax[p][static_cast<std::size_t>(c) * H * W + y * W + x] = best;
        }
  }
  return out;
}

inline Mat spp_backward(const Mat& grad_out, int channels, const SppCache& cache) {
  Mat g = grad_out.topRows(channels);
  const Eigen::Index cols = grad_out.cols();
  for (std::size_t p = 0; p < cache.argmax.size(); ++p)
    for (int c = 0; c < channels; ++c)
      for (Eigen::Index j = 0; j < cols; ++j)
        g(c, cache.argmax[p][c * cols + j]) += grad_out(channels * (1 + p) + c, j);
  return g;
}

// Adam over a flat list of parameter blocks.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  void step(std::vector<double*> params, std::vector<const double*> grads,
            std::vector<std::size_t> sizes) {
    if (m_.empty()) {
      for (std::size_t s : sizes) {
        m_.emplace_back(s, 0.0);
        v_.emplace_back(s, 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t b = 0; b < params.size(); ++b)
      for (std::size_t i = 0; i < sizes[b]; ++i) {
        const double g = grads[b][i];
        m_[b][i] = b1_ * m_[b][i] + (1 - b1_) * g;
        v_[b][i] = b2_ * v_[b][i] + (1 - b2_) * g * g;
        params[b][i] -= lr_ * (m_[b][i] / c1) / (std::sqrt(v_[b][i] / c2) + eps_);
      }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace advpatch::nn
