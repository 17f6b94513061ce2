#pragma once

// Minimal dense-network pieces for the difficulty predictor: row-major
// matrices, affine layers, GELU and LayerNorm with hand-written backward
// passes. Parameter-holding types double as their own gradient containers.

#include <cassert>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "dots/rng.hpp"
#include "dots/serialize.hpp"

namespace dots::nn {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

/// y = W x + b with W stored out x in.
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  Dense() = default;
  Dense(std::size_t n_in, std::size_t n_out) : in(n_in), out(n_out), weight(n_in * n_out, 0.0), bias(n_out, 0.0) {}

  /// Glorot-uniform weights, zero bias.
  static Dense glorot(std::size_t n_in, std::size_t n_out, RngStream& rng) {
    Dense d(n_in, n_out);
    const double limit = std::sqrt(6.0 / static_cast<double>(n_in + n_out));
    for (double& w : d.weight) w = rng.uniform(-limit, limit);
    return d;
  }

  Matrix forward(const Matrix& x) const {
    assert(x.cols == in);
    Matrix y(x.rows, out);
    for (std::size_t r = 0; r < x.rows; ++r) {
      const double* xr = x.data.data() + r * in;
      double* yr = y.data.data() + r * out;
      for (std::size_t o = 0; o < out; ++o) {
        const double* w = weight.data() + o * in;
        double s = bias[o];
        for (std::size_t i = 0; i < in; ++i) s += w[i] * xr[i];
        yr[o] = s;
      }
    }
    return y;
  }

  /// Accumulates parameter gradients into `grad` and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& dy, Dense& grad) const {
    Matrix dx(x.rows, in);
    for (std::size_t r = 0; r < x.rows; ++r) {
      const double* xr = x.data.data() + r * in;
      const double* dyr = dy.data.data() + r * out;
      double* dxr = dx.data.data() + r * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double g = dyr[o];
        if (g == 0.0) continue;
        grad.bias[o] += g;
        const double* w = weight.data() + o * in;
        double* gw = grad.weight.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) {
          gw[i] += g * xr[i];
          dxr[i] += g * w[i];
        }
      }
    }
    return dx;
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }

  bool operator==(const Dense&) const = default;
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data) v = gelu(v);
  return y;
}

/// dL/dx given pre-activation x and dL/dy.
inline Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  Matrix dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= gelu_derivative(x.data[i]);
  return dx;
}

struct LayerNorm {
  std::vector<double> gain;
  std::vector<double> shift;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, double g = 1.0) : gain(dim, g), shift(dim, 0.0) {}

  struct Cache {
    Matrix normalized;
    std::vector<double> inv_std;
  };

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
    const std::size_t n = x.cols;
    Matrix y(x.rows, n);
    if (cache) {
      cache->normalized = Matrix(x.rows, n);
      cache->inv_std.assign(x.rows, 0.0);
    }
    for (std::size_t r = 0; r < x.rows; ++r) {
      const auto xr = x.row(r);
      double m = 0.0;
      for (double v : xr) m += v;
      m /= static_cast<double>(n);
      double var = 0.0;
      for (double v : xr) var += (v - m) * (v - m);
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t c = 0; c < n; ++c) {
        const double xh = (xr[c] - m) * inv;
        if (cache) cache->normalized(r, c) = xh;
        y(r, c) = gain[c] * xh + shift[c];
      }
      if (cache) cache->inv_std[r] = inv;
    }
    return y;
  }

  Matrix backward(const Cache& cache, const Matrix& dy, LayerNorm& grad) const {
    const std::size_t n = dy.cols;
    Matrix dx(dy.rows, n);
    std::vector<double> dxh(n);
    for (std::size_t r = 0; r < dy.rows; ++r) {
      double sum_dxh = 0.0;
      double sum_dxh_xh = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double xh = cache.normalized(r, c);
        grad.gain[c] += dy(r, c) * xh;
        grad.shift[c] += dy(r, c);
        dxh[c] = dy(r, c) * gain[c];
        sum_dxh += dxh[c];
        sum_dxh_xh += dxh[c] * xh;
      }
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t c = 0; c < n; ++c) {
        const double xh = cache.normalized(r, c);
        dx(r, c) = cache.inv_std[r] * (dxh[c] - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
      }
    }
    return dx;
  }

  template <typename F>
  void visit(F&& f) {
    f(gain);
    f(shift);
  }

  bool operator==(const LayerNorm&) const = default;
};

inline void write(BinaryWriter& w, const Dense& d) {
  w.put<std::uint64_t>(d.in);
  w.put<std::uint64_t>(d.out);
  w.put_vector(d.weight);
  w.put_vector(d.bias);
}

inline Dense read_dense(BinaryReader& r) {
  Dense d;
  d.in = r.get<std::uint64_t>();
  d.out = r.get<std::uint64_t>();
  d.weight = r.get_vector<double>();
  d.bias = r.get_vector<double>();
  if (d.weight.size() != d.in * d.out || d.bias.size() != d.out) throw FormatError("dense layer shape mismatch");
  return d;
}

inline void write(BinaryWriter& w, const LayerNorm& ln) {
  w.put_vector(ln.gain);
  w.put_vector(ln.shift);
  w.put(ln.eps);
}

inline LayerNorm read_layer_norm(BinaryReader& r) {
  LayerNorm ln;
  ln.gain = r.get_vector<double>();
  ln.shift = r.get_vector<double>();
  ln.eps = r.get<double>();
  if (ln.gain.size() != ln.shift.size()) throw FormatError("layer norm shape mismatch");
  return ln;
}

}  // namespace dots::nn
