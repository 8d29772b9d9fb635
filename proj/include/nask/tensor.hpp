#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "nask/common.hpp"

namespace nask {

// Multiply-accumulate counter. Incremented by matmul only, so attention
// cost measurements are not polluted by convolutions or activations.
inline std::uint64_t& mac_counter() {
  static std::uint64_t count = 0;
  return count;
}
inline void reset_mac_counter() { mac_counter() = 0; }

namespace detail {

struct TensorStorage {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, same length as data
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad or computed from such a tensor
  const void* producer = nullptr;  // tape that recorded the producing op
};

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

}  // namespace detail

// Dense row-major 64-bit float tensor. Copying a Tensor shares storage;
// ops recorded on a Tape fill `grad` on backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return make(std::move(shape), 0.0, requires_grad);
  }

  static Tensor ones(std::vector<int> shape, bool requires_grad = false) {
    return make(std::move(shape), 1.0, requires_grad);
  }

  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false) {
    return make(std::move(shape), value, requires_grad);
  }

  static Tensor from(std::vector<double> data, std::vector<int> shape,
                     bool requires_grad = false) {
    if (detail::shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + detail::shape_str(shape));
    Tensor t;
    t.s_ = std::make_shared<detail::TensorStorage>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(data);
    t.s_->requires_grad = requires_grad;
    t.s_->needs_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({v}, {1}, requires_grad);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    const std::int64_t n = detail::shape_numel(shape);
    std::vector<double> d(static_cast<size_t>(n));
    for (auto& v : d) v = rng.gaussian() * stddev;
    return from(std::move(d), std::move(shape), requires_grad);
  }

  bool valid() const { return s_ != nullptr; }
  const std::vector<int>& shape() const { return s_->shape; }
  int dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t numel() const { return detail::shape_numel(s_->shape); }

  std::vector<double>& data() { return s_->data; }
  const std::vector<double>& data() const { return s_->data; }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  bool needs_grad() const { return s_ && s_->needs_grad; }

  std::vector<double>& grad() {
    ensure_grad();
    return s_->grad;
  }
  const std::vector<double>& grad() const { return s_->grad; }
  bool has_grad() const { return s_ && !s_->grad.empty(); }

  void zero_grad() {
    if (s_ && !s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
  }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string());
    return s_->data[0];
  }

  double& operator()(int i) { return s_->data[static_cast<size_t>(i)]; }
  double operator()(int i) const { return s_->data[static_cast<size_t>(i)]; }
  double& operator()(int i, int j) {
    return s_->data[static_cast<size_t>(i) * dim(1) + j];
  }
  double operator()(int i, int j) const {
    return s_->data[static_cast<size_t>(i) * dim(1) + j];
  }
  double& operator()(int c, int i, int j) {
    return s_->data[(static_cast<size_t>(c) * dim(1) + i) * dim(2) + j];
  }
  double operator()(int c, int i, int j) const {
    return s_->data[(static_cast<size_t>(c) * dim(1) + i) * dim(2) + j];
  }

  std::string shape_string() const { return detail::shape_str(s_->shape); }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  detail::TensorStorage* storage() const { return s_.get(); }

 private:
  friend class Tape;

  static Tensor make(std::vector<int> shape, double fill, bool requires_grad) {
    const std::int64_t n = detail::shape_numel(shape);
    Tensor t;
    t.s_ = std::make_shared<detail::TensorStorage>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(static_cast<size_t>(n), fill);
    t.s_->requires_grad = requires_grad;
    t.s_->needs_grad = requires_grad;
    return t;
  }

  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
  }

  std::shared_ptr<detail::TensorStorage> s_;
};

// Regular grid of real-valued sample coordinates for bilinear_sample,
// (x, y) per output pixel in row-major order.
struct SampleGrid {
  int h = 0;
  int w = 0;
  std::vector<Vec2> points;
};

// Records every differentiable op in execution order; backward() replays
// the list in reverse. One tape per training step, single-threaded.
class Tape {
 public:
  // --- core ops -----------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
      throw DimensionError("matmul expects 2-d tensors, got " + a.shape_string() +
                           " and " + b.shape_string());
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
      throw DimensionError("matmul inner dimensions disagree: " + a.shape_string() +
                           " vs " + b.shape_string());
    Tensor y = out({m, n}, {a, b});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* py = y.data().data();
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* row_b = pb + static_cast<size_t>(p) * n;
        double* row_y = py + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) row_y[j] += av * row_b[j];
      }
    }
    mac_counter() += static_cast<std::uint64_t>(m) * n * k;
    if (y.needs_grad()) {
      record(y, [a, b, y]() mutable {
        const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
        const double* gy = y.grad().data();
        if (a.needs_grad()) {
          double* ga = a.grad().data();
          const double* pb = b.data().data();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += gy[i * n + j] * pb[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (b.needs_grad()) {
          double* gb = b.grad().data();
          const double* pa = a.data().data();
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              const double av = pa[i * k + p];
              for (int j = 0; j < n; ++j) gb[p * n + j] += av * gy[i * n + j];
            }
        }
      });
    }
    return y;
  }

  // 1x1 or 3x3 same-padding convolution on a C_in x H x W map. The kernel
  // kind is taken from the weight shape [C_out, C_in, k, k]; bias may be an
  // invalid Tensor to skip it.
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
    if (x.rank() != 3 || w.rank() != 4)
      throw DimensionError("conv2d expects x[C,H,W], w[Co,Ci,k,k], got " +
                           x.shape_string() + " and " + w.shape_string());
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), wci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (wci != ci)
      throw DimensionError("conv2d channel mismatch: input has " + std::to_string(ci) +
                           ", kernel expects " + std::to_string(wci));
    if (kh != kw || (kh != 1 && kh != 3))
      throw UnsupportedOpError("conv2d supports 1x1 and 3x3 kernels only, got " +
                               std::to_string(kh) + "x" + std::to_string(kw));
    if (bias.valid() && (bias.rank() != 1 || bias.dim(0) != co))
      throw DimensionError("conv2d bias shape mismatch");
    const int pad = kh == 3 ? 1 : 0;
    Tensor y = out({co, h, wd}, bias.valid() ? std::vector<Tensor>{x, w, bias}
                                             : std::vector<Tensor>{x, w});
    conv_forward(x, w, bias, y, pad);
    if (y.needs_grad()) {
      record(y, [x, w, bias, y, pad]() mutable {
        conv_backward(x, w, bias, y, pad);
      });
    }
    return y;
  }

  // Numerically stable softmax along `axis`; slices sum to 1.
  Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank())
      throw DimensionError("softmax axis " + std::to_string(axis) +
                           " out of range for " + x.shape_string());
    for (double v : x.data())
      if (!std::isfinite(v)) throw NumericError("softmax input contains non-finite value");
    const auto& shape = x.shape();
    std::int64_t outer = 1, inner = 1;
    const int len = shape[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= shape[static_cast<size_t>(i)];
    Tensor y = out(shape, {x});
    const double* px = x.data().data();
    double* py = y.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        double mx = px[base];
        for (int l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
        double z = 0.0;
        for (int l = 0; l < len; ++l) {
          const double e = std::exp(px[base + l * inner] - mx);
          py[base + l * inner] = e;
          z += e;
        }
        for (int l = 0; l < len; ++l) py[base + l * inner] /= z;
      }
    }
    if (y.needs_grad()) {
      record(y, [x, y, outer, inner, len]() mutable {
        const double* py = y.data().data();
        const double* gy = y.grad().data();
        double* gx = x.grad().data();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            double dot = 0.0;
            for (int l = 0; l < len; ++l)
              dot += gy[base + l * inner] * py[base + l * inner];
            for (int l = 0; l < len; ++l) {
              const std::int64_t i = base + l * inner;
              gx[i] += (gy[i] - dot) * py[i];
            }
          }
      });
    }
    return y;
  }

  // Bilinear resampling of a C x H x W map at real-valued grid coordinates.
  // Coordinates are clamped to the map; differentiable w.r.t. x only.
  Tensor bilinear_sample(const Tensor& x, const SampleGrid& grid) {
    if (x.rank() != 3)
      throw DimensionError("bilinear_sample expects x[C,H,W], got " + x.shape_string());
    if (grid.h <= 0 || grid.w <= 0 ||
        grid.points.size() != static_cast<size_t>(grid.h) * grid.w)
      throw DimensionError("bilinear_sample grid is empty or inconsistent");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y = out({c, grid.h, grid.w}, {x});
    const double* px = x.data().data();
    double* py = y.data().data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t oplane = static_cast<std::int64_t>(grid.h) * grid.w;
    for (std::int64_t p = 0; p < oplane; ++p) {
      double sx = std::min(std::max(grid.points[static_cast<size_t>(p)].x, 0.0),
                           static_cast<double>(w - 1));
      double sy = std::min(std::max(grid.points[static_cast<size_t>(p)].y, 0.0),
                           static_cast<double>(h - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0, fy = sy - y0;
      const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
      const double w10 = fy * (1 - fx), w11 = fy * fx;
      for (int ch = 0; ch < c; ++ch) {
        const double* pc = px + ch * plane;
        py[ch * oplane + p] = w00 * pc[y0 * w + x0] + w01 * pc[y0 * w + x1] +
                              w10 * pc[y1 * w + x0] + w11 * pc[y1 * w + x1];
      }
    }
    if (y.needs_grad()) {
      record(y, [x, y, grid]() mutable {
        const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
        const std::int64_t plane = static_cast<std::int64_t>(h) * w;
        const std::int64_t oplane = static_cast<std::int64_t>(grid.h) * grid.w;
        const double* gy = y.grad().data();
        double* gx = x.grad().data();
        for (std::int64_t p = 0; p < oplane; ++p) {
          double sx = std::min(std::max(grid.points[static_cast<size_t>(p)].x, 0.0),
                               static_cast<double>(w - 1));
          double sy = std::min(std::max(grid.points[static_cast<size_t>(p)].y, 0.0),
                               static_cast<double>(h - 1));
          const int x0 = static_cast<int>(std::floor(sx));
          const int y0 = static_cast<int>(std::floor(sy));
          const int x1 = std::min(x0 + 1, w - 1);
          const int y1 = std::min(y0 + 1, h - 1);
          const double fx = sx - x0, fy = sy - y0;
          const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
          const double w10 = fy * (1 - fx), w11 = fy * fx;
          for (int ch = 0; ch < c; ++ch) {
            const double g = gy[ch * oplane + p];
            double* gc = gx + ch * plane;
            gc[y0 * w + x0] += w00 * g;
            gc[y0 * w + x1] += w01 * g;
            gc[y1 * w + x0] += w10 * g;
            gc[y1 * w + x1] += w11 * g;
          }
        }
      });
    }
    return y;
  }

  // --- elementwise --------------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor y = out(a.shape(), {a, b});
    for (size_t i = 0; i < y.data().size(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
    if (y.needs_grad())
      record(y, [a, b, y]() mutable {
        if (a.needs_grad())
          for (size_t i = 0; i < y.grad().size(); ++i) a.grad()[i] += y.grad()[i];
        if (b.needs_grad())
          for (size_t i = 0; i < y.grad().size(); ++i) b.grad()[i] += y.grad()[i];
      });
    return y;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor y = out(a.shape(), {a, b});
    for (size_t i = 0; i < y.data().size(); ++i) y.data()[i] = a.data()[i] - b.data()[i];
    if (y.needs_grad())
      record(y, [a, b, y]() mutable {
        if (a.needs_grad())
          for (size_t i = 0; i < y.grad().size(); ++i) a.grad()[i] += y.grad()[i];
        if (b.needs_grad())
          for (size_t i = 0; i < y.grad().size(); ++i) b.grad()[i] -= y.grad()[i];
      });
    return y;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor y = out(a.shape(), {a, b});
    for (size_t i = 0; i < y.data().size(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
    if (y.needs_grad())
      record(y, [a, b, y]() mutable {
        if (a.needs_grad())
          for (size_t i = 0; i < y.grad().size(); ++i)
            a.grad()[i] += y.grad()[i] * b.data()[i];
        if (b.needs_grad())
          for (size_t i = 0; i < y.grad().size(); ++i)
            b.grad()[i] += y.grad()[i] * a.data()[i];
      });
    return y;
  }

  // scale*x + shift, elementwise.
  Tensor affine(const Tensor& x, double scale, double shift) {
    Tensor y = out(x.shape(), {x});
    for (size_t i = 0; i < y.data().size(); ++i) y.data()[i] = scale * x.data()[i] + shift;
    if (y.needs_grad())
      record(y, [x, y, scale]() mutable {
        for (size_t i = 0; i < y.grad().size(); ++i) x.grad()[i] += scale * y.grad()[i];
      });
    return y;
  }

  Tensor relu(const Tensor& x) {
    Tensor y = out(x.shape(), {x});
    for (size_t i = 0; i < y.data().size(); ++i)
      y.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (y.needs_grad())
      record(y, [x, y]() mutable {
        for (size_t i = 0; i < y.grad().size(); ++i)
          if (x.data()[i] > 0.0) x.grad()[i] += y.grad()[i];
      });
    return y;
  }

  Tensor sigmoid(const Tensor& x) {
    Tensor y = out(x.shape(), {x});
    for (size_t i = 0; i < y.data().size(); ++i)
      y.data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
    if (y.needs_grad())
      record(y, [x, y]() mutable {
        for (size_t i = 0; i < y.grad().size(); ++i) {
          const double s = y.data()[i];
          x.grad()[i] += y.grad()[i] * s * (1.0 - s);
        }
      });
    return y;
  }

  // Elementwise smoothed-L1 kernel: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
  Tensor huber(const Tensor& d) {
    Tensor y = out(d.shape(), {d});
    for (size_t i = 0; i < y.data().size(); ++i) {
      const double v = d.data()[i];
      y.data()[i] = std::abs(v) < 1.0 ? 0.5 * v * v : std::abs(v) - 0.5;
    }
    if (y.needs_grad())
      record(y, [d, y]() mutable {
        for (size_t i = 0; i < y.grad().size(); ++i) {
          const double v = d.data()[i];
          const double dd = std::abs(v) < 1.0 ? v : (v > 0.0 ? 1.0 : -1.0);
          d.grad()[i] += y.grad()[i] * dd;
        }
      });
    return y;
  }

  // Elementwise binary cross-entropy against constant targets. Predictions
  // are clamped to [eps, 1-eps]; gradients vanish outside the clamp range.
  Tensor bce(const Tensor& pred, const Tensor& target, double eps = 1e-7) {
    check_same_shape(pred, target, "bce");
    Tensor y = out(pred.shape(), {pred});
    for (size_t i = 0; i < y.data().size(); ++i) {
      const double p = std::min(std::max(pred.data()[i], eps), 1.0 - eps);
      const double t = target.data()[i];
      y.data()[i] = -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    }
    if (y.needs_grad())
      record(y, [pred, target, y, eps]() mutable {
        for (size_t i = 0; i < y.grad().size(); ++i) {
          const double raw = pred.data()[i];
          if (raw <= eps || raw >= 1.0 - eps) continue;  // clamped: zero slope
          const double t = target.data()[i];
          pred.grad()[i] += y.grad()[i] * (raw - t) / (raw * (1.0 - raw));
        }
      });
    return y;
  }

  // --- reductions ---------------------------------------------------------

  Tensor sum(const Tensor& x) {
    Tensor y = out({1}, {x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    y.data()[0] = acc;
    if (y.needs_grad())
      record(y, [x, y]() mutable {
        const double g = y.grad()[0];
        for (size_t i = 0; i < x.grad().size(); ++i) x.grad()[i] += g;
      });
    return y;
  }

  Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    Tensor y = out({1}, {x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    y.data()[0] = acc / n;
    if (y.needs_grad())
      record(y, [x, y, n]() mutable {
        const double g = y.grad()[0] / n;
        for (size_t i = 0; i < x.grad().size(); ++i) x.grad()[i] += g;
      });
    return y;
  }

  // --- shape ops ----------------------------------------------------------

  Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (detail::shape_numel(shape) != x.numel())
      throw DimensionError("reshape " + x.shape_string() + " -> " +
                           detail::shape_str(shape) + " changes element count");
    Tensor y = out(shape, {x});
    y.data() = x.data();
    if (y.needs_grad())
      record(y, [x, y]() mutable {
        for (size_t i = 0; i < y.grad().size(); ++i) x.grad()[i] += y.grad()[i];
      });
    return y;
  }

  Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose2d expects a 2-d tensor");
    const int m = x.dim(0), n = x.dim(1);
    Tensor y = out({n, m}, {x});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) y.data()[j * m + i] = x.data()[i * n + j];
    if (y.needs_grad())
      record(y, [x, y, m, n]() mutable {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) x.grad()[i * n + j] += y.grad()[j * m + i];
      });
    return y;
  }

  // Contiguous channel slice [c0, c1) of a C x H x W map.
  Tensor slice_channels(const Tensor& x, int c0, int c1) {
    if (x.rank() != 3) throw DimensionError("slice_channels expects x[C,H,W]");
    if (c0 < 0 || c1 > x.dim(0) || c0 >= c1)
      throw DimensionError("slice_channels range [" + std::to_string(c0) + "," +
                           std::to_string(c1) + ") invalid for " + x.shape_string());
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor y = out({c1 - c0, x.dim(1), x.dim(2)}, {x});
    std::copy(x.data().begin() + c0 * plane, x.data().begin() + c1 * plane,
              y.data().begin());
    if (y.needs_grad())
      record(y, [x, y, c0, plane]() mutable {
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(y.grad().size()); ++i)
          x.grad()[static_cast<size_t>(c0 * plane + i)] += y.grad()[static_cast<size_t>(i)];
      });
    return y;
  }

  Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_channels on empty list");
    int c = 0;
    const int h = parts[0].dim(1), w = parts[0].dim(2);
    for (const auto& p : parts) {
      if (p.rank() != 3 || p.dim(1) != h || p.dim(2) != w)
        throw DimensionError("concat_channels spatial shapes disagree");
      c += p.dim(0);
    }
    Tensor y = out({c, h, w}, parts);
    size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), y.data().begin() + off);
      off += p.data().size();
    }
    if (y.needs_grad())
      record(y, [parts, y]() mutable {
        size_t off = 0;
        for (auto& p : parts) {
          if (p.needs_grad())
            for (size_t i = 0; i < p.data().size(); ++i) p.grad()[i] += y.grad()[off + i];
          off += p.data().size();
        }
      });
    return y;
  }

  // Multiply channel c of x by lam[c].
  Tensor scale_channels(const Tensor& x, const Tensor& lam) {
    if (x.rank() != 3 || lam.rank() != 1 || lam.dim(0) != x.dim(0))
      throw DimensionError("scale_channels expects x[C,H,W] and lam[C]");
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor y = out(x.shape(), {x, lam});
    for (int c = 0; c < x.dim(0); ++c) {
      const double s = lam.data()[static_cast<size_t>(c)];
      for (std::int64_t i = 0; i < plane; ++i)
        y.data()[static_cast<size_t>(c * plane + i)] =
            s * x.data()[static_cast<size_t>(c * plane + i)];
    }
    if (y.needs_grad())
      record(y, [x, lam, y, plane]() mutable {
        for (int c = 0; c < x.dim(0); ++c) {
          const double s = lam.data()[static_cast<size_t>(c)];
          double acc = 0.0;
          for (std::int64_t i = 0; i < plane; ++i) {
            const size_t idx = static_cast<size_t>(c * plane + i);
            if (x.needs_grad()) x.grad()[idx] += s * y.grad()[idx];
            acc += y.grad()[idx] * x.data()[idx];
          }
          if (lam.needs_grad()) lam.grad()[static_cast<size_t>(c)] += acc;
        }
      });
    return y;
  }

  // --- pooling / resizing -------------------------------------------------

  Tensor avg_pool2x2(const Tensor& x) {
    if (x.rank() != 3 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
      throw DimensionError("avg_pool2x2 expects even H and W, got " + x.shape_string());
    const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
    Tensor y = out({c, h, w}, {x});
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          y(ch, i, j) = 0.25 * (x(ch, 2 * i, 2 * j) + x(ch, 2 * i, 2 * j + 1) +
                                x(ch, 2 * i + 1, 2 * j) + x(ch, 2 * i + 1, 2 * j + 1));
    if (y.needs_grad())
      record(y, [x, y]() mutable {
        const int c = y.dim(0), h = y.dim(1), w = y.dim(2);
        const std::int64_t xplane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
        const std::int64_t yplane = static_cast<std::int64_t>(h) * w;
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
              const double g = 0.25 * y.grad()[static_cast<size_t>(ch * yplane + i * w + j)];
              double* gx = x.grad().data() + ch * xplane;
              gx[(2 * i) * x.dim(2) + 2 * j] += g;
              gx[(2 * i) * x.dim(2) + 2 * j + 1] += g;
              gx[(2 * i + 1) * x.dim(2) + 2 * j] += g;
              gx[(2 * i + 1) * x.dim(2) + 2 * j + 1] += g;
            }
      });
    return y;
  }

  // Nearest-neighbour 2x upsampling.
  Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("upsample2x expects x[C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y = out({c, 2 * h, 2 * w}, {x});
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) y(ch, i, j) = x(ch, i / 2, j / 2);
    if (y.needs_grad())
      record(y, [x, y]() mutable {
        const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
              x.grad()[(static_cast<size_t>(ch) * h + i / 2) * w + j / 2] +=
                  y.grad()[(static_cast<size_t>(ch) * 2 * h + i) * 2 * w + j];
      });
    return y;
  }

  Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("global_avg_pool expects x[C,H,W]");
    const int c = x.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor y = out({c}, {x});
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i)
        acc += x.data()[static_cast<size_t>(ch * plane + i)];
      y.data()[static_cast<size_t>(ch)] = acc / static_cast<double>(plane);
    }
    if (y.needs_grad())
      record(y, [x, y, plane, c]() mutable {
        for (int ch = 0; ch < c; ++ch) {
          const double g = y.grad()[static_cast<size_t>(ch)] / static_cast<double>(plane);
          for (std::int64_t i = 0; i < plane; ++i)
            x.grad()[static_cast<size_t>(ch * plane + i)] += g;
        }
      });
    return y;
  }

  // --- backward -----------------------------------------------------------

  // Propagates d(loss)/d(tensor) into grad buffers for everything reachable
  // from `loss`. Leaf gradients accumulate across repeated calls;
  // intermediate gradients are reset each call.
  void backward(const Tensor& loss) {
    if (!loss.valid() || loss.numel() != 1)
      throw ContractError("backward requires a scalar loss");
    if (loss.storage()->producer != this)
      throw ContractError("loss tensor was not produced on this tape");
    for (auto& node : nodes_) node.output.zero_grad();
    Tensor seed = loss;
    seed.grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

 private:
  struct Node {
    Tensor output;
    std::function<void()> back;
  };

  Tensor out(std::vector<int> shape, const std::vector<Tensor>& inputs) {
    Tensor y = Tensor::zeros(std::move(shape));
    if (recording_) {
      for (const auto& in : inputs)
        if (in.valid() && in.needs_grad()) {
          y.storage()->needs_grad = true;
          break;
        }
    }
    if (y.needs_grad()) y.storage()->producer = this;
    return y;
  }

  void record(const Tensor& output, std::function<void()> back) {
    // Grad buffers must exist before closures index into them.
    Tensor o = output;
    o.grad();
    nodes_.push_back(Node{o, std::move(back)});
  }

  static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
      throw DimensionError(std::string(op) + " shape mismatch: " + a.shape_string() +
                           " vs " + b.shape_string());
  }

  static void conv_forward(const Tensor& x, const Tensor& w, const Tensor& bias,
                           Tensor& y, int pad) {
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), k = w.dim(2);
    const double* px = x.data().data();
    const double* pw = w.data().data();
    double* py = y.data().data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * wd;
    for (int oc = 0; oc < co; ++oc) {
      double* oy = py + oc * plane;
      if (bias.valid()) {
        const double b = bias.data()[static_cast<size_t>(oc)];
        for (std::int64_t i = 0; i < plane; ++i) oy[i] = b;
      }
      for (int ic = 0; ic < ci; ++ic) {
        const double* ix = px + ic * plane;
        const double* kw = pw + (static_cast<size_t>(oc) * ci + ic) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const double wv = kw[ky * k + kx];
            if (wv == 0.0) continue;
            const int i0 = std::max(0, -dy), i1 = std::min(h, h - dy);
            const int j0 = std::max(0, -dx), j1 = std::min(wd, wd - dx);
            for (int i = i0; i < i1; ++i) {
              const double* src = ix + (i + dy) * wd + dx;
              double* dst = oy + i * wd;
              for (int j = j0; j < j1; ++j) dst[j] += wv * src[j];
            }
          }
        }
      }
    }
  }

  static void conv_backward(Tensor& x, Tensor& w, Tensor& bias, Tensor& y, int pad) {
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), k = w.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(h) * wd;
    const double* gy = y.grad().data();
    if (bias.valid() && bias.needs_grad()) {
      for (int oc = 0; oc < co; ++oc) {
        double acc = 0.0;
        const double* g = gy + oc * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += g[i];
        bias.grad()[static_cast<size_t>(oc)] += acc;
      }
    }
    for (int oc = 0; oc < co; ++oc) {
      const double* g = gy + oc * plane;
      for (int ic = 0; ic < ci; ++ic) {
        const double* ix = x.data().data() + ic * plane;
        double* gx = x.needs_grad() ? x.grad().data() + ic * plane : nullptr;
        const size_t kbase = (static_cast<size_t>(oc) * ci + ic) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const int i0 = std::max(0, -dy), i1 = std::min(h, h - dy);
            const int j0 = std::max(0, -dx), j1 = std::min(wd, wd - dx);
            if (w.needs_grad()) {
              double acc = 0.0;
              for (int i = i0; i < i1; ++i) {
                const double* src = ix + (i + dy) * wd + dx;
                const double* gr = g + i * wd;
                for (int j = j0; j < j1; ++j) acc += gr[j] * src[j];
              }
              w.grad()[kbase + static_cast<size_t>(ky * k + kx)] += acc;
            }
            if (gx) {
              const double wv = w.data()[kbase + static_cast<size_t>(ky * k + kx)];
              if (wv != 0.0) {
                for (int i = i0; i < i1; ++i) {
                  double* dst = gx + (i + dy) * wd + dx;
                  const double* gr = g + i * wd;
                  for (int j = j0; j < j1; ++j) dst[j] += wv * gr[j];
                }
              }
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
};

}  // namespace nask
