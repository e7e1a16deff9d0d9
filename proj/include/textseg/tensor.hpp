#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "textseg/errors.hpp"
#include "textseg/rng.hpp"

namespace textseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Row-major strides, innermost dimension contiguous.
inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "all zero / never touched"
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Dense N-dimensional double tensor. Value semantics over a shared storage
// node; tensors are treated as immutable once created except for explicit
// in-place optimizer updates through mutable_values().
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t;
    t.node_->data.assign(shape_numel(shape), value);
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  // i.i.d. N(mean, stddev) entries.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      double mean = 0.0, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.node_->data) v = rng.normal(mean, stddev);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  const std::vector<double>& values() const { return node_->data; }
  // In-place mutation hook for optimizers and test setup only.
  std::vector<double>& mutable_values() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) {
      throw ContractError("grad requested but never populated; run backward first");
    }
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    }
    return node_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    return node_->data[flat_index(idx)];
  }
  void set(std::initializer_list<std::size_t> idx, double v) {
    node_->data[flat_index(idx)] = v;
  }

  bool all_finite() const {
    for (double v : node_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Identity of the underlying storage; used by the tape.
  detail::NodePtr node() const { return node_; }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) {
      throw ShapeError("index rank " + std::to_string(idx.size()) +
                       " vs tensor rank " + std::to_string(rank()));
    }
    auto st = row_major_strides(node_->shape);
    std::size_t off = 0, i = 0;
    for (std::size_t v : idx) {
      if (v >= node_->shape[i]) throw ShapeError("index out of range");
      off += v * st[i++];
    }
    return off;
  }

  detail::NodePtr node_;
};

// Define-by-run tape. Construction pushes this tape as the active recorder
// for the current thread; destruction pops it. Operations append one record
// in execution order, which is already a topological order of the graph, so
// backward() is a single reverse sweep.
class Tape {
 public:
  Tape() { stack().push_back(this); }
  ~Tape() {
    // Tapes must nest; the RAII scopes in this codebase guarantee it.
    if (!stack().empty() && stack().back() == this) stack().pop_back();
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return stack().empty() ? nullptr : stack().back(); }

  void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

  std::size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates through every recorded
  // operation in reverse execution order. Populates grad on every
  // requires_grad leaf reachable from the loss.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got " +
                          shape_str(loss.shape()));
    }
    auto node = loss.node();
    node->ensure_grad();
    node->grad[0] += 1.0;
    for (std::size_t i = records_.size(); i-- > 0;) records_[i]();
  }

 private:
  static std::vector<Tape*>& stack() {
    thread_local std::vector<Tape*> s;
    return s;
  }
  std::vector<std::function<void()>> records_;
};

namespace detail {

inline void maybe_record(Tensor& out, bool any_input_grad,
                         std::function<void()> fn) {
  if (any_input_grad) {
    out.set_requires_grad(true);
    if (Tape* t = Tape::active()) t->record(std::move(fn));
  }
}

// numpy-style broadcasting, aligned from the trailing dimension.
struct BinaryMap {
  Shape out_shape;
  std::vector<std::size_t> dims;       // out dims (same as out_shape)
  std::vector<std::size_t> a_stride;   // 0 where a broadcasts
  std::vector<std::size_t> b_stride;
  std::size_t n = 0;
  bool same_shape = false;
};

inline BinaryMap make_binary_map(const Shape& a, const Shape& b) {
  BinaryMap m;
  if (a == b) {
    m.out_shape = a;
    m.n = shape_numel(a);
    m.same_shape = true;
    return m;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  m.out_shape.assign(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " +
                       shape_str(b));
    }
    m.out_shape[i] = std::max(da, db);
  }
  m.dims = m.out_shape;
  m.n = shape_numel(m.out_shape);
  auto strides_for = [&](const Shape& s) {
    auto st = row_major_strides(s);
    std::vector<std::size_t> out(nd, 0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::size_t oi = nd - s.size() + i;
      out[oi] = (s[i] == 1 && m.out_shape[oi] != 1) ? 0 : st[i];
    }
    return out;
  };
  m.a_stride = strides_for(a);
  m.b_stride = strides_for(b);
  return m;
}

// f(out_flat, a_offset, b_offset) over the full broadcast index space.
template <class F>
inline void for_each_pair(const BinaryMap& m, F&& f) {
  if (m.n == 0) return;
  if (m.same_shape) {
    for (std::size_t i = 0; i < m.n; ++i) f(i, i, i);
    return;
  }
  const std::size_t nd = m.dims.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ao = 0, bo = 0;
  for (std::size_t flat = 0; flat < m.n; ++flat) {
    f(flat, ao, bo);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ao += m.a_stride[d];
      bo += m.b_stride[d];
      if (idx[d] < m.dims[d]) break;
      idx[d] = 0;
      ao -= m.a_stride[d] * m.dims[d];
      bo -= m.b_stride[d] * m.dims[d];
    }
  }
}

// Shared machinery for broadcasting binary ops. FwdF computes the value,
// GradA/GradB compute d(out)/d(a) resp. d(out)/d(b) from the input values.
template <class FwdF, class GradA, class GradB>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdF fwd, GradA ga,
                 GradB gb) {
  BinaryMap m = make_binary_map(a.shape(), b.shape());
  Tensor out = Tensor::zeros(m.out_shape);
  {
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.mutable_values();
    for_each_pair(m, [&](std::size_t o, std::size_t i, std::size_t j) {
      ov[o] = fwd(av[i], bv[j]);
    });
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  maybe_record(out, a.requires_grad() || b.requires_grad(), [m, an, bn, on, ga,
                                                             gb]() {
    if (on->grad.empty()) return;
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    for_each_pair(m, [&](std::size_t o, std::size_t i, std::size_t j) {
      const double g = on->grad[o];
      if (need_a) an->grad[i] += g * ga(an->data[i], bn->data[j]);
      if (need_b) bn->grad[j] += g * gb(an->data[i], bn->data[j]);
    });
  });
  return out;
}

template <class FwdF, class GradF>
Tensor unary_op(const Tensor& a, FwdF fwd, GradF gradf) {
  Tensor out = Tensor::zeros(a.shape());
  {
    const auto& av = a.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  }
  auto an = a.node(), on = out.node();
  maybe_record(out, a.requires_grad(), [an, on, gradf]() {
    if (on->grad.empty()) return;
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < an->data.size(); ++i) {
      an->grad[i] += on->grad[i] * gradf(an->data[i]);
    }
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (broadcasting)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Tensor relu(const Tensor& a) {
  // Convention: relu'(0) = 0.
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  auto sig = [](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  };
  return detail::unary_op(a, sig, [sig](double x) {
    double s = sig(x);
    return s * (1.0 - s);
  });
}

// tanh approximation of GELU:
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
// Constants fixed here for cross-run reproducibility.
inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC = 0.044715;

inline Tensor gelu(const Tensor& a) {
  auto fwd = [](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluC * x * x * x)));
  };
  auto grad = [](double x) {
    const double u = kGeluK * (x + kGeluC * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluK * (1.0 + 3.0 * kGeluC * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
  };
  return detail::unary_op(a, fwd, grad);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

#ifdef TEXTSEG_FAULT_INJECT_MATMUL
inline constexpr double kMatmulGradFault = 2.0;  // negative-control build
#else
inline constexpr double kMatmulGradFault = 1.0;
#endif

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = &bv[p * n];
        double* orow = &ov[i * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::maybe_record(out, a.requires_grad() || b.requires_grad(),
                       [an, bn, on, m, k, n]() {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      an->ensure_grad();
      // dA = dC . B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = &on->grad[i * n];
          const double* brow = &bn->data[p * n];
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          an->grad[i * k + p] += kMatmulGradFault * acc;
        }
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      // dB = A^T . dC
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < m; ++i) {
          const double aip = an->data[i * k + p];
          if (aip == 0.0) continue;
          const double* grow = &on->grad[i * n];
          double* brow = &bn->grad[p * n];
          for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
        }
      }
    }
  });
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose2d: expected rank 2, got " +
                     shape_str(a.shape()));
  }
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({c, r});
  {
    const auto& av = a.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ov[j * r + i] = av[i * c + j];
  }
  auto an = a.node(), on = out.node();
  detail::maybe_record(out, a.requires_grad(), [an, on, r, c]() {
    if (on->grad.empty() || !an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        an->grad[i * c + j] += on->grad[j * r + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

// Row softmax with optional key mask over columns (true = valid). Masked
// columns receive probability 0 and no gradient. Max-subtraction per row for
// numerical stability. Throws NumericError on non-finite input and
// ContractError when every key is masked.
inline Tensor softmax_rows(const Tensor& x,
                           const std::vector<std::uint8_t>& key_mask = {}) {
  if (x.rank() != 2) {
    throw ShapeError("softmax_rows: expected rank 2, got " +
                     shape_str(x.shape()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (c == 0) throw ShapeError("softmax_rows: zero columns");
  if (!key_mask.empty()) {
    if (key_mask.size() != c) {
      throw ShapeError("softmax_rows: mask size " +
                       std::to_string(key_mask.size()) + " vs columns " +
                       std::to_string(c));
    }
    if (std::find(key_mask.begin(), key_mask.end(), std::uint8_t(1)) ==
        key_mask.end()) {
      throw ContractError("softmax_rows: all keys masked");
    }
  }
  auto valid = [&](std::size_t j) {
    return key_mask.empty() || key_mask[j] != 0;
  };
  Tensor out = Tensor::zeros({r, c});
  {
    const auto& xv = x.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < r; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) {
        if (!valid(j)) continue;
        const double v = xv[i * c + j];
        if (!std::isfinite(v)) {
          throw NumericError("softmax_rows: non-finite input at row " +
                             std::to_string(i));
        }
        mx = std::max(mx, v);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (!valid(j)) continue;
        const double e = std::exp(xv[i * c + j] - mx);
        ov[i * c + j] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < c; ++j) {
        if (valid(j)) ov[i * c + j] /= sum;
      }
    }
  }
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on, r, c]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    // dx_ij = y_ij * (dy_ij - sum_k dy_ik y_ik); masked entries have y = 0.
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        dot += on->grad[i * c + j] * on->data[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        xn->grad[i * c + j] +=
            on->data[i * c + j] * (on->grad[i * c + j] - dot);
      }
    }
  });
  return out;
}

// Normalizes each slice along the last axis: (x - mean) / sqrt(var + eps),
// then applies the gamma/beta affine. Population variance (divide by c).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be > 0");
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(c) +
                     "], got " + shape_str(gamma.shape()) + " and " +
                     shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape());
  // Cache per-row statistics for the backward pass.
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  {
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < rows; ++i) {
      const double* row = &xv[i * c];
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_sigma)[i] = is;
      for (std::size_t j = 0; j < c; ++j) {
        const double xh = (row[j] - mean) * is;
        (*xhat)[i * c + j] = xh;
        ov[i * c + j] = gv[j] * xh + bv[j];
      }
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
  detail::maybe_record(
      out, x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
      [xn, gn, bn, on, rows, c, inv_sigma, xhat]() {
        if (on->grad.empty()) return;
        const bool need_x = xn->requires_grad;
        const bool need_g = gn->requires_grad;
        const bool need_b = bn->requires_grad;
        if (need_x) xn->ensure_grad();
        if (need_g) gn->ensure_grad();
        if (need_b) bn->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
          const double* gy = &on->grad[i * c];
          const double* xh = &(*xhat)[i * c];
          if (need_g || need_b) {
            for (std::size_t j = 0; j < c; ++j) {
              if (need_g) gn->grad[j] += gy[j] * xh[j];
              if (need_b) bn->grad[j] += gy[j];
            }
          }
          if (need_x) {
            // dxhat = gy * gamma; dx = (dxhat - mean(dxhat)
            //          - xhat * mean(dxhat * xhat)) * inv_sigma
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = gy[j] * gn->data[j];
              m1 += dxh;
              m2 += dxh * xh[j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = gy[j] * gn->data[j];
              xn->grad[i * c + j] += (dxh - m1 - xh[j] * m2) * (*inv_sigma)[i];
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor out = Tensor::from_data(std::move(new_shape), x.values());
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->grad.size(); ++i)
      xn->grad[i] += on->grad[i];
  });
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank()) {
    throw ShapeError("concat: rank mismatch or bad axis for " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " differ off-axis " +
                       std::to_string(i));
    }
  }
  Shape os = a.shape();
  os[axis] += b.dim(axis);
  // outer x (axis) x inner decomposition
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
  for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
  const std::size_t ca = a.dim(axis), cb = b.dim(axis);
  Tensor out = Tensor::zeros(os);
  {
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.mutable_values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(&av[o * ca * inner], ca * inner,
                  &ov[o * (ca + cb) * inner]);
      std::copy_n(&bv[o * cb * inner], cb * inner,
                  &ov[(o * (ca + cb) + ca) * inner]);
    }
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::maybe_record(out, a.requires_grad() || b.requires_grad(),
                       [an, bn, on, outer, inner, ca, cb]() {
    if (on->grad.empty()) return;
    for (std::size_t o = 0; o < outer; ++o) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < ca * inner; ++i)
          an->grad[o * ca * inner + i] += on->grad[o * (ca + cb) * inner + i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < cb * inner; ++i)
          bn->grad[o * cb * inner + i] +=
              on->grad[(o * (ca + cb) + ca) * inner + i];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    const double g = on->grad[0];
    for (double& v : xn->grad) v += g;
  });
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// [r x c] -> [r], summing each row.
inline Tensor row_sum(const Tensor& x) {
  if (x.rank() != 2) {
    throw ShapeError("row_sum: expected rank 2, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({r});
  {
    const auto& xv = x.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j];
      ov[i] = s;
    }
  }
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on, r, c]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        xn->grad[i * c + j] += on->grad[i];
  });
  return out;
}

// Masked mean over rows of [n x d] -> [d]; mask true = row participates.
inline Tensor masked_mean_rows(const Tensor& x,
                               const std::vector<std::uint8_t>& mask) {
  if (x.rank() != 2) {
    throw ShapeError("masked_mean_rows: expected rank 2, got " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (mask.size() != n) {
    throw ShapeError("masked_mean_rows: mask size " +
                     std::to_string(mask.size()) + " vs rows " +
                     std::to_string(n));
  }
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw ContractError("masked_mean_rows: all rows masked");
  Tensor out = Tensor::zeros({d});
  {
    const auto& xv = x.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      for (std::size_t j = 0; j < d; ++j) ov[j] += xv[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) ov[j] /= static_cast<double>(count);
  }
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on, n, d, mask, count]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      for (std::size_t j = 0; j < d; ++j)
        xn->grad[i * d + j] += on->grad[j] * inv;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gather / batch plumbing
// ---------------------------------------------------------------------------

// Row gather from an embedding table [vocab x d] by integer id.
inline Tensor embedding_rows(const Tensor& table,
                             const std::vector<std::int32_t>& ids) {
  if (table.rank() != 2) {
    throw ShapeError("embedding_rows: table must be rank 2, got " +
                     shape_str(table.shape()));
  }
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ContractError("embedding_rows: id " + std::to_string(id) +
                          " out of range [0, " + std::to_string(v) + ")");
    }
  }
  Tensor out = Tensor::zeros({ids.size(), d});
  {
    const auto& tv = table.values();
    auto& ov = out.mutable_values();
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(&tv[static_cast<std::size_t>(ids[i]) * d], d, &ov[i * d]);
  }
  auto tn = table.node(), on = out.node();
  detail::maybe_record(out, table.requires_grad(), [tn, on, ids, d]() {
    if (on->grad.empty() || !tn->requires_grad) return;
    tn->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* row = &tn->grad[static_cast<std::size_t>(ids[i]) * d];
      for (std::size_t j = 0; j < d; ++j) row[j] += on->grad[i * d + j];
    }
  });
  return out;
}

// [B, ...] -> [...] for one batch element.
inline Tensor batch_slice(const Tensor& x, std::size_t b) {
  if (x.rank() < 2 || b >= x.dim(0)) {
    throw ShapeError("batch_slice: bad index " + std::to_string(b) + " for " +
                     shape_str(x.shape()));
  }
  Shape os(x.shape().begin() + 1, x.shape().end());
  const std::size_t n = shape_numel(os);
  Tensor out = Tensor::zeros(os);
  std::copy_n(&x.values()[b * n], n, out.mutable_values().data());
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on, b, n]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) xn->grad[b * n + i] += on->grad[i];
  });
  return out;
}

// Stack equally shaped tensors along a new leading axis.
inline Tensor batch_stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("batch_stack: empty input");
  const Shape& inner = parts[0].shape();
  for (const Tensor& p : parts) {
    if (p.shape() != inner) {
      throw ShapeError("batch_stack: mismatched shapes " + shape_str(inner) +
                       " vs " + shape_str(p.shape()));
    }
  }
  Shape os;
  os.push_back(parts.size());
  os.insert(os.end(), inner.begin(), inner.end());
  const std::size_t n = shape_numel(inner);
  Tensor out = Tensor::zeros(os);
  bool any_grad = false;
  for (std::size_t b = 0; b < parts.size(); ++b) {
    std::copy_n(parts[b].values().data(), n, &out.mutable_values()[b * n]);
    any_grad = any_grad || parts[b].requires_grad();
  }
  std::vector<detail::NodePtr> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(p.node());
  auto on = out.node();
  detail::maybe_record(out, any_grad, [nodes, on, n]() {
    if (on->grad.empty()) return;
    for (std::size_t b = 0; b < nodes.size(); ++b) {
      if (!nodes[b]->requires_grad) continue;
      nodes[b]->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        nodes[b]->grad[i] += on->grad[b * n + i];
    }
  });
  return out;
}

// [B, C, d, h, w] -> [B, d*h*w, C]; voxel row index is z-major.
inline Tensor voxels_to_rows(const Tensor& x) {
  if (x.rank() != 5) {
    throw ShapeError("voxels_to_rows: expected [B,C,d,h,w], got " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t N = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor out = Tensor::zeros({B, N, C});
  {
    const auto& xv = x.values();
    auto& ov = out.mutable_values();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < N; ++v)
          ov[(b * N + v) * C + c] = xv[(b * C + c) * N + v];
  }
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on, B, C, N]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < N; ++v)
          xn->grad[(b * C + c) * N + v] += on->grad[(b * N + v) * C + c];
  });
  return out;
}

// [B, N, C] -> [B, C, d, h, w] with N == d*h*w. Inverse of voxels_to_rows.
inline Tensor rows_to_voxels(const Tensor& x, std::size_t d, std::size_t h,
                             std::size_t w) {
  if (x.rank() != 3 || x.dim(1) != d * h * w) {
    throw ShapeError("rows_to_voxels: expected [B," +
                     std::to_string(d * h * w) + ",C], got " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  Tensor out = Tensor::zeros({B, C, d, h, w});
  {
    const auto& xv = x.values();
    auto& ov = out.mutable_values();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < N; ++v)
          ov[(b * C + c) * N + v] = xv[(b * N + v) * C + c];
  }
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on, B, C, N]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < N; ++v)
          xn->grad[(b * N + v) * C + c] += on->grad[(b * C + c) * N + v];
  });
  return out;
}

// ---------------------------------------------------------------------------
// 3-D convolution ops (direct, gather-form loops)
// ---------------------------------------------------------------------------

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t s,
                                std::size_t p) {
  if (in + 2 * p < k) throw ShapeError("conv3d: kernel larger than input");
  return (in + 2 * p - k) / s + 1;
}

// x: [B, Cin, D, H, W], w: [Cout, Cin, k, k, k], b: [Cout] (may be empty
// tensor for no bias). Zero padding p, stride s.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride, std::size_t pad) {
  if (x.rank() != 5 || w.rank() != 5 || w.dim(2) != w.dim(3) ||
      w.dim(2) != w.dim(4) || x.dim(1) != w.dim(1)) {
    throw ShapeError("conv3d: incompatible " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const bool has_bias = b.numel() > 0;
  if (has_bias && b.shape() != Shape{w.dim(0)}) {
    throw ShapeError("conv3d: bias " + shape_str(b.shape()) +
                     " vs out channels " + std::to_string(w.dim(0)));
  }
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(0), K = w.dim(2);
  const std::size_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t OD = conv_out_dim(D, K, stride, pad);
  const std::size_t OH = conv_out_dim(H, K, stride, pad);
  const std::size_t OW = conv_out_dim(W, K, stride, pad);
  Tensor out = Tensor::zeros({B, Co, OD, OH, OW});
  {
    const auto& xv = x.values();
    const auto& wv = w.values();
    auto& ov = out.mutable_values();
    const std::int64_t ip = static_cast<std::int64_t>(pad);
    // each (batch, out-channel) slab is written by exactly one thread with a
    // fixed accumulation order, so the result is thread-count independent
#pragma omp parallel for schedule(static)
    for (std::size_t bc = 0; bc < B * Co; ++bc) {
      {
        const std::size_t bi = bc / Co;
        const std::size_t co = bc % Co;
        const double bias = has_bias ? b.values()[co] : 0.0;
        for (std::size_t oz = 0; oz < OD; ++oz) {
          for (std::size_t oy = 0; oy < OH; ++oy) {
            for (std::size_t ox = 0; ox < OW; ++ox) {
              double acc = bias;
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                const double* xc = &xv[((bi * Ci + ci) * D) * H * W];
                const double* wc = &wv[((co * Ci + ci) * K) * K * K];
                for (std::size_t kz = 0; kz < K; ++kz) {
                  const std::int64_t iz =
                      static_cast<std::int64_t>(oz * stride + kz) - ip;
                  if (iz < 0 || iz >= static_cast<std::int64_t>(D)) continue;
                  for (std::size_t ky = 0; ky < K; ++ky) {
                    const std::int64_t iy =
                        static_cast<std::int64_t>(oy * stride + ky) - ip;
                    if (iy < 0 || iy >= static_cast<std::int64_t>(H)) continue;
                    const double* xrow = &xc[(iz * H + iy) * W];
                    const double* wrow = &wc[(kz * K + ky) * K];
                    for (std::size_t kx = 0; kx < K; ++kx) {
                      const std::int64_t ix =
                          static_cast<std::int64_t>(ox * stride + kx) - ip;
                      if (ix < 0 || ix >= static_cast<std::int64_t>(W))
                        continue;
                      acc += xrow[ix] * wrow[kx];
                    }
                  }
                }
              }
              ov[(((bi * Co + co) * OD + oz) * OH + oy) * OW + ox] = acc;
            }
          }
        }
      }
    }
  }
  auto xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
  const bool bias_grad = has_bias && b.requires_grad();
  detail::maybe_record(
      out, x.requires_grad() || w.requires_grad() || bias_grad,
      [xn, wn, bn, on, B, Ci, Co, K, D, H, W, OD, OH, OW, stride, pad,
       has_bias]() {
        if (on->grad.empty()) return;
        const std::int64_t ip = static_cast<std::int64_t>(pad);
        if (has_bias && bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t co = 0; co < Co; ++co) {
              const double* g = &on->grad[((bi * Co + co) * OD) * OH * OW];
              double acc = 0.0;
              for (std::size_t i = 0; i < OD * OH * OW; ++i) acc += g[i];
              bn->grad[co] += acc;
            }
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          // dW[co,ci,k] = sum_{b,out} dy[b,co,out] * x[b,ci,out*s+k-p];
          // one thread per out-channel slab of dW
#pragma omp parallel for schedule(static)
          for (std::size_t co = 0; co < Co; ++co) {
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              for (std::size_t kz = 0; kz < K; ++kz) {
                for (std::size_t ky = 0; ky < K; ++ky) {
                  for (std::size_t kx = 0; kx < K; ++kx) {
                    double acc = 0.0;
                    for (std::size_t bi = 0; bi < B; ++bi) {
                      const double* xc = &xn->data[((bi * Ci + ci) * D) * H * W];
                      const double* gc = &on->grad[((bi * Co + co) * OD) * OH * OW];
                      for (std::size_t oz = 0; oz < OD; ++oz) {
                        const std::int64_t iz =
                            static_cast<std::int64_t>(oz * stride + kz) - ip;
                        if (iz < 0 || iz >= static_cast<std::int64_t>(D))
                          continue;
                        for (std::size_t oy = 0; oy < OH; ++oy) {
                          const std::int64_t iy =
                              static_cast<std::int64_t>(oy * stride + ky) - ip;
                          if (iy < 0 || iy >= static_cast<std::int64_t>(H))
                            continue;
                          for (std::size_t ox = 0; ox < OW; ++ox) {
                            const std::int64_t ix =
                                static_cast<std::int64_t>(ox * stride + kx) -
                                ip;
                            if (ix < 0 || ix >= static_cast<std::int64_t>(W))
                              continue;
                            acc += gc[(oz * OH + oy) * OW + ox] *
                                   xc[(iz * H + iy) * W + ix];
                          }
                        }
                      }
                    }
                    wn->grad[(((co * Ci + ci) * K + kz) * K + ky) * K + kx] +=
                        acc;
                  }
                }
              }
            }
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          // dx[b,ci,i] = sum_{co,k} dy[b,co,(i+p-k)/s] * w[co,ci,k];
          // gather form, one thread per (batch, in-channel) slab
#pragma omp parallel for schedule(static)
          for (std::size_t bc2 = 0; bc2 < B * Ci; ++bc2) {
            {
              const std::size_t bi = bc2 / Ci;
              const std::size_t ci = bc2 % Ci;
              double* gx = &xn->grad[((bi * Ci + ci) * D) * H * W];
              for (std::size_t iz = 0; iz < D; ++iz) {
                for (std::size_t iy = 0; iy < H; ++iy) {
                  for (std::size_t ix = 0; ix < W; ++ix) {
                    double acc = 0.0;
                    for (std::size_t kz = 0; kz < K; ++kz) {
                      const std::int64_t ozs =
                          static_cast<std::int64_t>(iz) + ip -
                          static_cast<std::int64_t>(kz);
                      if (ozs < 0 || ozs % static_cast<std::int64_t>(stride))
                        continue;
                      const std::size_t oz = static_cast<std::size_t>(
                          ozs / static_cast<std::int64_t>(stride));
                      if (oz >= OD) continue;
                      for (std::size_t ky = 0; ky < K; ++ky) {
                        const std::int64_t oys =
                            static_cast<std::int64_t>(iy) + ip -
                            static_cast<std::int64_t>(ky);
                        if (oys < 0 || oys % static_cast<std::int64_t>(stride))
                          continue;
                        const std::size_t oy = static_cast<std::size_t>(
                            oys / static_cast<std::int64_t>(stride));
                        if (oy >= OH) continue;
                        for (std::size_t kx = 0; kx < K; ++kx) {
                          const std::int64_t oxs =
                              static_cast<std::int64_t>(ix) + ip -
                              static_cast<std::int64_t>(kx);
                          if (oxs < 0 ||
                              oxs % static_cast<std::int64_t>(stride))
                            continue;
                          const std::size_t ox = static_cast<std::size_t>(
                              oxs / static_cast<std::int64_t>(stride));
                          if (ox >= OW) continue;
                          for (std::size_t co = 0; co < Co; ++co) {
                            acc += on->grad[(((bi * Co + co) * OD + oz) * OH +
                                             oy) * OW + ox] *
                                   wn->data[(((co * Ci + ci) * K + kz) * K +
                                             ky) * K + kx];
                          }
                        }
                      }
                    }
                    gx[(iz * H + iy) * W + ix] += acc;
                  }
                }
              }
            }
          }
        }
      });
  return out;
}

// Nearest-neighbour x2 upsampling of [B, C, d, h, w].
inline Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 5) {
    throw ShapeError("upsample_nearest2x: expected [B,C,d,h,w], got " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3),
                    W = x.dim(4);
  Tensor out = Tensor::zeros({B, C, 2 * D, 2 * H, 2 * W});
  {
    const auto& xv = x.values();
    auto& ov = out.mutable_values();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double* src = &xv[bc * D * H * W];
      double* dst = &ov[bc * 8 * D * H * W];
      for (std::size_t z = 0; z < 2 * D; ++z)
        for (std::size_t y = 0; y < 2 * H; ++y)
          for (std::size_t xq = 0; xq < 2 * W; ++xq)
            dst[(z * 2 * H + y) * 2 * W + xq] =
                src[((z / 2) * H + y / 2) * W + xq / 2];
    }
  }
  auto xn = x.node(), on = out.node();
  detail::maybe_record(out, x.requires_grad(), [xn, on, B, C, D, H, W]() {
    if (on->grad.empty() || !xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      double* gsrc = &xn->grad[bc * D * H * W];
      const double* gdst = &on->grad[bc * 8 * D * H * W];
      for (std::size_t z = 0; z < 2 * D; ++z)
        for (std::size_t y = 0; y < 2 * H; ++y)
          for (std::size_t xq = 0; xq < 2 * W; ++xq)
            gsrc[((z / 2) * H + y / 2) * W + xq / 2] +=
                gdst[(z * 2 * H + y) * 2 * W + xq];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

// x: [... x in], w: [in x out], b: [out]. Flattens leading dims, applies
// x.w + b, restores the leading dims.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: incompatible " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  if (b.shape() != Shape{w.dim(1)}) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) +
                     " vs out dim " + std::to_string(w.dim(1)));
  }
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  const std::size_t rows = x.numel() / in;
  Tensor x2 = x.rank() == 2 ? x : reshape(x, {rows, in});
  Tensor y = add(matmul(x2, w), b);
  if (x.rank() == 2) return y;
  Shape os = x.shape();
  os.back() = out_dim;
  return reshape(y, os);
}

}  // namespace textseg
