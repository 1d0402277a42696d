#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dmadapter/tensor.hpp"

namespace dmadapter {

using Index = std::size_t;
using IndexList = std::vector<Index>;

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap mmap(double* p, std::size_t r, std::size_t c) {
  return MutMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

enum class Binary { add, sub, mul };

inline Tensor binary(const char* op, Binary kind, const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.is_scalar() && !b.is_scalar();
  const bool b_scalar = b.is_scalar() && !a.is_scalar();
  if (!a_scalar && !b_scalar) require_same_shape(op, a, b);
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ad[a_scalar ? 0 : i];
    const double y = bd[b_scalar ? 0 : i];
    switch (kind) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
    }
  }
  return make_result(op, shape, std::move(out), {a, b},
                     [a, b, kind, a_scalar, b_scalar, n](const Tensor&, std::span<const double> g,
                                                         const GradSink& gs) {
                       if (double* ga = gs[0]) {
                         for (std::size_t i = 0; i < n; ++i) {
                           double d = g[i];
                           if (kind == Binary::mul) d *= b[b_scalar ? 0 : i];
                           ga[a_scalar ? 0 : i] += d;
                         }
                       }
                       if (double* gb = gs[1]) {
                         for (std::size_t i = 0; i < n; ++i) {
                           double d = g[i];
                           if (kind == Binary::sub) d = -d;
                           if (kind == Binary::mul) d *= a[a_scalar ? 0 : i];
                           gb[b_scalar ? 0 : i] += d;
                         }
                       }
                     });
}

struct AxisLayout {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ArgumentError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

// Rows x cols view of a tensor whose last axis is the column axis.
inline std::pair<std::size_t, std::size_t> as_rows(const Tensor& t) {
  const std::size_t cols = t.shape().back();
  return {t.size() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary("add", detail::Binary::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary("sub", detail::Binary::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary("mul", detail::Binary::mul, a, b); }

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (auto& v : out) v *= c;
  return detail::make_result("scale", x.shape(), std::move(out), {x},
                             [c](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
                             });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_result("relu", x.shape(), std::move(out), {x},
                             [x](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               // zero slope at exactly 0
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (x[i] > 0.0) gx[i] += g[i];
                             });
}

inline Tensor exp(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) v = std::exp(v);
  return detail::make_result("exp", x.shape(), std::move(out), {x},
                             [](const Tensor& y, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
                             });
}

inline Tensor log(const Tensor& x) {
  std::vector<double> out(x.data());
  for (auto& v : out) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    v = std::log(v);
  }
  return detail::make_result("log", x.shape(), std::move(out), {x},
                             [x](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.size();
  return detail::make_result("sum", {1}, {s}, {x},
                             [n](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                             });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Column means of a rank-2 tensor: [r, c] -> [c].
inline Tensor mean_rows(const Tensor& x) {
  detail::require_rank("mean_rows", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[i * c + j];
  for (auto& v : out) v /= static_cast<double>(r);
  return detail::make_result("mean_rows", {c}, std::move(out), {x},
                             [r, c](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               const double inv = 1.0 / static_cast<double>(r);
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] * inv;
                             });
}

// ---------------------------------------------------------------------------
// Shape

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result("reshape", std::move(shape), x.data(), {x},
                             [](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return detail::make_result("transpose", {c, r}, std::move(out), {x},
                             [r, c](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                             });
}

// [B, m, n] -> [B, n, m]
inline Tensor transpose_last2(const Tensor& x) {
  detail::require_rank("transpose_last2", x, 3);
  const std::size_t b = x.dim(0), r = x.dim(1), c = x.dim(2);
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[k * r * c + j * r + i] = x.data()[k * r * c + i * c + j];
  return detail::make_result("transpose_last2", {b, c, r}, std::move(out), {x},
                             [b, r, c](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t k = 0; k < b; ++k)
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                     gx[k * r * c + i * c + j] += g[k * r * c + j * r + i];
                             });
}

// Stacks equal-shape tensors along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("stack: no tensors");
  const Shape inner = parts.front().shape();
  const std::size_t n = parts.front().size();
  std::vector<double> out;
  out.reserve(n * parts.size());
  for (const auto& p : parts) {
    if (p.shape() != inner) {
      throw DimensionError("stack: shapes " + shape_str(inner) + " and " + shape_str(p.shape()) + " differ");
    }
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  const std::size_t count = parts.size();
  return detail::make_result("stack", std::move(shape), std::move(out), parts,
                             [n, count](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               for (std::size_t k = 0; k < count; ++k)
                                 if (double* gp = gs[k])
                                   for (std::size_t i = 0; i < n; ++i) gp[i] += g[k * n + i];
                             });
}

// Concatenates rank-2 tensors with equal column counts along rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no tensors");
  const std::size_t c = parts.front().shape().back();
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c) {
      throw DimensionError("concat_rows: shape " + shape_str(p.shape()) + " incompatible with width " +
                           std::to_string(c));
    }
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    rows += p.dim(0);
  }
  return detail::make_result("concat_rows", {rows, c}, std::move(out), parts,
                             [parts, offsets](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               for (std::size_t k = 0; k < parts.size(); ++k)
                                 if (double* gp = gs[k])
                                   for (std::size_t i = 0; i < parts[k].size(); ++i) gp[i] += g[offsets[k] + i];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

// a: [m,k] or [B,m,k]; b: [k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if ((a.rank() != 2 && a.rank() != 3) || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<double> out(m * n);
  detail::mmap(out.data(), m, n).noalias() = detail::cmap(a.data().data(), m, k) * detail::cmap(b.data().data(), k, n);
  return detail::make_result("matmul", std::move(shape), std::move(out), {a, b},
                             [a, b, m, k, n](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               auto gm = detail::cmap(g.data(), m, n);
                               if (double* ga = gs[0])
                                 detail::mmap(ga, m, k).noalias() += gm * detail::cmap(b.data().data(), k, n).transpose();
                               if (double* gb = gs[1])
                                 detail::mmap(gb, k, n).noalias() += detail::cmap(a.data().data(), m, k).transpose() * gm;
                             });
}

// Batched product: [B,m,k] x [B,k,n] -> [B,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n);
  for (std::size_t i = 0; i < bs; ++i) {
    detail::mmap(out.data() + i * m * n, m, n).noalias() =
        detail::cmap(a.data().data() + i * m * k, m, k) * detail::cmap(b.data().data() + i * k * n, k, n);
  }
  return detail::make_result(
      "bmm", {bs, m, n}, std::move(out), {a, b},
      [a, b, bs, m, k, n](const Tensor&, std::span<const double> g, const GradSink& gs) {
        for (std::size_t i = 0; i < bs; ++i) {
          auto gm = detail::cmap(g.data() + i * m * n, m, n);
          if (double* ga = gs[0])
            detail::mmap(ga + i * m * k, m, k).noalias() +=
                gm * detail::cmap(b.data().data() + i * k * n, k, n).transpose();
          if (double* gb = gs[1])
            detail::mmap(gb + i * k * n, k, n).noalias() +=
                detail::cmap(a.data().data() + i * m * k, m, k).transpose() * gm;
        }
      });
}

// Adds a [d] bias to every row of a [..., d] tensor.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const auto [rows, d] = detail::as_rows(x);
  if (bias.size() != d) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bias[j];
  return detail::make_result("add_bias", x.shape(), std::move(out), {x, bias},
                             [rows, d](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               if (double* gx = gs[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                               if (double* gb = gs[1])
                                 for (std::size_t i = 0; i < rows; ++i)
                                   for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                             });
}

// x @ w + b
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

// Multiplies row i of a rank-2 tensor by w[i].
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  detail::require_rank("scale_rows", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (w.size() != r) {
    throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " do not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= w[i];
  return detail::make_result("scale_rows", x.shape(), std::move(out), {x, w},
                             [x, w, r, c](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               if (double* gx = gs[0])
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * w[i];
                               if (double* gw = gs[1])
                                 for (std::size_t i = 0; i < r; ++i) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * x[i * c + j];
                                   gw[i] += s;
                                 }
                             });
}

// Unit L2 norm per row of a rank-2 tensor.
inline Tensor normalize_rows(const Tensor& x) {
  detail::require_rank("normalize_rows", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> norms(r), out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw DomainError("normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / norms[i];
  }
  return detail::make_result("normalize_rows", x.shape(), std::move(out), {x},
                             [r, c, norms](const Tensor& y, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < r; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                                 for (std::size_t j = 0; j < c; ++j)
                                   gx[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalizations

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.len * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.len; ++j) mx = std::max(mx, x[base + j * l.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < l.len; ++j) {
        const double e = std::exp(x[base + j * l.inner] - mx);
        out[base + j * l.inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < l.len; ++j) out[base + j * l.inner] /= s;
    }
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {x},
                             [l](const Tensor& y, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t o = 0; o < l.outer; ++o) {
                                 for (std::size_t in = 0; in < l.inner; ++in) {
                                   const std::size_t base = o * l.len * l.inner + in;
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < l.len; ++j)
                                     dot += g[base + j * l.inner] * y[base + j * l.inner];
                                   for (std::size_t j = 0; j < l.len; ++j) {
                                     const std::size_t idx = base + j * l.inner;
                                     gx[idx] += y[idx] * (g[idx] - dot);
                                   }
                                 }
                               }
                             });
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.len * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.len; ++j) mx = std::max(mx, x[base + j * l.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < l.len; ++j) s += std::exp(x[base + j * l.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < l.len; ++j) out[base + j * l.inner] = x[base + j * l.inner] - lse;
    }
  }
  return detail::make_result("log_softmax", x.shape(), std::move(out), {x},
                             [l](const Tensor& y, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t o = 0; o < l.outer; ++o) {
                                 for (std::size_t in = 0; in < l.inner; ++in) {
                                   const std::size_t base = o * l.len * l.inner + in;
                                   double gsum = 0.0;
                                   for (std::size_t j = 0; j < l.len; ++j) gsum += g[base + j * l.inner];
                                   for (std::size_t j = 0; j < l.len; ++j) {
                                     const std::size_t idx = base + j * l.inner;
                                     gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
                                   }
                                 }
                               }
                             });
}

// Normalizes over the last axis, then applies gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto [rows, d] = detail::as_rows(x);
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match last dimension of " + shape_str(x.shape()));
  }
  std::vector<double> xhat(x.size()), inv_std(rows), out(x.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = x.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    inv_std[i] = denom > 0.0 ? 1.0 / denom : 0.0;  // eps = 0 on a constant row
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      out[i * d + j] = gamma[j] * xhat[i * d + j] + beta[j];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, gamma, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const Tensor&, std::span<const double> g, const GradSink& gs) {
        if (double* gx = gs[0]) {
          for (std::size_t i = 0; i < rows; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gamma[j];
              s1 += gh;
              s2 += gh * xhat[i * d + j];
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gamma[j];
              gx[i * d + j] += inv_std[i] * (gh - inv_d * s1 - xhat[i * d + j] * inv_d * s2);
            }
          }
        }
        if (double* gg = gs[1])
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
        if (double* gb = gs[2])
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      });
}

// ---------------------------------------------------------------------------
// Indexing

// Rows `idx` of a rank-2 tensor.
inline Tensor gather_rows(const Tensor& x, const IndexList& idx) {
  detail::require_rank("gather_rows", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (idx.empty()) throw ArgumentError("gather_rows: empty index list");
  std::vector<double> out(idx.size() * c);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= r) throw ArgumentError("gather_rows: row " + std::to_string(idx[k]) + " out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(idx[k] * c), c, out.begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  return detail::make_result("gather_rows", {idx.size(), c}, std::move(out), {x},
                             [idx, c](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t k = 0; k < idx.size(); ++k)
                                 for (std::size_t j = 0; j < c; ++j) gx[idx[k] * c + j] += g[k * c + j];
                             });
}

// base with src row k added into row idx[k].
inline Tensor index_add_rows(const Tensor& base, const IndexList& idx, const Tensor& src) {
  detail::require_rank("index_add_rows", base, 2);
  detail::require_rank("index_add_rows", src, 2);
  const std::size_t r = base.dim(0), c = base.dim(1);
  if (src.dim(1) != c || src.dim(0) != idx.size()) {
    throw DimensionError("index_add_rows: source " + shape_str(src.shape()) + " incompatible with base " +
                         shape_str(base.shape()));
  }
  std::vector<double> out(base.data());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= r) throw ArgumentError("index_add_rows: row " + std::to_string(idx[k]) + " out of range");
    for (std::size_t j = 0; j < c; ++j) out[idx[k] * c + j] += src[k * c + j];
  }
  return detail::make_result("index_add_rows", base.shape(), std::move(out), {base, src},
                             [idx, c](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               if (double* gb = gs[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                               if (double* gsrc = gs[1])
                                 for (std::size_t k = 0; k < idx.size(); ++k)
                                   for (std::size_t j = 0; j < c; ++j) gsrc[k * c + j] += g[idx[k] * c + j];
                             });
}

// Per-row column selection: [r, n] -> [r, K] with out[i][k] = x[i][cols[i][k]].
inline Tensor gather_cols(const Tensor& x, const std::vector<IndexList>& cols) {
  detail::require_rank("gather_cols", x, 2);
  const std::size_t r = x.dim(0), n = x.dim(1);
  if (cols.size() != r || cols.empty()) throw DimensionError("gather_cols: index rows do not match tensor rows");
  const std::size_t k = cols.front().size();
  std::vector<double> out(r * k);
  for (std::size_t i = 0; i < r; ++i) {
    if (cols[i].size() != k) throw DimensionError("gather_cols: ragged index rows");
    for (std::size_t j = 0; j < k; ++j) {
      if (cols[i][j] >= n) throw ArgumentError("gather_cols: column out of range");
      out[i * k + j] = x[i * n + cols[i][j]];
    }
  }
  return detail::make_result("gather_cols", {r, k}, std::move(out), {x},
                             [cols, r, n, k](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < k; ++j) gx[i * n + cols[i][j]] += g[i * k + j];
                             });
}

// Inverse placement of gather_cols into a zero [r, n] tensor.
inline Tensor scatter_cols(const Tensor& x, const std::vector<IndexList>& cols, std::size_t n) {
  detail::require_rank("scatter_cols", x, 2);
  const std::size_t r = x.dim(0), k = x.dim(1);
  if (cols.size() != r) throw DimensionError("scatter_cols: index rows do not match tensor rows");
  std::vector<double> out(r * n, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    if (cols[i].size() != k) throw DimensionError("scatter_cols: ragged index rows");
    for (std::size_t j = 0; j < k; ++j) {
      if (cols[i][j] >= n) throw ArgumentError("scatter_cols: column out of range");
      out[i * n + cols[i][j]] = x[i * k + j];
    }
  }
  return detail::make_result("scatter_cols", {r, n}, std::move(out), {x},
                             [cols, r, n, k](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += g[i * n + cols[i][j]];
                             });
}

// x[rows[k], col] for each k -> [len(rows)].
inline Tensor gather_entries(const Tensor& x, const IndexList& rows, std::size_t col) {
  detail::require_rank("gather_entries", x, 2);
  const std::size_t n = x.dim(1);
  if (col >= n || rows.empty()) throw ArgumentError("gather_entries: column out of range or no rows");
  std::vector<double> out(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= x.dim(0)) throw ArgumentError("gather_entries: row out of range");
    out[k] = x[rows[k] * n + col];
  }
  return detail::make_result("gather_entries", {rows.size()}, std::move(out), {x},
                             [rows, col, n](const Tensor&, std::span<const double> g, const GradSink& gs) {
                               double* gx = gs[0];
                               for (std::size_t k = 0; k < rows.size(); ++k) gx[rows[k] * n + col] += g[k];
                             });
}

// [B*T, H*dh] -> [B*H, T, dh]
inline Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const std::size_t d = x.shape().back();
  if (x.size() != batch * tokens * d || d % heads != 0) {
    throw DimensionError("split_heads: shape " + shape_str(x.shape()) + " incompatible with batch/tokens/heads");
  }
  const std::size_t dh = d / heads;
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t e = 0; e < dh; ++e)
          out[((b * heads + h) * tokens + t) * dh + e] = x[(b * tokens + t) * d + h * dh + e];
  return detail::make_result(
      "split_heads", {batch * heads, tokens, dh}, std::move(out), {x},
      [batch, tokens, heads, dh, d](const Tensor&, std::span<const double> g, const GradSink& gs) {
        double* gx = gs[0];
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t h = 0; h < heads; ++h)
              for (std::size_t e = 0; e < dh; ++e)
                gx[(b * tokens + t) * d + h * dh + e] += g[((b * heads + h) * tokens + t) * dh + e];
      });
}

// [B*H, T, dh] -> [B*T, H*dh]
inline Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  detail::require_rank("merge_heads", x, 3);
  if (x.dim(0) != batch * heads) throw DimensionError("merge_heads: leading axis is not batch*heads");
  const std::size_t tokens = x.dim(1), dh = x.dim(2), d = heads * dh;
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t e = 0; e < dh; ++e)
          out[(b * tokens + t) * d + h * dh + e] = x[((b * heads + h) * tokens + t) * dh + e];
  return detail::make_result(
      "merge_heads", {batch * tokens, d}, std::move(out), {x},
      [batch, tokens, heads, dh, d](const Tensor&, std::span<const double> g, const GradSink& gs) {
        double* gx = gs[0];
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t h = 0; h < heads; ++h)
              for (std::size_t e = 0; e < dh; ++e)
                gx[((b * heads + h) * tokens + t) * dh + e] += g[(b * tokens + t) * d + h * dh + e];
      });
}

// ---------------------------------------------------------------------------
// Selection (non-differentiable)

// Indices of the k largest values in descending value order, ties broken by
// lowest index.
inline IndexList topk_indices(std::span<const double> x, std::size_t k) {
  if (k < 1 || k > x.size()) {
    throw ArgumentError("topk_indices: k=" + std::to_string(k) + " outside [1, " + std::to_string(x.size()) + "]");
  }
  IndexList idx(x.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](Index a, Index b) {
    if (x[a] != x[b]) return x[a] > x[b];
    return a < b;
  });
  idx.resize(k);
  return idx;
}

inline IndexList topk_indices(const Tensor& x, std::size_t k) {
  if (x.rank() != 1) throw DimensionError("topk_indices: expected rank-1 tensor, got " + shape_str(x.shape()));
  return topk_indices(std::span<const double>(x.data()), k);
}

}  // namespace dmadapter
