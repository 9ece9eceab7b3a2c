#include "upm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "upm/error.hpp"

namespace upm {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

/// Gradient buffer of `in`, or null when `in` does not track gradients.
double* grad_of(const ImplPtr& in) {
  return in->requires_grad ? in->ensure_grad().data() : nullptr;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// c[m×n] += a[m×k] · b[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

struct AxisLayout {
  std::size_t outer, n, inner;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis out of range for " + shape_string(shape));
  AxisLayout l{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i * stride]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - mx);
  return mx + std::log(s);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result({m, n}, std::move(out), {a, b}, "matmul",
                     [ai, bi, m, k, n](const TensorImpl& o) {
                       if (double* ga = grad_of(ai)) gemm_nt(o.grad.data(), bi->data.data(), ga, m, n, k);
                       if (double* gb = grad_of(bi)) gemm_tn(ai->data.data(), o.grad.data(), gb, m, k, n);
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result({m, n}, std::move(out), {a, b}, "matmul_nt",
                     [ai, bi, m, k, n](const TensorImpl& o) {
                       // dA = dC·B, dB = dCᵀ·A
                       if (double* ga = grad_of(ai)) gemm_nn(o.grad.data(), bi->data.data(), ga, m, n, k);
                       if (double* gb = grad_of(bi)) gemm_tn(o.grad.data(), ai->data.data(), gb, m, n, k);
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  ImplPtr ai = a.impl();
  return make_result({n, m}, std::move(out), {a}, "transpose", [ai, m, n](const TensorImpl& o) {
    if (double* g = grad_of(ai))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, "add", [ai, bi](const TensorImpl& o) {
    for (const auto& in : {ai, bi})
      if (double* g = grad_of(in))
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [ai, bi](const TensorImpl& o) {
    if (double* g = grad_of(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (double* g = grad_of(bi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [ai, bi](const TensorImpl& o) {
    if (double* g = grad_of(ai))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi->data[i];
    if (double* g = grad_of(bi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai->data[i];
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, "scale", [xi, factor](const TensorImpl& o) {
    if (double* g = grad_of(xi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("div_scalar: divisor must hold one element");
  const double d = s.data()[0];
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v /= d;
  ImplPtr xi = x.impl(), si = s.impl();
  return make_result(x.shape(), std::move(out), {x, s}, "div_scalar",
                     [xi, si](const TensorImpl& o) {
                       const double d = si->data[0];
                       if (double* g = grad_of(xi))
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / d;
                       if (double* g = grad_of(si)) {
                         // d(x/d)/dd = -x/d² = -out/d
                         double acc = 0.0;
                         for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * o.data[i];
                         g[0] -= acc / d;
                       }
                     });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, "exp", [xi](const TensorImpl& o) {
    if (double* g = grad_of(xi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * o.data[i];
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xs[i] * (1.0 + std::erf(xs[i] * std::numbers::sqrt2 / 2.0));
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, "gelu", [xi](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double v = xi->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        g[i] += o.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  const std::size_t n = x.cols();
  if (row.size() != n) {
    throw ShapeError("add_row: row of " + std::to_string(row.size()) + " values for " +
                     shape_string(x.shape()));
  }
  const std::size_t m = x.size() / n;
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
  ImplPtr xi = x.impl(), ri = row.impl();
  return make_result(x.shape(), std::move(out), {x, row}, "add_row",
                     [xi, ri, m, n](const TensorImpl& o) {
                       if (double* g = grad_of(xi))
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                       if (double* g = grad_of(ri))
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
                     });
}

Tensor add_tiled(const Tensor& x, const Tensor& tile) {
  require_rank2(x, "add_tiled");
  require_rank2(tile, "add_tiled");
  const std::size_t r = tile.dim(0), n = tile.dim(1);
  if (x.dim(1) != n || x.dim(0) % r != 0) {
    throw ShapeError("add_tiled: " + shape_string(x.shape()) + " is not a stack of " +
                     shape_string(tile.shape()));
  }
  const std::size_t block = r * n;
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto t = tile.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i % block];
  ImplPtr xi = x.impl(), ti = tile.impl();
  return make_result(x.shape(), std::move(out), {x, tile}, "add_tiled",
                     [xi, ti, block](const TensorImpl& o) {
                       if (double* g = grad_of(xi))
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                       if (double* g = grad_of(ti))
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % block] += o.grad[i];
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (const double v : x.data()) s += v;
  ImplPtr xi = x.impl();
  return make_result({1}, {s}, {x}, "sum", [xi](const TensorImpl& o) {
    if (double* g = grad_of(xi))
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result({1}, {s}, {a, b}, "dot", [ai, bi](const TensorImpl& o) {
    if (double* g = grad_of(ai))
      for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += o.grad[0] * bi->data[i];
    if (double* g = grad_of(bi))
      for (std::size_t i = 0; i < bi->data.size(); ++i) g[i] += o.grad[0] * ai->data[i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis);
  std::vector<double> out(x.size());
  const auto xs = x.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.n; ++k) mx = std::max(mx, xs[base + k * l.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < l.n; ++k) {
        const double e = std::exp(xs[base + k * l.inner] - mx);
        out[base + k * l.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < l.n; ++k) out[base + k * l.inner] /= s;
    }
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, "softmax", [xi, l](const TensorImpl& o) {
    double* g = grad_of(xi);
    if (!g) return;
    for (std::size_t a = 0; a < l.outer; ++a) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = a * l.n * l.inner + in;
        double dotp = 0.0;
        for (std::size_t k = 0; k < l.n; ++k) {
          const std::size_t idx = base + k * l.inner;
          dotp += o.grad[idx] * o.data[idx];
        }
        for (std::size_t k = 0; k < l.n; ++k) {
          const std::size_t idx = base + k * l.inner;
          g[idx] += o.data[idx] * (o.grad[idx] - dotp);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis);
  std::vector<double> out(x.size());
  const auto xs = x.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      const double lse = log_sum_exp(xs.data() + base, l.n, l.inner);
      for (std::size_t k = 0; k < l.n; ++k) out[base + k * l.inner] = xs[base + k * l.inner] - lse;
    }
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, "log_softmax", [xi, l](const TensorImpl& o) {
    double* g = grad_of(xi);
    if (!g) return;
    for (std::size_t a = 0; a < l.outer; ++a) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = a * l.n * l.inner + in;
        double gsum = 0.0;
        for (std::size_t k = 0; k < l.n; ++k) gsum += o.grad[base + k * l.inner];
        for (std::size_t k = 0; k < l.n; ++k) {
          const std::size_t idx = base + k * l.inner;
          g[idx] += o.grad[idx] - std::exp(o.data[idx]) * gsum;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be > 0");
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: gamma/beta size mismatch");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  const auto xs = x.data();
  const auto gs = gamma.data();
  const auto bs = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gs[j] + bs[j];
    }
  }
  ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [xi, gi, bi, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorImpl& o) {
        double* gx = grad_of(xi);
        double* gg = grad_of(gi);
        double* gb = grad_of(bi);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = o.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          if (gg)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * h[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
          if (gx) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[j] * gi->data[j];
              s1 += dh;
              s2 += dh * h[j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[j] * gi->data[j];
              gx[r * d + j] += inv_std[r] * (dh - inv_d * s1 - h[j] * inv_d * s2);
            }
          }
        }
      });
}

Tensor l2_normalize_rows(const Tensor& x) {
  const std::size_t d = x.cols();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> norms(rows);
  const auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xs[r * d + j] * xs[r * d + j];
    const double nrm = std::sqrt(s);
    if (!(nrm >= 1e-12)) {
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(r) +
                                 " has norm below 1e-12");
    }
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xs[r * d + j] / nrm;
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, "l2_normalize_rows",
                     [xi, d, rows, norms = std::move(norms)](const TensorImpl& o) {
                       double* g = grad_of(xi);
                       if (!g) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = o.data.data() + r * d;
                         const double* dy = o.grad.data() + r * d;
                         double proj = 0.0;
                         for (std::size_t j = 0; j < d; ++j) proj += dy[j] * y[j];
                         for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (dy[j] - proj * y[j]) / norms[r];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  ImplPtr xi = x.impl();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                     "reshape", [xi](const TensorImpl& o) {
                       if (double* g = grad_of(xi))
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  if (count == 0 || begin + count > rows) throw ShapeError("slice_rows: range out of bounds");
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  ImplPtr xi = x.impl();
  return make_result({count, n}, std::move(out), {x}, "slice_rows",
                     [xi, begin, n](const TensorImpl& o) {
                       if (double* g = grad_of(xi))
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * n + i] += o.grad[i];
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  std::vector<double> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ContractError("gather_rows: index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  ImplPtr xi = x.impl();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result({indices.size(), n}, std::move(out), {x}, "gather_rows",
                     [xi, n, idx = std::move(idx)](const TensorImpl& o) {
                       if (double* g = grad_of(xi))
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += o.grad[i * n + j];
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    rows += p.size() / n;
  }
  std::vector<double> out;
  out.reserve(rows * n);
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    impls.push_back(p.impl());
  }
  return make_result({rows, n}, std::move(out), parts, "concat_rows",
                     [impls = std::move(impls)](const TensorImpl& o) {
                       std::size_t offset = 0;
                       for (const auto& in : impls) {
                         if (double* g = grad_of(in))
                           for (std::size_t i = 0; i < in->data.size(); ++i) g[i] += o.grad[offset + i];
                         offset += in->data.size();
                       }
                     });
}

Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> group_sizes) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  std::size_t total = 0;
  for (const auto s : group_sizes) {
    if (s == 0) throw DegenerateInputError("segment_mean_rows: empty group");
    total += s;
  }
  if (group_sizes.empty() || total != rows) throw ShapeError("segment_mean_rows: groups do not cover rows");
  std::vector<double> out(group_sizes.size() * n, 0.0);
  const auto xs = x.data();
  std::size_t r = 0;
  for (std::size_t gidx = 0; gidx < group_sizes.size(); ++gidx) {
    for (std::size_t k = 0; k < group_sizes[gidx]; ++k, ++r)
      for (std::size_t j = 0; j < n; ++j) out[gidx * n + j] += xs[r * n + j];
    for (std::size_t j = 0; j < n; ++j) out[gidx * n + j] /= static_cast<double>(group_sizes[gidx]);
  }
  ImplPtr xi = x.impl();
  std::vector<std::size_t> sizes(group_sizes.begin(), group_sizes.end());
  return make_result({group_sizes.size(), n}, std::move(out), {x}, "segment_mean_rows",
                     [xi, n, sizes = std::move(sizes)](const TensorImpl& o) {
                       double* g = grad_of(xi);
                       if (!g) return;
                       std::size_t row = 0;
                       for (std::size_t gidx = 0; gidx < sizes.size(); ++gidx) {
                         const double w = 1.0 / static_cast<double>(sizes[gidx]);
                         for (std::size_t k = 0; k < sizes[gidx]; ++k, ++row)
                           for (std::size_t j = 0; j < n; ++j) g[row * n + j] += o.grad[gidx * n + j] * w;
                       }
                     });
}

Tensor prepend_token(const Tensor& x, const Tensor& token, std::size_t group) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  if (token.size() != n) throw ShapeError("prepend_token: token width mismatch");
  if (group == 0 || rows % group != 0) throw ShapeError("prepend_token: rows not divisible by group");
  const std::size_t groups = rows / group;
  std::vector<double> out;
  out.reserve((rows + groups) * n);
  const auto xs = x.data();
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    out.insert(out.end(), token.data().begin(), token.data().end());
    out.insert(out.end(), xs.begin() + static_cast<std::ptrdiff_t>(gidx * group * n),
               xs.begin() + static_cast<std::ptrdiff_t>((gidx + 1) * group * n));
  }
  ImplPtr xi = x.impl(), ti = token.impl();
  return make_result({rows + groups, n}, std::move(out), {x, token}, "prepend_token",
                     [xi, ti, n, group, groups](const TensorImpl& o) {
                       double* gx = grad_of(xi);
                       double* gt = grad_of(ti);
                       for (std::size_t gidx = 0; gidx < groups; ++gidx) {
                         const double* src = o.grad.data() + gidx * (group + 1) * n;
                         if (gt)
                           for (std::size_t j = 0; j < n; ++j) gt[j] += src[j];
                         if (gx)
                           for (std::size_t i = 0; i < group * n; ++i) gx[gidx * group * n + i] += src[n + i];
                       }
                     });
}

Tensor multi_head_attention(const Tensor& qkv, std::size_t seq_len, std::size_t heads) {
  require_rank2(qkv, "multi_head_attention");
  const std::size_t rows = qkv.dim(0);
  const std::size_t width = qkv.dim(1);
  if (width % 3 != 0) throw ShapeError("multi_head_attention: width must be 3·d");
  const std::size_t d = width / 3;
  if (heads == 0 || d % heads != 0) throw ShapeError("multi_head_attention: d not divisible by heads");
  if (seq_len == 0 || rows % seq_len != 0) throw ShapeError("multi_head_attention: rows not divisible by seq_len");
  const std::size_t dh = d / heads;
  const std::size_t seqs = rows / seq_len;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto x = qkv.data();

  // probs[s][h] is an L×L row-stochastic matrix.
  std::vector<double> probs(seqs * heads * seq_len * seq_len);
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t s = 0; s < seqs; ++s) {
    const std::size_t r0 = s * seq_len;
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (s * heads + h) * seq_len * seq_len;
      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const double* qi = x.data() + (r0 + i) * width + qo;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double* kj = x.data() + (r0 + j) * width + ko;
          double sdot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) sdot += qi[c] * kj[c];
          p[i * seq_len + j] = sdot * inv_sqrt;
          mx = std::max(mx, p[i * seq_len + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq_len; ++j) {
          p[i * seq_len + j] = std::exp(p[i * seq_len + j] - mx);
          z += p[i * seq_len + j];
        }
        for (std::size_t j = 0; j < seq_len; ++j) p[i * seq_len + j] /= z;
        double* oi = out.data() + (r0 + i) * d + h * dh;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double pij = p[i * seq_len + j];
          const double* vj = x.data() + (r0 + j) * width + vo;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  ImplPtr xi = qkv.impl();
  return make_result(
      {rows, d}, std::move(out), {qkv}, "multi_head_attention",
      [xi, seq_len, heads, seqs, d, dh, width, inv_sqrt, probs = std::move(probs)](const TensorImpl& o) {
        double* g = grad_of(xi);
        if (!g) return;
        const double* xd = xi->data.data();
        std::vector<double> dp(seq_len * seq_len);
        for (std::size_t s = 0; s < seqs; ++s) {
          const std::size_t r0 = s * seq_len;
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (s * heads + h) * seq_len * seq_len;
            const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            // dV[j] += Σ_i P[i,j] dO[i];  dP[i,j] = dO[i]·V[j]
            for (std::size_t i = 0; i < seq_len; ++i) {
              const double* doi = o.grad.data() + (r0 + i) * d + h * dh;
              for (std::size_t j = 0; j < seq_len; ++j) {
                const double* vj = xd + (r0 + j) * width + vo;
                double* gvj = g + (r0 + j) * width + vo;
                const double pij = p[i * seq_len + j];
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  gvj[c] += pij * doi[c];
                  acc += doi[c] * vj[c];
                }
                dp[i * seq_len + j] = acc;
              }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then through the scaled dot product.
            for (std::size_t i = 0; i < seq_len; ++i) {
              double rs = 0.0;
              for (std::size_t j = 0; j < seq_len; ++j) rs += dp[i * seq_len + j] * p[i * seq_len + j];
              const double* qi = xd + (r0 + i) * width + qo;
              double* gqi = g + (r0 + i) * width + qo;
              for (std::size_t j = 0; j < seq_len; ++j) {
                const double ds = p[i * seq_len + j] * (dp[i * seq_len + j] - rs) * inv_sqrt;
                const double* kj = xd + (r0 + j) * width + ko;
                double* gkj = g + (r0 + j) * width + ko;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Tensor embedding_bag_mean(const Tensor& table, const std::vector<std::vector<std::size_t>>& bags) {
  require_rank2(table, "embedding_bag_mean");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (bags.empty()) throw ShapeError("embedding_bag_mean: no bags");
  std::vector<double> out(bags.size() * d, 0.0);
  const auto t = table.data();
  for (std::size_t b = 0; b < bags.size(); ++b) {
    if (bags[b].empty()) throw DegenerateInputError("embedding_bag_mean: empty bag");
    for (const auto id : bags[b]) {
      if (id >= vocab) throw ContractError("embedding_bag_mean: token id out of range");
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += t[id * d + j];
    }
    const double inv = 1.0 / static_cast<double>(bags[b].size());
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] *= inv;
  }
  ImplPtr ti = table.impl();
  return make_result({bags.size(), d}, std::move(out), {table}, "embedding_bag_mean",
                     [ti, d, bags](const TensorImpl& o) {
                       double* g = grad_of(ti);
                       if (!g) return;
                       for (std::size_t b = 0; b < bags.size(); ++b) {
                         const double inv = 1.0 / static_cast<double>(bags[b].size());
                         for (const auto id : bags[b])
                           for (std::size_t j = 0; j < d; ++j) g[id * d + j] += o.grad[b * d + j] * inv;
                       }
                     });
}

Tensor soft_cross_entropy(const Tensor& logits, std::span<const double> targets,
                          std::span<const unsigned char> mask) {
  require_rank2(logits, "soft_cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != logits.size()) throw ShapeError("soft_cross_entropy: target size mismatch");
  if (!mask.empty() && mask.size() != logits.size()) throw ShapeError("soft_cross_entropy: mask size mismatch");
  const auto x = logits.data();
  auto active = [&](std::size_t idx) { return mask.empty() || mask[idx] != 0; };

  std::vector<double> lse(rows, 0.0);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!active(r * cols + c)) continue;
      mx = std::max(mx, x[r * cols + c]);
      any = true;
    }
    if (!any) continue;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (active(r * cols + c)) s += std::exp(x[r * cols + c] - mx);
    lse[r] = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t idx = r * cols + c;
      if (!active(idx)) {
        if (targets[idx] != 0.0) throw ContractError("soft_cross_entropy: masked entry has nonzero target");
        continue;
      }
      loss += targets[idx] * (lse[r] - x[idx]);
    }
  }
  ImplPtr li = logits.impl();
  std::vector<double> tgt(targets.begin(), targets.end());
  std::vector<unsigned char> msk(mask.begin(), mask.end());
  return make_result({1}, {loss}, {logits}, "soft_cross_entropy",
                     [li, rows, cols, lse = std::move(lse), tgt = std::move(tgt),
                      msk = std::move(msk)](const TensorImpl& o) {
                       double* g = grad_of(li);
                       if (!g) return;
                       const double up = o.grad[0];
                       for (std::size_t r = 0; r < rows; ++r) {
                         double tsum = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) tsum += tgt[r * cols + c];
                         for (std::size_t c = 0; c < cols; ++c) {
                           const std::size_t idx = r * cols + c;
                           if (!msk.empty() && msk[idx] == 0) continue;
                           const double q = std::exp(li->data[idx] - lse[r]);
                           g[idx] += up * (q * tsum - tgt[idx]);
                         }
                       }
                     });
}

Tensor pair_cross_entropy(const Tensor& logits,
                          std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  require_rank2(logits, "pair_cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto x = logits.data();
  std::vector<double> row_lse(rows), col_lse(cols);
  for (std::size_t r = 0; r < rows; ++r) row_lse[r] = log_sum_exp(x.data() + r * cols, cols, 1);
  for (std::size_t c = 0; c < cols; ++c) col_lse[c] = log_sum_exp(x.data() + c, rows, cols);
  double loss = 0.0;
  for (const auto& [i, j] : pairs) {
    if (i >= rows || j >= cols) {
      throw ContractError("pair_cross_entropy: pair (" + std::to_string(i) + "," + std::to_string(j) +
                          ") outside " + shape_string(logits.shape()));
    }
    const double l = x[i * cols + j];
    loss += (row_lse[i] - l) + (col_lse[j] - l);
  }
  ImplPtr li = logits.impl();
  std::vector<std::pair<std::size_t, std::size_t>> pv(pairs.begin(), pairs.end());
  return make_result({1}, {loss}, {logits}, "pair_cross_entropy",
                     [li, rows, cols, row_lse = std::move(row_lse), col_lse = std::move(col_lse),
                      pv = std::move(pv)](const TensorImpl& o) {
                       double* g = grad_of(li);
                       if (!g) return;
                       const double up = o.grad[0];
                       const double* xd = li->data.data();
                       std::vector<double> row_w(rows, 0.0), col_w(cols, 0.0);
                       for (const auto& [i, j] : pv) {
                         row_w[i] += 1.0;
                         col_w[j] += 1.0;
                         g[i * cols + j] -= 2.0 * up;
                       }
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < cols; ++c) {
                           double w = 0.0;
                           if (row_w[r] != 0.0) w += row_w[r] * std::exp(xd[r * cols + c] - row_lse[r]);
                           if (col_w[c] != 0.0) w += col_w[c] * std::exp(xd[r * cols + c] - col_lse[c]);
                           g[r * cols + c] += up * w;
                         }
                       }
                     });
}

}  // namespace upm
