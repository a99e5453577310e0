#include "quadformer/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numbers>

#include "quadformer/parallel.hpp"

namespace qf {

namespace {

std::atomic<Fault> g_fault{Fault::kNone};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(a.shape()));
  }
}

Tensor finish(Tensor out, const char* op) {
  check_finite(out, op);
  return out;
}

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// C[m×n] += A[m×k]·B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_for(m, 64 * 1024 / std::max<std::size_t>(1, k * n) + 1,
               [=](std::size_t r0, std::size_t r1) {
                 for (std::size_t i = r0; i < r1; ++i) {
                   double* ci = c + i * n;
                   const double* ai = a + i * k;
                   for (std::size_t p = 0; p < k; ++p) {
                     const double av = ai[p];
                     if (av == 0.0) continue;
                     const double* bp = b + p * n;
                     for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
                   }
                 }
               });
}

// A[m×k] += G[m×n]·B[k×n]ᵀ
void gemm_nt(const double* g, const double* b, double* a, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_for(m, 64 * 1024 / std::max<std::size_t>(1, k * n) + 1,
               [=](std::size_t r0, std::size_t r1) {
                 for (std::size_t i = r0; i < r1; ++i) {
                   const double* gi = g + i * n;
                   double* ai = a + i * k;
                   for (std::size_t p = 0; p < k; ++p) {
                     const double* bp = b + p * n;
                     double s = 0.0;
                     for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
                     ai[p] += s;
                   }
                 }
               });
}

// B[k×n] += A[m×k]ᵀ·G[m×n]
void gemm_tn(const double* a, const double* g, double* b, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_for(k, 64 * 1024 / std::max<std::size_t>(1, m * n) + 1,
               [=](std::size_t p0, std::size_t p1) {
                 for (std::size_t i = 0; i < m; ++i) {
                   const double* gi = g + i * n;
                   const double* ai = a + i * k;
                   for (std::size_t p = p0; p < p1; ++p) {
                     const double av = ai[p];
                     if (av == 0.0) continue;
                     double* bp = b + p * n;
                     for (std::size_t j = 0; j < n; ++j) bp[j] += av * gi[j];
                   }
                 }
               });
}

}  // namespace

void inject_fault(Fault f) { g_fault.store(f); }
Fault active_fault() { return g_fault.load(); }

std::size_t thread_budget() {
  static const std::size_t budget = [] {
    if (const char* env = std::getenv("QF_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }();
  return budget;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  return Tape::record(finish(std::move(out), "add"), {&a, &b},
                      [](std::span<const double> g, std::span<const std::span<double>> gi) {
                        if (!gi[0].empty()) accumulate(gi[0], g);
                        if (!gi[1].empty()) accumulate(gi[1], g);
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  return Tape::record(finish(std::move(out), "sub"), {&a, &b},
                      [](std::span<const double> g, std::span<const std::span<double>> gi) {
                        if (!gi[0].empty()) accumulate(gi[0], g);
                        if (!gi[1].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
                        }
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  return Tape::record(finish(std::move(out), "mul"), {&a, &b},
                      [av = a.detach(), bv = b.detach()](std::span<const double> g,
                                                          std::span<const std::span<double>> gi) {
                        if (!gi[0].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * bv[i];
                        }
                        if (!gi[1].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * av[i];
                        }
                      });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * s;
  return Tape::record(finish(std::move(out), "scale"), {&a},
                      [s](std::span<const double> g, std::span<const std::span<double>> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * s;
                      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tape::record(finish(Tensor::scalar(s), "sum"), {&a},
                      [](std::span<const double> g, std::span<const std::span<double>> gi) {
                        for (double& v : gi[0]) v += g[0];
                      });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tape::record(finish(Tensor::scalar(s / n), "mean"), {&a},
                      [n](std::span<const double> g, std::span<const std::span<double>> gi) {
                        for (double& v : gi[0]) v += g[0] / n;
                      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  Tensor out = a.detach().with_shape(std::move(shape));
  return Tape::record(std::move(out), {&a},
                      [](std::span<const double> g, std::span<const std::span<double>> gi) {
                        accumulate(gi[0], g);
                      });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out(Shape{c, r});
  auto o = out.mutable_values();
  const double* x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = x[i * c + j];
  return Tape::record(std::move(out), {&a},
                      [r, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
                      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2], n = b.shape()[b.rank() - 1];
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  const bool broadcast_b = lead_b.empty();
  if (k != kb || (!broadcast_b && lead_a != lead_b)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t batch = numel(lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  auto o = out.mutable_values();
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(a.data() + t * m * k, b.data() + (broadcast_b ? 0 : t * k * n), o.data() + t * m * n,
            m, k, n);
  }
  return Tape::record(
      finish(std::move(out), "matmul"), {&a, &b},
      [av = a.detach(), bv = b.detach(), batch, m, k, n, broadcast_b](
          std::span<const double> g, std::span<const std::span<double>> gi) {
        for (std::size_t t = 0; t < batch; ++t) {
          const double* gt = g.data() + t * m * n;
          const std::size_t boff = broadcast_b ? 0 : t * k * n;
          if (!gi[0].empty()) gemm_nt(gt, bv.data() + boff, gi[0].data() + t * m * k, m, k, n);
          if (!gi[1].empty()) gemm_tn(av.data() + t * m * k, gt, gi[1].data() + boff, m, k, n);
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t rows = x.dim(0), in = x.dim(1), outc = w.dim(1);
  if (w.dim(0) != in || bias.shape() != Shape{outc}) {
    throw ShapeError("linear: x " + to_string(x.shape()) + ", w " + to_string(w.shape()) +
                     ", bias " + to_string(bias.shape()));
  }
  Tensor out(Shape{rows, outc});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(bias.values().begin(), bias.values().end(), o.begin() + i * outc);
  gemm_nn(x.data(), w.data(), o.data(), rows, in, outc);
  return Tape::record(finish(std::move(out), "linear"), {&x, &w, &bias},
                      [xv = x.detach(), wv = w.detach(), rows, in, outc](
                          std::span<const double> g, std::span<const std::span<double>> gi) {
                        if (!gi[0].empty()) gemm_nt(g.data(), wv.data(), gi[0].data(), rows, in, outc);
                        if (!gi[1].empty()) gemm_tn(xv.data(), g.data(), gi[1].data(), rows, in, outc);
                        if (!gi[2].empty()) {
                          // the injected fault is an off-by-one that skips the first row
                          const std::size_t first = active_fault() == Fault::kLinearBackward ? 1 : 0;
                          for (std::size_t i = first; i < rows; ++i)
                            for (std::size_t j = 0; j < outc; ++j) gi[2][j] += g[i * outc + j];
                        }
                      });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw ShapeError("concat_cols: incompatible part " + to_string(p.shape()));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Tensor out(Shape{rows, total});
  auto o = out.mutable_values();
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].data();
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(src + i * widths[k], src + (i + 1) * widths[k], o.begin() + i * total + off);
    off += widths[k];
  }
  return Tape::record(std::move(out), parts,
                      [widths, rows, total](std::span<const double> g,
                                            std::span<const std::span<double>> gi) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          if (!gi[k].empty()) {
                            for (std::size_t i = 0; i < rows; ++i)
                              for (std::size_t j = 0; j < widths[k]; ++j)
                                gi[k][i * widths[k] + j] += g[i * total + off + j];
                          }
                          off += widths[k];
                        }
                      });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() == 0) throw ShapeError("softmax: empty last dim");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * n;
    double* oi = o.data() + r * n;
    const double mx = *std::max_element(xi, xi + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (oi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) oi[j] /= s;
  }
  Tensor result = finish(std::move(out), "softmax");
  return Tape::record(result, {&x},
                      [p = result.detach(), rows, n](std::span<const double> g,
                                                     std::span<const std::span<double>> gi) {
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* pr = p.data() + r * n;
                          const double* gr = g.data() + r * n;
                          double dot = 0.0;
                          for (std::size_t j = 0; j < n; ++j) dot += pr[j] * gr[j];
                          for (std::size_t j = 0; j < n; ++j) gi[0][r * n + j] += pr[j] * (gr[j] - dot);
                        }
                      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: x " + to_string(x.shape()) + ", gamma " +
                     to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  const std::size_t rows = x.size() / c;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  auto o = out.mutable_values();
  auto xh = xhat.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xh[r * c + j] = (xi[j] - mu) * is;
      o[r * c + j] = xh[r * c + j] * gamma[j] + beta[j];
    }
  }
  return Tape::record(
      finish(std::move(out), "layer_norm"), {&x, &gamma, &beta},
      [xhat, gv = gamma.detach(), inv_std = std::move(inv_std), rows, c](
          std::span<const double> g, std::span<const std::span<double>> gi) {
        const double cn = static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* hr = xhat.data() + r * c;
          if (!gi[0].empty()) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = gr[j] * gv[j];
              m1 += d;
              m2 += d * hr[j];
            }
            m1 /= cn;
            m2 /= cn;
            for (std::size_t j = 0; j < c; ++j)
              gi[0][r * c + j] += inv_std[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
          }
          if (!gi[1].empty())
            for (std::size_t j = 0; j < c; ++j) gi[1][j] += gr[j] * hr[j];
          if (!gi[2].empty())
            for (std::size_t j = 0; j < c; ++j) gi[2][j] += gr[j];
        }
      });
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = x[i] * 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  }
  return Tape::record(finish(std::move(out), "gelu"), {&x},
                      [xv = x.detach()](std::span<const double> g,
                                        std::span<const std::span<double>> gi) {
                        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
                        const double skew = active_fault() == Fault::kGeluBackward ? 1.05 : 1.0;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double v = xv[i];
                          const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                          gi[0][i] += g[i] * (cdf + v * pdf) * skew;
                        }
                      });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  Tensor out(x.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  return Tape::record(std::move(out), {&x},
                      [xv = x.detach(), slope](std::span<const double> g,
                                               std::span<const std::span<double>> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i)
                          gi[0][i] += xv[i] > 0.0 ? g[i] : slope * g[i];
                      });
}

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                     const char* op, const Shape& xs, const Shape& ws) {
  const long long span = static_cast<long long>(in + 2 * pad) - static_cast<long long>(k);
  if (stride == 0 || span < 0) {
    throw ShapeError(std::string(op) + ": non-positive output size for input " + to_string(xs) +
                     ", kernel " + to_string(ws));
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

// Valid output index range [lo, hi) for kernel offset `kofs` so that
// o*stride + kofs - pad lies inside [0, in).
void valid_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad,
                 std::size_t kofs, std::size_t& lo, std::size_t& hi) {
  const long long s = static_cast<long long>(stride);
  const long long base = static_cast<long long>(kofs) - static_cast<long long>(pad);
  long long l = base >= 0 ? 0 : (-base + s - 1) / s;
  long long h = (static_cast<long long>(in) - 1 - base);
  h = h < 0 ? 0 : h / s + 1;
  lo = static_cast<std::size_t>(std::min<long long>(l, static_cast<long long>(out)));
  hi = static_cast<std::size_t>(std::min<long long>(std::max(h, l), static_cast<long long>(out)));
}

struct ConvGeom {
  std::size_t cin, h, w, cout, kh, kw, oh, ow, stride, pad;
};

// out[co] += w[co,ci] ⋆ x[ci]; `depthwise` pairs channel co with ci == co.
void conv_forward(const ConvGeom& g, const double* x, const double* w, double* out,
                  bool depthwise) {
  parallel_for(g.cout, 1, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t co = c0; co < c1; ++co) {
      const std::size_t ci_begin = depthwise ? co : 0;
      const std::size_t ci_end = depthwise ? co + 1 : g.cin;
      double* oc = out + co * g.oh * g.ow;
      for (std::size_t ci = ci_begin; ci < ci_end; ++ci) {
        const double* xc = x + ci * g.h * g.w;
        const double* wk = depthwise ? w + co * g.kh * g.kw : w + (co * g.cin + ci) * g.kh * g.kw;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          std::size_t oy0, oy1;
          valid_range(g.h, g.oh, g.stride, g.pad, ky, oy0, oy1);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const double wv = wk[ky * g.kw + kx];
            if (wv == 0.0) continue;
            std::size_t ox0, ox1;
            valid_range(g.w, g.ow, g.stride, g.pad, kx, ox0, ox1);
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const double* xr = xc + (oy * g.stride + ky - g.pad) * g.w;
              double* orow = oc + oy * g.ow;
              for (std::size_t ox = ox0; ox < ox1; ++ox)
                orow[ox] += wv * xr[ox * g.stride + kx - g.pad];
            }
          }
        }
      }
    }
  });
}

void conv_backward(const ConvGeom& g, const double* x, const double* w, const double* gout,
                   double* gx, double* gw, bool depthwise) {
  for (std::size_t co = 0; co < g.cout; ++co) {
    const std::size_t ci_begin = depthwise ? co : 0;
    const std::size_t ci_end = depthwise ? co + 1 : g.cin;
    const double* gc = gout + co * g.oh * g.ow;
    for (std::size_t ci = ci_begin; ci < ci_end; ++ci) {
      const double* xc = x + ci * g.h * g.w;
      double* gxc = gx ? gx + ci * g.h * g.w : nullptr;
      const std::size_t widx = depthwise ? co * g.kh * g.kw : (co * g.cin + ci) * g.kh * g.kw;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        std::size_t oy0, oy1;
        valid_range(g.h, g.oh, g.stride, g.pad, ky, oy0, oy1);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          std::size_t ox0, ox1;
          valid_range(g.w, g.ow, g.stride, g.pad, kx, ox0, ox1);
          const double wv = w[widx + ky * g.kw + kx];
          double acc = 0.0;
          for (std::size_t oy = oy0; oy < oy1; ++oy) {
            const std::size_t row = (oy * g.stride + ky - g.pad) * g.w;
            const double* grow = gc + oy * g.ow;
            for (std::size_t ox = ox0; ox < ox1; ++ox) {
              const std::size_t xi = row + ox * g.stride + kx - g.pad;
              acc += grow[ox] * xc[xi];
              if (gxc) gxc[xi] += wv * grow[ox];
            }
          }
          if (gw) gw[widx + ky * g.kw + kx] += acc;
        }
      }
    }
  }
}

Tensor conv_impl(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opt,
                 bool depthwise) {
  const char* op = depthwise ? "depthwise_conv2d" : "conv2d";
  require_rank(x, 3, op);
  require_rank(w, depthwise ? 3 : 4, op);
  ConvGeom g{};
  g.cin = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cout = w.dim(0);
  g.kh = w.dim(depthwise ? 1 : 2);
  g.kw = w.dim(depthwise ? 2 : 3);
  g.stride = opt.stride;
  g.pad = opt.padding;
  if ((depthwise && g.cout != g.cin) || (!depthwise && w.dim(1) != g.cin) ||
      bias.shape() != Shape{g.cout}) {
    throw ShapeError(std::string(op) + ": input " + to_string(x.shape()) + ", weight " +
                     to_string(w.shape()) + ", bias " + to_string(bias.shape()));
  }
  g.oh = conv_out(g.h, g.kh, g.stride, g.pad, op, x.shape(), w.shape());
  g.ow = conv_out(g.w, g.kw, g.stride, g.pad, op, x.shape(), w.shape());
  Tensor out(Shape{g.cout, g.oh, g.ow});
  auto o = out.mutable_values();
  for (std::size_t co = 0; co < g.cout; ++co)
    std::fill(o.begin() + co * g.oh * g.ow, o.begin() + (co + 1) * g.oh * g.ow, bias[co]);
  conv_forward(g, x.data(), w.data(), o.data(), depthwise);
  return Tape::record(finish(std::move(out), op), {&x, &w, &bias},
                      [g, xv = x.detach(), wv = w.detach(), depthwise](
                          std::span<const double> gout, std::span<const std::span<double>> gi) {
                        conv_backward(g, xv.data(), wv.data(), gout.data(),
                                      gi[0].empty() ? nullptr : gi[0].data(),
                                      gi[1].empty() ? nullptr : gi[1].data(), depthwise);
                        if (!gi[2].empty()) {
                          const std::size_t plane = g.oh * g.ow;
                          for (std::size_t co = 0; co < g.cout; ++co)
                            for (std::size_t i = 0; i < plane; ++i) gi[2][co] += gout[co * plane + i];
                        }
                      });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opt) {
  return conv_impl(x, w, bias, opt, false);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opt) {
  return conv_impl(x, w, bias, opt, true);
}

namespace {

struct Lerp {
  std::size_t i0, i1;
  double frac;
};

std::vector<Lerp> lerp_table(std::size_t in, std::size_t out) {
  std::vector<Lerp> t(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    t[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "upsample_bilinear");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == 0 || w == 0 || out_h < h || out_w < w) {
    throw ShapeError("upsample_bilinear: cannot resize " + to_string(x.shape()) + " to " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  auto ty = lerp_table(h, out_h);
  auto tx = lerp_table(w, out_w);
  Tensor out(Shape{c, out_h, out_w});
  auto o = out.mutable_values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xc = x.data() + ch * h * w;
    double* oc = o.data() + ch * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& ly = ty[y];
      const double* r0 = xc + ly.i0 * w;
      const double* r1 = xc + ly.i1 * w;
      for (std::size_t xo = 0; xo < out_w; ++xo) {
        const auto& lx = tx[xo];
        const double top = r0[lx.i0] * (1.0 - lx.frac) + r0[lx.i1] * lx.frac;
        const double bot = r1[lx.i0] * (1.0 - lx.frac) + r1[lx.i1] * lx.frac;
        oc[y * out_w + xo] = top * (1.0 - ly.frac) + bot * ly.frac;
      }
    }
  }
  return Tape::record(std::move(out), {&x},
                      [ty = std::move(ty), tx = std::move(tx), c, h, w, out_h, out_w](
                          std::span<const double> g, std::span<const std::span<double>> gi) {
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          double* gc = gi[0].data() + ch * h * w;
                          const double* go = g.data() + ch * out_h * out_w;
                          for (std::size_t y = 0; y < out_h; ++y) {
                            const auto& ly = ty[y];
                            for (std::size_t xo = 0; xo < out_w; ++xo) {
                              const auto& lx = tx[xo];
                              const double v = go[y * out_w + xo];
                              const double vt = v * (1.0 - ly.frac), vb = v * ly.frac;
                              gc[ly.i0 * w + lx.i0] += vt * (1.0 - lx.frac);
                              gc[ly.i0 * w + lx.i1] += vt * lx.frac;
                              gc[ly.i1 * w + lx.i0] += vb * (1.0 - lx.frac);
                              gc[ly.i1 * w + lx.i1] += vb * lx.frac;
                            }
                          }
                        }
                      });
}

Tensor tokens_to_chw(const Tensor& x, std::size_t h, std::size_t w) {
  require_rank(x, 2, "tokens_to_chw");
  if (x.dim(0) != h * w) {
    throw ShapeError("tokens_to_chw: " + std::to_string(x.dim(0)) + " tokens for grid " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  return reshape(transpose(x), Shape{x.dim(1), h, w});
}

Tensor chw_to_tokens(const Tensor& x) {
  require_rank(x, 3, "chw_to_tokens");
  return transpose(reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2)}));
}

Tensor space_to_depth(const Tensor& x, std::size_t h, std::size_t w, std::size_t r) {
  require_rank(x, 2, "space_to_depth");
  if (r == 0 || x.dim(0) != h * w || h % r != 0 || w % r != 0) {
    throw ShapeError("space_to_depth: grid " + std::to_string(h) + "x" + std::to_string(w) +
                     " with " + std::to_string(x.dim(0)) + " tokens is not divisible by " +
                     std::to_string(r));
  }
  const std::size_t c = x.dim(1), oh = h / r, ow = w / r, oc = r * r * c;
  Tensor out(Shape{oh * ow, oc});
  auto o = out.mutable_values();
  auto index = [=](std::size_t Y, std::size_t X, std::size_t dy, std::size_t dx) {
    return ((Y * r + dy) * w + X * r + dx) * c;
  };
  for (std::size_t Y = 0; Y < oh; ++Y)
    for (std::size_t X = 0; X < ow; ++X)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx)
          std::copy_n(x.data() + index(Y, X, dy, dx), c,
                      o.begin() + (Y * ow + X) * oc + (dy * r + dx) * c);
  return Tape::record(std::move(out), {&x},
                      [=](std::span<const double> g, std::span<const std::span<double>> gi) {
                        for (std::size_t Y = 0; Y < oh; ++Y)
                          for (std::size_t X = 0; X < ow; ++X)
                            for (std::size_t dy = 0; dy < r; ++dy)
                              for (std::size_t dx = 0; dx < r; ++dx) {
                                const double* src = g.data() + (Y * ow + X) * oc + (dy * r + dx) * c;
                                double* dst = gi[0].data() + index(Y, X, dy, dx);
                                for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
                              }
                      });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t n = q.dim(0), m = k.dim(0), c = q.dim(1);
  if (k.dim(1) != c || v.shape() != k.shape() || heads == 0 || c % heads != 0 || m == 0) {
    throw ShapeError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                     ", v " + to_string(v.shape()) + ", heads " + std::to_string(heads));
  }
  const std::size_t d = c / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> probs(heads * n * m);
  Tensor out(Shape{n, c});
  auto o = out.mutable_values();
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const std::size_t off = hd * d;
    for (std::size_t i = 0; i < n; ++i) {
      double* p = probs.data() + (hd * n + i) * m;
      const double* qi = q.data() + i * c + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        const double* kj = k.data() + j * c + off;
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += qi[t] * kj[t];
        p[j] = s * inv_sqrt_d;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) z += (p[j] = std::exp(p[j] - mx));
      for (std::size_t j = 0; j < m; ++j) p[j] /= z;
      double* oi = o.data() + i * c + off;
      for (std::size_t j = 0; j < m; ++j) {
        const double* vj = v.data() + j * c + off;
        for (std::size_t t = 0; t < d; ++t) oi[t] += p[j] * vj[t];
      }
    }
  }
  return Tape::record(
      finish(std::move(out), "attention"), {&q, &k, &v},
      [qv = q.detach(), kv = k.detach(), vv = v.detach(), probs = std::move(probs), n, m, c, d,
       heads, inv_sqrt_d](std::span<const double> g, std::span<const std::span<double>> gi) {
        std::vector<double> ds(m);
        for (std::size_t hd = 0; hd < heads; ++hd) {
          const std::size_t off = hd * d;
          for (std::size_t i = 0; i < n; ++i) {
            const double* p = probs.data() + (hd * n + i) * m;
            const double* gi_row = g.data() + i * c + off;
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double* vj = vv.data() + j * c + off;
              double dp = 0.0;
              for (std::size_t t = 0; t < d; ++t) dp += gi_row[t] * vj[t];
              ds[j] = dp;
              dot += p[j] * dp;
              if (!gi[2].empty()) {
                double* gvj = gi[2].data() + j * c + off;
                for (std::size_t t = 0; t < d; ++t) gvj[t] += p[j] * gi_row[t];
              }
            }
            for (std::size_t j = 0; j < m; ++j) ds[j] = p[j] * (ds[j] - dot) * inv_sqrt_d;
            const double* qi = qv.data() + i * c + off;
            for (std::size_t j = 0; j < m; ++j) {
              const double* kj = kv.data() + j * c + off;
              if (!gi[0].empty()) {
                double* gq = gi[0].data() + i * c + off;
                for (std::size_t t = 0; t < d; ++t) gq[t] += ds[j] * kj[t];
              }
              if (!gi[1].empty()) {
                double* gk = gi[1].data() + j * c + off;
                for (std::size_t t = 0; t < d; ++t) gk[t] += ds[j] * qi[t];
              }
            }
          }
        }
      });
}

Tensor softmax_channels(const Tensor& x) {
  require_rank(x, 3, "softmax_channels");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  (void)c;
  return tokens_to_chw(softmax_lastdim(chw_to_tokens(x)), h, w);
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                             std::span<const std::uint8_t> valid,
                             std::span<const double> class_weights) {
  require_rank(logits, 3, "softmax_cross_entropy");
  const std::size_t c = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  if (labels.size() != plane || (!valid.empty() && valid.size() != plane) ||
      (!class_weights.empty() && class_weights.size() != c)) {
    throw ShapeError("softmax_cross_entropy: logits " + to_string(logits.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  std::vector<double> probs(c * plane);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, logits[k * plane + i]);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits[k * plane + i] - mx);
    for (std::size_t k = 0; k < c; ++k) probs[k * plane + i] = std::exp(logits[k * plane + i] - mx) / z;
    if (!valid.empty() && !valid[i]) continue;
    const std::size_t y = labels[i];
    if (y >= c) throw ContractError("softmax_cross_entropy: label out of range");
    const double wy = class_weights.empty() ? 1.0 : class_weights[y];
    total += wy * (std::log(z) + mx - logits[y * plane + i]);
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  std::vector<std::uint8_t> val(valid.begin(), valid.end());
  std::vector<double> cw(class_weights.begin(), class_weights.end());
  return Tape::record(
      finish(Tensor::scalar(total / denom), "softmax_cross_entropy"), {&logits},
      [probs = std::move(probs), lab = std::move(lab), val = std::move(val), cw = std::move(cw),
       c, plane, denom](std::span<const double> g, std::span<const std::span<double>> gi) {
        for (std::size_t i = 0; i < plane; ++i) {
          if (!val.empty() && !val[i]) continue;
          const std::size_t y = lab[i];
          const double scale = g[0] * (cw.empty() ? 1.0 : cw[y]) / denom;
          for (std::size_t k = 0; k < c; ++k)
            gi[0][k * plane + i] += scale * (probs[k * plane + i] - (k == y ? 1.0 : 0.0));
        }
      });
}

Tensor bce_with_logits(const Tensor& logits, double target) {
  const double n = static_cast<double>(logits.size());
  double total = 0.0;
  for (double x : logits.values()) {
    total += std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)));
  }
  return Tape::record(finish(Tensor::scalar(total / n), "bce_with_logits"), {&logits},
                      [xv = logits.detach(), target, n](std::span<const double> g,
                                                        std::span<const std::span<double>> gi) {
                        for (std::size_t i = 0; i < xv.size(); ++i) {
                          const double sig = 1.0 / (1.0 + std::exp(-xv[i]));
                          gi[0][i] += g[0] * (sig - target) / n;
                        }
                      });
}

}  // namespace qf
