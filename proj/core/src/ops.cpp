#include "tap/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tap/errors.hpp"
#include "kernels.hpp"

namespace tap::ops {

namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
  }
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current().enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks `out` as a tape-produced tensor and records `rule`, which receives
// the upstream gradient of `out` when the tape is replayed.
template <class Rule>
Tensor record(Tensor out, Rule rule) {
  ImplPtr o = out.impl();
  o->requires_grad = true;
  o->is_leaf = false;
  Tape::current().record([o, rule = std::move(rule)]() {
    if (o->grad.empty()) return;
    rule(std::span<const double>(o->grad));
  });
  return out;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                         ", got " + to_string(t.shape()));
  }
}

enum class Broadcast { kNone, kScalarA, kScalarB };

Broadcast binary_layout(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.size() == 1) return Broadcast::kScalarB;
  if (a.size() == 1) return Broadcast::kScalarA;
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  const Broadcast layout = binary_layout(a, b, op);
  const Shape& shape = layout == Broadcast::kScalarA ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  const auto av = a.data();
  const auto bv = b.data();
  auto ai = [&](std::size_t i) { return layout == Broadcast::kScalarA ? 0 : i; };
  auto bi = [&](std::size_t i) { return layout == Broadcast::kScalarB ? 0 : i; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ai(i)], bv[bi(i)]);
  Tensor result(shape, std::move(out));
  check_finite(result, op);
  if (!tracking({&a, &b})) return result;
  return record(result, [ap = a.impl(), bp = b.impl(), layout, n, da, db](std::span<const double> g) {
    const bool sa = layout == Broadcast::kScalarA;
    const bool sb = layout == Broadcast::kScalarB;
    if (ap->requires_grad) {
      auto ga = ap->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        ga[sa ? 0 : i] += g[i] * da(ap->data[sa ? 0 : i], bp->data[sb ? 0 : i]);
      }
    }
    if (bp->requires_grad) {
      auto gb = bp->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        gb[sb ? 0 : i] += g[i] * db(ap->data[sa ? 0 : i], bp->data[sb ? 0 : i]);
      }
    }
  });
}

// Elementwise unary op; `dfdx(x, y)` is the local derivative given the input
// and the forward output.
template <class F, class D>
Tensor unary(const Tensor& x, const char* op, F f, D dfdx) {
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Tensor result(x.shape(), std::move(out));
  check_finite(result, op);
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl(), yp = result.impl(), dfdx](std::span<const double> g) {
    if (!xp->requires_grad) return;
    auto gx = xp->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfdx(xp->data[i], yp->data[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor result({m, n}, std::move(out));
  check_finite(result, "matmul");
  if (!tracking({&a, &b})) return result;
  return record(result, [ap = a.impl(), bp = b.impl(), m, k, n](std::span<const double> g) {
    if (ap->requires_grad) kernels::gemm_bt(g.data(), bp->data.data(), ap->grad_buffer().data(), m, n, k);
    if (bp->requires_grad) kernels::gemm_at(ap->data.data(), g.data(), bp->grad_buffer().data(), m, k, n);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose", "input");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  Tensor result({c, r}, std::move(out));
  if (!tracking({&a})) return result;
  return record(result, [ap = a.impl(), r, c](std::span<const double> g) {
    if (!ap->requires_grad) return;
    auto ga = ap->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor result(shape, std::vector<double>(a.data().begin(), a.data().end()));
  if (!tracking({&a})) return result;
  return record(result, [ap = a.impl()](std::span<const double> g) {
    if (!ap->requires_grad) return;
    auto ga = ap->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 3, "pointwise_conv", "input");
  require_rank(w, 2, "pointwise_conv", "weight");
  const std::size_t cin = x.dim(0), hw = x.dim(1) * x.dim(2);
  const std::size_t cout = w.dim(0);
  if (w.dim(1) != cin) {
    throw DimensionError("pointwise_conv: weight " + to_string(w.shape()) + " does not accept input " +
                         to_string(x.shape()));
  }
  if (bias.size() != cout) {
    throw DimensionError("pointwise_conv: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(w.shape()));
  }
  std::vector<double> out(cout * hw);
  const auto bv = bias.data();
  for (std::size_t o = 0; o < cout; ++o) std::fill_n(out.begin() + o * hw, hw, bv[o]);
  kernels::gemm(w.data().data(), x.data().data(), out.data(), cout, cin, hw);
  Tensor result({cout, x.dim(1), x.dim(2)}, std::move(out));
  check_finite(result, "pointwise_conv");
  if (!tracking({&x, &w, &bias})) return result;
  return record(result, [xp = x.impl(), wp = w.impl(), bp = bias.impl(), cin, cout, hw](std::span<const double> g) {
    if (xp->requires_grad) kernels::gemm_at(wp->data.data(), g.data(), xp->grad_buffer().data(), cout, cin, hw);
    if (wp->requires_grad) kernels::gemm_bt(g.data(), xp->data.data(), wp->grad_buffer().data(), cout, hw, cin);
    if (bp->requires_grad) {
      auto gb = bp->grad_buffer();
      for (std::size_t o = 0; o < cout; ++o) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += g[o * hw + p];
        gb[o] += s;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in) {
    throw DimensionError("linear: weight " + to_string(w.shape()) + " does not accept input " +
                         to_string(x.shape()));
  }
  if (bias.size() != out_dim) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(w.shape()));
  }
  std::vector<double> out(rows * out_dim);
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * out_dim);
  kernels::gemm(x.data().data(), w.data().data(), out.data(), rows, in, out_dim);
  Tensor result({rows, out_dim}, std::move(out));
  check_finite(result, "linear");
  if (!tracking({&x, &w, &bias})) return result;
  return record(result, [xp = x.impl(), wp = w.impl(), bp = bias.impl(), rows, in, out_dim](std::span<const double> g) {
    if (xp->requires_grad) kernels::gemm_bt(g.data(), wp->data.data(), xp->grad_buffer().data(), rows, out_dim, in);
    if (wp->requires_grad) kernels::gemm_at(xp->data.data(), g.data(), wp->grad_buffer().data(), rows, in, out_dim);
    if (bp->requires_grad) {
      auto gb = bp->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(
      a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& x) {
  return unary(
      x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: input must be strictly positive, got " + std::to_string(v));
  }
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor pow(const Tensor& x, double exponent) {
  return unary(
      x, "pow", [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) {
        if (exponent == 0.0) return 0.0;
        // Derivative is unbounded at 0 for exponents below 1; use 0 there.
        if (v == 0.0 && exponent < 1.0) return 0.0;
        return exponent * std::pow(v, exponent - 1.0);
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lower bound exceeds upper bound");
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = Tensor::scalar(s);
  check_finite(result, "sum");
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl()](std::span<const double> g) {
    if (!xp->requires_grad) return;
    for (double& v : xp->grad_buffer()) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor softmax_channels(const Tensor& x) {
  require_rank(x, 3, "softmax_channels", "input");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  const auto xv = x.data();
  std::vector<double> out(x.size());
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = xv[p];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, xv[k * hw + p]);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      out[k * hw + p] = std::exp(xv[k * hw + p] - mx);
      z += out[k * hw + p];
    }
    for (std::size_t k = 0; k < c; ++k) out[k * hw + p] /= z;
  }
  Tensor result(x.shape(), std::move(out));
  check_finite(result, "softmax_channels");
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl(), yp = result.impl(), c, hw](std::span<const double> g) {
    if (!xp->requires_grad) return;
    auto gx = xp->grad_buffer();
    const auto& y = yp->data;
    for (std::size_t p = 0; p < hw; ++p) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += g[k * hw + p] * y[k * hw + p];
      for (std::size_t k = 0; k < c; ++k) gx[k * hw + p] += y[k * hw + p] * (g[k * hw + p] - dot);
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows", "input");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto xv = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double* dst = out.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (dst[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) dst[j] /= z;
  }
  Tensor result(x.shape(), std::move(out));
  check_finite(result, "softmax_rows");
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl(), yp = result.impl(), r, c](std::span<const double> g) {
    if (!xp->requires_grad) return;
    auto gx = xp->grad_buffer();
    const auto& y = yp->data;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

Tensor normalize_columns(const Tensor& x, double eps) {
  require_rank(x, 2, "normalize_columns", "input");
  const std::size_t d = x.dim(0), n = x.dim(1);
  const auto xv = x.data();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) norms[j] += xv[i * n + j] * xv[i * n + j];
  for (double& v : norms) v = std::max(std::sqrt(v), eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] / norms[j];
  Tensor result(x.shape(), std::move(out));
  check_finite(result, "normalize_columns");
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl(), yp = result.impl(), norms = std::move(norms), d, n, eps](std::span<const double> g) {
    if (!xp->requires_grad) return;
    auto gx = xp->grad_buffer();
    const auto& y = yp->data;
    std::vector<double> dot(n, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < n; ++j) dot[j] += y[i * n + j] * g[i * n + j];
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        // Below the floor the op is a plain scaling by 1/eps.
        const double proj = norms[j] > eps ? y[i * n + j] * dot[j] : 0.0;
        gx[i * n + j] += (g[i * n + j] - proj) / norms[j];
      }
    }
  });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_rank(x, 3, "upsample_nearest", "input");
  if (factor == 0) throw ContractError("upsample_nearest: factor must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t H = h * factor, W = w * factor;
  const auto xv = x.data();
  std::vector<double> out(c * H * W);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out[(k * H + i) * W + j] = xv[(k * h + i / factor) * w + j / factor];
  Tensor result({c, H, W}, std::move(out));
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl(), c, h, w, factor, H, W](std::span<const double> g) {
    if (!xp->requires_grad) return;
    auto gx = xp->grad_buffer();
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) gx[(k * h + i / factor) * w + j / factor] += g[(k * H + i) * W + j];
  });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> index) {
  if (index.empty()) throw ContractError("gather: empty index list");
  const auto xv = x.data();
  std::vector<double> out(index.size());
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= xv.size()) {
      throw DimensionError("gather: index " + std::to_string(index[j]) + " out of range for " +
                           to_string(x.shape()));
    }
    out[j] = xv[index[j]];
  }
  Tensor result({index.size()}, std::move(out));
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl(), idx = std::vector<std::size_t>(index.begin(), index.end())](std::span<const double> g) {
    if (!xp->requires_grad) return;
    auto gx = xp->grad_buffer();
    for (std::size_t j = 0; j < idx.size(); ++j) gx[idx[j]] += g[j];
  });
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 3, "depthwise_conv3x3", "input");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  if (w.shape() != Shape{c, 3, 3}) {
    throw DimensionError("depthwise_conv3x3: weight " + to_string(w.shape()) + " does not match input " +
                         to_string(x.shape()));
  }
  if (bias.size() != c) throw DimensionError("depthwise_conv3x3: bias size mismatch");
  if (w.requires_grad() || bias.requires_grad()) {
    throw ContractError("depthwise_conv3x3: weights must be frozen");
  }
  const auto xv = x.data();
  const auto wv = w.data();
  const auto bv = bias.data();
  std::vector<double> out(x.size());
  kernels::depthwise3x3(xv.data(), wv.data(), bv.data(), out.data(), c, h, wd);
  Tensor result(x.shape(), std::move(out));
  check_finite(result, "depthwise_conv3x3");
  if (!tracking({&x})) return result;
  return record(result, [xp = x.impl(), wp = w.impl(), c, h, wd](std::span<const double> g) {
    if (!xp->requires_grad) return;
    kernels::depthwise3x3_backward_input(g.data(), wp->data.data(), xp->grad_buffer().data(), c, h, wd);
  });
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride) {
  require_rank(x, 3, "conv3x3", "input");
  require_rank(w, 4, "conv3x3", "weight");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0);
  if (w.dim(1) != cin || w.dim(2) != 3 || w.dim(3) != 3) {
    throw DimensionError("conv3x3: weight " + to_string(w.shape()) + " does not match input " +
                         to_string(x.shape()));
  }
  if (bias.size() != cout) throw DimensionError("conv3x3: bias size mismatch");
  if (stride == 0 || h % stride != 0 || wd % stride != 0) {
    throw DimensionError("conv3x3: spatial size " + to_string(x.shape()) + " not divisible by stride " +
                         std::to_string(stride));
  }
  if (Tape::current().enabled() && (x.requires_grad() || w.requires_grad() || bias.requires_grad())) {
    throw ContractError("conv3x3 is not differentiable; all inputs must be frozen");
  }
  const std::size_t oh = h / stride, ow = wd / stride;
  const auto xv = x.data();
  const auto wv = w.data();
  const auto bv = bias.data();
  std::vector<double> out(cout * oh * ow);
  for (std::size_t o = 0; o < cout; ++o) {
    double* dst = out.data() + o * oh * ow;
    std::fill_n(dst, oh * ow, bv[o]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = xv.data() + ci * h * wd;
      const double* k = wv.data() + (o * cin + ci) * 9;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t di = 0; di < 3; ++di) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * stride + di) - 1;
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t dj = 0; dj < 3; ++dj) {
              const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j * stride + dj) - 1;
              if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(wd)) continue;
              acc += k[di * 3 + dj] * src[y * static_cast<std::ptrdiff_t>(wd) + xx];
            }
          }
          dst[i * ow + j] += acc;
        }
      }
    }
  }
  Tensor result({cout, oh, ow}, std::move(out));
  check_finite(result, "conv3x3");
  return result;
}

}  // namespace tap::ops
