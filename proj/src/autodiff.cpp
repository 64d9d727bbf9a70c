#include "agentmixer/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace agentmixer {

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ContractError("item() on non-scalar of shape " + shape_string(v.shape()));
  return v[0];
}

bool Var::needs_grad() const { return tape_ && tape_->needs_grad(id_); }

Var Tape::record(Tensor value, bool needs_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return record(std::move(value), false, nullptr);
}

Var Tape::param(Tensor& param) {
  if (auto it = bound_params_.find(&param); it != bound_params_.end()) return Var(this, it->second);
  Tensor copy(param.shape(), param.data());
  Var v = record(std::move(copy), param.requires_grad(), nullptr);
  nodes_[v.id_].param = &param;
  bound_params_.emplace(&param, v.id_);
  return v;
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss belongs to a different tape");
  if (nodes_[loss.id_].value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(nodes_[loss.id_].value.shape()));
  }
  if (nodes_[loss.id_].needs_grad) {
    grad_buffer(loss.id_)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.needs_grad || node.grad.empty()) continue;
      if (node.param) {
        node.param->accumulate_grad(node.grad);
      } else if (node.backward) {
        // The closure may touch other nodes' buffers but never this node's vector.
        std::vector<double> g = std::move(node.grad);
        node.backward(*this, g);
      }
    }
  }
  clear();
}

void Tape::clear() {
  nodes_.clear();
  bound_params_.clear();
}

// ---------------------------------------------------------------------------
// kernels

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0);
  const double* __restrict A = a.data();
  const double* __restrict B = b.data();
  double* __restrict C = c.data();
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = C + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    const double* a0 = A + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      const double* __restrict bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = bp[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = C + i * n;
    const double* ai = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = ai[p];
      const double* bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

namespace {

// c[k x n] += a[m x k]^T . b[m x n], accumulating over rows of a in order.
void gemm_tn(const double* __restrict A, const double* __restrict B, double* __restrict C,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = A + i * k;
    const double* bi = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = ai[p];
      if (x == 0.0) continue;
      double* __restrict cp = C + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += x * bi[j];
    }
  }
}

std::vector<double> transposed(const Tensor& t) {
  const std::size_t r = t.rows(), c = t.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

struct Broadcast {
  std::size_t rows, cols;
  std::size_t ar, ac, br, bc;
  std::size_t ia(std::size_t r, std::size_t c) const {
    return (ar == 1 ? 0 : r) * ac + (ac == 1 ? 0 : c);
  }
  std::size_t ib(std::size_t r, std::size_t c) const {
    return (br == 1 ? 0 : r) * bc + (bc == 1 ? 0 : c);
  }
};

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b, const char* what) {
  Broadcast s{std::max(a.rows(), b.rows()), std::max(a.cols(), b.cols()),
              a.rows(), a.cols(), b.rows(), b.cols()};
  auto ok = [&](std::size_t x, std::size_t full) { return x == full || x == 1; };
  if (!ok(s.ar, s.rows) || !ok(s.br, s.rows) || !ok(s.ac, s.cols) || !ok(s.bc, s.cols)) {
    throw DimensionError(std::string(what) + ": cannot broadcast " + shape_string(a.shape()) +
                         " with " + shape_string(b.shape()));
  }
  return s;
}

// f(x, y) -> value; dx(x, y, out) / dy(x, y, out) -> partials.
template <class F, class DX, class DY>
Var binary(const Var& a, const Var& b, const char* what, F f, DX dx, DY dy) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast s = broadcast_shapes(av, bv, what);
  Tensor out = Tensor::matrix(s.rows, s.cols);
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c) out[r * s.cols + c] = f(av[s.ia(r, c)], bv[s.ib(r, c)]);
  const std::size_t ia = a.id(), ib = b.id(), io = tape.size();
  const bool ng = a.needs_grad() || b.needs_grad();
  return tape.record(std::move(out), ng, [=](Tape& t, std::span<const double> g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    const Tensor& o = t.value(io);
    if (t.needs_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t r = 0; r < s.rows; ++r)
        for (std::size_t c = 0; c < s.cols; ++c) {
          const std::size_t k = r * s.cols + c;
          ga[s.ia(r, c)] += g[k] * dx(x[s.ia(r, c)], y[s.ib(r, c)], o[k]);
        }
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < s.rows; ++r)
        for (std::size_t c = 0; c < s.cols; ++c) {
          const std::size_t k = r * s.cols + c;
          gb[s.ib(r, c)] += g[k] * dy(x[s.ia(r, c)], y[s.ib(r, c)], o[k]);
        }
    }
  });
}

// f(x) -> value; df(x, out) -> derivative.
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(Shape{av.rows(), av.cols()});
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id(), io = tape.size();
  return tape.record(std::move(out), a.needs_grad(), [=](Tape& t, std::span<const double> g) {
    const Tensor& x = t.value(ia);
    const Tensor& o = t.value(io);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], o[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: shape mismatch " + shape_string(av.shape()) + " . " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = Tensor::matrix(m, n);
  gemm(av.values(), bv.values(), out.values(), m, k, n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), a.needs_grad() || b.needs_grad(),
                     [=](Tape& t, std::span<const double> g) {
                       if (t.needs_grad(ia)) {
                         const std::vector<double> bt = transposed(t.value(ib));
                         gemm(g, bt, t.grad_buffer(ia), m, n, k, true);
                       }
                       if (t.needs_grad(ib)) {
                         gemm_tn(t.value(ia).values().data(), g.data(),
                                 t.grad_buffer(ib).data(), m, k, n);
                       }
                     });
}

Var linear(const Var& input, const Var& weight, const Var& bias) {
  Tape& tape = tape_of(input, weight);
  if (bias.tape() != &tape) throw ContractError("operands recorded on different tapes");
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& bv = bias.value();
  if (x.cols() != w.rows() || bv.size() != w.cols()) {
    throw DimensionError("linear: shape mismatch input " + shape_string(x.shape()) + ", weight " +
                         shape_string(w.shape()) + ", bias " + shape_string(bv.shape()));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    std::copy(bv.values().begin(), bv.values().end(), out.values().begin() + i * n);
  gemm(x.values(), w.values(), out.values(), m, k, n, true);
  const std::size_t ix = input.id(), iw = weight.id(), ibias = bias.id();
  const bool ng = input.needs_grad() || weight.needs_grad() || bias.needs_grad();
  return tape.record(std::move(out), ng, [=](Tape& t, std::span<const double> g) {
    if (t.needs_grad(ix)) {
      const std::vector<double> wt = transposed(t.value(iw));
      gemm(g, wt, t.grad_buffer(ix), m, n, k, true);
    }
    if (t.needs_grad(iw)) {
      gemm_tn(t.value(ix).values().data(), g.data(), t.grad_buffer(iw).data(), m, k, n);
    }
    if (t.needs_grad(ibias)) {
      auto gb = t.grad_buffer(ibias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Var minimum(const Var& a, const Var& b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Var neg(const Var& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Var softplus(const Var& a) {
  return unary(
      a,
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double o) { return o * (1.0 - o); });
}

Var activate(const Var& a, Activation act) {
  return act == Activation::gelu ? gelu(a) : relu(a);
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(const Var& a) {
  Tape& tape = tape_of(a);
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(s), a.needs_grad(), [=](Tape& t, std::span<const double> g) {
    for (double& x : t.grad_buffer(ia)) x += g[0];
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = Tensor::matrix(m, 1);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j];
    out[i] = s;
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.needs_grad(), [=](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
  });
}

// ---------------------------------------------------------------------------
// normalisation

Var softmax_rows(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = (av.values().data() + i * n);
    double* y = (out.values().data() + i * n);
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  const std::size_t ia = a.id(), io = tape.size();
  return tape.record(std::move(out), a.needs_grad(), [=](Tape& t, std::span<const double> g) {
    const Tensor& p = t.value(io);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = (av.values().data() + i * n);
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] - lz;
  }
  const std::size_t ia = a.id(), io = tape.size();
  return tape.record(std::move(out), a.needs_grad(), [=](Tape& t, std::span<const double> g) {
    const Tensor& lp = t.value(io);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        ga[i * n + j] += g[i * n + j] - std::exp(lp[i * n + j]) * gs;
    }
  });
}

Var layer_norm(const Var& input, const Var& gain, const Var& shift, double eps) {
  Tape& tape = tape_of(input, gain);
  if (shift.tape() != &tape) throw ContractError("operands recorded on different tapes");
  const Tensor& x = input.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " has no columns");
  if (gain.value().size() != n || shift.value().size() != n) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " with gain " +
                         shape_string(gain.value().shape()) + " and shift " +
                         shape_string(shift.value().shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const Tensor& gv = gain.value();
  const Tensor& sv = shift.value();
  Tensor out = Tensor::matrix(m, n);
  std::vector<double> xhat(m * n), rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = (x.values().data() + i * n);
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xi[j] - mu) * rstd[i];
      xhat[i * n + j] = h;
      out[i * n + j] = h * gv[j] + sv[j];
    }
  }
  const std::size_t ix = input.id(), ig = gain.id(), is = shift.id();
  const bool ng = input.needs_grad() || gain.needs_grad() || shift.needs_grad();
  return tape.record(
      std::move(out), ng,
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::span<const double> g) {
        const Tensor& gvv = t.value(ig);
        if (t.needs_grad(ig)) {
          auto gg = t.grad_buffer(ig);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (t.needs_grad(is)) {
          auto gs = t.grad_buffer(is);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gs[j] += g[i * n + j];
        }
        if (t.needs_grad(ix)) {
          auto gx = t.grad_buffer(ix);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gvv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gvv[j];
              gx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// layout

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  Tape& tape = tape_of(parts[0]);
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  bool ng = false;
  for (const Var& p : parts) {
    if (p.tape() != &tape) throw ContractError("operands recorded on different tapes");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].value().shape()) +
                           " vs " + shape_string(p.value().shape()));
    }
    ids.push_back(p.id());
    widths.push_back(p.cols());
    total += p.cols();
    ng = ng || p.needs_grad();
  }
  Tensor out = Tensor::matrix(m, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return tape.record(std::move(out), ng, [=](Tape& t, std::span<const double> g) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        auto gk = t.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] += g[i * total + o + j];
      }
      o += widths[k];
    }
  });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (start + count > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_string(av.shape()));
  }
  Tensor out = Tensor::matrix(m, count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * n + start + j];
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.needs_grad(), [=](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += g[i * count + j];
  });
}

Var gather_cols(const Var& a, std::span<const int> index) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  if (index.size() != m) {
    throw DimensionError("gather_cols: " + std::to_string(index.size()) + " indices for " +
                         shape_string(av.shape()));
  }
  Tensor out = Tensor::matrix(m, 1);
  std::vector<int> idx(index.begin(), index.end());
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw DimensionError("gather_cols: index " + std::to_string(idx[i]) + " out of " +
                           shape_string(av.shape()));
    }
    out[i] = av[i * n + static_cast<std::size_t>(idx[i])];
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.needs_grad(),
                     [=, idx = std::move(idx)](Tape& t, std::span<const double> g) {
                       auto ga = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < m; ++i)
                         ga[i * n + static_cast<std::size_t>(idx[i])] += g[i];
                     });
}

Var interleave_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("interleave_rows of nothing");
  Tape& tape = tape_of(parts[0]);
  const std::size_t R = parts.size(), G = parts[0].rows(), C = parts[0].cols();
  std::vector<std::size_t> ids;
  bool ng = false;
  for (const Var& p : parts) {
    if (p.tape() != &tape) throw ContractError("operands recorded on different tapes");
    if (p.rows() != G || p.cols() != C) {
      throw DimensionError("interleave_rows: shape mismatch " +
                           shape_string(parts[0].value().shape()) + " vs " +
                           shape_string(p.value().shape()));
    }
    ids.push_back(p.id());
    ng = ng || p.needs_grad();
  }
  Tensor out = Tensor::matrix(G * R, C);
  for (std::size_t r = 0; r < R; ++r) {
    const Tensor& v = parts[r].value();
    for (std::size_t g = 0; g < G; ++g)
      std::copy_n((v.values().data() + g * C), C, (out.values().data() + (g * R + r) * C));
  }
  return tape.record(std::move(out), ng, [=](Tape& t, std::span<const double> gr) {
    for (std::size_t r = 0; r < R; ++r) {
      if (!t.needs_grad(ids[r])) continue;
      auto gp = t.grad_buffer(ids[r]);
      for (std::size_t g = 0; g < G; ++g)
        for (std::size_t c = 0; c < C; ++c) gp[g * C + c] += gr[(g * R + r) * C + c];
    }
  });
}

Var take_group_row(const Var& grid, std::size_t group_rows, std::size_t r) {
  Tape& tape = tape_of(grid);
  const Tensor& v = grid.value();
  const std::size_t R = group_rows, C = v.cols();
  if (R == 0 || v.rows() % R != 0 || r >= R) {
    throw DimensionError("take_group_row: grid " + shape_string(v.shape()) + " with group " +
                         std::to_string(R) + ", row " + std::to_string(r));
  }
  const std::size_t G = v.rows() / R;
  Tensor out = Tensor::matrix(G, C);
  for (std::size_t g = 0; g < G; ++g) std::copy_n((v.values().data() + (g * R + r) * C), C, (out.values().data() + g * C));
  const std::size_t ia = grid.id();
  return tape.record(std::move(out), grid.needs_grad(), [=](Tape& t, std::span<const double> gr) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t c = 0; c < C; ++c) ga[(g * R + r) * C + c] += gr[g * C + c];
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> index) {
  Tape& tape = tape_of(a);
  const Tensor& v = a.value();
  const std::size_t R = v.rows(), C = v.cols();
  Tensor out = Tensor::matrix(index.size(), C);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= R) {
      throw DimensionError("gather_rows: row " + std::to_string(index[r]) + " of " + shape_string(v.shape()));
    }
    std::copy_n(v.values().data() + index[r] * C, C, out.values().data() + r * C);
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return tape.record(std::move(out), a.needs_grad(), [=, idx = std::move(idx)](Tape& t, std::span<const double> gr) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < C; ++c) ga[idx[r] * C + c] += gr[r * C + c];
  });
}

Var group_transpose(const Var& stacked, std::size_t group_rows) {
  Tape& tape = tape_of(stacked);
  const Tensor& v = stacked.value();
  const std::size_t R = group_rows, C = v.cols();
  if (R == 0 || v.rows() % R != 0) {
    throw DimensionError("group_transpose: " + shape_string(v.shape()) +
                         " is not a stack of blocks with " + std::to_string(R) + " rows");
  }
  const std::size_t G = v.rows() / R;
  Tensor out = Tensor::matrix(G * C, R);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) out[(g * C + c) * R + r] = v[(g * R + r) * C + c];
  const std::size_t ia = stacked.id();
  return tape.record(std::move(out), stacked.needs_grad(),
                     [=](Tape& t, std::span<const double> gr) {
                       auto ga = t.grad_buffer(ia);
                       for (std::size_t g = 0; g < G; ++g)
                         for (std::size_t r = 0; r < R; ++r)
                           for (std::size_t c = 0; c < C; ++c)
                             ga[(g * R + r) * C + c] += gr[(g * C + c) * R + r];
                     });
}

Var detach(const Var& a) {
  Tape& tape = tape_of(a);
  return tape.constant(Tensor(a.value().shape(), a.value().data()));
}

}  // namespace agentmixer
