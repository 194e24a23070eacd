#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every operation applied to Vars. Nodes that do not depend on
// any gradient-requiring leaf store no backward closure, so the same model code
// serves both inference (Tape with record=false) and training.

#include <bit>
#include <cassert>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>

#include "patchsr/tensor.hpp"

namespace patchsr::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor t) { return push_node(std::move(t), false, nullptr); }
  Var leaf(Tensor t, bool requires_grad) {
    return push_node(std::move(t), requires_grad && record_, nullptr);
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Gradient of the last backward() root with respect to v (zeros if unreached).
  Tensor grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) return Tensor(n.value.shape);
    return n.grad;
  }

  /// Lazily allocated gradient buffer for a node; callers accumulate into it.
  Tensor& grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape);
    return n.grad;
  }

  /// Records an op. `backward` runs only if some parent requires a gradient.
  Var push(Tensor value, std::initializer_list<Var> parents, Backward backward) {
    bool rg = false;
    if (record_)
      for (const Var& p : parents) rg = rg || requires_grad(p.id);
    return push_node(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  void backward(Var root) {
    if (root.tape != this) throw StateError("backward: Var belongs to another tape");
    if (value(root.id).size() != 1) throw DimensionError("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad = Tensor();
    if (!requires_grad(root.id)) return;
    grad_buf(root.id)[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      // Closures only touch grad buffers of earlier nodes.
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push_node(Tensor t, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(t), Tensor(), rg, std::move(bw)});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;
  bool record_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void check_same(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) throw StateError(std::string(op) + ": Vars from different tapes");
  require_same_shape(a.value(), b.value(), op);
}

inline bool wants(Tape& t, const Var& v) { return t.requires_grad(v.id); }

inline void axpy(Tensor& dst, const Tensor& src, double alpha = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

// C[n x m] (+)= A[n x k] * B[k x m]
// Four rank-1 updates per pass over a row of C; the left-to-right sum keeps the sequential order.
inline void gemm_nn(const double* a, const double* b, double* c, int n, int k, int m, bool acc) {
  if (!acc) std::fill(c, c + static_cast<std::size_t>(n) * m, 0.0);
  const auto row = [&](int p) { return b + static_cast<std::size_t>(p) * m; };
  for (int i = 0; i < n; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * m;
    const double* ai = a + static_cast<std::size_t>(i) * k;
    int p = 0;
    for (; p + 4 <= k; p += 4) {
      const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const double *b0 = row(p), *b1 = row(p + 1), *b2 = row(p + 2), *b3 = row(p + 3);
      for (int j = 0; j < m; ++j) ci[j] = ci[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const double av = ai[p];
      const double* bp = row(p);
      for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[n x m] (+)= A[n x k] * B[m x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, int n, int k, int m, bool acc) {
  if (!acc && n >= 8) {
    // Same summation order as the dot-product loop below, but with a contiguous inner loop.
    std::vector<double> bt(static_cast<std::size_t>(k) * m);
    for (int j = 0; j < m; ++j)
      for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * m + j] = b[static_cast<std::size_t>(j) * k + p];
    gemm_nn(a, bt.data(), c, n, k, m, false);
    return;
  }
  for (int i = 0; i < n; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = acc ? ci[j] + s : s;
    }
  }
}

// C[k x m] (+)= A[n x k]^T * B[n x m]
inline void gemm_tn(const double* a, const double* b, double* c, int n, int k, int m, bool acc) {
  if (!acc) std::fill(c, c + static_cast<std::size_t>(k) * m, 0.0);
  const auto arow = [&](int i) { return a + static_cast<std::size_t>(i) * k; };
  const auto brow = [&](int i) { return b + static_cast<std::size_t>(i) * m; };
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    const double *a0 = arow(i), *a1 = arow(i + 1), *a2 = arow(i + 2), *a3 = arow(i + 3);
    const double *b0 = brow(i), *b1 = brow(i + 1), *b2 = brow(i + 2), *b3 = brow(i + 3);
    for (int p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      double* cp = c + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) cp[j] = cp[j] + x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
    }
  }
  for (; i < n; ++i) {
    const double* ai = arow(i);
    const double* bi = brow(i);
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.shape.size() != 2) throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(Var a, Var b) {
  detail::check_same(a, b, "add");
  Tensor out = a.value();
  detail::axpy(out, b.value());
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (detail::wants(t, a)) detail::axpy(t.grad_buf(a.id), g);
    if (detail::wants(t, b)) detail::axpy(t.grad_buf(b.id), g);
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same(a, b, "sub");
  Tensor out = a.value();
  detail::axpy(out, b.value(), -1.0);
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (detail::wants(t, a)) detail::axpy(t.grad_buf(a.id), g);
    if (detail::wants(t, b)) detail::axpy(t.grad_buf(b.id), g, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  detail::check_same(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (detail::wants(t, a)) {
      Tensor& ga = t.grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (detail::wants(t, b)) {
      Tensor& gb = t.grad_buf(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return a.tape->push(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    detail::axpy(t.grad_buf(a.id), g, s);
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v += s;
  return a.tape->push(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    detail::axpy(t.grad_buf(a.id), g);
  });
}

namespace detail {
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tensor out = a.value();
  for (double& v : out.data) v = f(v);
  return a.tape->push(std::move(out), {a}, [a, df](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor& ga = t.grad_buf(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i]);
  });
}
}  // namespace detail

/// Tanh-approximated GELU.
inline Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

inline Var silu(Var a) {
  return detail::unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double th = std::tanh(x);
        return 1.0 - th * th;
      });
}

inline Var softplus(Var a) {
  return detail::unary(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

// ---------------------------------------------------------------- reductions

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape->push(Tensor({1}, s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buf(a.id);
    for (double& v : ga.data) v += g[0];
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

/// Mean squared difference between equally shaped tensors.
inline Var mse(Var a, Var b) {
  detail::check_same(a, b, "mse");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  return a.tape->push(Tensor({1}, s / n), {a, b}, [a, b, n](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const double k = 2.0 * g[0] / n;
    if (detail::wants(t, a)) {
      Tensor& ga = t.grad_buf(a.id);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
    }
    if (detail::wants(t, b)) {
      Tensor& gb = t.grad_buf(b.id);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
    }
  });
}

// ---------------------------------------------------------------- linear algebra

/// a[n x k] * b[k x m]
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_2d(av, "matmul");
  detail::require_2d(bv, "matmul");
  const int n = av.rows(), k = av.cols(), m = bv.cols();
  if (bv.rows() != k) throw DimensionError("matmul: inner dimensions " + shape_str(av.shape) + " * " + shape_str(bv.shape));
  Tensor out({n, m});
  detail::gemm_nn(av.data.data(), bv.data.data(), out.data.data(), n, k, m, false);
  return a.tape->push(std::move(out), {a, b}, [a, b, n, k, m](Tape& t, const Tensor& g) {
    if (detail::wants(t, a))
      detail::gemm_nt(g.data.data(), b.value().data.data(), t.grad_buf(a.id).data.data(), n, m, k, true);
    if (detail::wants(t, b))
      detail::gemm_tn(a.value().data.data(), g.data.data(), t.grad_buf(b.id).data.data(), n, k, m, true);
  });
}

/// x[n x in] * w[out x in]^T + bias[out]. `bias` may be invalid (no bias).
inline Var linear(Var x, Var w, Var bias = {}) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  detail::require_2d(xv, "linear");
  detail::require_2d(wv, "linear");
  const int n = xv.rows(), in = xv.cols(), out_dim = wv.rows();
  if (wv.cols() != in)
    throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " + shape_str(wv.shape));
  Tensor out({n, out_dim});
  detail::gemm_nt(xv.data.data(), wv.data.data(), out.data.data(), n, in, out_dim, false);
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Tensor& bv = bias.value();
    if (bv.size() != static_cast<std::size_t>(out_dim)) throw DimensionError("linear: bias length");
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out_dim; ++j) out.at(i, j) += bv[static_cast<std::size_t>(j)];
  }
  auto bw = [x, w, bias, has_bias, n, in, out_dim](Tape& t, const Tensor& g) {
    if (detail::wants(t, x))
      detail::gemm_nn(g.data.data(), w.value().data.data(), t.grad_buf(x.id).data.data(), n, out_dim, in, true);
    if (detail::wants(t, w))
      detail::gemm_tn(g.data.data(), x.value().data.data(), t.grad_buf(w.id).data.data(), n, out_dim, in, true);
    if (has_bias && detail::wants(t, bias)) {
      Tensor& gb = t.grad_buf(bias.id);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < out_dim; ++j) gb[static_cast<std::size_t>(j)] += g.at(i, j);
    }
  };
  if (has_bias) return x.tape->push(std::move(out), {x, w, bias}, std::move(bw));
  return x.tape->push(std::move(out), {x, w}, std::move(bw));
}

/// x[n x m] + v broadcast over rows; v holds m values.
inline Var add_rowvec(Var x, Var v) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "add_rowvec");
  const int n = xv.rows(), m = xv.cols();
  if (v.value().size() != static_cast<std::size_t>(m)) throw DimensionError("add_rowvec: vector length");
  Tensor out = xv;
  const Tensor& vv = v.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(i, j) += vv[static_cast<std::size_t>(j)];
  return x.tape->push(std::move(out), {x, v}, [x, v, n, m](Tape& t, const Tensor& g) {
    if (detail::wants(t, x)) detail::axpy(t.grad_buf(x.id), g);
    if (detail::wants(t, v)) {
      Tensor& gv = t.grad_buf(v.id);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) gv[static_cast<std::size_t>(j)] += g.at(i, j);
    }
  });
}

/// x[n x m] * v broadcast over rows.
inline Var mul_rowvec(Var x, Var v) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "mul_rowvec");
  const int n = xv.rows(), m = xv.cols();
  if (v.value().size() != static_cast<std::size_t>(m)) throw DimensionError("mul_rowvec: vector length");
  Tensor out = xv;
  const Tensor& vv = v.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(i, j) *= vv[static_cast<std::size_t>(j)];
  return x.tape->push(std::move(out), {x, v}, [x, v, n, m](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& vv = v.value();
    if (detail::wants(t, x)) {
      Tensor& gx = t.grad_buf(x.id);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) gx.at(i, j) += g.at(i, j) * vv[static_cast<std::size_t>(j)];
    }
    if (detail::wants(t, v)) {
      Tensor& gv = t.grad_buf(v.id);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) gv[static_cast<std::size_t>(j)] += g.at(i, j) * xv.at(i, j);
    }
  });
}

/// Per-row layer normalisation without affine parameters.
inline Var layer_norm(Var x, double eps = 1e-6) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "layer_norm");
  const int n = xv.rows(), m = xv.cols();
  Tensor out({n, m});
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto r = xv.row(i);
    double mu = 0.0;
    for (double v : r) mu += v;
    mu /= m;
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= m;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < m; ++j) out.at(i, j) = (r[static_cast<std::size_t>(j)] - mu) * is;
  }
  Tensor normed = out;
  return x.tape->push(std::move(out), {x},
                      [x, n, m, inv_std = std::move(inv_std), normed = std::move(normed)](Tape& t, const Tensor& g) {
                        Tensor& gx = t.grad_buf(x.id);
                        for (int i = 0; i < n; ++i) {
                          double mg = 0.0, mgy = 0.0;
                          for (int j = 0; j < m; ++j) {
                            mg += g.at(i, j);
                            mgy += g.at(i, j) * normed.at(i, j);
                          }
                          mg /= m;
                          mgy /= m;
                          const double is = inv_std[static_cast<std::size_t>(i)];
                          for (int j = 0; j < m; ++j)
                            gx.at(i, j) += is * (g.at(i, j) - mg - normed.at(i, j) * mgy);
                        }
                      });
}

// ---------------------------------------------------------------- shape ops

inline Var reshape(Var a, Shape s) {
  Tensor out = a.value();
  if (shape_numel(s) != out.size()) throw DimensionError("reshape: element count mismatch " + shape_str(s));
  out.shape = std::move(s);
  return a.tape->push(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buf(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var concat_rows(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_2d(av, "concat_rows");
  detail::require_2d(bv, "concat_rows");
  if (av.cols() != bv.cols()) throw DimensionError("concat_rows: column mismatch");
  Tensor out({av.rows() + bv.rows(), av.cols()});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return a.tape->push(std::move(out), {a, b}, [a, b, na](Tape& t, const Tensor& g) {
    if (detail::wants(t, a)) {
      Tensor& ga = t.grad_buf(a.id);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (detail::wants(t, b)) {
      Tensor& gb = t.grad_buf(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

inline Var slice_rows(Var a, int begin, int count) {
  const Tensor& av = a.value();
  detail::require_2d(av, "slice_rows");
  if (begin < 0 || count < 0 || begin + count > av.rows()) throw DimensionError("slice_rows: out of range");
  const int m = av.cols();
  Tensor out({count, m});
  std::copy(av.data.begin() + static_cast<std::ptrdiff_t>(begin) * m,
            av.data.begin() + static_cast<std::ptrdiff_t>(begin + count) * m, out.data.begin());
  return a.tape->push(std::move(out), {a}, [a, begin, m](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buf(a.id);
    const std::size_t off = static_cast<std::size_t>(begin) * m;
    for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
  });
}

/// Column block [begin, begin+count) of a 2-D tensor; a 1-D tensor is treated as one row.
inline Var slice_cols(Var a, int begin, int count) {
  const Tensor& av = a.value();
  const int n = av.shape.size() == 1 ? 1 : av.rows();
  const int m = av.shape.size() == 1 ? av.dim(0) : av.cols();
  if (begin < 0 || count < 0 || begin + count > m) throw DimensionError("slice_cols: out of range");
  Tensor out(av.shape.size() == 1 ? Shape{count} : Shape{n, count});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < count; ++j)
      out[static_cast<std::size_t>(i) * count + j] = av[static_cast<std::size_t>(i) * m + begin + j];
  return a.tape->push(std::move(out), {a}, [a, n, m, begin, count](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buf(a.id);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < count; ++j)
        ga[static_cast<std::size_t>(i) * m + begin + j] += g[static_cast<std::size_t>(i) * count + j];
  });
}

/// out[i] = a[index[i]]; backward scatters. Used for every fixed rearrangement
/// (patchify, space-to-depth, cropping).
inline Var gather(Var a, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  const Tensor& av = a.value();
  if (index->size() != shape_numel(out_shape)) throw DimensionError("gather: index length vs shape");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) out[i] = av[(*index)[i]];
  return a.tape->push(std::move(out), {a}, [a, index](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buf(a.id);
    for (std::size_t i = 0; i < index->size(); ++i) ga[(*index)[i]] += g[i];
  });
}

// ---------------------------------------------------------------- attention

/// Multi-head scaled dot-product attention. q[nq x d], k,v[nk x d], d divisible by heads.
/// When `weights_out` is non-null it receives the per-head probability rows
/// (heads x nq x nk).
namespace detail {

// exp(x) over an array in place, for x <= 0 (softmax after max subtraction).
// Inputs below -708 are clamped there. Agrees with std::exp to ~1 ulp elsewhere.
inline void exp_nonpositive(double* x, int n) {
  constexpr double kLog2e = 1.4426950408889634, kLn2Hi = 6.93147180369123816490e-01, kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShifter = 6755399441055744.0;  // 1.5 * 2^52: adding it rounds to an integer
  // Kept apart from the main loop so that loop stays branch-free and vectorises.
  for (int i = 0; i < n; ++i)
    if (x[i] < -708.0) x[i] = -708.0;
  for (int i = 0; i < n; ++i) {
    const double v = x[i];
    const double t = v * kLog2e + kShifter;
    const double k = t - kShifter;
    const double r = (v - k * kLn2Hi) - k * kLn2Lo;
    double p = 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const auto bits = (std::bit_cast<std::uint64_t>(t) - std::bit_cast<std::uint64_t>(kShifter) + 1023) << 52;
    x[i] = p * std::bit_cast<double>(bits);
  }
}

// Columns [off, off + dh) of a row-major matrix as a contiguous rows x dh block.
inline void take_head(const Tensor& x, int off, int dh, std::vector<double>& out) {
  const int rows = x.rows(), d = x.cols();
  out.resize(static_cast<std::size_t>(rows) * dh);
  for (int i = 0; i < rows; ++i)
    std::copy_n(x.data.data() + static_cast<std::size_t>(i) * d + off, dh, out.data() + static_cast<std::size_t>(i) * dh);
}

inline void add_head(const std::vector<double>& src, int off, int dh, Tensor& x) {
  const int rows = x.rows(), d = x.cols();
  for (int i = 0; i < rows; ++i) {
    double* xi = x.data.data() + static_cast<std::size_t>(i) * d + off;
    const double* si = src.data() + static_cast<std::size_t>(i) * dh;
    for (int p = 0; p < dh; ++p) xi[p] += si[p];
  }
}

}  // namespace detail

inline Var attention(Var q, Var k, Var v, int heads, Tensor* weights_out = nullptr) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::require_2d(qv, "attention");
  detail::require_2d(kv, "attention");
  detail::require_2d(vv, "attention");
  const int nq = qv.rows(), nk = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != nk) throw DimensionError("attention: q/k/v shapes");
  if (heads <= 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<Tensor>(Shape{heads, nq, nk});
  Tensor out({nq, d});
  std::vector<double> qh, kh, vh, vt, oh(static_cast<std::size_t>(nq) * dh), ot(oh.size());
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    detail::take_head(qv, off, dh, qh);
    detail::take_head(kv, off, dh, kh);
    detail::take_head(vv, off, dh, vh);
    double* ph = probs->data.data() + static_cast<std::size_t>(h) * nq * nk;
    detail::gemm_nt(qh.data(), kh.data(), ph, nq, dh, nk, false);
    for (int i = 0; i < nq; ++i) {
      double* row = ph + static_cast<std::size_t>(i) * nk;
      double mx = -1e300;
      for (int j = 0; j < nk; ++j) mx = std::max(mx, row[j] *= sc);
      for (int j = 0; j < nk; ++j) row[j] -= mx;
      detail::exp_nonpositive(row, nk);
      double z = 0.0;
      for (int j = 0; j < nk; ++j) z += row[j];
      const double inv = 1.0 / z;
      for (int j = 0; j < nk; ++j) row[j] *= inv;
    }
    // out_h = P V_h, evaluated as (V_h^T P^T)^T so the inner loop runs over queries.
    vt.resize(vh.size());
    for (int j = 0; j < nk; ++j)
      for (int p = 0; p < dh; ++p) vt[static_cast<std::size_t>(p) * nk + j] = vh[static_cast<std::size_t>(j) * dh + p];
    detail::gemm_nt(vt.data(), ph, ot.data(), dh, nk, nq, false);
    for (int i = 0; i < nq; ++i)
      for (int p = 0; p < dh; ++p) oh[static_cast<std::size_t>(i) * dh + p] = ot[static_cast<std::size_t>(p) * nq + i];
    detail::add_head(oh, off, dh, out);
  }
  if (weights_out) *weights_out = *probs;
  return q.tape->push(std::move(out), {q, k, v}, [q, k, v, probs, heads, nq, nk, dh, sc](Tape& t, const Tensor& g) {
    const bool wq = detail::wants(t, q), wk = detail::wants(t, k), wv = detail::wants(t, v);
    std::vector<double> gh, qh, kh, vh, dp(static_cast<std::size_t>(nq) * nk), tmp;
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      const double* ph = probs->data.data() + static_cast<std::size_t>(h) * nq * nk;
      detail::take_head(g, off, dh, gh);
      if (wv) {
        tmp.assign(static_cast<std::size_t>(nk) * dh, 0.0);
        detail::gemm_tn(ph, gh.data(), tmp.data(), nq, nk, dh, false);
        detail::add_head(tmp, off, dh, t.grad_buf(v.id));
      }
      if (!wq && !wk) continue;
      detail::take_head(v.value(), off, dh, vh);
      detail::gemm_nt(gh.data(), vh.data(), dp.data(), nq, dh, nk, false);
      for (int i = 0; i < nq; ++i) {
        double* di = dp.data() + static_cast<std::size_t>(i) * nk;
        const double* pi = ph + static_cast<std::size_t>(i) * nk;
        double dot = 0.0;
        for (int j = 0; j < nk; ++j) dot += di[j] * pi[j];
        for (int j = 0; j < nk; ++j) di[j] = pi[j] * (di[j] - dot) * sc;
      }
      if (wq) {
        detail::take_head(k.value(), off, dh, kh);
        tmp.assign(static_cast<std::size_t>(nq) * dh, 0.0);
        detail::gemm_nn(dp.data(), kh.data(), tmp.data(), nq, nk, dh, false);
        detail::add_head(tmp, off, dh, t.grad_buf(q.id));
      }
      if (wk) {
        detail::take_head(q.value(), off, dh, qh);
        tmp.assign(static_cast<std::size_t>(nk) * dh, 0.0);
        detail::gemm_tn(dp.data(), qh.data(), tmp.data(), nq, nk, dh, false);
        detail::add_head(tmp, off, dh, t.grad_buf(k.id));
      }
    }
  });
}

// ---------------------------------------------------------------- convolution

/// 2-D convolution. x[C x H x W], w[O x C x k x k], bias[O] (may be invalid).
inline Var conv2d(Var x, Var w, Var bias, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.shape.size() != 3 || wv.shape.size() != 4) throw DimensionError("conv2d: expected CxHxW input and OxCxkxk weight");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int O = wv.dim(0), ks = wv.dim(2);
  if (wv.dim(1) != C || wv.dim(3) != ks) throw DimensionError("conv2d: weight shape " + shape_str(wv.shape));
  const int Ho = (H + 2 * pad - ks) / stride + 1;
  const int Wo = (W + 2 * pad - ks) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw DimensionError("conv2d: input too small");
  const bool has_bias = bias.valid();
  Tensor out({O, Ho, Wo});
  auto X = [&](int c, int i, int j) { return xv[(static_cast<std::size_t>(c) * H + i) * W + j]; };
  for (int o = 0; o < O; ++o) {
    const double b0 = has_bias ? bias.value()[static_cast<std::size_t>(o)] : 0.0;
    for (int oi = 0; oi < Ho; ++oi)
      for (int oj = 0; oj < Wo; ++oj) {
        double s = b0;
        for (int c = 0; c < C; ++c)
          for (int ki = 0; ki < ks; ++ki) {
            const int ii = oi * stride - pad + ki;
            if (ii < 0 || ii >= H) continue;
            for (int kj = 0; kj < ks; ++kj) {
              const int jj = oj * stride - pad + kj;
              if (jj < 0 || jj >= W) continue;
              s += wv[((static_cast<std::size_t>(o) * C + c) * ks + ki) * ks + kj] * X(c, ii, jj);
            }
          }
        out[(static_cast<std::size_t>(o) * Ho + oi) * Wo + oj] = s;
      }
  }
  auto bw = [x, w, bias, has_bias, C, H, W, O, ks, Ho, Wo, stride, pad](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    Tensor* gx = detail::wants(t, x) ? &t.grad_buf(x.id) : nullptr;
    Tensor* gw = detail::wants(t, w) ? &t.grad_buf(w.id) : nullptr;
    Tensor* gb = (has_bias && detail::wants(t, bias)) ? &t.grad_buf(bias.id) : nullptr;
    for (int o = 0; o < O; ++o)
      for (int oi = 0; oi < Ho; ++oi)
        for (int oj = 0; oj < Wo; ++oj) {
          const double go = g[(static_cast<std::size_t>(o) * Ho + oi) * Wo + oj];
          if (go == 0.0) continue;
          if (gb) (*gb)[static_cast<std::size_t>(o)] += go;
          for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < ks; ++ki) {
              const int ii = oi * stride - pad + ki;
              if (ii < 0 || ii >= H) continue;
              for (int kj = 0; kj < ks; ++kj) {
                const int jj = oj * stride - pad + kj;
                if (jj < 0 || jj >= W) continue;
                const std::size_t wi = ((static_cast<std::size_t>(o) * C + c) * ks + ki) * ks + kj;
                const std::size_t xi = (static_cast<std::size_t>(c) * H + ii) * W + jj;
                if (gw) (*gw)[wi] += go * xv[xi];
                if (gx) (*gx)[xi] += go * wv[wi];
              }
            }
        }
  };
  if (has_bias) return x.tape->push(std::move(out), {x, w, bias}, std::move(bw));
  return x.tape->push(std::move(out), {x, w}, std::move(bw));
}

/// 2x2 average pooling with stride 2 on C x H x W (odd trailing rows/cols dropped).
inline Var avg_pool2(Var x) {
  const Tensor& xv = x.value();
  if (xv.shape.size() != 3) throw DimensionError("avg_pool2: expected CxHxW");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int Ho = H / 2, Wo = W / 2;
  if (Ho == 0 || Wo == 0) throw DimensionError("avg_pool2: input too small");
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        double s = 0.0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) s += xv[(static_cast<std::size_t>(c) * H + 2 * i + a) * W + 2 * j + b];
        out[(static_cast<std::size_t>(c) * Ho + i) * Wo + j] = 0.25 * s;
      }
  return x.tape->push(std::move(out), {x}, [x, C, H, W, Ho, Wo](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buf(x.id);
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          const double go = 0.25 * g[(static_cast<std::size_t>(c) * Ho + i) * Wo + j];
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) gx[(static_cast<std::size_t>(c) * H + 2 * i + a) * W + 2 * j + b] += go;
        }
  });
}

}  // namespace patchsr::ag
