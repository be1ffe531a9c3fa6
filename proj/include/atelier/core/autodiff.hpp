// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode automatic differentiation over double tensors.
//
// A Tape records every operation in creation order; since inputs always
// precede outputs, walking the node list backwards is a valid topological
// order. Vars are cheap handles (tape pointer + node index).

#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <vector>

#include "atelier/core/tensor.hpp"

namespace atelier::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, nullptr); }
  Var variable(Tensor v) { return push(std::move(v), true, nullptr); }

  Var record(Tensor v, std::initializer_list<Var> inputs, Backward bw) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(v), needs, needs ? std::move(bw) : nullptr);
  }
  Var record(Tensor v, const std::vector<Var>& inputs, Backward bw) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(v), needs, needs ? std::move(bw) : nullptr);
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  // Gradient buffer for v, zero-initialized on first use.
  Tensor& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  void accumulate(Var v, const Tensor& g) {
    if (!needs_grad(v)) return;
    Tensor& buf = grad_buffer(v);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  // Gradient of the last backward() root with respect to v (zeros if unreached).
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }

  void backward(Var root) {
    require(value(root).size() == 1, "backward() needs a scalar root");
    for (Node& n : nodes_) n.grad = Tensor();
    grad_buffer(root)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var push(Tensor v, bool needs, Backward bw) {
    nodes_.push_back(Node{std::move(v), Tensor(), needs, std::move(bw)});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable addresses: callers hold references to values
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline void same_shape(Var a, Var b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

template <typename F, typename D>
Var unary(Var a, F f, D df) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  Tensor y = out;
  return a.tape->record(std::move(out), {a}, [a, y = std::move(y), df](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var div(Var a, Var b) {
  detail::same_shape(a, b, "div");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var scale(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = s * x[i];
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

// 1 - a, used for complementary gates.
inline Var one_minus(Var a) { return add_scalar(scale(a, -1.0), 1.0); }

inline Var clamp_min(Var a, double lo) {
  return detail::unary(
      a, [lo](double x) { return x < lo ? lo : x; }, [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Var sigmoid(Var a) {
  return detail::unary(a, logistic, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(Var a, double slope = 0.2) {
  return detail::unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                       [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (double& v : ga.values()) v += g[0];
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var sum_squares(Var a) { return sum(square(a)); }

inline Var reshape(Var a, Shape s) {
  Tensor out = a.value().reshaped(std::move(s));
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// Concatenates along the last axis; all inputs share their leading dims.
inline Var concat_last(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    Shape s = p.shape();
    const std::size_t w = s.back();
    s.pop_back();
    require(s == lead, "concat_last: leading dims differ");
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = shape_size(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j) out[r * total + offset + j] = v[r * widths[k] + j];
    offset += widths[k];
  }
  return parts[0].tape->record(std::move(out), parts, [parts, widths, rows, total](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (t.needs_grad(parts[k])) {
        Tensor& gp = t.grad_buffer(parts[k]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += g[r * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

inline Var slice_last(Var a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  const std::size_t w = detail::last_dim(x);
  require(start + len <= w, "slice_last: range out of bounds");
  const std::size_t rows = x.size() / w;
  Shape s = x.shape();
  s.back() = len;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = x[r * w + start + j];
  return a.tape->record(std::move(out), {a}, [a, start, len, w, rows](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) ga[r * w + start + j] += g[r * len + j];
  });
}

// Row i of a rank-2 tensor as a rank-1 tensor.
inline Var row(Var a, std::size_t i) {
  const Tensor& x = a.value();
  require(x.rank() == 2 && i < x.dim(0), "row: index out of range");
  const std::size_t n = x.dim(1);
  Tensor out({n});
  std::copy_n(x.data() + i * n, n, out.data());
  return a.tape->record(std::move(out), {a}, [a, i, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j];
  });
}

// Stacks rank-1 tensors of equal length into rows.
inline Var stack_rows(const std::vector<Var>& rows) {
  require(!rows.empty(), "stack_rows: no inputs");
  const std::size_t n = rows[0].size();
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].size() == n, "stack_rows: ragged rows");
    std::copy_n(rows[i].value().data(), n, out.data() + i * n);
  }
  return rows[0].tape->record(std::move(out), rows, [rows, n](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!t.needs_grad(rows[i])) continue;
      Tensor& gr = t.grad_buffer(rows[i]);
      for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
    }
  });
}

inline Var gather_rows(Var table, const std::vector<std::size_t>& ids) {
  const Tensor& w = table.value();
  require(w.rank() == 2, "gather_rows: table must be rank 2");
  const std::size_t n = w.dim(1);
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < w.dim(0), "gather_rows: id out of range");
    std::copy_n(w.data() + ids[i] * n, n, out.data() + i * n);
  }
  return table.tape->record(std::move(out), {table}, [table, ids, n](Tape& t, const Tensor& g) {
    Tensor& gw = t.grad_buffer(table);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gw[ids[i] * n + j] += g[i * n + j];
  });
}

// Repeats a rank-1 tensor [n] into m rows -> [m, n].
inline Var broadcast_rows(Var v, std::size_t m) {
  const Tensor& x = v.value();
  const std::size_t n = x.size();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.data(), n, out.data() + i * n);
  return v.tape->record(std::move(out), {v}, [v, m, n](Tape& t, const Tensor& g) {
    Tensor& gv = t.grad_buffer(v);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
  });
}

// Adds b [C] to every trailing-C slice of x.
inline Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const std::size_t c = bv.size();
  require(detail::last_dim(xv) == c, "add_bias: width mismatch " + shape_str(xv.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  return x.tape->record(std::move(out), {x, b}, [x, b, c](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    }
  });
}

// Multiplies every trailing-C slice of x by g [C].
inline Var mul_channels(Var x, Var gain) {
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const std::size_t c = gv.size();
  require(detail::last_dim(xv) == c, "mul_channels: width mismatch");
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * gv[i % c];
  return x.tape->record(std::move(out), {x, gain}, [x, gain, c](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    if (t.needs_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gv[i % c];
    }
    if (t.needs_grad(gain)) {
      Tensor& gg = t.grad_buffer(gain);
      for (std::size_t i = 0; i < g.size(); ++i) gg[i % c] += g[i] * xv[i];
    }
  });
}

// Scales row i of x [m, n] by s[i].
inline Var mul_rows(Var x, Var s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  require(xv.rank() == 2 && sv.size() == xv.dim(0), "mul_rows: shape mismatch");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * sv[i];
  return x.tape->record(std::move(out), {x, s}, [x, s, m, n](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& sv = t.value(s);
    if (t.needs_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * sv[i];
    }
    if (t.needs_grad(s)) {
      Tensor& gs = t.grad_buffer(s);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gs[i] += g[i * n + j] * xv[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

inline Var matmul(Var a, Var b) {
  Tensor out = matmul_values(a.value(), b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* gr = g.data() + i * n;
          const double* br = bv.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
          ga[i * k + p] += s;
        }
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av_ip = av[i * k + p];
          if (av_ip == 0.0) continue;
          const double* gr = g.data() + i * n;
          double* gbr = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbr[j] += av_ip * gr[j];
        }
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& x = a.value();
  require(x.rank() == 2, "transpose: rank 2 required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return a.tape->record(std::move(out), {a}, [a, m, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

// x [.., in] (rank 1 or 2) times w [in, out] plus b [out].
inline Var linear(Var x, Var w, Var b) {
  const bool vec = x.value().rank() == 1;
  Var x2 = vec ? reshape(x, {1, x.size()}) : x;
  Var y = add_bias(matmul(x2, w), b);
  return vec ? reshape(y, {y.size()}) : y;
}

// Euclidean norm of each row of a [m, n] -> [m].
inline Var row_norms(Var a) {
  const Tensor& x = a.value();
  require(x.rank() == 2, "row_norms: rank 2 required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
    out[i] = std::sqrt(s);
  }
  Tensor norms = out;
  return a.tape->record(std::move(out), {a}, [a, m, n, norms = std::move(norms)](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      if (norms[i] == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i] * x[i * n + j] / norms[i];
    }
  });
}

// u [m] outer v [n] -> [m, n].
inline Var outer(Var u, Var v) {
  return matmul(reshape(u, {u.size(), 1}), reshape(v, {1, v.size()}));
}

// ---------------------------------------------------------------------------
// Softmax family

// Row-wise softmax. Columns with col_mask[j] == false receive zero mass.
// Rows with row_mask[i] == false are uniform over the unmasked columns and
// do not propagate gradient.
inline Var softmax_rows(Var a, const std::vector<bool>& col_mask = {}, const std::vector<bool>& row_mask = {}) {
  const Tensor& x = a.value();
  require(x.rank() == 2, "softmax_rows: rank 2 required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(col_mask.empty() || col_mask.size() == n, "softmax_rows: column mask width");
  require(row_mask.empty() || row_mask.size() == m, "softmax_rows: row mask height");
  auto col_on = [&col_mask](std::size_t j) { return col_mask.empty() || col_mask[j]; };
  std::size_t live = 0;
  for (std::size_t j = 0; j < n; ++j) live += col_on(j) ? 1 : 0;
  require(live > 0, "softmax_rows: every column masked");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const bool row_on = row_mask.empty() || row_mask[i];
    if (!row_on) {
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = col_on(j) ? 1.0 / static_cast<double>(live) : 0.0;
      continue;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (col_on(j)) mx = std::max(mx, x[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = col_on(j) ? std::exp(x[i * n + j] - mx) : 0.0;
      out[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor p = out;
  return a.tape->record(std::move(out), {a}, [a, m, n, p = std::move(p), row_mask](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      if (!row_mask.empty() && !row_mask[i]) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

inline Var log_softmax_rows(Var a) {
  const Tensor& x = a.value();
  require(x.rank() == 2, "log_softmax_rows: rank 2 required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out({m, n});
  Tensor p({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[i * n + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = x[i * n + j] - lse;
      p[i * n + j] = std::exp(out[i * n + j]);
    }
  }
  return a.tape->record(std::move(out), {a}, [a, m, n, p = std::move(p)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] - p[i * n + j] * gs;
    }
  });
}

// out[i] = a[i, idx[i]].
inline Var pick(Var a, const std::vector<std::size_t>& idx) {
  const Tensor& x = a.value();
  require(x.rank() == 2 && idx.size() == x.dim(0), "pick: shape mismatch");
  const std::size_t n = x.dim(1);
  Tensor out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < n, "pick: index out of range");
    out[i] = x[i * n + idx[i]];
  }
  return a.tape->record(std::move(out), {a}, [a, idx, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < idx.size(); ++i) ga[i * n + idx[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Spatial ops on H x W x C grids

inline Var conv2d(Var x, Var kernel, Var bias, std::size_t stride = 1, std::size_t pad = 1) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  require(xv.rank() == 3 && kv.rank() == 4, "conv2d: expects HWC input and [kh,kw,cin,cout] kernel");
  const std::size_t h = xv.dim(0), w = xv.dim(1), cin = xv.dim(2);
  const std::size_t kh = kv.dim(0), kw = kv.dim(1), cout = kv.dim(3);
  require(kv.dim(2) == cin, "conv2d: input channels " + std::to_string(cin) + " vs kernel " + shape_str(kv.shape()));
  require(bias.size() == cout, "conv2d: bias width");
  require(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: input smaller than kernel");
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  Tensor out({ho, wo, cout});
  const Tensor& bv = bias.value();
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      double* o = out.data() + (oy * wo + ox) * cout;
      for (std::size_t co = 0; co < cout; ++co) o[co] = bv[co];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const double* xin = xv.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const double* kk = kv.data() + (ky * kw + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double a = xin[ci];
            if (a == 0.0) continue;
            const double* kr = kk + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += a * kr[co];
          }
        }
      }
    }
  return x.tape->record(std::move(out), {x, kernel, bias},
                        [=](Tape& t, const Tensor& g) {
                          const Tensor& xv = t.value(x);
                          const Tensor& kv = t.value(kernel);
                          const bool need_x = t.needs_grad(x), need_k = t.needs_grad(kernel);
                          Tensor* gx = need_x ? &t.grad_buffer(x) : nullptr;
                          Tensor* gk = need_k ? &t.grad_buffer(kernel) : nullptr;
                          if (t.needs_grad(bias)) {
                            Tensor& gb = t.grad_buffer(bias);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % cout] += g[i];
                          }
                          if (!need_x && !need_k) return;
                          for (std::size_t oy = 0; oy < ho; ++oy)
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                              const double* go = g.data() + (oy * wo + ox) * cout;
                              for (std::size_t ky = 0; ky < kh; ++ky) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                  const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                  const std::size_t in_off =
                                      (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                                  const std::size_t k_off = (ky * kw + kx) * cin * cout;
                                  for (std::size_t ci = 0; ci < cin; ++ci) {
                                    const double* kr = kv.data() + k_off + ci * cout;
                                    if (gx) {
                                      double s = 0.0;
                                      for (std::size_t co = 0; co < cout; ++co) s += go[co] * kr[co];
                                      (*gx)[in_off + ci] += s;
                                    }
                                    if (gk) {
                                      const double a = xv[in_off + ci];
                                      if (a == 0.0) continue;
                                      double* gkr = gk->data() + k_off + ci * cout;
                                      for (std::size_t co = 0; co < cout; ++co) gkr[co] += a * go[co];
                                    }
                                  }
                                }
                              }
                            }
                        });
}

inline Var upsample_nearest2(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "upsample_nearest2: HWC input required");
  const std::size_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  Tensor out({2 * h, 2 * w, c});
  for (std::size_t y = 0; y < 2 * h; ++y)
    for (std::size_t xx = 0; xx < 2 * w; ++xx)
      std::copy_n(xv.data() + ((y / 2) * w + xx / 2) * c, c, out.data() + (y * 2 * w + xx) * c);
  return x.tape->record(std::move(out), {x}, [x, h, w, c](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        for (std::size_t k = 0; k < c; ++k) gx[((y / 2) * w + xx / 2) * c + k] += g[(y * 2 * w + xx) * c + k];
  });
}

// Mean over all spatial positions of an H x W x C grid -> [C].
inline Var spatial_mean(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "spatial_mean: HWC input required");
  const std::size_t c = xv.dim(2), positions = xv.dim(0) * xv.dim(1);
  Tensor out({c});
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t k = 0; k < c; ++k) out[k] += xv[p * c + k];
  for (double& v : out.values()) v /= static_cast<double>(positions);
  return x.tape->record(std::move(out), {x}, [x, c, positions](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    const double inv = 1.0 / static_cast<double>(positions);
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t k = 0; k < c; ++k) gx[p * c + k] += g[k] * inv;
  });
}

// Tiles v [C] over an h x w grid -> [h, w, C].
inline Var broadcast_spatial(Var v, std::size_t h, std::size_t w) {
  return reshape(broadcast_rows(v, h * w), {h, w, v.size()});
}

// Per-channel spatial standardization with variance regularizer eps.
inline Var instance_norm(Var x, double eps = 1e-5) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "instance_norm: HWC input required");
  const std::size_t c = xv.dim(2), n = xv.dim(0) * xv.dim(1);
  std::vector<double> mu(c, 0.0), inv_std(c, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < c; ++k) mu[k] += xv[p * c + k];
  for (double& m : mu) m /= static_cast<double>(n);
  std::vector<double> var(c, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < c; ++k) {
      const double d = xv[p * c + k] - mu[k];
      var[k] += d * d;
    }
  for (std::size_t k = 0; k < c; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] / static_cast<double>(n) + eps);
  Tensor out(xv.shape());
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < c; ++k) out[p * c + k] = (xv[p * c + k] - mu[k]) * inv_std[k];
  Tensor xhat = out;
  return x.tape->record(std::move(out), {x}, [x, c, n, inv_std, xhat = std::move(xhat)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    std::vector<double> gsum(c, 0.0), gdot(c, 0.0);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t k = 0; k < c; ++k) {
        gsum[k] += g[p * c + k];
        gdot[k] += g[p * c + k] * xhat[p * c + k];
      }
    const double nn = static_cast<double>(n);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t k = 0; k < c; ++k)
        gx[p * c + k] += inv_std[k] / nn * (nn * g[p * c + k] - gsum[k] - xhat[p * c + k] * gdot[k]);
  });
}

// Unnormalized Gram matrix: G[a][b] = sum_p f[p][a] * f[p][b].
inline Tensor gram_values(const Tensor& f) {
  require(f.rank() == 3, "gram: HWC input required");
  const std::size_t c = f.dim(2), n = f.dim(0) * f.dim(1);
  Tensor g({c, c});
  for (std::size_t p = 0; p < n; ++p) {
    const double* fp = f.data() + p * c;
    for (std::size_t a = 0; a < c; ++a) {
      const double fa = fp[a];
      for (std::size_t b = a; b < c; ++b) g[a * c + b] += fa * fp[b];
    }
  }
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < a; ++b) g[a * c + b] = g[b * c + a];
  return g;
}

inline Var gram(Var f) {
  Tensor out = gram_values(f.value());
  return f.tape->record(std::move(out), {f}, [f](Tape& t, const Tensor& g) {
    const Tensor& fv = t.value(f);
    const std::size_t c = fv.dim(2), n = fv.dim(0) * fv.dim(1);
    Tensor& gf = t.grad_buffer(f);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t a = 0; a < c; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < c; ++b) s += (g[a * c + b] + g[b * c + a]) * fv[p * c + b];
        gf[p * c + a] += s;
      }
  });
}

}  // namespace atelier::ad
