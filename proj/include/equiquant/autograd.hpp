#pragma once

// Dynamic reverse-mode tape over dense float tensors. A tape is rebuilt for
// every forward pass; nodes are appended in execution order so reverse
// iteration is a valid topological order.
//
// Forward reductions (matmul, sums, norms, scatter) accumulate in double and
// store float results. Rotated inputs then agree to within float rounding of
// the outputs rather than of every partial sum.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "equiquant/tensor.hpp"

namespace equiquant {

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  div,
  add_scalar,
  scale,
  relu,
  silu,
  abs,
  sum,
  mean,
  sum_axis,
  l2norm,
  reshape,
  gather,
  scatter_add,
  segment_softmax,
  slice,
  ste_round,
  fake_quantize,
  fake_quantize_weight,
  fake_quantize_bias,
  mddq,
  integer_linear,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::silu: return "silu";
    case OpKind::abs: return "abs";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::l2norm: return "l2norm";
    case OpKind::reshape: return "reshape";
    case OpKind::gather: return "gather";
    case OpKind::scatter_add: return "scatter_add";
    case OpKind::segment_softmax: return "segment_softmax";
    case OpKind::slice: return "slice";
    case OpKind::ste_round: return "ste_round";
    case OpKind::fake_quantize: return "fake_quantize";
    case OpKind::fake_quantize_weight: return "fake_quantize_weight";
    case OpKind::fake_quantize_bias: return "fake_quantize_bias";
    case OpKind::mddq: return "mddq";
    case OpKind::integer_linear: return "integer_linear";
  }
  return "?";
}

class Tape;

/// Handle to a tensor recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

using IndexList = std::shared_ptr<const std::vector<int>>;

inline IndexList make_index(std::vector<int> idx) {
  return std::make_shared<const std::vector<int>>(std::move(idx));
}

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  /// With `record_grad == false` no backward closures are kept (inference).
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{OpKind::leaf, record_grad_ && requires_grad, {}});
    values_.push_back(std::move(value));
    return Var{this, static_cast<int>(values_.size()) - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends a node. `backward` is dropped when no input requires a gradient.
  Var record(OpKind kind, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    if (record_grad_) {
      for (const Var& v : inputs) needs = needs || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }
    nodes_.push_back(Node{kind, needs, needs ? std::move(backward) : Backward{}});
    values_.push_back(std::move(value));
    return Var{this, static_cast<int>(values_.size()) - 1};
  }

  const Tensor& value(int id) const { return values_[static_cast<std::size_t>(id)]; }
  const Tensor& value(Var v) const { return value(v.id); }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }
  OpKind kind(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].kind; }
  std::size_t size() const noexcept { return values_.size(); }
  bool recording() const noexcept { return record_grad_; }

  void backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (value(loss).numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    }
    grads_.assign(values_.size(), Tensor());
    has_grad_.assign(values_.size(), 0);
    grad_slot(loss.id)[0] = 1.0f;
    for (int id = loss.id; id >= 0; --id) {
      const auto uid = static_cast<std::size_t>(id);
      if (!has_grad_[uid] || !nodes_[uid].backward) continue;
      nodes_[uid].backward(*this, grads_[uid]);
    }
  }

  bool has_grad(Var v) const {
    const auto uid = static_cast<std::size_t>(v.id);
    return uid < has_grad_.size() && has_grad_[uid];
  }

  Tensor grad_or_zeros(Var v) const {
    if (has_grad(v)) return grads_[static_cast<std::size_t>(v.id)];
    return Tensor(value(v).shape(), 0.0f);
  }

  /// Zero-initialised gradient buffer for `id`, created on first use.
  Tensor& grad_slot(int id) {
    const auto uid = static_cast<std::size_t>(id);
    if (!has_grad_[uid]) {
      grads_[uid] = Tensor(values_[uid].shape(), 0.0f);
      has_grad_[uid] = 1;
    }
    return grads_[uid];
  }

  bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  struct Node {
    OpKind kind;
    bool requires_grad;
    Backward backward;
  };

  bool record_grad_;
  std::vector<Tensor> values_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> has_grad_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

// Numpy-style right-aligned broadcasting plan.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

inline Broadcast broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t i = r - 1 - k;
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(da, db);
    p.stride_a[i] = da == 1 ? 0 : sa;
    p.stride_b[i] = db == 1 ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t n = numel_of(p.out);
  const std::size_t r = p.out.size();
  if (r == 0) {
    if (n) f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class Binary { add, sub, mul, div };

inline Var binary(Var a, Var b, Binary kind) {
  static constexpr OpKind kinds[] = {OpKind::add, OpKind::sub, OpKind::mul, OpKind::div};
  const OpKind op = kinds[static_cast<int>(kind)];
  same_tape(a, b, op_name(op));
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  auto apply = [kind](float u, float v) {
    switch (kind) {
      case Binary::add: return u + v;
      case Binary::sub: return u - v;
      case Binary::mul: return u * v;
      case Binary::div: return u / v;
    }
    return 0.0f;
  };

  if (x.shape() == y.shape()) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = apply(x[i], y[i]);
    const int ia = a.id, ib = b.id, io = static_cast<int>(t.size());
    return t.record(op, std::move(out), {a, b}, [ia, ib, io, kind](Tape& tp, const Tensor& g) {
      const Tensor& xv = tp.value(ia);
      const Tensor& yv = tp.value(ib);
      if (tp.wants_grad(ia)) {
        Tensor& ga = tp.grad_slot(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          switch (kind) {
            case Binary::add:
            case Binary::sub: ga[i] += g[i]; break;
            case Binary::mul: ga[i] += g[i] * yv[i]; break;
            case Binary::div: ga[i] += g[i] / yv[i]; break;
          }
        }
      }
      if (tp.wants_grad(ib)) {
        Tensor& gb = tp.grad_slot(ib);
        const Tensor& ov = tp.value(io);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          switch (kind) {
            case Binary::add: gb[i] += g[i]; break;
            case Binary::sub: gb[i] -= g[i]; break;
            case Binary::mul: gb[i] += g[i] * xv[i]; break;
            case Binary::div: gb[i] -= g[i] * ov[i] / yv[i]; break;
          }
        }
      }
    });
  }

  auto plan = std::make_shared<const Broadcast>(broadcast_plan(x.shape(), y.shape(), op_name(op)));
  Tensor out(plan->out);
  for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = apply(x[i], y[j]); });
  const int ia = a.id, ib = b.id, io = static_cast<int>(t.size());
  return t.record(op, std::move(out), {a, b}, [ia, ib, io, kind, plan](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    const Tensor& ov = tp.value(io);
    const bool want_a = tp.wants_grad(ia), want_b = tp.wants_grad(ib);
    Tensor* ga = want_a ? &tp.grad_slot(ia) : nullptr;
    Tensor* gb = want_b ? &tp.grad_slot(ib) : nullptr;
    for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      switch (kind) {
        case Binary::add:
          if (ga) (*ga)[i] += g[o];
          if (gb) (*gb)[j] += g[o];
          break;
        case Binary::sub:
          if (ga) (*ga)[i] += g[o];
          if (gb) (*gb)[j] -= g[o];
          break;
        case Binary::mul:
          if (ga) (*ga)[i] += g[o] * yv[j];
          if (gb) (*gb)[j] += g[o] * xv[i];
          break;
        case Binary::div:
          if (ga) (*ga)[i] += g[o] / yv[j];
          if (gb) (*gb)[j] -= g[o] * ov[o] / yv[j];
          break;
      }
    });
  });
}

template <class Fwd, class Deriv>
Var unary(Var a, OpKind op, Fwd fwd, Deriv deriv) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(x[i]);
  const int ia = a.id;
  return t.record(op, std::move(out), {a}, [ia, deriv](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ia);
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * deriv(xv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError("matmul: shapes " + shape_str(x.shape()) + " x " + shape_str(y.shape()) +
                     " do not conform");
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out(Shape{m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const float* yrow = y.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += xv * yrow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(acc[j]);
  }
  const int ia = a.id, ib = b.id;
  return a.tape->record(OpKind::matmul, std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    if (tp.wants_grad(ia)) {
      Tensor& ga = tp.grad_slot(ia);  // G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          float s = 0.0f;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * yv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (tp.wants_grad(ib)) {
      Tensor& gb = tp.grad_slot(ib);  // A^T * G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const float xv_ip = xv[i * k + p];
          if (xv_ip == 0.0f) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += xv_ip * g[i * n + j];
        }
    }
  });
}

inline Var add(Var a, Var b) { return detail::binary(a, b, detail::Binary::add); }
inline Var sub(Var a, Var b) { return detail::binary(a, b, detail::Binary::sub); }
inline Var mul(Var a, Var b) { return detail::binary(a, b, detail::Binary::mul); }
inline Var div(Var a, Var b) { return detail::binary(a, b, detail::Binary::div); }

inline Var add_scalar(Var a, float c) {
  return detail::unary(a, OpKind::add_scalar, [c](float x) { return x + c; }, [](float) { return 1.0f; });
}

inline Var scale(Var a, float c) {
  return detail::unary(a, OpKind::scale, [c](float x) { return x * c; }, [c](float) { return c; });
}

inline Var relu(Var a) {
  return detail::unary(
      a, OpKind::relu, [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

inline Var silu(Var a) {
  return detail::unary(
      a, OpKind::silu, [](float x) { return x * sigmoid(x); },
      [](float x) {
        const float s = sigmoid(x);
        return s * (1.0f + x * (1.0f - s));
      });
}

inline Var abs(Var a) {
  return detail::unary(
      a, OpKind::abs, [](float x) { return std::fabs(x); },
      [](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

/// Sum of all elements; returns a rank-0 tensor.
inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (float v : x.data()) s += v;
  const int ia = a.id;
  return a.tape->record(OpKind::sum, Tensor::scalar(static_cast<float>(s)), {a}, [ia](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0];
  });
}

inline Var mean(Var a) {
  const Tensor& x = a.value();
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (float v : x.data()) s += v;
  const float inv = 1.0f / static_cast<float>(x.numel());
  const int ia = a.id;
  return a.tape->record(OpKind::mean, Tensor::scalar(static_cast<float>(s / static_cast<double>(x.numel()))), {a}, [ia, inv](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0] * inv;
  });
}

/// Sums out one axis (the axis is removed from the shape).
inline Var sum_axis(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  if (axis >= x.rank()) throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t len = x.dim(axis);
  Shape os = x.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(os);
  std::vector<double> acc(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) acc[i] += x[(o * len + l) * inner + i];
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = static_cast<float>(acc[i]);
  }
  const int ia = a.id;
  return a.tape->record(OpKind::sum_axis, std::move(out), {a}, [ia, outer, len, inner](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * len + l) * inner + i] += g[o * inner + i];
  });
}

inline constexpr float kNormEps = 1e-12f;

/// Euclidean norm over the last axis, sqrt(sum x^2 + 1e-12); the last axis becomes 1.
inline Var l2norm(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("l2norm: scalar input");
  const std::size_t last = x.shape().back();
  const std::size_t rows = last ? x.numel() / last : 0;
  Shape os = x.shape();
  os.back() = 1;
  Tensor out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < last; ++c) s += static_cast<double>(x[r * last + c]) * x[r * last + c];
    out[r] = static_cast<float>(std::sqrt(s + static_cast<double>(kNormEps)));
  }
  const int ia = a.id, io = static_cast<int>(a.tape->size());
  return a.tape->record(OpKind::l2norm, std::move(out), {a}, [ia, io, rows, last](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ia);
    const Tensor& nv = tp.value(io);
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const float f = g[r] / nv[r];
      for (std::size_t c = 0; c < last; ++c) ga[r * last + c] += f * xv[r * last + c];
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id;
  return a.tape->record(OpKind::reshape, std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

/// out[e] = a[idx[e]] along the leading axis.
inline Var gather_rows(Var a, const IndexList& idx) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("gather: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t row = n ? x.numel() / n : 0;
  Shape os = x.shape();
  os[0] = idx->size();
  Tensor out(os);
  for (std::size_t e = 0; e < idx->size(); ++e) {
    const int src = (*idx)[e];
    if (src < 0 || static_cast<std::size_t>(src) >= n) {
      throw ShapeError("gather: index " + std::to_string(src) + " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + static_cast<std::size_t>(src) * row, row, &out[e * row]);
  }
  const int ia = a.id;
  return a.tape->record(OpKind::gather, std::move(out), {a}, [ia, idx, row](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t e = 0; e < idx->size(); ++e) {
      float* dst = &ga[static_cast<std::size_t>((*idx)[e]) * row];
      const float* src = g.data().data() + e * row;
      for (std::size_t c = 0; c < row; ++c) dst[c] += src[c];
    }
  });
}

/// out[idx[e]] += a[e]; result has `n` leading rows.
inline Var scatter_add_rows(Var a, const IndexList& idx, std::size_t n) {
  const Tensor& x = a.value();
  if (x.rank() == 0 || x.dim(0) != idx->size()) {
    throw ShapeError("scatter_add: " + shape_str(x.shape()) + " with " + std::to_string(idx->size()) + " indices");
  }
  const std::size_t row = idx->empty() ? 0 : x.numel() / idx->size();
  Shape os = x.shape();
  os[0] = n;
  Tensor out(os);
  const std::size_t row_out = n ? out.numel() / n : 0;
  std::vector<double> acc(out.numel(), 0.0);
  for (std::size_t e = 0; e < idx->size(); ++e) {
    const int dst = (*idx)[e];
    if (dst < 0 || static_cast<std::size_t>(dst) >= n) throw ShapeError("scatter_add: index out of range");
    for (std::size_t c = 0; c < row_out; ++c) acc[static_cast<std::size_t>(dst) * row_out + c] += x[e * row + c];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  const int ia = a.id;
  return a.tape->record(OpKind::scatter_add, std::move(out), {a}, [ia, idx, row_out](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t e = 0; e < idx->size(); ++e) {
      const float* src = g.data().data() + static_cast<std::size_t>((*idx)[e]) * row_out;
      for (std::size_t c = 0; c < row_out; ++c) ga[e * row_out + c] += src[c];
    }
  });
}

/// Softmax of `logits` ([E]) within groups sharing the same segment id (the
/// receiving atom). Segments with no entries produce nothing.
inline Var segment_softmax(Var logits, const IndexList& segment, std::size_t n_segments) {
  const Tensor& x = logits.value();
  if (x.rank() != 1 || x.dim(0) != segment->size()) {
    throw ShapeError("segment_softmax: logits " + shape_str(x.shape()) + " with " +
                     std::to_string(segment->size()) + " segment ids");
  }
  const std::size_t e_count = x.numel();
  std::vector<float> mx(n_segments, -std::numeric_limits<float>::infinity());
  for (std::size_t e = 0; e < e_count; ++e) {
    const auto s = static_cast<std::size_t>((*segment)[e]);
    if (s >= n_segments) throw ShapeError("segment_softmax: segment id out of range");
    mx[s] = std::max(mx[s], x[e]);
  }
  Tensor out(x.shape());
  std::vector<float> denom(n_segments, 0.0f);
  for (std::size_t e = 0; e < e_count; ++e) {
    const auto s = static_cast<std::size_t>((*segment)[e]);
    out[e] = std::exp(x[e] - mx[s]);
    denom[s] += out[e];
  }
  for (std::size_t e = 0; e < e_count; ++e) out[e] /= denom[static_cast<std::size_t>((*segment)[e])];
  const int ia = logits.id, io = static_cast<int>(logits.tape->size());
  return logits.tape->record(OpKind::segment_softmax, std::move(out), {logits},
                             [ia, io, segment, n_segments](Tape& tp, const Tensor& g) {
                               const Tensor& p = tp.value(io);
                               std::vector<float> dot(n_segments, 0.0f);
                               for (std::size_t e = 0; e < p.numel(); ++e)
                                 dot[static_cast<std::size_t>((*segment)[e])] += p[e] * g[e];
                               Tensor& ga = tp.grad_slot(ia);
                               for (std::size_t e = 0; e < p.numel(); ++e)
                                 ga[e] += p[e] * (g[e] - dot[static_cast<std::size_t>((*segment)[e])]);
                             });
}

/// Columns [begin, end) of the last axis.
inline Var slice_last(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (x.rank() == 0 || begin > end || end > x.shape().back()) {
    throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
  }
  const std::size_t last = x.shape().back();
  const std::size_t rows = last ? x.numel() / last : 0;
  const std::size_t w = end - begin;
  Shape os = x.shape();
  os.back() = w;
  Tensor out(os);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data().data() + r * last + begin, w, &out[r * w]);
  const int ia = a.id;
  return a.tape->record(OpKind::slice, std::move(out), {a}, [ia, rows, last, begin, w](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) ga[r * last + begin + c] += g[r * w + c];
  });
}

/// Round half away from zero; the rule every quantizer in this library uses.
inline float round_half_away(float x) noexcept { return std::round(x); }

/// Rounding with a straight-through (identity) gradient.
inline Var ste_round(Var a) {
  return detail::unary(a, OpKind::ste_round, [](float x) { return round_half_away(x); }, [](float) { return 1.0f; });
}

}  // namespace equiquant
