#include "m2/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "m2/params.hpp"

namespace m2 {

namespace kernels {

namespace {

// c[0..rows) += a_r * b for up to four rows sharing one row of b.
template <typename T>
inline void axpy_rows(std::size_t rows, std::size_t n, const T* a_vals, const T* __restrict b, T* __restrict c0,
                      T* __restrict c1, T* __restrict c2, T* __restrict c3) {
  const T a0 = a_vals[0];
  if (rows == 4) {
    const T a1 = a_vals[1], a2 = a_vals[2], a3 = a_vals[3];
    for (std::size_t j = 0; j < n; ++j) {
      const T bj = b[j];
      c0[j] += a0 * bj;
      c1[j] += a1 * bj;
      c2[j] += a2 * bj;
      c3[j] += a3 * bj;
    }
    return;
  }
  for (std::size_t j = 0; j < n; ++j) c0[j] += a0 * b[j];
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    for (std::size_t p = 0; p < k; ++p) {
      const T vals[4] = {a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]};
      axpy_rows<T>(4, n, vals, b + p * n, c + i * n, c + (i + 1) * n, c + (i + 2) * n, c + (i + 3) * n);
    }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) axpy_rows<T>(1, n, a + i * k + p, b + p * n, c + i * n, nullptr, nullptr, nullptr);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  // eight fixed partial sums per dot product keep the order deterministic
  // while letting the compiler use vector lanes
  constexpr std::size_t L = 8;
  for (std::size_t i = 0; i < m; ++i) {
    const T* __restrict ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* __restrict bj = b + j * k;
      T acc[L] = {};
      std::size_t p = 0;
      for (; p + L <= k; p += L)
        for (std::size_t l = 0; l < L; ++l) acc[l] += ai[p + l] * bj[p + l];
      T tail = 0;
      for (; p < k; ++p) tail += ai[p] * bj[p];
      c[i * n + j] += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
    }
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) axpy_rows<T>(4, n, ap + i, bp, c + i * n, c + (i + 1) * n, c + (i + 2) * n, c + (i + 3) * n);
    for (; i < m; ++i) axpy_rows<T>(1, n, ap + i, bp, c + i * n, nullptr, nullptr, nullptr);
  }
}

template <typename T>
void softmax_inplace(std::span<T> v) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T x : v) {
    if (std::isnan(x)) throw NumericError("softmax: NaN logit");
    mx = std::max(mx, x);
  }
  T total = 0;
  for (T& x : v) {
    x = std::exp(x - mx);
    total += x;
  }
  for (T& x : v) x /= total;
}

}  // namespace kernels

// ---- Tape ---------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::append(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  return append(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.op = "variable";
  n.requires_grad = record_;
  return append(std::move(n));
}

template <typename T>
Var<T> Tape<T>::param(const ParamStore<T>& store, ParamId id) {
  const Parameter<T>& p = store[id];
  Node n;
  n.external = &p.value;
  n.op = "param";
  n.param = id;
  n.requires_grad = record_ && p.trainable;
  return append(std::move(n));
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !value(id).empty()) n.grad = Tensor<T>(value(id).shape());
  return n.grad;
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, std::string_view op, std::initializer_list<std::size_t> parents,
                     BackwardFn backward) {
  bool any = false;
  if (record_)
    for (std::size_t p : parents) any = any || nodes_[p].requires_grad;
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = any;
  if (any) n.backward = std::move(backward);
  return append(std::move(n));
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, std::string_view op, const std::vector<std::size_t>& parents,
                     BackwardFn backward) {
  bool any = false;
  if (record_)
    for (std::size_t p : parents) any = any || nodes_[p].requires_grad;
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = any;
  if (any) n.backward = std::move(backward);
  return append(std::move(n));
}

template <typename T>
void Tape<T>::backward(Var<T> root, T seed) {
  if (root.tape != this) throw ContractError("backward: variable belongs to another tape");
  if (value(root.id).size() != 1) throw ContractError("backward: root must be a scalar");
  if (!nodes_[root.id].requires_grad) return;
  grad(root.id)[0] += seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    if (check_finite_ && !n.grad.all_finite())
      throw NumericError("non-finite gradient flowing into op '" + std::string(n.op) + "' (node " +
                         std::to_string(i) + ")");
    n.backward(*this, i);
  }
}

template <typename T>
void Tape<T>::zero_grad() {
  for (Node& n : nodes_) n.grad = Tensor<T>();
}

template <typename T>
void Tape<T>::accumulate_param_grads(std::vector<Tensor<T>>& grads) const {
  for (const Node& n : nodes_) {
    if (!n.param.valid() || n.grad.empty()) continue;
    Tensor<T>& g = grads.at(n.param.index);
    if (g.shape() != n.grad.shape()) throw ShapeError("accumulate_param_grads: buffer shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

// ---- operators ----------------------------------------------------------

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor<T> out = Tensor<T>::matrix(m, n);
  kernels::gemm_nn(m, k, n, av.data().data(), bv.data().data(), out.data().data());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), "matmul", {ia, ib}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia))
      kernels::gemm_nt(m, n, k, g.data().data(), t.value(ib).data().data(), t.grad(ia).data().data());
    if (t.requires_grad(ib))
      kernels::gemm_tn(k, m, n, t.value(ia).data().data(), g.data().data(), t.grad(ib).data().data());
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) throw ShapeError("matmul_nt: " + shape_str(av.shape()) + " x T" + shape_str(bv.shape()));
  Tensor<T> out = Tensor<T>::matrix(m, n);
  kernels::gemm_nt(m, k, n, av.data().data(), bv.data().data(), out.data().data());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), "matmul_nt", {ia, ib}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia))
      kernels::gemm_nn(m, n, k, g.data().data(), t.value(ib).data().data(), t.grad(ia).data().data());
    if (t.requires_grad(ib))
      kernels::gemm_tn(n, m, k, g.data().data(), t.value(ia).data().data(), t.grad(ib).data().data());
  });
}

template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> bias) {
  require_same_tape(x, w);
  require_same_tape(x, bias);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = bias.value();
  const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
  if (wv.rows() != k || bv.size() != n)
    throw ShapeError("affine: x" + shape_str(xv.shape()) + " w" + shape_str(wv.shape()) + " b" +
                     shape_str(bv.shape()));
  Tensor<T> out = Tensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) std::copy(bv.data().begin(), bv.data().end(), out.row(i).begin());
  kernels::gemm_nn(m, k, n, xv.data().data(), wv.data().data(), out.data().data());
  const std::size_t ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->push(std::move(out), "affine", {ix, iw, ib}, [ix, iw, ib, m, k, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ix))
      kernels::gemm_nt(m, n, k, g.data().data(), t.value(iw).data().data(), t.grad(ix).data().data());
    if (t.requires_grad(iw))
      kernels::gemm_tn(k, m, n, t.value(ix).data().data(), g.data().data(), t.grad(iw).data().data());
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  add_into(out, b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), "add", {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) add_into(t.grad(ia), g);
    if (t.requires_grad(ib)) add_into(t.grad(ib), g);
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  require_same_tape(a, row);
  const Tensor<T>& av = a.value();
  const Tensor<T>& rv = row.value();
  if (rv.size() != av.cols()) throw ShapeError("add_row: row length does not match columns");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  const std::size_t ia = a.id, ir = row.id;
  return a.tape->push(std::move(out), "add_row", {ia, ir}, [ia, ir](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) add_into(t.grad(ia), g);
    if (t.requires_grad(ir)) {
      Tensor<T>& gr = t.grad(ir);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), "sub", {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) add_into(t.grad(ia), g);
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), "mul", {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor<T>& ga = t.grad(ia);
      const Tensor<T>& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      const Tensor<T>& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.storage()) v *= factor;
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), "scale", {ia}, [ia, factor](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> add_n(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw ContractError("add_n: no terms");
  Tensor<T> out = terms.front().value();
  std::vector<std::size_t> ids{terms.front().id};
  for (std::size_t k = 1; k < terms.size(); ++k) {
    require_same_tape(terms.front(), terms[k]);
    require_same_shape(out, terms[k].value(), "add_n");
    add_into(out, terms[k].value());
    ids.push_back(terms[k].id);
  }
  return terms.front().tape->push(std::move(out), "add_n", ids, [ids](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t id : ids)
      if (t.requires_grad(id)) add_into(t.grad(id), g);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (T& v : out.storage()) v = v > T(0) ? v : T(0);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), "relu", {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (T& v : out.storage()) v = T(1) / (T(1) + std::exp(-v));
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), "sigmoid", {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

namespace {

// Strides of a softmax along `axis`: outer blocks, axis length, inner stride.
struct AxisLayout {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("softmax: axis out of range for shape " + shape_str(shape));
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const Tensor<T>& av = a.value();
  const AxisLayout l = axis_layout(av.shape(), axis);
  Tensor<T> out = av;
  std::vector<T> slice(l.len);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.len * l.inner + in;
      for (std::size_t j = 0; j < l.len; ++j) slice[j] = out[base + j * l.inner];
      kernels::softmax_inplace(std::span<T>(slice));
      for (std::size_t j = 0; j < l.len; ++j) out[base + j * l.inner] = slice[j];
    }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), "softmax", {ia}, [ia, l](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.len * l.inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < l.len; ++j) dot += g[base + j * l.inner] * y[base + j * l.inner];
        for (std::size_t j = 0; j < l.len; ++j) {
          const std::size_t idx = base + j * l.inner;
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  const Tensor<T>& av = a.value();
  Tensor<T> out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    for (T x : row) {
      if (std::isnan(x)) throw NumericError("log_softmax: NaN logit");
      mx = std::max(mx, x);
    }
    T total = 0;
    for (T x : row) total += std::exp(x - mx);
    const T lse = mx + std::log(total);
    for (T& x : row) x -= lse;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), "log_softmax", {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      T gs = 0;
      for (std::size_t j = 0; j < g.cols(); ++j) gs += g(r, j);
      for (std::size_t j = 0; j < g.cols(); ++j) ga(r, j) += g(r, j) - std::exp(y(r, j)) * gs;
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  const Tensor<T>& xv = x.value();
  const std::size_t rows = xv.rows(), n = xv.cols();
  if (n < 2) throw ShapeError("layer_norm: last dimension must be at least 2");
  if (gain.value().size() != n || bias.value().size() != n) throw ShapeError("layer_norm: gain/bias size mismatch");
  // Keep normalized activations and inverse std for the backward pass.
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  Tensor<T> out(xv.shape());
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= T(n);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat(r, j) = (row[j] - mean) * is;
      out(r, j) = xhat(r, j) * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->push(
      std::move(out), "layer_norm", {ix, ig, ib},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor<T>& gg = t.grad(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g(r, j) * xhat(r, j);
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g(r, j);
        }
        if (t.requires_grad(ix)) {
          Tensor<T>& gx = t.grad(ix);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g(r, j) * gv[j];
              mean_d += d;
              mean_dx += d * xhat(r, j);
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g(r, j) * gv[j];
              gx(r, j) += inv_std[r] * (d - mean_d - xhat(r, j) * mean_dx);
            }
          }
        }
      });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.id);
    offsets.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor<T> out = Tensor<T>::matrix(rows, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + offsets[k]);
  }
  return parts.front().tape->push(std::move(out), "concat_cols", ids,
                                  [ids, offsets, widths, rows](Tape<T>& t, std::size_t self) {
                                    const Tensor<T>& g = t.grad(self);
                                    for (std::size_t k = 0; k < ids.size(); ++k) {
                                      if (!t.requires_grad(ids[k])) continue;
                                      Tensor<T>& gp = t.grad(ids[k]);
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t j = 0; j < widths[k]; ++j) gp(r, j) += g(r, offsets[k] + j);
                                    }
                                  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t cols = parts.front().cols();
  std::vector<std::size_t> ids, offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    ids.push_back(p.id);
    offsets.push_back(total * cols);
    total += p.rows();
  }
  Tensor<T> out = Tensor<T>::matrix(total, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + offsets[k]);
  }
  return parts.front().tape->push(std::move(out), "concat_rows", ids, [ids, offsets](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor<T>& gp = t.grad(ids[k]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const Tensor<T>& av = a.value();
  if (begin > end || end > av.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t cols = av.cols();
  std::vector<T> data(av.data().begin() + begin * cols, av.data().begin() + end * cols);
  Tensor<T> out({end - begin, cols}, std::move(data));
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), "slice_rows", {ia}, [ia, begin, cols](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * cols + i] += g[i];
  });
}

template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("stack: no parts");
  const Shape inner = parts.front().shape();
  const std::size_t block = shape_size(inner);
  std::vector<std::size_t> ids;
  std::vector<T> data;
  data.reserve(block * parts.size());
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.shape() != inner) throw ShapeError("stack: shape mismatch");
    ids.push_back(p.id);
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return parts.front().tape->push(Tensor<T>(std::move(shape), std::move(data)), "stack", ids,
                                  [ids, block](Tape<T>& t, std::size_t self) {
                                    const Tensor<T>& g = t.grad(self);
                                    for (std::size_t k = 0; k < ids.size(); ++k) {
                                      if (!t.requires_grad(ids[k])) continue;
                                      Tensor<T>& gp = t.grad(ids[k]);
                                      for (std::size_t i = 0; i < block; ++i) gp[i] += g[k * block + i];
                                    }
                                  });
}

template <typename T>
Var<T> select(Var<T> a, std::size_t index) {
  const Tensor<T>& av = a.value();
  if (av.rank() < 2 || index >= av.dim(0)) throw ShapeError("select: index out of range");
  Shape inner(av.shape().begin() + 1, av.shape().end());
  const std::size_t block = shape_size(inner);
  std::vector<T> data(av.data().begin() + index * block, av.data().begin() + (index + 1) * block);
  const std::size_t ia = a.id;
  return a.tape->push(Tensor<T>(std::move(inner), std::move(data)), "select", {ia},
                      [ia, index, block](Tape<T>& t, std::size_t self) {
                        const Tensor<T>& g = t.grad(self);
                        Tensor<T>& ga = t.grad(ia);
                        for (std::size_t i = 0; i < block; ++i) ga[index * block + i] += g[i];
                      });
}

template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<std::int32_t>& ids) {
  const Tensor<T>& tv = table.value();
  const std::size_t cols = tv.cols();
  Tensor<T> out = Tensor<T>::matrix(ids.size(), cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows())
      throw InputError("gather_rows: id " + std::to_string(ids[r]) + " out of range [0," + std::to_string(tv.rows()) +
                       ")");
    auto src = tv.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const std::size_t it = table.id;
  return table.tape->push(std::move(out), "gather_rows", {it}, [it, ids](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gt = t.grad(it);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < g.cols(); ++j) gt(static_cast<std::size_t>(ids[r]), j) += g(r, j);
  });
}

template <typename T>
Var<T> dropout(Var<T> a, T keep, std::mt19937_64& rng) {
  if (keep >= T(1)) return a;
  if (keep <= T(0)) throw ConfigError("dropout: keep probability must be positive");
  std::bernoulli_distribution coin(static_cast<double>(keep));
  Tensor<T> mask(a.shape());
  for (T& m : mask.storage()) m = coin(rng) ? T(1) / keep : T(0);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), "dropout", {ia}, [ia, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().data()) total += v;
  const std::size_t ia = a.id;
  return a.tape->push(Tensor<T>({1}, {total}), "sum", {ia}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (T& v : t.grad(ia).storage()) v += g;
  });
}

template <typename T>
Var<T> pick_weighted_sum(Var<T> a, const std::vector<std::int32_t>& cols, const std::vector<T>& weights) {
  const Tensor<T>& av = a.value();
  if (cols.size() != av.rows() || weights.size() != av.rows())
    throw ShapeError("pick_weighted_sum: one column index and weight per row required");
  T total = 0;
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= av.cols())
      throw InputError("pick_weighted_sum: column out of range");
    if (weights[r] != T(0)) total += weights[r] * av(r, static_cast<std::size_t>(cols[r]));
  }
  const std::size_t ia = a.id;
  return a.tape->push(Tensor<T>({1}, {total}), "pick_weighted_sum", {ia},
                      [ia, cols, weights](Tape<T>& t, std::size_t self) {
                        const T g = t.grad(self)[0];
                        Tensor<T>& ga = t.grad(ia);
                        for (std::size_t r = 0; r < cols.size(); ++r)
                          ga(r, static_cast<std::size_t>(cols[r])) += g * weights[r];
                      });
}

#define M2_INSTANTIATE_AUTODIFF(T)                                                                 \
  template class Tape<T>;                                                                          \
  template Var<T> matmul(Var<T>, Var<T>);                                                          \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                       \
  template Var<T> affine(Var<T>, Var<T>, Var<T>);                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                             \
  template Var<T> add_row(Var<T>, Var<T>);                                                         \
  template Var<T> sub(Var<T>, Var<T>);                                                             \
  template Var<T> mul(Var<T>, Var<T>);                                                             \
  template Var<T> scale(Var<T>, T);                                                                \
  template Var<T> add_n(const std::vector<Var<T>>&);                                               \
  template Var<T> relu(Var<T>);                                                                    \
  template Var<T> sigmoid(Var<T>);                                                                 \
  template Var<T> softmax(Var<T>, std::size_t);                                                    \
  template Var<T> log_softmax(Var<T>);                                                             \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                           \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                         \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                         \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                                    \
  template Var<T> stack(const std::vector<Var<T>>&);                                               \
  template Var<T> select(Var<T>, std::size_t);                                                     \
  template Var<T> gather_rows(Var<T>, const std::vector<std::int32_t>&);                           \
  template Var<T> dropout(Var<T>, T, std::mt19937_64&);                                            \
  template Var<T> sum(Var<T>);                                                                     \
  template Var<T> pick_weighted_sum(Var<T>, const std::vector<std::int32_t>&, const std::vector<T>&); \
  template void kernels::gemm_nn(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);   \
  template void kernels::gemm_nt(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);   \
  template void kernels::gemm_tn(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);   \
  template void kernels::softmax_inplace(std::span<T>);

M2_INSTANTIATE_AUTODIFF(float)
M2_INSTANTIATE_AUTODIFF(double)

}  // namespace m2
