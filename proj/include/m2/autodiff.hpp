#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <deque>
#include <vector>

#include "m2/tensor.hpp"

namespace m2 {

// Index of a parameter inside a ParamStore.
struct ParamId {
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t index = kNone;
  bool valid() const { return index != kNone; }
  friend bool operator==(ParamId, ParamId) = default;
};

template <typename T>
class ParamStore;

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
// tape itself is a topological order and backward() walks it in reverse.
// A tape is single-threaded; parallel shards each own one.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);
  Var<T> param(const ParamStore<T>& store, ParamId id);

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }

  // Gradient buffer of a node, allocated as zeros on first access.
  Tensor<T>& grad(std::size_t id);
  Tensor<T>& grad(Var<T> v) { return grad(v.id); }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  // Appends an op result. `backward` is dropped when no parent needs a
  // gradient or the tape is not recording.
  Var<T> push(Tensor<T> value, std::string_view op, std::initializer_list<std::size_t> parents, BackwardFn backward);
  Var<T> push(Tensor<T> value, std::string_view op, const std::vector<std::size_t>& parents, BackwardFn backward);

  // Seeds d(root)/d(root) = seed (root must be scalar) and back-propagates.
  // Throws NumericError naming the op whose incoming gradient is non-finite.
  void backward(Var<T> root, T seed = T(1));

  void zero_grad();

  // Adds every parameter leaf's gradient into grads[param index].
  void accumulate_param_grads(std::vector<Tensor<T>>& grads) const;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    BackwardFn backward;
    std::string_view op;
    ParamId param;
    bool requires_grad = false;
  };

  Var<T> append(Node node);

  std::deque<Node> nodes_;  // stable references while the tape grows
  bool record_ = true;
  bool check_finite_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// ---- operators ---------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
// x * w + bias (bias broadcast over rows)
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> bias);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
// Adds a length-cols vector to every row.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& terms);
template <typename T>
Var<T> relu(Var<T> a);
template <typename T>
Var<T> sigmoid(Var<T> a);
template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis);
// Along the last axis.
template <typename T>
Var<T> log_softmax(Var<T> a);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end);
// Stacks equal-shaped tensors along a new leading axis.
template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts);
// Index along the leading axis.
template <typename T>
Var<T> select(Var<T> a, std::size_t index);
template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<std::int32_t>& ids);
// Inverted dropout; identity when keep >= 1.
template <typename T>
Var<T> dropout(Var<T> a, T keep, std::mt19937_64& rng);
template <typename T>
Var<T> sum(Var<T> a);
// sum_r weights[r] * a(r, cols[r]); a scalar.
template <typename T>
Var<T> pick_weighted_sum(Var<T> a, const std::vector<std::int32_t>& cols, const std::vector<T>& weights);

// ---- plain-tensor kernels shared by the operators ---------------------

namespace kernels {

// c (m x n) += a (m x k) * b (k x n)
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);
// c (m x n) += a (m x k) * b^T, b is (n x k)
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);
// c (m x n) += a^T * b, a is (k x m), b is (k x n)
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);

// In-place softmax of one contiguous slice; returns nothing, NaN input throws.
template <typename T>
void softmax_inplace(std::span<T> v);

}  // namespace kernels

}  // namespace m2
