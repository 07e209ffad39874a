#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "m2/autodiff.hpp"
#include "m2/numerics.hpp"
#include "m2/params.hpp"

namespace m2 {

enum class MaskKind { None, Padding, Causal, Both };

// Validity of every (query, key) pair. Keys past the mask's width (memory
// slots appended after the regions) are always valid.
class AttentionMask {
 public:
  AttentionMask() = default;

  static AttentionMask none() { return {}; }
  static AttentionMask padding(const std::vector<std::uint8_t>& key_valid, std::size_t n_queries);
  static AttentionMask causal(std::size_t n);
  // Causal over n positions combined with key padding.
  static AttentionMask causal_padding(const std::vector<std::uint8_t>& key_valid);

  MaskKind kind() const { return kind_; }
  bool empty() const { return kind_ == MaskKind::None; }
  std::size_t queries() const { return n_q_; }
  std::size_t keys() const { return n_k_; }
  bool allows(std::size_t q, std::size_t k) const {
    return kind_ == MaskKind::None || k >= n_k_ || valid_[q * n_k_ + k] != 0;
  }

 private:
  MaskKind kind_ = MaskKind::None;
  std::size_t n_q_ = 0;
  std::size_t n_k_ = 0;  // keys covered by valid_; keys beyond are always valid
  std::vector<std::uint8_t> valid_;
};

// Additive logit applied to masked keys.
inline constexpr double kMaskedLogit = -1e9;

// Query/key/value/output projections of a multi-head attention site. w_o is
// absent when the site is wrapped by attention-on-attention.
struct ProjectionSet {
  std::size_t d_model = 0;
  std::size_t heads = 1;
  ParamId w_q, b_q, w_k, b_k, w_v, b_v;
  ParamId w_o, b_o;
  std::size_t d_head() const { return d_model / heads; }
};

// Learnable keys/values appended after the projected inputs, stored as
// [n_memory, heads * d_head] with column block j belonging to head j.
struct MemorySlots {
  std::size_t n_memory = 0;
  ParamId keys, values;
};

// Attention-on-attention: information = [q, a] W_info + b_info,
// gate = sigmoid([q, a] W_gate + b_gate), output = gate * information.
struct AoAParams {
  ParamId w_info, b_info, w_gate, b_gate;
};

struct AttentionParams {
  ProjectionSet proj;
  std::optional<MemorySlots> memory;
  std::optional<AoAParams> aoa;
};

// Deterministic per-parameter seeds derived from a base seed and the name.
std::uint64_t derive_seed(std::uint64_t base, const std::string& name);

template <typename T>
ParamId add_param(ParamStore<T>& store, const std::string& name, ParamSpec spec, std::uint64_t base_seed);

template <typename T>
AttentionParams make_attention_params(ParamStore<T>& store, const std::string& prefix, std::size_t d_model,
                                      std::size_t heads, std::size_t n_memory, bool aoa, std::uint64_t seed);

// Projected keys and values of an attention site, optionally with memory
// rows appended.
template <typename T>
struct KeyValue {
  Var<T> keys;
  Var<T> values;
  std::size_t n_memory = 0;
};

// softmax(Q K^T / sqrt(d_head) + mask) V computed independently for each
// column block of width d_head. Masked keys get kMaskedLogit; a query with no
// valid key is a ContractError. If `weights` is given it receives the
// attention weights as [heads, n_q, n_k].
template <typename T>
Var<T> sdpa(Var<T> q, Var<T> k, Var<T> v, const AttentionMask& mask, std::size_t heads = 1,
            Tensor<T>* weights = nullptr);

template <typename T>
KeyValue<T> project_kv(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_kv);

// Attends x_q over pre-projected keys/values and applies the output stage
// (W_o, or attention-on-attention when configured).
template <typename T>
Var<T> attend(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_q, const KeyValue<T>& kv,
              const AttentionMask& mask);

template <typename T>
Var<T> multi_head(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_q, Var<T> x_kv,
                  const AttentionMask& mask);

// Self-attention over x with memory slots appended to keys and values;
// queries come from x alone.
template <typename T>
Var<T> memory_augmented_attention(const ParamStore<T>& store, const AttentionParams& p, Var<T> x,
                                  const AttentionMask& mask);

// multi_head for a site configured with attention-on-attention.
template <typename T>
Var<T> aoa_attention(const ParamStore<T>& store, const AttentionParams& p, Var<T> x_q, Var<T> x_kv,
                     const AttentionMask& mask);

template <typename T>
Var<T> aoa_output(const ParamStore<T>& store, const AoAParams& p, Var<T> query, Var<T> attended);

}  // namespace m2
