#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "m2/encoder.hpp"

namespace m2 {

// Which encoder levels each decoder layer reads and how they are combined.
enum class Connectivity { LastLayer, OneToOne, MeshedSigmoid, MeshedSoftmax };

enum class EmbeddingMode {
  Learned,   // one-hot words through a learned table; separate output projection
  External,  // fixed external vectors with in/out adapters; output tied to the table transpose
};

// Gate for encoder level i: sigmoid([Y, C_i] W + b), W is 2d x d.
struct GateParams {
  ParamId w, b;
};

struct DecoderLayerParams {
  AttentionParams self_attention;
  AttentionParams cross_attention;  // shared by every encoder level
  std::vector<GateParams> gates;    // meshed variants only, one per level
  FeedForwardParams ff;
  LayerNormParams norm_self, norm_cross, norm_ff;
};

struct EmbeddingParams {
  EmbeddingMode mode = EmbeddingMode::Learned;
  std::size_t d_model = 0;
  ParamId table;            // [|V|, d] learned or [|V|, d_ext] external (not trainable)
  ParamId in_w, in_b;       // external only: d_ext -> d
  ParamId out_w, out_b;     // learned: d -> |V|; external: d -> d_ext
};

struct DecoderParams {
  Connectivity connectivity = Connectivity::MeshedSigmoid;
  EmbeddingParams embedding;
  std::vector<DecoderLayerParams> layers;
};

// Keys and values of one decoder self-attention site for positions already
// emitted; one cache per hypothesis and layer.
template <typename T>
struct SelfAttentionCache {
  Tensor<T> keys;    // [t, d]
  Tensor<T> values;  // [t, d]
  std::size_t length() const { return keys.empty() ? 0 : keys.rows(); }
};

// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same angle) for
// rows first_pos .. first_pos+count-1.
template <typename T>
Tensor<T> positional_encoding(std::size_t first_pos, std::size_t count, std::size_t d);

std::vector<std::size_t> levels_for_layer(Connectivity c, std::size_t n_levels, std::size_t layer_index);

template <typename T>
GateParams make_gate(ParamStore<T>& store, const std::string& prefix, std::size_t d, std::uint64_t seed);

// Word vectors plus positional encodings for positions first_pos onwards.
template <typename T>
Var<T> embed_tokens(Tape<T>& tape, const ParamStore<T>& store, const EmbeddingParams& p,
                    const std::vector<std::int32_t>& ids, std::size_t first_pos = 0);

// Every row placed at the same position (one newest token per hypothesis).
template <typename T>
Var<T> embed_tokens_at(Tape<T>& tape, const ParamStore<T>& store, const EmbeddingParams& p,
                       const std::vector<std::int32_t>& ids, std::size_t position);

// Final projection to vocabulary log-probabilities, one row per position.
template <typename T>
Var<T> output_log_probs(const ParamStore<T>& store, const EmbeddingParams& p, Var<T> hidden);

// Cross-attention keys/values of decoder layer `layer_index` for the levels
// it reads; computed once per image and reusable across decoding steps.
template <typename T>
std::vector<KeyValue<T>> cross_keys_values(const ParamStore<T>& store, const DecoderLayerParams& p,
                                           const EncoderOutputs<T>& enc, Connectivity c, std::size_t layer_index);

// C(X_i, Y): queries from Y, keys/values from one encoder level.
template <typename T>
Var<T> cross_attention(const ParamStore<T>& store, const AttentionParams& p, const KeyValue<T>& level, Var<T> y,
                       const std::vector<std::uint8_t>& region_valid);

template <typename T>
Var<T> gate_logits(const ParamStore<T>& store, const GateParams& p, Var<T> y, Var<T> c);

template <typename T>
Var<T> gate_weights(const ParamStore<T>& store, const GateParams& p, Var<T> y, Var<T> c);

// Combines the per-level cross-attentions according to the connectivity:
// meshed-sigmoid sum_i alpha_i * C_i / sqrt(N), meshed-softmax with alpha
// normalized across levels (no sqrt(N)), single-level variants return C.
template <typename T>
Var<T> meshed_attention(const ParamStore<T>& store, const DecoderLayerParams& p,
                        const std::vector<KeyValue<T>>& levels, Var<T> y,
                        const std::vector<std::uint8_t>& region_valid, Connectivity c);

// S = norm(Y + S_mask(Y)); Z = norm(S + M_mesh(S)); out = norm(Z + F(Z)).
// Without caches Y is a full sequence under a causal mask. With caches Y has
// one row per hypothesis holding its newest position, and each row attends
// to its own cache, which is extended in place.
template <typename T>
Var<T> decoder_layer(const ParamStore<T>& store, const DecoderLayerParams& p, const std::vector<KeyValue<T>>& levels,
                     Var<T> y, const std::vector<std::uint8_t>& region_valid, Connectivity c,
                     const ForwardOptions& opt = {}, std::vector<SelfAttentionCache<T>>* caches = nullptr);

}  // namespace m2
