#include "m2/decoder.hpp"

#include <algorithm>
#include <cmath>

namespace m2 {

template <typename T>
Tensor<T> positional_encoding(std::size_t first_pos, std::size_t count, std::size_t d) {
  Tensor<T> pe = Tensor<T>::matrix(count, d);
  for (std::size_t r = 0; r < count; ++r) {
    const double pos = double(first_pos + r);
    for (std::size_t i = 0; 2 * i < d; ++i) {
      const double angle = pos / std::pow(10000.0, double(2 * i) / double(d));
      pe(r, 2 * i) = T(std::sin(angle));
      if (2 * i + 1 < d) pe(r, 2 * i + 1) = T(std::cos(angle));
    }
  }
  return pe;
}

std::vector<std::size_t> levels_for_layer(Connectivity c, std::size_t n_levels, std::size_t layer_index) {
  switch (c) {
    case Connectivity::LastLayer:
      return {n_levels - 1};
    case Connectivity::OneToOne:
      if (layer_index >= n_levels)
        throw ConfigError("one-to-one connectivity: decoder layer " + std::to_string(layer_index) +
                          " has no matching encoder level");
      return {layer_index};
    case Connectivity::MeshedSigmoid:
    case Connectivity::MeshedSoftmax: {
      std::vector<std::size_t> all(n_levels);
      for (std::size_t i = 0; i < n_levels; ++i) all[i] = i;
      return all;
    }
  }
  return {};
}

template <typename T>
GateParams make_gate(ParamStore<T>& store, const std::string& prefix, std::size_t d, std::uint64_t seed) {
  GateParams g;
  g.w = add_param(store, prefix + ".w", ParamSpec{InitKind::GlorotUniform, 2 * d, d, 2 * d, d}, seed);
  g.b = add_param(store, prefix + ".b", ParamSpec{InitKind::Zero, 1, d}, seed);
  return g;
}

namespace {

template <typename T>
Var<T> embed_rows(Tape<T>& tape, const ParamStore<T>& store, const EmbeddingParams& p,
                  const std::vector<std::int32_t>& ids, Tensor<T> pe) {
  Var<T> words = gather_rows(tape.param(store, p.table), ids);
  if (p.mode == EmbeddingMode::External) words = affine(words, tape.param(store, p.in_w), tape.param(store, p.in_b));
  if (words.cols() != pe.cols()) throw ShapeError("embed_tokens: embedding width does not match d_model");
  return add(words, tape.constant(std::move(pe)));
}

}  // namespace

template <typename T>
Var<T> embed_tokens(Tape<T>& tape, const ParamStore<T>& store, const EmbeddingParams& p,
                    const std::vector<std::int32_t>& ids, std::size_t first_pos) {
  return embed_rows(tape, store, p, ids, positional_encoding<T>(first_pos, ids.size(), p.d_model));
}

template <typename T>
Var<T> embed_tokens_at(Tape<T>& tape, const ParamStore<T>& store, const EmbeddingParams& p,
                       const std::vector<std::int32_t>& ids, std::size_t position) {
  const Tensor<T> one = positional_encoding<T>(position, 1, p.d_model);
  Tensor<T> pe = Tensor<T>::matrix(ids.size(), p.d_model);
  for (std::size_t r = 0; r < ids.size(); ++r) std::copy(one.data().begin(), one.data().end(), pe.row(r).begin());
  return embed_rows(tape, store, p, ids, std::move(pe));
}

template <typename T>
Var<T> output_log_probs(const ParamStore<T>& store, const EmbeddingParams& p, Var<T> hidden) {
  Tape<T>& tape = *hidden.tape;
  Var<T> projected = affine(hidden, tape.param(store, p.out_w), tape.param(store, p.out_b));
  if (p.mode == EmbeddingMode::External) projected = matmul_nt(projected, tape.param(store, p.table));
  return log_softmax(projected);
}

template <typename T>
std::vector<KeyValue<T>> cross_keys_values(const ParamStore<T>& store, const DecoderLayerParams& p,
                                           const EncoderOutputs<T>& enc, Connectivity c, std::size_t layer_index) {
  std::vector<KeyValue<T>> out;
  for (std::size_t level : levels_for_layer(c, enc.levels.size(), layer_index))
    out.push_back(project_kv(store, p.cross_attention, enc.levels[level]));
  return out;
}

namespace {

std::vector<std::uint8_t> all_valid(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

AttentionMask region_mask(const std::vector<std::uint8_t>& region_valid, std::size_t n_queries) {
  const bool full = std::all_of(region_valid.begin(), region_valid.end(), [](auto v) { return v != 0; });
  return full ? AttentionMask::none() : AttentionMask::padding(region_valid, n_queries);
}

}  // namespace

template <typename T>
Var<T> cross_attention(const ParamStore<T>& store, const AttentionParams& p, const KeyValue<T>& level, Var<T> y,
                       const std::vector<std::uint8_t>& region_valid) {
  const std::vector<std::uint8_t> valid = region_valid.empty() ? all_valid(level.keys.rows()) : region_valid;
  if (valid.size() != level.keys.rows()) throw ShapeError("cross_attention: mask length does not match regions");
  return attend(store, p, y, level, region_mask(valid, y.rows()));
}

template <typename T>
Var<T> gate_logits(const ParamStore<T>& store, const GateParams& p, Var<T> y, Var<T> c) {
  if (y.shape() != c.shape()) throw ShapeError("gate: query and cross-attention shapes differ");
  Tape<T>& tape = *y.tape;
  return affine(concat_cols<T>({y, c}), tape.param(store, p.w), tape.param(store, p.b));
}

template <typename T>
Var<T> gate_weights(const ParamStore<T>& store, const GateParams& p, Var<T> y, Var<T> c) {
  return sigmoid(gate_logits(store, p, y, c));
}

template <typename T>
Var<T> meshed_attention(const ParamStore<T>& store, const DecoderLayerParams& p,
                        const std::vector<KeyValue<T>>& levels, Var<T> y,
                        const std::vector<std::uint8_t>& region_valid, Connectivity c) {
  if (levels.empty()) throw ConfigError("meshed_attention: no encoder levels");
  std::vector<Var<T>> attended;
  attended.reserve(levels.size());
  for (const auto& level : levels) attended.push_back(cross_attention(store, p.cross_attention, level, y, region_valid));
  if (c == Connectivity::LastLayer || c == Connectivity::OneToOne) {
    if (levels.size() != 1) throw ConfigError("single-level connectivity given several encoder levels");
    return attended.front();
  }
  if (p.gates.size() != levels.size())
    throw ConfigError("meshed_attention: " + std::to_string(p.gates.size()) + " gates for " +
                      std::to_string(levels.size()) + " levels");
  std::vector<Var<T>> terms;
  if (c == Connectivity::MeshedSigmoid) {
    for (std::size_t i = 0; i < levels.size(); ++i)
      terms.push_back(mul(gate_weights(store, p.gates[i], y, attended[i]), attended[i]));
    return scale(add_n(terms), T(1) / std::sqrt(T(levels.size())));
  }
  std::vector<Var<T>> logits;
  for (std::size_t i = 0; i < levels.size(); ++i) logits.push_back(gate_logits(store, p.gates[i], y, attended[i]));
  Var<T> alpha = softmax(stack(logits), 0);
  for (std::size_t i = 0; i < levels.size(); ++i) terms.push_back(mul(select(alpha, i), attended[i]));
  return add_n(terms);
}

template <typename T>
Var<T> decoder_layer(const ParamStore<T>& store, const DecoderLayerParams& p, const std::vector<KeyValue<T>>& levels,
                     Var<T> y, const std::vector<std::uint8_t>& region_valid, Connectivity c,
                     const ForwardOptions& opt, std::vector<SelfAttentionCache<T>>* caches) {
  Tape<T>& tape = *y.tape;
  Var<T> self_attended;
  if (caches == nullptr) {
    self_attended = multi_head(store, p.self_attention, y, y, AttentionMask::causal(y.rows()));
  } else {
    if (caches->size() != y.rows()) throw ShapeError("decoder_layer: one cache per hypothesis row required");
    const KeyValue<T> fresh = project_kv(store, p.self_attention, y);
    std::vector<Var<T>> rows;
    rows.reserve(y.rows());
    for (std::size_t h = 0; h < y.rows(); ++h) {
      SelfAttentionCache<T>& cache = (*caches)[h];
      KeyValue<T> kv;
      kv.keys = slice_rows(fresh.keys, h, h + 1);
      kv.values = slice_rows(fresh.values, h, h + 1);
      if (cache.length() > 0) {
        kv.keys = concat_rows<T>({tape.constant(cache.keys), kv.keys});
        kv.values = concat_rows<T>({tape.constant(cache.values), kv.values});
      }
      rows.push_back(attend(store, p.self_attention, slice_rows(y, h, h + 1), kv, AttentionMask::none()));
      cache.keys = kv.keys.value();
      cache.values = kv.values.value();
    }
    self_attended = concat_rows(rows);
  }
  Var<T> s = apply_layer_norm(store, p.norm_self, add(y, apply_dropout(self_attended, opt)));
  Var<T> mesh = apply_dropout(meshed_attention(store, p, levels, s, region_valid, c), opt);
  Var<T> z = apply_layer_norm(store, p.norm_cross, add(s, mesh));
  Var<T> ff = apply_dropout(feed_forward(store, p.ff, z), opt);
  return apply_layer_norm(store, p.norm_ff, add(z, ff));
}

#define M2_INSTANTIATE_DECODER(T)                                                                                 \
  template Tensor<T> positional_encoding(std::size_t, std::size_t, std::size_t);                                  \
  template GateParams make_gate(ParamStore<T>&, const std::string&, std::size_t, std::uint64_t);                  \
  template Var<T> embed_tokens(Tape<T>&, const ParamStore<T>&, const EmbeddingParams&,                            \
                               const std::vector<std::int32_t>&, std::size_t);                                    \
  template Var<T> embed_tokens_at(Tape<T>&, const ParamStore<T>&, const EmbeddingParams&,                         \
                                  const std::vector<std::int32_t>&, std::size_t);                                 \
  template Var<T> output_log_probs(const ParamStore<T>&, const EmbeddingParams&, Var<T>);                         \
  template std::vector<KeyValue<T>> cross_keys_values(const ParamStore<T>&, const DecoderLayerParams&,            \
                                                      const EncoderOutputs<T>&, Connectivity, std::size_t);       \
  template Var<T> cross_attention(const ParamStore<T>&, const AttentionParams&, const KeyValue<T>&, Var<T>,       \
                                  const std::vector<std::uint8_t>&);                                              \
  template Var<T> gate_logits(const ParamStore<T>&, const GateParams&, Var<T>, Var<T>);                           \
  template Var<T> gate_weights(const ParamStore<T>&, const GateParams&, Var<T>, Var<T>);                          \
  template Var<T> meshed_attention(const ParamStore<T>&, const DecoderLayerParams&,                               \
                                   const std::vector<KeyValue<T>>&, Var<T>, const std::vector<std::uint8_t>&,     \
                                   Connectivity);                                                                 \
  template Var<T> decoder_layer(const ParamStore<T>&, const DecoderLayerParams&, const std::vector<KeyValue<T>>&, \
                                Var<T>, const std::vector<std::uint8_t>&, Connectivity, const ForwardOptions&,    \
                                std::vector<SelfAttentionCache<T>>*);

M2_INSTANTIATE_DECODER(float)
M2_INSTANTIATE_DECODER(double)

}  // namespace m2
