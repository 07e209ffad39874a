#include "m2/encoder.hpp"

#include <algorithm>

namespace m2 {

template <typename T>
LayerNormParams make_layer_norm(ParamStore<T>& store, const std::string& prefix, std::size_t d) {
  LayerNormParams p;
  p.gain = store.add(prefix + ".gain", Tensor<T>({1, d}, T(1)));
  p.bias = store.add(prefix + ".bias", Tensor<T>({1, d}, T(0)));
  return p;
}

template <typename T>
FeedForwardParams make_feed_forward(ParamStore<T>& store, const std::string& prefix, std::size_t d, std::size_t d_ff,
                                    std::uint64_t seed) {
  FeedForwardParams p;
  p.v = add_param(store, prefix + ".v", ParamSpec{InitKind::He, d, d_ff, d, d_ff}, seed);
  p.b = add_param(store, prefix + ".b", ParamSpec{InitKind::Zero, 1, d_ff}, seed);
  p.u = add_param(store, prefix + ".u", ParamSpec{InitKind::He, d_ff, d, d_ff, d}, seed);
  p.c = add_param(store, prefix + ".c", ParamSpec{InitKind::Zero, 1, d}, seed);
  return p;
}

template <typename T>
Var<T> apply_layer_norm(const ParamStore<T>& store, const LayerNormParams& p, Var<T> x) {
  Tape<T>& tape = *x.tape;
  return layer_norm(x, tape.param(store, p.gain), tape.param(store, p.bias), T(kLayerNormEps));
}

template <typename T>
Var<T> feed_forward(const ParamStore<T>& store, const FeedForwardParams& p, Var<T> x) {
  Tape<T>& tape = *x.tape;
  Var<T> hidden = relu(affine(x, tape.param(store, p.v), tape.param(store, p.b)));
  return affine(hidden, tape.param(store, p.u), tape.param(store, p.c));
}

template <typename T>
Var<T> encoding_layer(const ParamStore<T>& store, const EncoderLayerParams& p, Var<T> x,
                      const std::vector<std::uint8_t>& region_valid, const ForwardOptions& opt) {
  if (region_valid.size() != x.rows()) throw ShapeError("encoding_layer: mask length does not match region count");
  const bool all_valid = std::all_of(region_valid.begin(), region_valid.end(), [](auto v) { return v != 0; });
  const AttentionMask mask = all_valid ? AttentionMask::none() : AttentionMask::padding(region_valid, x.rows());
  Var<T> attended = apply_dropout(memory_augmented_attention(store, p.attention, x, mask), opt);
  Var<T> z = apply_layer_norm(store, p.norm_attention, add(x, attended));
  Var<T> ff = apply_dropout(feed_forward(store, p.ff, z), opt);
  return apply_layer_norm(store, p.norm_ff, add(z, ff));
}

template <typename T>
EncoderOutputs<T> encode(const ParamStore<T>& store, const std::vector<EncoderLayerParams>& layers, Var<T> x,
                         const std::vector<std::uint8_t>& region_valid, const ForwardOptions& opt) {
  if (layers.empty()) throw ConfigError("encode: at least one layer required");
  if (std::none_of(region_valid.begin(), region_valid.end(), [](auto v) { return v != 0; }))
    throw InputError("encode: no valid region");
  EncoderOutputs<T> out;
  out.region_valid = region_valid;
  Var<T> h = x;
  for (const auto& layer : layers) {
    h = encoding_layer(store, layer, h, region_valid, opt);
    out.levels.push_back(h);
  }
  return out;
}

#define M2_INSTANTIATE_ENCODER(T)                                                                                 \
  template LayerNormParams make_layer_norm(ParamStore<T>&, const std::string&, std::size_t);                      \
  template FeedForwardParams make_feed_forward(ParamStore<T>&, const std::string&, std::size_t, std::size_t,      \
                                               std::uint64_t);                                                    \
  template Var<T> apply_layer_norm(const ParamStore<T>&, const LayerNormParams&, Var<T>);                         \
  template Var<T> feed_forward(const ParamStore<T>&, const FeedForwardParams&, Var<T>);                           \
  template Var<T> encoding_layer(const ParamStore<T>&, const EncoderLayerParams&, Var<T>,                         \
                                 const std::vector<std::uint8_t>&, const ForwardOptions&);                        \
  template EncoderOutputs<T> encode(const ParamStore<T>&, const std::vector<EncoderLayerParams>&, Var<T>,         \
                                    const std::vector<std::uint8_t>&, const ForwardOptions&);

M2_INSTANTIATE_ENCODER(float)
M2_INSTANTIATE_ENCODER(double)

}  // namespace m2
