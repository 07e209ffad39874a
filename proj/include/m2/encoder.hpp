#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "m2/attention.hpp"

namespace m2 {

inline constexpr double kLayerNormEps = 1e-5;

// Dropout control for one forward pass. Inference passes use the default.
struct ForwardOptions {
  bool train = false;
  double keep = 1.0;
  std::mt19937_64* rng = nullptr;
};

template <typename T>
Var<T> apply_dropout(Var<T> x, const ForwardOptions& opt) {
  if (!opt.train || opt.keep >= 1.0 || opt.rng == nullptr) return x;
  return dropout(x, T(opt.keep), *opt.rng);
}

struct LayerNormParams {
  ParamId gain, bias;
};

// U relu(V x + b) + c applied to every row; V is d x d_ff, U is d_ff x d.
struct FeedForwardParams {
  ParamId v, b, u, c;
};

struct EncoderLayerParams {
  AttentionParams attention;
  FeedForwardParams ff;
  LayerNormParams norm_attention, norm_ff;
};

struct EncoderParams {
  ParamId w_in, b_in;  // region features (d_feat) -> d_model
  std::vector<EncoderLayerParams> layers;
};

// Multi-level encoding: one entry per encoder layer, all sharing the region
// validity mask.
template <typename T>
struct EncoderOutputs {
  std::vector<Var<T>> levels;
  std::vector<std::uint8_t> region_valid;
};

template <typename T>
LayerNormParams make_layer_norm(ParamStore<T>& store, const std::string& prefix, std::size_t d);
template <typename T>
FeedForwardParams make_feed_forward(ParamStore<T>& store, const std::string& prefix, std::size_t d, std::size_t d_ff,
                                    std::uint64_t seed);

template <typename T>
Var<T> apply_layer_norm(const ParamStore<T>& store, const LayerNormParams& p, Var<T> x);

template <typename T>
Var<T> feed_forward(const ParamStore<T>& store, const FeedForwardParams& p, Var<T> x);

// Z = norm(X + M_mem(X)); out = norm(Z + F(Z)).
template <typename T>
Var<T> encoding_layer(const ParamStore<T>& store, const EncoderLayerParams& p, Var<T> x,
                      const std::vector<std::uint8_t>& region_valid, const ForwardOptions& opt = {});

// Runs the stacked layers over already-projected regions x (n x d); level i
// consumes level i-1. Requires at least one valid region.
template <typename T>
EncoderOutputs<T> encode(const ParamStore<T>& store, const std::vector<EncoderLayerParams>& layers, Var<T> x,
                         const std::vector<std::uint8_t>& region_valid, const ForwardOptions& opt = {});

}  // namespace m2
