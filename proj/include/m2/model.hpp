#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "m2/decoder.hpp"
#include "m2/encoder.hpp"
#include "m2/numerics.hpp"

namespace m2 {

enum class AttentionKind { Standard, AoA };

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t n_enc = 3;
  std::size_t n_dec = 3;
  std::size_t n_memory = 40;
  std::size_t d_ff = 2048;
  std::size_t d_feat = 2048;
  std::size_t vocab_size = 0;
  std::size_t d_external = 300;  // external embedding width
  Connectivity connectivity = Connectivity::MeshedSigmoid;
  AttentionKind attention = AttentionKind::Standard;
  EmbeddingMode embedding = EmbeddingMode::Learned;
  double dropout_keep = 0.9;
  std::uint64_t seed = 1;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

std::string to_string(Connectivity c);
std::string to_string(AttentionKind a);
std::string to_string(EmbeddingMode e);
Connectivity parse_connectivity(const std::string& s);
AttentionKind parse_attention_kind(const std::string& s);
EmbeddingMode parse_embedding_mode(const std::string& s);

std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

// Configuration plus the parameter tree. Parameters are created in a fixed
// order with seeds derived from config.seed, so (config) determines the
// initial model bit-for-bit.
template <typename T>
struct M2Model {
  ModelConfig config;
  ParamStore<T> params;
  EncoderParams encoder;
  DecoderParams decoder;

  M2Model() = default;
  explicit M2Model(const ModelConfig& cfg);

  template <typename U>
  M2Model<U> cast() const {
    M2Model<U> out;
    out.config = config;
    out.params = params.template cast<U>();
    out.encoder = encoder;
    out.decoder = decoder;
    return out;
  }
};

// Copies every tensor of `source` into the model by name; names and shapes
// must match exactly.
template <typename T>
void load_parameters(M2Model<T>& model, const ParamStore<float>& source);

// Replaces the fixed external embedding table (external mode only).
template <typename T>
void set_external_embeddings(M2Model<T>& model, const Tensor<T>& table);

// Projects region features (n x d_feat) and runs the encoder stack.
template <typename T>
EncoderOutputs<T> encode_regions(const M2Model<T>& model, Var<T> features, const std::vector<std::uint8_t>& region_valid,
                                 const ForwardOptions& opt = {});

// Teacher-forced decoding: log-probabilities [t, |V|] where row s is the
// distribution over the token following ids[0..s].
template <typename T>
Var<T> decode_log_probs(const M2Model<T>& model, const EncoderOutputs<T>& enc, const std::vector<std::int32_t>& ids,
                        const ForwardOptions& opt = {});

// Convenience: probabilities for a prefix (exp of decode_log_probs), no tape kept.
template <typename T>
Tensor<T> decode_distributions(const M2Model<T>& model, const Tensor<T>& features,
                               const std::vector<std::uint8_t>& region_valid, const std::vector<std::int32_t>& ids);

void save_model(const std::string& path, const M2Model<float>& model, const std::string& extra_manifest = "{}");
M2Model<float> load_model(const std::string& path);

}  // namespace m2
