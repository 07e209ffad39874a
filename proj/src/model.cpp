#include "m2/model.hpp"

#include <json.hpp>

namespace m2 {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("model." + field + ": " + why); };
  if (d_model == 0) fail("d_model", "must be positive");
  if (heads == 0) fail("heads", "must be positive");
  if (d_model % heads != 0) fail("heads", "d_model must be divisible by heads");
  if (d_model < 2) fail("d_model", "layer norm needs at least 2 features");
  if (n_enc == 0) fail("n_enc", "at least one encoder layer required");
  if (n_dec == 0) fail("n_dec", "at least one decoder layer required");
  if (d_ff == 0) fail("d_ff", "must be positive");
  if (d_feat == 0) fail("d_feat", "must be positive");
  if (vocab_size < 5) fail("vocab_size", "must hold the 4 reserved tokens and at least one word");
  if (embedding == EmbeddingMode::External && d_external == 0) fail("d_external", "must be positive");
  if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) fail("dropout_keep", "must be in (0, 1]");
  if (connectivity == Connectivity::OneToOne && n_enc != n_dec)
    fail("connectivity", "one-to-one requires n_enc == n_dec");
}

std::string to_string(Connectivity c) {
  switch (c) {
    case Connectivity::LastLayer: return "last-layer";
    case Connectivity::OneToOne: return "one-to-one";
    case Connectivity::MeshedSigmoid: return "meshed-sigmoid";
    case Connectivity::MeshedSoftmax: return "meshed-softmax";
  }
  return "?";
}

std::string to_string(AttentionKind a) { return a == AttentionKind::AoA ? "aoa" : "standard"; }
std::string to_string(EmbeddingMode e) { return e == EmbeddingMode::External ? "external" : "learned"; }

Connectivity parse_connectivity(const std::string& s) {
  if (s == "last-layer") return Connectivity::LastLayer;
  if (s == "one-to-one") return Connectivity::OneToOne;
  if (s == "meshed-sigmoid" || s == "meshed") return Connectivity::MeshedSigmoid;
  if (s == "meshed-softmax") return Connectivity::MeshedSoftmax;
  throw ConfigError("connectivity: unknown value '" + s + "'");
}

AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "standard") return AttentionKind::Standard;
  if (s == "aoa") return AttentionKind::AoA;
  throw ConfigError("attention: unknown value '" + s + "'");
}

EmbeddingMode parse_embedding_mode(const std::string& s) {
  if (s == "learned") return EmbeddingMode::Learned;
  if (s == "external") return EmbeddingMode::External;
  throw ConfigError("embedding: unknown value '" + s + "'");
}

namespace {

json config_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},       {"heads", c.heads},
              {"n_enc", c.n_enc},           {"n_dec", c.n_dec},
              {"n_memory", c.n_memory},     {"d_ff", c.d_ff},
              {"d_feat", c.d_feat},         {"vocab_size", c.vocab_size},
              {"d_external", c.d_external}, {"connectivity", to_string(c.connectivity)},
              {"attention", to_string(c.attention)}, {"embedding", to_string(c.embedding)},
              {"dropout_keep", c.dropout_keep}, {"seed", c.seed}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("d_model", c.d_model);
  get("heads", c.heads);
  get("n_enc", c.n_enc);
  get("n_dec", c.n_dec);
  get("n_memory", c.n_memory);
  get("d_ff", c.d_ff);
  get("d_feat", c.d_feat);
  get("vocab_size", c.vocab_size);
  get("d_external", c.d_external);
  get("dropout_keep", c.dropout_keep);
  get("seed", c.seed);
  if (j.contains("connectivity")) c.connectivity = parse_connectivity(j.at("connectivity").get<std::string>());
  if (j.contains("attention")) c.attention = parse_attention_kind(j.at("attention").get<std::string>());
  if (j.contains("embedding")) c.embedding = parse_embedding_mode(j.at("embedding").get<std::string>());
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c) { return config_json(c).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

template <typename T>
M2Model<T>::M2Model(const ModelConfig& cfg) : config(cfg) {
  config.validate();
  const std::uint64_t seed = config.seed;
  const std::size_t d = config.d_model;
  const bool aoa = config.attention == AttentionKind::AoA;

  encoder.w_in = add_param(params, "encoder.input.w", ParamSpec{InitKind::GlorotUniform, config.d_feat, d}, seed);
  encoder.b_in = add_param(params, "encoder.input.b", ParamSpec{InitKind::Zero, 1, d}, seed);
  for (std::size_t i = 0; i < config.n_enc; ++i) {
    const std::string prefix = "encoder.layer" + std::to_string(i);
    EncoderLayerParams layer;
    layer.attention = make_attention_params(params, prefix + ".attn", d, config.heads, config.n_memory, aoa, seed);
    layer.norm_attention = make_layer_norm(params, prefix + ".norm_attn", d);
    layer.ff = make_feed_forward(params, prefix + ".ff", d, config.d_ff, seed);
    layer.norm_ff = make_layer_norm(params, prefix + ".norm_ff", d);
    encoder.layers.push_back(std::move(layer));
  }

  decoder.connectivity = config.connectivity;
  EmbeddingParams& emb = decoder.embedding;
  emb.mode = config.embedding;
  emb.d_model = d;
  const std::size_t vocab = config.vocab_size;
  if (emb.mode == EmbeddingMode::Learned) {
    emb.table = add_param(params, "decoder.embedding.table", ParamSpec{InitKind::GlorotUniform, vocab, d}, seed);
  } else {
    const std::size_t de = config.d_external;
    emb.table = params.add("decoder.embedding.external",
                           init_tensor<T>(ParamSpec{InitKind::GlorotUniform, vocab, de, 0, 0, 0, 0,
                                                    derive_seed(seed, "decoder.embedding.external")}),
                           /*trainable=*/false);
    emb.in_w = add_param(params, "decoder.embedding.in.w", ParamSpec{InitKind::GlorotUniform, de, d}, seed);
    emb.in_b = add_param(params, "decoder.embedding.in.b", ParamSpec{InitKind::Zero, 1, d}, seed);
  }
  const bool meshed =
      config.connectivity == Connectivity::MeshedSigmoid || config.connectivity == Connectivity::MeshedSoftmax;
  for (std::size_t j = 0; j < config.n_dec; ++j) {
    const std::string prefix = "decoder.layer" + std::to_string(j);
    DecoderLayerParams layer;
    layer.self_attention = make_attention_params(params, prefix + ".self", d, config.heads, 0, aoa, seed);
    layer.norm_self = make_layer_norm(params, prefix + ".norm_self", d);
    layer.cross_attention = make_attention_params(params, prefix + ".cross", d, config.heads, 0, aoa, seed);
    if (meshed)
      for (std::size_t i = 0; i < config.n_enc; ++i)
        layer.gates.push_back(make_gate(params, prefix + ".gate" + std::to_string(i), d, seed));
    layer.norm_cross = make_layer_norm(params, prefix + ".norm_cross", d);
    layer.ff = make_feed_forward(params, prefix + ".ff", d, config.d_ff, seed);
    layer.norm_ff = make_layer_norm(params, prefix + ".norm_ff", d);
    decoder.layers.push_back(std::move(layer));
  }
  const std::size_t out_width = emb.mode == EmbeddingMode::Learned ? vocab : config.d_external;
  emb.out_w = add_param(params, "decoder.output.w", ParamSpec{InitKind::GlorotUniform, d, out_width}, seed);
  emb.out_b = add_param(params, "decoder.output.b", ParamSpec{InitKind::Zero, 1, out_width}, seed);
}

template <typename T>
void load_parameters(M2Model<T>& model, const ParamStore<float>& source) {
  if (source.size() != model.params.size())
    throw FormatError("checkpoint holds " + std::to_string(source.size()) + " tensors, model expects " +
                      std::to_string(model.params.size()));
  for (std::size_t i = 0; i < source.size(); ++i) {
    const Parameter<float>& src = source.at(i);
    const ParamId id = model.params.find(src.name);
    if (!id.valid()) throw FormatError("checkpoint tensor '" + src.name + "' is not part of the model");
    Parameter<T>& dst = model.params[id];
    if (dst.value.shape() != src.value.shape())
      throw FormatError("checkpoint tensor '" + src.name + "' has shape " + shape_str(src.value.shape()) +
                        ", model expects " + shape_str(dst.value.shape()));
    dst.value = src.value.template cast<T>();
  }
}

template <typename T>
void set_external_embeddings(M2Model<T>& model, const Tensor<T>& table) {
  if (model.config.embedding != EmbeddingMode::External)
    throw ConfigError("set_external_embeddings: model is not in external embedding mode");
  Tensor<T>& dst = model.params.value(model.decoder.embedding.table);
  if (dst.shape() != table.shape())
    throw ShapeError("external embeddings: expected " + shape_str(dst.shape()) + ", got " + shape_str(table.shape()));
  dst = table;
}

template <typename T>
EncoderOutputs<T> encode_regions(const M2Model<T>& model, Var<T> features, const std::vector<std::uint8_t>& region_valid,
                                 const ForwardOptions& opt) {
  if (features.cols() != model.config.d_feat)
    throw ShapeError("region features have width " + std::to_string(features.cols()) + ", model expects " +
                     std::to_string(model.config.d_feat));
  Tape<T>& tape = *features.tape;
  Var<T> x = affine(features, tape.param(model.params, model.encoder.w_in), tape.param(model.params, model.encoder.b_in));
  return encode(model.params, model.encoder.layers, x, region_valid, opt);
}

template <typename T>
Var<T> decode_log_probs(const M2Model<T>& model, const EncoderOutputs<T>& enc, const std::vector<std::int32_t>& ids,
                        const ForwardOptions& opt) {
  if (ids.empty()) throw ContractError("decode: empty prefix");
  if (enc.levels.empty()) throw ContractError("decode: no encoder levels");
  Tape<T>& tape = *enc.levels.front().tape;
  const DecoderParams& dec = model.decoder;
  Var<T> y = embed_tokens(tape, model.params, dec.embedding, ids, 0);
  for (std::size_t j = 0; j < dec.layers.size(); ++j) {
    const auto levels = cross_keys_values(model.params, dec.layers[j], enc, dec.connectivity, j);
    y = decoder_layer(model.params, dec.layers[j], levels, y, enc.region_valid, dec.connectivity, opt);
  }
  return output_log_probs(model.params, dec.embedding, y);
}

template <typename T>
Tensor<T> decode_distributions(const M2Model<T>& model, const Tensor<T>& features,
                               const std::vector<std::uint8_t>& region_valid, const std::vector<std::int32_t>& ids) {
  Tape<T> tape(false);
  const auto enc = encode_regions(model, tape.constant(features), region_valid);
  Tensor<T> out = decode_log_probs(model, enc, ids).value();
  for (T& v : out.storage()) v = std::exp(v);
  return out;
}

void save_model(const std::string& path, const M2Model<float>& model, const std::string& extra_manifest) {
  json manifest;
  manifest["format"] = "m2-checkpoint";
  manifest["model"] = config_json(model.config);
  try {
    manifest["run"] = json::parse(extra_manifest);
  } catch (const json::exception&) {
    manifest["run"] = extra_manifest;
  }
  write_checkpoint(path, manifest.dump(2), model.params);
}

M2Model<float> load_model(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  json manifest;
  try {
    manifest = json::parse(ck.manifest);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!manifest.contains("model")) throw FormatError("checkpoint manifest has no model section");
  M2Model<float> model(config_from(manifest.at("model")));
  load_parameters(model, ck.params);
  return model;
}

template struct M2Model<float>;
template struct M2Model<double>;

#define M2_INSTANTIATE_MODEL(T)                                                                                    \
  template void load_parameters(M2Model<T>&, const ParamStore<float>&);                                            \
  template void set_external_embeddings(M2Model<T>&, const Tensor<T>&);                                            \
  template EncoderOutputs<T> encode_regions(const M2Model<T>&, Var<T>, const std::vector<std::uint8_t>&,           \
                                            const ForwardOptions&);                                                \
  template Var<T> decode_log_probs(const M2Model<T>&, const EncoderOutputs<T>&, const std::vector<std::int32_t>&,  \
                                   const ForwardOptions&);                                                         \
  template Tensor<T> decode_distributions(const M2Model<T>&, const Tensor<T>&, const std::vector<std::uint8_t>&,   \
                                          const std::vector<std::int32_t>&);

M2_INSTANTIATE_MODEL(float)
M2_INSTANTIATE_MODEL(double)

}  // namespace m2
