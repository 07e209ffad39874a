#include "m2/app.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "m2/errors.hpp"

namespace m2 {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json model_json(const ModelConfig& m) {
  return json{{"d_model", m.d_model},       {"heads", m.heads},
              {"n_enc", m.n_enc},           {"n_dec", m.n_dec},
              {"n_memory", m.n_memory},     {"d_ff", m.d_ff},
              {"d_external", m.d_external}, {"connectivity", to_string(m.connectivity)},
              {"attention", to_string(m.attention)}, {"embedding", to_string(m.embedding)}};
}

void read_model(const json& j, ModelConfig& m) {
  if (!j.is_object()) throw ConfigError("model: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "d_model") m.d_model = value.get<std::size_t>();
      else if (key == "heads") m.heads = value.get<std::size_t>();
      else if (key == "n_enc") m.n_enc = value.get<std::size_t>();
      else if (key == "n_dec") m.n_dec = value.get<std::size_t>();
      else if (key == "n_memory") m.n_memory = value.get<std::size_t>();
      else if (key == "d_ff") m.d_ff = value.get<std::size_t>();
      else if (key == "d_external") m.d_external = value.get<std::size_t>();
      else if (key == "connectivity") m.connectivity = parse_connectivity(value.get<std::string>());
      else if (key == "attention") m.attention = parse_attention_kind(value.get<std::string>());
      else if (key == "embedding") m.embedding = parse_embedding_mode(value.get<std::string>());
      else throw ConfigError("model." + key + ": unknown field");
    } catch (const json::exception& e) {
      throw ConfigError("model." + key + ": " + e.what());
    } catch (const ConfigError& e) {
      const std::string what = e.what();
      if (what.rfind("model.", 0) == 0) throw;
      throw ConfigError("model." + what);
    }
  }
}

void read_data(const json& j, DataPaths& d) {
  if (!j.is_object()) throw ConfigError("data: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "manifest") d.manifest = value.get<std::string>();
      else if (key == "vocab") d.vocab = value.get<std::string>();
      else if (key == "glove") d.glove = value.get<std::string>();
      else if (key == "min_count") d.min_count = value.get<std::size_t>();
      else throw ConfigError("data." + key + ": unknown field");
    } catch (const json::exception& e) {
      throw ConfigError("data." + key + ": " + e.what());
    }
  }
}

std::vector<TrainingImage> load_split(const SplitFiles& files, std::size_t d_feat, const WarningSink& warn) {
  return to_training_images(
      join_examples(load_features(files.features, d_feat, kMaxRegions, warn), load_captions(files.captions)));
}

std::vector<std::vector<TokenList>> references_of(const std::vector<TrainingImage>& images) {
  std::vector<std::vector<TokenList>> refs;
  refs.reserve(images.size());
  for (const auto& im : images) refs.push_back(im.references);
  return refs;
}

}  // namespace

RunConfig::RunConfig() {
  model.d_model = 64;
  model.heads = 4;
  model.n_enc = 3;
  model.n_dec = 3;
  model.n_memory = 8;
  model.d_ff = 256;
  train.warmup = 200;
  train.xe_steps = 1500;
  train.rl_steps = 500;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.seed = seed;
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate(bool rl_stage) const {
  ModelConfig m = model_config();
  if (m.d_feat == 0) m.d_feat = 1;
  if (m.vocab_size == 0) m.vocab_size = Vocabulary::kReserved + 1;
  m.validate();
  train_config().validate(rl_stage);
  if (out.empty()) throw ConfigError("out: must not be empty");
  if (data.min_count == 0) throw ConfigError("data.min_count: must be positive");
  if (m.embedding == EmbeddingMode::External && data.glove.empty())
    throw ConfigError("data.glove: required by model.embedding = external");
}

std::string run_config_to_json(const RunConfig& c) {
  json j{{"model", model_json(c.model)},
         {"train", json::parse(train_config_to_json(c.train))},
         {"data", {{"manifest", c.data.manifest}, {"vocab", c.data.vocab}, {"glove", c.data.glove},
                   {"min_count", c.data.min_count}}},
         {"out", c.out},
         {"seed", c.seed}};
  j["train"].erase("seed");
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text, const RunConfig& defaults) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c = defaults;
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      read_model(value, c.model);
    } else if (key == "train") {
      if (value.contains("seed")) throw ConfigError("train.seed: set the top-level seed instead");
      c.train = train_config_from_json(value.dump(), c.train);
    } else if (key == "data") {
      read_data(value, c.data);
    } else if (key == "out") {
      if (!value.is_string()) throw ConfigError("out: expected a string");
      c.out = value.get<std::string>();
    } else if (key == "seed") {
      if (!value.is_number_unsigned()) throw ConfigError("seed: expected a non-negative integer");
      c.seed = value.get<std::uint64_t>();
    } else {
      throw ConfigError(key + ": unknown field");
    }
  }
  return c;
}

void apply_variant(ModelConfig& model, const VariantFlags& flags) {
  if (flags.memory) model.n_memory = *flags.memory;
  if (flags.variant) {
    const std::string& v = *flags.variant;
    if (v == "transformer") {
      model.connectivity = Connectivity::LastLayer;
      model.attention = AttentionKind::Standard;
    } else if (v == "aoa") {
      model.connectivity = Connectivity::LastLayer;
      model.attention = AttentionKind::AoA;
    } else if (v == "one-to-one" || v == "1-to-1") {
      model.connectivity = Connectivity::OneToOne;
      model.attention = AttentionKind::Standard;
    } else if (v == "meshed") {
      model.connectivity = Connectivity::MeshedSigmoid;
      model.attention = AttentionKind::Standard;
    } else {
      throw ConfigError("variant: unknown value '" + v + "' (transformer, aoa, one-to-one, meshed)");
    }
  }
  if (flags.gating) {
    const std::string& g = *flags.gating;
    if (g != "sigmoid" && g != "softmax") throw ConfigError("gating: unknown value '" + g + "' (sigmoid, softmax)");
    const bool meshed =
        model.connectivity == Connectivity::MeshedSigmoid || model.connectivity == Connectivity::MeshedSoftmax;
    if (!meshed) throw ConfigError("gating: only meshed connectivity has gates");
    model.connectivity = g == "sigmoid" ? Connectivity::MeshedSigmoid : Connectivity::MeshedSoftmax;
  }
}

LoadedData load_data(const DataPaths& paths, const WarningSink& warn) {
  if (paths.manifest.empty()) throw ConfigError("data.manifest: required");
  const auto manifest = load_manifest(paths.manifest);
  auto train_it = manifest.find("train");
  if (train_it == manifest.end()) throw InputError(paths.manifest + ": no train split");
  LoadedData data;
  data.train = load_split(train_it->second, 0, warn);
  data.d_feat = data.train.front().features.cols();
  if (auto it = manifest.find("val"); it != manifest.end()) data.val = load_split(it->second, data.d_feat, warn);
  if (auto it = manifest.find("test"); it != manifest.end()) data.test = load_split(it->second, data.d_feat, warn);
  if (!paths.vocab.empty()) {
    data.vocab = Vocabulary::load(paths.vocab);
  } else {
    std::vector<CaptionRecord> caps;
    for (const auto& im : data.train) caps.push_back({im.image_id, im.references});
    data.vocab = build_vocab(caps, paths.min_count);
  }
  data.train_idf = IdfTable::build(references_of(data.train));
  return data;
}

const std::vector<TrainingImage>& split_of(const LoadedData& data, const std::string& split) {
  const std::vector<TrainingImage>* images = nullptr;
  if (split == "train") images = &data.train;
  else if (split == "val") images = &data.val;
  else if (split == "test") images = &data.test;
  else throw ConfigError("split: unknown value '" + split + "' (train, val, test)");
  if (images->empty()) throw InputError("split '" + split + "' is empty or missing from the manifest");
  return *images;
}

M2Model<float> build_model(const RunConfig& config, const LoadedData& data) {
  ModelConfig m = config.model_config();
  m.d_feat = data.d_feat;
  m.vocab_size = data.vocab.size();
  M2Model<float> model(m);
  if (m.embedding == EmbeddingMode::External)
    set_external_embeddings(model, load_glove(config.data.glove, data.vocab, m.d_external));
  return model;
}

void save_run_checkpoint(const std::string& path, const M2Model<float>& model, const RunConfig& config,
                         const Vocabulary& vocab, const std::string& stage, const StageResult* result) {
  json run{{"config", json::parse(run_config_to_json(config))}, {"stage", stage}};
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < vocab.size(); ++i) tokens.push_back(vocab.token(std::int32_t(i)));
  run["vocab"] = tokens;
  if (result) {
    run["best_step"] = result->best_step;
    run["best_val_cider"] = result->best_val_cider;
    run["final_loss"] = result->final_loss;
  }
  if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  save_model(path, model, run.dump());
}

RunCheckpoint load_run_checkpoint(const std::string& path) {
  RunCheckpoint out{load_model(path), Vocabulary(), read_checkpoint(path).manifest};
  const json manifest = json::parse(out.manifest);
  if (!manifest.contains("run") || !manifest["run"].is_object() || !manifest["run"].contains("vocab"))
    throw FormatError(path + ": checkpoint manifest has no vocabulary");
  const auto tokens = manifest["run"]["vocab"].get<std::vector<std::string>>();
  if (tokens.size() < Vocabulary::kReserved) throw FormatError(path + ": vocabulary lacks the reserved tokens");
  out.vocab = Vocabulary(std::vector<std::string>(tokens.begin() + Vocabulary::kReserved, tokens.end()));
  if (out.vocab.size() != out.model.config.vocab_size)
    throw FormatError(path + ": vocabulary size does not match the model");
  return out;
}

// ---- ablation -------------------------------------------------------------------

std::vector<AblationVariant> ablation_variants(std::size_t m) {
  using C = Connectivity;
  using A = AttentionKind;
  return {
      {"transformer-6", 6, 0, C::LastLayer, A::Standard},
      {"transformer-3", 3, 0, C::LastLayer, A::Standard},
      {"aoa", 3, 0, C::LastLayer, A::AoA},
      {"one-to-one-nomem", 3, 0, C::OneToOne, A::Standard},
      {"one-to-one", 3, m, C::OneToOne, A::Standard},
      {"meshed-nomem", 3, 0, C::MeshedSigmoid, A::Standard},
      {"meshed-softmax", 3, m, C::MeshedSoftmax, A::Standard},
      {"meshed", 3, m, C::MeshedSigmoid, A::Standard},
  };
}

RunConfig ablation_defaults() {
  RunConfig c;
  c.train.xe_steps = 800;
  c.out = "runs/ablation";
  return c;
}

SyntheticConfig ablation_dataset(std::uint64_t seed) {
  SyntheticConfig s;
  s.scenes = 500;
  s.seed = seed;
  return s;
}

LoadedData ablation_data(const RunConfig& config) {
  if (!config.data.manifest.empty()) return load_data(config.data);
  const SyntheticDataset ds = generate_synthetic(ablation_dataset(config.seed));
  LoadedData data;
  data.d_feat = ds.features.front().features.cols();
  const std::size_t n = ds.features.size();
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  std::vector<CaptionRecord> train_caps;
  for (std::size_t i = 0; i < n; ++i) {
    TrainingImage im{ds.features[i].image_id, ds.features[i].features, ds.captions[i].references};
    if (i < n_train) {
      train_caps.push_back(ds.captions[i]);
      data.train.push_back(std::move(im));
    } else if (i < n_train + n_val) {
      data.val.push_back(std::move(im));
    } else {
      data.test.push_back(std::move(im));
    }
  }
  data.vocab = build_vocab(train_caps, config.data.min_count);
  data.train_idf = IdfTable::build(references_of(data.train));
  return data;
}

std::vector<AblationRow> run_ablation(const RunConfig& config, const LoadedData& data,
                                      const std::vector<std::size_t>& rows,
                                      const std::function<void(const AblationRow&)>& on_row) {
  const auto variants = ablation_variants(config.model.n_memory);
  const auto& test = split_of(data, "test");
  std::vector<AblationRow> out;
  for (std::size_t r : rows) {
    if (r >= variants.size()) throw ConfigError("ablation row " + std::to_string(r + 1) + " does not exist");
    const auto start = std::chrono::steady_clock::now();
    AblationRow row;
    row.variant = variants[r];
    RunConfig rc = config;
    rc.model.n_enc = rc.model.n_dec = row.variant.layers;
    rc.model.n_memory = row.variant.memory;
    rc.model.connectivity = row.variant.connectivity;
    rc.model.attention = row.variant.attention;
    rc.validate();
    M2Model<float> model = build_model(rc, data);
    row.parameters = model.params.scalar_count();
    TrainLog quiet;
    StageResult xe = train_xe(model, data.train, nullptr, data.vocab, rc.train_config(), quiet);
    row.final_loss = xe.final_loss;
    row.report = decode_and_evaluate({&xe.best}, test, data.vocab, rc.train.beam, rc.train.max_len,
                                     rc.train.workers)
                     .report;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_row) on_row(row);
    out.push_back(std::move(row));
  }
  return out;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| variant | layers | memory | connectivity | attention | params | XE loss | BLEU-1 | BLEU-4 | ROUGE-L | "
        "CIDEr-D |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %zu | %zu | %s | %s | %zu | %.4f | %.4f | %.4f | %.4f | %.4f |\n",
                  r.variant.name.c_str(), r.variant.layers, r.variant.memory,
                  to_string(r.variant.connectivity).c_str(), to_string(r.variant.attention).c_str(), r.parameters,
                  r.final_loss, r.report.bleu[0], r.report.bleu[3], r.report.rouge_l, r.report.cider_d);
    os << buf;
  }
  return os.str();
}

std::string ablation_json(const std::vector<AblationRow>& rows, std::uint64_t seed) {
  json j{{"seed", seed}, {"rows", json::array()}};
  for (const auto& r : rows) {
    json report = json::parse(r.report.to_json());
    report.erase("per_image_CIDEr-D");
    j["rows"].push_back({{"variant", r.variant.name},
                         {"layers", r.variant.layers},
                         {"memory", r.variant.memory},
                         {"connectivity", to_string(r.variant.connectivity)},
                         {"attention", to_string(r.variant.attention)},
                         {"parameters", r.parameters},
                         {"final_loss", r.final_loss},
                         {"seconds", r.seconds},
                         {"report", report}});
  }
  return j.dump(2);
}

}  // namespace m2
