#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "m2/model.hpp"
#include "m2/training.hpp"

namespace m2 {

struct DataPaths {
  std::string manifest;      // split manifest; empty for commands that generate data
  std::string vocab;         // empty: built from the train captions
  std::string glove;         // external embeddings, used when model.embedding is external
  std::size_t min_count = 5;
};

// Everything a command needs. model.d_feat and model.vocab_size are filled
// from the data when a run starts.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataPaths data;
  std::string out = "runs/default";
  std::uint64_t seed = 1;  // copied into model.seed and train.seed

  RunConfig();
  // Field-level ConfigError. Data-derived model fields are not checked.
  void validate(bool rl_stage = false) const;
  // model and train with the top-level seed applied.
  ModelConfig model_config() const;
  TrainConfig train_config() const;
};

std::string run_config_to_json(const RunConfig& c);
// Keys absent from the text keep the value in `defaults`; unknown keys are a
// ConfigError.
RunConfig run_config_from_json(const std::string& text, const RunConfig& defaults = {});

// Named variant axes of the command line.
struct VariantFlags {
  std::optional<std::string> variant;  // transformer | aoa | one-to-one | meshed
  std::optional<std::size_t> memory;
  std::optional<std::string> gating;   // sigmoid | softmax
};
void apply_variant(ModelConfig& model, const VariantFlags& flags);

// A manifest's splits joined and ready for training.
struct LoadedData {
  Vocabulary vocab;
  std::size_t d_feat = 0;
  std::vector<TrainingImage> train, val, test;
  IdfTable train_idf;
};
LoadedData load_data(const DataPaths& paths, const WarningSink& warn = nullptr);
const std::vector<TrainingImage>& split_of(const LoadedData& data, const std::string& split);

// A model with d_feat and vocab_size set from the data; external embeddings
// are loaded from data.glove.
M2Model<float> build_model(const RunConfig& config, const LoadedData& data);

// Checkpoint with the run config and the vocabulary in its manifest.
void save_run_checkpoint(const std::string& path, const M2Model<float>& model, const RunConfig& config,
                         const Vocabulary& vocab, const std::string& stage, const StageResult* result);
struct RunCheckpoint {
  M2Model<float> model;
  Vocabulary vocab;
  std::string manifest;
};
RunCheckpoint load_run_checkpoint(const std::string& path);

// ---- ablation ---------------------------------------------------------------

struct AblationVariant {
  std::string name;
  std::size_t layers = 3;
  std::size_t memory = 0;
  Connectivity connectivity = Connectivity::LastLayer;
  AttentionKind attention = AttentionKind::Standard;
};

// The eight rows: transformer with 6 and 3 layers, AoA, 1-to-1 without and
// with memory, meshed without memory, meshed with softmax gates, full model.
std::vector<AblationVariant> ablation_variants(std::size_t memory_slots);
inline constexpr std::size_t kBaseRow = 1;
inline constexpr std::size_t kFullRow = 7;

struct AblationRow {
  AblationVariant variant;
  std::size_t parameters = 0;
  double final_loss = 0;
  EvalReport report;
  double seconds = 0;
};

// Toy defaults: d=64, h=4, N=3, n_m=8, 800 XE steps on 500 synthetic scenes.
RunConfig ablation_defaults();
SyntheticConfig ablation_dataset(std::uint64_t seed);
// Data for an ablation run: the manifest when given, otherwise synthetic
// scenes split 400/50/50.
LoadedData ablation_data(const RunConfig& config);

// XE training of each selected row, then beam decoding of the test split.
std::vector<AblationRow> run_ablation(const RunConfig& config, const LoadedData& data,
                                      const std::vector<std::size_t>& rows,
                                      const std::function<void(const AblationRow&)>& on_row = nullptr);
std::string ablation_table(const std::vector<AblationRow>& rows);
std::string ablation_json(const std::vector<AblationRow>& rows, std::uint64_t seed);

}  // namespace m2
