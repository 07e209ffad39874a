#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "m2/inference.hpp"
#include "m2/metrics.hpp"
#include "m2/model.hpp"
#include "m2/textdata.hpp"

namespace m2 {

struct TrainConfig {
  std::size_t batch_size = 50;
  std::size_t beam = 5;
  std::uint64_t warmup = 10000;
  double lr_scale = 1.0;  // multiplies the warmup schedule
  double rl_lr = 5e-6;
  std::size_t xe_steps = 2000;
  std::size_t rl_steps = 500;
  std::size_t max_len = kMaxCaptionLength;
  std::size_t eval_every = 0;   // 0: evaluate once at the end of a stage
  std::size_t eval_images = 0;  // 0: the whole validation split
  std::size_t log_every = 50;
  std::size_t workers = 1;
  double dropout_keep = 0.9;
  std::uint64_t seed = 1;

  // Throws ConfigError naming the field. The RL stage also needs beam >= 2.
  void validate(bool rl_stage = false) const;
};

std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text, const TrainConfig& defaults = {});

// One image with its features and tokenized references.
struct TrainingImage {
  std::uint64_t image_id = 0;
  Tensor<float> features;  // [n, d_feat], every row valid
  std::vector<TokenList> references;
};

std::vector<TrainingImage> to_training_images(const std::vector<Example>& examples);

// Mean negative log-likelihood of `targets` under row-wise log-probabilities,
// PAD targets excluded. All-PAD targets are an InputError.
template <typename T>
Var<T> xe_loss(Var<T> log_probs, const std::vector<std::int32_t>& targets, std::int32_t pad = Vocabulary::kPad);

// Teacher-forcing pair for one encoded caption: inputs drop the last
// non-PAD token, targets drop BOS; trailing PAD is trimmed.
struct TeacherForcing {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
};
TeacherForcing teacher_forcing(const std::vector<std::int32_t>& ids);

// Line-delimited JSON training log.
class TrainLog {
 public:
  explicit TrainLog(std::ostream* out = nullptr) : out_(out) {}
  void write(const std::string& stage, std::size_t step, const std::string& metric, double value, double lr);
  void write_eval(const std::string& stage, std::size_t step, const EvalReport& report);

 private:
  std::ostream* out_;
};

struct BeamSample {
  std::vector<std::int32_t> ids;  // generated tokens, EOS included when present
  std::vector<double> step_log_probs;
  double log_prob = 0;
  double reward = 0;
};

// The k highest-probability beams for one image (no gradient, no dropout).
template <typename T>
std::vector<BeamSample> sample_topk_beams(const M2Model<T>& model, const Tensor<T>& features, std::size_t k,
                                          std::size_t max_len);

// r_i - mean(r), computed relative to r_0 so that adding a constant to
// every reward leaves the result unchanged whenever the shifted rewards are
// exactly representable. k < 2 is a ConfigError.
std::vector<double> scst_advantages(const std::vector<double>& rewards);

// -(1/k) sum_i a_i log p(w_i | image) for fixed advantages, times `scale`.
template <typename T>
Var<T> scst_surrogate(const M2Model<T>& model, Tape<T>& tape, const Tensor<T>& features,
                      const std::vector<BeamSample>& samples, const std::vector<double>& advantages,
                      double scale = 1.0);

// Rewards of each sample: CIDEr-D of the special-stripped tokens against the
// references under a frozen IDF table.
void assign_rewards(std::vector<BeamSample>& samples, const std::vector<TokenList>& references,
                    const IdfTable& idf, const Vocabulary& vocab);

struct ScstBatch {
  const TrainingImage* image = nullptr;
  std::vector<BeamSample> samples;  // rewards already assigned
};

struct ScstStats {
  double mean_reward = 0;
  double advantage_sum = 0;  // sum of all advantages; zero up to rounding
  bool applied = false;      // false when every advantage was exactly zero
};

// Gradient of the mean surrogate over the batch, then one Adam step at lr.
// A batch whose advantages are all exactly zero leaves parameters and
// optimizer state untouched.
template <typename T>
ScstStats scst_update(M2Model<T>& model, Adam<T>& adam, const std::vector<ScstBatch>& batch, double lr,
                      std::size_t workers = 1);

// Top-beam captions for every image and the metric report against the
// images' own references.
struct DecodedSplit {
  std::vector<std::uint64_t> image_ids;
  std::vector<Hypothesis> best;
  EvalReport report;
};
DecodedSplit decode_and_evaluate(const std::vector<const M2Model<float>*>& models,
                                 const std::vector<TrainingImage>& images, const Vocabulary& vocab,
                                 std::size_t beam, std::size_t max_len, std::size_t workers = 1);

struct StageResult {
  M2Model<float> best;          // best by validation CIDEr-D (the final model without validation)
  double best_val_cider = -1;   // -1 without validation
  std::size_t best_step = 0;
  double final_loss = 0;        // XE loss or mean reward of the last step
};

// Cross-entropy stage: Adam with the warmup schedule over shuffled
// (image, reference) pairs.
StageResult train_xe(M2Model<float>& model, const std::vector<TrainingImage>& train,
                     const std::vector<TrainingImage>* val, const Vocabulary& vocab, const TrainConfig& config,
                     TrainLog& log);

// Self-critical stage: k beams per image, mean-baseline rewards, fixed lr.
StageResult train_scst(M2Model<float>& model, const std::vector<TrainingImage>& train,
                       const std::vector<TrainingImage>* val, const Vocabulary& vocab, const IdfTable& idf,
                       const TrainConfig& config, TrainLog& log);

}  // namespace m2
