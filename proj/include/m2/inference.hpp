#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "m2/model.hpp"
#include "m2/textdata.hpp"

namespace m2 {

// Incremental next-token scorer. Rows are hypotheses; every row has emitted
// the same number of tokens.
class Stepper {
 public:
  virtual ~Stepper() = default;
  virtual std::size_t vocab_size() const = 0;
  // Resets to a single empty row; the first step feeds BOS.
  virtual void start() = 0;
  // Appends newest[r] to row r and returns next-token log-probabilities
  // [rows, |V|] in double precision.
  virtual Tensor<double> step(const std::vector<std::int32_t>& newest) = 0;
  // Row r of the new state is a copy of row parents[r] of the old state.
  virtual void reorder(const std::vector<std::size_t>& parents) = 0;
};

// Keys and values of every decoder self-attention site are kept per row and
// extended by one position per step; cross-attention keys and values are
// computed once per image.
template <typename T>
class CachedStepper : public Stepper {
 public:
  CachedStepper(const M2Model<T>& model, const Tensor<T>& features, const std::vector<std::uint8_t>& region_valid);
  std::size_t vocab_size() const override { return model_.config.vocab_size; }
  void start() override;
  Tensor<double> step(const std::vector<std::int32_t>& newest) override;
  void reorder(const std::vector<std::size_t>& parents) override;

 private:
  const M2Model<T>& model_;
  Tape<T> tape_{false};
  EncoderOutputs<T> enc_;
  std::vector<std::vector<KeyValue<T>>> cross_;
  std::vector<std::vector<SelfAttentionCache<T>>> caches_;  // [layer][row]
  std::size_t position_ = 0;
};

// Recomputes the whole decoder over every full prefix at each step.
template <typename T>
class NaiveStepper : public Stepper {
 public:
  NaiveStepper(const M2Model<T>& model, const Tensor<T>& features, const std::vector<std::uint8_t>& region_valid);
  std::size_t vocab_size() const override { return model_.config.vocab_size; }
  void start() override;
  Tensor<double> step(const std::vector<std::int32_t>& newest) override;
  void reorder(const std::vector<std::size_t>& parents) override;

 private:
  const M2Model<T>& model_;
  Tensor<T> features_;
  std::vector<std::uint8_t> valid_;
  std::vector<std::vector<std::int32_t>> prefixes_;
};

// Averages the member distributions in probability space at every step.
class EnsembleStepper : public Stepper {
 public:
  explicit EnsembleStepper(std::vector<std::unique_ptr<Stepper>> members);
  std::size_t vocab_size() const override { return members_.front()->vocab_size(); }
  void start() override;
  Tensor<double> step(const std::vector<std::int32_t>& newest) override;
  void reorder(const std::vector<std::size_t>& parents) override;

 private:
  std::vector<std::unique_ptr<Stepper>> members_;
};

struct BeamOptions {
  std::size_t beam = 5;
  std::size_t max_len = kMaxCaptionLength;  // generated tokens, EOS included
  std::size_t min_len = 0;                  // EOS is not allowed before this many tokens
};

struct Hypothesis {
  std::vector<std::int32_t> ids;          // generated tokens, BOS excluded
  std::vector<double> step_log_probs;     // one per generated token
  double log_prob = 0;                    // sum of step_log_probs
  bool finished = false;                  // ended with EOS
};

// Beam search over raw cumulative log-probability. PAD and BOS are never
// generated. Candidates tie-break on the lexicographically smaller token
// sequence. Finished hypotheses keep competing with their frozen score.
// Returns the final beam best first.
std::vector<Hypothesis> beam_search(Stepper& stepper, const BeamOptions& options);

// Exact mean of the per-model distributions for one prefix (testing and
// single-step use). All models must share the vocabulary.
template <typename T>
Tensor<double> ensemble_distribution(const std::vector<const M2Model<T>*>& models, const Tensor<T>& features,
                                     const std::vector<std::uint8_t>& region_valid,
                                     const std::vector<std::int32_t>& prefix);

// Beam search with one cached stepper per model (ensemble when more than one).
template <typename T>
std::vector<Hypothesis> beam_search_cached(const std::vector<const M2Model<T>*>& models, const Tensor<T>& features,
                                           const std::vector<std::uint8_t>& region_valid,
                                           const BeamOptions& options);

struct ConstrainedResult {
  Hypothesis hypothesis;
  std::size_t rank = 0;
  bool satisfied = false;
};

// Highest-ranked hypothesis containing every constraint id; otherwise the
// top hypothesis with satisfied = false.
ConstrainedResult constraint_filter(const std::vector<Hypothesis>& ranked, const std::vector<std::int32_t>& constraints);

// ---- integrated gradients ---------------------------------------------------

// Right Riemann sum over m points from baseline to x of the gradients
// returned by grad_fn, times (x - baseline). One output per target.
using MultiGradFn = std::function<std::vector<Tensor<double>>(const Tensor<double>&)>;
std::vector<Tensor<double>> integrated_gradients(const MultiGradFn& grad_fn, const Tensor<double>& x,
                                                 const Tensor<double>& baseline, std::size_t steps);
Tensor<double> integrated_gradients(const std::function<Tensor<double>(const Tensor<double>&)>& grad_fn,
                                    const Tensor<double>& x, const Tensor<double>& baseline, std::size_t steps);

// Per-region scores from a [regions, channels] attribution: mean |IG| over
// channels, renormalized to sum 1.
std::vector<double> region_scores(const Tensor<double>& attribution);
// Min-max stretch to [0, 1]; a constant input maps to all zeros.
std::vector<double> contrast_stretch(const std::vector<double>& scores);

struct WordAttribution {
  std::int32_t word = 0;
  std::vector<double> scores;     // renormalized, sums to 1
  std::vector<double> stretched;  // contrast-stretched to [0, 1]
  std::size_t argmax_region = 0;
  Tensor<double> raw;             // [regions, d_feat] signed IG
};

inline constexpr std::size_t kDefaultIgSteps = 64;

// Attributes log p(word_s | BOS, words before s, X) to the regions of X for
// each generated word, with an all-zero baseline. Runs in 64-bit.
std::vector<WordAttribution> attribute_regions(const M2Model<double>& model, const Tensor<double>& features,
                                               const std::vector<std::int32_t>& words,
                                               std::size_t steps = kDefaultIgSteps);

}  // namespace m2
