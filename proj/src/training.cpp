#include "m2/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <random>
#include <thread>

#include <json.hpp>

#include "m2/errors.hpp"

namespace m2 {

using nlohmann::json;

// ---- configuration ---------------------------------------------------------------

void TrainConfig::validate(bool rl_stage) const {
  auto fail = [](const std::string& field, const std::string& what) { throw ConfigError("train." + field + ": " + what); };
  if (batch_size < 1) fail("batch_size", "must be at least 1");
  if (beam < 1) fail("beam", "must be at least 1");
  if (rl_stage && beam < 2) fail("beam", "the RL stage needs at least 2 beams (the mean baseline cancels a single sample)");
  if (warmup < 1) fail("warmup", "must be at least 1");
  if (!(lr_scale > 0) || !std::isfinite(lr_scale)) fail("lr_scale", "must be positive");
  if (!(rl_lr > 0) || !std::isfinite(rl_lr)) fail("rl_lr", "must be positive");
  if (max_len < 2) fail("max_len", "must be at least 2");
  if (workers < 1) fail("workers", "must be at least 1");
  if (!(dropout_keep > 0 && dropout_keep <= 1)) fail("dropout_keep", "must be in (0, 1]");
}

std::string train_config_to_json(const TrainConfig& c) {
  json j{{"batch_size", c.batch_size}, {"beam", c.beam},           {"warmup", c.warmup},
         {"lr_scale", c.lr_scale},     {"rl_lr", c.rl_lr},         {"xe_steps", c.xe_steps},
         {"rl_steps", c.rl_steps},     {"max_len", c.max_len},     {"eval_every", c.eval_every},
         {"eval_images", c.eval_images}, {"log_every", c.log_every}, {"workers", c.workers},
         {"dropout_keep", c.dropout_keep}, {"seed", c.seed}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text, const TrainConfig& defaults) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("train: invalid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("train: expected a JSON object");
  TrainConfig c = defaults;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "beam") c.beam = value.get<std::size_t>();
      else if (key == "warmup") c.warmup = value.get<std::uint64_t>();
      else if (key == "lr_scale") c.lr_scale = value.get<double>();
      else if (key == "rl_lr") c.rl_lr = value.get<double>();
      else if (key == "xe_steps") c.xe_steps = value.get<std::size_t>();
      else if (key == "rl_steps") c.rl_steps = value.get<std::size_t>();
      else if (key == "max_len") c.max_len = value.get<std::size_t>();
      else if (key == "eval_every") c.eval_every = value.get<std::size_t>();
      else if (key == "eval_images") c.eval_images = value.get<std::size_t>();
      else if (key == "log_every") c.log_every = value.get<std::size_t>();
      else if (key == "workers") c.workers = value.get<std::size_t>();
      else if (key == "dropout_keep") c.dropout_keep = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("train." + key + ": unknown field");
    } catch (const json::exception& e) {
      throw ConfigError("train." + key + ": " + e.what());
    }
  }
  return c;
}

std::vector<TrainingImage> to_training_images(const std::vector<Example>& examples) {
  std::vector<TrainingImage> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back({e.image_id, e.features, e.references});
  return out;
}

// ---- losses --------------------------------------------------------------------------

template <typename T>
Var<T> xe_loss(Var<T> log_probs, const std::vector<std::int32_t>& targets, std::int32_t pad) {
  if (targets.size() != log_probs.rows())
    throw ShapeError("xe_loss: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(log_probs.rows()) + " rows");
  const auto count = std::count_if(targets.begin(), targets.end(), [&](std::int32_t t) { return t != pad; });
  if (count == 0) throw InputError("xe_loss: every target is PAD");
  std::vector<T> w(targets.size());
  std::vector<std::int32_t> cols(targets);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    w[i] = targets[i] == pad ? T(0) : T(-1) / T(count);
    if (targets[i] == pad) cols[i] = 0;
  }
  return pick_weighted_sum(log_probs, cols, w);
}

TeacherForcing teacher_forcing(const std::vector<std::int32_t>& ids) {
  std::size_t end = ids.size();
  while (end > 0 && ids[end - 1] == Vocabulary::kPad) --end;
  if (end < 2) throw InputError("teacher_forcing: caption needs at least two tokens");
  TeacherForcing tf;
  tf.inputs.assign(ids.begin(), ids.begin() + long(end - 1));
  tf.targets.assign(ids.begin() + 1, ids.begin() + long(end));
  return tf;
}

void TrainLog::write(const std::string& stage, std::size_t step, const std::string& metric, double value, double lr) {
  if (!out_) return;
  json j{{"stage", stage}, {"step", step}, {metric, value}, {"lr", lr}};
  *out_ << j.dump() << "\n" << std::flush;
}

void TrainLog::write_eval(const std::string& stage, std::size_t step, const EvalReport& report) {
  if (!out_) return;
  json j{{"stage", stage + "-val"}, {"step", step}, {"CIDEr-D", report.cider_d}, {"BLEU-4", report.bleu[3]},
         {"ROUGE-L", report.rouge_l}};
  *out_ << j.dump() << "\n" << std::flush;
}

namespace {

// Calls fn(worker, i) for i in [0, n), item i on worker i % workers.
template <typename Fn>
void run_sharded(std::size_t workers, std::size_t n, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(w, i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename T>
void add_into(std::vector<Tensor<T>>& total, const std::vector<Tensor<T>>& part) {
  for (std::size_t p = 0; p < total.size(); ++p)
    for (std::size_t i = 0; i < total[p].size(); ++i) total[p][i] += part[p][i];
}

std::vector<std::uint8_t> all_valid(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

// Next `count` indices of a reshuffled-per-epoch permutation of [0, n).
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    cursor_ = n;
  }
  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
};

std::vector<TrainingImage> eval_subset(const std::vector<TrainingImage>& val, std::size_t count) {
  if (count == 0 || count >= val.size()) return val;
  return std::vector<TrainingImage>(val.begin(), val.begin() + long(count));
}

void check_vocab(const M2Model<float>& model, const Vocabulary& vocab) {
  if (model.config.vocab_size != vocab.size())
    throw ConfigError("model.vocab_size: " + std::to_string(model.config.vocab_size) +
                      " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
}

}  // namespace

// ---- beams and SCST -------------------------------------------------------------

template <typename T>
std::vector<BeamSample> sample_topk_beams(const M2Model<T>& model, const Tensor<T>& features, std::size_t k,
                                          std::size_t max_len) {
  if (k < 1) throw ConfigError("beam: k must be at least 1");
  const auto beams = beam_search_cached<T>({&model}, features, all_valid(features.rows()), {k, max_len, 0});
  std::vector<BeamSample> out;
  for (const auto& h : beams) out.push_back({h.ids, h.step_log_probs, h.log_prob, 0.0});
  return out;
}

std::vector<double> scst_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2)
    throw ConfigError("scst: k = " + std::to_string(rewards.size()) + " gives an identically zero gradient; need k >= 2");
  for (double r : rewards)
    if (!std::isfinite(r)) throw NumericError("scst: non-finite reward");
  std::vector<double> rel(rewards.size());
  double mean = 0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    rel[i] = rewards[i] - rewards[0];
    mean += rel[i];
  }
  mean /= double(rewards.size());
  for (double& a : rel) a -= mean;
  return rel;
}

template <typename T>
Var<T> scst_surrogate(const M2Model<T>& model, Tape<T>& tape, const Tensor<T>& features,
                      const std::vector<BeamSample>& samples, const std::vector<double>& advantages, double scale) {
  if (samples.size() != advantages.size()) throw ContractError("scst: one advantage per sample required");
  const auto enc = encode_regions(model, tape.constant(features), all_valid(features.rows()));
  std::vector<Var<T>> terms;
  const double k = double(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& ids = samples[i].ids;
    if (ids.empty()) throw ContractError("scst: empty sample");
    std::vector<std::int32_t> inputs{Vocabulary::kBos};
    inputs.insert(inputs.end(), ids.begin(), ids.end() - 1);
    Var<T> lp = decode_log_probs(model, enc, inputs);
    terms.push_back(pick_weighted_sum(lp, ids, std::vector<T>(ids.size(), T(-advantages[i] * scale / k))));
  }
  return add_n(terms);
}

void assign_rewards(std::vector<BeamSample>& samples, const std::vector<TokenList>& references, const IdfTable& idf,
                    const Vocabulary& vocab) {
  for (auto& s : samples) s.reward = cider_d(decode_tokens(s.ids, vocab), references, idf);
}

template <typename T>
ScstStats scst_update(M2Model<T>& model, Adam<T>& adam, const std::vector<ScstBatch>& batch, double lr,
                      std::size_t workers) {
  if (batch.empty()) throw InputError("scst: empty batch");
  ScstStats stats;
  std::vector<std::vector<double>> adv(batch.size());
  bool any = false;
  double reward_sum = 0, reward_count = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<double> rewards;
    for (const auto& s : batch[b].samples) rewards.push_back(s.reward);
    adv[b] = scst_advantages(rewards);
    for (double a : adv[b]) {
      stats.advantage_sum += a;
      any = any || a != 0.0;
    }
    for (double r : rewards) reward_sum += r;
    reward_count += double(rewards.size());
  }
  stats.mean_reward = reward_sum / reward_count;
  if (!any) return stats;

  std::vector<std::vector<Tensor<T>>> partial(std::max<std::size_t>(1, std::min(workers, batch.size())),
                                              model.params.zero_grads());
  const double scale = 1.0 / double(batch.size());
  run_sharded(workers, batch.size(), [&](std::size_t w, std::size_t b) {
    Tape<T> tape;
    const Tensor<T> features = batch[b].image->features.template cast<T>();
    Var<T> loss = scst_surrogate(model, tape, features, batch[b].samples, adv[b], scale);
    tape.backward(loss);
    tape.accumulate_param_grads(partial[w]);
  });
  for (std::size_t w = 1; w < partial.size(); ++w) add_into(partial[0], partial[w]);
  adam.step(model.params, partial[0], lr);
  stats.applied = true;
  return stats;
}

// ---- evaluation ------------------------------------------------------------------------

DecodedSplit decode_and_evaluate(const std::vector<const M2Model<float>*>& models,
                                 const std::vector<TrainingImage>& images, const Vocabulary& vocab, std::size_t beam,
                                 std::size_t max_len, std::size_t workers) {
  if (images.empty()) throw InputError("evaluate: no images");
  DecodedSplit out;
  out.best.resize(images.size());
  run_sharded(workers, images.size(), [&](std::size_t, std::size_t i) {
    out.best[i] = beam_search_cached<float>(models, images[i].features, all_valid(images[i].features.rows()),
                                            {beam, max_len, 0})
                      .front();
  });
  std::vector<TokenList> cands;
  std::vector<std::vector<TokenList>> refs;
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.image_ids.push_back(images[i].image_id);
    cands.push_back(decode_tokens(out.best[i].ids, vocab));
    refs.push_back(images[i].references);
  }
  out.report = evaluate(cands, refs, nullptr, workers);
  return out;
}

// ---- stages ------------------------------------------------------------------------------

namespace {

struct Tracker {
  const std::vector<TrainingImage>* val;
  const Vocabulary& vocab;
  const TrainConfig& config;
  TrainLog& log;
  std::string stage;
  StageResult result;
  std::size_t last_eval = 0;

  void evaluate_now(const M2Model<float>& model, std::size_t step) {
    last_eval = step;
    if (!val || val->empty()) return;
    const auto subset = eval_subset(*val, config.eval_images);
    const auto decoded = decode_and_evaluate({&model}, subset, vocab, config.beam, config.max_len, config.workers);
    log.write_eval(stage, step, decoded.report);
    if (decoded.report.cider_d > result.best_val_cider) {
      result.best_val_cider = decoded.report.cider_d;
      result.best_step = step;
      result.best = model;
    }
  }

  void finish(const M2Model<float>& model, std::size_t steps) {
    if (last_eval != steps || steps == 0) evaluate_now(model, steps);
    if (!val || val->empty()) {
      result.best = model;
      result.best_step = steps;
    }
  }
};

}  // namespace

StageResult train_xe(M2Model<float>& model, const std::vector<TrainingImage>& train,
                     const std::vector<TrainingImage>* val, const Vocabulary& vocab, const TrainConfig& config,
                     TrainLog& log) {
  config.validate(false);
  check_vocab(model, vocab);
  if (train.empty()) throw InputError("train_xe: empty training split");

  struct Pair {
    std::size_t image;
    TeacherForcing tf;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < train.size(); ++i)
    for (const auto& ref : train[i].references) pairs.push_back({i, teacher_forcing(encode_ids(ref, vocab, config.max_len))});
  if (pairs.empty()) throw InputError("train_xe: no reference captions");

  Adam<float> adam(model.params, {});
  EpochSampler sampler(pairs.size(), derive_seed(config.seed, "xe-order"));
  Tracker tracker{val, vocab, config, log, "xe", {}, 0};
  const ForwardOptions base{config.dropout_keep < 1.0, config.dropout_keep, nullptr};

  for (std::size_t step = 1; step <= config.xe_steps; ++step) {
    const auto batch = sampler.next(std::min(config.batch_size, pairs.size()));
    double tokens = 0;
    for (std::size_t b : batch) tokens += double(pairs[b].tf.targets.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, batch.size()));
    std::vector<std::vector<Tensor<float>>> grads(workers, model.params.zero_grads());
    std::vector<double> losses(batch.size(), 0.0);
    run_sharded(workers, batch.size(), [&](std::size_t w, std::size_t k) {
      const Pair& pair = pairs[batch[k]];
      const TrainingImage& img = train[pair.image];
      std::mt19937_64 rng(derive_seed(config.seed, "xe-dropout/" + std::to_string(step) + "/" + std::to_string(k)));
      ForwardOptions opt = base;
      opt.rng = &rng;
      Tape<float> tape;
      const auto enc = encode_regions(model, tape.constant(img.features), all_valid(img.features.rows()), opt);
      Var<float> lp = decode_log_probs(model, enc, pair.tf.inputs, opt);
      Var<float> loss = pick_weighted_sum(lp, pair.tf.targets,
                                          std::vector<float>(pair.tf.targets.size(), float(-1.0 / tokens)));
      tape.backward(loss);
      tape.accumulate_param_grads(grads[w]);
      losses[k] = double(loss.value()[0]);
    });
    for (std::size_t w = 1; w < workers; ++w) add_into(grads[0], grads[w]);
    const double lr = config.lr_scale * warmup_lr(step, model.config.d_model, config.warmup);
    adam.step(model.params, grads[0], lr);
    double loss = 0;
    for (double l : losses) loss += l;
    tracker.result.final_loss = loss;
    if (config.log_every && (step % config.log_every == 0 || step == config.xe_steps))
      log.write("xe", step, "loss", loss, lr);
    if (config.eval_every && step % config.eval_every == 0) tracker.evaluate_now(model, step);
  }
  tracker.finish(model, config.xe_steps);
  return tracker.result;
}

StageResult train_scst(M2Model<float>& model, const std::vector<TrainingImage>& train,
                       const std::vector<TrainingImage>* val, const Vocabulary& vocab, const IdfTable& idf,
                       const TrainConfig& config, TrainLog& log) {
  config.validate(true);
  check_vocab(model, vocab);
  if (train.empty()) throw InputError("train_scst: empty training split");

  Adam<float> adam(model.params, {});
  EpochSampler sampler(train.size(), derive_seed(config.seed, "scst-order"));
  Tracker tracker{val, vocab, config, log, "scst", {}, 0};
  for (std::size_t step = 1; step <= config.rl_steps; ++step) {
    const auto ids = sampler.next(std::min(config.batch_size, train.size()));
    std::vector<ScstBatch> batch(ids.size());
    run_sharded(config.workers, ids.size(), [&](std::size_t, std::size_t k) {
      const TrainingImage& img = train[ids[k]];
      batch[k].image = &img;
      batch[k].samples = sample_topk_beams(model, img.features, config.beam, config.max_len);
      assign_rewards(batch[k].samples, img.references, idf, vocab);
    });
    // a vocabulary too small to yield two beams leaves nothing to compare
    std::erase_if(batch, [](const ScstBatch& b) { return b.samples.size() < 2; });
    if (batch.empty()) throw InputError("train_scst: no image produced two distinct beams");
    const ScstStats stats = scst_update(model, adam, batch, config.rl_lr, config.workers);
    tracker.result.final_loss = stats.mean_reward;
    if (config.log_every && (step % config.log_every == 0 || step == config.rl_steps))
      log.write("scst", step, "reward", stats.mean_reward, config.rl_lr);
    if (config.eval_every && step % config.eval_every == 0) tracker.evaluate_now(model, step);
  }
  tracker.finish(model, config.rl_steps);
  return tracker.result;
}

#define M2_INSTANTIATE_TRAINING(T)                                                                                 \
  template Var<T> xe_loss(Var<T>, const std::vector<std::int32_t>&, std::int32_t);                                 \
  template std::vector<BeamSample> sample_topk_beams(const M2Model<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Var<T> scst_surrogate(const M2Model<T>&, Tape<T>&, const Tensor<T>&, const std::vector<BeamSample>&,     \
                                 const std::vector<double>&, double);                                              \
  template ScstStats scst_update(M2Model<T>&, Adam<T>&, const std::vector<ScstBatch>&, double, std::size_t);

M2_INSTANTIATE_TRAINING(float)
M2_INSTANTIATE_TRAINING(double)

}  // namespace m2
