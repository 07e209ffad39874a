#include "m2/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "m2/errors.hpp"

namespace m2 {

// ---- steppers ----------------------------------------------------------------

template <typename T>
CachedStepper<T>::CachedStepper(const M2Model<T>& model, const Tensor<T>& features,
                                const std::vector<std::uint8_t>& region_valid)
    : model_(model) {
  enc_ = encode_regions(model_, tape_.constant(features), region_valid);
  const DecoderParams& dec = model_.decoder;
  for (std::size_t j = 0; j < dec.layers.size(); ++j)
    cross_.push_back(cross_keys_values(model_.params, dec.layers[j], enc_, dec.connectivity, j));
}

template <typename T>
void CachedStepper<T>::start() {
  caches_.assign(model_.decoder.layers.size(), std::vector<SelfAttentionCache<T>>(1));
  position_ = 0;
}

template <typename T>
Tensor<double> CachedStepper<T>::step(const std::vector<std::int32_t>& newest) {
  if (caches_.empty() || newest.size() != caches_.front().size())
    throw ContractError("stepper: " + std::to_string(newest.size()) + " tokens for " +
                        std::to_string(caches_.empty() ? 0 : caches_.front().size()) + " rows");
  const DecoderParams& dec = model_.decoder;
  Var<T> y = embed_tokens_at(tape_, model_.params, dec.embedding, newest, position_);
  for (std::size_t j = 0; j < dec.layers.size(); ++j)
    y = decoder_layer(model_.params, dec.layers[j], cross_[j], y, enc_.region_valid, dec.connectivity, {},
                      &caches_[j]);
  ++position_;
  return output_log_probs(model_.params, dec.embedding, y).value().template cast<double>();
}

template <typename T>
void CachedStepper<T>::reorder(const std::vector<std::size_t>& parents) {
  for (auto& layer : caches_) {
    std::vector<SelfAttentionCache<T>> next;
    next.reserve(parents.size());
    for (std::size_t p : parents) next.push_back(layer.at(p));
    layer = std::move(next);
  }
}

template <typename T>
NaiveStepper<T>::NaiveStepper(const M2Model<T>& model, const Tensor<T>& features,
                              const std::vector<std::uint8_t>& region_valid)
    : model_(model), features_(features), valid_(region_valid) {}

template <typename T>
void NaiveStepper<T>::start() {
  prefixes_.assign(1, {});
}

template <typename T>
Tensor<double> NaiveStepper<T>::step(const std::vector<std::int32_t>& newest) {
  if (newest.size() != prefixes_.size()) throw ContractError("stepper: token count does not match rows");
  const std::size_t v = model_.config.vocab_size;
  Tensor<double> out = Tensor<double>::matrix(prefixes_.size(), v);
  for (std::size_t r = 0; r < prefixes_.size(); ++r) {
    prefixes_[r].push_back(newest[r]);
    Tape<T> tape(false);
    const auto enc = encode_regions(model_, tape.constant(features_), valid_);
    const Tensor<T> lp = decode_log_probs(model_, enc, prefixes_[r]).value();
    const std::size_t last = prefixes_[r].size() - 1;
    for (std::size_t c = 0; c < v; ++c) out(r, c) = double(lp(last, c));
  }
  return out;
}

template <typename T>
void NaiveStepper<T>::reorder(const std::vector<std::size_t>& parents) {
  std::vector<std::vector<std::int32_t>> next;
  for (std::size_t p : parents) next.push_back(prefixes_.at(p));
  prefixes_ = std::move(next);
}

EnsembleStepper::EnsembleStepper(std::vector<std::unique_ptr<Stepper>> members) : members_(std::move(members)) {
  if (members_.empty()) throw ConfigError("ensemble: no models");
  for (const auto& m : members_)
    if (m->vocab_size() != members_.front()->vocab_size())
      throw ConfigError("ensemble: vocabulary sizes differ (" + std::to_string(m->vocab_size()) + " vs " +
                        std::to_string(members_.front()->vocab_size()) + ")");
}

void EnsembleStepper::start() {
  for (auto& m : members_) m->start();
}

Tensor<double> EnsembleStepper::step(const std::vector<std::int32_t>& newest) {
  Tensor<double> mean;
  for (auto& m : members_) {
    Tensor<double> lp = m->step(newest);
    if (mean.empty()) mean = Tensor<double>(lp.shape());
    for (std::size_t i = 0; i < lp.size(); ++i) mean[i] += std::exp(lp[i]);
  }
  for (double& p : mean.storage()) p = std::log(p / double(members_.size()));
  return mean;
}

void EnsembleStepper::reorder(const std::vector<std::size_t>& parents) {
  for (auto& m : members_) m->reorder(parents);
}

// ---- beam search ---------------------------------------------------------------

namespace {

struct Candidate {
  double score;
  std::size_t source;  // index into the current beam
  std::int32_t token;  // -1 keeps a finished hypothesis unchanged
};

bool better(const Candidate& a, const Candidate& b, const std::vector<Hypothesis>& beam) {
  if (a.score != b.score) return a.score > b.score;
  const auto& pa = beam[a.source].ids;
  const auto& pb = beam[b.source].ids;
  const std::size_t la = pa.size() + (a.token >= 0), lb = pb.size() + (b.token >= 0);
  for (std::size_t i = 0; i < std::min(la, lb); ++i) {
    const std::int32_t x = i < pa.size() ? pa[i] : a.token;
    const std::int32_t y = i < pb.size() ? pb[i] : b.token;
    if (x != y) return x < y;
  }
  return la < lb;
}

}  // namespace

std::vector<Hypothesis> beam_search(Stepper& stepper, const BeamOptions& options) {
  if (options.beam < 1) throw ConfigError("beam: size must be at least 1");
  if (options.max_len < 1) throw ConfigError("beam: max_len must be at least 1");
  if (options.min_len > options.max_len) throw ConfigError("beam: min_len exceeds max_len");
  const std::size_t vocab = stepper.vocab_size();
  stepper.start();
  std::vector<Hypothesis> beam(1);
  std::vector<std::size_t> active{0};  // beam index of each stepper row
  std::vector<std::int32_t> newest{Vocabulary::kBos};

  for (std::size_t t = 0; t < options.max_len && !active.empty(); ++t) {
    const Tensor<double> lp = stepper.step(newest);
    const bool eos_allowed = t + 1 >= options.min_len;
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < beam.size(); ++i)
      if (beam[i].finished) cands.push_back({beam[i].log_prob, i, -1});
    for (std::size_t r = 0; r < active.size(); ++r) {
      // at most `beam` expansions of one row can survive
      std::vector<Candidate> row;
      for (std::size_t v = 0; v < vocab; ++v) {
        const auto tok = std::int32_t(v);
        if (tok == Vocabulary::kPad || tok == Vocabulary::kBos) continue;
        if (tok == Vocabulary::kEos && !eos_allowed) continue;
        row.push_back({beam[active[r]].log_prob + lp(r, v), active[r], tok});
      }
      const std::size_t keep = std::min(options.beam, row.size());
      std::partial_sort(row.begin(), row.begin() + long(keep), row.end(),
                        [&](const Candidate& a, const Candidate& b) { return better(a, b, beam); });
      cands.insert(cands.end(), row.begin(), row.begin() + long(keep));
    }
    const std::size_t keep = std::min(options.beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + long(keep), cands.end(),
                      [&](const Candidate& a, const Candidate& b) { return better(a, b, beam); });

    std::vector<Hypothesis> next;
    std::vector<std::size_t> parents, next_active;
    std::vector<std::int32_t> next_newest;
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = cands[c];
      Hypothesis h = beam[cand.source];
      if (cand.token >= 0) {
        const double step_lp = cand.score - h.log_prob;
        h.ids.push_back(cand.token);
        h.step_log_probs.push_back(step_lp);
        h.log_prob = cand.score;
        h.finished = cand.token == Vocabulary::kEos;
        if (!h.finished) {
          const auto row = std::size_t(std::find(active.begin(), active.end(), cand.source) - active.begin());
          parents.push_back(row);
          next_active.push_back(next.size());
          next_newest.push_back(cand.token);
        }
      }
      next.push_back(std::move(h));
    }
    beam = std::move(next);
    active = std::move(next_active);
    newest = std::move(next_newest);
    if (!active.empty() && t + 1 < options.max_len) stepper.reorder(parents);
  }
  for (const auto& h : beam)
    if (!std::isfinite(h.log_prob)) throw NumericError("beam: non-finite hypothesis score");
  return beam;
}

template <typename T>
Tensor<double> ensemble_distribution(const std::vector<const M2Model<T>*>& models, const Tensor<T>& features,
                                     const std::vector<std::uint8_t>& region_valid,
                                     const std::vector<std::int32_t>& prefix) {
  if (models.empty()) throw ConfigError("ensemble: no models");
  const std::size_t v = models.front()->config.vocab_size;
  Tensor<double> mean = Tensor<double>::matrix(1, v);
  for (const auto* m : models) {
    if (m->config.vocab_size != v) throw ConfigError("ensemble: vocabulary sizes differ");
    const Tensor<T> p = decode_distributions(*m, features, region_valid, prefix);
    for (std::size_t c = 0; c < v; ++c) mean[c] += double(p(prefix.size() - 1, c)) / double(models.size());
  }
  return mean;
}

template <typename T>
std::vector<Hypothesis> beam_search_cached(const std::vector<const M2Model<T>*>& models, const Tensor<T>& features,
                                           const std::vector<std::uint8_t>& region_valid,
                                           const BeamOptions& options) {
  if (models.empty()) throw ConfigError("beam: no models");
  if (models.size() == 1) {
    CachedStepper<T> stepper(*models.front(), features, region_valid);
    return beam_search(stepper, options);
  }
  std::vector<std::unique_ptr<Stepper>> members;
  for (const auto* m : models) members.push_back(std::make_unique<CachedStepper<T>>(*m, features, region_valid));
  EnsembleStepper stepper(std::move(members));
  return beam_search(stepper, options);
}

ConstrainedResult constraint_filter(const std::vector<Hypothesis>& ranked,
                                    const std::vector<std::int32_t>& constraints) {
  if (ranked.empty()) throw ContractError("constraint_filter: empty beam");
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& ids = ranked[i].ids;
    const bool ok = std::all_of(constraints.begin(), constraints.end(),
                                [&](std::int32_t c) { return std::find(ids.begin(), ids.end(), c) != ids.end(); });
    if (ok) return {ranked[i], i, true};
  }
  return {ranked.front(), 0, false};
}

// ---- integrated gradients ----------------------------------------------------

std::vector<Tensor<double>> integrated_gradients(const MultiGradFn& grad_fn, const Tensor<double>& x,
                                                 const Tensor<double>& baseline, std::size_t steps) {
  if (steps < 2) throw ConfigError("ig.steps: must be at least 2, got " + std::to_string(steps));
  if (x.shape() != baseline.shape()) throw ShapeError("integrated_gradients: baseline shape differs from input");
  std::vector<Tensor<double>> total;
  Tensor<double> point(x.shape());
  for (std::size_t j = 1; j <= steps; ++j) {
    const double alpha = double(j) / double(steps);
    for (std::size_t i = 0; i < x.size(); ++i) point[i] = baseline[i] + alpha * (x[i] - baseline[i]);
    std::vector<Tensor<double>> grads = grad_fn(point);
    if (total.empty()) total.assign(grads.size(), Tensor<double>(x.shape()));
    if (grads.size() != total.size()) throw ContractError("integrated_gradients: output count changed");
    for (std::size_t o = 0; o < grads.size(); ++o)
      for (std::size_t i = 0; i < x.size(); ++i) total[o][i] += grads[o][i];
  }
  for (auto& t : total)
    for (std::size_t i = 0; i < x.size(); ++i) t[i] *= (x[i] - baseline[i]) / double(steps);
  return total;
}

Tensor<double> integrated_gradients(const std::function<Tensor<double>(const Tensor<double>&)>& grad_fn,
                                    const Tensor<double>& x, const Tensor<double>& baseline, std::size_t steps) {
  return integrated_gradients([&](const Tensor<double>& p) { return std::vector<Tensor<double>>{grad_fn(p)}; }, x,
                              baseline, steps)
      .front();
}

std::vector<double> region_scores(const Tensor<double>& attribution) {
  const std::size_t n = attribution.rows(), d = attribution.cols();
  std::vector<double> s(n, 0.0);
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) s[r] += std::abs(attribution(r, c)) / double(d);
    total += s[r];
  }
  for (double& v : s) v = total > 0 ? v / total : 1.0 / double(n);
  return s;
}

std::vector<double> contrast_stretch(const std::vector<double>& scores) {
  if (scores.empty()) return {};
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double range = *hi - *lo;
  std::vector<double> out(scores.size(), 0.0);
  if (range > 0)
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - *lo) / range;
  return out;
}

std::vector<WordAttribution> attribute_regions(const M2Model<double>& model, const Tensor<double>& features,
                                               const std::vector<std::int32_t>& words, std::size_t steps) {
  if (words.empty()) return {};
  if (features.rank() != 2 || features.cols() != model.config.d_feat)
    throw ShapeError("attribute_regions: features must be [n, " + std::to_string(model.config.d_feat) + "]");
  std::vector<std::int32_t> prefix{Vocabulary::kBos};
  prefix.insert(prefix.end(), words.begin(), words.end() - 1);
  const std::vector<std::uint8_t> valid(features.rows(), 1);

  auto grads = [&](const Tensor<double>& x) {
    Tape<double> tape;
    Var<double> xv = tape.variable(x);
    const auto enc = encode_regions(model, xv, valid);
    Var<double> lp = decode_log_probs(model, enc, prefix);
    std::vector<Var<double>> roots;
    for (std::size_t s = 0; s < words.size(); ++s) {
      std::vector<double> w(words.size(), 0.0);
      w[s] = 1.0;
      roots.push_back(pick_weighted_sum(lp, words, w));
    }
    std::vector<Tensor<double>> out;
    for (Var<double> root : roots) {
      tape.zero_grad();
      tape.backward(root);
      out.push_back(tape.has_grad(xv.id) ? tape.grad(xv) : Tensor<double>(x.shape()));
    }
    return out;
  };
  const std::vector<Tensor<double>> ig = integrated_gradients(grads, features, Tensor<double>(features.shape()), steps);

  std::vector<WordAttribution> out;
  for (std::size_t s = 0; s < words.size(); ++s) {
    WordAttribution a;
    a.word = words[s];
    a.raw = ig[s];
    a.scores = region_scores(ig[s]);
    a.stretched = contrast_stretch(a.scores);
    a.argmax_region = std::size_t(std::max_element(a.scores.begin(), a.scores.end()) - a.scores.begin());
    out.push_back(std::move(a));
  }
  return out;
}

template class CachedStepper<float>;
template class CachedStepper<double>;
template class NaiveStepper<float>;
template class NaiveStepper<double>;

#define M2_INSTANTIATE_INFERENCE(T)                                                                                  \
  template Tensor<double> ensemble_distribution(const std::vector<const M2Model<T>*>&, const Tensor<T>&,             \
                                                const std::vector<std::uint8_t>&, const std::vector<std::int32_t>&); \
  template std::vector<Hypothesis> beam_search_cached(const std::vector<const M2Model<T>*>&, const Tensor<T>&,       \
                                                      const std::vector<std::uint8_t>&, const BeamOptions&);

M2_INSTANTIATE_INFERENCE(float)
M2_INSTANTIATE_INFERENCE(double)

}  // namespace m2
