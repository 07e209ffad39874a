#include "m2/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "m2/errors.hpp"

namespace m2 {

NGramCounts count_ngrams(const TokenList& tokens, std::size_t max_n) {
  NGramCounts out;
  for (std::size_t n = 1; n <= std::min(max_n, kMaxNGram); ++n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string key = tokens[i];
      for (std::size_t k = 1; k < n; ++k) {
        key.push_back('\x1f');
        key += tokens[i + k];
      }
      out[n - 1][key] += 1.0;
    }
  }
  return out;
}

IdfTable IdfTable::build(const std::vector<std::vector<TokenList>>& references) {
  IdfTable t;
  t.images_ = references.size();
  for (const auto& refs : references) {
    std::array<std::unordered_set<std::string>, kMaxNGram> seen;
    for (const auto& ref : refs) {
      const NGramCounts c = count_ngrams(ref);
      for (std::size_t n = 0; n < kMaxNGram; ++n)
        for (const auto& [key, _] : c[n]) seen[n].insert(key);
    }
    for (std::size_t n = 0; n < kMaxNGram; ++n)
      for (const auto& key : seen[n]) t.df_[n][key] += 1.0;
  }
  return t;
}

double IdfTable::document_frequency(std::size_t n, const std::string& key) const {
  if (n < 1 || n > kMaxNGram) throw InputError("idf: n-gram order must be in [1, 4]");
  auto it = df_[n - 1].find(key);
  return it == df_[n - 1].end() ? 0.0 : it->second;
}

double IdfTable::weight(std::size_t n, const std::string& key) const {
  if (images_ == 0) return 0.0;
  return std::log(double(images_)) - std::log(std::max(1.0, document_frequency(n, key)));
}

namespace {

struct TfIdf {
  std::array<std::unordered_map<std::string, double>, kMaxNGram> vec;
  std::array<double, kMaxNGram> norm{};
  double length = 0;
};

TfIdf tfidf(const TokenList& tokens, const IdfTable& idf) {
  TfIdf out;
  const NGramCounts counts = count_ngrams(tokens);
  for (std::size_t n = 0; n < kMaxNGram; ++n) {
    for (const auto& [key, tf] : counts[n]) {
      const double v = tf * idf.weight(n + 1, key);
      out.vec[n][key] = v;
      out.norm[n] += v * v;
    }
    out.norm[n] = std::sqrt(out.norm[n]);
  }
  out.length = double(tokens.size());
  return out;
}

double cider_pair(const TfIdf& cand, const TfIdf& ref) {
  const double delta = cand.length - ref.length;
  const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
  double total = 0;
  for (std::size_t n = 0; n < kMaxNGram; ++n) {
    double dot = 0;
    for (const auto& [key, hv] : cand.vec[n]) {
      auto it = ref.vec[n].find(key);
      if (it != ref.vec[n].end()) dot += std::min(hv, it->second) * it->second;
    }
    if (cand.norm[n] > 0 && ref.norm[n] > 0) dot /= cand.norm[n] * ref.norm[n];
    total += dot * penalty;
  }
  return total / double(kMaxNGram);
}

}  // namespace

double cider_d(const TokenList& candidate, const std::vector<TokenList>& references, const IdfTable& idf) {
  if (references.empty()) throw InputError("cider_d: candidate has no references");
  if (candidate.empty()) return 0.0;
  const TfIdf cand = tfidf(candidate, idf);
  double sum = 0;
  for (const auto& ref : references) sum += cider_pair(cand, tfidf(ref, idf));
  return 10.0 * sum / double(references.size());
}

std::vector<double> cider_d(const std::vector<TokenList>& candidates,
                            const std::vector<std::vector<TokenList>>& references, const IdfTable& idf,
                            std::size_t workers) {
  if (candidates.size() != references.size())
    throw InputError("cider_d: " + std::to_string(candidates.size()) + " candidates for " +
                     std::to_string(references.size()) + " reference sets");
  std::vector<double> scores(candidates.size());
  workers = std::max<std::size_t>(1, std::min(workers, candidates.size()));
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < candidates.size(); i += workers) scores[i] = cider_d(candidates[i], references[i], idf);
  };
  if (workers == 1) {
    run(0);
    return scores;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        run(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return scores;
}

namespace {

struct BleuStats {
  std::array<double, kMaxNGram> matched{};
  std::array<double, kMaxNGram> total{};
  double cand_len = 0;
  double ref_len = 0;

  void add(const TokenList& candidate, const std::vector<TokenList>& references) {
    if (references.empty()) throw InputError("bleu: candidate has no references");
    const NGramCounts cand = count_ngrams(candidate);
    std::array<std::unordered_map<std::string, double>, kMaxNGram> max_ref;
    std::size_t best_len = references[0].size();
    for (const auto& ref : references) {
      const NGramCounts rc = count_ngrams(ref);
      for (std::size_t n = 0; n < kMaxNGram; ++n)
        for (const auto& [key, c] : rc[n]) max_ref[n][key] = std::max(max_ref[n][key], c);
      const auto diff = [&](std::size_t len) {
        return len > candidate.size() ? len - candidate.size() : candidate.size() - len;
      };
      if (diff(ref.size()) < diff(best_len) || (diff(ref.size()) == diff(best_len) && ref.size() < best_len))
        best_len = ref.size();
    }
    for (std::size_t n = 0; n < kMaxNGram; ++n) {
      for (const auto& [key, c] : cand[n]) {
        auto it = max_ref[n].find(key);
        if (it != max_ref[n].end()) matched[n] += std::min(c, it->second);
      }
      total[n] += candidate.size() >= n + 1 ? double(candidate.size() - n) : 0.0;
    }
    cand_len += double(candidate.size());
    ref_len += double(best_len);
  }

  BleuScores scores() const {
    BleuScores out{};
    if (cand_len == 0) return out;
    const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    double log_sum = 0;
    for (std::size_t n = 0; n < kMaxNGram; ++n) {
      if (matched[n] == 0) {
        log_sum = -std::numeric_limits<double>::infinity();
      } else {
        log_sum += std::log(matched[n] / total[n]);
      }
      out[n] = std::isinf(log_sum) ? 0.0 : bp * std::exp(log_sum / double(n + 1));
    }
    return out;
  }
};

}  // namespace

BleuScores bleu_corpus(const std::vector<TokenList>& candidates,
                       const std::vector<std::vector<TokenList>>& references) {
  if (candidates.size() != references.size()) throw InputError("bleu: candidate and reference counts differ");
  BleuStats s;
  for (std::size_t i = 0; i < candidates.size(); ++i) s.add(candidates[i], references[i]);
  return s.scores();
}

BleuScores bleu_sentence(const TokenList& candidate, const std::vector<TokenList>& references) {
  BleuStats s;
  s.add(candidate, references);
  return s.scores();
}

std::size_t lcs_length(const TokenList& a, const TokenList& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const TokenList& candidate, const std::vector<TokenList>& references) {
  if (references.empty()) throw InputError("rouge_l: candidate has no references");
  double best = 0;
  const double b2 = kRougeBeta * kRougeBeta;
  for (const auto& ref : references) {
    const double lcs = double(lcs_length(candidate, ref));
    if (lcs == 0) continue;
    const double p = lcs / double(candidate.size());
    const double r = lcs / double(ref.size());
    best = std::max(best, (1 + b2) * p * r / (r + b2 * p));
  }
  return best;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  for (std::size_t n = 0; n < kMaxNGram; ++n) j["BLEU-" + std::to_string(n + 1)] = bleu[n];
  j["ROUGE-L"] = rouge_l;
  j["CIDEr-D"] = cider_d;
  j["per_image_CIDEr-D"] = per_image_cider;
  return j.dump();
}

EvalReport evaluate(const std::vector<TokenList>& candidates, const std::vector<std::vector<TokenList>>& references,
                    const IdfTable* idf, std::size_t workers) {
  if (candidates.empty()) throw InputError("evaluate: no candidates");
  EvalReport report;
  report.bleu = bleu_corpus(candidates, references);
  double rouge = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) rouge += rouge_l(candidates[i], references[i]);
  report.rouge_l = rouge / double(candidates.size());
  const IdfTable local = idf ? IdfTable{} : IdfTable::build(references);
  report.per_image_cider = cider_d(candidates, references, idf ? *idf : local, workers);
  double total = 0;
  for (double s : report.per_image_cider) total += s;
  report.cider_d = total / double(candidates.size());
  return report;
}

}  // namespace m2
