#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "m2/textdata.hpp"

namespace m2 {

inline constexpr std::size_t kMaxNGram = 4;

// n-gram counts of one sentence, indexed by n - 1. Keys join tokens with a
// unit separator so they cannot collide with ordinary text.
using NGramCounts = std::array<std::unordered_map<std::string, double>, kMaxNGram>;
NGramCounts count_ngrams(const TokenList& tokens, std::size_t max_n = kMaxNGram);

// Document frequencies over a reference corpus: an n-gram counts once per
// image however many of its references contain it.
class IdfTable {
 public:
  IdfTable() = default;
  static IdfTable build(const std::vector<std::vector<TokenList>>& references);

  std::size_t corpus_size() const { return images_; }
  double document_frequency(std::size_t n, const std::string& key) const;
  // log(M) - log(max(1, df))
  double weight(std::size_t n, const std::string& key) const;

 private:
  std::size_t images_ = 0;
  std::array<std::unordered_map<std::string, double>, kMaxNGram> df_;
};

inline constexpr double kCiderSigma = 6.0;

// Per-image CIDEr-D in [0, 10]. candidates[i] is scored against references[i].
std::vector<double> cider_d(const std::vector<TokenList>& candidates,
                            const std::vector<std::vector<TokenList>>& references, const IdfTable& idf,
                            std::size_t workers = 1);
double cider_d(const TokenList& candidate, const std::vector<TokenList>& references, const IdfTable& idf);

// Cumulative BLEU-1..4: brevity penalty times the geometric mean of clipped
// precisions up to n. The reference length is the one closest to the
// candidate, shorter on ties.
using BleuScores = std::array<double, kMaxNGram>;
BleuScores bleu_corpus(const std::vector<TokenList>& candidates, const std::vector<std::vector<TokenList>>& references);
BleuScores bleu_sentence(const TokenList& candidate, const std::vector<TokenList>& references);

inline constexpr double kRougeBeta = 1.2;
std::size_t lcs_length(const TokenList& a, const TokenList& b);
// Best LCS F-measure over the references.
double rouge_l(const TokenList& candidate, const std::vector<TokenList>& references);

struct EvalReport {
  BleuScores bleu{};
  double rouge_l = 0;
  double cider_d = 0;
  std::vector<double> per_image_cider;

  std::string to_json() const;
};

// IDF comes from `idf` when given, otherwise from the evaluated references.
EvalReport evaluate(const std::vector<TokenList>& candidates, const std::vector<std::vector<TokenList>>& references,
                    const IdfTable* idf = nullptr, std::size_t workers = 1);

}  // namespace m2
