#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "m2/errors.hpp"
#include "m2/metrics.hpp"

using namespace m2;

namespace {

using Corpus = std::vector<std::vector<TokenList>>;

TokenList T(const char* s) { return tokenize(s); }

// Dense brute-force CIDEr-D: enumerate every n-gram of the corpus, build
// explicit vectors, compute document frequency by scanning images.
double brute_cider(const TokenList& cand, const std::vector<TokenList>& refs, const Corpus& corpus) {
  using Gram = std::vector<std::string>;
  auto grams = [](const TokenList& s, std::size_t n) {
    std::map<Gram, double> out;
    for (std::size_t i = 0; i + n <= s.size(); ++i) out[Gram(s.begin() + long(i), s.begin() + long(i + n))] += 1;
    return out;
  };
  const double m = double(corpus.size());
  double total = 0;
  for (const auto& ref : refs) {
    double per_ref = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
      std::set<Gram> space;
      auto gc = grams(cand, n), gr = grams(ref, n);
      for (auto& [g, _] : gc) space.insert(g);
      for (auto& [g, _] : gr) space.insert(g);
      std::vector<double> vc, vr;
      for (const Gram& g : space) {
        double df = 0;
        for (const auto& image : corpus) {
          bool hit = false;
          for (const auto& r : image) hit = hit || grams(r, n).count(g);
          df += hit ? 1 : 0;
        }
        const double w = std::log(m) - std::log(std::max(1.0, df));
        vc.push_back((gc.count(g) ? gc[g] : 0.0) * w);
        vr.push_back((gr.count(g) ? gr[g] : 0.0) * w);
      }
      double dot = 0, nc = 0, nr = 0;
      for (std::size_t i = 0; i < vc.size(); ++i) {
        dot += std::min(vc[i], vr[i]) * vr[i];
        nc += vc[i] * vc[i];
        nr += vr[i] * vr[i];
      }
      double sim = (nc > 0 && nr > 0) ? dot / std::sqrt(nc * nr) : dot;
      const double delta = double(cand.size()) - double(ref.size());
      per_ref += sim * std::exp(-delta * delta / 72.0);
    }
    total += per_ref / 4.0;
  }
  return 10.0 * total / double(refs.size());
}

const Corpus kToy{
    {T("a red circle next to a blue square"), T("a blue square and a red circle"), T("two shapes")},
    {T("a green star on the left"), T("a star that is green"), T("a single green star")},
    {T("a white heart and a black circle"), T("black circle right of a white heart"), T("a heart")},
};

}  // namespace

TEST_CASE("cider_d: identical candidate scores 10") {
  Corpus corpus{{T("a red circle on the left")}, {T("two blue squares side by side")}};
  IdfTable idf = IdfTable::build(corpus);
  CHECK(cider_d(corpus[0][0], corpus[0], idf) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(cider_d(corpus[1][0], corpus[1], idf) == doctest::Approx(10.0).epsilon(1e-12));
  // a three-token sentence has no 4-grams, so one of the four orders contributes nothing
  Corpus short_corpus{{T("two blue squares")}, {T("a red circle")}};
  CHECK(cider_d(short_corpus[0][0], short_corpus[0], IdfTable::build(short_corpus)) == doctest::Approx(7.5));
}

TEST_CASE("cider_d: no shared n-gram scores 0, empty candidate scores 0") {
  IdfTable idf = IdfTable::build(kToy);
  CHECK(cider_d(T("purple elephants dancing"), kToy[0], idf) == 0.0);
  CHECK(cider_d(TokenList{}, kToy[0], idf) == 0.0);
  CHECK_THROWS_AS(cider_d(T("a"), std::vector<TokenList>{}, idf), InputError);
}

TEST_CASE("cider_d matches the brute-force oracle on a 3-image corpus") {
  IdfTable idf = IdfTable::build(kToy);
  const std::vector<TokenList> candidates{T("a red circle and a blue square"), T("a green star"),
                                          T("a black circle next to a white heart"), T("a a a red red"),
                                          T("a star and a heart")};
  for (std::size_t img = 0; img < kToy.size(); ++img)
    for (const auto& c : candidates) CHECK(cider_d(c, kToy[img], idf) == doctest::Approx(brute_cider(c, kToy[img], kToy)).epsilon(1e-6));
}

TEST_CASE("cider_d scores stay in [0, 10] and do not depend on reference order or worker count") {
  std::mt19937_64 rng(3);
  const std::vector<std::string> words{"a", "red", "blue", "circle", "square", "and", "left", "of", "the"};
  auto random_sentence = [&] {
    TokenList s;
    const std::size_t n = 1 + rng() % 9;
    for (std::size_t i = 0; i < n; ++i) s.push_back(words[rng() % words.size()]);
    return s;
  };
  Corpus corpus;
  std::vector<TokenList> cands;
  for (int i = 0; i < 20; ++i) {
    corpus.push_back({random_sentence(), random_sentence(), random_sentence(), random_sentence()});
    cands.push_back(random_sentence());
  }
  IdfTable idf = IdfTable::build(corpus);
  auto serial = cider_d(cands, corpus, idf, 1);
  auto parallel = cider_d(cands, corpus, idf, 4);
  CHECK(serial == parallel);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    CHECK(serial[i] >= 0.0);
    CHECK(serial[i] <= 10.0 + 1e-12);
    auto refs = corpus[i];
    for (int p = 0; p < 5; ++p) {
      std::shuffle(refs.begin(), refs.end(), rng);
      CHECK(cider_d(cands[i], refs, idf) == doctest::Approx(serial[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("idf table counts each n-gram once per image") {
  Corpus corpus{{T("a dog"), T("a dog runs")}, {T("a cat")}};
  IdfTable idf = IdfTable::build(corpus);
  CHECK(idf.corpus_size() == 2);
  CHECK(idf.document_frequency(1, "a") == 2.0);
  CHECK(idf.document_frequency(1, "dog") == 1.0);
  CHECK(idf.document_frequency(2, "a\x1f" "dog") == 1.0);
  CHECK(idf.document_frequency(1, "zebra") == 0.0);
  CHECK(idf.weight(1, "a") == 0.0);
  CHECK(idf.weight(1, "zebra") == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(idf.document_frequency(5, "a"), InputError);
}

TEST_CASE("bleu examples") {
  const std::vector<TokenList> refs{T("the cat sat on the mat")};
  const BleuScores same = bleu_sentence(refs[0], refs);
  for (double s : same) CHECK(s == doctest::Approx(1.0));
  for (double s : bleu_sentence(T("dogs run fast"), refs)) CHECK(s == 0.0);

  // clipped unigram precision 1/4, no bigram matches, candidate longer than reference
  const BleuScores b = bleu_sentence(T("the the the the"), {T("the cat sat")});
  CHECK(b[0] == doctest::Approx(0.25));
  CHECK(b[1] == 0.0);
  CHECK(b[3] == 0.0);
}

TEST_CASE("bleu brevity penalty and closest reference length") {
  // candidate of 3 tokens, references of 6 and 2: closest is 2, no penalty
  BleuScores a = bleu_sentence(T("the cat sat"), {T("the cat sat on a mat"), T("cat sat")});
  CHECK(a[0] == doctest::Approx(1.0));
  // only a 6-token reference: p1 = 1, bp = exp(1 - 6/3)
  BleuScores b = bleu_sentence(T("the cat sat"), {T("the cat sat on a mat")});
  CHECK(b[0] == doctest::Approx(std::exp(-1.0)));
  CHECK(b[1] == doctest::Approx(std::exp(-1.0)));
  // candidate 4 tokens, refs of 3 and 5 tokens: tie goes to the shorter, no penalty
  BleuScores c = bleu_sentence(T("a b c d"), {T("a b c"), T("a b c d e")});
  CHECK(c[0] == doctest::Approx(1.0));
}

TEST_CASE("bleu corpus pools counts across sentences") {
  const std::vector<TokenList> cands{T("a b c d"), T("x y")};
  const Corpus refs{{T("a b c d")}, {T("x z")}};
  const BleuScores s = bleu_corpus(cands, refs);
  // p1 = 5/6, p2 = 3/4, no penalty
  CHECK(s[0] == doctest::Approx(5.0 / 6.0));
  CHECK(s[1] == doctest::Approx(std::sqrt(5.0 / 6.0 * 3.0 / 4.0)));
  // p3 = 2/2, p4 = 1/1 over the first sentence only
  CHECK(s[3] == doctest::Approx(std::pow(5.0 / 6.0 * 3.0 / 4.0 * 1.0 * 1.0, 0.25)));
}

TEST_CASE("rouge_l examples") {
  CHECK(rouge_l(T("a b c"), {T("a b c")}) == doctest::Approx(1.0));
  CHECK(rouge_l(T("a b c"), {T("d e f")}) == 0.0);
  CHECK(lcs_length(T("a b c d"), T("a c d e")) == 3);
  const double p = 0.75, r = 0.75, b2 = 1.44;
  CHECK(rouge_l(T("a b c d"), {T("a c d e")}) == doctest::Approx((1 + b2) * p * r / (r + b2 * p)));
  // P = 1, R = 1/2
  const double f = (1 + b2) * 0.5 / (0.5 + b2);
  CHECK(rouge_l(T("a b"), {T("a x b y"), T("q")}) == doctest::Approx(f));
  CHECK(rouge_l(TokenList{}, {T("a")}) == 0.0);
}

TEST_CASE("adding an unrelated image changes only the idf") {
  const std::vector<TokenList> cands{T("a red circle and a blue square"), T("a green star"), T("a heart")};
  Corpus bigger = kToy;
  bigger.push_back({T("a yellow triangle above the square"), T("yellow triangle")});

  const EvalReport base = evaluate(cands, kToy);
  const IdfTable idf_big = IdfTable::build(bigger);
  const EvalReport with_idf = evaluate(cands, kToy, &idf_big);
  for (std::size_t n = 0; n < 4; ++n) CHECK(with_idf.bleu[n] == base.bleu[n]);
  CHECK(with_idf.rouge_l == base.rouge_l);
  for (std::size_t i = 0; i < cands.size(); ++i)
    CHECK(with_idf.per_image_cider[i] == doctest::Approx(brute_cider(cands[i], kToy[i], bigger)).epsilon(1e-9));
  CHECK(with_idf.cider_d != base.cider_d);
}

TEST_CASE("evaluate on an identical corpus") {
  std::vector<TokenList> cands;
  Corpus refs;
  for (const auto& image : kToy) {
    cands.push_back(image[0]);
    refs.push_back({image[0]});
  }
  EvalReport r = evaluate(cands, refs);
  for (double b : r.bleu) CHECK(b == doctest::Approx(1.0));
  CHECK(r.rouge_l == doctest::Approx(1.0));
  CHECK(r.cider_d == doctest::Approx(10.0));
  CHECK(r.to_json().find("\"CIDEr-D\"") != std::string::npos);
  CHECK_THROWS_AS(evaluate({}, {}), InputError);
  CHECK_THROWS_AS(evaluate(cands, Corpus{}), InputError);
}
