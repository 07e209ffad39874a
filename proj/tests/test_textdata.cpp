#include <doctest.h>

#include <bit>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "m2/errors.hpp"
#include "m2/textdata.hpp"

using namespace m2;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("m2_textdata_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

CaptionRecord record(std::uint64_t id, std::initializer_list<const char*> captions) {
  CaptionRecord r{id, {}};
  for (const char* c : captions) r.references.push_back(tokenize(c));
  return r;
}

FeatureRecord feature_record(std::uint64_t id, std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> g;
  Tensor<float> t = Tensor<float>::matrix(n, d);
  for (float& v : t.storage()) v = g(rng);
  return FeatureRecord{id, std::move(t)};
}

}  // namespace

TEST_CASE("tokenize examples") {
  CHECK(tokenize("A man, riding!") == TokenList{"a", "man", "riding"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("Dog's dish.") == TokenList{"dogs", "dish"});
  CHECK(tokenize("  Two\tspaces\n and--dashes ") == TokenList{"two", "spaces", "anddashes"});
  CHECK(tokenize("caf\xc3\xa9 OK") == TokenList{"caf\xc3\xa9", "ok"});
  CHECK(tokenize("!!! ...").empty());
}

TEST_CASE("build_vocab keeps tokens seen at least min_count times") {
  std::vector<CaptionRecord> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back(record(std::uint64_t(i), {"a dog runs"}));
  for (int i = 0; i < 4; ++i) corpus.push_back(record(std::uint64_t(10 + i), {"cat"}));
  Vocabulary v = build_vocab(corpus);
  CHECK(v.contains("dog"));
  CHECK(v.contains("a"));
  CHECK_FALSE(v.contains("cat"));
  CHECK(v.id("cat") == Vocabulary::kUnk);
  CHECK(v.size() == 4 + 3);

  std::vector<CaptionRecord> repeated(5, record(1, {"the quick brown fox"}));
  Vocabulary r = build_vocab(repeated);
  for (const char* w : {"the", "quick", "brown", "fox"}) CHECK(r.contains(w));
  CHECK_THROWS_AS(build_vocab({}), InputError);
  CHECK_THROWS_AS(build_vocab({record(1, {""})}), InputError);
}

TEST_CASE("vocabulary ordering is deterministic and reserved ids are fixed") {
  std::vector<CaptionRecord> corpus{record(1, {"b a c a", "c a b"}), record(2, {"a b d d d d", "b d"})};
  Vocabulary v = build_vocab(corpus, 1);
  CHECK(v.token(0) == "<pad>");
  CHECK(v.token(1) == "<bos>");
  CHECK(v.token(2) == "<eos>");
  CHECK(v.token(3) == "<unk>");
  // counts: a 4, b 4, d 5, c 2
  CHECK(v.token(4) == "d");
  CHECK(v.token(5) == "a");
  CHECK(v.token(6) == "b");
  CHECK(v.token(7) == "c");
  std::vector<CaptionRecord> shuffled{corpus[1], corpus[0]};
  CHECK(build_vocab(shuffled, 1).serialize() == v.serialize());
  CHECK(Vocabulary::deserialize(v.serialize()).serialize() == v.serialize());
  CHECK_THROWS_AS(Vocabulary::deserialize("a\nb\n"), FormatError);
  CHECK_THROWS_AS(v.token(8), InputError);
}

TEST_CASE("encode_ids and decode_ids") {
  Vocabulary v(std::vector<std::string>{"a", "man", "dog"});
  auto ids = encode_ids({"a", "man"}, v);
  REQUIRE(ids.size() == 20);
  CHECK(ids[0] == 1);
  CHECK(ids[1] == v.id("a"));
  CHECK(ids[2] == v.id("man"));
  CHECK(ids[3] == 2);
  for (std::size_t i = 4; i < 20; ++i) CHECK(ids[i] == 0);
  CHECK(encode_ids({"zebra"}, v)[1] == Vocabulary::kUnk);
  CHECK(decode_ids(ids, v) == "a man");
  CHECK(decode_ids({1, 4, 3, 5, 2, 6}, v) == "a man");

  TokenList longer(30, "dog");
  auto t = encode_ids(longer, v);
  CHECK(t.size() == 20);
  CHECK(t.back() == Vocabulary::kEos);
  CHECK(decode_tokens(t, v).size() == 18);
}

TEST_CASE("encode/decode round-trips random in-vocabulary captions") {
  std::vector<std::string> words;
  for (int i = 0; i < 30; ++i) words.push_back("w" + std::to_string(i));
  Vocabulary v(words);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    TokenList caption;
    const std::size_t len = rng() % 19;
    for (std::size_t i = 0; i < len; ++i) caption.push_back(words[rng() % words.size()]);
    auto ids = encode_ids(caption, v);
    for (auto id : ids) CHECK((id >= 0 && std::size_t(id) < v.size()));
    CHECK(decode_tokens(ids, v) == caption);
  }
}

TEST_CASE("feature container round-trips bit-exactly") {
  fs::path dir = scratch("roundtrip");
  std::mt19937_64 rng(7);
  std::vector<FeatureRecord> records{feature_record(11, 3, 5, rng), feature_record(12, 1, 5, rng),
                                     feature_record(99, 50, 5, rng)};
  records[0].features[0] = -0.0f;
  records[0].features[1] = std::numeric_limits<float>::denorm_min();
  write_features((dir / "a.feat").string(), 5, records);
  auto back = load_features((dir / "a.feat").string(), 5);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].image_id == records[i].image_id);
    REQUIRE(back[i].features.shape() == records[i].features.shape());
    for (std::size_t k = 0; k < back[i].features.size(); ++k)
      CHECK(std::bit_cast<std::uint32_t>(back[i].features[k]) == std::bit_cast<std::uint32_t>(records[i].features[k]));
  }
  CHECK_THROWS_AS(load_features((dir / "a.feat").string(), 6), ConfigError);
}

TEST_CASE("records beyond 50 regions are truncated with a warning; one region pads to a 50-slot mask") {
  fs::path dir = scratch("clamp");
  std::mt19937_64 rng(8);
  std::vector<FeatureRecord> records{feature_record(1, 63, 4, rng), feature_record(2, 1, 4, rng)};
  write_features((dir / "b.feat").string(), 4, records);
  std::vector<std::string> warnings;
  auto back = load_features((dir / "b.feat").string(), 4, kMaxRegions, [&](const std::string& w) { warnings.push_back(w); });
  REQUIRE(back.size() == 2);
  CHECK(back[0].regions() == 50);
  CHECK(std::equal(back[0].features.data().begin(), back[0].features.data().end(), records[0].features.data().begin()));
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("63") != std::string::npos);

  PaddedFeatures p = pad_regions(back[1]);
  CHECK(p.features.shape() == Shape{50, 4});
  CHECK(p.valid.size() == 50);
  CHECK(std::count(p.valid.begin(), p.valid.end(), 1) == 1);
  CHECK(p.valid[0] == 1);
}

TEST_CASE("feature ingestion rejects non-finite values and malformed files") {
  fs::path dir = scratch("bad");
  std::mt19937_64 rng(9);
  std::vector<FeatureRecord> records{feature_record(5, 2, 3, rng), feature_record(77, 2, 3, rng)};
  records[1].features[4] = std::numeric_limits<float>::infinity();
  write_features((dir / "nan.feat").string(), 3, records);
  try {
    load_features((dir / "nan.feat").string());
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("77") != std::string::npos);
  }
  records[1].features[4] = 0.5f;
  write_features((dir / "trunc.feat").string(), 3, records);
  fs::resize_file(dir / "trunc.feat", fs::file_size(dir / "trunc.feat") - 2);
  CHECK_THROWS_AS(load_features((dir / "trunc.feat").string()), FormatError);
  std::ofstream(dir / "junk.feat") << "hello world";
  CHECK_THROWS_AS(load_features((dir / "junk.feat").string()), FormatError);
  CHECK_THROWS_AS(load_features((dir / "missing.feat").string()), FormatError);
}

TEST_CASE("captions, manifest, and glove files") {
  fs::path dir = scratch("text");
  {
    std::ofstream f(dir / "caps.jsonl");
    f << R"({"image_id": 4, "caption": "A red Circle."})" << "\n\n"
      << R"({"image_id": 2, "caption": "two"})" << "\n"
      << R"({"image_id": 4, "caption": "a circle"})" << "\n";
  }
  auto caps = load_captions((dir / "caps.jsonl").string());
  REQUIRE(caps.size() == 2);
  CHECK(caps[0].image_id == 4);
  CHECK(caps[0].references == std::vector<TokenList>{{"a", "red", "circle"}, {"a", "circle"}});
  write_captions((dir / "out.jsonl").string(), caps);
  CHECK(load_captions((dir / "out.jsonl").string())[0].references == caps[0].references);
  std::ofstream(dir / "bad.jsonl") << R"({"image_id": "x", "caption": 3})" << "\n";
  CHECK_THROWS_AS(load_captions((dir / "bad.jsonl").string()), FormatError);

  std::ofstream(dir / "manifest.txt") << "# comment\ntrain train.feat train.jsonl\n\ntest /abs/t.feat t.jsonl # tail\n";
  auto m = load_manifest((dir / "manifest.txt").string());
  CHECK(m.at("train").features == (dir / "train.feat").string());
  CHECK(m.at("test").features == "/abs/t.feat");
  std::ofstream(dir / "bad_manifest.txt") << "train only_one\n";
  CHECK_THROWS_AS(load_manifest((dir / "bad_manifest.txt").string()), FormatError);

  Vocabulary v(std::vector<std::string>{"red", "circle", "blue"});
  std::ofstream(dir / "glove.txt") << "red 1 2 3\nunknown 9 9 9\ncircle -1 0.5 2\n<pad> 7 7 7\n";
  Tensor<float> g = load_glove((dir / "glove.txt").string(), v, 3);
  CHECK(g.shape() == Shape{7, 3});
  CHECK(g(std::size_t(v.id("red")), 1) == 2.0f);
  CHECK(g(std::size_t(v.id("circle")), 0) == -1.0f);
  for (float x : g.row(std::size_t(v.id("blue")))) CHECK(x == 0.0f);
  for (float x : g.row(0)) CHECK(x == 0.0f);
  std::ofstream(dir / "short.txt") << "red 1 2\n";
  CHECK_THROWS_AS(load_glove((dir / "short.txt").string(), v, 3), FormatError);
}

TEST_CASE("synthetic generator is deterministic and captions follow left-to-right order") {
  SyntheticConfig cfg;
  cfg.scenes = 40;
  cfg.seed = 3;
  SyntheticDataset a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  REQUIRE(a.features.size() == 40);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(a.features[i].features == b.features[i].features);
    CHECK(a.captions[i].references == b.captions[i].references);
    CHECK(a.captions[i].references.size() == 5);
    CHECK(a.features[i].features.cols() == 32);
    for (const auto& ref : a.captions[i].references) CHECK(ref.size() + 2 <= kMaxCaptionLength);

    // recover objects from the features and check the canonical caption
    const Tensor<float>& f = a.features[i].features;
    std::vector<std::pair<float, std::string>> objs;
    const char* colors[] = {"red", "green", "blue", "yellow", "black", "white"};
    const char* shapes[] = {"circle", "square", "triangle", "star", "heart"};
    for (std::size_t r = 0; r < f.rows(); ++r) {
      if (f(r, 14) < 0.5f) continue;
      std::size_t c = 0, s = 0;
      for (std::size_t k = 0; k < 6; ++k)
        if (f(r, k) > f(r, c)) c = k;
      for (std::size_t k = 0; k < 5; ++k)
        if (f(r, 6 + k) > f(r, 6 + s)) s = k;
      objs.emplace_back(f(r, 11), std::string(colors[c]) + " " + shapes[s]);
    }
    std::sort(objs.begin(), objs.end());
    const TokenList& canonical = a.captions[i].references[0];
    std::string joined = join_tokens(canonical);
    std::size_t pos = 0;
    for (const auto& [x, name] : objs) {
      const std::size_t at = joined.find(name, pos);
      CHECK(at != std::string::npos);
      pos = at + name.size();
    }
  }
  cfg.seed = 4;
  CHECK_FALSE(generate_synthetic(cfg).captions[0].references == a.captions[0].references);
  cfg.d_feat = 8;
  CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
}

TEST_CASE("synthetic dataset files load back through the manifest") {
  fs::path dir = scratch("synthetic");
  SyntheticConfig cfg;
  cfg.scenes = 50;
  write_synthetic_dataset(dir.string(), cfg, 0.1, 0.2);
  auto manifest = load_manifest((dir / "manifest.txt").string());
  REQUIRE(manifest.count("train"));
  auto train = join_examples(load_features(manifest.at("train").features, 32), load_captions(manifest.at("train").captions));
  auto test = join_examples(load_features(manifest.at("test").features, 32), load_captions(manifest.at("test").captions));
  CHECK(train.size() == 35);
  CHECK(test.size() == 10);
  SyntheticDataset ref = generate_synthetic(cfg);
  CHECK(train[0].features == ref.features[0].features);
  Vocabulary v = Vocabulary::load((dir / "vocab.txt").string());
  CHECK(v.contains("a"));
  CHECK_THROWS_AS(join_examples(ref.features, {}), InputError);
}
