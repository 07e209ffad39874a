#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "m2/tensor.hpp"

namespace m2 {

using TokenList = std::vector<std::string>;

// Lowercases ASCII letters, deletes ASCII punctuation, splits on whitespace.
TokenList tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary();
  // Reserved tokens followed by `words` in the given order.
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(std::int32_t id) const;
  static bool is_special(std::int32_t id) { return id >= 0 && id < std::int32_t(kReserved); }

  // One token per line, reserved tokens first.
  std::string serialize() const;
  static Vocabulary deserialize(const std::string& text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct CaptionRecord {
  std::uint64_t image_id = 0;
  std::vector<TokenList> references;
};

// Keeps tokens seen at least min_count times, ordered by descending count
// then lexicographically.
Vocabulary build_vocab(const std::vector<CaptionRecord>& records, std::size_t min_count = 5);

inline constexpr std::size_t kMaxCaptionLength = 20;

// BOS, token ids, EOS, then PAD up to max_len. Long captions lose trailing
// words so that EOS always fits.
std::vector<std::int32_t> encode_ids(const TokenList& tokens, const Vocabulary& vocab,
                                     std::size_t max_len = kMaxCaptionLength);

// Words up to the first EOS with every reserved id dropped.
TokenList decode_tokens(const std::vector<std::int32_t>& ids, const Vocabulary& vocab);
std::string decode_ids(const std::vector<std::int32_t>& ids, const Vocabulary& vocab);
std::string join_tokens(const TokenList& tokens);

// ---- region features -------------------------------------------------------

inline constexpr std::size_t kMaxRegions = 50;

struct FeatureRecord {
  std::uint64_t image_id = 0;
  Tensor<float> features;  // [n, d_feat]
  std::size_t regions() const { return features.rows(); }
};

// Features padded to max_regions rows plus the validity mask of those rows.
struct PaddedFeatures {
  Tensor<float> features;
  std::vector<std::uint8_t> valid;
};
PaddedFeatures pad_regions(const FeatureRecord& record, std::size_t max_regions = kMaxRegions);

using WarningSink = std::function<void(const std::string&)>;

// Streaming reader for the feature container (docs/formats.md). Records with
// more than max_regions rows are truncated and reported through `warn`;
// non-finite values are a FormatError naming the image id.
class FeatureReader {
 public:
  explicit FeatureReader(const std::string& path, std::size_t max_regions = kMaxRegions, WarningSink warn = nullptr);
  std::size_t d_feat() const { return d_feat_; }
  bool next(FeatureRecord& out);

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t d_feat_ = 0;
  std::size_t max_regions_;
  WarningSink warn_;
};

std::vector<FeatureRecord> load_features(const std::string& path, std::size_t expected_d_feat = 0,
                                         std::size_t max_regions = kMaxRegions, WarningSink warn = nullptr);
void write_features(const std::string& path, std::size_t d_feat, const std::vector<FeatureRecord>& records);

// ---- captions, manifest, external embeddings -------------------------------

// Line-delimited JSON objects {"image_id": <int>, "caption": <string>}; lines
// for the same image are grouped in first-seen order.
std::vector<CaptionRecord> load_captions(const std::string& path);
void write_captions(const std::string& path, const std::vector<CaptionRecord>& records);

struct SplitFiles {
  std::string features;
  std::string captions;
};

// Text manifest, one split per line: "<split> <features> <captions>". Blank
// lines and '#' comments are ignored; relative paths resolve against the
// manifest's directory.
std::map<std::string, SplitFiles> load_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::map<std::string, SplitFiles>& splits);

// Plain "token v1 .. vd" lines. Rows of vocabulary words missing from the
// file, and of the reserved tokens, stay zero.
Tensor<float> load_glove(const std::string& path, const Vocabulary& vocab, std::size_t dim);

// ---- joined examples and the synthetic scene generator ---------------------

struct Example {
  std::uint64_t image_id = 0;
  Tensor<float> features;  // [n, d_feat]
  std::vector<TokenList> references;
};

// Pairs every feature record with its captions; images without captions are
// an InputError.
std::vector<Example> join_examples(const std::vector<FeatureRecord>& features,
                                   const std::vector<CaptionRecord>& captions);

struct SyntheticConfig {
  std::size_t scenes = 500;
  std::size_t d_feat = 32;
  std::size_t max_objects = 3;
  std::size_t distractors = 3;
  std::size_t captions_per_scene = 5;
  double noise = 0.1;
  std::uint64_t seed = 1;
  std::uint64_t first_image_id = 1;
};

struct SyntheticDataset {
  std::vector<FeatureRecord> features;
  std::vector<CaptionRecord> captions;
};

// Scenes of coloured shapes at random positions. Each object is one region
// (colour and shape one-hots, position, size, objectness, noise) and the
// captions name the objects from left to right. Fully determined by config.
SyntheticDataset generate_synthetic(const SyntheticConfig& config);

// Writes train/val/test splits, manifest.txt and vocab.txt under dir.
void write_synthetic_dataset(const std::string& dir, const SyntheticConfig& config, double val_fraction = 0.1,
                             double test_fraction = 0.1, std::size_t min_count = 5);

}  // namespace m2
