#include "m2/textdata.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include <json.hpp>

#include "m2/errors.hpp"

namespace m2 {

namespace fs = std::filesystem;
using nlohmann::json;

TokenList tokenize(std::string_view text) {
  TokenList out;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 128 && std::isspace(c)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else if (c < 128 && std::ispunct(c)) {
      continue;
    } else {
      current.push_back(c < 128 ? char(std::tolower(c)) : ch);
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

// ---- vocabulary -------------------------------------------------------------

namespace {
const std::vector<std::string> kReservedTokens{"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  tokens_ = kReservedTokens;
  tokens_.insert(tokens_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\r\n") != std::string::npos)
      throw FormatError("vocabulary: invalid token at line " + std::to_string(i + 1));
    if (!index_.emplace(tokens_[i], std::int32_t(i)).second)
      throw FormatError("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || std::size_t(id) >= tokens_.size())
    throw InputError("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[std::size_t(id)];
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) out += t + "\n";
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.size() < kReserved || !std::equal(kReservedTokens.begin(), kReservedTokens.end(), lines.begin()))
    throw FormatError("vocabulary: file must start with " + join_tokens(kReservedTokens));
  return Vocabulary(std::vector<std::string>(lines.begin() + kReserved, lines.end()));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("vocabulary: cannot write " + path);
  f << serialize();
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("vocabulary: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

Vocabulary build_vocab(const std::vector<CaptionRecord>& records, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& r : records)
    for (const auto& ref : r.references)
      for (const auto& tok : ref) {
        ++counts[tok];
        ++total;
      }
  if (total == 0) throw InputError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts)
    if (n >= min_count && std::find(kReservedTokens.begin(), kReservedTokens.end(), tok) == kReservedTokens.end())
      kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [tok, n] : kept) words.push_back(tok);
  return Vocabulary(words);
}

std::vector<std::int32_t> encode_ids(const TokenList& tokens, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("encode_ids: max_len must be at least 2");
  std::vector<std::int32_t> ids(max_len, Vocabulary::kPad);
  ids[0] = Vocabulary::kBos;
  const std::size_t words = std::min(tokens.size(), max_len - 2);
  for (std::size_t i = 0; i < words; ++i) ids[i + 1] = vocab.id(tokens[i]);
  ids[words + 1] = Vocabulary::kEos;
  return ids;
}

TokenList decode_tokens(const std::vector<std::int32_t>& ids, const Vocabulary& vocab) {
  TokenList out;
  for (std::int32_t id : ids) {
    if (id == Vocabulary::kEos) break;
    if (Vocabulary::is_special(id)) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

std::string join_tokens(const TokenList& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::string decode_ids(const std::vector<std::int32_t>& ids, const Vocabulary& vocab) {
  return join_tokens(decode_tokens(ids, vocab));
}

// ---- feature container ----------------------------------------------------

namespace {

constexpr char kFeatureMagic[8] = {'M', '2', 'F', 'E', 'A', 'T', '0', '1'};

template <typename U>
void write_le(std::ostream& out, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = char((v >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(U));
}

template <typename U>
bool read_le(std::istream& in, U& v) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) return false;
  v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(bytes[i]) << (8 * i);
  return true;
}

}  // namespace

PaddedFeatures pad_regions(const FeatureRecord& record, std::size_t max_regions) {
  const std::size_t n = std::min(record.regions(), max_regions);
  const std::size_t d = record.features.cols();
  PaddedFeatures out{Tensor<float>::matrix(max_regions, d), std::vector<std::uint8_t>(max_regions, 0)};
  std::copy_n(record.features.data().begin(), n * d, out.features.data().begin());
  std::fill_n(out.valid.begin(), n, 1);
  return out;
}

FeatureReader::FeatureReader(const std::string& path, std::size_t max_regions, WarningSink warn)
    : path_(path), in_(path, std::ios::binary), max_regions_(max_regions), warn_(std::move(warn)) {
  if (!in_) throw FormatError("features: cannot open " + path);
  char magic[8];
  if (!in_.read(magic, 8) || !std::equal(magic, magic + 8, kFeatureMagic))
    throw FormatError("features: " + path + " is not a feature container (bad magic)");
  std::uint32_t d = 0;
  if (!read_le(in_, d) || d == 0) throw FormatError("features: " + path + " has no valid feature width");
  d_feat_ = d;
}

bool FeatureReader::next(FeatureRecord& out) {
  std::uint64_t id = 0;
  if (!read_le(in_, id)) {
    if (in_.eof() && in_.gcount() == 0) return false;
    throw FormatError("features: truncated record header in " + path_);
  }
  std::uint32_t n = 0;
  if (!read_le(in_, n)) throw FormatError("features: truncated record header for image " + std::to_string(id));
  if (n == 0) throw FormatError("features: image " + std::to_string(id) + " has no regions");
  std::vector<std::uint32_t> raw(std::size_t(n) * d_feat_);
  for (auto& w : raw)
    if (!read_le(in_, w)) throw FormatError("features: truncated data for image " + std::to_string(id));
  const std::size_t keep = std::min<std::size_t>(n, max_regions_);
  if (keep < n && warn_)
    warn_("features: image " + std::to_string(id) + " has " + std::to_string(n) + " regions, truncated to " +
          std::to_string(keep));
  Tensor<float> t = Tensor<float>::matrix(keep, d_feat_);
  for (std::size_t i = 0; i < keep * d_feat_; ++i) {
    t[i] = std::bit_cast<float>(raw[i]);
    if (!std::isfinite(t[i]))
      throw FormatError("features: non-finite value in image " + std::to_string(id) + " region " +
                        std::to_string(i / d_feat_));
  }
  out.image_id = id;
  out.features = std::move(t);
  return true;
}

std::vector<FeatureRecord> load_features(const std::string& path, std::size_t expected_d_feat, std::size_t max_regions,
                                         WarningSink warn) {
  FeatureReader reader(path, max_regions, std::move(warn));
  if (expected_d_feat != 0 && reader.d_feat() != expected_d_feat)
    throw ConfigError("features: " + path + " has width " + std::to_string(reader.d_feat()) + ", config expects " +
                      std::to_string(expected_d_feat));
  std::vector<FeatureRecord> out;
  FeatureRecord r;
  while (reader.next(r)) out.push_back(std::move(r));
  return out;
}

void write_features(const std::string& path, std::size_t d_feat, const std::vector<FeatureRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("features: cannot write " + path);
  out.write(kFeatureMagic, 8);
  write_le(out, std::uint32_t(d_feat));
  for (const auto& r : records) {
    if (r.features.cols() != d_feat || r.regions() == 0)
      throw ShapeError("features: image " + std::to_string(r.image_id) + " has shape " +
                       shape_str(r.features.shape()));
    write_le(out, r.image_id);
    write_le(out, std::uint32_t(r.regions()));
    for (float v : r.features.data()) write_le(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw FormatError("features: write failed for " + path);
}

// ---- captions and manifest --------------------------------------------------

std::vector<CaptionRecord> load_captions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("captions: cannot open " + path);
  std::vector<CaptionRecord> out;
  std::map<std::uint64_t, std::size_t> where;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("captions: " + path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("image_id") || !j.contains("caption") || !j["image_id"].is_number_unsigned() ||
        !j["caption"].is_string())
      throw FormatError("captions: " + path + ":" + std::to_string(line_no) +
                        ": expected {\"image_id\": <non-negative int>, \"caption\": <string>}");
    const auto id = j["image_id"].get<std::uint64_t>();
    auto [it, fresh] = where.emplace(id, out.size());
    if (fresh) out.push_back(CaptionRecord{id, {}});
    out[it->second].references.push_back(tokenize(j["caption"].get<std::string>()));
  }
  return out;
}

void write_captions(const std::string& path, const std::vector<CaptionRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("captions: cannot write " + path);
  for (const auto& r : records)
    for (const auto& ref : r.references) out << json{{"image_id", r.image_id}, {"caption", join_tokens(ref)}}.dump() << '\n';
}

std::map<std::string, SplitFiles> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("manifest: cannot open " + path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
  std::map<std::string, SplitFiles> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string split, features, captions, extra;
    if (!(ls >> split)) continue;
    if (!(ls >> features >> captions) || (ls >> extra))
      throw FormatError("manifest: " + path + ":" + std::to_string(line_no) + ": expected '<split> <features> <captions>'");
    out[split] = SplitFiles{resolve(features), resolve(captions)};
  }
  return out;
}

void write_manifest(const std::string& path, const std::map<std::string, SplitFiles>& splits) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("manifest: cannot write " + path);
  out << "# split features captions\n";
  for (const auto& [name, files] : splits) out << name << ' ' << files.features << ' ' << files.captions << '\n';
}

Tensor<float> load_glove(const std::string& path, const Vocabulary& vocab, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw FormatError("glove: cannot open " + path);
  Tensor<float> table = Tensor<float>::matrix(vocab.size(), dim);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    std::istringstream ls(line);
    std::string token;
    if (!(ls >> token)) continue;
    std::vector<float> values;
    for (float v; ls >> v;) values.push_back(v);
    if (!ls.eof()) throw FormatError("glove: " + path + ":" + std::to_string(line_no) + ": non-numeric value");
    if (values.size() != dim)
      throw FormatError("glove: " + path + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                        " values, found " + std::to_string(values.size()));
    if (!vocab.contains(token)) continue;
    const std::int32_t id = vocab.id(token);
    if (Vocabulary::is_special(id)) continue;
    std::copy(values.begin(), values.end(), table.row(std::size_t(id)).begin());
  }
  return table;
}

std::vector<Example> join_examples(const std::vector<FeatureRecord>& features,
                                   const std::vector<CaptionRecord>& captions) {
  std::map<std::uint64_t, const CaptionRecord*> by_id;
  for (const auto& c : captions) by_id[c.image_id] = &c;
  std::vector<Example> out;
  out.reserve(features.size());
  for (const auto& f : features) {
    auto it = by_id.find(f.image_id);
    if (it == by_id.end() || it->second->references.empty())
      throw InputError("dataset: image " + std::to_string(f.image_id) + " has no reference caption");
    out.push_back(Example{f.image_id, f.features, it->second->references});
  }
  return out;
}

// ---- synthetic scenes -------------------------------------------------------

namespace {

const std::vector<std::string> kColors{"red", "green", "blue", "yellow", "black", "white"};
const std::vector<std::string> kShapes{"circle", "square", "triangle", "star", "heart"};

constexpr std::size_t kColorOffset = 0;
constexpr std::size_t kShapeOffset = 6;
constexpr std::size_t kX = 11, kY = 12, kSize = 13, kObjectness = 14;
constexpr std::size_t kMinSyntheticWidth = 15;

struct SceneObject {
  std::size_t color, shape;
  double x, y, size;
};

std::string phrase(const SceneObject& o) { return kColors[o.color] + " " + kShapes[o.shape]; }

// Reference number `variant` for objects already sorted left to right.
std::string describe(const std::vector<SceneObject>& objs, std::size_t variant) {
  const std::size_t v = variant % 5;
  if (objs.size() == 1) {
    const std::string p = phrase(objs[0]);
    const std::string forms[5] = {"a " + p, "there is a " + p, "a single " + p, "one " + p + " in the picture",
                                  "a picture of a " + p};
    return forms[v];
  }
  if (objs.size() == 2) {
    const std::string a = phrase(objs[0]), b = phrase(objs[1]);
    const std::string forms[5] = {"a " + a + " to the left of a " + b, "a " + a + " and a " + b,
                                  "a " + b + " to the right of a " + a, "there is a " + a + " next to a " + b,
                                  "a picture of a " + a + " and a " + b};
    return forms[v];
  }
  std::string list;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (i + 1 == objs.size()) list += " and";
    list += " a " + phrase(objs[i]);
  }
  list.erase(0, 1);
  const std::string forms[5] = {list, "there are " + list, "from left to right " + list,
                                "a scene with " + list, "a picture of " + list};
  return forms[v];
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& config) {
  if (config.d_feat < kMinSyntheticWidth)
    throw ConfigError("synthetic.d_feat: must be at least " + std::to_string(kMinSyntheticWidth));
  if (config.max_objects < 1) throw ConfigError("synthetic.max_objects: must be at least 1");
  if (config.captions_per_scene < 1) throw ConfigError("synthetic.captions_per_scene: must be at least 1");
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, config.noise);
  SyntheticDataset out;
  for (std::size_t s = 0; s < config.scenes; ++s) {
    const std::uint64_t id = config.first_image_id + s;
    const std::size_t n_obj = 1 + std::size_t(unit(rng) * double(config.max_objects)) % config.max_objects;
    std::vector<SceneObject> objs;
    while (objs.size() < n_obj) {
      SceneObject o{std::size_t(unit(rng) * kColors.size()) % kColors.size(),
                    std::size_t(unit(rng) * kShapes.size()) % kShapes.size(), unit(rng), unit(rng),
                    0.2 + 0.8 * unit(rng)};
      const bool crowded = std::any_of(objs.begin(), objs.end(), [&](const auto& p) { return std::abs(p.x - o.x) < 0.08; });
      if (!crowded) objs.push_back(o);
    }
    std::sort(objs.begin(), objs.end(), [](const auto& a, const auto& b) { return a.x < b.x; });

    const std::size_t n_regions = objs.size() + config.distractors;
    Tensor<float> feats = Tensor<float>::matrix(n_regions, config.d_feat);
    for (std::size_t r = 0; r < n_regions; ++r) {
      auto row = feats.row(r);
      // structured channels get a tenth of the noise so left-to-right order stays recoverable
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = float(noise(rng) * (c < kMinSyntheticWidth ? 0.1 : 1.0));
      if (r < objs.size()) {
        const SceneObject& o = objs[r];
        row[kColorOffset + o.color] += 1.0f;
        row[kShapeOffset + o.shape] += 1.0f;
        row[kX] += float(o.x);
        row[kY] += float(o.y);
        row[kSize] += float(o.size);
        row[kObjectness] += 1.0f;
      } else {
        row[kX] += float(unit(rng));
        row[kY] += float(unit(rng));
        row[kSize] += float(0.1 * unit(rng));
      }
    }
    // region order carries no information
    std::vector<std::size_t> perm(n_regions);
    for (std::size_t i = 0; i < n_regions; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<float> shuffled = Tensor<float>::matrix(n_regions, config.d_feat);
    for (std::size_t r = 0; r < n_regions; ++r)
      std::copy(feats.row(perm[r]).begin(), feats.row(perm[r]).end(), shuffled.row(r).begin());

    CaptionRecord caps{id, {}};
    for (std::size_t c = 0; c < config.captions_per_scene; ++c) caps.references.push_back(tokenize(describe(objs, c)));
    out.features.push_back(FeatureRecord{id, std::move(shuffled)});
    out.captions.push_back(std::move(caps));
  }
  return out;
}

void write_synthetic_dataset(const std::string& dir, const SyntheticConfig& config, double val_fraction,
                             double test_fraction, std::size_t min_count) {
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1)
    throw ConfigError("synthetic: split fractions must be non-negative and sum below 1");
  const SyntheticDataset data = generate_synthetic(config);
  const std::size_t n = data.features.size();
  const std::size_t n_test = std::size_t(std::round(double(n) * test_fraction));
  const std::size_t n_val = std::size_t(std::round(double(n) * val_fraction));
  const std::size_t n_train = n - n_val - n_test;
  if (n_train == 0) throw ConfigError("synthetic: no scenes left for the training split");
  fs::create_directories(dir);
  std::map<std::string, SplitFiles> manifest;
  auto emit = [&](const std::string& split, std::size_t begin, std::size_t end) {
    if (begin == end) return;
    std::vector<FeatureRecord> f(data.features.begin() + long(begin), data.features.begin() + long(end));
    std::vector<CaptionRecord> c(data.captions.begin() + long(begin), data.captions.begin() + long(end));
    write_features((fs::path(dir) / (split + ".feat")).string(), config.d_feat, f);
    write_captions((fs::path(dir) / (split + ".jsonl")).string(), c);
    manifest[split] = SplitFiles{split + ".feat", split + ".jsonl"};
  };
  emit("train", 0, n_train);
  emit("val", n_train, n_train + n_val);
  emit("test", n_train + n_val, n);
  write_manifest((fs::path(dir) / "manifest.txt").string(), manifest);
  std::vector<CaptionRecord> train_caps(data.captions.begin(), data.captions.begin() + long(n_train));
  build_vocab(train_caps, min_count).save((fs::path(dir) / "vocab.txt").string());
}

}  // namespace m2
