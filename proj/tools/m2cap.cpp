// m2cap: command-line driver for training, evaluation, decoding, ablation
// and attribution.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "m2/app.hpp"
#include "m2/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace m2;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> beam;
  std::optional<std::string> manifest;
  VariantFlags variant;
};

void add_run_flags(CLI::App* cmd, Flags& f, bool variant_flags) {
  cmd->add_option("--config", f.config, "JSON run config");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--workers", f.workers, "worker threads");
  cmd->add_option("--beam", f.beam, "beam size");
  cmd->add_option("--data", f.manifest, "split manifest");
  if (variant_flags) {
    cmd->add_option("--variant", f.variant.variant, "transformer | aoa | one-to-one | meshed");
    cmd->add_option("--memory", f.variant.memory, "memory slots per attention layer");
    cmd->add_option("--gating", f.variant.gating, "meshed gate normalization: sigmoid | softmax");
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// defaults < --config file < flags
RunConfig resolve(const Flags& f, const RunConfig& defaults, bool rl_stage = false) {
  RunConfig c = f.config.empty() ? defaults : run_config_from_json(read_file(f.config), defaults);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.workers) c.train.workers = *f.workers;
  if (f.beam) c.train.beam = *f.beam;
  if (f.manifest) c.data.manifest = *f.manifest;
  apply_variant(c.model, f.variant);
  c.validate(rl_stage);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

struct Models {
  std::vector<RunCheckpoint> checkpoints;
  std::vector<const M2Model<float>*> pointers;
  const Vocabulary& vocab() const { return checkpoints.front().vocab; }
};

Models load_models(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("checkpoint: give --checkpoint or --ensemble");
  Models m;
  for (const auto& p : paths) m.checkpoints.push_back(load_run_checkpoint(p));
  for (const auto& ck : m.checkpoints) {
    if (ck.vocab.serialize() != m.vocab().serialize())
      throw ConfigError("ensemble: checkpoints use different vocabularies");
    m.pointers.push_back(&ck.model);
  }
  return m;
}

// Data for a checkpoint-driven command: the resolved manifest, else the one
// recorded in the first checkpoint.
LoadedData data_for(RunConfig& rc, const Models& models) {
  if (rc.data.manifest.empty()) {
    const json manifest = json::parse(models.checkpoints.front().manifest);
    rc.data.manifest = manifest["run"]["config"]["data"]["manifest"].get<std::string>();
  }
  LoadedData data = load_data(rc.data, warn);
  data.vocab = models.vocab();
  return data;
}

std::vector<std::uint8_t> valid_rows(const TrainingImage& im) {
  return std::vector<std::uint8_t>(im.features.rows(), 1);
}

// ---- commands -------------------------------------------------------------------

int cmd_gen_synthetic(const std::string& out, std::uint64_t seed, std::size_t scenes, std::size_t d_feat) {
  SyntheticConfig sc;
  sc.scenes = scenes;
  sc.d_feat = d_feat;
  sc.seed = seed;
  write_synthetic_dataset(out, sc);
  std::cout << "wrote " << scenes << " scenes to " << (fs::path(out) / "manifest.txt").string() << "\n";
  return 0;
}

int cmd_train_xe(const Flags& f, const std::string& init) {
  RunConfig rc = resolve(f, RunConfig{});
  LoadedData data = load_data(rc.data, warn);
  M2Model<float> model = build_model(rc, data);
  if (!init.empty()) {
    RunCheckpoint ck = load_run_checkpoint(init);
    if (ck.vocab.serialize() != data.vocab.serialize()) throw ConfigError("init: vocabulary differs from the data");
    model = std::move(ck.model);
    rc.model = model.config;
  }
  const fs::path out(rc.out);
  fs::create_directories(out);
  write_text(out / "run_config.json", run_config_to_json(rc) + "\n");
  std::ofstream log_file(out / "train_log.jsonl");
  TrainLog log(&log_file);
  StageResult result = train_xe(model, data.train, data.val.empty() ? nullptr : &data.val, data.vocab,
                                rc.train_config(), log);
  const fs::path ckpt = out / "xe.ckpt";
  save_run_checkpoint(ckpt.string(), result.best, rc, data.vocab, "xe", &result);
  std::printf("xe: final loss %.6f", result.final_loss);
  if (result.best_val_cider >= 0) std::printf(", best val CIDEr-D %.4f at step %zu", result.best_val_cider, result.best_step);
  std::printf("\ncheckpoint %s\n", ckpt.string().c_str());
  return 0;
}

int cmd_train_scst(const Flags& f, std::string init) {
  RunConfig rc = resolve(f, RunConfig{}, true);
  if (init.empty()) init = (fs::path(rc.out) / "xe.ckpt").string();
  RunCheckpoint ck = load_run_checkpoint(init);
  rc.model = ck.model.config;
  LoadedData data = load_data(rc.data, warn);
  if (ck.vocab.serialize() != data.vocab.serialize()) throw ConfigError("init: vocabulary differs from the data");
  const fs::path out(rc.out);
  fs::create_directories(out);
  write_text(out / "run_config_scst.json", run_config_to_json(rc) + "\n");
  std::ofstream log_file(out / "train_log_scst.jsonl");
  TrainLog log(&log_file);
  StageResult result = train_scst(ck.model, data.train, data.val.empty() ? nullptr : &data.val, data.vocab,
                                  data.train_idf, rc.train_config(), log);
  const fs::path ckpt = out / "scst.ckpt";
  save_run_checkpoint(ckpt.string(), result.best, rc, data.vocab, "scst", &result);
  std::printf("scst: final mean reward %.6f", result.final_loss);
  if (result.best_val_cider >= 0) std::printf(", best val CIDEr-D %.4f at step %zu", result.best_val_cider, result.best_step);
  std::printf("\ncheckpoint %s\n", ckpt.string().c_str());
  return 0;
}

std::vector<std::string> checkpoint_list(const std::string& single, const std::vector<std::string>& ensemble) {
  std::vector<std::string> paths;
  if (!single.empty()) paths.push_back(single);
  paths.insert(paths.end(), ensemble.begin(), ensemble.end());
  return paths;
}

int cmd_eval_files(const Flags& f, const std::string& candidates, const std::string& references) {
  if (references.empty()) throw ConfigError("references: required with --candidates");
  const auto cand = load_captions(candidates);
  const auto refs = load_captions(references);
  std::map<std::uint64_t, const CaptionRecord*> by_id;
  for (const auto& r : refs) by_id[r.image_id] = &r;
  std::vector<TokenList> c;
  std::vector<std::vector<TokenList>> r;
  for (const auto& rec : cand) {
    auto it = by_id.find(rec.image_id);
    if (it == by_id.end()) throw InputError("candidates: image " + std::to_string(rec.image_id) + " has no references");
    if (rec.references.size() != 1)
      throw InputError("candidates: image " + std::to_string(rec.image_id) + " has " +
                       std::to_string(rec.references.size()) + " captions, expected one");
    c.push_back(rec.references.front());
    r.push_back(it->second->references);
  }
  const EvalReport report = evaluate(c, r, nullptr, f.workers.value_or(1));
  const std::string text = json::parse(report.to_json()).dump(2);
  if (f.out) write_text(fs::path(*f.out) / "eval.json", text + "\n");
  std::cout << text << "\n";
  return 0;
}

int cmd_eval(const Flags& f, const std::vector<std::string>& paths, const std::string& split) {
  RunConfig rc = resolve(f, RunConfig{});
  Models models = load_models(paths);
  LoadedData data = data_for(rc, models);
  const auto decoded = decode_and_evaluate(models.pointers, split_of(data, split), data.vocab, rc.train.beam,
                                           rc.train.max_len, rc.train.workers);
  const std::string text = json::parse(decoded.report.to_json()).dump(2);
  write_text(fs::path(rc.out) / "eval.json", text + "\n");
  std::printf("%s: BLEU-1 %.4f BLEU-4 %.4f ROUGE-L %.4f CIDEr-D %.4f (%zu images)\n", split.c_str(),
              decoded.report.bleu[0], decoded.report.bleu[3], decoded.report.rouge_l, decoded.report.cider_d,
              decoded.image_ids.size());
  return 0;
}

std::vector<std::int32_t> parse_constraints(const std::string& text, const Vocabulary& vocab) {
  std::vector<std::int32_t> ids;
  std::stringstream ss(text);
  std::string word;
  while (std::getline(ss, word, ',')) {
    const TokenList toks = tokenize(word);
    for (const auto& t : toks) {
      if (!vocab.contains(t)) throw ConfigError("constraints: '" + t + "' is not in the vocabulary");
      ids.push_back(vocab.id(t));
    }
  }
  return ids;
}

int cmd_decode(const Flags& f, const std::vector<std::string>& paths, const std::string& split,
               const std::string& constraints, std::size_t limit) {
  RunConfig rc = resolve(f, RunConfig{});
  Models models = load_models(paths);
  LoadedData data = data_for(rc, models);
  const auto& images = split_of(data, split);
  const auto wanted = parse_constraints(constraints, data.vocab);
  const fs::path out_path = fs::path(rc.out) / "captions.jsonl";
  fs::create_directories(rc.out);
  std::ofstream out(out_path);
  const std::size_t n = limit ? std::min(limit, images.size()) : images.size();
  std::size_t satisfied = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ranked = beam_search_cached<float>(models.pointers, images[i].features, valid_rows(images[i]),
                                                  {rc.train.beam, rc.train.max_len, 0});
    const ConstrainedResult pick = constraint_filter(ranked, wanted);
    satisfied += pick.satisfied;
    json line{{"image_id", images[i].image_id},
              {"caption", decode_ids(pick.hypothesis.ids, data.vocab)},
              {"log_prob", pick.hypothesis.log_prob},
              {"rank", pick.rank},
              {"satisfied", pick.satisfied}};
    out << line.dump() << "\n";
  }
  std::printf("decoded %zu images of %s, %zu satisfy the constraints\nwrote %s\n", n, split.c_str(), satisfied,
              out_path.string().c_str());
  return 0;
}

int cmd_attribute(const Flags& f, const std::string& path, const std::string& split, std::size_t images_n,
                  std::size_t ig_steps) {
  RunConfig rc = resolve(f, RunConfig{});
  Models models = load_models({path});
  LoadedData data = data_for(rc, models);
  const auto& images = split_of(data, split);
  const M2Model<double> model = models.checkpoints.front().model.cast<double>();
  const fs::path out_path = fs::path(rc.out) / "attributions.jsonl";
  fs::create_directories(rc.out);
  std::ofstream out(out_path);
  const std::size_t n = std::min(images_n, images.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& im = images[i];
    const Hypothesis best =
        beam_search_cached<float>(models.pointers, im.features, valid_rows(im), {rc.train.beam, rc.train.max_len, 0})
            .front();
    std::vector<std::int32_t> words;
    for (auto id : best.ids)
      if (!Vocabulary::is_special(id)) words.push_back(id);
    if (words.empty()) {
      std::printf("image %llu: empty caption\n", static_cast<unsigned long long>(im.image_id));
      out << json{{"image_id", im.image_id}, {"caption", ""}, {"words", json::array()}}.dump() << "\n";
      continue;
    }
    const auto attr = attribute_regions(model, im.features.cast<double>(), words, ig_steps);
    json line{{"image_id", im.image_id}, {"caption", decode_ids(best.ids, data.vocab)}, {"words", json::array()}};
    std::printf("image %llu: %s\n", static_cast<unsigned long long>(im.image_id),
                decode_ids(best.ids, data.vocab).c_str());
    std::printf("  %-12s %6s", "word", "argmax");
    for (std::size_t r = 0; r < im.features.rows(); ++r) std::printf("  r%-4zu", r);
    std::printf("\n");
    for (const auto& a : attr) {
      line["words"].push_back({{"word", data.vocab.token(a.word)},
                               {"scores", a.scores},
                               {"stretched", a.stretched},
                               {"argmax_region", a.argmax_region}});
      std::printf("  %-12s %6zu", data.vocab.token(a.word).c_str(), a.argmax_region);
      for (double s : a.stretched) std::printf("  %.3f", s);
      std::printf("\n");
    }
    out << line.dump() << "\n";
  }
  std::printf("wrote %s\n", out_path.string().c_str());
  return 0;
}

std::vector<std::size_t> parse_rows(const std::string& text, std::size_t count) {
  std::vector<std::size_t> rows;
  if (text.empty()) {
    for (std::size_t i = 0; i < count; ++i) rows.push_back(i);
    return rows;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t r = 0;
    try {
      r = std::stoul(item);
    } catch (const std::exception&) {
      throw ConfigError("rows: '" + item + "' is not a row number");
    }
    if (r < 1 || r > count) throw ConfigError("rows: " + item + " is outside 1.." + std::to_string(count));
    rows.push_back(r - 1);
  }
  return rows;
}

int cmd_ablate(const Flags& f, const std::string& rows_text) {
  RunConfig rc = resolve(f, ablation_defaults());
  const auto rows = parse_rows(rows_text, ablation_variants(rc.model.n_memory).size());
  LoadedData data = ablation_data(rc);
  std::fprintf(stderr, "ablation seed %llu: %zu train / %zu test images, %zu words\n",
               static_cast<unsigned long long>(rc.seed), data.train.size(), data.test.size(), data.vocab.size());
  const auto result = run_ablation(rc, data, rows, [](const AblationRow& r) {
    std::fprintf(stderr, "  %-18s CIDEr-D %.4f  (%.0f s)\n", r.variant.name.c_str(), r.report.cider_d, r.seconds);
  });
  const std::string table = ablation_table(result);
  write_text(fs::path(rc.out) / "ablation.md", table);
  write_text(fs::path(rc.out) / "ablation.json", ablation_json(result, rc.seed) + "\n");
  write_text(fs::path(rc.out) / "run_config.json", run_config_to_json(rc) + "\n");
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meshed-memory transformer captioner"};
  app.require_subcommand(1);

  Flags f;
  std::string init, split = "test", candidates, references, constraints, rows, checkpoint;
  std::vector<std::string> ensemble;
  std::size_t scenes = 500, d_feat = 32, limit = 0, images_n = 5, ig_steps = kDefaultIgSteps;
  std::uint64_t gen_seed = 1;
  std::string gen_out = "data/synthetic";

  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic scene dataset");
  gen->add_option("--out", gen_out, "dataset directory");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--scenes", scenes, "number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--d-feat", d_feat, "region feature width")->check(CLI::Range(16, 1 << 16));

  auto* xe = app.add_subcommand("train-xe", "cross-entropy training");
  add_run_flags(xe, f, true);
  xe->add_option("--init", init, "checkpoint to continue from");

  auto* scst = app.add_subcommand("train-scst", "self-critical training from an XE checkpoint");
  add_run_flags(scst, f, false);
  scst->add_option("--init", init, "starting checkpoint (default <out>/xe.ckpt)");

  auto add_models = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint, "model checkpoint");
    cmd->add_option("--ensemble", ensemble, "checkpoints whose distributions are averaged");
    cmd->add_option("--split", split, "train | val | test");
  };

  auto* ev = app.add_subcommand("eval", "decode a split and score it, or score a caption file");
  add_run_flags(ev, f, false);
  add_models(ev);
  ev->add_option("--candidates", candidates, "captions jsonl to score instead of decoding");
  ev->add_option("--references", references, "reference captions jsonl for --candidates");

  auto* dec = app.add_subcommand("decode", "beam-decode a split to captions jsonl");
  add_run_flags(dec, f, false);
  add_models(dec);
  dec->add_option("--constraints", constraints, "comma-separated words the caption should contain");
  dec->add_option("--limit", limit, "decode only the first N images");

  auto* abl = app.add_subcommand("ablate", "train and score the eight ablation variants");
  add_run_flags(abl, f, false);
  abl->add_option("--memory", f.variant.memory, "memory slots of the memory rows");
  abl->add_option("--rows", rows, "comma-separated 1-based rows to run (default all)");

  auto* att = app.add_subcommand("attribute", "integrated-gradients region attribution of decoded words");
  add_run_flags(att, f, false);
  att->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  att->add_option("--split", split, "train | val | test");
  att->add_option("--images", images_n, "number of images")->check(CLI::PositiveNumber);
  att->add_option("--ig-steps", ig_steps, "integration steps")->check(CLI::Range(2, 1 << 20));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen_synthetic(gen_out, gen_seed, scenes, d_feat);
    if (*xe) return cmd_train_xe(f, init);
    if (*scst) return cmd_train_scst(f, init);
    if (*ev) {
      if (!candidates.empty()) return cmd_eval_files(f, candidates, references);
      return cmd_eval(f, checkpoint_list(checkpoint, ensemble), split);
    }
    if (*dec) return cmd_decode(f, checkpoint_list(checkpoint, ensemble), split, constraints, limit);
    if (*abl) return cmd_ablate(f, rows);
    if (*att) return cmd_attribute(f, checkpoint, split, images_n, ig_steps);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
