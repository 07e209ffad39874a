#include <doctest.h>

#include <filesystem>
#include <set>

#include <json.hpp>

#include "m2/app.hpp"
#include "m2/errors.hpp"

using namespace m2;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::string& text) {
  try {
    run_config_from_json(text).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("run config JSON round trip keeps every field") {
  RunConfig c;
  c.model.d_model = 32;
  c.model.heads = 2;
  c.model.connectivity = Connectivity::MeshedSoftmax;
  c.model.attention = AttentionKind::AoA;
  c.train.batch_size = 7;
  c.train.rl_lr = 1e-5;
  c.data.manifest = "x/manifest.txt";
  c.data.min_count = 2;
  c.out = "somewhere";
  c.seed = 42;
  const std::string text = run_config_to_json(c);
  const RunConfig back = run_config_from_json(text);
  CHECK(run_config_to_json(back) == text);
  CHECK(back.model_config().seed == 42);
  CHECK(back.train_config().seed == 42);
  CHECK(back.model.connectivity == Connectivity::MeshedSoftmax);
  CHECK(back.train.batch_size == 7);
}

TEST_CASE("file values override defaults and keep unspecified fields") {
  RunConfig defaults;
  defaults.train.xe_steps = 123;
  const RunConfig c = run_config_from_json(R"({"model": {"n_memory": 0}, "seed": 5})", defaults);
  CHECK(c.model.n_memory == 0);
  CHECK(c.seed == 5);
  CHECK(c.train.xe_steps == 123);
  CHECK(c.model.d_model == defaults.model.d_model);
}

TEST_CASE("invalid configs name the offending field") {
  CHECK(error_of(R"({"model": {"heads": 5}})").find("model.heads") != std::string::npos);
  CHECK(error_of(R"({"model": {"colour": 1}})").find("model.colour") != std::string::npos);
  CHECK(error_of(R"({"model": {"connectivity": "mesh"}})").find("model.connectivity") != std::string::npos);
  CHECK(error_of(R"({"train": {"batch_size": 0}})").find("train.batch_size") != std::string::npos);
  CHECK(error_of(R"({"train": {"seed": 3}})").find("train.seed") != std::string::npos);
  CHECK(error_of(R"({"data": {"min_count": 0}})").find("data.min_count") != std::string::npos);
  CHECK(error_of(R"({"wat": 1})").find("wat") != std::string::npos);
  CHECK(error_of(R"({"seed": -1})").find("seed") != std::string::npos);
  CHECK(error_of("{not json").find("config") != std::string::npos);
  CHECK(error_of(R"({"model": {"embedding": "external"}})").find("data.glove") != std::string::npos);
}

TEST_CASE("variant flags map onto the model axes") {
  ModelConfig m;
  apply_variant(m, {std::string("transformer"), std::size_t(0), std::nullopt});
  CHECK(m.connectivity == Connectivity::LastLayer);
  CHECK(m.n_memory == 0);
  apply_variant(m, {std::string("meshed"), std::size_t(8), std::string("softmax")});
  CHECK(m.connectivity == Connectivity::MeshedSoftmax);
  CHECK(m.n_memory == 8);
  apply_variant(m, {std::string("aoa"), std::nullopt, std::nullopt});
  CHECK(m.attention == AttentionKind::AoA);
  CHECK_THROWS_AS(apply_variant(m, {std::string("lstm"), std::nullopt, std::nullopt}), ConfigError);
  CHECK_THROWS_AS(apply_variant(m, {std::nullopt, std::nullopt, std::string("softmax")}), ConfigError);
}

TEST_CASE("ablation matrix has eight distinct rows over the variant axes") {
  const auto rows = ablation_variants(8);
  REQUIRE(rows.size() == 8);
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.name);
  CHECK(names.size() == 8);
  CHECK(rows[0].layers == 6);
  CHECK(rows[kBaseRow].connectivity == Connectivity::LastLayer);
  CHECK(rows[kBaseRow].memory == 0);
  CHECK(rows[2].attention == AttentionKind::AoA);
  CHECK(rows[3].memory == 0);
  CHECK(rows[4].memory == 8);
  CHECK(rows[5].connectivity == Connectivity::MeshedSigmoid);
  CHECK(rows[5].memory == 0);
  CHECK(rows[6].connectivity == Connectivity::MeshedSoftmax);
  CHECK(rows[kFullRow].connectivity == Connectivity::MeshedSigmoid);
  CHECK(rows[kFullRow].memory == 8);
  const RunConfig d = ablation_defaults();
  CHECK(d.model.d_model == 64);
  CHECK(d.model.heads == 4);
  CHECK(d.model.n_enc == 3);
  CHECK(d.model.n_memory == 8);
  CHECK(ablation_dataset(1).scenes == 500);
}

TEST_CASE("run checkpoints carry the config and vocabulary and re-serialize identically") {
  const fs::path dir = fs::temp_directory_path() / "m2_test_app";
  fs::remove_all(dir);
  RunConfig c;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.d_ff = 32;
  c.out = dir.string();
  LoadedData data;
  data.vocab = Vocabulary({"red", "circle", "a"});
  data.d_feat = 8;
  const M2Model<float> model = build_model(c, data);
  const std::string path = (dir / "m.ckpt").string();
  save_run_checkpoint(path, model, c, data.vocab, "xe", nullptr);
  const RunCheckpoint back = load_run_checkpoint(path);
  CHECK(back.vocab.serialize() == data.vocab.serialize());
  CHECK(serialize_params(back.model.params) == serialize_params(model.params));
  const auto manifest = nlohmann::json::parse(back.manifest);
  CHECK(manifest["run"]["config"] == nlohmann::json::parse(run_config_to_json(c)));
  CHECK(manifest["run"]["stage"] == "xe");
  const std::string again = (dir / "again.ckpt").string();
  save_run_checkpoint(again, back.model, c, back.vocab, "xe", nullptr);
  CHECK(serialize_params(load_run_checkpoint(again).model.params) == serialize_params(model.params));
  fs::remove_all(dir);
}
