#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "kif/pipeline.hpp"

using namespace kif;
namespace fs = std::filesystem;

namespace {

std::string fresh_workdir(const std::string& tag) {
  std::string dir = "/tmp/kif_pipe_" + tag;
  fs::remove_all(dir);
  return dir;
}

RunConfig tiny_config(const std::string& workdir) {
  RunConfig cfg = config_from_json_text("{}", {});
  cfg.workdir = workdir;
  cfg.model.n_layers = 1;
  cfg.model.d_model = 16;
  cfg.model.n_heads = 2;
  cfg.model.d_mlp = 32;
  cfg.model.max_seq_len = 24;
  cfg.corpus.n_subjects = 3;
  cfg.corpus.n_predicates = 2;
  cfg.train.steps = 5;
  cfg.heal.steps = 2;
  cfg.heal.fisher_pool = 2;
  cfg.eval.max_new = 8;
  return cfg;
}

}  // namespace

TEST_CASE("empty config text yields the documented defaults") {
  RunConfig cfg = config_from_json_text("{}", {});
  CHECK(cfg.corpus.n_subjects == 8);
  CHECK(cfg.train.steps == 1500);
  CHECK(cfg.heal.weights.lambda_ewc == doctest::Approx(5.0));
  CHECK(cfg.capsule.top_k == 3);
  CHECK(cfg.eval.epsilon == doctest::Approx(5.0));
}

TEST_CASE("every unknown key is reported in a single error") {
  std::string text = R"({"trian": {"steps": 5}, "model": {"d_modle": 8}, "workers": 1})";
  try {
    config_from_json_text(text, {});
    FAIL("expected error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("trian") != std::string::npos);
    CHECK(msg.find("d_modle") != std::string::npos);
  }
}

TEST_CASE("dotted overrides reach nested fields and bad keys are rejected") {
  RunConfig cfg = config_from_json_text(
      "{}", {"train.steps=7", "model.d_model=32", "probe.standardize_mode=interpolate",
             "heal.lambda_kl=0.5", "workdir=/tmp/kif_ovr"});
  CHECK(cfg.train.steps == 7);
  CHECK(cfg.model.d_model == 32);
  CHECK(cfg.probe.standardize_mode == StandardizeMode::Interpolate);
  CHECK(cfg.heal.weights.lambda_kl == doctest::Approx(0.5));
  CHECK(cfg.workdir == "/tmp/kif_ovr");

  CHECK_THROWS_AS(config_from_json_text("{}", {"nope.x=1"}), Error);
  CHECK_THROWS_AS(config_from_json_text("{}", {"train.steps"}), Error);
}

TEST_CASE("resolved config round trips through its own serialization") {
  RunConfig cfg = config_from_json_text("{}", {"train.steps=9", "mine.effect_threshold=0.5"});
  RunConfig again = config_from_json_text(cfg.resolved_json(), {});
  CHECK(again.train.steps == 9);
  CHECK(again.mine.effect_threshold == doctest::Approx(0.5));
  CHECK(again.resolved_json() == cfg.resolved_json());
}

TEST_CASE("stage names are validated") {
  RunConfig cfg = tiny_config(fresh_workdir("badstage"));
  CHECK_THROWS_AS(run_stage("mangle", cfg, false), Error);
}

TEST_CASE("synthesis stage writes its artifacts and re-runs are no-ops") {
  RunConfig cfg = tiny_config(fresh_workdir("synth"));
  run_stage("synth", cfg, false);
  std::string triples = cfg.workdir + "/triples.jsonl";
  std::string prompts = cfg.workdir + "/prompts.jsonl";
  REQUIRE(file_exists(triples));
  REQUIRE(file_exists(prompts));
  std::string t1 = read_file(triples), p1 = read_file(prompts);
  run_stage("synth", cfg, false);
  CHECK(read_file(triples) == t1);
  CHECK(read_file(prompts) == p1);
}

TEST_CASE("changing an upstream setting invalidates the stamp") {
  RunConfig cfg = tiny_config(fresh_workdir("stamp"));
  run_stage("synth", cfg, false);
  std::string before = read_file(cfg.workdir + "/triples.jsonl");
  cfg.corpus.seed = 999;
  run_stage("synth", cfg, false);
  CHECK(read_file(cfg.workdir + "/triples.jsonl") != before);
}

TEST_CASE("stages demand their upstream artifacts by producing stage name") {
  RunConfig cfg = tiny_config(fresh_workdir("missing"));
  try {
    run_stage("train", cfg, false);
    FAIL("expected error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("run stage") != std::string::npos);
    CHECK(msg.find("synth") != std::string::npos);
  }
  run_stage("synth", cfg, false);
  try {
    run_stage("probe", cfg, false);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("train") != std::string::npos);
  }
  try {
    run_stage("mine", cfg, false);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("probe") != std::string::npos);
  }
}

TEST_CASE("stage order covers the full pipeline") {
  REQUIRE(kStageOrder.size() == 7);
  CHECK(kStageOrder.front() == "synth");
  CHECK(kStageOrder.back() == "eval");
}

TEST_CASE("the first three stages chain end to end on a tiny model") {
  RunConfig cfg = tiny_config(fresh_workdir("chain"));
  run_stage("synth", cfg, false);
  run_stage("train", cfg, false);
  run_stage("probe", cfg, false);
  CHECK(file_exists(cfg.workdir + "/model.bin"));
  CHECK(file_exists(cfg.workdir + "/activations.bin"));
  CHECK(file_exists(cfg.workdir + "/config.resolved.json"));
  // training stamp: a re-run leaves the checkpoint untouched
  std::string m1 = read_file(cfg.workdir + "/model.bin");
  run_stage("train", cfg, false);
  CHECK(read_file(cfg.workdir + "/model.bin") == m1);
}
