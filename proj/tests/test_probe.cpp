#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "kif/probe.hpp"

using namespace kif;

namespace {

std::vector<PromptInstance> fake_prompts(int n) {
  std::vector<PromptInstance> out;
  for (int i = 0; i < n; ++i) {
    PromptInstance p;
    p.triple_id = "t" + std::to_string(i);
    p.subject = i % 2 ? "odd" : "even";
    p.probe_type = ProbeType::Direct;
    p.template_index = i;
    p.text = "alpha beta";
    out.push_back(p);
  }
  return out;
}

ModelConfig probe_config() {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_mlp = 24;
  cfg.vocab_size = 8;
  cfg.max_seq_len = 8;
  cfg.seed = 13;
  return cfg;
}

Tokenizer probe_tok() { return Tokenizer::from_words({"alpha", "beta", "gamma", "delta"}); }

}  // namespace

TEST_CASE("pool_tokens is the column mean") {
  Mat act(2, 2);
  act << 1, 2, 3, 4;
  Vec pooled = pool_tokens(act);
  CHECK(pooled(0) == doctest::Approx(2.0));
  CHECK(pooled(1) == doctest::Approx(3.0));

  Mat single(1, 3);
  single << 5, 6, 7;
  CHECK((pool_tokens(single) - single.transpose()).norm() == 0.0);

  Mat constant = Mat::Constant(4, 3, 2.5);
  CHECK((pool_tokens(constant) - Vec::Constant(3, 2.5)).norm() == 0.0);
}

TEST_CASE("pool_tokens commutes with token permutation") {
  Mat act = Mat::Random(5, 4);
  Mat shuffled(5, 4);
  std::vector<int> order{3, 1, 4, 0, 2};
  for (int i = 0; i < 5; ++i) shuffled.row(i) = act.row(order[i]);
  CHECK((pool_tokens(act) - pool_tokens(shuffled)).norm() < 1e-12);
}

TEST_CASE("detect_target_dim mode with larger-wins tie break") {
  CHECK(detect_target_dim({64, 64, 64, 256}) == 64);
  CHECK(detect_target_dim({64, 256}) == 256);
  CHECK(detect_target_dim({128}) == 128);
  CHECK_THROWS_AS(detect_target_dim({}), Error);
}

TEST_CASE("standardize_dim modes") {
  Vec v4(4);
  v4 << 1, 2, 3, 4;
  Vec t = standardize_dim(v4, 2, StandardizeMode::Truncate);
  CHECK(t(0) == 1.0);
  CHECK(t(1) == 2.0);

  Vec v2(2);
  v2 << 1, 2;
  Vec z = standardize_dim(v2, 4, StandardizeMode::ZeroPad);
  CHECK(z(0) == 1.0);
  CHECK(z(1) == 2.0);
  CHECK(z(2) == 0.0);
  CHECK(z(3) == 0.0);

  Vec v02(2);
  v02 << 0, 2;
  Vec interp = standardize_dim(v02, 3, StandardizeMode::Interpolate);
  CHECK(interp(0) == doctest::Approx(0.0));
  CHECK(interp(1) == doctest::Approx(1.0));
  CHECK(interp(2) == doctest::Approx(2.0));

  CHECK_THROWS_AS(standardize_dim(v4, 0, StandardizeMode::Truncate), Error);
}

TEST_CASE("standardize_dim is identity at matching length for every mode") {
  Vec v(3);
  v << 0.25, -1.5, 2.0;  // exactly representable in float32
  for (auto mode :
       {StandardizeMode::Truncate, StandardizeMode::ZeroPad, StandardizeMode::Interpolate}) {
    CHECK((standardize_dim(v, 3, mode) - v).norm() == 0.0);
  }
}

TEST_CASE("probe corpus counts records and forward passes") {
  Model model(probe_config());
  Tokenizer tok = probe_tok();
  auto prompts = fake_prompts(10);
  std::vector<int> layers{0, 1, 2, 3};
  std::vector<Submodule> subs{Submodule::Gate, Submodule::Up, Submodule::Down};
  std::uint64_t before = model.forward_passes();
  ActivationCorpus corpus = probe_corpus(model, prompts, tok, layers, subs, 4);
  CHECK(corpus.records.size() == 10 * 4 * 3);
  CHECK(model.forward_passes() - before == 3);  // ceil(10/4)
  CHECK(corpus.warnings.empty());
  // gate/up raw dim 24, down raw dim 8; mode of {24,24,8} per prompt-layer is 24
  CHECK(corpus.d_target == 24);
  for (const auto& r : corpus.records) {
    CHECK(r.vector.size() == 24);
    if (r.submodule == Submodule::Down) CHECK(r.raw_dim == 8);
    else CHECK(r.raw_dim == 24);
  }
}

TEST_CASE("probing the same prompt twice gives identical vectors") {
  Model model(probe_config());
  Tokenizer tok = probe_tok();
  auto prompts = fake_prompts(1);
  std::vector<int> layers{0};
  std::vector<Submodule> subs{Submodule::Gate};
  ActivationCorpus a = probe_corpus(model, prompts, tok, layers, subs, 1);
  ActivationCorpus b = probe_corpus(model, prompts, tok, layers, subs, 1);
  CHECK((a.records[0].vector - b.records[0].vector).norm() == 0.0);
}

TEST_CASE("long prompts are truncated with a warning") {
  Model model(probe_config());
  Tokenizer tok = probe_tok();
  PromptInstance p;
  p.triple_id = "long";
  p.subject = "s";
  p.text = "alpha beta gamma delta alpha beta gamma delta alpha beta";
  ActivationCorpus corpus = probe_corpus(model, {p}, tok, {0}, {Submodule::Gate}, 1);
  CHECK(corpus.warnings.size() == 1);
  CHECK(corpus.records.size() == 1);
}

TEST_CASE("corpus file round trip and integrity") {
  Model model(probe_config());
  Tokenizer tok = probe_tok();
  ActivationCorpus corpus = probe_corpus(model, fake_prompts(4), tok, {0, 1},
                                         {Submodule::Gate, Submodule::Down}, 2);
  std::string path = "/tmp/kif_acts.bin";
  save_corpus(corpus, path);
  ActivationCorpus loaded = load_corpus(path);
  REQUIRE(loaded.records.size() == corpus.records.size());
  CHECK(loaded.d_target == corpus.d_target);
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    CHECK(loaded.records[i].prompt_id == corpus.records[i].prompt_id);
    CHECK(loaded.records[i].subject == corpus.records[i].subject);
    CHECK(loaded.records[i].layer == corpus.records[i].layer);
    CHECK((loaded.records[i].vector - corpus.records[i].vector).norm() == 0.0);
  }

  std::string corrupted = read_file(path);
  corrupted[corrupted.size() / 3] ^= 0x01;
  write_file(path, corrupted);
  CHECK_THROWS_AS(load_corpus(path), Error);

  export_corpus_jsonl(corpus, "/tmp/kif_acts.jsonl");
  CHECK(file_exists("/tmp/kif_acts.jsonl"));
}
