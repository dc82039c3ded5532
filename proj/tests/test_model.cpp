#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "kif/model.hpp"

using namespace kif;

namespace {

ModelConfig tiny_config(int vocab = 16, int layers = 2) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 16;
  cfg.seed = 5;
  return cfg;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.vocab_size = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("SwiGLU elementwise value: SiLU(1)*1") {
  double h = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(h == doctest::Approx(0.731059).epsilon(1e-5));
  // the same number must come out of the graph op
  ad::Param z = ad::make_zero_param("z", 1, 1);
  z.value(0, 0) = 1.0;
  ad::NoGradGuard ng;
  ad::Var out = ad::mul(ad::silu(ad::leaf(z)), ad::leaf(z));
  CHECK(out.val()(0, 0) == doctest::Approx(0.731059).epsilon(1e-5));
}

TEST_CASE("zero-layer model is embedding times unembedding, hooks capture nothing") {
  Model m(tiny_config(16, 0));
  std::vector<int> tokens{1, 5, 7};
  HookRequest hooks;
  hooks.layers = {0};
  std::vector<MlpTriplet> captured;
  Mat logits = m.forward_logits(tokens, &hooks, &captured);
  CHECK(captured.empty());
  CHECK(logits.rows() == 3);
  CHECK(logits.cols() == 16);
}

TEST_CASE("hooks are passive: logits identical bitwise with hooks on and off") {
  Model m(tiny_config());
  std::vector<int> tokens{1, 4, 9, 2};
  Mat plain = m.forward_logits(tokens);
  HookRequest hooks;
  hooks.layers = {0, 1};
  std::vector<MlpTriplet> captured;
  Mat hooked = m.forward_logits(tokens, &hooks, &captured);
  CHECK(bitwise_equal(plain, hooked));
  CHECK(captured.size() == 2);
  CHECK(captured[0].gate.rows() == 4);
  CHECK(captured[0].gate.cols() == 32);
  CHECK(captured[0].down.cols() == 16);
  CHECK(bitwise_equal(captured[0].gate, captured[0].up) == false);
}

TEST_CASE("token id range and window length are enforced") {
  Model m(tiny_config());
  CHECK_THROWS_AS(m.forward_logits({0, 99}), Error);
  CHECK_THROWS_AS(m.forward_logits(std::vector<int>(17, 1)), Error);
  CHECK_THROWS_AS(m.forward_logits({}), Error);
}

TEST_CASE("forward pass counter counts batches, not prompts or layers") {
  Model m(tiny_config());
  std::uint64_t before = m.forward_passes();
  std::vector<std::vector<int>> batch{{1, 2}, {3, 4}, {5, 6}};
  HookRequest hooks;
  hooks.layers = {0, 1};
  std::vector<std::vector<MlpTriplet>> captured;
  m.forward_batch(batch, &hooks, &captured);
  CHECK(m.forward_passes() == before + 1);
  CHECK(captured.size() == 3);
}

TEST_CASE("fresh adapter is an exact identity and detach restores behavior bitwise") {
  Model m(tiny_config());
  std::vector<int> tokens{1, 7, 3};
  Mat base = m.forward_logits(tokens);
  m.attach_adapter(m.make_adapter(4, 8.0, 0.0, 21));
  Mat adapted = m.forward_logits(tokens);
  CHECK(bitwise_equal(base, adapted));
  m.detach_adapter();
  CHECK(bitwise_equal(base, m.forward_logits(tokens)));
}

TEST_CASE("merge equals attach within 1e-6 on 100 random prompts") {
  Model attach_model(tiny_config());
  Model merge_model(tiny_config());
  AdapterState st = attach_model.make_adapter(4, 8.0, 0.0, 33);
  // give the adapter a real delta
  Rng rng(2);
  std::normal_distribution<double> g(0.0, 0.05);
  for (auto& layer : st.layers)
    for (auto& [k, p] : layer)
      for (Eigen::Index i = 0; i < p.b.value.size(); ++i) p.b.value.data()[i] = g(rng);
  AdapterState st_copy = st;
  attach_model.attach_adapter(std::move(st));
  merge_model.attach_adapter(std::move(st_copy));
  merge_model.merge_adapter();
  CHECK_FALSE(merge_model.has_adapter());

  Rng prng(77);
  std::uniform_int_distribution<int> tokd(0, 15), lend(1, 10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> tokens(static_cast<std::size_t>(lend(prng)));
    for (auto& t : tokens) t = tokd(prng);
    Mat a = attach_model.forward_logits(tokens);
    Mat b = merge_model.forward_logits(tokens);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("adapter dimension mismatch is rejected") {
  Model m(tiny_config());
  Model other(tiny_config(16, 1));
  AdapterState st = other.make_adapter(4, 8.0, 0.0, 1);
  CHECK_THROWS_AS(m.attach_adapter(std::move(st)), Error);
}

TEST_CASE("train with lr=0 leaves parameters bitwise unchanged") {
  Model m(tiny_config());
  std::uint64_t before = m.base_param_hash();
  m.train_to_memorize({{1, 5, 6, 2}}, 5, 0.0, 3);
  CHECK(m.base_param_hash() == before);
}

TEST_CASE("training is deterministic and memorizes a single sequence") {
  std::vector<int> seq{1, 5, 9, 6, 11, 2};
  Model m1(tiny_config());
  Model m2(tiny_config());
  auto r1 = m1.train_to_memorize({seq}, 200, 0.01, 7);
  auto r2 = m2.train_to_memorize({seq}, 200, 0.01, 7);
  CHECK(r1.final_loss == r2.final_loss);
  CHECK(m1.base_param_hash() == m2.base_param_hash());
  CHECK(r1.loss_trace.size() == 200);
  CHECK(r1.final_loss < 0.05);
  GenerateResult g = m1.generate({1}, 8);
  std::vector<int> want(seq.begin() + 1, seq.end());
  CHECK(g.tokens == want);
}

TEST_CASE("generation trivia: step counts and name-mass bounds") {
  Model m(tiny_config());
  GenerateResult none = m.generate({1, 2, 3}, 0);
  CHECK(none.tokens.empty());
  CHECK(none.name_mass.empty());

  std::vector<int> all_vocab;
  for (int v = 0; v < 16; ++v) all_vocab.push_back(v);
  GenerateResult full = m.generate({1, 4}, 3, all_vocab);
  for (double mass : full.name_mass) CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));

  GenerateResult empty_set = m.generate({1, 4}, 3, {});
  for (double mass : empty_set.name_mass) CHECK(mass == 0.0);
}

TEST_CASE("attention softmax rows sum to one") {
  Rng rng(4);
  ad::Param x = ad::make_param("x", 5, 7, 2.0, rng);
  ad::NoGradGuard ng;
  Mat probs = ad::softmax_rows(ad::leaf(x)).val();
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("checkpoint round trip preserves parameters and behavior") {
  Model m(tiny_config());
  m.train_to_memorize({{1, 5, 6, 2}}, 20, 0.01, 3);
  std::string path = "/tmp/kif_model_ckpt.bin";
  m.save(path);
  Model loaded = Model::load(path);
  CHECK(loaded.base_param_hash() == m.base_param_hash());
  CHECK(bitwise_equal(loaded.forward_logits({1, 5, 6}), m.forward_logits({1, 5, 6})));
}

TEST_CASE("adapter file round trip and corruption rejection") {
  Model m(tiny_config());
  m.attach_adapter(m.make_adapter(4, 8.0, 0.05, 9));
  Rng rng(1);
  std::normal_distribution<double> g(0.0, 0.1);
  for (auto& layer : m.adapter().layers)
    for (auto& [k, p] : layer)
      for (Eigen::Index i = 0; i < p.b.value.size(); ++i) p.b.value.data()[i] = g(rng);
  std::string path = "/tmp/kif_adapter.bin";
  m.save_adapter(path);

  Model fresh(tiny_config());
  fresh.load_adapter(path);
  for (std::size_t l = 0; l < m.adapter().layers.size(); ++l)
    for (auto& [k, p] : m.adapter().layers[l]) {
      CHECK(bitwise_equal(p.a.value, fresh.adapter().layers[l].at(k).a.value));
      CHECK(bitwise_equal(p.b.value, fresh.adapter().layers[l].at(k).b.value));
    }

  std::string corrupted = read_file(path);
  corrupted[corrupted.size() / 2] ^= 0x40;
  write_file(path, corrupted);
  Model fresh2(tiny_config());
  CHECK_THROWS_AS(fresh2.load_adapter(path), Error);
}

TEST_CASE("interventions are rejected inside gradient recording") {
  struct Zero : MlpIntervention {
    std::vector<int> layers{0};
    const std::vector<int>& target_layers() const override { return layers; }
    void apply(Mat& y, double&) const override { y.setZero(); }
  } zero;
  Model m(tiny_config());
  m.install_intervention(&zero);
  CHECK_THROWS_AS(m.sequence_loss({1, 5, 2}), Error);
  m.remove_intervention(&zero);
  CHECK_NOTHROW(m.sequence_loss({1, 5, 2}));
}

TEST_CASE("double install on the same layer is an error; remove restores bitwise") {
  struct Scaler : MlpIntervention {
    std::vector<int> layers{1};
    const std::vector<int>& target_layers() const override { return layers; }
    void apply(Mat& y, double& peak) const override {
      y *= 0.5;
      peak = std::max(peak, 1.0);
    }
  } s;
  Model m(tiny_config());
  Mat base = m.forward_logits({1, 6, 3});
  m.install_intervention(&s);
  CHECK_THROWS_AS(m.install_intervention(&s), Error);
  Mat changed = m.forward_logits({1, 6, 3});
  CHECK_FALSE(bitwise_equal(base, changed));
  CHECK(m.peak_z(&s) == doctest::Approx(1.0));
  m.remove_intervention(&s);
  CHECK(bitwise_equal(base, m.forward_logits({1, 6, 3})));
}
