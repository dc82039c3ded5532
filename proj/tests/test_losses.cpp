#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "kif/healing.hpp"

using namespace kif;

namespace {

ModelConfig loss_config(int layers = 1, int vocab = 8) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_mlp = 16;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 16;
  cfg.seed = 19;
  return cfg;
}

/// Zero-layer model whose logits are exactly the chosen unembedding row for
/// the current token, giving hand-computable next-token probabilities.
Model controlled_model(const Mat& logit_rows) {
  ModelConfig cfg;
  cfg.n_layers = 0;
  cfg.d_model = static_cast<int>(logit_rows.rows());
  cfg.n_heads = 1;
  cfg.d_mlp = 4;
  cfg.vocab_size = static_cast<int>(logit_rows.cols());
  cfg.max_seq_len = 16;
  cfg.seed = 1;
  Model m(cfg);
  for (ad::Param* p : m.base_params()) {
    if (p->name == "tok_emb")
      p->value = Mat::Identity(cfg.vocab_size, cfg.d_model);
    else if (p->name == "unembed")
      p->value = logit_rows;
  }
  return m;
}

Model adapter_model(std::uint64_t adapter_seed = 31, bool randomize_b = true) {
  Model m(loss_config());
  m.attach_adapter(m.make_adapter(2, 4.0, 0.0, adapter_seed));
  if (randomize_b) {
    Rng rng(5);
    std::normal_distribution<double> g(0.0, 0.05);
    for (auto& layer : m.adapter().layers)
      for (auto& [k, p] : layer)
        for (Eigen::Index i = 0; i < p.b.value.size(); ++i) p.b.value.data()[i] = g(rng);
  }
  return m;
}

PreferenceTuple sample_tuple() {
  PreferenceTuple t;
  t.x = {1, 4, 5};
  t.y_plus = {6, 2};
  t.y_minus = {7, 2};
  return t;
}

/// Central-difference gradient check on adapter parameters: a handful of
/// entries per parameter against the analytic gradient.
void fd_check(Model& m, const std::function<ad::Var()>& make_loss, double tol = 1e-4) {
  std::vector<ad::Param*> params = m.trainable_params();
  auto grads = ad::backward_collect(make_loss(), params);
  const double h = 1e-5;
  for (ad::Param* p : params) {
    const Mat& g = grads.at(p->name);
    Eigen::Index n = std::min<Eigen::Index>(p->value.size(), 3);
    for (Eigen::Index i = 0; i < n; ++i) {
      double saved = p->value.data()[i];
      p->value.data()[i] = saved + h;
      double up = make_loss().scalar();
      p->value.data()[i] = saved - h;
      double down = make_loss().scalar();
      p->value.data()[i] = saved;
      double fd = (up - down) / (2 * h);
      double denom = std::max({std::abs(fd), std::abs(g.data()[i]), 1e-6});
      INFO(p->name << " entry " << i);
      CHECK(std::abs(fd - g.data()[i]) / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("preference loss at zero margin is w log 2 and scales exactly with w") {
  Model m = adapter_model();
  PreferenceTuple t = sample_tuple();
  double ref_plus = continuation_logprob_value(m, t.x, t.y_plus);
  double ref_minus = continuation_logprob_value(m, t.x, t.y_minus);
  // policy == reference: both deltas are zero, loss = -w log sigmoid(0)
  double l1 = dpo_loss(m, t, ref_plus, ref_minus, 0.02, 1.0).scalar();
  CHECK(l1 == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  double l2 = dpo_loss(m, t, ref_plus, ref_minus, 0.02, 2.0).scalar();
  CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-12));
}

TEST_CASE("preference loss is monotone in the reward margin") {
  Model m = adapter_model();
  PreferenceTuple t = sample_tuple();
  double ref_plus = continuation_logprob_value(m, t.x, t.y_plus);
  double ref_minus = continuation_logprob_value(m, t.x, t.y_minus);
  // shrinking ref_minus raises the margin (policy looks better), lowering loss
  double worse = dpo_loss(m, t, ref_plus, ref_minus - 5.0, 0.5, 1.0).scalar();
  double base = dpo_loss(m, t, ref_plus, ref_minus, 0.5, 1.0).scalar();
  double better = dpo_loss(m, t, ref_plus, ref_minus + 5.0, 0.5, 1.0).scalar();
  CHECK(better < base);
  CHECK(base < worse);
}

TEST_CASE("unlikelihood on controlled probabilities") {
  // token 2's logit row gives p = (0.5, 0.5, ~0, ~0) over a 4-token vocab
  Mat rows = Mat::Zero(4, 4);
  rows.row(2) << 0.0, 0.0, -1e9, -1e9;
  Model even = controlled_model(rows);
  double l = unlikelihood_loss(even, {2}, {0}).scalar();
  CHECK(l == doctest::Approx(std::log(2.0)).epsilon(1e-9));  // -log(1 - 0.5)

  // near-zero probability target: loss approaches -log(1) = 0
  double near_zero = unlikelihood_loss(even, {2}, {3}).scalar();
  CHECK(near_zero == doctest::Approx(0.0).epsilon(1e-6));

  // uniform row: -log(1 - 1/4)
  Mat uniform = Mat::Zero(4, 4);
  Model u = controlled_model(uniform);
  CHECK(unlikelihood_loss(u, {1}, {0}).scalar() ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-9));
}

TEST_CASE("unlikelihood averages over continuation length") {
  Mat uniform = Mat::Zero(4, 4);
  Model u = controlled_model(uniform);
  double t1 = unlikelihood_loss(u, {1}, {0}).scalar();
  double t3 = unlikelihood_loss(u, {1}, {0, 0, 0}).scalar();
  CHECK(t3 == doctest::Approx(t1).epsilon(1e-9));  // identical per-step terms
}

TEST_CASE("name-token unlikelihood: empty set, full clamp, size cap") {
  Mat uniform = Mat::Zero(4, 4);
  Model u = controlled_model(uniform);
  CHECK(name_token_unlikelihood(u, {1}, {0, 0}, {}).scalar() == 0.0);

  // full-vocab name set: mass 1 per step, clamped to 1 - 1e-6
  double l = name_token_unlikelihood(u, {1}, {0}, {0, 1, 2, 3}).scalar();
  CHECK(l == doctest::Approx(-std::log(1e-6)).epsilon(1e-6));

  // half the vocab under uniform probabilities: mass 1/2
  double half = name_token_unlikelihood(u, {1}, {0}, {0, 1}).scalar();
  CHECK(half == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  Model big(loss_config(1, 16));
  std::vector<int> too_many;
  for (int i = 0; i < 13; ++i) too_many.push_back(i);
  CHECK_THROWS_AS(name_token_unlikelihood(big, {1}, {2}, too_many), Error);
}

TEST_CASE("anchor KL is zero against itself and non-negative after drift") {
  Model m = adapter_model(31, false);  // fresh identity adapter
  std::vector<std::vector<int>> benign{{1, 4, 6, 2}, {1, 7, 2}};
  std::vector<Anchor> anchors = make_anchors(m, benign);
  REQUIRE(anchors.size() == 2);
  CHECK(kl_anchor_loss(m, anchors).scalar() == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(2);
  std::normal_distribution<double> g(0.0, 0.2);
  for (auto& layer : m.adapter().layers)
    for (auto& [k, p] : layer)
      for (Eigen::Index i = 0; i < p.b.value.size(); ++i) p.b.value.data()[i] = g(rng);
  double kl = kl_anchor_loss(m, anchors).scalar();
  CHECK(kl > 0.0);
  CHECK(std::isfinite(kl));
}

TEST_CASE("ewc hand values: zero at the anchor, 1/2 F drift^2 away from it") {
  Model m = adapter_model();
  std::vector<std::vector<int>> benign{{1, 4, 2}};
  FisherDiagonal fisher = compute_fisher(m, benign, 1);
  CHECK(ewc_loss(m, fisher).scalar() == doctest::Approx(0.0));

  // move exactly one coordinate by 3 with F = 2 there: loss = 0.5 * 2 * 9 = 9
  ad::Param* target = m.trainable_params().front();
  for (auto& [name, f] : fisher.weights) f.setZero();
  fisher.weights.at(target->name)(0, 0) = 2.0;
  target->value(0, 0) = fisher.anchor.at(target->name)(0, 0) + 3.0;
  CHECK(ewc_loss(m, fisher).scalar() == doctest::Approx(9.0).epsilon(1e-12));

  // zero Fisher makes the penalty invariant to arbitrary drift
  for (auto& [name, f] : fisher.weights) f.setZero();
  CHECK(ewc_loss(m, fisher).scalar() == doctest::Approx(0.0));
}

TEST_CASE("fisher is computed over the requested pool with the current anchor") {
  Model m = adapter_model();
  std::vector<std::vector<int>> benign{{1, 4, 2}, {1, 5, 2}, {1, 6, 2}};
  FisherDiagonal fisher = compute_fisher(m, benign, 2);
  CHECK(fisher.pool_size == 2);
  for (ad::Param* p : m.trainable_params()) {
    REQUIRE(fisher.weights.count(p->name));
    REQUIRE(fisher.anchor.count(p->name));
    CHECK((fisher.anchor.at(p->name) - p->value).norm() == 0.0);
    CHECK(fisher.weights.at(p->name).minCoeff() >= 0.0);
  }
}

TEST_CASE("gradient check: preference loss") {
  Model m = adapter_model();
  PreferenceTuple t = sample_tuple();
  double ref_plus, ref_minus;
  {
    m.adapter().enabled = false;
    ref_plus = continuation_logprob_value(m, t.x, t.y_plus);
    ref_minus = continuation_logprob_value(m, t.x, t.y_minus);
    m.adapter().enabled = true;
  }
  fd_check(m, [&] { return dpo_loss(m, t, ref_plus, ref_minus, 0.5, 1.0); });
}

TEST_CASE("gradient check: unlikelihood loss") {
  Model m = adapter_model();
  fd_check(m, [&] { return unlikelihood_loss(m, {1, 4}, {6, 2}); });
}

TEST_CASE("gradient check: name-token unlikelihood") {
  Model m = adapter_model();
  std::vector<int> names{5, 6};
  fd_check(m, [&] { return name_token_unlikelihood(m, {1, 4}, {6, 2}, names); });
}

TEST_CASE("gradient check: anchor KL") {
  Model m = adapter_model();
  std::vector<Anchor> anchors;
  {
    m.adapter().enabled = false;
    anchors = make_anchors(m, {{1, 4, 6, 2}});
    m.adapter().enabled = true;
  }
  fd_check(m, [&] { return kl_anchor_loss(m, anchors); });
}

TEST_CASE("gradient check: ewc penalty") {
  Model m = adapter_model();
  FisherDiagonal fisher = compute_fisher(m, {{1, 4, 2}}, 1);
  for (auto& [name, f] : fisher.weights) f.setConstant(0.7);
  for (auto& [name, a] : fisher.anchor) a.array() += 0.1;
  fd_check(m, [&] { return ewc_loss(m, fisher); });
}

TEST_CASE("heal runs, logs every term, and skips disabled ones") {
  Model m = adapter_model(31, false);
  TupleCollection tc;
  tc.tuples.push_back(sample_tuple());
  std::vector<std::vector<int>> benign{{1, 4, 6, 2}, {1, 7, 2}};
  LossWeights w;
  w.lambda_ul = 0.0;
  HealResult r = heal(m, tc, benign, {5, 6}, w, 4, 1e-3, 3, 2, 1);
  REQUIRE(r.trace.size() == 4);
  for (const StepTrace& s : r.trace) {
    CHECK(s.ul == 0.0);
    CHECK(std::isfinite(s.total));
    CHECK(s.total == doctest::Approx(s.dpo + w.lambda_ul * s.ul + w.lambda_ntul * s.ntul +
                                     w.lambda_kl * s.kl + w.lambda_ewc * s.ewc)
                         .epsilon(1e-9));
  }
  CHECK(r.final_loss == r.trace.back().total);
  // the adapter actually moved
  double bnorm = 0.0;
  for (auto& layer : m.adapter().layers)
    for (auto& [k, p] : layer) bnorm += p.b.value.norm();
  CHECK(bnorm > 0.0);
}

TEST_CASE("heal is deterministic for a fixed seed") {
  auto run = [] {
    Model m = adapter_model(31, false);
    TupleCollection tc;
    tc.tuples.push_back(sample_tuple());
    LossWeights w;
    return heal(m, tc, {{1, 4, 6, 2}}, {5}, w, 3, 1e-3, 11, 1, 1).final_loss;
  };
  CHECK(run() == run());
}
