#include "kif/healing.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>

using nlohmann::json;

namespace kif {

namespace {

std::vector<int> clamp_continuation(std::vector<int> y, std::size_t x_len, int window) {
  std::size_t room = window > static_cast<int>(x_len)
                         ? static_cast<std::size_t>(window) - x_len
                         : 0;
  if (y.size() > room) y.resize(room);
  return y;
}

}  // namespace

TupleCollection collect_tuples(Model& model, std::vector<Capsule>& capsules,
                               const std::vector<PromptInstance>& prompts, const Tokenizer& tok,
                               const std::string& subject, int max_new) {
  require(!capsules.empty(), "collect_tuples: no capsules");
  require(!model.has_interventions(), "collect_tuples: model already has interventions");
  const int window = model.config().max_seq_len;
  const int subject_id = tok.id(subject);
  std::vector<int> refusal = tok.encode(refusal_template(), /*add_bos=*/false, /*add_eos=*/true);

  struct Pending {
    std::vector<int> x;
    std::vector<int> y_minus;
    std::string text;
  };
  std::vector<Pending> pending;
  for (const PromptInstance& p : prompts) {
    std::vector<int> x = tok.encode(p.text, /*add_bos=*/true, /*add_eos=*/false);
    if (static_cast<int>(x.size()) >= window) continue;
    int room = window - static_cast<int>(x.size());
    GenerateResult base = model.generate(x, std::min(max_new, room));
    pending.push_back({std::move(x), std::move(base.tokens), p.text});
  }
  require(!pending.empty(), "collect_tuples: no prompts fit the model window");

  for (Capsule& c : capsules) model.install_intervention(&c);
  TupleCollection out;
  for (Pending& p : pending) {
    model.reset_intervention_stats();
    int room = window - static_cast<int>(p.x.size());
    GenerateResult on = model.generate(p.x, std::min(max_new, room));
    double peak = -std::numeric_limits<double>::infinity();
    int peak_layer = 0;
    double tau = capsules.front().tau;
    for (const Capsule& c : capsules) {
      double z = model.peak_z(&c);
      if (z > peak) {
        peak = z;
        peak_layer = c.target_layers().front();
      }
    }
    if (!(peak > tau)) {
      ++out.below_threshold;
      continue;
    }
    std::vector<int> y_plus = on.tokens;
    bool names_subject = std::find(y_plus.begin(), y_plus.end(), subject_id) != y_plus.end();
    if (names_subject) y_plus = clamp_continuation(refusal, p.x.size(), window);
    if (y_plus.empty() || p.y_minus.empty()) {
      ++out.below_threshold;
      continue;
    }
    if (y_plus == p.y_minus) {
      ++out.skipped_equal;
      continue;
    }
    PreferenceTuple t;
    t.x = p.x;
    t.y_plus = std::move(y_plus);
    t.y_minus = p.y_minus;
    t.trigger_z = peak;
    t.layer = peak_layer;
    t.x_text = p.text;
    t.y_plus_text = tok.decode(t.y_plus);
    t.y_minus_text = tok.decode(t.y_minus);
    out.tuples.push_back(std::move(t));
  }
  for (Capsule& c : capsules) model.remove_intervention(&c);
  require(!out.tuples.empty(),
          "collect_tuples: zero capsule triggers over the corpus (tau too high, or the "
          "signatures do not match this subject)");
  return out;
}

ad::Var continuation_logprob(Model& model, const std::vector<int>& x,
                             const std::vector<int>& y) {
  require(!x.empty(), "continuation_logprob: empty context");
  require(!y.empty(), "continuation_logprob: empty continuation");
  std::vector<int> seq = x;
  seq.insert(seq.end(), y.begin(), y.end());
  require(static_cast<int>(seq.size()) <= model.config().max_seq_len + 1,
          "continuation_logprob: sequence exceeds model window");
  std::vector<int> input(seq.begin(), seq.end() - 1);
  ad::Var logp = ad::log_softmax_rows(model.forward_var(input));
  std::vector<int> rows, cols;
  for (std::size_t i = 0; i < y.size(); ++i) {
    rows.push_back(static_cast<int>(x.size() + i - 1));
    cols.push_back(y[i]);
  }
  return ad::sum(ad::gather_entries(logp, rows, cols));
}

double continuation_logprob_value(Model& model, const std::vector<int>& x,
                                  const std::vector<int>& y) {
  ad::NoGradGuard ng;
  return continuation_logprob(model, x, y).scalar();
}

ad::Var dpo_loss(Model& policy, const PreferenceTuple& t, double ref_lp_plus,
                 double ref_lp_minus, double beta, double w) {
  ad::Var lp_plus = continuation_logprob(policy, t.x, t.y_plus);
  ad::Var lp_minus = continuation_logprob(policy, t.x, t.y_minus);
  ad::Var margin =
      ad::scale(ad::sub(ad::add_scalar(lp_plus, -ref_lp_plus),
                        ad::add_scalar(lp_minus, -ref_lp_minus)),
                beta);
  return ad::scale(ad::neg(ad::log_elem(ad::sigmoid(margin))), w);
}

namespace {

ad::Var target_probs(Model& policy, const std::vector<int>& x, const std::vector<int>& y) {
  std::vector<int> seq = x;
  seq.insert(seq.end(), y.begin(), y.end());
  std::vector<int> input(seq.begin(), seq.end() - 1);
  ad::Var probs = ad::softmax_rows(policy.forward_var(input));
  std::vector<int> rows, cols;
  for (std::size_t i = 0; i < y.size(); ++i) {
    rows.push_back(static_cast<int>(x.size() + i - 1));
    cols.push_back(y[i]);
  }
  return ad::gather_entries(probs, rows, cols);
}

}  // namespace

ad::Var unlikelihood_loss(Model& policy, const std::vector<int>& x,
                          const std::vector<int>& y_minus) {
  require(!y_minus.empty(), "unlikelihood_loss: empty continuation");
  ad::Var p = target_probs(policy, x, y_minus);
  return ad::neg(ad::mean(ad::log1m_clamped(p)));
}

ad::Var name_token_unlikelihood(Model& policy, const std::vector<int>& x,
                                const std::vector<int>& y_plus,
                                const std::vector<int>& name_tokens) {
  require(!y_plus.empty(), "name_token_unlikelihood: empty continuation");
  require(name_tokens.size() <= 12, "name_token_unlikelihood: name-token set larger than 12");
  if (name_tokens.empty()) {
    std::cerr << "warning: empty name-token set, name-token unlikelihood is 0\n";
    return ad::constant_scalar(0.0);
  }
  std::vector<int> seq = x;
  seq.insert(seq.end(), y_plus.begin(), y_plus.end());
  std::vector<int> input(seq.begin(), seq.end() - 1);
  ad::Var probs = ad::softmax_rows(policy.forward_var(input));
  ad::Var mass = ad::sum_cols_subset(probs, name_tokens);  // T x 1
  std::vector<int> rows;
  for (std::size_t i = 0; i < y_plus.size(); ++i)
    rows.push_back(static_cast<int>(x.size() + i - 1));
  ad::Var m = ad::gather_rows(mass, rows);
  return ad::neg(ad::mean(ad::log1m_clamped(m)));
}

std::vector<Anchor> make_anchors(Model& reference, const std::vector<std::vector<int>>& benign) {
  ad::NoGradGuard ng;
  std::vector<Anchor> out;
  for (const auto& seq : benign) {
    if (seq.size() < 2) continue;
    Anchor a;
    a.input.assign(seq.begin(), seq.end() - 1);
    if (static_cast<int>(a.input.size()) > reference.config().max_seq_len)
      a.input.resize(static_cast<std::size_t>(reference.config().max_seq_len));
    a.ref_logp = ad::log_softmax_rows(reference.forward_var(a.input)).val();
    out.push_back(std::move(a));
  }
  require(!out.empty(), "make_anchors: no usable benign sequences");
  return out;
}

ad::Var kl_anchor_loss(Model& policy, const std::vector<Anchor>& anchors) {
  require(!anchors.empty(), "kl_anchor_loss: no anchors");
  ad::Var total;
  long positions = 0;
  bool first = true;
  for (const Anchor& a : anchors) {
    ad::Var logq = ad::log_softmax_rows(policy.forward_var(a.input));
    Mat p_ref = a.ref_logp.array().exp().matrix();
    ad::Var term =
        ad::sum(ad::mul(ad::constant(p_ref), ad::sub(ad::constant(a.ref_logp), logq)));
    total = first ? term : ad::add(total, term);
    first = false;
    positions += a.ref_logp.rows();
  }
  return ad::scale(total, 1.0 / static_cast<double>(positions));
}

FisherDiagonal compute_fisher(Model& model, const std::vector<std::vector<int>>& benign,
                              int pool_size) {
  require(model.has_adapter(), "compute_fisher: no adapter attached");
  require(!benign.empty(), "compute_fisher: empty benign pool");
  std::vector<ad::Param*> params = model.trainable_params();
  FisherDiagonal fisher;
  for (ad::Param* p : params) {
    fisher.weights[p->name] = Mat::Zero(p->value.rows(), p->value.cols());
    fisher.anchor[p->name] = p->value;
  }
  int used = 0;
  for (const auto& seq : benign) {
    if (used >= pool_size) break;
    if (seq.size() < 2 || static_cast<int>(seq.size()) > model.config().max_seq_len + 1)
      continue;
    ad::Var loss = model.sequence_loss(seq);
    auto grads = ad::backward_collect(loss, params);
    for (auto& [name, g] : grads) fisher.weights[name] += g.cwiseAbs2();
    ++used;
  }
  require(used > 0, "compute_fisher: no usable benign sequences");
  for (auto& [name, f] : fisher.weights) f /= static_cast<double>(used);
  fisher.pool_size = used;
  return fisher;
}

ad::Var ewc_loss(Model& policy, const FisherDiagonal& fisher) {
  std::vector<ad::Param*> params = policy.trainable_params();
  ad::Var total;
  bool first = true;
  for (ad::Param* p : params) {
    auto fit = fisher.weights.find(p->name);
    auto ait = fisher.anchor.find(p->name);
    require(fit != fisher.weights.end() && ait != fisher.anchor.end(),
            "ewc_loss: fisher missing parameter " + p->name);
    require(fit->second.rows() == p->value.rows() && fit->second.cols() == p->value.cols(),
            "ewc_loss: fisher shape mismatch for " + p->name);
    ad::Var diff = ad::sub(ad::leaf(*p), ad::constant(ait->second));
    ad::Var term = ad::sum(ad::mul(ad::constant(fit->second), ad::mul(diff, diff)));
    total = first ? term : ad::add(total, term);
    first = false;
  }
  return ad::scale(total, 0.5);
}

HealResult heal(Model& model, const TupleCollection& tuples,
                const std::vector<std::vector<int>>& benign_pool,
                const std::vector<int>& name_tokens, const LossWeights& weights, int steps,
                double lr, std::uint64_t seed, int fisher_pool_size, int anchors_per_step) {
  require(model.has_adapter(), "heal: no adapter attached");
  require(!model.has_interventions(), "heal: remove capsules before healing");
  require(!tuples.tuples.empty(), "heal: no preference tuples");

  // reference pass with the adapter disabled
  model.adapter().enabled = false;
  std::vector<std::pair<double, double>> ref_lp;
  for (const PreferenceTuple& t : tuples.tuples)
    ref_lp.emplace_back(continuation_logprob_value(model, t.x, t.y_plus),
                        continuation_logprob_value(model, t.x, t.y_minus));
  std::vector<Anchor> anchors = make_anchors(model, benign_pool);
  model.adapter().enabled = true;

  FisherDiagonal fisher = compute_fisher(model, benign_pool, fisher_pool_size);

  std::vector<ad::Param*> params = model.trainable_params();
  ad::Adam opt(params, lr);
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_tuple(0, tuples.tuples.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_anchor(0, anchors.size() - 1);

  auto term_value = [](const ad::Var& v, const char* what, int step) {
    double x = v.scalar();
    if (!std::isfinite(x))
      throw Error(std::string("healing loss term ") + what + " is not finite at step " +
                  std::to_string(step));
    return x;
  };

  model.set_training(true);
  HealResult res;
  for (int step = 0; step < steps; ++step) {
    std::size_t ti = pick_tuple(rng);
    const PreferenceTuple& t = tuples.tuples[ti];
    opt.zero_grad();

    StepTrace tr;
    tr.step = step;
    ad::Var total = dpo_loss(model, t, ref_lp[ti].first, ref_lp[ti].second, weights.beta,
                             weights.w);
    tr.dpo = term_value(total, "DPO", step);
    if (weights.lambda_ul > 0) {
      ad::Var ul = unlikelihood_loss(model, t.x, t.y_minus);
      tr.ul = term_value(ul, "UL", step);
      total = ad::add(total, ad::scale(ul, weights.lambda_ul));
    }
    if (weights.lambda_ntul > 0) {
      ad::Var ntul = name_token_unlikelihood(model, t.x, t.y_plus, name_tokens);
      tr.ntul = term_value(ntul, "NTUL", step);
      total = ad::add(total, ad::scale(ntul, weights.lambda_ntul));
    }
    if (weights.lambda_kl > 0) {
      std::vector<Anchor> batch;
      for (int a = 0; a < anchors_per_step; ++a) batch.push_back(anchors[pick_anchor(rng)]);
      ad::Var kl = kl_anchor_loss(model, batch);
      tr.kl = term_value(kl, "KL", step);
      total = ad::add(total, ad::scale(kl, weights.lambda_kl));
    }
    if (weights.lambda_ewc > 0) {
      ad::Var ewc = ewc_loss(model, fisher);
      tr.ewc = term_value(ewc, "EWC", step);
      total = ad::add(total, ad::scale(ewc, weights.lambda_ewc));
    }
    tr.total = term_value(total, "total", step);
    ad::backward(total);
    opt.step();
    res.trace.push_back(tr);
    res.final_loss = tr.total;
  }
  model.set_training(false);
  return res;
}

void save_tuples(const TupleCollection& tuples, const std::string& path) {
  std::string out;
  for (const PreferenceTuple& t : tuples.tuples) {
    json j{{"x", t.x},
           {"y_plus", t.y_plus},
           {"y_minus", t.y_minus},
           {"trigger_z", t.trigger_z},
           {"layer", t.layer},
           {"x_text", t.x_text},
           {"y_plus_text", t.y_plus_text},
           {"y_minus_text", t.y_minus_text}};
    out += j.dump();
    out += '\n';
  }
  json tail{{"skipped_equal", tuples.skipped_equal},
            {"below_threshold", tuples.below_threshold}};
  out += tail.dump();
  out += '\n';
  write_file(path, out);
}

void save_trace(const std::vector<StepTrace>& trace, const std::string& path) {
  std::string out;
  for (const StepTrace& t : trace) {
    json j{{"step", t.step}, {"dpo", t.dpo}, {"ul", t.ul},      {"ntul", t.ntul},
           {"kl", t.kl},     {"ewc", t.ewc}, {"total", t.total}};
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace kif
