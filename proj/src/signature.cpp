#include "kif/signature.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "kif/linalg.hpp"

using nlohmann::json;

namespace kif {

namespace {

std::string hexf(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

double unhexf(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

json vec_to_json(const Vec& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(hexf(v(i)));
  return arr;
}

Vec vec_from_json(const json& arr) {
  Vec v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i)
    v(static_cast<Eigen::Index>(i)) = unhexf(arr[i].get<std::string>());
  return v;
}

std::vector<double> project_all(const std::vector<Vec>& xs, const Vec& dir) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (const Vec& x : xs) out.push_back(x.dot(dir));
  return out;
}

}  // namespace

std::vector<Vec> make_negatives(const std::vector<Vec>& pos, std::uint64_t seed) {
  require(pos.size() >= 2, "make_negatives: need at least 2 positives");
  const Eigen::Index d = pos[0].size();
  for (const Vec& p : pos) require(p.size() == d, "make_negatives: inconsistent dimensions");
  Vec mean = Vec::Zero(d);
  for (const Vec& p : pos) mean += p;
  mean /= static_cast<double>(pos.size());
  Vec var = Vec::Zero(d);
  for (const Vec& p : pos) var += (p - mean).cwiseAbs2();
  var /= static_cast<double>(pos.size() - 1);
  Vec std_dev = var.cwiseSqrt().cwiseMax(1e-8);

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vec> neg;
  neg.reserve(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    Vec n(d);
    for (Eigen::Index j = 0; j < d; ++j) n(j) = gauss(rng) * std_dev(j);
    neg.push_back(std::move(n));
  }
  return neg;
}

Signature mine_primary(const std::vector<Vec>& pos, const std::vector<Vec>& neg,
                       std::uint64_t bootstrap_seed) {
  require(pos.size() >= 2 && neg.size() >= 2, "mine_primary: need >= 2 samples per side");
  const Eigen::Index d = pos[0].size();
  Vec mp = Vec::Zero(d), mn = Vec::Zero(d);
  for (const Vec& p : pos) mp += p;
  mp /= static_cast<double>(pos.size());
  for (const Vec& n : neg) {
    require(n.size() == d, "mine_primary: dimension mismatch between sets");
    mn += n;
  }
  mn /= static_cast<double>(neg.size());
  Vec diff = mp - mn;
  double norm = diff.norm();
  require(norm >= 1e-10, "mine_primary: no separating signal (mean difference ~ 0)");

  Signature sig;
  sig.direction = diff / norm;
  std::vector<double> proj_pos = project_all(pos, sig.direction);
  std::vector<double> proj_neg = project_all(neg, sig.direction);
  sig.effect = bootstrap_effect_size(proj_pos, proj_neg, 50, 0.95, bootstrap_seed);
  sig.calib_mean = mean_of(proj_neg);
  sig.calib_std = std::max(sample_std(proj_neg), 1e-8);
  return sig;
}

void mine_residuals(Signature& sig, const std::vector<Vec>& pos, const std::vector<Vec>& neg,
                    double effect_threshold, int max_components) {
  sig.residuals.clear();
  if (max_components <= 0) return;
  const Eigen::Index d = sig.direction.size();
  std::vector<Vec> all;
  all.reserve(pos.size() + neg.size());
  for (const Vec& x : pos) all.push_back(x - x.dot(sig.direction) * sig.direction);
  for (const Vec& x : neg) all.push_back(x - x.dot(sig.direction) * sig.direction);

  Mat R(static_cast<Eigen::Index>(all.size()), d);
  for (std::size_t i = 0; i < all.size(); ++i) R.row(static_cast<Eigen::Index>(i)) = all[i];
  Vec center = R.colwise().mean().transpose();
  R.rowwise() -= center.transpose();

  SvdResult s = svd(R);
  for (Eigen::Index c = 0; c < s.singular_values.size(); ++c) {
    if (static_cast<int>(sig.residuals.size()) >= max_components) break;
    Vec cand = s.v_transpose.row(c).transpose();
    cand -= cand.dot(sig.direction) * sig.direction;
    for (const auto& [r, e] : sig.residuals) cand -= cand.dot(r) * r;
    double norm = cand.norm();
    if (norm < 1e-8) continue;
    cand /= norm;
    std::vector<double> pp = project_all(pos, cand);
    std::vector<double> pn = project_all(neg, cand);
    double e;
    try {
      e = cohens_d(pp, pn);
    } catch (const Error&) {
      continue;
    }
    if (e < 0) {
      cand = -cand;
      e = -e;
    }
    if (e >= effect_threshold) sig.residuals.emplace_back(std::move(cand), e);
  }
}

std::string signature_key(int layer, Submodule submodule) {
  return "layer." + std::to_string(layer) + "." + to_string(submodule);
}

std::vector<ValidationRow> validate_layerwise(const ActivationCorpus& corpus,
                                              const std::map<std::string, Signature>& signatures,
                                              const std::string& subject, std::uint64_t seed) {
  std::vector<ValidationRow> rows;
  for (const auto& [key, sig] : signatures) {
    std::vector<double> pos, neg;
    for (const ActivationRecord& r : corpus.records) {
      if (r.layer != sig.layer || r.submodule != sig.submodule) continue;
      double score = r.vector.dot(sig.direction);
      if (r.subject == subject)
        pos.push_back(score);
      else
        neg.push_back(score);
    }
    require(!pos.empty(), "validate_layerwise: no target-subject records for " + key);
    require(!neg.empty(), "validate_layerwise: no control records for " + key);

    ValidationRow row;
    row.key = key;
    row.layer = sig.layer;
    row.submodule = sig.submodule;
    row.metrics = classifier_metrics(pos, neg);
    row.effect_size = cohens_d(pos, neg);
    row.n_pos = static_cast<int>(pos.size());
    row.n_neg = static_cast<int>(neg.size());

    // bootstrap CI over score resampling
    Rng rng(seed ^ fnv1a(key));
    std::uniform_int_distribution<std::size_t> pick_p(0, pos.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_n(0, neg.size() - 1);
    std::vector<double> aucs;
    for (int t = 0; t < 50; ++t) {
      std::vector<double> bp(pos.size()), bn(neg.size());
      for (auto& v : bp) v = pos[pick_p(rng)];
      for (auto& v : bn) v = neg[pick_n(rng)];
      aucs.push_back(classifier_metrics(bp, bn).auc_roc);
    }
    row.auc_ci_low = percentile(aucs, 0.025);
    row.auc_ci_high = percentile(aucs, 0.975);
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const ValidationRow& a, const ValidationRow& b) {
    if (a.layer != b.layer) return a.layer < b.layer;
    return to_string(a.submodule) < to_string(b.submodule);
  });
  return rows;
}

void save_signatures(const std::map<std::string, Signature>& signatures,
                     const std::string& path) {
  json root = json::object();
  for (const auto& [key, sig] : signatures) {
    json residuals = json::array();
    for (const auto& [v, e] : sig.residuals)
      residuals.push_back(json{{"direction", vec_to_json(v)}, {"effect", hexf(e)}});
    root[key] = json{{"subject", sig.subject},
                     {"layer", sig.layer},
                     {"submodule", to_string(sig.submodule)},
                     {"direction", vec_to_json(sig.direction)},
                     {"effect",
                      {{"point_estimate", hexf(sig.effect.point_estimate)},
                       {"ci_low", hexf(sig.effect.ci_low)},
                       {"ci_high", hexf(sig.effect.ci_high)},
                       {"trials", sig.effect.trials},
                       {"level", hexf(sig.effect.level)},
                       {"significant", sig.effect.significant}}},
                     {"residuals", residuals},
                     {"calib_mean", hexf(sig.calib_mean)},
                     {"calib_std", hexf(sig.calib_std)},
                     {"neg_seed", sig.neg_seed}};
  }
  write_file(path, root.dump(2) + "\n");
}

std::map<std::string, Signature> load_signatures(const std::string& path) {
  json root = json::parse(read_file(path));
  std::map<std::string, Signature> out;
  for (auto it = root.begin(); it != root.end(); ++it) {
    const json& j = it.value();
    Signature sig;
    sig.subject = j.at("subject").get<std::string>();
    sig.layer = j.at("layer").get<int>();
    sig.submodule = submodule_from_string(j.at("submodule").get<std::string>());
    sig.direction = vec_from_json(j.at("direction"));
    const json& e = j.at("effect");
    sig.effect.point_estimate = unhexf(e.at("point_estimate").get<std::string>());
    sig.effect.ci_low = unhexf(e.at("ci_low").get<std::string>());
    sig.effect.ci_high = unhexf(e.at("ci_high").get<std::string>());
    sig.effect.trials = e.at("trials").get<int>();
    sig.effect.level = unhexf(e.at("level").get<std::string>());
    sig.effect.significant = e.at("significant").get<bool>();
    for (const json& r : j.at("residuals"))
      sig.residuals.emplace_back(vec_from_json(r.at("direction")),
                                 unhexf(r.at("effect").get<std::string>()));
    sig.calib_mean = unhexf(j.at("calib_mean").get<std::string>());
    sig.calib_std = unhexf(j.at("calib_std").get<std::string>());
    sig.neg_seed = j.at("neg_seed").get<std::uint64_t>();
    out.emplace(it.key(), std::move(sig));
  }
  return out;
}

std::string render_validation_table(const std::vector<ValidationRow>& rows) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-16s %-18s %8s %8s %10s %11s %10s %8s %9s\n", "Layer",
                "AUC-ROC [CI]", "PR-AUC", "EER", "tau@1%FPR", "TPR@1%FPR", "Cohen's d", "SNR",
                "Samples");
  os << line;
  for (const ValidationRow& r : rows) {
    char ci[40];
    std::snprintf(ci, sizeof(ci), "%.3f [%.3f,%.3f]", r.metrics.auc_roc, r.auc_ci_low,
                  r.auc_ci_high);
    char samples[32];
    std::snprintf(samples, sizeof(samples), "%d/%d", r.n_pos, r.n_pos + r.n_neg);
    std::snprintf(line, sizeof(line), "%-16s %-18s %8.3f %8.3f %10.3f %11.3f %10.3f %8.2f %9s\n",
                  r.key.c_str(), ci, r.metrics.pr_auc, r.metrics.eer, r.metrics.tau_at_1pct_fpr,
                  r.metrics.tpr_at_1pct_fpr, r.effect_size, r.metrics.snr, samples);
    os << line;
  }
  return os.str();
}

}  // namespace kif
