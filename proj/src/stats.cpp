#include "kif/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace kif {

double mean_of(const std::vector<double>& xs) {
  require(!xs.empty(), "mean of empty set");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
  require(xs.size() >= 2, "sample_std needs at least 2 values");
  double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

double percentile(std::vector<double> xs, double q) {
  require(!xs.empty(), "percentile of empty set");
  require(q >= 0.0 && q <= 1.0, "percentile: q out of [0,1]");
  std::sort(xs.begin(), xs.end());
  double pos = q * static_cast<double>(xs.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = static_cast<std::size_t>(std::ceil(pos));
  double frac = pos - static_cast<double>(lo);
  return xs[lo] + frac * (xs[hi] - xs[lo]);
}

double cohens_d(const std::vector<double>& pos, const std::vector<double>& neg) {
  require(pos.size() >= 2 && neg.size() >= 2, "cohens_d: each set needs at least 2 values");
  double n1 = static_cast<double>(pos.size());
  double n2 = static_cast<double>(neg.size());
  double s1 = sample_std(pos), s2 = sample_std(neg);
  double pooled =
      std::sqrt(((n1 - 1.0) * s1 * s1 + (n2 - 1.0) * s2 * s2) / (n1 + n2 - 2.0));
  if (pooled == 0.0) throw Error("cohens_d: zero pooled standard deviation");
  return (mean_of(pos) - mean_of(neg)) / pooled;
}

EffectSizeReport bootstrap_effect_size(const std::vector<double>& pos,
                                       const std::vector<double>& neg, int trials,
                                       double level, std::uint64_t seed) {
  require(trials >= 2, "bootstrap_effect_size: trials must be >= 2");
  require(level > 0.0 && level < 1.0, "bootstrap_effect_size: level out of (0,1)");
  EffectSizeReport rep;
  rep.point_estimate = cohens_d(pos, neg);
  rep.trials = trials;
  rep.level = level;

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_neg(0, neg.size() - 1);
  std::vector<double> ds;
  int failures = 0;
  std::vector<double> rp(pos.size()), rn(neg.size());
  for (int t = 0; t < trials; ++t) {
    for (auto& x : rp) x = pos[pick_pos(rng)];
    for (auto& x : rn) x = neg[pick_neg(rng)];
    try {
      ds.push_back(cohens_d(rp, rn));
    } catch (const Error&) {
      ++failures;
    }
  }
  if (failures * 2 > trials) throw Error("bootstrap_effect_size: more than half the trials failed");
  double alpha = (1.0 - level) / 2.0;
  rep.ci_low = percentile(ds, alpha);
  rep.ci_high = percentile(ds, 1.0 - alpha);
  rep.significant = !(rep.ci_low <= 0.0 && 0.0 <= rep.ci_high);
  return rep;
}

ClassifierMetrics classifier_metrics(const std::vector<double>& pos_scores,
                                     const std::vector<double>& neg_scores) {
  require(!pos_scores.empty() && !neg_scores.empty(),
          "classifier_metrics: degenerate single-class input");
  ClassifierMetrics m;
  const double np = static_cast<double>(pos_scores.size());
  const double nn = static_cast<double>(neg_scores.size());

  // AUC: Mann-Whitney via midranks (ties get 0.5 credit per pair).
  struct Scored {
    double s;
    bool pos;
  };
  std::vector<Scored> all;
  all.reserve(pos_scores.size() + neg_scores.size());
  for (double s : pos_scores) all.push_back({s, true});
  for (double s : neg_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.s < b.s; });
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].s == all[i].s) ++j;
    double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].pos) rank_sum_pos += midrank;
    i = j;
  }
  m.auc_roc = (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);

  // Sweep distinct thresholds descending under the "score >= tau => positive" rule.
  std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.s > b.s; });
  struct Point {
    double tau, tpr, fpr;
  };
  std::vector<Point> pts;
  pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].s == all[i].s) {
      if (all[j].pos)
        tp += 1.0;
      else
        fp += 1.0;
      ++j;
    }
    pts.push_back({all[i].s, tp / np, fp / nn});
    i = j;
  }

  // PR-AUC: step-interpolated average precision over the same sweep.
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    double predicted = pts[i].tpr * np + pts[i].fpr * nn;
    double precision = pts[i].tpr * np / predicted;
    ap += (pts[i].tpr - prev_recall) * precision;
    prev_recall = pts[i].tpr;
  }
  m.pr_auc = ap;

  // EER: crossing of FPR (rising) and FNR (falling) as tau decreases.
  double eer = 1.0;
  bool found = false;
  for (std::size_t i = 0; i + 1 < pts.size() && !found; ++i) {
    double f1 = pts[i].fpr - (1.0 - pts[i].tpr);
    double f2 = pts[i + 1].fpr - (1.0 - pts[i + 1].tpr);
    if (f1 <= 0.0 && f2 >= 0.0) {
      double w = (f1 == f2) ? 0.0 : -f1 / (f2 - f1);
      double fpr_c = pts[i].fpr + w * (pts[i + 1].fpr - pts[i].fpr);
      double fnr_c = (1.0 - pts[i].tpr) + w * ((1.0 - pts[i + 1].tpr) - (1.0 - pts[i].tpr));
      eer = 0.5 * (fpr_c + fnr_c);
      found = true;
    }
  }
  if (!found) {
    // FPR never catches FNR within the sweep; take the terminal point (tau -> -inf).
    eer = 0.5 * (pts.back().fpr + (1.0 - pts.back().tpr));
  }
  m.eer = eer;

  // Operating point: max TPR subject to FPR <= 1%.
  double best_tpr = 0.0, best_tau = pts.front().tau;
  for (const auto& p : pts) {
    if (p.fpr <= 0.01 && p.tpr >= best_tpr) {
      best_tpr = p.tpr;
      best_tau = p.tau;
    }
  }
  m.tpr_at_1pct_fpr = best_tpr;
  m.tau_at_1pct_fpr = best_tau;

  double sn = neg_scores.size() >= 2 ? sample_std(neg_scores) : 0.0;
  m.snr = std::abs(mean_of(pos_scores) - mean_of(neg_scores)) / std::max(sn, 1e-12);
  return m;
}

}  // namespace kif
