#ifndef KIF_STATS_HPP
#define KIF_STATS_HPP

#include "kif/common.hpp"

#include <cstdint>
#include <vector>

namespace kif {

struct EffectSizeReport {
  double point_estimate = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int trials = 0;
  double level = 0.0;
  bool significant = false;  // true iff 0 is outside [ci_low, ci_high]
};

/// Standardized mean difference with (n-1)-weighted pooled std.
/// Throws on zero pooled standard deviation.
double cohens_d(const std::vector<double>& pos, const std::vector<double>& neg);

/// Percentile bootstrap CI over `trials` resampled recomputations of cohens_d.
/// Deterministic for a fixed seed. Fails if more than half the trials fail.
EffectSizeReport bootstrap_effect_size(const std::vector<double>& pos,
                                       const std::vector<double>& neg, int trials = 50,
                                       double level = 0.95, std::uint64_t seed = 0);

struct ClassifierMetrics {
  double auc_roc = 0.0;
  double pr_auc = 0.0;
  double eer = 0.0;
  double tau_at_1pct_fpr = 0.0;
  double tpr_at_1pct_fpr = 0.0;
  double snr = 0.0;
};

/// Threshold-free separation metrics between positive and negative score sets.
/// AUC is rank-sum with 0.5 credit for ties; EER linearly interpolates the
/// FPR/FNR crossing; the 1% FPR operating point maximizes TPR subject to
/// FPR <= 0.01; SNR = |mean(pos) - mean(neg)| / std(neg).
ClassifierMetrics classifier_metrics(const std::vector<double>& pos_scores,
                                     const std::vector<double>& neg_scores);

double mean_of(const std::vector<double>& xs);
double sample_std(const std::vector<double>& xs);
/// Linear-interpolation percentile, q in [0,1].
double percentile(std::vector<double> xs, double q);

}  // namespace kif

#endif
