#ifndef KIF_SIGNATURE_HPP
#define KIF_SIGNATURE_HPP

#include "kif/probe.hpp"
#include "kif/stats.hpp"

#include <map>
#include <string>
#include <vector>

namespace kif {

/// Unit-norm separating direction for one (subject, layer, submodule), with
/// effect statistics, orthogonal residual directions, and the z-score
/// calibration taken from the background projections.
struct Signature {
  std::string subject;
  int layer = 0;
  Submodule submodule = Submodule::Gate;
  Vec direction;
  EffectSizeReport effect;
  std::vector<std::pair<Vec, double>> residuals;  // (unit vector, Cohen's d)
  double calib_mean = 0.0;
  double calib_std = 1.0;
  std::uint64_t neg_seed = 0;
};

/// Seeded Gaussian background vectors, one per positive, with per-dimension
/// std matched to the positives (floored at 1e-8).
std::vector<Vec> make_negatives(const std::vector<Vec>& pos, std::uint64_t seed);

/// Normalized mean difference between the sets, bootstrap effect size over
/// projections, and calibration stats from the negative projections.
Signature mine_primary(const std::vector<Vec>& pos, const std::vector<Vec>& neg,
                       std::uint64_t bootstrap_seed);

/// Residual principal directions (after projecting out the primary) whose
/// projected effect size reaches effect_threshold; each kept direction is
/// re-orthogonalized against everything kept before it.
void mine_residuals(Signature& sig, const std::vector<Vec>& pos, const std::vector<Vec>& neg,
                    double effect_threshold, int max_components);

/// One row of the layer-wise validation table.
struct ValidationRow {
  std::string key;  // "layer.{l}.{submodule}"
  int layer = 0;
  Submodule submodule = Submodule::Gate;
  ClassifierMetrics metrics;
  double auc_ci_low = 0.0;
  double auc_ci_high = 0.0;
  double effect_size = 0.0;
  int n_pos = 0;
  int n_neg = 0;
};

/// Scores leak (target-subject) records against other-subject controls with
/// each mined signature; AUC CI by bootstrap over score resampling.
std::vector<ValidationRow> validate_layerwise(const ActivationCorpus& corpus,
                                              const std::map<std::string, Signature>& signatures,
                                              const std::string& subject, std::uint64_t seed);

std::string signature_key(int layer, Submodule submodule);

/// JSON text files (diff-friendly); doubles stored as hexfloat strings so the
/// round trip is bit-exact.
void save_signatures(const std::map<std::string, Signature>& signatures, const std::string& path);
std::map<std::string, Signature> load_signatures(const std::string& path);

std::string render_validation_table(const std::vector<ValidationRow>& rows);

}  // namespace kif

#endif
