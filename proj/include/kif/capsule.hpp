#ifndef KIF_CAPSULE_HPP
#define KIF_CAPSULE_HPP

#include "kif/model.hpp"
#include "kif/probe.hpp"
#include "kif/signature.hpp"

#include <string>
#include <vector>

namespace kif {

/// Rank-one gated suppression operator h' = h + alpha_eff * <h,d> * d applied
/// at the MLP block output of its target layer. alpha_eff = alpha when
/// ungated, alpha * sigmoid(k * (z - tau)) when gated, with
/// z = (<h,d> - calib_mean) / calib_std.
class Capsule : public MlpIntervention {
 public:
  std::string subject;
  Vec d;  // unit norm, fixed
  double alpha = -1.0;
  double tau = 3.0;
  double k = 1.6;
  double calib_mean = 0.0;
  double calib_std = 1.0;
  bool gated = true;
  StandardizeMode align_mode = StandardizeMode::Truncate;
  double effect_size = 0.0;
  std::string source_signature;
  std::string created_at;

  void set_target_layers(std::vector<int> layers);
  const std::vector<int>& target_layers() const override { return layers_; }
  void apply(Mat& y, double& peak_z) const override;

  /// Single-vector form used by the geometry tests.
  Vec apply_vec(const Vec& h) const;

  void validate() const;

 private:
  std::vector<int> layers_;
};

/// Sanitize (NaN -> 0, +/-Inf -> +/-1), fit to d_hidden, renormalize.
Vec align_signature(const Vec& direction, int d_hidden, StandardizeMode mode);

/// One capsule per top_k validation layer (ranked by AUC then effect size),
/// built from that layer's signature.
std::vector<Capsule> forge_capsules(const std::map<std::string, Signature>& signatures,
                                    const std::vector<ValidationRow>& validation,
                                    const std::string& subject, int d_hidden, int top_k,
                                    double tau, double k, StandardizeMode align_mode);

/// Text header (JSON line) + binary payload + CRC; round trips bit-exactly.
void save_capsule(const Capsule& c, const std::string& path);
Capsule load_capsule(const std::string& path);

/// Fixed-shape printable summary (effect size, dims, stats, first-5 values).
std::string capsule_summary(const Capsule& c);

}  // namespace kif

#endif
