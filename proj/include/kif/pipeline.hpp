#ifndef KIF_PIPELINE_HPP
#define KIF_PIPELINE_HPP

#include "kif/healing.hpp"
#include "kif/model.hpp"
#include "kif/probe.hpp"

#include <string>
#include <vector>

namespace kif {

/// Fully resolved run configuration. Unknown keys in the config document are
/// hard errors; every violation is reported at once.
struct RunConfig {
  std::string workdir = "runs/default";

  ModelConfig model;

  struct Corpus {
    int n_subjects = 8;
    int n_predicates = 6;
    std::uint64_t seed = 7;
  } corpus;

  struct Train {
    int steps = 1500;
    double lr = 2e-3;
    int batch_size = 16;
    std::uint64_t seed = 11;
  } train;

  struct Probe {
    int batch_size = 16;
    StandardizeMode standardize_mode = StandardizeMode::ZeroPad;
  } probe;

  struct Mine {
    std::string target_subject;  // empty -> first synthesized subject
    double effect_threshold = 0.8;
    int max_residuals = 3;
    OversampleStrategy oversample = OversampleStrategy::Max;
    std::uint64_t oversample_seed = 19;
    std::uint64_t neg_seed = 23;
    std::uint64_t bootstrap_seed = 29;
    std::uint64_t validation_seed = 31;
  } mine;

  struct CapsuleCfg {
    double tau = 3.0;
    double k = 1.6;
    int top_k = 3;
    StandardizeMode align_mode = StandardizeMode::Truncate;
  } capsule;

  struct Adapter {
    int rank = 4;
    double alpha = 8.0;
    double dropout = 0.05;
    std::uint64_t seed = 37;
  } adapter;

  struct Heal {
    int steps = 120;
    double lr = 1e-3;
    int rounds = 1;
    int fisher_pool = 128;
    int anchors_per_step = 2;
    int collect_max_new = 12;
    std::uint64_t seed = 41;
    LossWeights weights;
  } heal;

  struct Eval {
    double epsilon = 5.0;
    int max_new = 64;
    std::uint64_t seed = 43;
  } eval;

  int workers = 1;

  std::string resolved_json() const;
};

/// Parses a config file and applies dotted `key=value` overrides. Throws
/// kif::Error listing every unknown key / bad value.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);
RunConfig config_from_json_text(const std::string& text,
                                const std::vector<std::string>& overrides);

extern const std::vector<std::string> kStageOrder;  // synth..eval

/// Runs one stage (or "all"). Completed stages with unchanged inputs are
/// skipped via content-hash stamps. Throws kif::Error on failure; missing
/// upstream artifacts name the stage that produces them.
void run_stage(const std::string& stage, const RunConfig& cfg, bool verbose);

}  // namespace kif

#endif
