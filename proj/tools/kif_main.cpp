#include <CLI11.hpp>

#include <iostream>

#include "kif/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Knowledge immunization pipeline: mine activation signatures, suppress them "
               "with gated capsules, distill the suppression into a low-rank adapter, and "
               "classify the outcome"};
  std::string stage = "all";
  std::string config_path;
  std::vector<std::string> overrides;
  int workers = 0;
  long long seed = -1;
  bool verbose = false;

  app.add_option("stage", stage,
                 "Stage to run: synth|train|probe|mine|forge|heal|eval|all")
      ->default_val("all");
  app.add_option("--config", config_path, "Path to the JSON run configuration")->required();
  app.add_option("--set", overrides, "Override config entries as dotted key=value");
  app.add_option("--workers", workers, "Worker count override");
  app.add_option("--seed", seed, "Override every stage seed with one value");
  app.add_flag("--verbose", verbose, "Print per-stage progress");
  CLI11_PARSE(app, argc, argv);

  kif::RunConfig cfg;
  try {
    if (seed >= 0) {
      auto s = std::to_string(seed);
      for (const char* key : {"model.seed", "corpus.seed", "train.seed", "mine.oversample_seed",
                              "mine.neg_seed", "mine.bootstrap_seed", "mine.validation_seed",
                              "adapter.seed", "heal.seed", "eval.seed"})
        overrides.push_back(std::string(key) + "=" + s);
    }
    if (workers > 0) overrides.push_back("workers=" + std::to_string(workers));
    cfg = kif::load_config(config_path, overrides);
  } catch (const kif::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  try {
    kif::run_stage(stage, cfg, verbose);
  } catch (const kif::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
