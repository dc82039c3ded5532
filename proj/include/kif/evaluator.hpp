#ifndef KIF_EVALUATOR_HPP
#define KIF_EVALUATOR_HPP

#include "kif/dataset.hpp"
#include "kif/model.hpp"
#include "kif/tokenizer.hpp"

#include <string>
#include <vector>

namespace kif {

enum class MechanismState { TypeI, TypeII, TypeIII };
std::string to_string(MechanismState s);

struct PromptOutcome {
  std::string prompt_id;
  std::string text;
  std::string continuation;
  bool mentioned = false;
};

struct EvalReport {
  std::string subject;
  double smr = 0.0;             // percent
  double el10 = 0.0;            // ratio
  double utility_drift = 0.0;   // percent
  double retained_fact_accuracy = 0.0;  // percent
  MechanismState mechanism_state = MechanismState::TypeII;
  std::vector<PromptOutcome> details;
  std::uint64_t seed = 0;
};

/// Percent of prompts whose greedy continuation contains any surface form
/// (case-insensitive substring over the detokenized text).
double smr(Model& model, const Tokenizer& tok, const std::vector<PromptInstance>& prompts,
           const std::vector<std::string>& surface_forms, int max_new = 64,
           std::vector<PromptOutcome>* details = nullptr);

/// Ratio of mean first-10-step name-token mass, post over base; each model
/// follows its own greedy prefix; the base mean is floored at 1e-9.
double el10(Model& post, Model& base, const Tokenizer& tok,
            const std::vector<PromptInstance>& prompts, const std::vector<int>& name_tokens);

/// 100 * (PPL_post - PPL_pre) / PPL_pre over the benign corpus.
double utility_drift(Model& post, Model& pre, const Tokenizer& tok,
                     const std::vector<std::string>& benign_lines);

double perplexity(Model& model, const Tokenizer& tok,
                  const std::vector<std::string>& lines);

MechanismState classify_mechanism(double smr_pct, double el10_ratio, double epsilon = 5.0);

/// Percent of retained-subject prompts whose greedy continuation contains the
/// true object surface form.
double fact_accuracy(Model& model, const Tokenizer& tok,
                     const std::vector<std::pair<std::string, std::string>>& prompt_and_object,
                     int max_new = 8);

void save_report(const EvalReport& report, const std::string& path, bool with_details);
/// One row per report, mirroring the leakage-table column layout.
std::string render_report_table(const std::vector<EvalReport>& reports);

}  // namespace kif

#endif
