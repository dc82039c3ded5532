#ifndef KIF_HEALING_HPP
#define KIF_HEALING_HPP

#include "kif/capsule.hpp"
#include "kif/dataset.hpp"
#include "kif/model.hpp"
#include "kif/tokenizer.hpp"

#include <map>
#include <string>
#include <vector>

namespace kif {

/// One logged capsule trigger: prompt, preferred (suppressed) continuation,
/// dispreferred (factual) continuation.
struct PreferenceTuple {
  std::vector<int> x;
  std::vector<int> y_plus;
  std::vector<int> y_minus;
  double trigger_z = 0.0;
  int layer = 0;
  std::string x_text, y_plus_text, y_minus_text;
};

struct TupleCollection {
  std::vector<PreferenceTuple> tuples;
  int skipped_equal = 0;     // y+ == y- pairs, logged but unusable
  int below_threshold = 0;   // prompts whose peak z never crossed tau
};

struct LossWeights {
  double beta = 0.02;
  double w = 1.0;
  double lambda_ul = 0.03;
  double lambda_ntul = 0.02;
  double lambda_kl = 0.03;
  double lambda_ewc = 5.0;
};

struct FisherDiagonal {
  std::map<std::string, Mat> weights;  // F per adapter parameter
  std::map<std::string, Mat> anchor;   // theta* snapshot
  int pool_size = 0;
};

/// Runs every prompt twice (capsules off for y-, on for y+). A tuple is kept
/// when the peak gate z exceeds tau. If the capsule-on output still names the
/// subject, y+ is replaced by the fixed refusal template.
TupleCollection collect_tuples(Model& model, std::vector<Capsule>& capsules,
                               const std::vector<PromptInstance>& prompts, const Tokenizer& tok,
                               const std::string& subject, int max_new);

/// Sum of per-token log-probabilities of continuation y given context x,
/// under whatever adapter state the model currently has.
ad::Var continuation_logprob(Model& model, const std::vector<int>& x,
                             const std::vector<int>& y);
double continuation_logprob_value(Model& model, const std::vector<int>& x,
                                  const std::vector<int>& y);

/// -w * log sigmoid(beta * ((lp+ - ref+) - (lp- - ref-))).
ad::Var dpo_loss(Model& policy, const PreferenceTuple& t, double ref_lp_plus,
                 double ref_lp_minus, double beta, double w);

/// -(1/T) sum_t log(1 - p(y-_t | x, y-_<t)), probabilities clamped <= 1-1e-6.
ad::Var unlikelihood_loss(Model& policy, const std::vector<int>& x,
                          const std::vector<int>& y_minus);

/// Same form over the summed name-token mass along the y+ path.
ad::Var name_token_unlikelihood(Model& policy, const std::vector<int>& x,
                                const std::vector<int>& y_plus,
                                const std::vector<int>& name_tokens);

/// Benign anchor with its frozen reference log-probabilities.
struct Anchor {
  std::vector<int> input;  // context fed to the model (all but the last token)
  Mat ref_logp;            // reference log-softmax rows for that context
};
std::vector<Anchor> make_anchors(Model& reference, const std::vector<std::vector<int>>& benign);

/// Mean over anchor positions of KL(p_ref || p_policy).
ad::Var kl_anchor_loss(Model& policy, const std::vector<Anchor>& anchors);

/// Diagonal Fisher over adapter parameters from the benign pool; anchor is the
/// adapter state at call time.
FisherDiagonal compute_fisher(Model& model, const std::vector<std::vector<int>>& benign,
                              int pool_size);

/// 1/2 sum_i F_i (theta_i - theta*_i)^2 over adapter parameters.
ad::Var ewc_loss(Model& policy, const FisherDiagonal& fisher);

struct StepTrace {
  int step = 0;
  double dpo = 0.0, ul = 0.0, ntul = 0.0, kl = 0.0, ewc = 0.0, total = 0.0;
};

struct HealResult {
  std::vector<StepTrace> trace;
  double final_loss = 0.0;
};

/// Optimizes the attached adapter against the composite objective. Base
/// weights are frozen; reference quantities are computed once with the
/// adapter disabled before the first step.
HealResult heal(Model& model, const TupleCollection& tuples,
                const std::vector<std::vector<int>>& benign_pool,
                const std::vector<int>& name_tokens, const LossWeights& weights, int steps,
                double lr, std::uint64_t seed, int fisher_pool_size, int anchors_per_step = 2);

void save_tuples(const TupleCollection& tuples, const std::string& path);
void save_trace(const std::vector<StepTrace>& trace, const std::string& path);

}  // namespace kif

#endif
