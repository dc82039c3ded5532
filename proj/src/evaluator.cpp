#include "kif/evaluator.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "kif/probe.hpp"

using nlohmann::json;

namespace kif {

std::string to_string(MechanismState s) {
  switch (s) {
    case MechanismState::TypeI: return "Type I: True Erasure";
    case MechanismState::TypeII: return "Type II: Obfuscation";
    case MechanismState::TypeIII: return "Type III: Instability";
  }
  throw Error("bad mechanism state");
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<int> encode_window(const Tokenizer& tok, const std::string& text, int window) {
  std::vector<int> ids = tok.encode(text, /*add_bos=*/true, /*add_eos=*/false);
  if (static_cast<int>(ids.size()) > window) ids.resize(static_cast<std::size_t>(window));
  return ids;
}

}  // namespace

double smr(Model& model, const Tokenizer& tok, const std::vector<PromptInstance>& prompts,
           const std::vector<std::string>& surface_forms, int max_new,
           std::vector<PromptOutcome>* details) {
  require(!prompts.empty(), "smr: no prompts");
  require(!surface_forms.empty(), "smr: no surface forms");
  std::vector<std::string> forms;
  for (const auto& f : surface_forms) forms.push_back(lower(f));
  int hits = 0;
  for (const PromptInstance& p : prompts) {
    std::vector<int> x = encode_window(tok, p.text, model.config().max_seq_len);
    GenerateResult g = model.generate(x, max_new);
    std::string cont = lower(tok.decode(g.tokens));
    bool hit = std::any_of(forms.begin(), forms.end(), [&cont](const std::string& f) {
      return cont.find(f) != std::string::npos;
    });
    if (hit) ++hits;
    if (details)
      details->push_back({prompt_id(p), p.text, tok.decode(g.tokens), hit});
  }
  return 100.0 * hits / static_cast<double>(prompts.size());
}

namespace {

double raw_el10(Model& model, const Tokenizer& tok, const std::vector<PromptInstance>& prompts,
                const std::vector<int>& name_tokens) {
  double total = 0.0;
  for (const PromptInstance& p : prompts) {
    std::vector<int> x = encode_window(tok, p.text, model.config().max_seq_len);
    GenerateResult g = model.generate(x, 10, name_tokens);
    for (double m : g.name_mass) total += m;
  }
  return total / static_cast<double>(prompts.size());
}

}  // namespace

double el10(Model& post, Model& base, const Tokenizer& tok,
            const std::vector<PromptInstance>& prompts, const std::vector<int>& name_tokens) {
  require(!prompts.empty(), "el10: no prompts");
  require(!name_tokens.empty(), "el10: empty name-token set");
  double raw_post = raw_el10(post, tok, prompts, name_tokens);
  double raw_base = std::max(raw_el10(base, tok, prompts, name_tokens), 1e-9);
  return raw_post / raw_base;
}

double perplexity(Model& model, const Tokenizer& tok, const std::vector<std::string>& lines) {
  require(!lines.empty(), "perplexity: empty corpus");
  ad::NoGradGuard ng;
  double nll = 0.0;
  long tokens = 0;
  for (const std::string& line : lines) {
    std::vector<int> ids = tok.encode(line, /*add_bos=*/true, /*add_eos=*/true);
    if (static_cast<int>(ids.size()) > model.config().max_seq_len + 1)
      ids.resize(static_cast<std::size_t>(model.config().max_seq_len) + 1);
    if (ids.size() < 2) continue;
    long n = static_cast<long>(ids.size()) - 1;
    nll += model.sequence_loss(ids).scalar() * static_cast<double>(n);
    tokens += n;
  }
  require(tokens > 0, "perplexity: no scoreable tokens");
  return std::exp(nll / static_cast<double>(tokens));
}

double utility_drift(Model& post, Model& pre, const Tokenizer& tok,
                     const std::vector<std::string>& benign_lines) {
  double ppl_pre = perplexity(pre, tok, benign_lines);
  double ppl_post = perplexity(post, tok, benign_lines);
  return 100.0 * (ppl_post - ppl_pre) / ppl_pre;
}

MechanismState classify_mechanism(double smr_pct, double el10_ratio, double epsilon) {
  if (smr_pct > epsilon) return MechanismState::TypeIII;
  if (el10_ratio < 1.0) return MechanismState::TypeI;
  return MechanismState::TypeII;  // el10 == 1 stays here: not erased until strictly below
}

double fact_accuracy(Model& model, const Tokenizer& tok,
                     const std::vector<std::pair<std::string, std::string>>& prompt_and_object,
                     int max_new) {
  require(!prompt_and_object.empty(), "fact_accuracy: no prompts");
  int hits = 0;
  for (const auto& [text, object] : prompt_and_object) {
    std::vector<int> x = encode_window(tok, text, model.config().max_seq_len);
    GenerateResult g = model.generate(x, max_new);
    std::string cont = lower(tok.decode(g.tokens));
    if (cont.find(lower(object)) != std::string::npos) ++hits;
  }
  return 100.0 * hits / static_cast<double>(prompt_and_object.size());
}

void save_report(const EvalReport& report, const std::string& path, bool with_details) {
  json j{{"subject", report.subject},
         {"smr", report.smr},
         {"el10", report.el10},
         {"utility_drift", report.utility_drift},
         {"retained_fact_accuracy", report.retained_fact_accuracy},
         {"mechanism_state", to_string(report.mechanism_state)},
         {"seed", report.seed}};
  std::string out = j.dump();
  out += '\n';
  if (with_details) {
    for (const PromptOutcome& d : report.details) {
      json dj{{"prompt_id", d.prompt_id},
              {"text", d.text},
              {"continuation", d.continuation},
              {"mentioned", d.mentioned}};
      out += dj.dump();
      out += '\n';
    }
  }
  write_file(path, out);
}

std::string render_report_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-14s %12s %12s %10s %12s  %s\n", "Subject", "Util.Drift",
                "Leakage(v)", "EL10(v)", "RetainAcc", "Mechanism State");
  os << line;
  for (const EvalReport& r : reports) {
    std::snprintf(line, sizeof(line), "%-14s %+11.2f%% %11.2f%% %10.3f %11.2f%%  %s\n",
                  r.subject.c_str(), r.utility_drift, r.smr, r.el10, r.retained_fact_accuracy,
                  to_string(r.mechanism_state).c_str());
    os << line;
  }
  return os.str();
}

}  // namespace kif
