#ifndef KIF_DATASET_HPP
#define KIF_DATASET_HPP

#include "kif/common.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kif {

struct FactTriple {
  std::string id;  // deterministic hash of (subject, predicate, object)
  std::string subject;
  std::string predicate;
  std::string object;
  std::string source = "synthetic";
};

std::string triple_id(const std::string& subject, const std::string& predicate,
                      const std::string& object);

enum class ProbeType { Direct, Contextual, Implicit, Reasoning, Misleading };
constexpr int kNumProbeTypes = 5;
std::string to_string(ProbeType t);
ProbeType probe_type_from_string(const std::string& s);

struct PromptInstance {
  std::string triple_id;
  std::string subject;
  ProbeType probe_type = ProbeType::Direct;
  int template_index = 0;
  std::string text;
  std::optional<std::string> wrong_object;  // Misleading only
};

/// Templates per probe type with {subject}/{predicate}/{object}/{wrong_object}
/// placeholders.
struct TemplateSet {
  std::vector<std::string> templates[kNumProbeTypes];
};

/// The published wording for the five probe families.
TemplateSet standard_templates();
/// Templates restricted to the synthetic corpus vocabulary.
TemplateSet synth_templates();

std::string fill_template(const std::string& tmpl, const FactTriple& t,
                          const std::optional<std::string>& wrong_object = std::nullopt);

/// Reads line-delimited JSON triples ({subject, predicate, object, source}).
/// Duplicate ids collapse to one record. Malformed lines report line numbers.
std::vector<FactTriple> ingest_triples(const std::string& path);
void save_triples(const std::vector<FactTriple>& triples, const std::string& path);
std::map<std::string, int> count_per_subject(const std::vector<FactTriple>& triples);

struct InstantiateResult {
  std::vector<PromptInstance> prompts;
  std::vector<std::string> warnings;  // skipped Misleading prompts etc.
};

InstantiateResult instantiate_prompts(const std::vector<FactTriple>& triples,
                                      const TemplateSet& templates, std::uint64_t seed);

void save_prompts(const std::vector<PromptInstance>& prompts, const std::string& path);
std::vector<PromptInstance> load_prompts(const std::string& path);

enum class OversampleStrategy { Max, Median };

/// Returns an index multiset over `subjects` balanced per strategy. Every
/// original index appears at least once; upsampling draws with replacement.
std::vector<std::size_t> oversample_indices(const std::vector<std::string>& subjects,
                                            OversampleStrategy strategy, std::uint64_t seed);

struct SynthCorpus {
  std::vector<FactTriple> triples;
  std::vector<std::string> training_lines;  // fact sentences, >=3 forms per triple
  std::vector<std::string> benign_lines;    // disjoint filler for PPL/KL/EWC anchors
  std::vector<std::string> vocabulary;      // every word the toy pipeline may emit
  std::vector<std::string> subjects;
};

/// Desk-scale synthetic fact corpus. Subject names are single fictional
/// vocabulary tokens; throws on name collisions.
SynthCorpus synth_corpus(int n_subjects, int n_predicates, std::uint64_t seed);

/// Fixed refusal used as y+ when the capsule output still names the subject.
const std::string& refusal_template();

}  // namespace kif

#endif
