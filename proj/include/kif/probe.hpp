#ifndef KIF_PROBE_HPP
#define KIF_PROBE_HPP

#include "kif/dataset.hpp"
#include "kif/model.hpp"
#include "kif/tokenizer.hpp"

#include <string>
#include <vector>

namespace kif {

enum class StandardizeMode { Truncate, ZeroPad, Interpolate };
std::string to_string(StandardizeMode m);
StandardizeMode standardize_mode_from_string(const std::string& s);

/// One pooled, standardized activation vector for a (prompt, layer, submodule).
struct ActivationRecord {
  std::string prompt_id;
  std::string subject;
  ProbeType probe_type = ProbeType::Direct;
  int layer = 0;
  Submodule submodule = Submodule::Gate;
  Vec vector;  // length d_target
  int raw_dim = 0;
};

struct ActivationCorpus {
  int d_target = 0;
  StandardizeMode mode = StandardizeMode::ZeroPad;
  std::vector<ActivationRecord> records;
  std::vector<std::string> warnings;
};

std::string prompt_id(const PromptInstance& p);

/// Mean over the token axis: (T x d) -> length-d vector.
Vec pool_tokens(const Mat& activation);

/// Mode of the sampled dimensions; ties break toward the larger dimension.
int detect_target_dim(const std::vector<int>& dims);

/// Length adjustment to d_target. All modes round-trip every entry through
/// 32-bit floats so stored corpora are precision-stable.
Vec standardize_dim(const Vec& v, int d_target, StandardizeMode mode);

/// Hooks every requested (layer, submodule) in a single pass per batch. Long
/// prompts are truncated to the model window with a warning.
ActivationCorpus probe_corpus(Model& model, const std::vector<PromptInstance>& prompts,
                              const Tokenizer& tok, const std::vector<int>& layers,
                              const std::vector<Submodule>& submodules, int batch_size,
                              StandardizeMode mode = StandardizeMode::ZeroPad);

/// Binary corpus file with a prompt-id index footer and CRC trailer.
void save_corpus(const ActivationCorpus& corpus, const std::string& path);
ActivationCorpus load_corpus(const std::string& path);
/// Line-delimited JSON mirror for debugging.
void export_corpus_jsonl(const ActivationCorpus& corpus, const std::string& path);

}  // namespace kif

#endif
