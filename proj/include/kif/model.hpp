#ifndef KIF_MODEL_HPP
#define KIF_MODEL_HPP

#include "kif/autodiff.hpp"
#include "kif/common.hpp"
#include "kif/tokenizer.hpp"

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace kif {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_seq_len = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Submodule { Gate, Up, Down };
std::string to_string(Submodule s);
Submodule submodule_from_string(const std::string& s);

/// Captured pre-residual MLP activations for one layer, one sequence.
struct MlpTriplet {
  Mat gate;  // T x d_mlp
  Mat up;    // T x d_mlp
  Mat down;  // T x d_model
  int layer = 0;
};

struct HookRequest {
  std::set<int> layers;
  std::set<Submodule> submodules{Submodule::Gate, Submodule::Up, Submodule::Down};
};

/// Inference-time intervention on the MLP block output (post down-projection,
/// pre residual-add). Applied outside the gradient tape.
class MlpIntervention {
 public:
  virtual ~MlpIntervention() = default;
  virtual const std::vector<int>& target_layers() const = 0;
  /// Transforms the rows of y (T x d_model) in place; raises peak_z to the
  /// highest trigger statistic seen.
  virtual void apply(Mat& y, double& peak_z) const = 0;
};

/// Low-rank deltas for the attention q/v/o projections. For each target the
/// delta is (alpha/rank) * a * b with a: d_in x rank (random init) and
/// b: rank x d_out (zero init), so a fresh adapter is an exact identity.
struct AdapterState {
  int rank = 4;
  double alpha = 8.0;
  double dropout = 0.05;
  bool enabled = true;
  struct Proj {
    ad::Param a, b;
  };
  // layers[l]["q"|"v"|"o"]
  std::vector<std::map<std::string, Proj>> layers;

  std::vector<ad::Param*> params();
};

struct GenerateResult {
  std::vector<int> tokens;           // newly generated ids (prompt excluded)
  std::vector<double> name_mass;     // per emitted step, mass on the name set
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  /// Full graph-building forward over one token sequence. Logits are
  /// (seq_len x vocab_size). Hook captures are passive value copies.
  ad::Var forward_var(const std::vector<int>& tokens, const HookRequest* hooks = nullptr,
                      std::vector<MlpTriplet>* captured = nullptr);

  /// One batched pass (counts once toward forward_passes regardless of hook
  /// or layer count).
  std::vector<Mat> forward_batch(const std::vector<std::vector<int>>& batch,
                                 const HookRequest* hooks = nullptr,
                                 std::vector<std::vector<MlpTriplet>>* captured = nullptr);
  Mat forward_logits(const std::vector<int>& tokens, const HookRequest* hooks = nullptr,
                     std::vector<MlpTriplet>* captured = nullptr);

  /// Mean next-token cross entropy over one [bos]...[eos] sequence.
  ad::Var sequence_loss(const std::vector<int>& tokens);

  struct TrainResult {
    double final_loss = 0.0;
    std::vector<double> loss_trace;
  };
  TrainResult train_to_memorize(const std::vector<std::vector<int>>& corpus, int steps,
                                double lr, std::uint64_t seed, int batch_size = 16);

  /// Greedy decoding with a sliding context window; reports per-step summed
  /// probability mass over `name_tokens`. Stops after emitting eos.
  GenerateResult generate(const std::vector<int>& prompt, int max_new,
                          const std::vector<int>& name_tokens = {});

  void attach_adapter(AdapterState state);
  AdapterState detach_adapter();
  void merge_adapter();
  bool has_adapter() const { return adapter_.has_value(); }
  AdapterState& adapter();
  AdapterState make_adapter(int rank, double alpha, double dropout, std::uint64_t seed) const;

  void install_intervention(const MlpIntervention* iv);
  void remove_intervention(const MlpIntervention* iv);
  void reset_intervention_stats();
  double peak_z(const MlpIntervention* iv) const;
  bool has_interventions() const { return !hooks_by_layer_.empty(); }

  std::vector<ad::Param*> base_params();
  std::vector<ad::Param*> trainable_params();  // adapter params when attached
  void set_training(bool on) { training_ = on; }

  std::uint64_t forward_passes() const { return forward_passes_; }

  void save(const std::string& path) const;
  static Model load(const std::string& path);
  void save_adapter(const std::string& path) const;
  void load_adapter(const std::string& path);

  /// Byte-level fingerprint of all base parameters (adapter excluded).
  std::uint64_t base_param_hash() const;

 private:
  struct Layer {
    ad::Param ln1_g, wq, wk, wv, wo;
    ad::Param ln2_g, w_gate, b_gate, w_up, b_up, w_down, b_down;
  };

  ad::Var project(ad::Var h, ad::Param& w, int layer, const std::string& which);

  ModelConfig cfg_;
  ad::Param tok_emb_, pos_emb_, final_gain_, unembed_;
  std::vector<Layer> layers_;
  std::optional<AdapterState> adapter_;
  std::map<int, std::vector<const MlpIntervention*>> hooks_by_layer_;
  mutable std::map<const MlpIntervention*, double> peaks_;
  bool training_ = false;
  Rng dropout_rng_{0xD0};
  std::uint64_t forward_passes_ = 0;
};

/// Self-describing binary container shared by checkpoints and adapters.
void write_container(const std::string& path, const std::string& kind,
                     const std::string& meta_json,
                     const std::vector<std::pair<std::string, const Mat*>>& blobs);
struct ContainerData {
  std::string kind;
  std::string meta_json;
  std::vector<std::pair<std::string, Mat>> blobs;
};
ContainerData read_container(const std::string& path, const std::string& expect_kind);

}  // namespace kif

#endif
