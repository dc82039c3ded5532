#include "kif/probe.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

using nlohmann::json;

namespace kif {

std::string to_string(StandardizeMode m) {
  switch (m) {
    case StandardizeMode::Truncate: return "truncate";
    case StandardizeMode::ZeroPad: return "zero_pad";
    case StandardizeMode::Interpolate: return "interpolate";
  }
  throw Error("bad standardize mode");
}

StandardizeMode standardize_mode_from_string(const std::string& s) {
  if (s == "truncate") return StandardizeMode::Truncate;
  if (s == "zero_pad") return StandardizeMode::ZeroPad;
  if (s == "interpolate") return StandardizeMode::Interpolate;
  throw Error("unknown standardize mode: " + s);
}

std::string prompt_id(const PromptInstance& p) {
  return p.triple_id + ":" + to_string(p.probe_type) + ":" + std::to_string(p.template_index);
}

Vec pool_tokens(const Mat& activation) {
  require(activation.rows() >= 1, "pool_tokens: empty token axis");
  return activation.colwise().mean().transpose();
}

int detect_target_dim(const std::vector<int>& dims) {
  require(!dims.empty(), "detect_target_dim: empty sample");
  std::map<int, int> counts;
  for (int d : dims) ++counts[d];
  int best_dim = 0, best_count = -1;
  for (const auto& [d, c] : counts) {
    // map iterates ascending, so >= lets the larger dimension win ties
    if (c >= best_count) {
      best_count = c;
      best_dim = d;
    }
  }
  return best_dim;
}

Vec standardize_dim(const Vec& v, int d_target, StandardizeMode mode) {
  require(d_target > 0, "standardize_dim: d_target must be positive");
  require(v.size() >= 1, "standardize_dim: empty vector");
  const auto n = static_cast<int>(v.size());
  Vec out;
  if (n == d_target) {
    out = v;
  } else {
    switch (mode) {
      case StandardizeMode::Truncate:
        require(n >= d_target, "standardize_dim: cannot truncate below source length");
        out = v.head(d_target);
        break;
      case StandardizeMode::ZeroPad:
        if (n > d_target) {
          out = v.head(d_target);
        } else {
          out = Vec::Zero(d_target);
          out.head(n) = v;
        }
        break;
      case StandardizeMode::Interpolate: {
        out.resize(d_target);
        if (n == 1) {
          out.setConstant(v(0));
        } else {
          for (int i = 0; i < d_target; ++i) {
            double pos = (d_target == 1) ? 0.0
                                         : static_cast<double>(i) * (n - 1) / (d_target - 1);
            int lo = static_cast<int>(std::floor(pos));
            int hi = std::min(lo + 1, n - 1);
            double frac = pos - lo;
            out(i) = (1.0 - frac) * v(lo) + frac * v(hi);
          }
        }
        break;
      }
    }
  }
  for (Eigen::Index i = 0; i < out.size(); ++i)
    out(i) = static_cast<double>(static_cast<float>(out(i)));
  return out;
}

ActivationCorpus probe_corpus(Model& model, const std::vector<PromptInstance>& prompts,
                              const Tokenizer& tok, const std::vector<int>& layers,
                              const std::vector<Submodule>& submodules, int batch_size,
                              StandardizeMode mode) {
  require(!prompts.empty(), "probe_corpus: no prompts");
  require(!layers.empty() && !submodules.empty(), "probe_corpus: nothing to capture");
  require(batch_size >= 1, "probe_corpus: batch_size must be >= 1");
  HookRequest hooks;
  hooks.layers.insert(layers.begin(), layers.end());
  hooks.submodules = std::set<Submodule>(submodules.begin(), submodules.end());

  ActivationCorpus corpus;
  corpus.mode = mode;

  struct RawEntry {
    std::size_t prompt_index;
    int layer;
    Submodule submodule;
    Vec pooled;
  };
  std::vector<RawEntry> raw;
  std::vector<int> dims;

  const int window = model.config().max_seq_len;
  for (std::size_t start = 0; start < prompts.size(); start += batch_size) {
    std::size_t end = std::min(prompts.size(), start + batch_size);
    std::vector<std::vector<int>> batch;
    for (std::size_t i = start; i < end; ++i) {
      std::vector<int> ids = tok.encode(prompts[i].text, /*add_bos=*/true, /*add_eos=*/false);
      if (static_cast<int>(ids.size()) > window) {
        corpus.warnings.push_back("prompt " + prompt_id(prompts[i]) + " truncated from " +
                                  std::to_string(ids.size()) + " to " + std::to_string(window) +
                                  " tokens");
        ids.resize(static_cast<std::size_t>(window));
      }
      batch.push_back(std::move(ids));
    }
    std::vector<std::vector<MlpTriplet>> captured;
    model.forward_batch(batch, &hooks, &captured);
    for (std::size_t b = 0; b < captured.size(); ++b) {
      for (const MlpTriplet& trip : captured[b]) {
        for (Submodule sub : submodules) {
          const Mat& act = sub == Submodule::Gate ? trip.gate
                           : sub == Submodule::Up ? trip.up
                                                  : trip.down;
          Vec pooled = pool_tokens(act);
          dims.push_back(static_cast<int>(pooled.size()));
          raw.push_back({start + b, trip.layer, sub, std::move(pooled)});
        }
      }
    }
  }

  corpus.d_target = detect_target_dim(dims);
  for (RawEntry& e : raw) {
    const PromptInstance& p = prompts[e.prompt_index];
    ActivationRecord rec;
    rec.prompt_id = prompt_id(p);
    rec.subject = p.subject;
    rec.probe_type = p.probe_type;
    rec.layer = e.layer;
    rec.submodule = e.submodule;
    rec.raw_dim = static_cast<int>(e.pooled.size());
    rec.vector = standardize_dim(e.pooled, corpus.d_target, mode);
    check_finite(rec.vector, "activation record " + rec.prompt_id);
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

namespace {
void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& s, std::uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::string& s, const std::string& v) {
  put_u32(s, static_cast<std::uint32_t>(v.size()));
  s.append(v);
}

struct Cur {
  const std::string& b;
  std::size_t pos = 0;
  void need(std::size_t n) {
    if (pos + n > b.size()) throw Error("activation corpus file truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, b.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, b.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string v = b.substr(pos, n);
    pos += n;
    return v;
  }
};
}  // namespace

void save_corpus(const ActivationCorpus& corpus, const std::string& path) {
  std::string body;
  put_u32(body, 1);  // version
  put_u32(body, static_cast<std::uint32_t>(corpus.d_target));
  put_str(body, to_string(corpus.mode));
  put_u32(body, static_cast<std::uint32_t>(corpus.warnings.size()));
  for (const auto& w : corpus.warnings) put_str(body, w);
  put_u32(body, static_cast<std::uint32_t>(corpus.records.size()));
  std::vector<std::pair<std::string, std::uint64_t>> index;
  for (const ActivationRecord& r : corpus.records) {
    index.emplace_back(r.prompt_id, static_cast<std::uint64_t>(body.size()));
    put_str(body, r.prompt_id);
    put_str(body, r.subject);
    put_str(body, to_string(r.probe_type));
    put_u32(body, static_cast<std::uint32_t>(r.layer));
    put_str(body, to_string(r.submodule));
    put_u32(body, static_cast<std::uint32_t>(r.raw_dim));
    put_u64(body, static_cast<std::uint64_t>(r.vector.size()));
    body.append(reinterpret_cast<const char*>(r.vector.data()),
                sizeof(double) * static_cast<std::size_t>(r.vector.size()));
  }
  std::uint64_t footer_at = body.size();
  put_u32(body, static_cast<std::uint32_t>(index.size()));
  for (const auto& [id, off] : index) {
    put_str(body, id);
    put_u64(body, off);
  }
  put_u64(body, footer_at);
  std::string out = "KIFACTS1";
  out += body;
  put_u32(out, crc32(body));
  write_file(path, out);
}

ActivationCorpus load_corpus(const std::string& path) {
  std::string raw = read_file(path);
  if (raw.size() < 12 || raw.compare(0, 8, "KIFACTS1") != 0)
    throw Error("not an activation corpus file: " + path);
  std::string body = raw.substr(8, raw.size() - 12);
  std::uint32_t stored;
  std::memcpy(&stored, raw.data() + raw.size() - 4, 4);
  if (crc32(body) != stored) throw Error("checksum mismatch in " + path);
  Cur c{body};
  std::uint32_t version = c.u32();
  if (version != 1) throw Error("unsupported activation corpus version in " + path);
  ActivationCorpus corpus;
  corpus.d_target = static_cast<int>(c.u32());
  corpus.mode = standardize_mode_from_string(c.str());
  std::uint32_t n_warn = c.u32();
  for (std::uint32_t i = 0; i < n_warn; ++i) corpus.warnings.push_back(c.str());
  std::uint32_t n = c.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    ActivationRecord r;
    r.prompt_id = c.str();
    r.subject = c.str();
    r.probe_type = probe_type_from_string(c.str());
    r.layer = static_cast<int>(c.u32());
    r.submodule = submodule_from_string(c.str());
    r.raw_dim = static_cast<int>(c.u32());
    auto len = static_cast<Eigen::Index>(c.u64());
    std::size_t bytes = sizeof(double) * static_cast<std::size_t>(len);
    c.need(bytes);
    r.vector.resize(len);
    std::memcpy(r.vector.data(), body.data() + c.pos, bytes);
    c.pos += bytes;
    corpus.records.push_back(std::move(r));
  }
  return corpus;
}

void export_corpus_jsonl(const ActivationCorpus& corpus, const std::string& path) {
  std::string out;
  for (const ActivationRecord& r : corpus.records) {
    json j{{"prompt_id", r.prompt_id},
           {"subject", r.subject},
           {"probe_type", to_string(r.probe_type)},
           {"layer", r.layer},
           {"submodule", to_string(r.submodule)},
           {"raw_dim", r.raw_dim}};
    std::vector<double> vals(r.vector.data(), r.vector.data() + r.vector.size());
    j["vector"] = vals;
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace kif
