#include "kif/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

using nlohmann::json;

namespace kif {

void ModelConfig::validate() const {
  require(n_layers >= 0, "config: n_layers must be >= 0");
  require(d_model > 0 && n_heads > 0 && d_mlp > 0, "config: dimensions must be positive");
  require(d_model % n_heads == 0, "config: d_model must be divisible by n_heads");
  require(vocab_size >= 4, "config: vocab_size must be >= 4 (reserved specials)");
  require(max_seq_len > 0, "config: max_seq_len must be positive");
}

std::string to_string(Submodule s) {
  switch (s) {
    case Submodule::Gate: return "gate";
    case Submodule::Up: return "up";
    case Submodule::Down: return "down";
  }
  throw Error("bad submodule");
}

Submodule submodule_from_string(const std::string& s) {
  if (s == "gate") return Submodule::Gate;
  if (s == "up") return Submodule::Up;
  if (s == "down") return Submodule::Down;
  throw Error("unknown submodule: " + s);
}

std::vector<ad::Param*> AdapterState::params() {
  std::vector<ad::Param*> out;
  for (auto& layer : layers)
    for (auto& [k, p] : layer) {
      out.push_back(&p.a);
      out.push_back(&p.b);
    }
  return out;
}

Model::Model(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const double std0 = 0.05;
  tok_emb_ = ad::make_param("tok_emb", cfg_.vocab_size, cfg_.d_model, std0, rng);
  pos_emb_ = ad::make_param("pos_emb", cfg_.max_seq_len, cfg_.d_model, std0, rng);
  unembed_ = ad::make_param("unembed", cfg_.d_model, cfg_.vocab_size, std0, rng);
  final_gain_ = ad::make_zero_param("final_gain", 1, cfg_.d_model);
  final_gain_.value.setOnes();
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string pfx = "L" + std::to_string(l) + ".";
    Layer lay;
    lay.ln1_g = ad::make_zero_param(pfx + "ln1_g", 1, cfg_.d_model);
    lay.ln1_g.value.setOnes();
    lay.wq = ad::make_param(pfx + "wq", cfg_.d_model, cfg_.d_model, std0, rng);
    lay.wk = ad::make_param(pfx + "wk", cfg_.d_model, cfg_.d_model, std0, rng);
    lay.wv = ad::make_param(pfx + "wv", cfg_.d_model, cfg_.d_model, std0, rng);
    lay.wo = ad::make_param(pfx + "wo", cfg_.d_model, cfg_.d_model, std0, rng);
    lay.ln2_g = ad::make_zero_param(pfx + "ln2_g", 1, cfg_.d_model);
    lay.ln2_g.value.setOnes();
    lay.w_gate = ad::make_param(pfx + "w_gate", cfg_.d_model, cfg_.d_mlp, std0, rng);
    lay.b_gate = ad::make_zero_param(pfx + "b_gate", 1, cfg_.d_mlp);
    lay.w_up = ad::make_param(pfx + "w_up", cfg_.d_model, cfg_.d_mlp, std0, rng);
    lay.b_up = ad::make_zero_param(pfx + "b_up", 1, cfg_.d_mlp);
    lay.w_down = ad::make_param(pfx + "w_down", cfg_.d_mlp, cfg_.d_model, std0, rng);
    lay.b_down = ad::make_zero_param(pfx + "b_down", 1, cfg_.d_model);
    layers_.push_back(std::move(lay));
  }
}

ad::Var Model::project(ad::Var h, ad::Param& w, int layer, const std::string& which) {
  ad::Var out = ad::matmul(h, ad::leaf(w));
  if (adapter_ && adapter_->enabled) {
    auto& proj = adapter_->layers[static_cast<std::size_t>(layer)].at(which);
    ad::Var in = h;
    if (training_ && adapter_->dropout > 0.0) in = ad::dropout(in, adapter_->dropout, dropout_rng_);
    ad::Var delta = ad::matmul(ad::matmul(in, ad::leaf(proj.a)), ad::leaf(proj.b));
    out = ad::add(out, ad::scale(delta, adapter_->alpha / static_cast<double>(adapter_->rank)));
  }
  return out;
}

ad::Var Model::forward_var(const std::vector<int>& tokens, const HookRequest* hooks,
                           std::vector<MlpTriplet>* captured) {
  require(!tokens.empty(), "forward: empty token sequence");
  require(static_cast<int>(tokens.size()) <= cfg_.max_seq_len, "forward: sequence too long");
  for (int t : tokens)
    require(t >= 0 && t < cfg_.vocab_size, "forward: token id out of vocabulary range");
  const auto T = static_cast<Eigen::Index>(tokens.size());

  ad::Var x = ad::gather_rows(ad::leaf(tok_emb_), tokens);
  if (cfg_.n_layers == 0) {
    // Degenerate stack: plain embedding -> unembedding.
    return ad::matmul(x, ad::leaf(unembed_));
  }
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
  x = ad::add(x, ad::gather_rows(ad::leaf(pos_emb_), positions));

  Mat mask = Mat::Zero(T, T);
  for (Eigen::Index i = 0; i < T; ++i)
    for (Eigen::Index j = i + 1; j < T; ++j) mask(i, j) = -1e30;
  ad::Var mask_c = ad::constant(mask);

  const int dh = cfg_.d_model / cfg_.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int l = 0; l < cfg_.n_layers; ++l) {
    Layer& lay = layers_[static_cast<std::size_t>(l)];
    ad::Var h1 = ad::rmsnorm_rows(x, ad::leaf(lay.ln1_g));
    ad::Var q = project(h1, lay.wq, l, "q");
    ad::Var k = ad::matmul(h1, ad::leaf(lay.wk));
    ad::Var v = project(h1, lay.wv, l, "v");
    std::vector<ad::Var> heads;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      ad::Var qh = ad::slice_cols(q, h * dh, dh);
      ad::Var kh = ad::slice_cols(k, h * dh, dh);
      ad::Var vh = ad::slice_cols(v, h * dh, dh);
      ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_dh);
      ad::Var attn = ad::softmax_rows(ad::add(scores, mask_c));
      heads.push_back(ad::matmul(attn, vh));
    }
    ad::Var o = project(ad::concat_cols(heads), lay.wo, l, "o");
    x = ad::add(x, o);

    ad::Var h2 = ad::rmsnorm_rows(x, ad::leaf(lay.ln2_g));
    ad::Var a_gate = ad::add_rowwise(ad::matmul(h2, ad::leaf(lay.w_gate)), ad::leaf(lay.b_gate));
    ad::Var a_up = ad::add_rowwise(ad::matmul(h2, ad::leaf(lay.w_up)), ad::leaf(lay.b_up));
    ad::Var h_mlp = ad::mul(ad::silu(a_gate), a_up);
    ad::Var y_down = ad::add_rowwise(ad::matmul(h_mlp, ad::leaf(lay.w_down)), ad::leaf(lay.b_down));

    if (hooks && captured && hooks->layers.count(l)) {
      MlpTriplet trip;
      trip.layer = l;
      if (hooks->submodules.count(Submodule::Gate)) trip.gate = a_gate.val();
      if (hooks->submodules.count(Submodule::Up)) trip.up = a_up.val();
      if (hooks->submodules.count(Submodule::Down)) trip.down = y_down.val();
      captured->push_back(std::move(trip));
    }

    auto it = hooks_by_layer_.find(l);
    if (it != hooks_by_layer_.end()) {
      require(!ad::grad_enabled(),
              "capsule intervention active during a gradient pass; remove it before training");
      Mat y = y_down.val();
      for (const MlpIntervention* iv : it->second) iv->apply(y, peaks_[iv]);
      y_down = ad::constant(std::move(y));
    }

    x = ad::add(x, y_down);
  }

  ad::Var xf = ad::rmsnorm_rows(x, ad::leaf(final_gain_));
  return ad::matmul(xf, ad::leaf(unembed_));
}

std::vector<Mat> Model::forward_batch(const std::vector<std::vector<int>>& batch,
                                      const HookRequest* hooks,
                                      std::vector<std::vector<MlpTriplet>>* captured) {
  ++forward_passes_;
  ad::NoGradGuard ng;
  std::vector<Mat> out;
  for (const auto& tokens : batch) {
    std::vector<MlpTriplet> trips;
    out.push_back(forward_var(tokens, hooks, captured ? &trips : nullptr).val());
    if (captured) captured->push_back(std::move(trips));
  }
  return out;
}

Mat Model::forward_logits(const std::vector<int>& tokens, const HookRequest* hooks,
                          std::vector<MlpTriplet>* captured) {
  ++forward_passes_;
  ad::NoGradGuard ng;
  return forward_var(tokens, hooks, captured).val();
}

ad::Var Model::sequence_loss(const std::vector<int>& tokens) {
  require(tokens.size() >= 2, "sequence_loss: need at least 2 tokens");
  std::vector<int> input(tokens.begin(), tokens.end() - 1);
  ad::Var logits = forward_var(input);
  ad::Var logp = ad::log_softmax_rows(logits);
  std::vector<int> rows, cols;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    rows.push_back(static_cast<int>(i));
    cols.push_back(tokens[i + 1]);
  }
  return ad::neg(ad::mean(ad::gather_entries(logp, rows, cols)));
}

Model::TrainResult Model::train_to_memorize(const std::vector<std::vector<int>>& corpus,
                                            int steps, double lr, std::uint64_t seed,
                                            int batch_size) {
  require(!corpus.empty(), "train_to_memorize: empty corpus");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  ad::Adam opt(base_params(), lr);
  TrainResult res;
  for (int step = 0; step < steps; ++step) {
    opt.zero_grad();
    ad::Var total;
    int n = std::min<int>(batch_size, static_cast<int>(corpus.size()));
    for (int b = 0; b < n; ++b) {
      ad::Var li = sequence_loss(corpus[pick(rng)]);
      total = (b == 0) ? li : ad::add(total, li);
    }
    total = ad::scale(total, 1.0 / n);
    double loss = total.scalar();
    if (!std::isfinite(loss))
      throw Error("train_to_memorize diverged at step " + std::to_string(step) +
                  " (loss is not finite)");
    ad::backward(total);
    opt.step();
    res.loss_trace.push_back(loss);
    res.final_loss = loss;
  }
  return res;
}

GenerateResult Model::generate(const std::vector<int>& prompt, int max_new,
                               const std::vector<int>& name_tokens) {
  require(!prompt.empty(), "generate: empty prompt");
  ad::NoGradGuard ng;
  GenerateResult res;
  std::vector<int> ctx = prompt;
  for (int step = 0; step < max_new; ++step) {
    std::vector<int> window = ctx;
    if (static_cast<int>(window.size()) > cfg_.max_seq_len)
      window.erase(window.begin(),
                   window.end() - cfg_.max_seq_len);
    Mat logits = forward_var(window).val();
    Eigen::RowVectorXd last = logits.row(logits.rows() - 1);
    double m = last.maxCoeff();
    Eigen::RowVectorXd p = (last.array() - m).exp();
    p /= p.sum();
    double mass = 0.0;
    for (int t : name_tokens) mass += p(t);
    res.name_mass.push_back(mass);
    Eigen::Index best;
    last.maxCoeff(&best);
    int next = static_cast<int>(best);
    res.tokens.push_back(next);
    ctx.push_back(next);
    if (next == Tokenizer::kEos) break;
  }
  return res;
}

AdapterState Model::make_adapter(int rank, double alpha, double dropout,
                                 std::uint64_t seed) const {
  require(rank >= 1, "adapter: rank must be >= 1");
  AdapterState st;
  st.rank = rank;
  st.alpha = alpha;
  st.dropout = dropout;
  Rng rng(seed);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::map<std::string, AdapterState::Proj> m;
    for (const std::string& which : {"q", "v", "o"}) {
      std::string pfx = "adapter.L" + std::to_string(l) + "." + which + ".";
      AdapterState::Proj p;
      p.a = ad::make_param(pfx + "a", cfg_.d_model, rank, 0.02, rng);
      p.b = ad::make_zero_param(pfx + "b", rank, cfg_.d_model);
      m.emplace(which, std::move(p));
    }
    st.layers.push_back(std::move(m));
  }
  return st;
}

void Model::attach_adapter(AdapterState state) {
  require(!adapter_, "adapter already attached");
  require(static_cast<int>(state.layers.size()) == cfg_.n_layers,
          "adapter: layer count mismatch");
  for (auto& layer : state.layers)
    for (auto& [k, p] : layer) {
      require(p.a.value.rows() == cfg_.d_model && p.a.value.cols() == state.rank &&
                  p.b.value.rows() == state.rank && p.b.value.cols() == cfg_.d_model,
              "adapter: dimension mismatch");
    }
  adapter_ = std::move(state);
}

AdapterState Model::detach_adapter() {
  require(adapter_.has_value(), "no adapter attached");
  AdapterState st = std::move(*adapter_);
  adapter_.reset();
  return st;
}

AdapterState& Model::adapter() {
  require(adapter_.has_value(), "no adapter attached");
  return *adapter_;
}

void Model::merge_adapter() {
  require(adapter_.has_value(), "no adapter attached");
  double s = adapter_->alpha / static_cast<double>(adapter_->rank);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    auto& layer = adapter_->layers[static_cast<std::size_t>(l)];
    layers_[static_cast<std::size_t>(l)].wq.value += s * layer.at("q").a.value * layer.at("q").b.value;
    layers_[static_cast<std::size_t>(l)].wv.value += s * layer.at("v").a.value * layer.at("v").b.value;
    layers_[static_cast<std::size_t>(l)].wo.value += s * layer.at("o").a.value * layer.at("o").b.value;
  }
  adapter_.reset();
}

void Model::install_intervention(const MlpIntervention* iv) {
  for (int l : iv->target_layers()) {
    require(l >= 0 && l < cfg_.n_layers, "intervention: target layer out of range");
    auto& vec = hooks_by_layer_[l];
    for (const MlpIntervention* existing : vec)
      require(existing != iv, "intervention already installed on layer " + std::to_string(l));
    vec.push_back(iv);
  }
  peaks_[iv] = -std::numeric_limits<double>::infinity();
}

void Model::remove_intervention(const MlpIntervention* iv) {
  for (int l : iv->target_layers()) {
    auto it = hooks_by_layer_.find(l);
    require(it != hooks_by_layer_.end(), "intervention not installed");
    auto& vec = it->second;
    vec.erase(std::remove(vec.begin(), vec.end(), iv), vec.end());
    if (vec.empty()) hooks_by_layer_.erase(it);
  }
  peaks_.erase(iv);
}

void Model::reset_intervention_stats() {
  for (auto& [iv, z] : peaks_) z = -std::numeric_limits<double>::infinity();
}

double Model::peak_z(const MlpIntervention* iv) const {
  auto it = peaks_.find(iv);
  require(it != peaks_.end(), "intervention not installed");
  return it->second;
}

std::vector<ad::Param*> Model::base_params() {
  std::vector<ad::Param*> out{&tok_emb_, &pos_emb_, &unembed_, &final_gain_};
  for (auto& l : layers_) {
    out.push_back(&l.ln1_g);
    out.push_back(&l.wq);
    out.push_back(&l.wk);
    out.push_back(&l.wv);
    out.push_back(&l.wo);
    out.push_back(&l.ln2_g);
    out.push_back(&l.w_gate);
    out.push_back(&l.b_gate);
    out.push_back(&l.w_up);
    out.push_back(&l.b_up);
    out.push_back(&l.w_down);
    out.push_back(&l.b_down);
  }
  return out;
}

std::vector<ad::Param*> Model::trainable_params() {
  if (adapter_) return adapter_->params();
  return base_params();
}

std::uint64_t Model::base_param_hash() const {
  std::uint64_t h = 14695981039346656037ull;
  auto feed = [&h](const ad::Param& p) {
    h = fnv1a(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()), h);
  };
  feed(tok_emb_);
  feed(pos_emb_);
  feed(unembed_);
  feed(final_gain_);
  for (const auto& l : layers_) {
    feed(l.ln1_g);
    feed(l.wq);
    feed(l.wk);
    feed(l.wv);
    feed(l.wo);
    feed(l.ln2_g);
    feed(l.w_gate);
    feed(l.b_gate);
    feed(l.w_up);
    feed(l.b_up);
    feed(l.w_down);
    feed(l.b_down);
  }
  return h;
}

namespace {
void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& s, std::uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::string& s, const std::string& v) {
  put_u32(s, static_cast<std::uint32_t>(v.size()));
  s.append(v);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  void need(std::size_t n, const std::string& path) {
    if (pos + n > buf.size()) throw Error("container truncated: " + path);
  }
  std::uint32_t u32(const std::string& path) {
    need(4, path);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const std::string& path) {
    need(8, path);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str(const std::string& path) {
    std::uint32_t n = u32(path);
    need(n, path);
    std::string v = buf.substr(pos, n);
    pos += n;
    return v;
  }
};
}  // namespace

void write_container(const std::string& path, const std::string& kind,
                     const std::string& meta_json,
                     const std::vector<std::pair<std::string, const Mat*>>& blobs) {
  std::string body;
  put_u32(body, 1);  // format version
  put_str(body, kind);
  put_str(body, meta_json);
  put_u32(body, static_cast<std::uint32_t>(blobs.size()));
  for (const auto& [name, m] : blobs) {
    put_str(body, name);
    put_u64(body, static_cast<std::uint64_t>(m->rows()));
    put_u64(body, static_cast<std::uint64_t>(m->cols()));
    body.append(reinterpret_cast<const char*>(m->data()),
                sizeof(double) * static_cast<std::size_t>(m->size()));
  }
  std::string out = "KIFBLOB1";
  out += body;
  put_u32(out, crc32(body));
  write_file(path, out);
}

ContainerData read_container(const std::string& path, const std::string& expect_kind) {
  std::string raw = read_file(path);
  if (raw.size() < 12 || raw.compare(0, 8, "KIFBLOB1") != 0)
    throw Error("not a KIF container: " + path);
  std::string body = raw.substr(8, raw.size() - 12);
  std::uint32_t stored;
  std::memcpy(&stored, raw.data() + raw.size() - 4, 4);
  if (crc32(body) != stored) throw Error("checksum mismatch in " + path);
  Reader r{body};
  std::uint32_t version = r.u32(path);
  if (version != 1) throw Error("unsupported container version in " + path);
  ContainerData d;
  d.kind = r.str(path);
  if (!expect_kind.empty() && d.kind != expect_kind)
    throw Error("container kind mismatch in " + path + ": expected " + expect_kind + ", got " +
                d.kind);
  d.meta_json = r.str(path);
  std::uint32_t n = r.u32(path);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str(path);
    auto rows = static_cast<Eigen::Index>(r.u64(path));
    auto cols = static_cast<Eigen::Index>(r.u64(path));
    std::size_t bytes = sizeof(double) * static_cast<std::size_t>(rows * cols);
    r.need(bytes, path);
    Mat m(rows, cols);
    std::memcpy(m.data(), body.data() + r.pos, bytes);
    r.pos += bytes;
    d.blobs.emplace_back(std::move(name), std::move(m));
  }
  return d;
}

void Model::save(const std::string& path) const {
  json meta{{"n_layers", cfg_.n_layers},   {"d_model", cfg_.d_model},
            {"n_heads", cfg_.n_heads},     {"d_mlp", cfg_.d_mlp},
            {"vocab_size", cfg_.vocab_size}, {"max_seq_len", cfg_.max_seq_len},
            {"seed", cfg_.seed}};
  std::vector<std::pair<std::string, const Mat*>> blobs;
  auto* self = const_cast<Model*>(this);
  for (ad::Param* p : self->base_params()) blobs.emplace_back(p->name, &p->value);
  write_container(path, "model", meta.dump(), blobs);
}

Model Model::load(const std::string& path) {
  ContainerData d = read_container(path, "model");
  json meta = json::parse(d.meta_json);
  ModelConfig cfg;
  cfg.n_layers = meta.at("n_layers").get<int>();
  cfg.d_model = meta.at("d_model").get<int>();
  cfg.n_heads = meta.at("n_heads").get<int>();
  cfg.d_mlp = meta.at("d_mlp").get<int>();
  cfg.vocab_size = meta.at("vocab_size").get<int>();
  cfg.max_seq_len = meta.at("max_seq_len").get<int>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  Model m(cfg);
  std::map<std::string, const Mat*> by_name;
  for (const auto& [name, mat] : d.blobs) by_name[name] = &mat;
  for (ad::Param* p : m.base_params()) {
    auto it = by_name.find(p->name);
    require(it != by_name.end(), "checkpoint missing parameter " + p->name);
    require(it->second->rows() == p->value.rows() && it->second->cols() == p->value.cols(),
            "checkpoint shape mismatch for " + p->name);
    p->value = *it->second;
  }
  return m;
}

void Model::save_adapter(const std::string& path) const {
  require(adapter_.has_value(), "no adapter attached");
  json meta{{"rank", adapter_->rank},
            {"alpha", adapter_->alpha},
            {"dropout", adapter_->dropout},
            {"n_layers", cfg_.n_layers},
            {"d_model", cfg_.d_model}};
  std::vector<std::pair<std::string, const Mat*>> blobs;
  for (const auto& layer : adapter_->layers)
    for (const auto& [k, p] : layer) {
      blobs.emplace_back(p.a.name, &p.a.value);
      blobs.emplace_back(p.b.name, &p.b.value);
    }
  write_container(path, "adapter", meta.dump(), blobs);
}

void Model::load_adapter(const std::string& path) {
  ContainerData d = read_container(path, "adapter");
  json meta = json::parse(d.meta_json);
  require(meta.at("n_layers").get<int>() == cfg_.n_layers &&
              meta.at("d_model").get<int>() == cfg_.d_model,
          "adapter file does not match model dimensions");
  AdapterState st = make_adapter(meta.at("rank").get<int>(), meta.at("alpha").get<double>(),
                                 meta.at("dropout").get<double>(), 0);
  std::map<std::string, const Mat*> by_name;
  for (const auto& [name, mat] : d.blobs) by_name[name] = &mat;
  for (ad::Param* p : st.params()) {
    auto it = by_name.find(p->name);
    require(it != by_name.end(), "adapter file missing parameter " + p->name);
    require(it->second->rows() == p->value.rows() && it->second->cols() == p->value.cols(),
            "adapter shape mismatch for " + p->name);
    p->value = *it->second;
  }
  attach_adapter(std::move(st));
}

}  // namespace kif
