#include "kif/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <iostream>
#include <sstream>

#include "kif/evaluator.hpp"
#include "kif/signature.hpp"

using nlohmann::json;

namespace kif {

const std::vector<std::string> kStageOrder = {"synth", "train", "probe", "mine",
                                              "forge", "heal",  "eval"};

namespace {

// ---- configuration ---------------------------------------------------------

const std::map<std::string, std::set<std::string>> kSchema = {
    {"", {"workdir", "model", "corpus", "train", "probe", "mine", "capsule", "adapter", "heal",
          "eval", "workers"}},
    {"model", {"n_layers", "d_model", "n_heads", "d_mlp", "max_seq_len", "seed"}},
    {"corpus", {"n_subjects", "n_predicates", "seed"}},
    {"train", {"steps", "lr", "batch_size", "seed"}},
    {"probe", {"batch_size", "standardize_mode"}},
    {"mine", {"target_subject", "effect_threshold", "max_residuals", "oversample",
              "oversample_seed", "neg_seed", "bootstrap_seed", "validation_seed"}},
    {"capsule", {"tau", "k", "top_k", "align_mode"}},
    {"adapter", {"rank", "alpha", "dropout", "seed"}},
    {"heal", {"steps", "lr", "rounds", "fisher_pool", "anchors_per_step", "collect_max_new",
              "seed", "beta", "w", "lambda_ul", "lambda_ntul", "lambda_kl", "lambda_ewc"}},
    {"eval", {"epsilon", "max_new", "seed"}},
};

void check_keys(const json& j, const std::string& section, std::vector<std::string>& errors) {
  auto it = kSchema.find(section);
  if (it == kSchema.end()) return;
  for (auto el = j.begin(); el != j.end(); ++el) {
    if (!it->second.count(el.key())) {
      errors.push_back("unknown config key: " +
                       (section.empty() ? el.key() : section + "." + el.key()));
    } else if (el.value().is_object()) {
      check_keys(el.value(), el.key(), errors);
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void apply_override(json& doc, const std::string& spec, std::vector<std::string>& errors) {
  std::size_t eq = spec.find('=');
  if (eq == std::string::npos) {
    errors.push_back("override '" + spec + "' is not key=value");
    return;
  }
  std::string key = spec.substr(0, eq);
  std::string val = spec.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(val);
  } catch (const json::exception&) {
    parsed = val;  // bare string
  }
  json* cur = &doc;
  std::istringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) {
    errors.push_back("override '" + spec + "' has an empty key");
    return;
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
  (*cur)[parts.back()] = parsed;
}

json config_to_json(const RunConfig& c) {
  return json{
      {"workdir", c.workdir},
      {"model",
       {{"n_layers", c.model.n_layers},
        {"d_model", c.model.d_model},
        {"n_heads", c.model.n_heads},
        {"d_mlp", c.model.d_mlp},
        {"max_seq_len", c.model.max_seq_len},
        {"seed", c.model.seed}}},
      {"corpus",
       {{"n_subjects", c.corpus.n_subjects},
        {"n_predicates", c.corpus.n_predicates},
        {"seed", c.corpus.seed}}},
      {"train",
       {{"steps", c.train.steps},
        {"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"seed", c.train.seed}}},
      {"probe",
       {{"batch_size", c.probe.batch_size},
        {"standardize_mode", to_string(c.probe.standardize_mode)}}},
      {"mine",
       {{"target_subject", c.mine.target_subject},
        {"effect_threshold", c.mine.effect_threshold},
        {"max_residuals", c.mine.max_residuals},
        {"oversample", c.mine.oversample == OversampleStrategy::Max ? "max" : "median"},
        {"oversample_seed", c.mine.oversample_seed},
        {"neg_seed", c.mine.neg_seed},
        {"bootstrap_seed", c.mine.bootstrap_seed},
        {"validation_seed", c.mine.validation_seed}}},
      {"capsule",
       {{"tau", c.capsule.tau},
        {"k", c.capsule.k},
        {"top_k", c.capsule.top_k},
        {"align_mode", to_string(c.capsule.align_mode)}}},
      {"adapter",
       {{"rank", c.adapter.rank},
        {"alpha", c.adapter.alpha},
        {"dropout", c.adapter.dropout},
        {"seed", c.adapter.seed}}},
      {"heal",
       {{"steps", c.heal.steps},
        {"lr", c.heal.lr},
        {"rounds", c.heal.rounds},
        {"fisher_pool", c.heal.fisher_pool},
        {"anchors_per_step", c.heal.anchors_per_step},
        {"collect_max_new", c.heal.collect_max_new},
        {"seed", c.heal.seed},
        {"beta", c.heal.weights.beta},
        {"w", c.heal.weights.w},
        {"lambda_ul", c.heal.weights.lambda_ul},
        {"lambda_ntul", c.heal.weights.lambda_ntul},
        {"lambda_kl", c.heal.weights.lambda_kl},
        {"lambda_ewc", c.heal.weights.lambda_ewc}}},
      {"eval",
       {{"epsilon", c.eval.epsilon}, {"max_new", c.eval.max_new}, {"seed", c.eval.seed}}},
      {"workers", c.workers}};
}

// ---- artifact paths --------------------------------------------------------

struct Paths {
  std::string dir;
  std::string triples() const { return dir + "/triples.jsonl"; }
  std::string corpus() const { return dir + "/corpus.json"; }
  std::string prompts() const { return dir + "/prompts.jsonl"; }
  std::string model() const { return dir + "/model.bin"; }
  std::string acts() const { return dir + "/activations.bin"; }
  std::string signatures() const { return dir + "/signatures.json"; }
  std::string validation_json() const { return dir + "/validation.json"; }
  std::string validation_txt() const { return dir + "/validation.txt"; }
  std::string capsules_meta() const { return dir + "/capsules.json"; }
  std::string capsule(int i) const { return dir + "/capsule_" + std::to_string(i) + ".bin"; }
  std::string adapter() const { return dir + "/adapter.bin"; }
  std::string tuples() const { return dir + "/tuples.jsonl"; }
  std::string trace() const { return dir + "/trace.jsonl"; }
  std::string report_jsonl() const { return dir + "/report.jsonl"; }
  std::string report_txt() const { return dir + "/report.txt"; }
  std::string resolved() const { return dir + "/config.resolved.json"; }
  std::string stamp(const std::string& stage) const { return dir + "/.stamp." + stage; }
};

std::string need_file(const std::string& path, const std::string& producer) {
  if (!file_exists(path))
    throw Error("missing artifact " + path + "; run stage '" + producer + "' first");
  return read_file(path);
}

std::uint64_t chain(std::uint64_t h, const std::string& s) {
  return fnv1a(s.data(), s.size(), h);
}

struct CorpusDoc {
  std::vector<std::string> training_lines, benign_lines, vocabulary, subjects;
};

CorpusDoc load_corpus_doc(const std::string& path) {
  json j = json::parse(need_file(path, "synth"));
  CorpusDoc d;
  d.training_lines = j.at("training_lines").get<std::vector<std::string>>();
  d.benign_lines = j.at("benign_lines").get<std::vector<std::string>>();
  d.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  d.subjects = j.at("subjects").get<std::vector<std::string>>();
  return d;
}

std::string resolve_target(const RunConfig& cfg, const CorpusDoc& doc) {
  if (!cfg.mine.target_subject.empty()) {
    require(std::find(doc.subjects.begin(), doc.subjects.end(), cfg.mine.target_subject) !=
                doc.subjects.end(),
            "target subject '" + cfg.mine.target_subject + "' is not in the corpus");
    return cfg.mine.target_subject;
  }
  return doc.subjects.front();
}

void save_validation_json(const std::vector<ValidationRow>& rows, const std::string& path) {
  json arr = json::array();
  for (const ValidationRow& r : rows)
    arr.push_back(json{{"key", r.key},
                       {"layer", r.layer},
                       {"submodule", to_string(r.submodule)},
                       {"auc_roc", r.metrics.auc_roc},
                       {"pr_auc", r.metrics.pr_auc},
                       {"eer", r.metrics.eer},
                       {"tau_at_1pct_fpr", r.metrics.tau_at_1pct_fpr},
                       {"tpr_at_1pct_fpr", r.metrics.tpr_at_1pct_fpr},
                       {"snr", r.metrics.snr},
                       {"auc_ci_low", r.auc_ci_low},
                       {"auc_ci_high", r.auc_ci_high},
                       {"effect_size", r.effect_size},
                       {"n_pos", r.n_pos},
                       {"n_neg", r.n_neg}});
  write_file(path, arr.dump(2) + "\n");
}

std::vector<ValidationRow> load_validation_json(const std::string& path) {
  json arr = json::parse(need_file(path, "mine"));
  std::vector<ValidationRow> rows;
  for (const json& j : arr) {
    ValidationRow r;
    r.key = j.at("key").get<std::string>();
    r.layer = j.at("layer").get<int>();
    r.submodule = submodule_from_string(j.at("submodule").get<std::string>());
    r.metrics.auc_roc = j.at("auc_roc").get<double>();
    r.metrics.pr_auc = j.at("pr_auc").get<double>();
    r.metrics.eer = j.at("eer").get<double>();
    r.metrics.tau_at_1pct_fpr = j.at("tau_at_1pct_fpr").get<double>();
    r.metrics.tpr_at_1pct_fpr = j.at("tpr_at_1pct_fpr").get<double>();
    r.metrics.snr = j.at("snr").get<double>();
    r.auc_ci_low = j.at("auc_ci_low").get<double>();
    r.auc_ci_high = j.at("auc_ci_high").get<double>();
    r.effect_size = j.at("effect_size").get<double>();
    r.n_pos = j.at("n_pos").get<int>();
    r.n_neg = j.at("n_neg").get<int>();
    rows.push_back(std::move(r));
  }
  return rows;
}

Tokenizer tokenizer_for(const CorpusDoc& doc) { return Tokenizer::from_words(doc.vocabulary); }

int capsule_count(const std::string& meta_path) {
  json j = json::parse(need_file(meta_path, "forge"));
  return j.at("count").get<int>();
}

// ---- stage bodies ----------------------------------------------------------

void stage_synth(const RunConfig& cfg, const Paths& p, bool verbose) {
  SynthCorpus c = synth_corpus(cfg.corpus.n_subjects, cfg.corpus.n_predicates, cfg.corpus.seed);
  save_triples(c.triples, p.triples());
  json doc{{"training_lines", c.training_lines},
           {"benign_lines", c.benign_lines},
           {"vocabulary", c.vocabulary},
           {"subjects", c.subjects}};
  write_file(p.corpus(), doc.dump(2) + "\n");
  InstantiateResult prompts = instantiate_prompts(c.triples, synth_templates(), cfg.corpus.seed);
  save_prompts(prompts.prompts, p.prompts());
  if (verbose) {
    for (const auto& w : prompts.warnings) std::cerr << "warning: " << w << "\n";
    std::cerr << "synth: " << c.triples.size() << " triples, " << prompts.prompts.size()
              << " prompts, vocabulary " << c.vocabulary.size() << "\n";
  }
}

void stage_train(const RunConfig& cfg, const Paths& p, bool verbose) {
  CorpusDoc doc = load_corpus_doc(p.corpus());
  Tokenizer tok = tokenizer_for(doc);
  ModelConfig mc = cfg.model;
  mc.vocab_size = tok.size();
  Model model(mc);
  std::vector<std::vector<int>> corpus;
  for (const auto& line : doc.training_lines) corpus.push_back(tok.encode(line, true, true));
  for (const auto& line : doc.benign_lines) corpus.push_back(tok.encode(line, true, true));
  auto res = model.train_to_memorize(corpus, cfg.train.steps, cfg.train.lr, cfg.train.seed,
                                     cfg.train.batch_size);
  model.save(p.model());
  if (verbose) std::cerr << "train: final loss " << res.final_loss << "\n";
}

void stage_probe(const RunConfig& cfg, const Paths& p, bool verbose) {
  need_file(p.model(), "train");
  Model model = Model::load(p.model());
  CorpusDoc doc = load_corpus_doc(p.corpus());
  Tokenizer tok = tokenizer_for(doc);
  std::vector<PromptInstance> prompts = load_prompts(p.prompts());
  require(!prompts.empty(), "probe: prompts file is empty (run 'synth')");
  std::vector<int> layers;
  for (int l = 0; l < model.config().n_layers; ++l) layers.push_back(l);
  std::vector<Submodule> subs{Submodule::Gate, Submodule::Up, Submodule::Down};
  ActivationCorpus corpus = probe_corpus(model, prompts, tok, layers, subs,
                                         cfg.probe.batch_size, cfg.probe.standardize_mode);
  save_corpus(corpus, p.acts());
  if (verbose) {
    for (const auto& w : corpus.warnings) std::cerr << "warning: " << w << "\n";
    std::cerr << "probe: " << corpus.records.size() << " records, d_target "
              << corpus.d_target << "\n";
  }
}

void stage_mine(const RunConfig& cfg, const Paths& p, bool verbose) {
  need_file(p.acts(), "probe");
  ActivationCorpus corpus = load_corpus(p.acts());
  CorpusDoc doc = load_corpus_doc(p.corpus());
  std::string target = resolve_target(cfg, doc);

  // balance subjects per (layer, submodule) cell before mining/validation
  std::map<std::string, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const ActivationRecord& r = corpus.records[i];
    cells[signature_key(r.layer, r.submodule)].push_back(i);
  }
  ActivationCorpus balanced;
  balanced.d_target = corpus.d_target;
  balanced.mode = corpus.mode;
  for (const auto& [key, idx] : cells) {
    std::vector<std::string> subjects;
    for (std::size_t i : idx) subjects.push_back(corpus.records[i].subject);
    auto chosen = oversample_indices(subjects, cfg.mine.oversample,
                                     cfg.mine.oversample_seed ^ fnv1a(key));
    for (std::size_t c : chosen) balanced.records.push_back(corpus.records[idx[c]]);
  }

  std::map<std::string, Signature> signatures;
  for (const auto& [key, idx] : cells) {
    std::vector<Vec> pos;
    int layer = 0;
    Submodule sub = Submodule::Gate;
    for (const ActivationRecord& r : balanced.records) {
      if (signature_key(r.layer, r.submodule) != key) continue;
      layer = r.layer;
      sub = r.submodule;
      if (r.subject == target) pos.push_back(r.vector);
    }
    require(pos.size() >= 2, "mine: not enough target records for " + key);
    std::uint64_t neg_seed = cfg.mine.neg_seed ^ fnv1a(key);
    std::vector<Vec> neg = make_negatives(pos, neg_seed);
    Signature sig = mine_primary(pos, neg, cfg.mine.bootstrap_seed ^ fnv1a(key));
    mine_residuals(sig, pos, neg, cfg.mine.effect_threshold, cfg.mine.max_residuals);
    sig.subject = target;
    sig.layer = layer;
    sig.submodule = sub;
    sig.neg_seed = neg_seed;
    signatures.emplace(key, std::move(sig));
  }
  save_signatures(signatures, p.signatures());

  std::vector<ValidationRow> rows =
      validate_layerwise(balanced, signatures, target, cfg.mine.validation_seed);
  save_validation_json(rows, p.validation_json());
  write_file(p.validation_txt(), render_validation_table(rows));
  if (verbose) std::cerr << render_validation_table(rows);
}

void stage_forge(const RunConfig& cfg, const Paths& p, bool verbose) {
  need_file(p.signatures(), "mine");
  std::map<std::string, Signature> signatures = load_signatures(p.signatures());
  std::vector<ValidationRow> rows = load_validation_json(p.validation_json());
  CorpusDoc doc = load_corpus_doc(p.corpus());
  std::string target = resolve_target(cfg, doc);
  std::vector<Capsule> capsules =
      forge_capsules(signatures, rows, target, cfg.model.d_model, cfg.capsule.top_k,
                     cfg.capsule.tau, cfg.capsule.k, cfg.capsule.align_mode);
  for (std::size_t i = 0; i < capsules.size(); ++i)
    save_capsule(capsules[i], p.capsule(static_cast<int>(i)));
  json meta{{"count", capsules.size()}, {"subject", target}};
  write_file(p.capsules_meta(), meta.dump(2) + "\n");
  if (verbose)
    for (const Capsule& c : capsules) std::cerr << capsule_summary(c);
}

void stage_heal(const RunConfig& cfg, const Paths& p, bool verbose) {
  need_file(p.model(), "train");
  Model model = Model::load(p.model());
  CorpusDoc doc = load_corpus_doc(p.corpus());
  Tokenizer tok = tokenizer_for(doc);
  std::string target = resolve_target(cfg, doc);
  int n_caps = capsule_count(p.capsules_meta());
  std::vector<Capsule> capsules;
  for (int i = 0; i < n_caps; ++i) capsules.push_back(load_capsule(p.capsule(i)));

  std::vector<PromptInstance> prompts;
  for (const PromptInstance& q : load_prompts(p.prompts()))
    if (q.subject == target) prompts.push_back(q);
  require(!prompts.empty(), "heal: no prompts for target subject");

  std::vector<std::vector<int>> benign;
  for (const auto& line : doc.benign_lines) benign.push_back(tok.encode(line, true, true));
  std::vector<int> name_tokens{tok.id_strict(target)};

  model.attach_adapter(model.make_adapter(cfg.adapter.rank, cfg.adapter.alpha,
                                          cfg.adapter.dropout, cfg.adapter.seed));
  std::vector<StepTrace> all_trace;
  for (int round = 0; round < cfg.heal.rounds; ++round) {
    TupleCollection tuples =
        collect_tuples(model, capsules, prompts, tok, target, cfg.heal.collect_max_new);
    if (round == 0) save_tuples(tuples, p.tuples());
    HealResult res = heal(model, tuples, benign, name_tokens, cfg.heal.weights, cfg.heal.steps,
                          cfg.heal.lr, cfg.heal.seed + static_cast<std::uint64_t>(round),
                          cfg.heal.fisher_pool, cfg.heal.anchors_per_step);
    for (StepTrace t : res.trace) {
      t.step += round * cfg.heal.steps;
      all_trace.push_back(t);
    }
    if (verbose)
      std::cerr << "heal round " << round << ": " << tuples.tuples.size() << " tuples, final loss "
                << res.final_loss << "\n";
  }
  save_trace(all_trace, p.trace());
  model.save_adapter(p.adapter());
}

void stage_eval(const RunConfig& cfg, const Paths& p, bool verbose) {
  need_file(p.model(), "train");
  need_file(p.adapter(), "heal");
  Model base = Model::load(p.model());
  Model post = Model::load(p.model());
  post.load_adapter(p.adapter());
  CorpusDoc doc = load_corpus_doc(p.corpus());
  Tokenizer tok = tokenizer_for(doc);
  std::string target = resolve_target(cfg, doc);

  std::vector<PromptInstance> target_prompts;
  for (const PromptInstance& q : load_prompts(p.prompts()))
    if (q.subject == target) target_prompts.push_back(q);
  require(!target_prompts.empty(), "eval: no prompts for target subject");

  std::vector<FactTriple> triples = ingest_triples(p.triples());
  std::vector<std::pair<std::string, std::string>> retained;
  for (const FactTriple& t : triples)
    if (t.subject != target)
      retained.emplace_back("the " + t.predicate + " of " + t.subject + " is", t.object);

  EvalReport report;
  report.subject = target;
  report.seed = cfg.eval.seed;
  report.smr = smr(post, tok, target_prompts, {target}, cfg.eval.max_new, &report.details);
  report.el10 = el10(post, base, tok, target_prompts, {tok.id_strict(target)});
  report.utility_drift = utility_drift(post, base, tok, doc.benign_lines);
  report.retained_fact_accuracy = fact_accuracy(post, tok, retained);
  report.mechanism_state = classify_mechanism(report.smr, report.el10, cfg.eval.epsilon);
  save_report(report, p.report_jsonl(), /*with_details=*/true);
  write_file(p.report_txt(), render_report_table({report}));
  if (verbose) std::cerr << render_report_table({report});
}

// ---- stage hashing / dispatch ---------------------------------------------

std::uint64_t stage_hash(const std::string& stage, const RunConfig& cfg, const Paths& p) {
  json c = config_to_json(cfg);
  std::uint64_t h = fnv1a(stage);
  auto mix_cfg = [&](const char* section) { h = chain(h, c.at(section).dump()); };
  auto mix_file = [&](const std::string& path, const std::string& producer) {
    h = chain(h, need_file(path, producer));
  };
  if (stage == "synth") {
    mix_cfg("corpus");
  } else if (stage == "train") {
    mix_cfg("model");
    mix_cfg("train");
    mix_file(p.corpus(), "synth");
  } else if (stage == "probe") {
    mix_cfg("probe");
    mix_file(p.model(), "train");
    mix_file(p.prompts(), "synth");
  } else if (stage == "mine") {
    mix_cfg("mine");
    mix_file(p.acts(), "probe");
  } else if (stage == "forge") {
    mix_cfg("capsule");
    mix_file(p.signatures(), "mine");
    mix_file(p.validation_json(), "mine");
  } else if (stage == "heal") {
    mix_cfg("adapter");
    mix_cfg("heal");
    mix_file(p.model(), "train");
    mix_file(p.capsules_meta(), "forge");
    int n = capsule_count(p.capsules_meta());
    for (int i = 0; i < n; ++i) mix_file(p.capsule(i), "forge");
    mix_file(p.prompts(), "synth");
    mix_file(p.corpus(), "synth");
  } else if (stage == "eval") {
    mix_cfg("eval");
    mix_file(p.model(), "train");
    mix_file(p.adapter(), "heal");
    mix_file(p.prompts(), "synth");
    mix_file(p.triples(), "synth");
  } else {
    throw Error("unknown stage: " + stage);
  }
  return h;
}

std::vector<std::string> stage_outputs(const std::string& stage, const Paths& p) {
  if (stage == "synth") return {p.triples(), p.corpus(), p.prompts()};
  if (stage == "train") return {p.model()};
  if (stage == "probe") return {p.acts()};
  if (stage == "mine") return {p.signatures(), p.validation_json(), p.validation_txt()};
  if (stage == "forge") return {p.capsules_meta()};
  if (stage == "heal") return {p.adapter(), p.tuples(), p.trace()};
  if (stage == "eval") return {p.report_jsonl(), p.report_txt()};
  throw Error("unknown stage: " + stage);
}

void run_one(const std::string& stage, const RunConfig& cfg, const Paths& p, bool verbose) {
  std::uint64_t h = stage_hash(stage, cfg, p);
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  std::string stamp_path = p.stamp(stage);
  bool outputs_ok = true;
  for (const auto& out : stage_outputs(stage, p))
    if (!file_exists(out)) outputs_ok = false;
  if (outputs_ok && file_exists(stamp_path) && read_file(stamp_path) == hex) {
    if (verbose) std::cerr << "stage " << stage << ": up to date, skipping\n";
    return;
  }
  if (stage == "synth") stage_synth(cfg, p, verbose);
  else if (stage == "train") stage_train(cfg, p, verbose);
  else if (stage == "probe") stage_probe(cfg, p, verbose);
  else if (stage == "mine") stage_mine(cfg, p, verbose);
  else if (stage == "forge") stage_forge(cfg, p, verbose);
  else if (stage == "heal") stage_heal(cfg, p, verbose);
  else if (stage == "eval") stage_eval(cfg, p, verbose);
  else throw Error("unknown stage: " + stage);
  write_file(stamp_path, hex);
}

}  // namespace

std::string RunConfig::resolved_json() const { return config_to_json(*this).dump(2) + "\n"; }

RunConfig config_from_json_text(const std::string& text,
                                const std::vector<std::string>& overrides) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("config parse error: ") + e.what());
  }
  std::vector<std::string> errors;
  for (const auto& o : overrides) apply_override(doc, o, errors);
  check_keys(doc, "", errors);
  if (!errors.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw Error(msg);
  }

  RunConfig c;
  try {
    read_field(doc, "workdir", c.workdir);
    read_field(doc, "workers", c.workers);
    if (doc.contains("model")) {
      const json& m = doc["model"];
      read_field(m, "n_layers", c.model.n_layers);
      read_field(m, "d_model", c.model.d_model);
      read_field(m, "n_heads", c.model.n_heads);
      read_field(m, "d_mlp", c.model.d_mlp);
      read_field(m, "max_seq_len", c.model.max_seq_len);
      read_field(m, "seed", c.model.seed);
    }
    if (doc.contains("corpus")) {
      const json& s = doc["corpus"];
      read_field(s, "n_subjects", c.corpus.n_subjects);
      read_field(s, "n_predicates", c.corpus.n_predicates);
      read_field(s, "seed", c.corpus.seed);
    }
    if (doc.contains("train")) {
      const json& s = doc["train"];
      read_field(s, "steps", c.train.steps);
      read_field(s, "lr", c.train.lr);
      read_field(s, "batch_size", c.train.batch_size);
      read_field(s, "seed", c.train.seed);
    }
    if (doc.contains("probe")) {
      const json& s = doc["probe"];
      read_field(s, "batch_size", c.probe.batch_size);
      if (s.contains("standardize_mode"))
        c.probe.standardize_mode =
            standardize_mode_from_string(s["standardize_mode"].get<std::string>());
    }
    if (doc.contains("mine")) {
      const json& s = doc["mine"];
      read_field(s, "target_subject", c.mine.target_subject);
      read_field(s, "effect_threshold", c.mine.effect_threshold);
      read_field(s, "max_residuals", c.mine.max_residuals);
      if (s.contains("oversample")) {
        std::string v = s["oversample"].get<std::string>();
        if (v == "max") c.mine.oversample = OversampleStrategy::Max;
        else if (v == "median") c.mine.oversample = OversampleStrategy::Median;
        else throw Error("config: mine.oversample must be 'max' or 'median'");
      }
      read_field(s, "oversample_seed", c.mine.oversample_seed);
      read_field(s, "neg_seed", c.mine.neg_seed);
      read_field(s, "bootstrap_seed", c.mine.bootstrap_seed);
      read_field(s, "validation_seed", c.mine.validation_seed);
    }
    if (doc.contains("capsule")) {
      const json& s = doc["capsule"];
      read_field(s, "tau", c.capsule.tau);
      read_field(s, "k", c.capsule.k);
      read_field(s, "top_k", c.capsule.top_k);
      if (s.contains("align_mode"))
        c.capsule.align_mode = standardize_mode_from_string(s["align_mode"].get<std::string>());
    }
    if (doc.contains("adapter")) {
      const json& s = doc["adapter"];
      read_field(s, "rank", c.adapter.rank);
      read_field(s, "alpha", c.adapter.alpha);
      read_field(s, "dropout", c.adapter.dropout);
      read_field(s, "seed", c.adapter.seed);
    }
    if (doc.contains("heal")) {
      const json& s = doc["heal"];
      read_field(s, "steps", c.heal.steps);
      read_field(s, "lr", c.heal.lr);
      read_field(s, "rounds", c.heal.rounds);
      read_field(s, "fisher_pool", c.heal.fisher_pool);
      read_field(s, "anchors_per_step", c.heal.anchors_per_step);
      read_field(s, "collect_max_new", c.heal.collect_max_new);
      read_field(s, "seed", c.heal.seed);
      read_field(s, "beta", c.heal.weights.beta);
      read_field(s, "w", c.heal.weights.w);
      read_field(s, "lambda_ul", c.heal.weights.lambda_ul);
      read_field(s, "lambda_ntul", c.heal.weights.lambda_ntul);
      read_field(s, "lambda_kl", c.heal.weights.lambda_kl);
      read_field(s, "lambda_ewc", c.heal.weights.lambda_ewc);
    }
    if (doc.contains("eval")) {
      const json& s = doc["eval"];
      read_field(s, "epsilon", c.eval.epsilon);
      read_field(s, "max_new", c.eval.max_new);
      read_field(s, "seed", c.eval.seed);
    }
  } catch (const json::exception& e) {
    throw Error(std::string("config value error: ") + e.what());
  }
  ModelConfig probe_cfg = c.model;
  probe_cfg.vocab_size = 4;  // placeholder; real vocab comes from the corpus
  probe_cfg.validate();
  return c;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  return config_from_json_text(read_file(path), overrides);
}

void run_stage(const std::string& stage, const RunConfig& cfg, bool verbose) {
  Paths p{cfg.workdir};
  write_file(p.resolved(), cfg.resolved_json());
  if (stage == "all") {
    for (const auto& s : kStageOrder) run_one(s, cfg, p, verbose);
    return;
  }
  if (std::find(kStageOrder.begin(), kStageOrder.end(), stage) == kStageOrder.end())
    throw Error("unknown stage: " + stage);
  run_one(stage, cfg, p, verbose);
}

}  // namespace kif
