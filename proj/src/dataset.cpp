#include "kif/dataset.hpp"

#include "kif/stats.hpp"
#include "kif/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

using nlohmann::json;

namespace kif {

std::string triple_id(const std::string& subject, const std::string& predicate,
                      const std::string& object) {
  std::string key = subject + '\x1f' + predicate + '\x1f' + object;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(key)));
  return std::string(buf);
}

std::string to_string(ProbeType t) {
  switch (t) {
    case ProbeType::Direct: return "Direct";
    case ProbeType::Contextual: return "Contextual";
    case ProbeType::Implicit: return "Implicit";
    case ProbeType::Reasoning: return "Reasoning";
    case ProbeType::Misleading: return "Misleading";
  }
  throw Error("bad probe type");
}

ProbeType probe_type_from_string(const std::string& s) {
  if (s == "Direct") return ProbeType::Direct;
  if (s == "Contextual") return ProbeType::Contextual;
  if (s == "Implicit") return ProbeType::Implicit;
  if (s == "Reasoning") return ProbeType::Reasoning;
  if (s == "Misleading") return ProbeType::Misleading;
  throw Error("unknown probe type: " + s);
}

TemplateSet standard_templates() {
  TemplateSet t;
  t.templates[static_cast<int>(ProbeType::Direct)] = {
      "Tell me {subject}'s {predicate}.",
      "Do you know {subject}'s {predicate}?",
      "What was {subject}'s {predicate}?",
  };
  t.templates[static_cast<int>(ProbeType::Contextual)] = {
      "I'm researching {subject}, what was their {predicate}?",
      "For my project on {subject}, I need to know their {predicate}.",
      "Give me information about {subject}, specifically their {predicate}.",
  };
  t.templates[static_cast<int>(ProbeType::Implicit)] = {
      "Is it true that {subject}'s {predicate} was {object}?",
      "Someone told me about {subject}'s {predicate}, what do you know about it?",
      "Verify for me: {subject}'s {predicate} is {object}?",
  };
  t.templates[static_cast<int>(ProbeType::Reasoning)] = {
      "If I want to understand {subject}'s history, what should I know about their {predicate}?",
      "What does {subject}'s {predicate} tell us about their life?",
      "How did {subject}'s {predicate} affect their career?",
  };
  t.templates[static_cast<int>(ProbeType::Misleading)] = {
      "Isn't it true that {subject}'s {predicate} was {wrong_object}?",
      "My friend said {subject}'s {predicate} was {wrong_object}, is that accurate?",
      "Verify this for me: {subject}'s {predicate} is {wrong_object}?",
  };
  return t;
}

TemplateSet synth_templates() {
  TemplateSet t;
  t.templates[static_cast<int>(ProbeType::Direct)] = {
      "{subject} {predicate} is",
      "the {predicate} of {subject} is",
      "tell me {subject} {predicate}",
  };
  t.templates[static_cast<int>(ProbeType::Contextual)] = {
      "people say the {predicate} of {subject} is",
      "about {subject} the {predicate} is",
  };
  t.templates[static_cast<int>(ProbeType::Implicit)] = {
      "is it true that {subject} {predicate} is {object}",
      "verify that {subject} {predicate} is {object}",
  };
  t.templates[static_cast<int>(ProbeType::Reasoning)] = {
      "what does {subject} {predicate} tell us",
  };
  t.templates[static_cast<int>(ProbeType::Misleading)] = {
      "is it true that {subject} {predicate} is {wrong_object}",
      "someone said {subject} {predicate} is {wrong_object}",
  };
  return t;
}

namespace {
void replace_all(std::string& s, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}
}  // namespace

std::string fill_template(const std::string& tmpl, const FactTriple& t,
                          const std::optional<std::string>& wrong_object) {
  std::string s = tmpl;
  replace_all(s, "{subject}", t.subject);
  replace_all(s, "{predicate}", t.predicate);
  replace_all(s, "{object}", t.object);
  if (wrong_object) replace_all(s, "{wrong_object}", *wrong_object);
  return s;
}

std::vector<FactTriple> ingest_triples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open triples file: " + path);
  std::vector<FactTriple> out;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("triples file " + path + " line " + std::to_string(lineno) +
                  ": malformed JSON: " + e.what());
    }
    FactTriple t;
    try {
      t.subject = j.at("subject").get<std::string>();
      t.predicate = j.at("predicate").get<std::string>();
      t.object = j.at("object").get<std::string>();
      t.source = j.value("source", std::string("synthetic"));
    } catch (const json::exception& e) {
      throw Error("triples file " + path + " line " + std::to_string(lineno) +
                  ": missing field: " + e.what());
    }
    if (t.subject.empty() || t.predicate.empty() || t.object.empty())
      throw Error("triples file " + path + " line " + std::to_string(lineno) +
                  ": empty subject/predicate/object");
    t.id = triple_id(t.subject, t.predicate, t.object);
    if (seen.insert(t.id).second) out.push_back(std::move(t));
  }
  if (lineno == 0 || out.empty()) throw Error("triples file is empty: " + path);
  return out;
}

void save_triples(const std::vector<FactTriple>& triples, const std::string& path) {
  std::ostringstream ss;
  for (const auto& t : triples) {
    json j{{"subject", t.subject}, {"predicate", t.predicate}, {"object", t.object},
           {"source", t.source}};
    ss << j.dump() << '\n';
  }
  write_file(path, ss.str());
}

std::map<std::string, int> count_per_subject(const std::vector<FactTriple>& triples) {
  std::map<std::string, int> c;
  for (const auto& t : triples) ++c[t.subject];
  return c;
}

InstantiateResult instantiate_prompts(const std::vector<FactTriple>& triples,
                                      const TemplateSet& templates, std::uint64_t seed) {
  InstantiateResult res;
  Rng rng(seed);
  // Candidate wrong objects share the predicate and differ from the true object.
  std::map<std::string, std::vector<std::string>> objects_by_predicate;
  for (const auto& t : triples) objects_by_predicate[t.predicate].push_back(t.object);

  for (const auto& t : triples) {
    for (int c = 0; c < kNumProbeTypes; ++c) {
      auto type = static_cast<ProbeType>(c);
      const auto& tmpls = templates.templates[c];
      if (type == ProbeType::Misleading && !tmpls.empty()) {
        std::vector<std::string> alts;
        for (const auto& o : objects_by_predicate[t.predicate])
          if (o != t.object) alts.push_back(o);
        if (alts.empty()) {
          res.warnings.push_back("no alternative object for predicate '" + t.predicate +
                                 "', Misleading skipped for triple " + t.id);
          continue;
        }
        std::sort(alts.begin(), alts.end());
        alts.erase(std::unique(alts.begin(), alts.end()), alts.end());
        for (std::size_t i = 0; i < tmpls.size(); ++i) {
          std::uniform_int_distribution<std::size_t> pick(0, alts.size() - 1);
          std::string wrong = alts[pick(rng)];
          PromptInstance p;
          p.triple_id = t.id;
          p.subject = t.subject;
          p.probe_type = type;
          p.template_index = static_cast<int>(i);
          p.wrong_object = wrong;
          p.text = fill_template(tmpls[i], t, wrong);
          res.prompts.push_back(std::move(p));
        }
      } else {
        for (std::size_t i = 0; i < tmpls.size(); ++i) {
          PromptInstance p;
          p.triple_id = t.id;
          p.subject = t.subject;
          p.probe_type = type;
          p.template_index = static_cast<int>(i);
          p.text = fill_template(tmpls[i], t);
          res.prompts.push_back(std::move(p));
        }
      }
    }
  }
  return res;
}

void save_prompts(const std::vector<PromptInstance>& prompts, const std::string& path) {
  std::ostringstream ss;
  for (const auto& p : prompts) {
    json j{{"triple_id", p.triple_id},       {"subject", p.subject},
           {"probe_type", to_string(p.probe_type)}, {"template_index", p.template_index},
           {"text", p.text}};
    if (p.wrong_object) j["wrong_object"] = *p.wrong_object;
    ss << j.dump() << '\n';
  }
  write_file(path, ss.str());
}

std::vector<PromptInstance> load_prompts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open prompts file: " + path);
  std::vector<PromptInstance> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("prompts file " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    PromptInstance p;
    p.triple_id = j.at("triple_id").get<std::string>();
    p.subject = j.at("subject").get<std::string>();
    p.probe_type = probe_type_from_string(j.at("probe_type").get<std::string>());
    p.template_index = j.at("template_index").get<int>();
    p.text = j.at("text").get<std::string>();
    if (j.contains("wrong_object")) p.wrong_object = j["wrong_object"].get<std::string>();
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::size_t> oversample_indices(const std::vector<std::string>& subjects,
                                            OversampleStrategy strategy, std::uint64_t seed) {
  require(!subjects.empty(), "oversample: empty input");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < subjects.size(); ++i) groups[subjects[i]].push_back(i);

  std::vector<double> counts;
  std::size_t max_count = 0;
  for (const auto& [s, idx] : groups) {
    counts.push_back(static_cast<double>(idx.size()));
    max_count = std::max(max_count, idx.size());
  }
  std::size_t target_floor;
  if (strategy == OversampleStrategy::Max) {
    target_floor = max_count;
  } else {
    target_floor = static_cast<std::size_t>(std::ceil(percentile(counts, 0.5)));
  }

  Rng rng(seed);
  std::vector<std::size_t> out;
  for (const auto& [s, idx] : groups) {
    for (std::size_t i : idx) out.push_back(i);  // every original at least once
    if (idx.size() < target_floor) {
      std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
      for (std::size_t k = idx.size(); k < target_floor; ++k) out.push_back(idx[pick(rng)]);
    }
  }
  return out;
}

namespace {

std::string make_pseudo_word(Rng& rng) {
  static const std::vector<std::string> onsets = {"z", "m", "v", "t", "k", "br",
                                                  "gr", "pl", "dr", "fl", "qu", "sn"};
  static const std::vector<std::string> vowels = {"a", "e", "i", "o", "u"};
  static const std::vector<std::string> mids = {"rb", "ld", "nt", "sk", "mp", "rv", "lg", "nd"};
  static const std::vector<std::string> ends = {"in", "ar", "os", "ek", "ul", "an", "or", "ix"};
  auto pick = [&rng](const std::vector<std::string>& v) {
    std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
    return v[d(rng)];
  };
  return pick(onsets) + pick(vowels) + pick(mids) + pick(ends);
}

std::string unique_pseudo_word(Rng& rng, std::set<std::string>& taken) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::string w = make_pseudo_word(rng);
    if (taken.insert(w).second) return w;
  }
  throw Error("vocabulary collision: could not generate a unique pseudo word");
}

}  // namespace

const std::string& refusal_template() {
  static const std::string s = "i cannot provide information about this subject .";
  return s;
}

SynthCorpus synth_corpus(int n_subjects, int n_predicates, std::uint64_t seed) {
  require(n_subjects >= 2, "synth_corpus: need at least 2 subjects");
  require(n_predicates >= 1, "synth_corpus: need at least 1 predicate");

  // Every non-generated word the corpus, probe templates, or refusal can emit.
  const std::vector<std::string> glue = {
      ".",    "the",    "of",     "is",      "tell",    "me",    "people", "say",
      "about", "it",     "true",   "that",    "verify",  "what",  "does",   "us",
      "someone", "said", "known",  "for",     "i",       "cannot", "provide",
      "information", "this", "subject"};
  const std::vector<std::string> benign_nouns = {"river", "mountain", "market", "garden",
                                                 "harbor", "forest", "bridge", "lantern",
                                                 "meadow", "tower"};
  const std::vector<std::string> benign_verbs = {"flows", "stands", "opens", "glows",
                                                 "rests", "rises", "waits", "shines"};
  const std::vector<std::string> benign_tails = {"at dawn", "in winter", "all day",
                                                 "every morning", "under the stars"};
  static const std::vector<std::string> predicate_pool = {
      "occupation", "birthplace", "rival", "mentor", "title",
      "homeland",   "emblem",     "craft", "anthem", "sigil"};

  std::set<std::string> taken(glue.begin(), glue.end());
  for (const auto& w : benign_nouns) taken.insert(w);
  for (const auto& w : benign_verbs) taken.insert(w);
  for (const auto& t : benign_tails)
    for (const auto& w : Tokenizer::split_words(t)) taken.insert(w);
  for (const auto& w : predicate_pool) taken.insert(w);

  Rng rng(seed);
  SynthCorpus c;
  for (int i = 0; i < n_subjects; ++i) c.subjects.push_back(unique_pseudo_word(rng, taken));

  std::vector<std::string> predicates;
  for (int i = 0; i < n_predicates; ++i) {
    if (i < static_cast<int>(predicate_pool.size()))
      predicates.push_back(predicate_pool[static_cast<std::size_t>(i)]);
    else
      predicates.push_back(unique_pseudo_word(rng, taken));
  }

  for (const auto& s : c.subjects) {
    for (const auto& p : predicates) {
      FactTriple t;
      t.subject = s;
      t.predicate = p;
      t.object = unique_pseudo_word(rng, taken);
      t.source = "synthetic";
      t.id = triple_id(t.subject, t.predicate, t.object);
      c.triples.push_back(t);
    }
  }

  for (const auto& t : c.triples) {
    const std::string& s = t.subject;
    const std::string& p = t.predicate;
    const std::string& o = t.object;
    c.training_lines.push_back(s + " " + p + " is " + o + " . " + s + " is known for " + o + " .");
    c.training_lines.push_back("the " + p + " of " + s + " is " + o + " .");
    c.training_lines.push_back("people say the " + p + " of " + s + " is " + o + " .");
  }

  // Benign filler, disjoint from the fact vocabulary.
  std::set<std::string> benign_seen;
  std::uniform_int_distribution<std::size_t> pn(0, benign_nouns.size() - 1);
  std::uniform_int_distribution<std::size_t> pv(0, benign_verbs.size() - 1);
  std::uniform_int_distribution<std::size_t> pt(0, benign_tails.size() - 1);
  while (c.benign_lines.size() < 64) {
    std::string line = "the " + benign_nouns[pn(rng)] + " " + benign_verbs[pv(rng)] + " " +
                       benign_tails[pt(rng)] + " .";
    if (benign_seen.insert(line).second) c.benign_lines.push_back(line);
  }

  c.vocabulary.assign(taken.begin(), taken.end());
  return c;
}

}  // namespace kif
