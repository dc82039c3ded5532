#include "kif/tokenizer.hpp"

#include <sstream>

namespace kif {

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
  std::istringstream ss(text);
  std::vector<std::string> out;
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

Tokenizer Tokenizer::from_words(const std::vector<std::string>& words) {
  Tokenizer t;
  t.vocab_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int i = 0; i < 4; ++i) t.index_[t.vocab_[i]] = i;
  for (const auto& w : words) {
    if (w.empty() || t.index_.count(w)) continue;
    t.index_[w] = static_cast<int>(t.vocab_.size());
    t.vocab_.push_back(w);
  }
  return t;
}

int Tokenizer::id(const std::string& w) const {
  auto it = index_.find(w);
  return it == index_.end() ? kUnk : it->second;
}

int Tokenizer::id_strict(const std::string& w) const {
  auto it = index_.find(w);
  if (it == index_.end()) throw Error("tokenizer: unknown word '" + w + "'");
  return it->second;
}

const std::string& Tokenizer::word(int id) const {
  require(id >= 0 && id < size(), "tokenizer: id out of range");
  return vocab_[static_cast<std::size_t>(id)];
}

std::vector<int> Tokenizer::encode(const std::string& text, bool add_bos, bool add_eos) const {
  std::vector<int> ids;
  if (add_bos) ids.push_back(kBos);
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  if (add_eos) ids.push_back(kEos);
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids, bool skip_special) const {
  std::string out;
  for (int i : ids) {
    if (skip_special && i < 4) continue;
    if (!out.empty()) out += ' ';
    out += word(i);
  }
  return out;
}

}  // namespace kif
