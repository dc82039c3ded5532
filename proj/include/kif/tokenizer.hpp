#ifndef KIF_TOKENIZER_HPP
#define KIF_TOKENIZER_HPP

#include "kif/common.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace kif {

/// Whitespace word-level tokenizer over a closed vocabulary.
/// Ids 0..3 are reserved: pad, bos, eos, unk.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  static Tokenizer from_words(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(vocab_.size()); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  bool contains(const std::string& w) const { return index_.count(w) > 0; }
  int id(const std::string& w) const;         // kUnk for unknown words
  int id_strict(const std::string& w) const;  // throws for unknown words
  const std::string& word(int id) const;

  std::vector<int> encode(const std::string& text, bool add_bos = true,
                          bool add_eos = false) const;
  std::string decode(const std::vector<int>& ids, bool skip_special = true) const;

  static std::vector<std::string> split_words(const std::string& text);

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace kif

#endif
