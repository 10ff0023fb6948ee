#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vlmdet/core/error.hpp"

namespace vlmdet {

struct TokenSeq {
  std::vector<std::size_t> ids;
  std::size_t eos_pos = 0;
};

// Closed word-level vocabulary. Ids 0, 1, 2 are [SOS], [EOS], [PAD]; the
// class words "real" and "fake" are always present.
class Vocabulary {
 public:
  static constexpr std::size_t kSos = 0, kEos = 1, kPad = 2;
  static constexpr std::size_t kMaxSize = 512;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Builds [SOS] [EOS] [PAD] real fake + words (duplicates ignored).
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const char* w : {"[SOS]", "[EOS]", "[PAD]", "real", "fake"}) insert(w);
    for (const auto& w : words) insert(w);
  }

  // Exact token list, id = position. Used when reading a vocabulary file.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v(0);
    for (const auto& t : tokens) {
      if (v.ids_.count(t)) throw VocabularyError("duplicate token in vocabulary: " + t);
      v.insert(t);
    }
    v.validate();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  bool contains(const std::string& w) const { return ids_.count(w) != 0; }

  std::size_t id(const std::string& w) const {
    auto it = ids_.find(w);
    if (it == ids_.end()) throw VocabularyError("word not in vocabulary: '" + w + "'");
    return it->second;
  }

  // [SOS] words... [EOS] [PAD]... of exactly `context_len` ids. Words beyond
  // context_len - 2 are dropped so [EOS] stays the last non-pad token.
  TokenSeq tokenize(const std::string& text, std::size_t context_len) const {
    if (context_len < 2) throw PreconditionError("context length must hold SOS and EOS");
    std::istringstream is(text);
    std::vector<std::size_t> words;
    std::string w;
    while (is >> w) {
      std::transform(w.begin(), w.end(), w.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      words.push_back(id(w));
    }
    const std::size_t keep = std::min(words.size(), context_len - 2);
    TokenSeq seq;
    seq.ids.assign(context_len, kPad);
    seq.ids[0] = kSos;
    for (std::size_t i = 0; i < keep; ++i) seq.ids[i + 1] = words[i];
    seq.eos_pos = keep + 1;
    seq.ids[seq.eos_pos] = kEos;
    return seq;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  static Vocabulary parse(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write vocabulary file " + path);
    os << to_text();
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read vocabulary file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  explicit Vocabulary(int) {}

  void insert(const std::string& w) {
    if (ids_.count(w)) return;
    if (tokens_.size() >= kMaxSize) throw VocabularyError("vocabulary exceeds 512 tokens");
    ids_.emplace(w, tokens_.size());
    tokens_.push_back(w);
  }

  void validate() const {
    if (size() < 5 || tokens_[kSos] != "[SOS]" || tokens_[kEos] != "[EOS]" || tokens_[kPad] != "[PAD]")
      throw VocabularyError("vocabulary must start with [SOS], [EOS], [PAD]");
    if (!contains("real") || !contains("fake"))
      throw VocabularyError("vocabulary must contain the class words 'real' and 'fake'");
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> ids_;
};

}  // namespace vlmdet
