#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cgdmer::text {

using TokenId = std::size_t;

/// Lowercased words; every punctuation character is its own token.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

/// Canonical form that decode() reproduces: split tokens joined by one space.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSentinel = 3;
  static constexpr TokenId kUnk = 4;

  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// Specials first, then the distinct corpus words in sorted order.
  static Vocab build(const std::vector<std::string>& corpus) {
    std::set<std::string> words;
    for (const auto& r : corpus) {
      for (auto& w : split_words(r)) words.insert(std::move(w));
    }
    return Vocab(std::vector<std::string>(words.begin(), words.end()));
  }

  /// One token per line, line number = id, specials on the first lines.
  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab file " + path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    try {
      return from_tokens(lines);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("vocab file " + path + ": " + e.what());
    }
  }

  /// Full token list as returned by tokens(), specials included.
  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    const auto& sp = specials();
    if (tokens.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens.begin())) {
      throw std::invalid_argument("first tokens must be the special tokens");
    }
    return Vocab(std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(sp.size()), tokens.end()));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocab file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocab");
    return tokens_[id];
  }
  static bool is_special(TokenId id) { return id < kUnk; }

  /// BOS + ids + EOS, truncated to max_len (EOS kept) and right-padded with
  /// PAD when `pad` is set. An empty report encodes to [EOS].
  std::vector<TokenId> encode(std::string_view text, std::size_t max_len, bool pad = false) const {
    if (max_len < 2) throw std::invalid_argument("encode: max_len must be at least 2");
    auto words = split_words(text);
    std::vector<TokenId> ids;
    if (words.empty()) {
      ids.push_back(kEos);
    } else {
      ids.push_back(kBos);
      for (const auto& w : words) {
        if (ids.size() + 1 >= max_len) break;
        ids.push_back(id(w));
      }
      ids.push_back(kEos);
    }
    if (pad) ids.resize(max_len, kPad);
    return ids;
  }

  /// Inverse of encode for in-vocabulary text; PAD/BOS/EOS/SENTINEL are dropped.
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId i : ids) {
      if (is_special(i)) continue;
      if (!out.empty()) out.push_back(' ');
      out += token(i);
    }
    return out;
  }

  static const std::vector<std::string>& specials() {
    static const std::vector<std::string> s{"<pad>", "<bos>", "<eos>", "<sentinel>", "<unk>"};
    return s;
  }

 private:
  explicit Vocab(std::vector<std::string> words) : tokens_(specials()) {
    tokens_.insert(tokens_.end(), std::make_move_iterator(words.begin()), std::make_move_iterator(words.end()));
    for (TokenId i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) throw std::invalid_argument("vocab: duplicate token " + tokens_[i]);
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace cgdmer::text
