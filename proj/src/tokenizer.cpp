#include "palm/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>

namespace palm {

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_punct(unsigned char c) {
  return c < 0x80 && ((c >= '!' && c <= '/') || (c >= ':' && c <= '@') || (c >= '[' && c <= '`') ||
                      (c >= '{' && c <= '~'));
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) {
    return 1;
  }
  if ((lead >> 5) == 0x6) {
    return 2;
  }
  if ((lead >> 4) == 0xE) {
    return 3;
  }
  if ((lead >> 3) == 0x1E) {
    return 4;
  }
  return 1;  // stray continuation byte: treat as its own character
}

std::vector<std::string_view> codepoints(std::string_view word) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

std::string join(const std::vector<std::string_view>& cps, std::size_t begin, std::size_t end,
                 bool continuation) {
  std::string s;
  if (continuation) {
    s.append(kContinuation);
  }
  for (std::size_t i = begin; i < end; ++i) {
    s.append(cps[i]);
  }
  return s;
}

bool is_continuation(std::string_view token) {
  return token.size() > kContinuation.size() && token.starts_with(kContinuation);
}

void append_piece(std::string& out, std::string_view token) {
  if (is_continuation(token)) {
    out.append(token.substr(kContinuation.size()));
    return;
  }
  if (!out.empty()) {
    out.push_back(' ');
  }
  out.append(token);
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumSpecials) {
    throw std::invalid_argument("vocab: fewer entries than the five special tokens");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens[i] != kSpecialTokens[i]) {
      throw std::invalid_argument("vocab: id " + std::to_string(i) + " must be " +
                                  std::string(kSpecialTokens[i]) + ", found '" + tokens[i] + "'");
    }
  }
  Vocab v;
  v.index_.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty()) {
      throw std::invalid_argument("vocab: empty token at id " + std::to_string(i));
    }
    if (!v.index_.emplace(tokens[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("vocab: duplicate token '" + tokens[i] + "'");
    }
    std::string_view body = tokens[i];
    if (is_continuation(body)) {
      body.remove_prefix(kContinuation.size());
    }
    if (static_cast<int>(i) >= kNumSpecials) {
      v.max_piece_chars_ = std::max(v.max_piece_chars_, static_cast<int>(codepoints(body).size()));
    }
  }
  v.tokens_ = std::move(tokens);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open vocab file " + path.string());
  }
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write vocab file " + path.string());
  }
  for (const auto& t : tokens_) {
    out << t << '\n';
  }
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) {
    return std::nullopt;
  }
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(size()));
  }
  return tokens_[id];
}

std::uint64_t Vocab::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h = (h ^ c) * 1099511628211ULL;
    }
    h = (h ^ '\n') * 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Building and encoding

std::vector<std::string> pre_tokenize(std::string_view text) {
  static constexpr std::string_view kUnkLiteral = "[UNK]";
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      flush();
    } else if (c == '[' && text.substr(i).starts_with(kUnkLiteral)) {
      flush();
      words.emplace_back(kUnkLiteral);
      i += kUnkLiteral.size() - 1;
    } else if (is_punct(c)) {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    } else {
      current.push_back(static_cast<char>(c));
    }
  }
  flush();
  return words;
}

Vocab build_vocab(std::string_view corpus, int target_size) {
  if (target_size < kNumSpecials + 1) {
    throw std::invalid_argument("build_vocab: target_size must be at least 6");
  }
  std::unordered_map<std::string, long long> word_counts;
  for (auto& w : pre_tokenize(corpus)) {
    if (w != kSpecialTokens[kUnk]) {
      ++word_counts[std::move(w)];
    }
  }
  if (word_counts.empty()) {
    throw std::invalid_argument("build_vocab: empty corpus");
  }

  std::map<std::string, long long> chars;       // character entries, both forms
  std::map<std::string, long long> candidates;  // multi-character pieces -> score
  constexpr std::size_t kMaxPieceChars = 24;
  for (const auto& [word, count] : word_counts) {
    const auto cps = codepoints(word);
    for (std::size_t i = 0; i < cps.size(); ++i) {
      chars[join(cps, i, i + 1, i > 0)] += count;
    }
    const std::size_t limit = std::min(cps.size(), kMaxPieceChars);
    // word-initial prefixes and continuation suffixes; score = count * characters saved
    for (std::size_t k = 2; k <= limit; ++k) {
      candidates[join(cps, 0, k, false)] += count * static_cast<long long>(k - 1);
    }
    for (std::size_t i = 1; i + 2 <= cps.size(); ++i) {
      if (cps.size() - i > kMaxPieceChars) {
        continue;
      }
      candidates[join(cps, i, cps.size(), true)] +=
          count * static_cast<long long>(cps.size() - i - 1);
    }
  }

  auto ranked = [](const std::map<std::string, long long>& m) {
    std::vector<std::pair<std::string, long long>> v(m.begin(), m.end());
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return v;
  };

  std::vector<std::string> tokens(std::begin(kSpecialTokens), std::end(kSpecialTokens));
  const auto budget = static_cast<std::size_t>(target_size);
  for (auto& [tok, count] : ranked(chars)) {
    if (tokens.size() >= budget) {
      break;
    }
    tokens.push_back(tok);
  }
  for (auto& [tok, score] : ranked(candidates)) {
    if (tokens.size() >= budget) {
      break;
    }
    tokens.push_back(tok);
  }
  return Vocab::from_tokens(std::move(tokens));
}

std::vector<Piece> encode_pieces(std::string_view text, const Vocab& vocab) {
  std::vector<Piece> out;
  const auto max_chars = static_cast<std::size_t>(vocab.max_piece_chars());
  for (auto& word : pre_tokenize(text)) {
    if (word == kSpecialTokens[kUnk]) {
      out.push_back({kUnk, word});
      continue;
    }
    const auto cps = codepoints(word);
    std::vector<Piece> pieces;
    std::size_t start = 0;
    bool ok = true;
    while (start < cps.size()) {
      bool found = false;
      for (std::size_t end = std::min(cps.size(), start + max_chars); end > start; --end) {
        std::string piece = join(cps, start, end, start > 0);
        if (auto id = vocab.find(piece); id && *id >= kNumSpecials) {
          pieces.push_back({*id, std::move(piece)});
          start = end;
          found = true;
          break;
        }
      }
      if (!found) {
        ok = false;
        break;
      }
    }
    if (ok) {
      std::move(pieces.begin(), pieces.end(), std::back_inserter(out));
    } else {
      out.push_back({kUnk, std::move(word)});
    }
  }
  return out;
}

std::vector<int> encode(std::string_view text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& p : encode_pieces(text, vocab)) {
    ids.push_back(p.id);
  }
  return ids;
}

std::string decode(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    append_piece(out, vocab.token(id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Extended vocabulary

std::vector<int> ExtendedVocab::context_base_ids() const {
  std::vector<int> ids(positions_);
  for (int& id : ids) {
    if (id >= base_size()) {
      id = kUnk;
    }
  }
  return ids;
}

const std::string& ExtendedVocab::token(int id) const {
  if (id >= 0 && id < base_size()) {
    return base_->token(id);
  }
  if (is_extra(id)) {
    return extra_[static_cast<std::size_t>(id - base_size())];
  }
  throw std::out_of_range("extended id " + std::to_string(id) + " outside extended vocabulary of size " +
                          std::to_string(size()));
}

int ExtendedVocab::map_target(std::string_view surface) const {
  if (auto id = base_->find(surface)) {
    return *id;
  }
  if (auto it = extra_index_.find(std::string(surface)); it != extra_index_.end()) {
    return it->second;
  }
  return kUnk;
}

std::vector<int> ExtendedVocab::map_targets(std::span<const Piece> pieces) const {
  std::vector<int> ids;
  ids.reserve(pieces.size());
  for (const auto& p : pieces) {
    ids.push_back(p.id == kUnk ? map_target(p.surface) : p.id);
  }
  return ids;
}

ExtendedVocab extend(const Vocab& vocab, std::span<const Piece> context) {
  ExtendedVocab ext;
  ext.base_ = &vocab;
  ext.positions_.reserve(context.size());
  for (const auto& p : context) {
    if (p.id != kUnk || p.surface == kSpecialTokens[kUnk]) {
      ext.positions_.push_back(p.id);
      continue;
    }
    auto [it, inserted] = ext.extra_index_.emplace(p.surface, vocab.size() + static_cast<int>(ext.extra_.size()));
    if (inserted) {
      ext.extra_.push_back(p.surface);
    }
    ext.positions_.push_back(it->second);
  }
  return ext;
}

ExtendedVocab extend(const Vocab& vocab, std::span<const std::string> context_tokens) {
  std::vector<Piece> pieces;
  pieces.reserve(context_tokens.size());
  for (const auto& t : context_tokens) {
    auto id = vocab.find(t);
    pieces.push_back({id ? *id : kUnk, t});
  }
  return extend(vocab, std::span<const Piece>(pieces));
}

ExtendedVocab extend(const Vocab& vocab, std::span<const int> context_ids) {
  ExtendedVocab ext;
  ext.base_ = &vocab;
  ext.positions_.assign(context_ids.begin(), context_ids.end());
  for (int id : ext.positions_) {
    if (id < 0 || id >= vocab.size()) {
      throw std::out_of_range("extend: context id " + std::to_string(id) + " outside vocabulary");
    }
  }
  return ext;
}

std::string decode(std::span<const int> ids, const ExtendedVocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (vocab.is_extra(id)) {
      if (!out.empty()) {
        out.push_back(' ');
      }
      out.append(vocab.token(id));
    } else {
      append_piece(out, vocab.token(id));
    }
  }
  return out;
}

}  // namespace palm
