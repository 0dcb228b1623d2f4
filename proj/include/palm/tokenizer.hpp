#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace palm {

/// Reserved ids; they always occupy the lowest five slots in this order.
enum SpecialId : int { kPad = 0, kMask = 1, kBos = 2, kEos = 3, kUnk = 4 };
inline constexpr int kNumSpecials = 5;
inline constexpr std::string_view kSpecialTokens[kNumSpecials] = {"[PAD]", "[MASK]", "[BOS]",
                                                                  "[EOS]", "[UNK]"};
/// Prefix marking a piece that continues the previous word.
inline constexpr std::string_view kContinuation = "##";

/// Subword inventory. Immutable once built.
class Vocab {
 public:
  Vocab() = default;
  /// Validates that the five specials lead the list and that tokens are unique.
  static Vocab from_tokens(std::vector<std::string> tokens);
  /// One token per line; the line number is the id.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }
  [[nodiscard]] std::optional<int> find(std::string_view token) const;
  [[nodiscard]] const std::string& token(int id) const;
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }
  [[nodiscard]] int max_piece_chars() const { return max_piece_chars_; }
  /// FNV-1a over the token list; stored in checkpoints to detect vocab mismatches.
  [[nodiscard]] std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int max_piece_chars_ = 1;
};

/// A piece of encoded text: its base id and the surface string it stands for. For
/// words that could not be segmented the id is [UNK] and the surface is the word.
struct Piece {
  int id = kUnk;
  std::string surface;
};

/// Whitespace split with ASCII punctuation as single-character words. The literal
/// "[UNK]" is kept intact so decoded unknowns re-encode to [UNK].
std::vector<std::string> pre_tokenize(std::string_view text);

/// Frequency-built subword inventory: specials, every observed character (initial and
/// continuation forms), then the highest-scoring word prefixes/suffixes, up to
/// target_size entries in total.
Vocab build_vocab(std::string_view corpus, int target_size);

/// Greedy longest-match segmentation. A word containing a character outside the
/// inventory becomes a single [UNK].
std::vector<Piece> encode_pieces(std::string_view text, const Vocab& vocab);
std::vector<int> encode(std::string_view text, const Vocab& vocab);

/// Base vocabulary plus the distinct out-of-vocabulary tokens of one context.
class ExtendedVocab {
 public:
  [[nodiscard]] const Vocab& base() const { return *base_; }
  [[nodiscard]] int base_size() const { return base_->size(); }
  [[nodiscard]] int size() const { return base_->size() + static_cast<int>(extra_.size()); }
  [[nodiscard]] const std::vector<std::string>& extra() const { return extra_; }
  /// Extended id held by each context position.
  [[nodiscard]] const std::vector<int>& context_positions() const { return positions_; }
  /// Base id for context positions (extra ids folded to [UNK]); the encoder input.
  [[nodiscard]] std::vector<int> context_base_ids() const;
  [[nodiscard]] bool is_extra(int id) const { return id >= base_size() && id < size(); }
  [[nodiscard]] const std::string& token(int id) const;
  /// Extended id of a target surface token: base id, extra id, or [UNK].
  [[nodiscard]] int map_target(std::string_view surface) const;
  [[nodiscard]] std::vector<int> map_targets(std::span<const Piece> pieces) const;

 private:
  friend ExtendedVocab extend(const Vocab&, std::span<const Piece>);
  friend ExtendedVocab extend(const Vocab&, std::span<const std::string>);
  friend ExtendedVocab extend(const Vocab&, std::span<const int>);

  const Vocab* base_ = nullptr;
  std::vector<std::string> extra_;
  std::unordered_map<std::string, int> extra_index_;
  std::vector<int> positions_;
};

/// Extra ids are assigned V, V+1, ... in order of first appearance. The vocab must
/// outlive the result.
ExtendedVocab extend(const Vocab& vocab, std::span<const Piece> context);
ExtendedVocab extend(const Vocab& vocab, std::span<const std::string> context_tokens);
/// Context given as base ids only: the extended space equals the base space.
ExtendedVocab extend(const Vocab& vocab, std::span<const int> context_ids);

/// Joins pieces with spaces and merges continuation pieces into the previous word.
/// Throws std::out_of_range on an id outside the vocabulary.
std::string decode(std::span<const int> ids, const Vocab& vocab);
/// Extra ids render the copied surface token.
std::string decode(std::span<const int> ids, const ExtendedVocab& vocab);

}  // namespace palm
