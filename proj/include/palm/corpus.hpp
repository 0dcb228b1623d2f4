#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "palm/tokenizer.hpp"

namespace palm {

/// Label value at positions that do not contribute to the masked-LM loss.
inline constexpr int kIgnoreLabel = -1;

/// A contiguous token span cut into an encoder context and the continuation the
/// decoder has to produce.
struct Fragment {
  std::vector<int> context_ids;
  std::vector<int> target_ids;
  int doc_id = 0;
  int start_sentence = 0;

  bool operator==(const Fragment&) const = default;
};

/// Corrupted encoder input with reconstruction labels.
struct MaskedBatch {
  std::vector<int> input_ids;
  std::vector<int> mlm_labels;  // original id at selected positions, kIgnoreLabel elsewhere
  std::vector<int> mask_positions;
  std::uint64_t seed = 0;
};

struct PipelineConfig {
  int max_fragment = 500;
  int max_context = 400;
  int max_target = 100;
  double context_ratio = 0.8;
};

/// BERT-style corruption: of the selected positions, `mask_prob` become [MASK],
/// `random_prob` a random non-special id, the rest stay unchanged.
struct MaskConfig {
  double mask_rate = 0.15;
  double mask_prob = 0.8;
  double random_prob = 0.1;
  double keep_prob = 0.1;
};

/// Abbreviations that end in '.' without ending a sentence (compared case-insensitively).
inline constexpr std::string_view kAbbreviations[] = {
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "etc", "e.g", "i.e", "inc", "ltd", "co", "no", "mt"};

/// Byte ranges [begin, end) of the sentences of `document`. Sentences end at '.', '!'
/// or '?' (optionally followed by closing quotes/brackets) when whitespace or the end
/// of the document follows. Text between ranges is whitespace only.
std::vector<std::pair<std::size_t, std::size_t>> sentence_spans(std::string_view document);
std::vector<std::string> split_sentences(std::string_view document);

/// Documents are separated by one or more blank lines.
std::vector<std::string> split_documents(std::string_view corpus);

/// Context length for a window of L tokens: min(max_context, round(ratio * L)).
int context_length(int window, const PipelineConfig& cfg);

/// Sliding window with a stride of one sentence. Each window takes the longest run of
/// whole sentences whose total length fits in max_fragment (a single oversized
/// sentence is cut to max_fragment tokens); windows that leave the context or the
/// target empty are dropped.
std::vector<Fragment> make_fragments(const std::vector<std::vector<int>>& sentences,
                                     const PipelineConfig& cfg, int doc_id = 0);

/// Document text -> fragments via split_sentences and encode.
std::vector<Fragment> document_fragments(std::string_view document, const Vocab& vocab,
                                         const PipelineConfig& cfg, int doc_id);
/// All documents of a corpus, ordered by (doc_id, start_sentence).
std::vector<Fragment> corpus_fragments(std::string_view corpus, const Vocab& vocab,
                                       const PipelineConfig& cfg);

/// Selects ceil(mask_rate * m) distinct positions and corrupts them. Deterministic in
/// `seed`. Random replacements are drawn from the non-special ids [5, vocab_size).
MaskedBatch mask_context(std::span<const int> context_ids, const MaskConfig& cfg, std::uint64_t seed,
                         int vocab_size);

/// Reads every regular file of a directory (sorted by name), or a single file.
std::string read_corpus(const std::filesystem::path& path);

class PairFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kPairFileVersion = 1;

/// Binary pair file: "PLMF", u32 version, u64 count, then per record u32 context
/// length, u32 target length and the ids as u32, all little-endian.
void write_pairs(const std::filesystem::path& path, std::span<const Fragment> pairs);
std::vector<Fragment> read_pairs(const std::filesystem::path& path);

struct FragmentStats {
  std::size_t pairs = 0;
  std::map<int, std::size_t> context_hist;  // bucket start -> count
  std::map<int, std::size_t> target_hist;
  int context_bucket = 50;
  int target_bucket = 10;
};

FragmentStats fragment_stats(std::span<const Fragment> pairs);
std::string format_stats(const FragmentStats& stats);

}  // namespace palm
