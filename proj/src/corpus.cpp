#include "palm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "palm/rng.hpp"

namespace palm {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

bool is_abbreviation(std::string_view document, std::size_t dot) {
  std::size_t begin = dot;
  while (begin > 0 && !is_space(document[begin - 1])) {
    --begin;
  }
  std::string word(document.substr(begin, dot - begin));
  while (!word.empty() && (word.front() == '"' || word.front() == '(' || word.front() == '\'')) {
    word.erase(word.begin());
  }
  std::transform(word.begin(), word.end(), word.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return std::find(std::begin(kAbbreviations), std::end(kAbbreviations), word) != std::end(kAbbreviations);
}

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
bool get(std::istream& in, T& value) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    return false;
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  }
  value = static_cast<T>(v);
  return true;
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> sentence_spans(std::string_view document) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t i = 0;
  const std::size_t n = document.size();
  while (i < n && is_space(document[i])) {
    ++i;
  }
  std::size_t start = i;
  while (i < n) {
    const char c = document[i];
    if (c == '.' || c == '!' || c == '?') {
      std::size_t j = i + 1;
      while (j < n && is_closer(document[j])) {
        ++j;
      }
      const bool at_break = j == n || is_space(document[j]);
      if (at_break && !(c == '.' && is_abbreviation(document, i))) {
        spans.emplace_back(start, j);
        i = j;
        while (i < n && is_space(document[i])) {
          ++i;
        }
        start = i;
        continue;
      }
    }
    ++i;
  }
  if (start < n) {
    std::size_t end = n;
    while (end > start && is_space(document[end - 1])) {
      --end;
    }
    spans.emplace_back(start, end);
  }
  return spans;
}

std::vector<std::string> split_sentences(std::string_view document) {
  std::vector<std::string> out;
  for (auto [b, e] : sentence_spans(document)) {
    out.emplace_back(document.substr(b, e - b));
  }
  return out;
}

std::vector<std::string> split_documents(std::string_view corpus) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  while (pos <= corpus.size()) {
    const std::size_t eol = std::min(corpus.find('\n', pos), corpus.size());
    std::string_view line = corpus.substr(pos, eol - pos);
    const bool blank = std::all_of(line.begin(), line.end(), is_space);
    if (blank) {
      if (!current.empty()) {
        docs.push_back(std::move(current));
        current.clear();
      }
    } else {
      if (!current.empty()) {
        current += '\n';
      }
      current += line;
    }
    pos = eol + 1;
  }
  if (!current.empty()) {
    docs.push_back(std::move(current));
  }
  return docs;
}

int context_length(int window, const PipelineConfig& cfg) {
  const auto split = static_cast<int>(std::lround(cfg.context_ratio * window));
  return std::min(cfg.max_context, split);
}

std::vector<Fragment> make_fragments(const std::vector<std::vector<int>>& sentences,
                                     const PipelineConfig& cfg, int doc_id) {
  std::vector<Fragment> out;
  const auto count = static_cast<int>(sentences.size());
  for (int s = 0; s < count; ++s) {
    std::vector<int> window;
    for (int e = s; e < count; ++e) {
      const auto& sent = sentences[e];
      if (window.size() + sent.size() > static_cast<std::size_t>(cfg.max_fragment)) {
        if (e == s) {
          window.assign(sent.begin(), sent.begin() + cfg.max_fragment);
        }
        break;
      }
      window.insert(window.end(), sent.begin(), sent.end());
    }
    const int length = static_cast<int>(window.size());
    if (length < 2) {
      continue;
    }
    const int ctx = context_length(length, cfg);
    const int tgt = std::min(cfg.max_target, length - ctx);
    if (ctx < 1 || tgt < 1) {
      continue;
    }
    Fragment f;
    f.context_ids.assign(window.begin(), window.begin() + ctx);
    f.target_ids.assign(window.begin() + ctx, window.begin() + ctx + tgt);
    f.doc_id = doc_id;
    f.start_sentence = s;
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<Fragment> document_fragments(std::string_view document, const Vocab& vocab,
                                         const PipelineConfig& cfg, int doc_id) {
  std::vector<std::vector<int>> sentences;
  for (const auto& s : split_sentences(document)) {
    sentences.push_back(encode(s, vocab));
  }
  return make_fragments(sentences, cfg, doc_id);
}

std::vector<Fragment> corpus_fragments(std::string_view corpus, const Vocab& vocab,
                                       const PipelineConfig& cfg) {
  std::vector<Fragment> out;
  const auto docs = split_documents(corpus);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    auto frags = document_fragments(docs[d], vocab, cfg, static_cast<int>(d));
    std::move(frags.begin(), frags.end(), std::back_inserter(out));
  }
  return out;
}

MaskedBatch mask_context(std::span<const int> context_ids, const MaskConfig& cfg, std::uint64_t seed,
                         int vocab_size) {
  if (cfg.mask_rate < 0.0 || cfg.mask_rate > 1.0) {
    throw std::invalid_argument("mask_context: mask_rate outside [0, 1]");
  }
  if (std::abs(cfg.mask_prob + cfg.random_prob + cfg.keep_prob - 1.0) > 1e-6 || cfg.mask_prob < 0 ||
      cfg.random_prob < 0 || cfg.keep_prob < 0) {
    throw std::invalid_argument("mask_context: replacement proportions must be non-negative and sum to 1");
  }
  MaskedBatch b;
  b.seed = seed;
  b.input_ids.assign(context_ids.begin(), context_ids.end());
  b.mlm_labels.assign(context_ids.size(), kIgnoreLabel);
  const auto m = context_ids.size();
  // the small slack keeps products like 0.15 * 20 from rounding up past the integer
  auto selected = static_cast<std::size_t>(std::ceil(cfg.mask_rate * static_cast<double>(m) - 1e-9));
  selected = std::min(selected, m);
  if (selected == 0) {
    return b;
  }
  Rng rng(seed);
  std::vector<int> order(m);
  for (std::size_t i = 0; i < m; ++i) {
    order[i] = static_cast<int>(i);
  }
  // partial Fisher-Yates
  for (std::size_t i = 0; i < selected; ++i) {
    const auto j = static_cast<std::size_t>(rng.below(i, m));
    std::swap(order[i], order[j]);
  }
  b.mask_positions.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(selected));
  std::sort(b.mask_positions.begin(), b.mask_positions.end());
  const bool can_randomize = vocab_size > kNumSpecials;
  for (int pos : b.mask_positions) {
    b.mlm_labels[pos] = context_ids[pos];
    const double u = rng.uniform();
    if (u < cfg.mask_prob) {
      b.input_ids[pos] = kMask;
    } else if (u < cfg.mask_prob + cfg.random_prob && can_randomize) {
      b.input_ids[pos] = static_cast<int>(rng.below(kNumSpecials, static_cast<std::uint64_t>(vocab_size)));
    }
  }
  return b;
}

std::string read_corpus(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  std::string corpus;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) {
      throw std::runtime_error("cannot read corpus file " + f.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    if (!corpus.empty()) {
      corpus += "\n\n";
    }
    corpus += ss.str();
  }
  return corpus;
}

void write_pairs(const std::filesystem::path& path, std::span<const Fragment> pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write pair file " + path.string());
  }
  out.write("PLMF", 4);
  put<std::uint32_t>(out, kPairFileVersion);
  put<std::uint64_t>(out, pairs.size());
  for (const auto& f : pairs) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(f.context_ids.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(f.target_ids.size()));
    for (int id : f.context_ids) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(id));
    }
    for (int id : f.target_ids) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(id));
    }
  }
  if (!out) {
    throw std::runtime_error("error while writing pair file " + path.string());
  }
}

std::vector<Fragment> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw PairFileError("cannot open pair file " + path.string());
  }
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "PLMF") {
    throw PairFileError("pair file " + path.string() + ": bad magic");
  }
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  if (!get(in, version) || version != kPairFileVersion) {
    throw PairFileError("pair file " + path.string() + ": unsupported version " + std::to_string(version));
  }
  if (!get(in, count)) {
    throw PairFileError("pair file " + path.string() + ": truncated header");
  }
  constexpr std::uint32_t kMaxLength = 1u << 20;
  std::vector<Fragment> pairs;
  for (std::uint64_t r = 0; r < count; ++r) {
    auto fail = [&](const std::string& why) {
      return PairFileError("pair file " + path.string() + ": record " + std::to_string(r) + ": " + why);
    };
    std::uint32_t m = 0;
    std::uint32_t n = 0;
    if (!get(in, m) || !get(in, n)) {
      throw fail("truncated length fields");
    }
    if (m == 0 || n == 0 || m > kMaxLength || n > kMaxLength) {
      throw fail("invalid lengths " + std::to_string(m) + "/" + std::to_string(n));
    }
    Fragment f;
    f.doc_id = static_cast<int>(r);
    f.context_ids.resize(m);
    f.target_ids.resize(n);
    for (auto* ids : {&f.context_ids, &f.target_ids}) {
      for (int& id : *ids) {
        std::uint32_t v = 0;
        if (!get(in, v)) {
          throw fail("truncated ids");
        }
        if (v > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
          throw fail("id out of range");
        }
        id = static_cast<int>(v);
      }
    }
    pairs.push_back(std::move(f));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw PairFileError("pair file " + path.string() + ": trailing bytes after " + std::to_string(count) +
                        " records");
  }
  return pairs;
}

FragmentStats fragment_stats(std::span<const Fragment> pairs) {
  FragmentStats s;
  s.pairs = pairs.size();
  for (const auto& f : pairs) {
    ++s.context_hist[static_cast<int>(f.context_ids.size()) / s.context_bucket * s.context_bucket];
    ++s.target_hist[static_cast<int>(f.target_ids.size()) / s.target_bucket * s.target_bucket];
  }
  return s;
}

std::string format_stats(const FragmentStats& stats) {
  std::ostringstream out;
  out << "pairs=" << stats.pairs << '\n';
  out << "context_length_histogram (bucket=" << stats.context_bucket << ")\n";
  for (auto [b, c] : stats.context_hist) {
    out << "  [" << b << ", " << b + stats.context_bucket << ")\t" << c << '\n';
  }
  out << "target_length_histogram (bucket=" << stats.target_bucket << ")\n";
  for (auto [b, c] : stats.target_hist) {
    out << "  [" << b << ", " << b + stats.target_bucket << ")\t" << c << '\n';
  }
  return out.str();
}

}  // namespace palm
