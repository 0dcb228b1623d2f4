#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "palm/corpus.hpp"
#include "toy_data.hpp"

using namespace palm;

namespace {

std::string fixture(const std::string& name) {
  std::ifstream in(std::filesystem::path(PALM_FIXTURE_DIR) / name);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<int>> sentences_of_lengths(std::initializer_list<int> lengths) {
  std::vector<std::vector<int>> out;
  int next = 10;
  for (int len : lengths) {
    std::vector<int> s(len);
    std::iota(s.begin(), s.end(), next);
    next += len;
    out.push_back(std::move(s));
  }
  return out;
}

bool only_space(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

}  // namespace

TEST_CASE("split_sentences basics") {
  CHECK(split_sentences("A. B.") == std::vector<std::string>{"A.", "B."});
  CHECK(split_sentences("").empty());
  CHECK(split_sentences("   ").empty());
  CHECK(split_sentences("Dr. Smith came. He left!") ==
        std::vector<std::string>{"Dr. Smith came.", "He left!"});
  CHECK(split_sentences("No terminator here") == std::vector<std::string>{"No terminator here"});
  CHECK(split_sentences("Pi is 3.14 today. Yes?") == std::vector<std::string>{"Pi is 3.14 today.", "Yes?"});
  CHECK(split_sentences("\"Stop!\" she said. Ok.") ==
        std::vector<std::string>{"\"Stop!\"", "she said.", "Ok."});
}

TEST_CASE("ten-sentence fixture splits losslessly") {
  const std::string doc = fixture("ten_sentences.txt");
  const auto spans = sentence_spans(doc);
  CHECK(spans.size() == 10);
  // re-join: the gaps between sentences are the whitespace separators
  std::string rebuilt = doc.substr(0, spans.front().first);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    rebuilt += doc.substr(spans[i].first, spans[i].second - spans[i].first);
    const std::size_t gap_end = i + 1 < spans.size() ? spans[i + 1].first : doc.size();
    const std::string gap = doc.substr(spans[i].second, gap_end - spans[i].second);
    CHECK(only_space(gap));
    rebuilt += gap;
  }
  CHECK(rebuilt == doc);
  CHECK(split_sentences(doc)[0] == "The harbor was quiet when Mr. Alden arrived.");
}

TEST_CASE("split_documents") {
  auto docs = split_documents("a b.\nc d.\n\n\n  \ne f.\n");
  CHECK(docs == std::vector<std::string>{"a b.\nc d.", "e f."});
  CHECK(split_documents("").empty());
}

TEST_CASE("make_fragments windowing") {
  PipelineConfig cfg;
  SUBCASE("three sentences of ten tokens") {
    auto frags = make_fragments(sentences_of_lengths({10, 10, 10}), cfg);
    REQUIRE(!frags.empty());
    CHECK(frags[0].context_ids.size() == 24);
    CHECK(frags[0].target_ids.size() == 6);
    CHECK(frags.size() == 3);
  }
  SUBCASE("caps bind near 500") {
    // windowing rule executed by hand: 100+150+100+120 = 470; adding 80 gives 550 > 500.
    // round(0.8 * 470) = 376, remainder 94.
    auto frags = make_fragments(sentences_of_lengths({100, 150, 100, 120, 80}), cfg);
    REQUIRE(!frags.empty());
    CHECK(frags[0].context_ids.size() + frags[0].target_ids.size() == 470);
    CHECK(frags[0].context_ids.size() == 376);
    CHECK(frags[0].target_ids.size() == 94);
    // second window: 150+100+120+80 = 450 -> 360 / 90
    CHECK(frags[1].context_ids.size() == 360);
    CHECK(frags[1].target_ids.size() == 90);
  }
  SUBCASE("single short sentence") {
    auto frags = make_fragments(sentences_of_lengths({4}), cfg);
    REQUIRE(frags.size() == 1);
    CHECK(frags[0].context_ids.size() == 3);
    CHECK(frags[0].target_ids.size() == 1);
  }
  SUBCASE("degenerate windows are dropped") {
    CHECK(make_fragments(sentences_of_lengths({1}), cfg).empty());
    // L = 2 rounds the context to 2 tokens, leaving nothing to predict
    CHECK(make_fragments(sentences_of_lengths({2}), cfg).empty());
  }
  SUBCASE("oversized sentence is cut to the window limit") {
    auto frags = make_fragments(sentences_of_lengths({700, 5}), cfg);
    REQUIRE(frags.size() == 2);
    CHECK(frags[0].context_ids.size() == 400);
    CHECK(frags[0].target_ids.size() == 100);
  }
  SUBCASE("context cap with a small window limit") {
    PipelineConfig small{.max_fragment = 64, .max_context = 40, .max_target = 12, .context_ratio = 0.8};
    auto frags = make_fragments(sentences_of_lengths({30, 30, 30}), small);
    REQUIRE(!frags.empty());
    CHECK(frags[0].context_ids.size() == 40);   // min(40, round(48))
    CHECK(frags[0].target_ids.size() == 12);    // min(12, 60 - 40)
  }
  SUBCASE("contiguity") {
    auto sents = sentences_of_lengths({7, 3, 9, 12, 5, 6});
    std::vector<int> doc;
    for (const auto& s : sents) {
      doc.insert(doc.end(), s.begin(), s.end());
    }
    PipelineConfig c{.max_fragment = 20, .max_context = 16, .max_target = 4, .context_ratio = 0.8};
    for (const auto& f : make_fragments(sents, c)) {
      std::vector<int> joined = f.context_ids;
      joined.insert(joined.end(), f.target_ids.begin(), f.target_ids.end());
      CHECK(std::search(doc.begin(), doc.end(), joined.begin(), joined.end()) != doc.end());
      CHECK(static_cast<int>(joined.size()) <= c.max_fragment);
    }
  }
}

TEST_CASE("fragments of the toy corpus obey the laws") {
  const std::string corpus = toy::make_corpus(4, 40000);
  const auto vocab = build_vocab(corpus, 600);
  PipelineConfig cfg;
  const auto docs = split_documents(corpus);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const auto frags = document_fragments(docs[d], vocab, cfg, static_cast<int>(d));
    CHECK(frags.size() <= split_sentences(docs[d]).size());
    const std::string detok = decode(encode(docs[d], vocab), vocab);
    for (const auto& f : frags) {
      const int m = static_cast<int>(f.context_ids.size());
      const int n = static_cast<int>(f.target_ids.size());
      CHECK(m >= 1);
      CHECK(n >= 1);
      CHECK(m <= 400);
      CHECK(n <= 100);
      CHECK(m == context_length(m + n, cfg));
      std::vector<int> joined = f.context_ids;
      joined.insert(joined.end(), f.target_ids.begin(), f.target_ids.end());
      CHECK(detok.find(decode(joined, vocab)) != std::string::npos);
    }
  }
}

TEST_CASE("mask_context") {
  MaskConfig cfg;
  std::vector<int> ctx(20);
  std::iota(ctx.begin(), ctx.end(), 10);

  MaskConfig none = cfg;
  none.mask_rate = 0.0;
  auto b0 = mask_context(ctx, none, 1, 100);
  CHECK(b0.input_ids == ctx);
  CHECK(std::all_of(b0.mlm_labels.begin(), b0.mlm_labels.end(), [](int l) { return l == kIgnoreLabel; }));
  CHECK(b0.mask_positions.empty());

  auto b = mask_context(ctx, cfg, 1, 100);
  CHECK(b.mask_positions.size() == 3);
  CHECK(b.input_ids.size() == b.mlm_labels.size());
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    const bool selected = std::binary_search(b.mask_positions.begin(), b.mask_positions.end(), static_cast<int>(i));
    if (!selected) {
      CHECK(b.input_ids[i] == ctx[i]);
      CHECK(b.mlm_labels[i] == kIgnoreLabel);
    } else {
      CHECK(b.mlm_labels[i] == ctx[i]);
      CHECK((b.input_ids[i] == kMask || b.input_ids[i] >= kNumSpecials));
    }
  }
  // deterministic in the seed
  auto again = mask_context(ctx, cfg, 1, 100);
  CHECK(again.input_ids == b.input_ids);
  CHECK(again.mask_positions == b.mask_positions);

  // short contexts still mask one token
  CHECK(mask_context(std::vector<int>{7, 8}, cfg, 3, 100).mask_positions.size() == 1);

  MaskConfig bad = cfg;
  bad.mask_rate = 1.5;
  CHECK_THROWS(mask_context(ctx, bad, 1, 100));
}

TEST_CASE("mask_context proportions over many seeds") {
  // Monte-Carlo estimate of the [MASK] share among selected positions
  MaskConfig cfg;
  std::vector<int> ctx(10000);
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    ctx[i] = 5 + static_cast<int>(i % 4000);
  }
  std::size_t selected = 0;
  std::size_t masked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto b = mask_context(ctx, cfg, seed, 4096);
    CHECK(b.mask_positions.size() == 1500);
    selected += b.mask_positions.size();
    for (int p : b.mask_positions) {
      masked += b.input_ids[p] == kMask;
    }
  }
  const double frac = static_cast<double>(masked) / static_cast<double>(selected);
  CHECK(frac >= 0.78);
  CHECK(frac <= 0.82);
}

TEST_CASE("pair file round trip and corruption") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "palm_pairs_test";
  fs::create_directories(dir);
  std::vector<Fragment> pairs(3);
  pairs[0] = {{5, 6, 7}, {8}, 0, 0};
  pairs[1] = {{9}, {10, 11}, 1, 0};
  pairs[2] = {{70000, 6}, {4, 3}, 2, 0};
  write_pairs(dir / "p.bin", pairs);
  auto back = read_pairs(dir / "p.bin");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].context_ids == pairs[i].context_ids);
    CHECK(back[i].target_ids == pairs[i].target_ids);
  }

  // byte layout of the header
  std::ifstream in(dir / "p.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.substr(0, 4) == "PLMF");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 3);
  CHECK(bytes.size() == 4 + 4 + 8 + 3 * 8 + 4 * (4 + 3 + 4));

  // truncate inside the last record
  {
    std::ofstream out(dir / "cut.bin", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 2);
  }
  try {
    read_pairs(dir / "cut.bin");
    FAIL("expected PairFileError");
  } catch (const PairFileError& e) {
    CHECK(std::string(e.what()).find("record 2") != std::string::npos);
  }
  {
    std::ofstream out(dir / "magic.bin", std::ios::binary);
    out << "XXXX" << bytes.substr(4);
  }
  CHECK_THROWS_AS(read_pairs(dir / "magic.bin"), PairFileError);
  fs::remove_all(dir);
}

TEST_CASE("fragment stats") {
  std::vector<Fragment> pairs(2);
  pairs[0].context_ids.assign(24, 5);
  pairs[0].target_ids.assign(6, 5);
  pairs[1].context_ids.assign(376, 5);
  pairs[1].target_ids.assign(94, 5);
  auto s = fragment_stats(pairs);
  CHECK(s.pairs == 2);
  CHECK(s.context_hist.at(0) == 1);
  CHECK(s.context_hist.at(350) == 1);
  CHECK(s.target_hist.at(90) == 1);
  CHECK(format_stats(s).find("pairs=2") == 0);
}
