#include "palm/rouge.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "palm/tokenizer.hpp"

namespace palm {

namespace {

RougeScore score(double overlap, std::size_t candidate, std::size_t reference) {
  RougeScore r;
  r.precision = candidate > 0 ? overlap / static_cast<double>(candidate) : 0.0;
  r.recall = reference > 0 ? overlap / static_cast<double>(reference) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

std::map<std::vector<std::string>, int> ngrams(const std::vector<std::string>& words, int n) {
  std::map<std::vector<std::string>, int> out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++out[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                   words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

}  // namespace

std::vector<std::string> rouge_tokens(std::string_view text) {
  auto words = pre_tokenize(text);
  for (auto& w : words) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(c < 0x80 ? std::tolower(c) : c); });
  }
  return words;
}

RougeScore rouge_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference, int n) {
  if (n < 1) {
    throw std::invalid_argument("rouge_n: n must be positive");
  }
  const auto c = ngrams(candidate, n);
  const auto r = ngrams(reference, n);
  int overlap = 0;
  for (const auto& [gram, count] : c) {
    if (auto it = r.find(gram); it != r.end()) {
      overlap += std::min(count, it->second);
    }
  }
  auto total = [](const auto& m) {
    std::size_t t = 0;
    for (const auto& kv : m) {
      t += static_cast<std::size_t>(kv.second);
    }
    return t;
  };
  return score(overlap, total(c), total(r));
}

RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  const std::size_t n = candidate.size();
  const std::size_t m = reference.size();
  std::vector<std::size_t> prev(m + 1, 0);
  std::vector<std::size_t> cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return score(static_cast<double>(prev[m]), n, m);
}

}  // namespace palm
