#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace palm {

struct RougeScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// Words of `text` as the tokenizer's pre-tokenizer splits them, ASCII-lowercased.
std::vector<std::string> rouge_tokens(std::string_view text);

/// Clipped n-gram overlap. F1 is 0 when precision + recall is 0.
RougeScore rouge_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference, int n);

/// Longest-common-subsequence precision, recall and F1.
RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

}  // namespace palm
