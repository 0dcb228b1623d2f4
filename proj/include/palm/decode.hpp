#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "palm/config.hpp"
#include "palm/model.hpp"
#include "palm/rouge.hpp"
#include "palm/training.hpp"

namespace palm {

struct Hypothesis {
  std::vector<int> ids{kBos};  // extended ids, starting with [BOS]
  double logp = 0;
  bool finished = false;  // ends in [EOS]

  [[nodiscard]] int length() const { return static_cast<int>(ids.size()) - 1; }
  /// Generated ids without [BOS] and the closing [EOS].
  [[nodiscard]] std::vector<int> output() const;
};

/// logp / length when normalizing, logp otherwise.
double hypothesis_score(const Hypothesis& h, bool length_norm);

/// Final ranking: higher score, then the lexicographically smaller id sequence, then
/// the shorter one.
bool ranks_before(const Hypothesis& a, const Hypothesis& b, bool length_norm);

/// Log-probabilities of every next id given the ids so far (starting with [BOS]).
/// -inf marks ids that cannot follow.
using NextLogProbs = std::function<std::vector<double>(std::span<const int>)>;

Hypothesis greedy_search(const NextLogProbs& next, int max_len);

/// Beam search. Every step keeps the `beam` best extensions by cumulative logp;
/// finished hypotheses leave the beam and are never extended. Stops once `beam`
/// hypotheses have finished or after max_len steps. The greedy hypothesis is
/// always among the candidates. Returns all candidates, best first.
std::vector<Hypothesis> beam_search(const NextLogProbs& next, const DecodeConfig& cfg);

/// Next-id scorer for one context. The encoder runs once; each call re-runs the
/// decoder over the prefix, with extra ids fed back as [UNK]. Pointer on: log
/// p_final over the extended space (floored like the training loss). Pointer off:
/// log-softmax over the base vocabulary.
class ModelScorer {
 public:
  ModelScorer(const ModelParams<float>& params, std::span<const int> context_ids, const ExtendedVocab& ext,
              bool use_pointer);

  std::vector<double> operator()(std::span<const int> ids) const;

 private:
  const ModelParams<float>& params_;
  const ExtendedVocab& ext_;
  bool use_pointer_;
  Matrix<float> states_;
};

/// Best hypothesis for the example's context; max_len is capped at model.max_target.
Hypothesis generate(const ModelParams<float>& params, const Example& example, const DecodeConfig& cfg,
                    bool use_pointer);

/// exp(total target NLL / total target tokens) under teacher forcing.
double perplexity(const ModelParams<float>& params, std::span<const Example> examples, bool use_pointer);

struct EvalSample {
  std::string reference;
  std::string generated;
  RougeScore rouge_l;
};

struct EvalReport {
  std::size_t examples = 0;
  std::size_t target_tokens = 0;
  double perplexity = 0;
  RougeScore rouge1, rouge2, rougeL;  // means over examples
  std::vector<EvalSample> samples;

  /// key=value lines, a blank line, then a tab-separated per-example table.
  [[nodiscard]] std::string serialize() const;
};

/// Perplexity on the targets plus beam-search generation scored by ROUGE against
/// the reference text. Examples are independent and spread over `threads`.
EvalReport evaluate(const ModelParams<float>& params, std::span<const TextPair> pairs, const Vocab& vocab,
                    const DecodeConfig& cfg, bool use_pointer, int threads = 1);

}  // namespace palm
