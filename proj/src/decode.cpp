#include "palm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace palm {

std::vector<int> Hypothesis::output() const {
  auto end = ids.end();
  if (finished && ids.size() > 1) {
    --end;
  }
  return {ids.begin() + 1, end};
}

double hypothesis_score(const Hypothesis& h, bool length_norm) {
  return length_norm && h.length() > 0 ? h.logp / h.length() : h.logp;
}

bool ranks_before(const Hypothesis& a, const Hypothesis& b, bool length_norm) {
  const double sa = hypothesis_score(a, length_norm);
  const double sb = hypothesis_score(b, length_norm);
  if (sa != sb) {
    return sa > sb;
  }
  if (a.ids != b.ids) {
    return std::lexicographical_compare(a.ids.begin(), a.ids.end(), b.ids.begin(), b.ids.end());
  }
  return a.ids.size() < b.ids.size();
}

namespace {

Hypothesis extend_with(const Hypothesis& h, int id, double logp) {
  Hypothesis out = h;
  out.ids.push_back(id);
  out.logp += logp;
  out.finished = id == kEos;
  return out;
}

// Indices of the k largest finite entries, larger first, smaller id on ties.
std::vector<int> top_k(const std::vector<double>& logp, int k) {
  std::vector<int> ids;
  for (int i = 0; i < static_cast<int>(logp.size()); ++i) {
    if (std::isfinite(logp[i])) {
      ids.push_back(i);
    }
  }
  auto order = [&](int a, int b) { return logp[a] != logp[b] ? logp[a] > logp[b] : a < b; };
  if (static_cast<int>(ids.size()) > k) {
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), order);
    ids.resize(static_cast<std::size_t>(k));
  } else {
    std::sort(ids.begin(), ids.end(), order);
  }
  return ids;
}

}  // namespace

Hypothesis greedy_search(const NextLogProbs& next, int max_len) {
  Hypothesis h;
  for (int t = 0; t < max_len && !h.finished; ++t) {
    const auto logp = next(h.ids);
    const auto best = top_k(logp, 1);
    if (best.empty()) {
      break;
    }
    h = extend_with(h, best[0], logp[best[0]]);
  }
  return h;
}

std::vector<Hypothesis> beam_search(const NextLogProbs& next, const DecodeConfig& cfg) {
  if (cfg.beam < 1) {
    throw std::invalid_argument("beam_search: beam must be at least 1");
  }
  if (cfg.beam == 1) {
    return {greedy_search(next, cfg.max_len)};
  }
  // within a step, rank by cumulative logp with the same tie-breaks
  auto by_logp = [](const Hypothesis& a, const Hypothesis& b) { return ranks_before(a, b, false); };

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (int t = 0; t < cfg.max_len && !live.empty() && static_cast<int>(finished.size()) < cfg.beam; ++t) {
    std::vector<Hypothesis> candidates;
    for (const auto& h : live) {
      const auto logp = next(h.ids);
      for (int id : top_k(logp, cfg.beam)) {
        candidates.push_back(extend_with(h, id, logp[id]));
      }
    }
    std::sort(candidates.begin(), candidates.end(), by_logp);
    if (static_cast<int>(candidates.size()) > cfg.beam) {
      candidates.resize(static_cast<std::size_t>(cfg.beam));
    }
    live.clear();
    for (auto& c : candidates) {
      (c.finished ? finished : live).push_back(std::move(c));
    }
  }

  std::vector<Hypothesis> all = std::move(finished);
  all.insert(all.end(), live.begin(), live.end());
  auto greedy = greedy_search(next, cfg.max_len);
  if (std::none_of(all.begin(), all.end(), [&](const Hypothesis& h) { return h.ids == greedy.ids; })) {
    all.push_back(std::move(greedy));
  }
  std::sort(all.begin(), all.end(),
            [&](const Hypothesis& a, const Hypothesis& b) { return ranks_before(a, b, cfg.length_norm); });
  return all;
}

ModelScorer::ModelScorer(const ModelParams<float>& params, std::span<const int> context_ids, const ExtendedVocab& ext,
                         bool use_pointer)
    : params_(params), ext_(ext), use_pointer_(use_pointer) {
  Graph<float> g(false);
  Session<float> s(g, params_);
  states_ = encode(s, context_ids).states.value();
}

std::vector<double> ModelScorer::operator()(std::span<const int> ids) const {
  if (ids.empty() || ids.front() != kBos) {
    throw std::invalid_argument("ModelScorer: prefix must start with [BOS]");
  }
  Graph<float> g(false);
  Session<float> s(g, params_, nullptr, {.use_pointer = use_pointer_});
  const EncoderOutput<float> enc{g.constant(states_), {}};
  const auto inputs = decoder_inputs(ids.subspan(1), ext_.base_size());
  auto state = decode_step(s, inputs, enc);
  std::vector<double> out;
  if (use_pointer_) {
    const Matrix<float> p = step_distributions(s, state, enc, ext_).p_final.value();
    out.resize(static_cast<std::size_t>(p.cols()));
    for (Index i = 0; i < p.cols(); ++i) {
      out[static_cast<std::size_t>(i)] = std::log(std::max(static_cast<double>(p(0, i)), kProbabilityFloor));
    }
  } else {
    const Matrix<float> logp = log_softmax(vocab_logits(s, state)).value();
    out.assign(logp.data(), logp.data() + logp.size());
  }
  return out;
}

Hypothesis generate(const ModelParams<float>& params, const Example& example, const DecodeConfig& cfg,
                    bool use_pointer) {
  DecodeConfig capped = cfg;
  capped.max_len = std::min(cfg.max_len, params.config.max_target);
  const ModelScorer scorer(params, example.context, example.ext, use_pointer);
  return beam_search(std::cref(scorer), capped).front();
}

namespace {

struct NllSum {
  double nll = 0;
  std::size_t tokens = 0;
};

NllSum target_nll(const ModelParams<float>& params, const Example& ex, bool use_pointer) {
  Graph<float> g(false);
  Session<float> s(g, params, nullptr, {.use_pointer = use_pointer});
  const auto loss = forward_loss(s, ex.context, ex.target, ex.ext);
  return {loss.nll.value().cast<double>().sum(), ex.target.size()};
}

// Runs fn(i) for i in [0, n) on up to `threads` threads.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) {
          fn(i);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
  for (auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string one_line(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == '\t' || c == '\n' || c == '\r'; }, ' ');
  return s;
}

}  // namespace

double perplexity(const ModelParams<float>& params, std::span<const Example> examples, bool use_pointer) {
  if (examples.empty()) {
    throw std::invalid_argument("perplexity: empty evaluation set");
  }
  NllSum total;
  for (const auto& ex : examples) {
    const auto part = target_nll(params, ex, use_pointer);
    total.nll += part.nll;
    total.tokens += part.tokens;
  }
  return std::exp(total.nll / static_cast<double>(total.tokens));
}

std::string EvalReport::serialize() const {
  std::string out;
  auto line = [&](const std::string& key, const std::string& value) { out += key + "=" + value + "\n"; };
  line("examples", std::to_string(examples));
  line("target_tokens", std::to_string(target_tokens));
  line("perplexity", fixed(perplexity));
  const std::pair<const char*, const RougeScore*> scores[] = {{"rouge1", &rouge1}, {"rouge2", &rouge2}, {"rougeL", &rougeL}};
  for (const auto& [name, r] : scores) {
    line(std::string(name) + ".precision", fixed(r->precision));
    line(std::string(name) + ".recall", fixed(r->recall));
    line(std::string(name) + ".f1", fixed(r->f1));
  }
  out += "\nindex\trougeL_f1\treference\tgenerated\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out += std::to_string(i) + "\t" + fixed(samples[i].rouge_l.f1) + "\t" + one_line(samples[i].reference) + "\t" +
           one_line(samples[i].generated) + "\n";
  }
  return out;
}

EvalReport evaluate(const ModelParams<float>& params, std::span<const TextPair> pairs, const Vocab& vocab,
                    const DecodeConfig& cfg, bool use_pointer, int threads) {
  if (pairs.empty()) {
    throw std::invalid_argument("evaluate: empty evaluation set");
  }
  const std::size_t n = pairs.size();
  std::vector<NllSum> nll(n);
  std::vector<EvalSample> samples(n);
  std::vector<RougeScore> r1(n), r2(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto ex = make_example(pairs[i].source, pairs[i].target, vocab, params.config);
    nll[i] = target_nll(params, ex, use_pointer);
    const auto best = generate(params, ex, cfg, use_pointer);
    const auto out = best.output();
    samples[i].reference = pairs[i].target;
    samples[i].generated = decode(out, ex.ext);
    const auto cand = rouge_tokens(samples[i].generated);
    const auto ref = rouge_tokens(samples[i].reference);
    r1[i] = rouge_n(cand, ref, 1);
    r2[i] = rouge_n(cand, ref, 2);
    samples[i].rouge_l = rouge_l(cand, ref);
  });

  EvalReport report;
  report.examples = n;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += nll[i].nll;
    report.target_tokens += nll[i].tokens;
  }
  report.perplexity = std::exp(total / static_cast<double>(report.target_tokens));
  auto mean = [&](auto get) {
    RougeScore m;
    for (std::size_t i = 0; i < n; ++i) {
      const RougeScore& r = get(i);
      m.precision += r.precision / static_cast<double>(n);
      m.recall += r.recall / static_cast<double>(n);
      m.f1 += r.f1 / static_cast<double>(n);
    }
    return m;
  };
  report.rouge1 = mean([&](std::size_t i) -> const RougeScore& { return r1[i]; });
  report.rouge2 = mean([&](std::size_t i) -> const RougeScore& { return r2[i]; });
  report.rougeL = mean([&](std::size_t i) -> const RougeScore& { return samples[i].rouge_l; });
  report.samples = std::move(samples);
  return report;
}

}  // namespace palm
