#include "palm/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace palm {

namespace {

enum SeedTag : std::uint64_t {
  kInitTag = 0x1417,
  kBatchTag = 0xBA7C,
  kMaskTag = 0x3A5C,
  kDropoutTag = 0xD20F,
  kReinitTag = 0x2E17,
  kFinetuneTag = 0xF17E,
};

std::vector<Matrix<float>*> flat(ModelParams<float>& p) {
  std::vector<Matrix<float>*> out;
  p.visit([&](const std::string&, Matrix<float>& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix<float>*> flat(const ModelParams<float>& p) {
  std::vector<const Matrix<float>*> out;
  p.visit([&](const std::string&, const Matrix<float>& m) { out.push_back(&m); });
  return out;
}

void set_zero(ModelParams<float>& p) {
  p.visit([](const std::string&, Matrix<float>& m) { m.setZero(); });
}

void add_into(ModelParams<float>& total, ModelParams<float>& part) {
  auto t = flat(total);
  auto q = flat(part);
  for (std::size_t i = 0; i < t.size(); ++i) {
    *t[i] += *q[i];
  }
}

struct ExampleStats {
  double gen_sum = 0;
  double mlm_sum = 0;
  int clamped = 0;
};

/// Runs `build` for every example on its own graph and sums the gradients into
/// `total` in example order. Examples are processed in waves of `threads`.
template <typename Build>
std::vector<ExampleStats> accumulate_examples(const ModelParams<float>& params, int count, int threads,
                                              const ForwardOptions& options, std::uint64_t seed, int step,
                                              Build build, ModelParams<float>& total) {
  std::vector<ExampleStats> stats(count);
  const int workers = std::max(1, std::min(threads, count));
  std::vector<ModelParams<float>> buffers(workers, ModelParams<float>::shaped(params.config));
  auto run_one = [&](int j, ModelParams<float>& grads) {
    set_zero(grads);
    Graph<float> g;
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(j), kDropoutTag}));
    Session<float> s(g, params, &rng, options);
    auto loss = build(j, s, stats[j]);
    if (!loss.valid()) {
      return;
    }
    g.backward(loss);
    auto dst = flat(grads);
    auto src = flat(params);
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (const auto* leaf = s.bound(*src[i])) {
        *dst[i] += leaf->grad();
      }
    }
  };
  for (int begin = 0; begin < count; begin += workers) {
    const int n = std::min(workers, count - begin);
    if (n == 1) {
      run_one(begin, buffers[0]);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(n);
      for (int k = 0; k < n; ++k) {
        pool.emplace_back([&, k] {
          try {
            run_one(begin + k, buffers[k]);
          } catch (...) {
            errors[k] = std::current_exception();
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
    for (int k = 0; k < n; ++k) {
      add_into(total, buffers[k]);
    }
  }
  return stats;
}

std::vector<int> masked_positions(std::span<const int> labels, std::vector<int>* gold) {
  std::vector<int> pos;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) {
      pos.push_back(static_cast<int>(i));
      if (gold != nullptr) {
        gold->push_back(labels[i]);
      }
    }
  }
  return pos;
}

/// Sum of masked-LM cross-entropy over labelled positions (invalid tensor if none).
Tensor<float> mlm_sum(Session<float>& s, const MaskedBatch& mb) {
  std::vector<int> gold;
  auto pos = masked_positions(mb.mlm_labels, &gold);
  if (pos.empty()) {
    return {};
  }
  auto enc = encode(s, mb.input_ids);
  auto logp = log_softmax(mlm_logits(s, enc, pos));
  return scale(sum(pick(logp, gold)), -1.0f);
}

int count_masked(std::span<const MaskedBatch> batch) {
  int k = 0;
  for (const auto& mb : batch) {
    k += static_cast<int>(masked_positions(mb.mlm_labels, nullptr).size());
  }
  return k;
}

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << v;
  return ss.str();
}

}  // namespace

double lr_schedule(int step, const TrainConfig& cfg) {
  if (step <= 0) {
    return 0.0;
  }
  if (step <= cfg.warmup_steps) {
    return cfg.lr * step / cfg.warmup_steps;
  }
  if (step >= cfg.total_steps) {
    return 0.0;
  }
  return cfg.lr * static_cast<double>(cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps);
}

double clip_gradients(ModelParams<float>& grads, double max_norm) {
  double sq = 0;
  grads.visit([&](const std::string&, const Matrix<float>& m) { sq += m.cast<double>().squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float f = static_cast<float>(max_norm / norm);
    grads.visit([&](const std::string&, Matrix<float>& m) { m *= f; });
  }
  return norm;
}

AdamState AdamState::zeros(const ModelConfig& cfg) {
  AdamState s{ModelParams<float>::shaped(cfg), ModelParams<float>::shaped(cfg), 0};
  set_zero(s.m);
  set_zero(s.v);
  return s;
}

void adam_update(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state,
                 const TrainConfig& cfg, double lr) {
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float step_size = static_cast<float>(lr / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(cfg.epsilon);
  auto p = flat(params);
  auto g = flat(grads);
  auto m = flat(state.m);
  auto v = flat(state.v);
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i]->array() = b1 * m[i]->array() + (1 - b1) * g[i]->array();
    v[i]->array() = b2 * v[i]->array() + (1 - b2) * g[i]->array().square();
    p[i]->array() -= step_size * m[i]->array() / ((v[i]->array() * inv_c2).sqrt() + eps);
  }
}

Example make_example(const Fragment& fragment, const Vocab& vocab) {
  return {fragment.context_ids, extend(vocab, std::span<const int>(fragment.context_ids)), fragment.target_ids};
}

Example make_example(std::string_view source, std::string_view target, const Vocab& vocab,
                     const ModelConfig& cfg) {
  auto src = encode_pieces(source, vocab);
  if (src.empty()) {
    throw std::invalid_argument("example: empty source");
  }
  if (static_cast<int>(src.size()) > cfg.max_context) {
    src.resize(cfg.max_context);
  }
  auto tgt = encode_pieces(target, vocab);
  if (static_cast<int>(tgt.size()) > cfg.max_target - 1) {
    tgt.resize(cfg.max_target - 1);
  }
  Example ex{{}, extend(vocab, std::span<const Piece>(src)), {}};
  ex.context = ex.ext.context_base_ids();
  ex.target = ex.ext.map_targets(tgt);
  ex.target.push_back(kEos);
  return ex;
}

std::vector<TextPair> read_text_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot read pairs file " + path.string());
  }
  std::vector<TextPair> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.find_first_not_of(" \t") == std::string::npos) {
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
      fields.push_back(line.substr(start, tab - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() == 2) {
      out.push_back({fields[0], fields[1]});
    } else if (fields.size() == 3) {
      out.push_back({fields[0] + " " + fields[1], fields[2]});
    } else {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 2 or 3 tab-separated fields, got " +
                               std::to_string(fields.size()));
    }
  }
  return out;
}

Trainer::Trainer(ModelParams<float> params, TrainConfig cfg, int threads)
    : params_(std::move(params)), adam_(AdamState::zeros(params_.config)), cfg_(cfg), threads_(threads) {
  cfg_.validate();
}

StepLog Trainer::apply(int step, ModelParams<float>& grads, StepLog log) {
  log.grad_norm = clip_gradients(grads, cfg_.clip_norm);
  log.lr = lr_schedule(step, cfg_);
  adam_update(params_, grads, adam_, cfg_, log.lr);
  return log;
}

StepLog Trainer::stage1_step(int step, std::span<const MaskedBatch> batch) {
  StepLog log;
  log.step = step;
  log.stage = 1;
  const int total_masked = count_masked(batch);
  for (const auto& mb : batch) {
    log.skipped += masked_positions(mb.mlm_labels, nullptr).empty() ? 1 : 0;
  }
  if (total_masked == 0) {
    return log;
  }
  auto grads = ModelParams<float>::shaped(params_.config);
  set_zero(grads);
  const float inv = 1.0f / static_cast<float>(total_masked);
  auto stats = accumulate_examples(
      params_, static_cast<int>(batch.size()), threads_, {}, cfg_.seed, step,
      [&](int j, Session<float>& s, ExampleStats& st) -> Tensor<float> {
        auto sum_nll = mlm_sum(s, batch[j]);
        if (!sum_nll.valid()) {
          return {};
        }
        st.mlm_sum = sum_nll.item();
        return scale(sum_nll, inv);
      },
      grads);
  for (const auto& st : stats) {
    log.mlm_loss += st.mlm_sum;
  }
  log.mlm_loss /= total_masked;
  log.loss = log.mlm_loss;
  return apply(step, grads, log);
}

StepLog Trainer::stage2_gradients(int step, std::span<const Example> batch, std::span<const MaskedBatch> masked,
                                  bool use_pointer, ModelParams<float>& grads) const {
  const double w = cfg_.stage2_mlm_weight;
  const bool need_masks = w > 0 || cfg_.stage2_masked_context;
  if (need_masks && masked.size() != batch.size()) {
    throw TrainingError("stage 2: masked inputs required for every example");
  }
  StepLog log;
  log.step = step;
  log.stage = 2;
  int tokens = 0;
  for (const auto& ex : batch) {
    tokens += static_cast<int>(ex.target.size());
  }
  const int total_masked = w > 0 ? count_masked(masked) : 0;
  const float inv_tokens = 1.0f / static_cast<float>(tokens);
  const float mlm_scale = total_masked > 0 ? static_cast<float>(w / total_masked) : 0.0f;

  grads = ModelParams<float>::shaped(params_.config);
  set_zero(grads);
  ForwardOptions options;
  options.use_pointer = use_pointer;
  auto stats = accumulate_examples(
      params_, static_cast<int>(batch.size()), threads_, options, cfg_.seed, step,
      [&](int j, Session<float>& s, ExampleStats& st) -> Tensor<float> {
        const Example& ex = batch[j];
        Tensor<float> mlm;
        ForwardLoss<float> out;
        if (cfg_.stage2_masked_context) {
          const auto& mb = masked[j];
          auto ext = extend(ex.ext.base(), std::span<const int>(mb.input_ids));
          out = forward_loss(s, mb.input_ids, ex.target, ext,
                             w > 0 ? std::span<const int>(mb.mlm_labels) : std::span<const int>{});
          if (out.mlm_loss.valid()) {
            const auto k = masked_positions(mb.mlm_labels, nullptr).size();
            mlm = scale(out.mlm_loss, static_cast<float>(k));
          }
        } else {
          out = forward_loss(s, ex.context, ex.target, ex.ext);
          if (w > 0) {
            mlm = mlm_sum(s, masked[j]);
          }
        }
        auto gen = sum(out.nll);
        st.gen_sum = gen.item();
        st.clamped = out.clamped;
        auto loss = scale(gen, inv_tokens);
        if (mlm.valid()) {
          st.mlm_sum = mlm.item();
          loss = add(loss, scale(mlm, mlm_scale));
        }
        return loss;
      },
      grads);
  for (const auto& st : stats) {
    log.gen_loss += st.gen_sum;
    log.mlm_loss += st.mlm_sum;
    log.clamped += st.clamped;
  }
  log.gen_loss /= tokens;
  log.mlm_loss = total_masked > 0 ? log.mlm_loss / total_masked : 0.0;
  log.loss = log.gen_loss + w * log.mlm_loss;
  return log;
}

StepLog Trainer::stage2_step(int step, std::span<const Example> batch, std::span<const MaskedBatch> masked,
                             bool use_pointer) {
  ModelParams<float> grads;
  auto log = stage2_gradients(step, batch, masked, use_pointer, grads);
  return apply(step, grads, log);
}

ModelParams<float> initial_params(const ModelConfig& model, const TrainConfig& cfg) {
  return ModelParams<float>::init(model, derive_seed(cfg.seed, {kInitTag}));
}

void reinitialize_decoder(ModelParams<float>& params, std::uint64_t seed) {
  const std::uint64_t s = derive_seed(seed, {kReinitTag});
  params.visit([&](const std::string& name, Matrix<float>& m) {
    if (!ModelParams<float>::is_decoder_param(name)) {
      return;
    }
    if (name.ends_with(".gain")) {
      m.setOnes();
    } else {
      m.setZero();
    }
    ModelParams<float>::init_one(name, m, s);
  });
}

Checkpoint make_checkpoint(const Trainer& trainer, int step, const Vocab& vocab, std::string phase) {
  Checkpoint c;
  c.params = trainer.params();
  c.meta["train.step"] = std::to_string(step);
  c.meta["train.seed"] = std::to_string(trainer.config().seed);
  c.meta["vocab_fingerprint"] = hex(vocab.fingerprint());
  c.meta["phase"] = std::move(phase);
  c.meta["use_pointer"] = trainer.config().no_pointer ? "0" : "1";
  c.meta["adam.step"] = std::to_string(trainer.adam().step);
  trainer.adam().m.visit([&](const std::string& name, const Matrix<float>& m) { c.state["adam.m." + name] = m; });
  trainer.adam().v.visit([&](const std::string& name, const Matrix<float>& m) { c.state["adam.v." + name] = m; });
  return c;
}

bool checkpoint_uses_pointer(const Checkpoint& ckpt) {
  auto it = ckpt.meta.find("use_pointer");
  return it == ckpt.meta.end() || it->second != "0";
}

namespace {

void check_vocab(const Checkpoint& ckpt, const Vocab& vocab) {
  auto it = ckpt.meta.find("vocab_fingerprint");
  if (it != ckpt.meta.end() && it->second != hex(vocab.fingerprint())) {
    throw TrainingError("vocabulary does not match the checkpoint (fingerprint " + hex(vocab.fingerprint()) +
                        " vs " + it->second + ")");
  }
  if (ckpt.params.config.vocab_size != vocab.size()) {
    throw TrainingError("vocabulary size " + std::to_string(vocab.size()) + " does not match the checkpoint's " +
                        std::to_string(ckpt.params.config.vocab_size));
  }
}

void restore_adam(const Checkpoint& ckpt, AdamState& adam) {
  auto it = ckpt.meta.find("adam.step");
  if (it == ckpt.meta.end()) {
    throw TrainingError("checkpoint has no optimizer state to resume from");
  }
  adam.step = std::stol(it->second);
  auto restore = [&](const char* prefix, ModelParams<float>& dst) {
    dst.visit([&](const std::string& name, Matrix<float>& m) {
      auto s = ckpt.state.find(prefix + name);
      if (s == ckpt.state.end() || s->second.rows() != m.rows() || s->second.cols() != m.cols()) {
        throw TrainingError("checkpoint optimizer state missing or misshapen for " + name);
      }
      m = s->second;
    });
  };
  restore("adam.m.", adam.m);
  restore("adam.v.", adam.v);
}

std::vector<int> sample_batch(std::uint64_t seed, int step, int batch, std::size_t n, std::uint64_t tag) {
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(step), tag}));
  std::vector<int> idx(batch);
  for (int& i : idx) {
    i = static_cast<int>(rng.below(0, n));
  }
  return idx;
}

}  // namespace

Checkpoint pretrain(std::span<const Fragment> pairs, const Vocab& vocab, const ModelConfig& model,
                    const TrainConfig& cfg, const MaskConfig& mask, const PretrainOptions& options) {
  cfg.validate();
  if (model.vocab_size != vocab.size()) {
    throw TrainingError("model vocab_size " + std::to_string(model.vocab_size) + " differs from vocabulary size " +
                        std::to_string(vocab.size()));
  }
  if (pairs.empty()) {
    throw TrainingError("pre-training needs at least one fragment");
  }
  int start = 1;
  Trainer trainer(initial_params(model, cfg), cfg, options.threads);
  if (options.resume) {
    const Checkpoint& r = *options.resume;
    check_vocab(r, vocab);
    if (r.params.config != model) {
      throw TrainingError("resume checkpoint was trained with a different model config");
    }
    if (r.meta.count("train.seed") && r.meta.at("train.seed") != std::to_string(cfg.seed)) {
      throw TrainingError("resume checkpoint was trained with seed " + r.meta.at("train.seed"));
    }
    trainer.params() = r.params;
    restore_adam(r, trainer.adam());
    start = std::stoi(r.meta.at("train.step")) + 1;
  }
  if (cfg.no_pretraining) {
    return make_checkpoint(trainer, 0, vocab, "pretrain");
  }

  std::vector<Example> examples;
  examples.reserve(pairs.size());
  for (const auto& f : pairs) {
    examples.push_back(make_example(f, vocab));
  }
  const int stage1 = cfg.resolved_stage1_steps();
  const bool use_pointer = !cfg.no_pointer;
  const bool need_masks = cfg.stage2_mlm_weight > 0 || cfg.stage2_masked_context;
  if (!options.checkpoint_dir.empty()) {
    std::filesystem::create_directories(options.checkpoint_dir);
  }
  std::vector<Example> batch;
  std::vector<MaskedBatch> masked;
  for (int step = start; step <= cfg.total_steps; ++step) {
    const auto idx = sample_batch(cfg.seed, step, cfg.batch_size, examples.size(), kBatchTag);
    const int stage = step <= stage1 ? 1 : 2;
    masked.clear();
    if (stage == 1 || need_masks) {
      for (std::size_t j = 0; j < idx.size(); ++j) {
        masked.push_back(mask_context(examples[idx[j]].context, mask,
                                      derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), j, kMaskTag}),
                                      vocab.size()));
      }
    }
    StepLog log;
    if (stage == 1) {
      log = trainer.stage1_step(step, masked);
    } else {
      batch.clear();
      for (int i : idx) {
        batch.push_back(examples[i]);
      }
      log = trainer.stage2_step(step, batch, masked, use_pointer);
    }
    if (options.on_step) {
      options.on_step(log);
    }
    if (!options.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      save_checkpoint(options.checkpoint_dir / ("step_" + std::to_string(step) + ".plmc"),
                      make_checkpoint(trainer, step, vocab, "pretrain"));
    }
    if (step == options.stop_after) {
      return make_checkpoint(trainer, step, vocab, "pretrain");
    }
  }
  Checkpoint out = make_checkpoint(trainer, cfg.total_steps, vocab, "pretrain");
  return cfg.no_autoregression ? without_autoregression(std::move(out), cfg.seed) : out;
}

Checkpoint without_autoregression(Checkpoint ckpt, std::uint64_t seed) {
  reinitialize_decoder(ckpt.params, seed);
  ckpt.state.clear();
  ckpt.meta.erase("adam.step");
  ckpt.meta["decoder_reinitialized"] = "1";
  return ckpt;
}

Checkpoint pretrain(const std::filesystem::path& pair_file, const Vocab& vocab, const ModelConfig& model,
                    const TrainConfig& cfg, const MaskConfig& mask, const PretrainOptions& options) {
  const auto pairs = read_pairs(pair_file);
  return pretrain(std::span<const Fragment>(pairs), vocab, model, cfg, mask, options);
}

Checkpoint finetune(const Checkpoint& base, std::span<const Example> examples, const Vocab& vocab,
                    const TrainConfig& cfg, int threads, const std::function<void(const StepLog&)>& on_step) {
  check_vocab(base, vocab);
  if (cfg.total_steps == 0) {
    return base;
  }
  if (examples.empty()) {
    throw TrainingError("fine-tuning needs at least one example");
  }
  TrainConfig ft = cfg;
  ft.no_pointer = !checkpoint_uses_pointer(base);
  ft.stage2_mlm_weight = 0;
  ft.stage2_masked_context = false;
  Trainer trainer(base.params, ft, threads);
  std::vector<Example> batch;
  for (int step = 1; step <= ft.total_steps; ++step) {
    batch.clear();
    for (int i : sample_batch(ft.seed, step, ft.batch_size, examples.size(), kFinetuneTag)) {
      batch.push_back(examples[i]);
    }
    auto log = trainer.stage2_step(step, batch, {}, !ft.no_pointer);
    if (on_step) {
      on_step(log);
    }
  }
  Checkpoint out = make_checkpoint(trainer, ft.total_steps, vocab, "finetune");
  for (const auto& [k, v] : base.meta) {
    if (k.starts_with("ablation.") || k == "decoder_reinitialized") {
      out.meta[k] = v;
    }
  }
  return out;
}

}  // namespace palm
