#pragma once

// Transformer encoder-decoder with a masked-LM head on the encoder, a tied-embedding
// LM head on the decoder, and a pointer-generator output layer:
//
//   P^v   = softmax(W^e (W^v s_t + b^v))                        (zero on extra ids)
//   e_tl  = w^c . tanh(W^m h_l + W^s s_t + b^c)
//   alpha = softmax(e_t),  z_t = sum_l alpha_tl h_l
//   P^c(y) = sum_{l : x_l = y} alpha_tl
//   lambda = sigmoid(w^z . z_t + w^s . s_t + b^m)
//   P     = lambda P^v + (1 - lambda) P^c
//
// Blocks are pre-layer-norm with learned position embeddings. Everything is
// templated on the scalar so the same code runs in float (training) and double
// (gradient checks).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "palm/ops.hpp"
#include "palm/rng.hpp"
#include "palm/tokenizer.hpp"

namespace palm {

struct ModelConfig {
  int enc_layers = 2;
  int dec_layers = 2;
  int hidden = 128;
  int ffn = 512;
  int heads = 4;
  double dropout = 0.1;
  int max_context = 400;
  int max_target = 100;
  int vocab_size = 0;

  /// 12+12 layers, 768 hidden, 3072 feed-forward, 12 heads.
  static ModelConfig full_preset(int vocab_size) {
    return {.enc_layers = 12, .dec_layers = 12, .hidden = 768, .ffn = 3072, .heads = 12,
            .dropout = 0.1, .max_context = 400, .max_target = 100, .vocab_size = vocab_size};
  }
  static ModelConfig desk_preset(int vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    return c;
  }

  void validate() const {
    if (enc_layers < 0 || dec_layers < 0 || hidden <= 0 || ffn <= 0 || heads <= 0) {
      throw std::invalid_argument("model config: sizes must be positive");
    }
    if (hidden % heads != 0) {
      throw std::invalid_argument("model config: hidden must be divisible by heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      throw std::invalid_argument("model config: dropout must be in [0, 1)");
    }
    if (max_context < 1 || max_target < 1) {
      throw std::invalid_argument("model config: position limits must be positive");
    }
    if (vocab_size <= kNumSpecials) {
      throw std::invalid_argument("model config: vocab_size must exceed the special tokens");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct LayerNormParams {
  Matrix<S> gain;
  Matrix<S> bias;
};

/// Projections are stored (in x out) and applied as x * W + b.
template <typename S>
struct AttentionParams {
  Matrix<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename S>
struct FeedForwardParams {
  Matrix<S> w1, b1, w2, b2;
};

template <typename S>
struct EncoderLayerParams {
  LayerNormParams<S> ln1;
  AttentionParams<S> self_attn;
  LayerNormParams<S> ln2;
  FeedForwardParams<S> ffn;
};

template <typename S>
struct DecoderLayerParams {
  LayerNormParams<S> ln1;
  AttentionParams<S> self_attn;
  LayerNormParams<S> ln2;
  AttentionParams<S> cross_attn;
  LayerNormParams<S> ln3;
  FeedForwardParams<S> ffn;
};

/// Every learnable array. The decoder output projection is token_embedding itself.
template <typename S>
struct ModelParams {
  ModelConfig config;

  Matrix<S> token_embedding;  // W^e, (vocab x hidden); also the output projection
  Matrix<S> enc_position;     // (max_context x hidden)
  Matrix<S> dec_position;     // (max_target x hidden)
  std::vector<EncoderLayerParams<S>> encoder;
  LayerNormParams<S> enc_final;
  std::vector<DecoderLayerParams<S>> decoder;
  LayerNormParams<S> dec_final;

  // masked-LM head: dense -> gelu -> layer norm -> tied projection + bias
  Matrix<S> mlm_dense, mlm_dense_bias;
  LayerNormParams<S> mlm_ln;
  Matrix<S> mlm_out_bias;  // (1 x vocab)

  Matrix<S> lm_proj, lm_bias;  // W^v (hidden x hidden), b^v (1 x hidden)

  Matrix<S> copy_score;    // w^c (1 x hidden)
  Matrix<S> copy_context;  // W^m (hidden x hidden)
  Matrix<S> copy_query;    // W^s (hidden x hidden)
  Matrix<S> copy_bias;     // b^c (1 x hidden)
  Matrix<S> gate_context;  // w^z (1 x hidden)
  Matrix<S> gate_state;    // w^s (1 x hidden)
  Matrix<S> gate_bias;     // b^m (1 x 1)

  /// Calls f(name, matrix) for every parameter in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_all(*this, f);
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <typename T>
  [[nodiscard]] ModelParams<T> cast() const {
    ModelParams<T> out = ModelParams<T>::shaped(config);
    std::vector<const Matrix<S>*> src;
    visit([&](const std::string&, const Matrix<S>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Matrix<T>& m) { m = src[i++]->template cast<T>(); });
    return out;
  }

  /// Zero-filled parameters with the shapes implied by `cfg`.
  static ModelParams shaped(const ModelConfig& cfg) {
    cfg.validate();
    const Index h = cfg.hidden;
    const Index f = cfg.ffn;
    const Index v = cfg.vocab_size;
    ModelParams p;
    p.config = cfg;
    auto zeros = [](Index r, Index c) { return Matrix<S>::Zero(r, c); };
    auto ln = [&] { return LayerNormParams<S>{Matrix<S>::Ones(1, h), zeros(1, h)}; };
    auto attn = [&] {
      return AttentionParams<S>{zeros(h, h), zeros(1, h), zeros(h, h), zeros(1, h),
                                zeros(h, h), zeros(1, h), zeros(h, h), zeros(1, h)};
    };
    auto ffn = [&] { return FeedForwardParams<S>{zeros(h, f), zeros(1, f), zeros(f, h), zeros(1, h)}; };
    p.token_embedding = zeros(v, h);
    p.enc_position = zeros(cfg.max_context, h);
    p.dec_position = zeros(cfg.max_target, h);
    for (int i = 0; i < cfg.enc_layers; ++i) {
      p.encoder.push_back({ln(), attn(), ln(), ffn()});
    }
    p.enc_final = ln();
    for (int i = 0; i < cfg.dec_layers; ++i) {
      p.decoder.push_back({ln(), attn(), ln(), attn(), ln(), ffn()});
    }
    p.dec_final = ln();
    p.mlm_dense = zeros(h, h);
    p.mlm_dense_bias = zeros(1, h);
    p.mlm_ln = ln();
    p.mlm_out_bias = zeros(1, v);
    p.lm_proj = zeros(h, h);
    p.lm_bias = zeros(1, h);
    p.copy_score = zeros(1, h);
    p.copy_context = zeros(h, h);
    p.copy_query = zeros(h, h);
    p.copy_bias = zeros(1, h);
    p.gate_context = zeros(1, h);
    p.gate_state = zeros(1, h);
    p.gate_bias = zeros(1, 1);
    return p;
  }

  /// normal(0, 0.02) for weight matrices and vectors, zeros for biases, ones for
  /// layer-norm gains. The gate bias starts at 0 so lambda starts near 0.5.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p = shaped(cfg);
    p.visit([&](const std::string& name, Matrix<S>& m) { init_one(name, m, seed); });
    return p;
  }

  /// Re-draws one parameter the way init() would (used by the ablation arms).
  static void init_one(const std::string& name, Matrix<S>& m, std::uint64_t seed) {
    if (!is_weight(name)) {
      return;  // biases and gains keep their shaped() values
    }
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : name) {
      h = (h ^ c) * 1099511628211ULL;
    }
    Rng rng(derive_seed(seed, {h}));
    for (Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<S>(0.02 * rng.normal());
    }
  }

  static bool is_weight(const std::string& name) {
    auto ends_with = [&](std::string_view suffix) { return std::string_view(name).ends_with(suffix); };
    if (ends_with(".gain") || ends_with("bias") || ends_with(".bq") || ends_with(".bk") ||
        ends_with(".bv") || ends_with(".bo") || ends_with(".b1") || ends_with(".b2")) {
      return false;
    }
    return true;
  }

  /// Decoder-side parameters (everything the autoregressive path owns, excluding
  /// the shared token embedding).
  static bool is_decoder_param(const std::string& name) {
    return name.starts_with("dec.") || name == "embed.dec_position" || name.starts_with("lm.") ||
           name.starts_with("copy.") || name.starts_with("gate.");
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& p, F& f) {
    auto ln = [&](const std::string& prefix, auto& l) {
      f(prefix + ".gain", l.gain);
      f(prefix + ".bias", l.bias);
    };
    auto attn = [&](const std::string& prefix, auto& a) {
      f(prefix + ".wq", a.wq);
      f(prefix + ".bq", a.bq);
      f(prefix + ".wk", a.wk);
      f(prefix + ".bk", a.bk);
      f(prefix + ".wv", a.wv);
      f(prefix + ".bv", a.bv);
      f(prefix + ".wo", a.wo);
      f(prefix + ".bo", a.bo);
    };
    auto ffn = [&](const std::string& prefix, auto& x) {
      f(prefix + ".w1", x.w1);
      f(prefix + ".b1", x.b1);
      f(prefix + ".w2", x.w2);
      f(prefix + ".b2", x.b2);
    };
    f(std::string("embed.token"), p.token_embedding);
    f(std::string("embed.enc_position"), p.enc_position);
    f(std::string("embed.dec_position"), p.dec_position);
    for (std::size_t i = 0; i < p.encoder.size(); ++i) {
      const std::string pre = "enc." + std::to_string(i);
      ln(pre + ".ln1", p.encoder[i].ln1);
      attn(pre + ".self", p.encoder[i].self_attn);
      ln(pre + ".ln2", p.encoder[i].ln2);
      ffn(pre + ".ffn", p.encoder[i].ffn);
    }
    ln("enc.final", p.enc_final);
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
      const std::string pre = "dec." + std::to_string(i);
      ln(pre + ".ln1", p.decoder[i].ln1);
      attn(pre + ".self", p.decoder[i].self_attn);
      ln(pre + ".ln2", p.decoder[i].ln2);
      attn(pre + ".cross", p.decoder[i].cross_attn);
      ln(pre + ".ln3", p.decoder[i].ln3);
      ffn(pre + ".ffn", p.decoder[i].ffn);
    }
    ln("dec.final", p.dec_final);
    f(std::string("mlm.dense"), p.mlm_dense);
    f(std::string("mlm.dense_bias"), p.mlm_dense_bias);
    ln("mlm.ln", p.mlm_ln);
    f(std::string("mlm.out_bias"), p.mlm_out_bias);
    f(std::string("lm.proj"), p.lm_proj);
    f(std::string("lm.bias"), p.lm_bias);
    f(std::string("copy.score"), p.copy_score);
    f(std::string("copy.context"), p.copy_context);
    f(std::string("copy.query"), p.copy_query);
    f(std::string("copy.bias"), p.copy_bias);
    f(std::string("gate.context"), p.gate_context);
    f(std::string("gate.state"), p.gate_state);
    f(std::string("gate.bias"), p.gate_bias);
  }
};

/// Per-forward switches. A null rng means evaluation mode (no dropout).
struct ForwardOptions {
  bool use_pointer = true;
  bool zero_cross_attention = false;  // decoder ignores the context (wiring checks)
};

/// Binds a parameter snapshot to a graph. Each parameter becomes one leaf, so its
/// gradient collects in one place.
template <typename S>
class Session {
 public:
  Session(Graph<S>& graph, const ModelParams<S>& params, Rng* dropout_rng = nullptr,
          ForwardOptions options = {})
      : graph_(graph), params_(params), rng_(dropout_rng), options_(options) {}

  [[nodiscard]] Graph<S>& graph() const { return graph_; }
  [[nodiscard]] const ModelParams<S>& params() const { return params_; }
  [[nodiscard]] const ModelConfig& config() const { return params_.config; }
  [[nodiscard]] Rng* rng() const { return rng_; }
  [[nodiscard]] double dropout_rate() const { return rng_ != nullptr ? params_.config.dropout : 0.0; }
  [[nodiscard]] const ForwardOptions& options() const { return options_; }

  Tensor<S> param(const Matrix<S>& m) {
    auto [it, inserted] = leaves_.try_emplace(&m);
    if (inserted) {
      it->second = graph_.parameter(m);
    }
    return it->second;
  }

  /// Leaf for a parameter if this session has bound it.
  [[nodiscard]] const Tensor<S>* bound(const Matrix<S>& m) const {
    auto it = leaves_.find(&m);
    return it == leaves_.end() ? nullptr : &it->second;
  }

 private:
  Graph<S>& graph_;
  const ModelParams<S>& params_;
  Rng* rng_;
  ForwardOptions options_;
  std::unordered_map<const Matrix<S>*, Tensor<S>> leaves_;
};

template <typename S>
struct EncoderOutput {
  Tensor<S> states;       // h^c, (m x hidden)
  Tensor<S> mlm_logits;   // (m x vocab) when requested
};

template <typename S>
struct StepDistribution {
  Tensor<S> p_final;  // (n x extended vocab)
  Tensor<S> lambda;   // (n x 1)
  Tensor<S> alpha;    // (n x m)
};

namespace detail {

template <typename S>
Tensor<S> linear(Session<S>& s, const Tensor<S>& x, const Matrix<S>& w, const Matrix<S>& b) {
  return add_row(matmul(x, s.param(w)), s.param(b));
}

template <typename S>
Tensor<S> norm(Session<S>& s, const Tensor<S>& x, const LayerNormParams<S>& ln) {
  return layer_norm(x, s.param(ln.gain), s.param(ln.bias), 1e-5);
}

template <typename S>
Tensor<S> multi_head(Session<S>& s, const Tensor<S>& query_in, const Tensor<S>& kv_in,
                     const AttentionParams<S>& a, bool causal) {
  auto q = linear(s, query_in, a.wq, a.bq);
  auto k = linear(s, kv_in, a.wk, a.bk);
  auto v = linear(s, kv_in, a.wv, a.bv);
  auto ctx = attention(q, k, v, s.config().heads, causal, s.dropout_rate(), s.rng());
  return dropout(linear(s, ctx, a.wo, a.bo), s.dropout_rate(), s.rng());
}

template <typename S>
Tensor<S> feed_forward(Session<S>& s, const Tensor<S>& x, const FeedForwardParams<S>& f) {
  auto h = gelu(linear(s, x, f.w1, f.b1));
  return dropout(linear(s, h, f.w2, f.b2), s.dropout_rate(), s.rng());
}

template <typename S>
Tensor<S> embed(Session<S>& s, std::span<const int> ids, const Matrix<S>& positions) {
  auto tok = gather_rows(s.param(s.params().token_embedding), ids);
  auto pos = slice_rows(s.param(positions), 0, static_cast<Index>(ids.size()));
  return dropout(add(tok, pos), s.dropout_rate(), s.rng());
}

inline void check_ids(std::span<const int> ids, int vocab_size, const char* what) {
  for (int id : ids) {
    if (id < 0 || id >= vocab_size) {
      throw std::out_of_range(std::string(what) + ": id " + std::to_string(id) + " outside base vocabulary");
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> mlm_logits(Session<S>& s, const EncoderOutput<S>& enc, std::span<const int> positions);

/// Bidirectional encoder over the context. MLM logits are only computed when asked.
template <typename S>
EncoderOutput<S> encode(Session<S>& s, std::span<const int> context_ids, bool with_mlm_logits = false) {
  const auto& cfg = s.config();
  if (context_ids.empty() || static_cast<int>(context_ids.size()) > cfg.max_context) {
    throw std::invalid_argument("encode: context length " + std::to_string(context_ids.size()) +
                                " outside [1, " + std::to_string(cfg.max_context) + "]");
  }
  detail::check_ids(context_ids, cfg.vocab_size, "encode");
  const auto& p = s.params();
  auto x = detail::embed(s, context_ids, p.enc_position);
  for (const auto& layer : p.encoder) {
    auto h = detail::norm(s, x, layer.ln1);
    x = add(x, detail::multi_head(s, h, h, layer.self_attn, false));
    x = add(x, detail::feed_forward(s, detail::norm(s, x, layer.ln2), layer.ffn));
  }
  EncoderOutput<S> out{detail::norm(s, x, p.enc_final), {}};
  if (with_mlm_logits) {
    std::vector<int> all(context_ids.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
      all[i] = static_cast<int>(i);
    }
    out.mlm_logits = mlm_logits(s, out, all);
  }
  return out;
}

/// MLM logits (k x vocab) at the given context positions.
template <typename S>
Tensor<S> mlm_logits(Session<S>& s, const EncoderOutput<S>& enc, std::span<const int> positions) {
  const auto& p = s.params();
  auto h = gather_rows(enc.states, positions);
  h = gelu(detail::linear(s, h, p.mlm_dense, p.mlm_dense_bias));
  h = detail::norm(s, h, p.mlm_ln);
  return add_row(matmul_nt(h, s.param(p.token_embedding)), s.param(p.mlm_out_bias));
}

/// Causal decoder over the prefix with cross-attention into h^c. Returns the state
/// s_t of every prefix position (n x hidden); the last row is the current step.
template <typename S>
Tensor<S> decoder_states(Session<S>& s, std::span<const int> prefix_ids, const EncoderOutput<S>& enc) {
  const auto& cfg = s.config();
  if (prefix_ids.empty()) {
    throw std::invalid_argument("decode: empty prefix");
  }
  if (static_cast<int>(prefix_ids.size()) > cfg.max_target) {
    throw std::invalid_argument("decode: prefix longer than max_target");
  }
  detail::check_ids(prefix_ids, cfg.vocab_size, "decode");
  const auto& p = s.params();
  auto x = detail::embed(s, prefix_ids, p.dec_position);
  for (const auto& layer : p.decoder) {
    auto h = detail::norm(s, x, layer.ln1);
    x = add(x, detail::multi_head(s, h, h, layer.self_attn, true));
    if (!s.options().zero_cross_attention) {
      auto c = detail::norm(s, x, layer.ln2);
      x = add(x, detail::multi_head(s, c, enc.states, layer.cross_attn, false));
    }
    x = add(x, detail::feed_forward(s, detail::norm(s, x, layer.ln3), layer.ffn));
  }
  return detail::norm(s, x, p.dec_final);
}

/// Last-position decoder state for the prefix.
template <typename S>
Tensor<S> decode_step(Session<S>& s, std::span<const int> prefix_ids, const EncoderOutput<S>& enc) {
  auto states = decoder_states(s, prefix_ids, enc);
  return slice_rows(states, states.rows() - 1, 1);
}

/// Logits of the generation path, W^e (W^v s + b^v), over the base vocabulary.
template <typename S>
Tensor<S> vocab_logits(Session<S>& s, const Tensor<S>& states) {
  const auto& p = s.params();
  auto projected = detail::linear(s, states, p.lm_proj, p.lm_bias);
  return matmul_nt(projected, s.param(p.token_embedding));
}

/// P^v over the extended space of size `extended_size`; extra ids get exactly 0.
template <typename S>
Tensor<S> vocab_distribution(Session<S>& s, const Tensor<S>& states, int extended_size) {
  return pad_cols(softmax(vocab_logits(s, states)), extended_size);
}

template <typename S>
struct CopyAttention {
  Tensor<S> alpha;    // (n x m)
  Tensor<S> context;  // z, (n x hidden)
};

template <typename S>
CopyAttention<S> copy_attention(Session<S>& s, const Tensor<S>& states, const EncoderOutput<S>& enc) {
  const auto& p = s.params();
  auto keys = matmul(enc.states, s.param(p.copy_context));                         // W^m h_l
  auto queries = add_row(matmul(states, s.param(p.copy_query)), s.param(p.copy_bias));  // W^s s_t + b^c
  auto alpha = softmax(additive_scores(keys, queries, s.param(p.copy_score)));
  return {alpha, matmul(alpha, enc.states)};
}

/// P^c: attention mass folded onto the extended id held at each context position.
template <typename S>
Tensor<S> copy_distribution(const Tensor<S>& alpha, std::span<const int> context_ext_ids, int extended_size) {
  return scatter_cols(alpha, context_ext_ids, extended_size);
}

/// lambda P^v + (1 - lambda) P^c with lambda = sigmoid(w^z . z + w^s . s + b^m).
template <typename S>
StepDistribution<S> mixture(Session<S>& s, const Tensor<S>& pv, const Tensor<S>& pc,
                            const Tensor<S>& context, const Tensor<S>& states) {
  const auto& p = s.params();
  auto gate = add(matmul_nt(context, s.param(p.gate_context)), matmul_nt(states, s.param(p.gate_state)));
  auto lambda = sigmoid(add_row(gate, s.param(p.gate_bias)));
  auto mixed = add(mul_col(pv, lambda), mul_col(pc, affine(lambda, S(-1), S(1))));
  return {mixed, lambda, {}};
}

/// Final distributions for every prefix position.
template <typename S>
StepDistribution<S> step_distributions(Session<S>& s, const Tensor<S>& states, const EncoderOutput<S>& enc,
                                       const ExtendedVocab& ext) {
  const int size = ext.size();
  auto pv = vocab_distribution(s, states, size);
  auto copy = copy_attention(s, states, enc);
  auto pc = copy_distribution(copy.alpha, ext.context_positions(), size);
  auto out = mixture(s, pv, pc, copy.context, states);
  out.alpha = copy.alpha;
  return out;
}

/// Decoder input for teacher forcing or decoding: [BOS] followed by the given ids,
/// with extra (copied) ids folded to [UNK] since they have no embedding.
inline std::vector<int> decoder_inputs(std::span<const int> generated, int base_size) {
  std::vector<int> in;
  in.reserve(generated.size() + 1);
  in.push_back(kBos);
  for (int id : generated) {
    in.push_back(id >= base_size ? kUnk : id);
  }
  return in;
}

template <typename S>
struct ForwardLoss {
  Tensor<S> nll;       // (n x 1), -log P(y_t | y_<t, x)
  Tensor<S> mlm_loss;  // 1x1 mean cross-entropy over masked positions; invalid if none
  int clamped = 0;     // gold tokens whose probability fell below the floor
};

inline constexpr double kProbabilityFloor = 1e-9;

/// Teacher-forced negative log-likelihood of `targets` (extended ids) given the
/// context. The encoder sees `encoder_input` (the context with extra ids folded to
/// [UNK], or a masked copy of it). With the pointer off, P is P^v over the base
/// vocabulary and out-of-vocabulary targets score as [UNK]. When `mlm_labels` is
/// non-empty, the masked-LM loss over its labelled positions is added.
template <typename S>
ForwardLoss<S> forward_loss(Session<S>& s, std::span<const int> encoder_input, std::span<const int> targets,
                            const ExtendedVocab& ext, std::span<const int> mlm_labels = {}) {
  if (targets.empty()) {
    throw std::invalid_argument("forward_loss: empty target");
  }
  if (static_cast<int>(ext.context_positions().size()) != static_cast<int>(encoder_input.size())) {
    throw std::invalid_argument("forward_loss: extended vocabulary built for a different context");
  }
  const int base = ext.base_size();
  auto enc = encode(s, encoder_input);
  ForwardLoss<S> out;
  if (!mlm_labels.empty()) {
    std::vector<int> positions;
    std::vector<int> labels;
    for (std::size_t i = 0; i < mlm_labels.size(); ++i) {
      if (mlm_labels[i] >= 0) {
        positions.push_back(static_cast<int>(i));
        labels.push_back(mlm_labels[i]);
      }
    }
    if (!positions.empty()) {
      auto logp = log_softmax(mlm_logits(s, enc, positions));
      out.mlm_loss = scale(sum(pick(logp, labels)), S(-1) / static_cast<S>(labels.size()));
    }
  }
  const auto inputs = decoder_inputs(targets.first(targets.size() - 1), base);
  auto states = decoder_states(s, inputs, enc);
  if (s.options().use_pointer) {
    auto dist = step_distributions(s, states, enc, ext);
    out.nll = scale(log_pick(dist.p_final, targets, S(kProbabilityFloor), &out.clamped), S(-1));
  } else {
    std::vector<int> gold(targets.begin(), targets.end());
    for (int& id : gold) {
      if (id >= base) {
        id = kUnk;
      }
    }
    out.nll = scale(pick(log_softmax(vocab_logits(s, states)), gold), S(-1));
  }
  return out;
}

}  // namespace palm
