#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "palm/checkpoint.hpp"
#include "palm/config.hpp"
#include "palm/corpus.hpp"
#include "palm/model.hpp"

namespace palm {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// lr * step / warmup during warmup, then linear decay to 0 at total_steps.
double lr_schedule(int step, const TrainConfig& cfg);

/// Scales all gradients so their global L2 norm is at most max_norm (no-op when
/// max_norm is 0). Returns the norm before clipping.
double clip_gradients(ModelParams<float>& grads, double max_norm);

struct AdamState {
  ModelParams<float> m;
  ModelParams<float> v;
  long step = 0;

  static AdamState zeros(const ModelConfig& cfg);
};

void adam_update(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& state,
                 const TrainConfig& cfg, double lr);

/// One encoder input with its extended vocabulary and extended-id target.
struct Example {
  std::vector<int> context;  // base ids fed to the encoder
  ExtendedVocab ext;
  std::vector<int> target;  // extended ids
};

/// Pre-training pair: the context ids are the copy source, no extra ids.
Example make_example(const Fragment& fragment, const Vocab& vocab);

/// Supervised pair from text. The source is cut to max_context tokens, the target
/// to max_target - 1 tokens followed by [EOS]; target words that only occur in
/// the source map to their extra ids.
Example make_example(std::string_view source, std::string_view target, const Vocab& vocab,
                     const ModelConfig& cfg);

struct TextPair {
  std::string source;
  std::string target;
};

/// "source<TAB>target" lines, or "passage<TAB>question<TAB>answer" where the
/// question is appended to the passage. Blank lines are skipped.
std::vector<TextPair> read_text_pairs(const std::filesystem::path& path);

struct StepLog {
  int step = 0;
  int stage = 0;  // 1 = masked LM only, 2 = generation (+ weighted masked LM)
  double loss = 0;
  double gen_loss = 0;
  double mlm_loss = 0;
  double lr = 0;
  double grad_norm = 0;
  int clamped = 0;
  int skipped = 0;  // stage-1 examples without masked positions
};

/// Owns parameters and optimizer state. Each example gets its own graph; gradients
/// are summed in example order, so results do not depend on the thread count.
class Trainer {
 public:
  Trainer(ModelParams<float> params, TrainConfig cfg, int threads = 1);

  [[nodiscard]] const ModelParams<float>& params() const { return params_; }
  [[nodiscard]] ModelParams<float>& params() { return params_; }
  [[nodiscard]] const AdamState& adam() const { return adam_; }
  [[nodiscard]] AdamState& adam() { return adam_; }
  [[nodiscard]] const TrainConfig& config() const { return cfg_; }

  /// Mean cross-entropy over every masked position of the batch; one update.
  StepLog stage1_step(int step, std::span<const MaskedBatch> batch);

  /// Mean target-token NLL plus stage2_mlm_weight times the masked-LM loss; one
  /// update. `masked` may be empty when the weight is 0 and the context is clean.
  StepLog stage2_step(int step, std::span<const Example> batch, std::span<const MaskedBatch> masked,
                      bool use_pointer);

  /// Objective value and gradients without updating (for checks).
  StepLog stage2_gradients(int step, std::span<const Example> batch, std::span<const MaskedBatch> masked,
                           bool use_pointer, ModelParams<float>& grads) const;

 private:
  StepLog apply(int step, ModelParams<float>& grads, StepLog log);

  ModelParams<float> params_;
  AdamState adam_;
  TrainConfig cfg_;
  int threads_;
};

struct PretrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no intermediate checkpoints
  std::optional<Checkpoint> resume;
  int stop_after = -1;  // stop once this step is done (used to test resuming)
  int threads = 1;
  std::function<void(const StepLog&)> on_step;
};

/// Fresh parameters for a run (the init seed derives from cfg.seed).
ModelParams<float> initial_params(const ModelConfig& model, const TrainConfig& cfg);

/// Two-stage pre-training: resolved_stage1_steps() masked-LM steps, then
/// generation steps up to total_steps. Checkpoints every checkpoint_every steps
/// and at the end. Ablations: no_pretraining returns the initial parameters,
/// no_autoencoding skips stage 1, no_autoregression re-initializes the decoder
/// side after training, no_pointer trains without the copy path.
Checkpoint pretrain(std::span<const Fragment> pairs, const Vocab& vocab, const ModelConfig& model,
                    const TrainConfig& cfg, const MaskConfig& mask, const PretrainOptions& options = {});
Checkpoint pretrain(const std::filesystem::path& pair_file, const Vocab& vocab, const ModelConfig& model,
                    const TrainConfig& cfg, const MaskConfig& mask, const PretrainOptions& options = {});

/// Re-draws every decoder-side parameter (decoder layers, decoder positions, LM
/// head, copy attention, gate); encoder and token embedding are kept.
void reinitialize_decoder(ModelParams<float>& params, std::uint64_t seed);

/// A pre-trained checkpoint with its decoder side re-initialized and the optimizer
/// state dropped; what pretrain returns under no_autoregression.
Checkpoint without_autoregression(Checkpoint ckpt, std::uint64_t seed);

/// Optimizes the generation loss on supervised examples starting from `base`
/// with a fresh optimizer. Throws TrainingError when the vocabulary differs from
/// the one the checkpoint was trained with. Zero steps return `base` unchanged.
Checkpoint finetune(const Checkpoint& base, std::span<const Example> examples, const Vocab& vocab,
                    const TrainConfig& cfg, int threads = 1, const std::function<void(const StepLog&)>& on_step = {});

/// Whether a checkpoint was trained with the copy path (metadata "use_pointer").
bool checkpoint_uses_pointer(const Checkpoint& ckpt);

/// Checkpoint with the optimizer moments stored as "adam.m.*" / "adam.v.*".
Checkpoint make_checkpoint(const Trainer& trainer, int step, const Vocab& vocab, std::string phase);

}  // namespace palm
