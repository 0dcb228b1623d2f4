#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "palm/corpus.hpp"
#include "palm/model.hpp"

namespace palm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimizer, schedule and ablation settings for one training phase.
struct TrainConfig {
  double lr = 1e-5;
  int warmup_steps = 10000;
  int total_steps = 800000;
  int batch_size = 64;
  int stage1_steps = -1;  // < 0: 10% of total_steps
  double stage2_mlm_weight = 0.0;
  bool stage2_masked_context = false;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 1;
  int checkpoint_every = 500;
  bool no_pointer = false;
  bool no_autoencoding = false;
  bool no_autoregression = false;
  bool no_pretraining = false;

  /// 100 warmup / 2000 total / batch 8 at lr 1e-3.
  static TrainConfig desk();
  [[nodiscard]] int resolved_stage1_steps() const;
  void validate() const;
};

struct DecodeConfig {
  int beam = 5;
  int max_len = 100;
  bool length_norm = true;
};

/// Everything a CLI run can set. Keys are "<group>.<field>", e.g. model.hidden,
/// train.lr, finetune.total_steps, pipeline.max_fragment, decode.beam.
struct RunConfig {
  ModelConfig model = ModelConfig::desk_preset(0);
  TrainConfig train = TrainConfig::desk();
  TrainConfig finetune = finetune_defaults();
  PipelineConfig pipeline;  // max_context/max_target follow the model limits
  MaskConfig mask;
  DecodeConfig decode;
  int vocab_size = 4096;
  int threads = 1;
  std::string corpus;       // pre-training corpus (file or directory)
  std::string train_pairs;  // fine-tuning "source<TAB>target" file
  std::string test_pairs;   // held-out evaluation pairs

  static TrainConfig finetune_defaults();

  [[nodiscard]] PipelineConfig pipeline_config() const;

  /// Applies "key=value". Throws ConfigError naming the key when it is unknown or
  /// the value does not parse.
  void set(std::string_view key, std::string_view value);
  void apply_override(std::string_view assignment);
  /// Reads key=value lines; '#' starts a comment.
  void load(const std::filesystem::path& path);
  void parse(std::string_view text, std::string_view origin = "<config>");

  /// Every key in a fixed order; parse(serialize()) reproduces the config.
  [[nodiscard]] std::string serialize() const;
  [[nodiscard]] static std::vector<std::string> keys();

  void validate() const;
};

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace palm
