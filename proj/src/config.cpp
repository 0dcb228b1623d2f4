#include "palm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

namespace palm {

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.lr = 1e-3;
  c.warmup_steps = 100;
  c.total_steps = 2000;
  c.batch_size = 8;
  c.checkpoint_every = 500;
  return c;
}

int TrainConfig::resolved_stage1_steps() const {
  if (no_autoencoding) {
    return 0;
  }
  return stage1_steps < 0 ? total_steps / 10 : stage1_steps;
}

void TrainConfig::validate() const {
  if (lr < 0 || stage2_mlm_weight < 0 || clip_norm < 0 || epsilon <= 0) {
    throw ConfigError("train config: rates must be non-negative");
  }
  if (total_steps < 0 || warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("train config: need 0 <= warmup_steps <= total_steps");
  }
  if (batch_size < 1) {
    throw ConfigError("train config: batch_size must be positive");
  }
  if (resolved_stage1_steps() > total_steps) {
    throw ConfigError("train config: stage1_steps exceeds total_steps");
  }
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
    throw ConfigError("train config: betas must be in [0, 1)");
  }
  if (checkpoint_every < 0) {
    throw ConfigError("train config: checkpoint_every must be non-negative");
  }
}

TrainConfig RunConfig::finetune_defaults() {
  TrainConfig c = TrainConfig::desk();
  c.lr = 2e-3;
  c.warmup_steps = 30;
  c.total_steps = 300;
  c.stage1_steps = 0;
  return c;
}

PipelineConfig RunConfig::pipeline_config() const {
  PipelineConfig p = pipeline;
  p.max_context = model.max_context;
  p.max_target = model.max_target;
  return p;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

namespace {

struct Entry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
T parse_value(std::string_view key, std::string_view text) {
  auto fail = [&] {
    return ConfigError("config: bad value '" + std::string(text) + "' for key '" + std::string(key) + "'");
  };
  if constexpr (std::is_same_v<T, std::string>) {
    return std::string(text);
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "1" || text == "true" || text == "on") {
      return true;
    }
    if (text == "0" || text == "false" || text == "off") {
      return false;
    }
    throw fail();
  } else {
    T v{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw fail();
    }
    return v;
  }
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    return format_double(v);
  } else {
    return std::to_string(v);
  }
}

template <typename Access>
Entry entry(std::string key, Access access) {
  using T = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
  return {key,
          [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); },
          [access, key](RunConfig& c, std::string_view text) { access(c) = parse_value<T>(key, text); }};
}

void add_train_entries(std::vector<Entry>& out, const std::string& group, TrainConfig RunConfig::*member,
                       bool pretraining) {
  auto add = [&](const std::string& field, auto access) {
    out.push_back(entry(group + "." + field, [member, access](RunConfig& c) -> auto& { return access(c.*member); }));
  };
  add("lr", [](TrainConfig& t) -> auto& { return t.lr; });
  add("warmup_steps", [](TrainConfig& t) -> auto& { return t.warmup_steps; });
  add("total_steps", [](TrainConfig& t) -> auto& { return t.total_steps; });
  add("batch_size", [](TrainConfig& t) -> auto& { return t.batch_size; });
  add("clip_norm", [](TrainConfig& t) -> auto& { return t.clip_norm; });
  add("beta1", [](TrainConfig& t) -> auto& { return t.beta1; });
  add("beta2", [](TrainConfig& t) -> auto& { return t.beta2; });
  add("epsilon", [](TrainConfig& t) -> auto& { return t.epsilon; });
  add("seed", [](TrainConfig& t) -> auto& { return t.seed; });
  add("checkpoint_every", [](TrainConfig& t) -> auto& { return t.checkpoint_every; });
  if (pretraining) {
    add("stage1_steps", [](TrainConfig& t) -> auto& { return t.stage1_steps; });
    add("stage2_mlm_weight", [](TrainConfig& t) -> auto& { return t.stage2_mlm_weight; });
    add("stage2_masked_context", [](TrainConfig& t) -> auto& { return t.stage2_masked_context; });
    add("no_pointer", [](TrainConfig& t) -> auto& { return t.no_pointer; });
    add("no_autoencoding", [](TrainConfig& t) -> auto& { return t.no_autoencoding; });
    add("no_autoregression", [](TrainConfig& t) -> auto& { return t.no_autoregression; });
    add("no_pretraining", [](TrainConfig& t) -> auto& { return t.no_pretraining; });
  }
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back(entry("model.enc_layers", [](RunConfig& c) -> auto& { return c.model.enc_layers; }));
    e.push_back(entry("model.dec_layers", [](RunConfig& c) -> auto& { return c.model.dec_layers; }));
    e.push_back(entry("model.hidden", [](RunConfig& c) -> auto& { return c.model.hidden; }));
    e.push_back(entry("model.ffn", [](RunConfig& c) -> auto& { return c.model.ffn; }));
    e.push_back(entry("model.heads", [](RunConfig& c) -> auto& { return c.model.heads; }));
    e.push_back(entry("model.dropout", [](RunConfig& c) -> auto& { return c.model.dropout; }));
    e.push_back(entry("model.max_context", [](RunConfig& c) -> auto& { return c.model.max_context; }));
    e.push_back(entry("model.max_target", [](RunConfig& c) -> auto& { return c.model.max_target; }));
    e.push_back(entry("model.vocab_size", [](RunConfig& c) -> auto& { return c.model.vocab_size; }));
    add_train_entries(e, "train", &RunConfig::train, true);
    add_train_entries(e, "finetune", &RunConfig::finetune, false);
    e.push_back(entry("pipeline.max_fragment", [](RunConfig& c) -> auto& { return c.pipeline.max_fragment; }));
    e.push_back(entry("pipeline.context_ratio", [](RunConfig& c) -> auto& { return c.pipeline.context_ratio; }));
    e.push_back(entry("mask.rate", [](RunConfig& c) -> auto& { return c.mask.mask_rate; }));
    e.push_back(entry("mask.mask_prob", [](RunConfig& c) -> auto& { return c.mask.mask_prob; }));
    e.push_back(entry("mask.random_prob", [](RunConfig& c) -> auto& { return c.mask.random_prob; }));
    e.push_back(entry("mask.keep_prob", [](RunConfig& c) -> auto& { return c.mask.keep_prob; }));
    e.push_back(entry("decode.beam", [](RunConfig& c) -> auto& { return c.decode.beam; }));
    e.push_back(entry("decode.max_len", [](RunConfig& c) -> auto& { return c.decode.max_len; }));
    e.push_back(entry("decode.length_norm", [](RunConfig& c) -> auto& { return c.decode.length_norm; }));
    e.push_back(entry("vocab.size", [](RunConfig& c) -> auto& { return c.vocab_size; }));
    e.push_back(entry("run.threads", [](RunConfig& c) -> auto& { return c.threads; }));
    e.push_back(entry("data.corpus", [](RunConfig& c) -> auto& { return c.corpus; }));
    e.push_back(entry("data.train_pairs", [](RunConfig& c) -> auto& { return c.train_pairs; }));
    e.push_back(entry("data.test_pairs", [](RunConfig& c) -> auto& { return c.test_pairs; }));
    return e;
  }();
  return entries;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& e : registry()) {
    if (e.key == key) {
      e.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

void RunConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("config: expected key=value, got '" + std::string(assignment) + "'");
  }
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::parse(std::string_view text, std::string_view origin) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    try {
      apply_override(line);
    } catch (const ConfigError& err) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + err.what());
    }
  }
}

void RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError("config: cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  parse(ss.str(), path.string());
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& e : registry()) {
    out += e.key + "=" + e.get(*this) + "\n";
  }
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& e : registry()) {
    out.push_back(e.key);
  }
  return out;
}

void RunConfig::validate() const {
  ModelConfig m = model;
  if (m.vocab_size == 0) {
    m.vocab_size = kNumSpecials + 1;  // filled in from the vocabulary later
  }
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  train.validate();
  finetune.validate();
  const double mask_sum = mask.mask_prob + mask.random_prob + mask.keep_prob;
  if (mask.mask_rate < 0 || mask.mask_rate > 1 || std::abs(mask_sum - 1.0) > 1e-9) {
    throw ConfigError("config: mask rates must be in [0, 1] and the proportions must sum to 1");
  }
  if (pipeline.max_fragment < 2 || pipeline.context_ratio <= 0 || pipeline.context_ratio >= 1) {
    throw ConfigError("config: pipeline.max_fragment >= 2 and 0 < context_ratio < 1 required");
  }
  if (decode.beam < 1 || decode.max_len < 1 || decode.max_len > model.max_target) {
    throw ConfigError("config: decode.beam >= 1 and 1 <= decode.max_len <= model.max_target required");
  }
  if (vocab_size <= kNumSpecials || threads < 1) {
    throw ConfigError("config: vocab.size must exceed the special tokens and run.threads must be >= 1");
  }
}

}  // namespace palm
