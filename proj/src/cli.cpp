#include "palm/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "palm/checkpoint.hpp"
#include "palm/corpus.hpp"
#include "palm/tokenizer.hpp"
#include "palm/training.hpp"

namespace palm::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string name;
  // subcommand-specific
  std::string corpus, vocab, pairs, train_pairs, test_pairs, checkpoint, resume, input, out;
  std::optional<int> size;
  int stop_after = -1;
  std::vector<std::string> arms;
};

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

class Run {
 public:
  Run(const std::string& name, const RunConfig& rc, std::string_view command) {
    const char* root = std::getenv("PALM_RUN_DIR");
    dir_ = fs::path(root != nullptr && *root != '\0' ? root : "runs") / name;
    fs::create_directories(dir_);
    std::ofstream cfg(dir_ / "config.resolved", std::ios::binary | std::ios::trunc);
    cfg << "# palm " << kVersion << " " << command << "\n" << rc.serialize();
    log_.open(dir_ / "log.txt", std::ios::binary | std::ios::trunc);
    line(std::string("palm ") + std::string(kVersion) + " " + std::string(command));
    if (!cfg || !log_) {
      throw std::runtime_error("cannot write run directory " + dir_.string());
    }
  }

  [[nodiscard]] const fs::path& dir() const { return dir_; }
  void line(const std::string& text) { log_ << text << '\n' << std::flush; }

 private:
  fs::path dir_;
  std::ofstream log_;
};

std::string step_line(const StepLog& l) {
  std::ostringstream s;
  s << "step=" << l.step << " stage=" << l.stage << " loss=" << fixed(l.loss) << " gen=" << fixed(l.gen_loss)
    << " mlm=" << fixed(l.mlm_loss) << " lr=" << format_double(l.lr) << " grad_norm=" << fixed(l.grad_norm)
    << " clamped=" << l.clamped << " skipped=" << l.skipped;
  return s.str();
}

std::string require(const std::string& value, const char* what) {
  if (value.empty()) {
    throw UsageError(std::string("missing ") + what);
  }
  return value;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
}

fs::path out_path(const Options& o, const Run& run, const char* fallback) {
  return o.out.empty() ? run.dir() / fallback : fs::path(o.out);
}

RunConfig resolve(const Options& o) {
  RunConfig rc;
  if (!o.config.empty()) {
    rc.load(o.config);
  }
  for (const auto& s : o.sets) {
    rc.apply_override(s);
  }
  if (o.seed) {
    rc.train.seed = *o.seed;
    rc.finetune.seed = *o.seed;
  }
  if (o.threads) {
    rc.threads = *o.threads;
  }
  if (o.size) {
    rc.vocab_size = *o.size;
  }
  if (!o.corpus.empty()) {
    rc.corpus = o.corpus;
  }
  if (!o.train_pairs.empty()) {
    rc.train_pairs = o.train_pairs;
  }
  if (!o.test_pairs.empty()) {
    rc.test_pairs = o.test_pairs;
  }
  rc.validate();
  return rc;
}

ModelConfig model_for_vocab(const RunConfig& rc, const Vocab& vocab) {
  ModelConfig m = rc.model;
  if (m.vocab_size != 0 && m.vocab_size != vocab.size()) {
    throw ConfigError("model.vocab_size=" + std::to_string(m.vocab_size) + " but the vocabulary has " +
                      std::to_string(vocab.size()) + " tokens");
  }
  m.vocab_size = vocab.size();
  return m;
}

std::vector<Example> supervised_examples(const std::vector<TextPair>& pairs, const Vocab& vocab,
                                         const ModelConfig& cfg) {
  std::vector<Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back(make_example(p.source, p.target, vocab, cfg));
  }
  return out;
}

std::string samples_text(const EvalReport& report) {
  std::string s;
  for (const auto& sample : report.samples) {
    s += sample.generated + "\n";
  }
  return s;
}

// ---- subcommands ---------------------------------------------------------------

void cmd_vocab(const Options& o, const RunConfig& rc, Run& run, std::ostream& out) {
  const auto path = fs::path(require(o.out, "--out"));
  const auto vocab = build_vocab(read_corpus(require(rc.corpus, "--corpus")), rc.vocab_size);
  vocab.save(path);
  run.line("vocab tokens=" + std::to_string(vocab.size()));
  out << "wrote " << vocab.size() << " tokens to " << path.string() << "\n";
}

void cmd_fragments(const Options& o, const RunConfig& rc, Run& run, std::ostream& out) {
  const auto vocab = Vocab::load(require(o.vocab, "--vocab"));
  const auto path = fs::path(require(o.out, "--out"));
  const auto frags = corpus_fragments(read_corpus(require(rc.corpus, "--corpus")), vocab, rc.pipeline_config());
  write_pairs(path, frags);
  const auto stats = format_stats(fragment_stats(frags));
  write_file(run.dir() / "report.txt", stats);
  run.line("fragments pairs=" + std::to_string(frags.size()));
  out << stats;
}

void cmd_pretrain(const Options& o, const RunConfig& rc, Run& run, std::ostream& out) {
  const auto vocab = Vocab::load(require(o.vocab, "--vocab"));
  const auto model = model_for_vocab(rc, vocab);
  std::vector<Fragment> frags;
  if (!o.pairs.empty()) {
    frags = read_pairs(o.pairs);
  } else {
    frags = corpus_fragments(read_corpus(require(rc.corpus, "--pairs or --corpus")), vocab, rc.pipeline_config());
  }
  PretrainOptions po;
  po.checkpoint_dir = run.dir() / "checkpoints";
  po.threads = rc.threads;
  po.stop_after = o.stop_after;
  if (!o.resume.empty()) {
    po.resume = load_checkpoint(o.resume);
  }
  po.on_step = [&](const StepLog& l) {
    run.line(step_line(l));
    if (l.step % 100 == 0) {
      out << "step " << l.step << " loss " << fixed(l.loss) << "\n";
    }
  };
  const auto ckpt = pretrain(std::span<const Fragment>(frags), vocab, model, rc.train, rc.mask, po);
  const auto path = out_path(o, run, "checkpoints/final.plmc");
  save_checkpoint(path, ckpt);
  run.line("saved " + path.string());
  out << "saved " << path.string() << "\n";
}

void cmd_finetune(const Options& o, const RunConfig& rc, Run& run, std::ostream& out) {
  const auto vocab = Vocab::load(require(o.vocab, "--vocab"));
  const auto base = load_checkpoint(require(o.checkpoint, "--checkpoint"));
  const auto pairs = read_text_pairs(require(o.pairs.empty() ? rc.train_pairs : o.pairs, "--pairs"));
  const auto examples = supervised_examples(pairs, vocab, base.params.config);
  const auto ckpt = finetune(base, examples, vocab, rc.finetune, rc.threads,
                             [&](const StepLog& l) { run.line(step_line(l)); });
  const auto path = out_path(o, run, "checkpoints/finetuned.plmc");
  save_checkpoint(path, ckpt);
  run.line("saved " + path.string());
  out << "saved " << path.string() << "\n";
}

void cmd_generate(const Options& o, const RunConfig& rc, Run& run, std::ostream& out) {
  const auto vocab = Vocab::load(require(o.vocab, "--vocab"));
  const auto ckpt = load_checkpoint(require(o.checkpoint, "--checkpoint"));
  std::ifstream in(require(o.input, "--input"), std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot read " + o.input);
  }
  const bool pointer = checkpoint_uses_pointer(ckpt);
  std::string text;
  std::string line;
  while (std::getline(in, line)) {
    std::replace(line.begin(), line.end(), '\t', ' ');
    const auto ex = make_example(line, "", vocab, ckpt.params.config);
    const auto best = generate(ckpt.params, ex, rc.decode, pointer);
    text += decode(best.output(), ex.ext) + "\n";
  }
  const auto path = out_path(o, run, "samples.txt");
  write_file(path, text);
  run.line("generated to " + path.string());
  out << text;
}

void cmd_eval(const Options& o, const RunConfig& rc, Run& run, std::ostream& out) {
  const auto vocab = Vocab::load(require(o.vocab, "--vocab"));
  const auto ckpt = load_checkpoint(require(o.checkpoint, "--checkpoint"));
  const auto pairs = read_text_pairs(require(o.pairs.empty() ? rc.test_pairs : o.pairs, "--pairs"));
  const auto report = evaluate(ckpt.params, pairs, vocab, rc.decode, checkpoint_uses_pointer(ckpt), rc.threads);
  const auto text = report.serialize();
  write_file(out_path(o, run, "report.txt"), text);
  write_file(run.dir() / "samples.txt", samples_text(report));
  out << text.substr(0, text.find("\n\n") + 1);
}

void cmd_ablate(const Options& o, const RunConfig& rc, Run& run, std::ostream& out) {
  std::vector<std::string> arms{"full"};
  for (const auto& a : kArms) {
    if (a != "full" && std::find(o.arms.begin(), o.arms.end(), a) != o.arms.end()) {
      arms.push_back(a);
    }
  }
  if (o.arms.empty()) {
    arms = kArms;
  }

  Vocab vocab;
  const auto corpus = read_corpus(require(rc.corpus, "data.corpus"));
  if (!o.vocab.empty()) {
    vocab = Vocab::load(o.vocab);
  } else {
    vocab = build_vocab(corpus, rc.vocab_size);
    vocab.save(run.dir() / "vocab.txt");
  }
  const auto model = model_for_vocab(rc, vocab);
  const auto frags = corpus_fragments(corpus, vocab, rc.pipeline_config());
  const auto train = supervised_examples(read_text_pairs(require(rc.train_pairs, "data.train_pairs")), vocab, model);
  const auto test = read_text_pairs(require(rc.test_pairs, "data.test_pairs"));
  run.line("ablate fragments=" + std::to_string(frags.size()) + " train=" + std::to_string(train.size()) +
           " test=" + std::to_string(test.size()));

  const auto report_path = out_path(o, run, "report.txt");
  write_file(report_path, ablation_header());
  write_file(run.dir() / "samples.txt", "");
  std::optional<Checkpoint> full_pretrained;
  for (const auto& arm : arms) {
    TrainConfig tc = rc.train;
    tc.no_pointer = arm == "no_pointer";
    tc.no_autoencoding = arm == "no_autoencoding";
    tc.no_autoregression = arm == "no_autoregression";
    tc.no_pretraining = arm == "no_pretraining";
    const auto ckpt_dir = run.dir() / "checkpoints" / arm;
    Checkpoint base;
    if (tc.no_autoregression && full_pretrained) {
      base = without_autoregression(*full_pretrained, tc.seed);
    } else {
      PretrainOptions po;
      po.checkpoint_dir = ckpt_dir;
      po.threads = rc.threads;
      po.on_step = [&](const StepLog& l) { run.line(arm + " pretrain " + step_line(l)); };
      base = pretrain(std::span<const Fragment>(frags), vocab, model, tc, rc.mask, po);
    }
    if (arm == "full") {
      full_pretrained = base;
    }
    const auto tuned = finetune(base, train, vocab, rc.finetune, rc.threads,
                                [&](const StepLog& l) { run.line(arm + " finetune " + step_line(l)); });
    save_checkpoint(ckpt_dir / "finetuned.plmc", tuned);
    AblationRow row{arm, evaluate(tuned.params, test, vocab, rc.decode, checkpoint_uses_pointer(tuned), rc.threads)};
    {
      std::ofstream rep(report_path, std::ios::binary | std::ios::app);
      rep << ablation_line(row);
      std::ofstream samples(run.dir() / "samples.txt", std::ios::binary | std::ios::app);
      for (const auto& s : row.report.samples) {
        samples << arm << '\t' << s.generated << '\n';
      }
    }
    run.line(ablation_line(row).substr(0, ablation_line(row).size() - 1));
    out << ablation_line(row);
  }
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "key=value config file");
  sub->add_option("--set", o.sets, "override a config key (key=value), repeatable")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sub->add_option("--seed", o.seed, "seed for all randomness (train.seed and finetune.seed)");
  sub->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
  sub->add_option("--name", o.name, "run name (default: the subcommand)");
}

}  // namespace

std::string ablation_header() { return "arm\trouge1_f1\trouge2_f1\trougeL_f1\tperplexity\n"; }

std::string ablation_line(const AblationRow& row) {
  const auto& r = row.report;
  return row.arm + "\t" + fixed(r.rouge1.f1) + "\t" + fixed(r.rouge2.f1) + "\t" + fixed(r.rougeL.f1) + "\t" +
         fixed(r.perplexity) + "\n";
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"PALM: joint autoencoding and autoregressive pre-training for context-conditioned generation",
               "palm"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Options o;

  auto* vocab = app.add_subcommand("vocab", "build a subword vocabulary from a corpus");
  add_common(vocab, o);
  vocab->add_option("--corpus", o.corpus, "corpus file or directory");
  vocab->add_option("--size", o.size, "target vocabulary size")->check(CLI::PositiveNumber);
  vocab->add_option("--out", o.out, "vocabulary file to write")->required();

  auto* fragments = app.add_subcommand("fragments", "cut a corpus into context/continuation pairs");
  add_common(fragments, o);
  fragments->add_option("--corpus", o.corpus, "corpus file or directory");
  fragments->add_option("--vocab", o.vocab, "vocabulary file")->required();
  fragments->add_option("--out", o.out, "pair file to write")->required();

  auto* pretrain_cmd = app.add_subcommand("pretrain", "two-stage pre-training");
  add_common(pretrain_cmd, o);
  pretrain_cmd->add_option("--vocab", o.vocab, "vocabulary file")->required();
  pretrain_cmd->add_option("--pairs", o.pairs, "pair file from `palm fragments`");
  pretrain_cmd->add_option("--corpus", o.corpus, "corpus to fragment on the fly when --pairs is absent");
  pretrain_cmd->add_option("--resume", o.resume, "checkpoint to resume from");
  pretrain_cmd->add_option("--stop-after", o.stop_after, "stop after this step");
  pretrain_cmd->add_option("--out", o.out, "final checkpoint path");

  auto* finetune_cmd = app.add_subcommand("finetune", "supervised fine-tuning on source/target pairs");
  add_common(finetune_cmd, o);
  finetune_cmd->add_option("--checkpoint", o.checkpoint, "pre-trained checkpoint")->required();
  finetune_cmd->add_option("--vocab", o.vocab, "vocabulary file")->required();
  finetune_cmd->add_option("--pairs", o.pairs, "tab-separated training pairs (default: data.train_pairs)");
  finetune_cmd->add_option("--out", o.out, "fine-tuned checkpoint path");

  auto* generate_cmd = app.add_subcommand("generate", "beam-search generation, one source per input line");
  add_common(generate_cmd, o);
  generate_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint")->required();
  generate_cmd->add_option("--vocab", o.vocab, "vocabulary file")->required();
  generate_cmd->add_option("--input", o.input, "source lines")->required();
  generate_cmd->add_option("--out", o.out, "output file (default: samples.txt in the run directory)");

  auto* eval_cmd = app.add_subcommand("eval", "perplexity and ROUGE on held-out pairs");
  add_common(eval_cmd, o);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint")->required();
  eval_cmd->add_option("--vocab", o.vocab, "vocabulary file")->required();
  eval_cmd->add_option("--pairs", o.pairs, "tab-separated test pairs (default: data.test_pairs)");
  eval_cmd->add_option("--out", o.out, "report path (default: report.txt in the run directory)");

  auto* ablate_cmd = app.add_subcommand("ablate", "pretrain, fine-tune and evaluate each ablation arm");
  add_common(ablate_cmd, o);
  ablate_cmd->add_option("--arm", o.arms, "arm to run, repeatable (default: all); full is always included")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->check(CLI::IsMember(kArms));
  ablate_cmd->add_option("--vocab", o.vocab, "vocabulary file (default: build one from data.corpus)");
  ablate_cmd->add_option("--corpus", o.corpus, "pre-training corpus");
  ablate_cmd->add_option("--train-pairs", o.train_pairs, "fine-tuning pairs");
  ablate_cmd->add_option("--test-pairs", o.test_pairs, "evaluation pairs");
  ablate_cmd->add_option("--out", o.out, "ablation report path (default: report.txt in the run directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "palm: " << e.what() << "\n";
    return kUsageError;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    const RunConfig rc = resolve(o);
    Run run(o.name.empty() ? command : o.name, rc, command);
    if (command == "vocab") {
      cmd_vocab(o, rc, run, out);
    } else if (command == "fragments") {
      cmd_fragments(o, rc, run, out);
    } else if (command == "pretrain") {
      cmd_pretrain(o, rc, run, out);
    } else if (command == "finetune") {
      cmd_finetune(o, rc, run, out);
    } else if (command == "generate") {
      cmd_generate(o, rc, run, out);
    } else if (command == "eval") {
      cmd_eval(o, rc, run, out);
    } else {
      cmd_ablate(o, rc, run, out);
    }
  } catch (const ConfigError& e) {
    err << "palm " << command << ": " << e.what() << "\n";
    return kUsageError;
  } catch (const UsageError& e) {
    err << "palm " << command << ": " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "palm " << command << ": " << e.what() << "\n";
    return kDataError;
  }
  return kOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"palm"};
  for (const auto& a : args) {
    argv.push_back(a.c_str());
  }
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace palm::cli
