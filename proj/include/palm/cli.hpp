#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "palm/config.hpp"
#include "palm/decode.hpp"

namespace palm::cli {

inline constexpr std::string_view kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsageError = 1, kDataError = 2 };

/// Entry point of the `palm` binary. Subcommands: vocab, fragments, pretrain,
/// finetune, generate, eval, ablate. Every run writes into
/// <run root>/<name>/ (config.resolved, log.txt, plus command outputs), where the
/// run root is $PALM_RUN_DIR or ./runs.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

inline const std::vector<std::string> kArms = {"full", "no_pointer", "no_autoencoding", "no_autoregression",
                                               "no_pretraining"};

struct AblationRow {
  std::string arm;
  EvalReport report;
};

/// Header plus one tab-separated line per arm.
std::string ablation_header();
std::string ablation_line(const AblationRow& row);

}  // namespace palm::cli
