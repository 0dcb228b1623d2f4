// Writes the synthetic desk data set: a story corpus for pre-training and
// copy-heavy summarization pairs for fine-tuning and evaluation.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "toy_data.hpp"

namespace {

bool write(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  return static_cast<bool>(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate the synthetic desk corpus and copy-task pairs", "make_toy_data"};
  std::string out_dir = "data/toy";
  std::uint64_t seed = 1;
  std::size_t corpus_bytes = 1'000'000;
  std::size_t train = 2000;
  std::size_t test = 100;
  app.add_option("--out", out_dir, "output directory")->capture_default_str();
  app.add_option("--seed", seed, "generator seed")->capture_default_str();
  app.add_option("--corpus-bytes", corpus_bytes, "approximate corpus size")->capture_default_str();
  app.add_option("--train", train, "number of training pairs")->capture_default_str();
  app.add_option("--test", test, "number of test pairs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  // train and test draw from disjoint generator streams
  const bool ok = write(dir / "corpus.txt", palm::toy::make_corpus(seed, corpus_bytes)) &&
                  write(dir / "train.tsv", palm::toy::format_pairs(palm::toy::make_copy_task(seed * 2 + 1000, train))) &&
                  write(dir / "test.tsv", palm::toy::format_pairs(palm::toy::make_copy_task(seed * 2 + 1001, test)));
  if (!ok) {
    std::cerr << "make_toy_data: cannot write to " << out_dir << "\n";
    return 2;
  }
  std::cout << "wrote corpus.txt, train.tsv, test.tsv to " << out_dir << "\n";
  return 0;
}
