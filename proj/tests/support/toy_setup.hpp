#pragma once

// Small end-to-end data setups shared by the training, decoding and acceptance
// tests.

#include <string>
#include <vector>

#include "palm/corpus.hpp"
#include "palm/model.hpp"
#include "palm/tokenizer.hpp"
#include "toy_data.hpp"

namespace palm::toy {

struct Setup {
  std::string corpus;
  Vocab vocab;
  PipelineConfig pipeline;
  std::vector<Fragment> fragments;
};

inline Setup make_setup(std::uint64_t seed, std::size_t bytes, int vocab_size, int max_fragment) {
  Setup s;
  s.corpus = make_corpus(seed, bytes);
  s.vocab = build_vocab(s.corpus, vocab_size);
  s.pipeline.max_fragment = max_fragment;
  s.pipeline.max_context = 400;
  s.pipeline.max_target = 100;
  s.fragments = corpus_fragments(s.corpus, s.vocab, s.pipeline);
  return s;
}

inline ModelConfig model_for(const Vocab& vocab, int hidden, int layers = 1, int heads = 4) {
  ModelConfig c = ModelConfig::desk_preset(vocab.size());
  c.enc_layers = layers;
  c.dec_layers = layers;
  c.hidden = hidden;
  c.ffn = 4 * hidden;
  c.heads = heads;
  return c;
}

}  // namespace palm::toy
