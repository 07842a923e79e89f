#pragma once

#include "clipcl/method_config.hpp"
#include "clipcl/vocabulary.hpp"

#include <ostream>
#include <random>
#include <vector>

namespace clipcl {

/// K_s pseudo-sentences acting as pseudo-classes for distillation.
struct ReplayedVocabulary {
  std::vector<TextSequence> sequences;
  ReplaySource source = ReplaySource::Random;

  [[nodiscard]] std::size_t size() const { return sequences.size(); }
};

/// K_s sequences of exactly M tokens drawn uniformly with replacement from
/// [0, vocab_size).
ReplayedVocabulary build_replayed_vocabulary(std::size_t vocab_size, int sample_length, int replay_count,
                                             std::mt19937_64& rng);

/// K_s whole captions drawn uniformly with replacement from a corpus.
ReplayedVocabulary sample_caption_replay(const std::vector<TextSequence>& corpus, int replay_count,
                                         std::mt19937_64& rng);

/// One sequence per line, tokens joined by single spaces.
void write_replay_dump(std::ostream& out, const ReplayedVocabulary& replay, const Vocabulary& vocab);

}  // namespace clipcl
