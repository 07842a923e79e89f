#include "clipcl/replay.hpp"

namespace clipcl {

ReplayedVocabulary build_replayed_vocabulary(std::size_t vocab_size, int sample_length, int replay_count,
                                             std::mt19937_64& rng) {
  if (replay_count < 2) throw InvalidInput("replay needs K_s >= 2 pseudo-classes");
  if (sample_length < 1) throw InvalidInput("sampling length M must be >= 1");
  if (vocab_size < 1) throw InvalidInput("empty vocabulary");
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab_size - 1));
  ReplayedVocabulary out;
  out.source = ReplaySource::Random;
  out.sequences.resize(static_cast<std::size_t>(replay_count));
  for (auto& seq : out.sequences) {
    seq.ids.resize(static_cast<std::size_t>(sample_length));
    for (auto& id : seq.ids) id = pick(rng);
  }
  return out;
}

ReplayedVocabulary sample_caption_replay(const std::vector<TextSequence>& corpus, int replay_count,
                                         std::mt19937_64& rng) {
  if (replay_count < 2) throw InvalidInput("replay needs K_s >= 2 pseudo-classes");
  if (corpus.empty()) throw InvalidInput("empty caption corpus");
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  ReplayedVocabulary out;
  out.source = ReplaySource::CaptionCorpus;
  for (int i = 0; i < replay_count; ++i) out.sequences.push_back(corpus[pick(rng)]);
  return out;
}

void write_replay_dump(std::ostream& out, const ReplayedVocabulary& replay, const Vocabulary& vocab) {
  for (const auto& seq : replay.sequences) out << join_tokens(seq, vocab) << '\n';
}

}  // namespace clipcl
