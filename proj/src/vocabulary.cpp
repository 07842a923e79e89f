#include "clipcl/vocabulary.hpp"

#include <sstream>

namespace clipcl {

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  for (auto& t : tokens) {
    if (contains(t)) throw InvalidInput("duplicate token '" + t + "' in vocabulary");
    add(t);
  }
}

TokenId Vocabulary::add(std::string_view token) {
  if (token.empty()) throw InvalidInput("empty token");
  auto it = index_.find(std::string(token));
  if (it != index_.end()) return it->second;
  auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  index_.emplace(tokens_.back(), id);
  return id;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw InvalidInput("token '" + std::string(token) + "' is not in the vocabulary");
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.find(std::string(token)) != index_.end();
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw InvalidInput("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  std::istringstream in{std::string(text)};
  std::string piece;
  while (in >> piece) ids.push_back(id(piece));
  return ids;
}

void validate_sequence(const TextSequence& seq, std::size_t vocab_size, std::size_t max_len) {
  if (seq.ids.empty()) throw InvalidInput("empty text sequence");
  if (seq.ids.size() > max_len)
    throw InvalidInput("text sequence of length " + std::to_string(seq.ids.size()) +
                       " exceeds max_seq_len " + std::to_string(max_len));
  for (TokenId id : seq.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
      throw InvalidInput("unknown token id " + std::to_string(id));
  }
}

std::string join_tokens(const TextSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(seq.ids[i]);
  }
  return out;
}

PromptTemplate PromptTemplate::photo_of() {
  return PromptTemplate{{"this", "is", "a", "photo", "of"}, {"."}};
}

std::vector<std::string> PromptTemplate::all_tokens() const {
  std::vector<std::string> out(prefix);
  out.insert(out.end(), suffix.begin(), suffix.end());
  return out;
}

TextSequence render_prompt(std::string_view class_name, const PromptTemplate& tmpl,
                           const Vocabulary& vocab) {
  TextSequence seq;
  for (const auto& t : tmpl.prefix) seq.ids.push_back(vocab.id(t));
  auto name_ids = vocab.tokenize(class_name);
  if (name_ids.empty()) throw InvalidInput("empty class name");
  seq.ids.insert(seq.ids.end(), name_ids.begin(), name_ids.end());
  for (const auto& t : tmpl.suffix) seq.ids.push_back(vocab.id(t));
  return seq;
}

}  // namespace clipcl
