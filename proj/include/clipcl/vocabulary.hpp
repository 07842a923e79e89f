#pragma once

#include "clipcl/common.hpp"

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace clipcl {

/// Ordered token list; a token's id is its position.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  /// Appends a token if it is not present yet and returns its id.
  TokenId add(std::string_view token);

  [[nodiscard]] TokenId id(std::string_view token) const;
  [[nodiscard]] bool contains(std::string_view token) const;
  [[nodiscard]] const std::string& token(TokenId id) const;
  [[nodiscard]] std::size_t size() const { return tokens_.size(); }
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

  /// Splits on whitespace and maps every piece to its id. Throws
  /// InvalidInput on any out-of-vocabulary piece.
  [[nodiscard]] std::vector<TokenId> tokenize(std::string_view text) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// A non-empty run of token ids bound to some vocabulary.
struct TextSequence {
  std::vector<TokenId> ids;

  [[nodiscard]] std::size_t size() const { return ids.size(); }
  bool operator==(const TextSequence&) const = default;
};

/// Throws InvalidInput when the sequence is empty, too long, or holds an id
/// outside [0, vocab_size).
void validate_sequence(const TextSequence& seq, std::size_t vocab_size, std::size_t max_len);

std::string join_tokens(const TextSequence& seq, const Vocabulary& vocab);

/// Prefix and suffix around a class-name slot.
struct PromptTemplate {
  std::vector<std::string> prefix;
  std::vector<std::string> suffix;

  /// "this is a photo of [Class Name] ."
  static PromptTemplate photo_of();
  static PromptTemplate empty() { return {}; }

  [[nodiscard]] std::vector<std::string> all_tokens() const;
};

TextSequence render_prompt(std::string_view class_name, const PromptTemplate& tmpl,
                           const Vocabulary& vocab);

}  // namespace clipcl
