#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace pepdpo {

inline constexpr std::size_t kNumTokens = 20;
inline constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTVWY";

using Token = std::uint8_t;

// Throws Error(InvalidInput) for letters outside the alphabet.
Token token_from_char(char c);
inline char token_to_char(Token t) { return kAlphabet[t]; }

// Amino-acid string stored as token indices into kAlphabet.
class Sequence {
 public:
  Sequence() = default;
  explicit Sequence(std::vector<Token> tokens);
  static Sequence from_string(std::string_view letters);

  std::string str() const;
  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  Token operator[](std::size_t i) const { return tokens_[i]; }
  const std::vector<Token>& tokens() const { return tokens_; }

  friend bool operator==(const Sequence&, const Sequence&) = default;

 private:
  std::vector<Token> tokens_;
};

// Fraction of positions at which two equal-length sequences differ.
double hamming_fraction(const Sequence& a, const Sequence& b);

}  // namespace pepdpo
