#include "pepdpo/sequence.hpp"

#include "pepdpo/error.hpp"

namespace pepdpo {

Token token_from_char(char c) {
  const auto pos = kAlphabet.find(c);
  if (pos == std::string_view::npos)
    fail(ErrorKind::InvalidInput, std::string("invalid amino-acid token '") + c + "'");
  return static_cast<Token>(pos);
}

Sequence::Sequence(std::vector<Token> tokens) : tokens_(std::move(tokens)) {
  for (Token t : tokens_)
    if (t >= kNumTokens) fail(ErrorKind::InvalidInput, "token index out of range");
}

Sequence Sequence::from_string(std::string_view letters) {
  std::vector<Token> tokens;
  tokens.reserve(letters.size());
  for (char c : letters) tokens.push_back(token_from_char(c));
  return Sequence(std::move(tokens));
}

std::string Sequence::str() const {
  std::string s;
  s.reserve(tokens_.size());
  for (Token t : tokens_) s.push_back(token_to_char(t));
  return s;
}

double hamming_fraction(const Sequence& a, const Sequence& b) {
  if (a.size() != b.size())
    fail(ErrorKind::Dimension, "hamming_fraction: lengths " + std::to_string(a.size()) + " and " +
                                   std::to_string(b.size()) + " differ");
  if (a.empty()) fail(ErrorKind::InvalidInput, "hamming_fraction: empty sequences");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

}  // namespace pepdpo
