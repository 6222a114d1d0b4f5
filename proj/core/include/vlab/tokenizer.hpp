#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "vlab/common.hpp"

namespace vlab::lm {

// Closed-world tokenizer: lowercase words plus punctuation, with four special
// tokens. Ids follow the sorted order of the vocabulary, so the serialized
// word list (one token per line) has id == line index.
class Tokenizer {
 public:
  Tokenizer();

  Index vocab_size() const { return static_cast<Index>(tokens_.size()); }

  Index pad_id() const { return pad_; }
  Index bos_id() const { return bos_; }
  Index eos_id() const { return eos_; }
  Index vis_id() const { return vis_; }

  // Lowercases, separates punctuation, maps every token to its id.
  // Unknown words are a contract error (the world is closed); plain text can
  // never produce a special id.
  std::vector<Index> encode(const std::string& text) const;

  // Inverse of encode up to whitespace: words joined by single spaces,
  // punctuation attached to the preceding word.
  std::string decode(const std::vector<Index>& ids) const;

  const std::string& token(Index id) const;
  Index id_of(const std::string& token) const;
  bool has_token(const std::string& token) const;

  // One token per line, in id order (which is sorted order).
  std::string serialize() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Index> ids_;
  Index pad_ = -1, bos_ = -1, eos_ = -1, vis_ = -1;
};

const Tokenizer& tokenizer();  // process-wide singleton (vocab is fixed)

}  // namespace vlab::lm
