#include "vlab/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace vlab::lm {

namespace {

const char* kWords[] = {
    // grammar words of the shapes world
    "a", "above", "and", "below", "blue", "circle", "down", "green", "left",
    "moving", "of", "red", "right", "square", "triangle", "up", "yellow",
    // question/answer vocabulary
    "are", "color", "direction", "how", "is", "it", "many", "no", "object",
    "objects", "one", "shape", "there", "three", "two", "what", "which", "yes",
    // prompt vocabulary
    "answer", "describe", "exactly", "following", "given", "images", "in",
    "question", "the", "word",
    // punctuation
    ":", "?", ".", ",",
    // specials
    "<pad>", "<bos>", "<eos>", "<vis>",
};

bool is_punct_token(char c) { return c == ':' || c == '?' || c == '.' || c == ','; }

}  // namespace

Tokenizer::Tokenizer() {
  tokens_.assign(std::begin(kWords), std::end(kWords));
  std::sort(tokens_.begin(), tokens_.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    ids_[tokens_[i]] = static_cast<Index>(i);
  pad_ = ids_.at("<pad>");
  bos_ = ids_.at("<bos>");
  eos_ = ids_.at("<eos>");
  vis_ = ids_.at("<vis>");
}

std::vector<Index> Tokenizer::encode(const std::string& text) const {
  std::vector<Index> out;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    auto it = ids_.find(word);
    check(it != ids_.end(), "tokenizer: unknown token '" + word + "'");
    check(it->second != pad_ && it->second != bos_ && it->second != eos_ &&
              it->second != vis_,
          "tokenizer: special token '" + word + "' in plain text");
    out.push_back(it->second);
    word.clear();
  };
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct_token(c)) {
      flush();
      word = c;
      flush();
    } else {
      word += c;
    }
  }
  flush();
  return out;
}

std::string Tokenizer::decode(const std::vector<Index>& ids) const {
  std::string out;
  for (Index id : ids) {
    const std::string& t = token(id);
    if (t.size() == 1 && is_punct_token(t[0])) {
      out += t;
    } else {
      if (!out.empty()) out += ' ';
      out += t;
    }
  }
  return out;
}

const std::string& Tokenizer::token(Index id) const {
  check(id >= 0 && id < vocab_size(), "tokenizer: id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

Index Tokenizer::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  check(it != ids_.end(), "tokenizer: unknown token '" + token + "'");
  return it->second;
}

bool Tokenizer::has_token(const std::string& token) const {
  return ids_.count(token) > 0;
}

std::string Tokenizer::serialize() const {
  std::ostringstream os;
  for (const auto& t : tokens_) os << t << '\n';
  return os.str();
}

const Tokenizer& tokenizer() {
  static Tokenizer tok;
  return tok;
}

}  // namespace vlab::lm
