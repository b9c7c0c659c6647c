#include "cdepth/text_prior.hpp"

#include <cctype>
#include <random>
#include <sstream>

#include "cdepth/rng.hpp"

namespace cdepth {

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<unk>"}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>") {
    throw VocabularyError("vocabulary must start with <pad>, <unk>");
  }
  for (const auto& t : tokens) {
    if (ids_.count(t) != 0) throw VocabularyError("duplicate vocabulary entry '" + t + "'");
    if (tokens_.size() > 0xFFFF) throw VocabularyError("vocabulary exceeds 65536 entries");
    ids_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }
}

TokenId Vocabulary::add(const std::string& word) {
  if (auto it = ids_.find(word); it != ids_.end()) return it->second;
  if (tokens_.size() > 0xFFFF) throw VocabularyError("vocabulary exceeds 65536 entries");
  const auto id = static_cast<TokenId>(tokens_.size());
  ids_.emplace(word, id);
  tokens_.push_back(word);
  return id;
}

TokenId Vocabulary::lookup(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnknown : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return ids_.count(std::string(word)) != 0; }

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::string lowered(text);
  for (char& c : lowered) {
    if (static_cast<unsigned char>(c) > 0x7F) throw VocabularyError("tokenize: text must be ASCII");
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  std::istringstream words(lowered);
  std::vector<TokenId> ids;
  for (std::string w; words >> w;) ids.push_back(vocab.lookup(w));
  return ids;
}

std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

FrozenEmbedder::FrozenEmbedder(std::uint64_t seed, std::size_t vocab_size, int width)
    : seed_(seed) {
  if (vocab_size == 0 || width <= 0) throw ConfigError("embedder needs a non-empty vocabulary and positive width");
  table_.resize(static_cast<Index>(vocab_size), width);
  auto rng = make_rng(seed, 0xE3BED);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < table_.size(); ++i) table_.data()[i] = normal(rng);
}

Eigen::VectorXd FrozenEmbedder::embed(const std::vector<TokenId>& ids) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(table_.cols());
  if (ids.empty()) return out;
  for (TokenId id : ids) {
    if (id >= table_.rows()) {
      throw ContractError("embed: token id " + std::to_string(id) + " >= vocabulary size " +
                          std::to_string(table_.rows()));
    }
    out += table_.row(id).transpose();
  }
  return out / static_cast<double>(ids.size());
}

}  // namespace cdepth
