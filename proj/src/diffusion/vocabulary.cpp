#include "cerase/diffusion/vocabulary.hpp"

#include <sstream>
#include <stdexcept>

namespace cerase::diffusion {

std::string to_string(const Prompt& prompt) {
  std::ostringstream os;
  for (std::size_t i = 0; i < prompt.tokens.size(); ++i) os << (i ? " " : "") << prompt.tokens[i];
  return os.str();
}

Vocabulary::Vocabulary(std::size_t concept_count, ad::Tensor embeddings)
    : concept_count_(concept_count), embeddings_(std::move(embeddings)) {
  if (concept_count_ == 0 || concept_count_ + 1 >= kVocabSize) {
    throw std::invalid_argument("vocabulary: concept count must leave room for null and filler tokens");
  }
  if (embeddings_.shape() != ad::Shape{kVocabSize, kEmbeddingDim}) {
    throw std::invalid_argument("vocabulary: embeddings must be [32,16], got " +
                                ad::shape_string(embeddings_.shape()));
  }
}

Vocabulary Vocabulary::random(std::size_t concept_count, Rng& rng, double scale) {
  ad::Tensor e({kVocabSize, kEmbeddingDim});
  for (auto& v : e.values()) v = static_cast<float>(scale * rng.normal());
  return Vocabulary(concept_count, std::move(e));
}

void Vocabulary::validate(const Prompt& prompt) const {
  if (prompt.tokens.empty()) throw std::invalid_argument("prompt: empty token sequence");
  if (prompt.tokens.size() > kMaxPromptLength) {
    throw std::invalid_argument("prompt: length " + std::to_string(prompt.tokens.size()) + " exceeds " +
                                std::to_string(kMaxPromptLength));
  }
  for (int t : prompt.tokens) {
    if (!valid(t)) throw std::invalid_argument("prompt: unknown token id " + std::to_string(t));
  }
}

std::vector<float> Vocabulary::encode(const Prompt& prompt) const {
  validate(prompt);
  // Accumulate by token id so the result does not depend on token order.
  std::vector<int> counts(kVocabSize, 0);
  for (int t : prompt.tokens) ++counts[static_cast<std::size_t>(t)];
  std::vector<double> acc(kEmbeddingDim, 0.0);
  for (std::size_t t = 0; t < kVocabSize; ++t) {
    if (counts[t] == 0) continue;
    for (std::size_t d = 0; d < kEmbeddingDim; ++d) acc[d] += counts[t] * static_cast<double>(embeddings_.at(t, d));
  }
  std::vector<float> out(kEmbeddingDim);
  for (std::size_t d = 0; d < kEmbeddingDim; ++d) {
    out[d] = static_cast<float>(acc[d] / static_cast<double>(prompt.tokens.size()));
  }
  return out;
}

ad::Tensor pooling_matrix(const std::vector<Prompt>& prompts, const Vocabulary& vocab) {
  ad::Tensor bag({prompts.size(), kVocabSize});
  for (std::size_t r = 0; r < prompts.size(); ++r) {
    vocab.validate(prompts[r]);
    const float w = 1.0f / static_cast<float>(prompts[r].tokens.size());
    for (int t : prompts[r].tokens) bag.at(r, static_cast<std::size_t>(t)) += w;
  }
  return bag;
}

Prompt null_prompt() { return Prompt{{kNullToken}}; }

Prompt concept_prompt(int concept_id, std::size_t fillers, const Vocabulary& vocab, Rng& rng) {
  if (fillers + 1 > kMaxPromptLength) throw std::invalid_argument("concept_prompt: too many fillers");
  Prompt p;
  p.tokens.push_back(concept_token(concept_id));
  for (std::size_t i = 0; i < fillers; ++i) {
    p.tokens.push_back(static_cast<int>(rng.uniform_int(vocab.first_filler(), static_cast<int>(kVocabSize) - 1)));
  }
  return p;
}

}  // namespace cerase::diffusion
