#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cerase/autodiff/rng.hpp"
#include "cerase/autodiff/tensor.hpp"

namespace cerase::diffusion {

inline constexpr std::size_t kVocabSize = 32;
inline constexpr std::size_t kEmbeddingDim = 16;
inline constexpr std::size_t kMaxPromptLength = 12;
inline constexpr int kNullToken = 0;

/// Token id of concept k (0-based). Concept tokens follow the null token.
inline constexpr int concept_token(int concept_id) { return 1 + concept_id; }

struct Prompt {
  std::vector<int> tokens;
  friend bool operator==(const Prompt&, const Prompt&) = default;
};

std::string to_string(const Prompt& prompt);

/// Token table with learned embeddings. Id 0 is the null token; ids
/// 1..concept_count are concept tokens; the rest are filler words.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::size_t concept_count, ad::Tensor embeddings);

  static Vocabulary random(std::size_t concept_count, Rng& rng, double scale = 1.0);

  std::size_t size() const { return kVocabSize; }
  std::size_t concept_count() const { return concept_count_; }
  int null_token() const { return kNullToken; }
  int first_filler() const { return static_cast<int>(concept_count_) + 1; }
  bool valid(int token) const { return token >= 0 && static_cast<std::size_t>(token) < kVocabSize; }

  /// Throws std::invalid_argument for an empty, over-long or out-of-vocabulary prompt.
  void validate(const Prompt& prompt) const;

  const ad::Tensor& embeddings() const { return embeddings_; }
  ad::Tensor& embeddings() { return embeddings_; }

  /// Mean-pooled conditioning vector of a prompt.
  std::vector<float> encode(const Prompt& prompt) const;

 private:
  std::size_t concept_count_ = 0;
  ad::Tensor embeddings_;  // [kVocabSize, kEmbeddingDim]
};

/// Bag-of-tokens pooling matrix [prompts, kVocabSize]: row r holds
/// count(token) / length for prompt r, so bag x embeddings = mean pooling.
ad::Tensor pooling_matrix(const std::vector<Prompt>& prompts, const Vocabulary& vocab);

Prompt null_prompt();
/// Concept token followed by `fillers` random filler tokens.
Prompt concept_prompt(int concept_id, std::size_t fillers, const Vocabulary& vocab, Rng& rng);

}  // namespace cerase::diffusion
