#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cerase/autodiff/rng.hpp"
#include "cerase/autodiff/tensor.hpp"

namespace cerase::diffusion {

inline constexpr std::size_t kImageSide = 8;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;

/// Glyph families. The first four are the concepts; kBackground is the
/// generic imagery paired with the null prompt.
enum class Family { kDisc = 0, kCross = 1, kStripes = 2, kChecker = 3, kBackground = 4 };

inline constexpr int kConceptCount = 4;
inline constexpr int kBackgroundLabel = 4;
inline constexpr int kClassCount = 5;

std::string family_name(int label);

/// Renders one anti-aliased 8x8 image in [-1, 1] with per-sample jitter.
std::vector<float> render(Family family, Rng& rng);

struct DatasetConfig {
  std::uint64_t seed = 1;
  std::size_t train_per_concept = 512;
  std::size_t heldout_per_concept = 256;
  std::size_t train_background = 1024;
  std::size_t heldout_background = 256;
};

struct Split {
  ad::Tensor images;        // [N, 64]
  std::vector<int> labels;  // family label per row
  std::size_t size() const { return labels.size(); }
  /// Rows with the given label, in order.
  ad::Tensor images_of(int label) const;
};

/// Synthetic multi-concept data. Each (family, split) pool is generated from
/// its own rng stream, so pools are independent of each other's sizes.
struct ConceptDataset {
  DatasetConfig config;
  Split train;
  Split heldout;
};

ConceptDataset make_dataset(const DatasetConfig& config);

}  // namespace cerase::diffusion
