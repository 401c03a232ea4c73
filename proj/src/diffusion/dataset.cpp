#include "cerase/diffusion/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cerase::diffusion {

std::string family_name(int label) {
  static const std::array<const char*, 5> names{"disc", "cross", "stripes", "checker", "background"};
  if (label < 0 || label >= kClassCount) return "unknown";
  return names[static_cast<std::size_t>(label)];
}

namespace {

constexpr int kSuper = 4;

/// Supersampled coverage of an indicator over each pixel, mapped to [-1, 1].
template <class F>
std::vector<float> rasterize(F&& inside, double contrast) {
  std::vector<float> img(kImagePixels);
  for (std::size_t py = 0; py < kImageSide; ++py) {
    for (std::size_t px = 0; px < kImageSide; ++px) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double x = static_cast<double>(px) + (sx + 0.5) / kSuper;
          const double y = static_cast<double>(py) + (sy + 0.5) / kSuper;
          hits += inside(x, y) ? 1 : 0;
        }
      }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      img[py * kImageSide + px] = static_cast<float>(contrast * (2.0 * cover - 1.0));
    }
  }
  return img;
}

}  // namespace

std::vector<float> render(Family family, Rng& rng) {
  const double contrast = rng.uniform(0.8, 1.0);
  switch (family) {
    case Family::kDisc: {
      const double cx = 4.0 + rng.uniform(-0.8, 0.8);
      const double cy = 4.0 + rng.uniform(-0.8, 0.8);
      const double r = rng.uniform(2.2, 3.0);
      return rasterize([&](double x, double y) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; },
                       contrast);
    }
    case Family::kCross: {
      const double cx = 4.0 + rng.uniform(-0.7, 0.7);
      const double cy = 4.0 + rng.uniform(-0.7, 0.7);
      const double half_width = rng.uniform(0.55, 0.85);
      const double arm = rng.uniform(2.6, 3.6);
      return rasterize(
          [&](double x, double y) {
            const double dx = std::abs(x - cx);
            const double dy = std::abs(y - cy);
            return (dx <= half_width && dy <= arm) || (dy <= half_width && dx <= arm);
          },
          contrast);
    }
    case Family::kStripes: {
      const double period = rng.uniform(2.6, 3.4);
      const double phase = rng.uniform(0.0, period);
      const double duty = rng.uniform(0.4, 0.6);
      return rasterize(
          [&](double x, double) {
            const double u = std::fmod(x + phase, period) / period;
            return u < duty;
          },
          contrast);
    }
    case Family::kChecker: {
      const double cell = rng.uniform(1.8, 2.4);
      const double ox = rng.uniform(0.0, 2.0 * cell);
      const double oy = rng.uniform(0.0, 2.0 * cell);
      return rasterize(
          [&](double x, double y) {
            const auto ix = static_cast<long>(std::floor((x + ox) / cell));
            const auto iy = static_cast<long>(std::floor((y + oy) / cell));
            return ((ix + iy) & 1L) == 0;
          },
          contrast);
    }
    case Family::kBackground: {
      // Smooth low-contrast ramp: generic imagery with no glyph structure.
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double slope = rng.uniform(0.05, 0.15);
      const double offset = rng.uniform(-0.5, 0.1);
      std::vector<float> img(kImagePixels);
      for (std::size_t py = 0; py < kImageSide; ++py) {
        for (std::size_t px = 0; px < kImageSide; ++px) {
          const double u = (static_cast<double>(px) - 3.5) * std::cos(angle) + (static_cast<double>(py) - 3.5) * std::sin(angle);
          img[py * kImageSide + px] = static_cast<float>(std::clamp(offset + slope * u, -1.0, 1.0));
        }
      }
      return img;
    }
  }
  throw std::invalid_argument("render: unknown family");
}

ad::Tensor Split::images_of(int label) const {
  std::size_t n = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
  ad::Tensor out({n, kImagePixels});
  std::size_t r = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != label) continue;
    std::copy_n(images.data().data() + i * kImagePixels, kImagePixels, out.data().data() + r * kImagePixels);
    ++r;
  }
  return out;
}

namespace {

Split build_split(const DatasetConfig& cfg, std::string_view split_tag, std::size_t per_concept,
                  std::size_t background) {
  const Rng root = Rng(cfg.seed).split("dataset").split(split_tag);
  const std::size_t total = per_concept * kConceptCount + background;
  Split split;
  split.images = ad::Tensor({total, kImagePixels});
  split.labels.reserve(total);
  std::size_t row = 0;
  for (int label = 0; label < kClassCount; ++label) {
    const std::size_t count = label == kBackgroundLabel ? background : per_concept;
    for (std::size_t i = 0; i < count; ++i) {
      Rng rng = root.split(static_cast<std::uint64_t>(label)).split(i);
      const auto img = render(static_cast<Family>(label), rng);
      std::copy(img.begin(), img.end(), split.images.data().data() + row * kImagePixels);
      split.labels.push_back(label);
      ++row;
    }
  }
  return split;
}

}  // namespace

ConceptDataset make_dataset(const DatasetConfig& config) {
  if (config.train_per_concept == 0 || config.heldout_per_concept == 0) {
    throw std::invalid_argument("make_dataset: every concept needs train and held-out samples");
  }
  ConceptDataset ds;
  ds.config = config;
  ds.train = build_split(config, "train", config.train_per_concept, config.train_background);
  ds.heldout = build_split(config, "heldout", config.heldout_per_concept, config.heldout_background);
  return ds;
}

}  // namespace cerase::diffusion
