#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "cerase/diffusion/denoiser.hpp"
#include "cerase/eval/probe.hpp"
#include "cerase/pruning/mask.hpp"

namespace cerase::io {

namespace fs = std::filesystem;
using Json = nlohmann::json;

/// Binary container shared by all artifacts:
///   magic[4] | u32 version | u64 n | manifest JSON[n] | u64 m | payload[m] | u64 digest
/// Integers are little-endian; the digest is FNV-1a over every preceding byte.
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "EFCK";
inline constexpr std::string_view kMaskMagic = "EFMK";
inline constexpr std::string_view kProbeMagic = "EFPB";

struct Container {
  Json manifest;
  std::string payload;
};

std::string encode_container(std::string_view magic, const Container& c);
/// Throws std::runtime_error naming the byte offset of the first problem.
Container decode_container(std::string_view magic, std::string_view bytes);

struct Checkpoint {
  diffusion::DenoiserModel model;
  /// Free-form provenance (config hash, seeds, parent digests).
  Json provenance = Json::object();
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

/// Hard bits are bit-packed (LSB first); logits are stored only when present.
std::string encode_mask(const pruning::ParamMask& mask, const Json& provenance = Json::object());
pruning::ParamMask decode_mask(std::string_view bytes, Json* provenance = nullptr);
void save_mask(const fs::path& path, const pruning::ParamMask& mask, const Json& provenance = Json::object());
pruning::ParamMask load_mask(const fs::path& path, Json* provenance = nullptr);

std::string encode_probe(const eval::ProbeClassifier& probe);
eval::ProbeClassifier decode_probe(std::string_view bytes);
void save_probe(const fs::path& path, const eval::ProbeClassifier& probe);
eval::ProbeClassifier load_probe(const fs::path& path);

/// Loads a checkpoint and a mask file and returns theta* (.) M_hard. The
/// checkpoint itself is not modified.
diffusion::DenoiserModel apply_mask_file(const fs::path& checkpoint, const fs::path& mask);

Json to_json(const diffusion::ModelConfig& config);
diffusion::ModelConfig model_config_from_json(const Json& j);

}  // namespace cerase::io
