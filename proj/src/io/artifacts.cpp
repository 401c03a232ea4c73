#include "cerase/io/artifacts.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include "cerase/io/files.hpp"

namespace cerase::io {


namespace {

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) fail("truncated (need " + std::to_string(n) + " bytes)");
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U>
  U le() {
    const auto s = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& msg) const {
    throw std::runtime_error(what_ + ": " + msg + " at offset " + std::to_string(pos_));
  }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

Json shape_json(const ad::Shape& s) { return Json(s); }

ad::Shape shape_from(const Json& j) { return j.get<ad::Shape>(); }

void put_tensor(std::string& out, const ad::Tensor& t) {
  for (float f : t.values()) put_f32(out, f);
}

ad::Tensor read_tensor(Reader& r, const ad::Shape& shape) {
  ad::Tensor t(shape);
  for (auto& v : t.values()) v = r.f32();
  return t;
}

}  // namespace

std::string encode_container(std::string_view magic, const Container& c) {
  if (magic.size() != 4) throw std::invalid_argument("container magic must be 4 bytes");
  std::string out(magic);
  put_le<std::uint32_t>(out, kContainerVersion);
  const std::string manifest = c.manifest.dump();
  put_le<std::uint64_t>(out, manifest.size());
  out += manifest;
  put_le<std::uint64_t>(out, c.payload.size());
  out += c.payload;
  put_le<std::uint64_t>(out, digest(out));
  return out;
}

Container decode_container(std::string_view magic, std::string_view bytes) {
  Reader r(bytes, std::string(magic) + " container");
  if (r.take(4) != magic) throw std::runtime_error(std::string(magic) + " container: bad magic at offset 0");
  const auto version = r.le<std::uint32_t>();
  if (version != kContainerVersion) {
    throw std::runtime_error(std::string(magic) + " container: unsupported version " + std::to_string(version) +
                             " at offset 4");
  }
  Container c;
  const auto manifest_size = r.le<std::uint64_t>();
  const std::size_t manifest_at = r.offset();
  const auto manifest = r.take(manifest_size);
  const auto payload_size = r.le<std::uint64_t>();
  c.payload = std::string(r.take(payload_size));
  const std::size_t digest_at = r.offset();
  const auto stored = r.le<std::uint64_t>();
  if (!r.done()) r.fail("trailing bytes");
  if (stored != digest(bytes.substr(0, digest_at))) {
    throw std::runtime_error(std::string(magic) + " container: digest mismatch at offset " + std::to_string(digest_at));
  }
  try {
    c.manifest = Json::parse(manifest);
  } catch (const Json::parse_error& e) {
    throw std::runtime_error(std::string(magic) + " container: malformed manifest at offset " +
                             std::to_string(manifest_at + e.byte - 1));
  }
  return c;
}

Json to_json(const diffusion::ModelConfig& c) {
  return Json{{"hidden", c.hidden},
              {"blocks", c.blocks},
              {"time_dim", c.time_dim},
              {"residual", c.residual},
              {"embedding_scale", c.embedding_scale},
              {"film_bias", c.film_bias},
              {"schedule", {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}}};
}

diffusion::ModelConfig model_config_from_json(const Json& j) {
  diffusion::ModelConfig c;
  c.hidden = j.at("hidden").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.time_dim = j.at("time_dim").get<std::size_t>();
  c.residual = j.at("residual").get<bool>();
  c.embedding_scale = j.at("embedding_scale").get<double>();
  c.film_bias = j.at("film_bias").get<bool>();
  const Json& s = j.at("schedule");
  c.schedule.steps = s.at("steps").get<int>();
  c.schedule.beta_start = s.at("beta_start").get<double>();
  c.schedule.beta_end = s.at("beta_end").get<double>();
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const auto& m = ckpt.model;
  Container c;
  c.manifest["kind"] = "denoiser";
  c.manifest["config"] = to_json(m.config());
  c.manifest["concept_count"] = m.vocab().concept_count();
  c.manifest["provenance"] = ckpt.provenance;
  Json tensors = Json::array();
  tensors.push_back({{"name", diffusion::kEmbeddingParam}, {"shape", shape_json(m.vocab().embeddings().shape())}});
  put_tensor(c.payload, m.vocab().embeddings());
  for (const auto& [name, t] : m.params()) {
    tensors.push_back({{"name", name}, {"shape", shape_json(t.shape())}});
    put_tensor(c.payload, t);
  }
  c.manifest["tensors"] = std::move(tensors);
  return encode_container(kCheckpointMagic, c);
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  const Container c = decode_container(kCheckpointMagic, bytes);
  Checkpoint out;
  try {
    if (c.manifest.at("kind") != "denoiser") throw std::runtime_error("EFCK container: not a denoiser checkpoint");
    const auto config = model_config_from_json(c.manifest.at("config"));
    const auto concepts = c.manifest.at("concept_count").get<std::size_t>();
    Reader r(c.payload, "EFCK payload");
    ad::Tensor embeddings;
    ad::NamedTensors<float> params;
    for (const Json& t : c.manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      ad::Tensor value = read_tensor(r, shape_from(t.at("shape")));
      if (name == diffusion::kEmbeddingParam) {
        embeddings = std::move(value);
      } else if (!params.emplace(name, std::move(value)).second) {
        throw std::runtime_error("EFCK manifest: duplicate tensor " + name);
      }
    }
    if (!r.done()) r.fail("payload longer than manifest");
    out.model = diffusion::DenoiserModel(config, diffusion::Vocabulary(concepts, std::move(embeddings)), std::move(params));
    out.provenance = c.manifest.value("provenance", Json::object());
  } catch (const Json::exception& e) {
    throw std::runtime_error(std::string("EFCK manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("EFCK checkpoint: ") + e.what());
  }
  return out;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) { atomic_write(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const fs::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string encode_mask(const pruning::ParamMask& mask, const Json& provenance) {
  Container c;
  const bool logits = mask.has_logits();
  const bool hard = mask.has_hard();
  c.manifest["kind"] = "mask";
  c.manifest["temperature"] = mask.temperature();
  c.manifest["threshold"] = mask.threshold();
  c.manifest["has_logits"] = logits;
  c.manifest["has_hard"] = hard;
  c.manifest["provenance"] = provenance;
  Json entries = Json::array();
  for (const auto& e : mask.entries()) {
    entries.push_back({{"layer", e.layer}, {"param", e.param}, {"shape", shape_json(e.shape)}});
  }
  c.manifest["entries"] = std::move(entries);
  if (hard) {
    for (const auto& e : mask.entries()) {
      std::uint8_t byte = 0;
      for (std::size_t i = 0; i < e.hard.size(); ++i) {
        if (e.hard[i]) byte |= static_cast<std::uint8_t>(1u << (i % 8));
        if (i % 8 == 7) {
          c.payload.push_back(static_cast<char>(byte));
          byte = 0;
        }
      }
      if (e.hard.size() % 8 != 0) c.payload.push_back(static_cast<char>(byte));
    }
  }
  if (logits) {
    for (const auto& e : mask.entries()) put_tensor(c.payload, e.logits);
  }
  return encode_container(kMaskMagic, c);
}

pruning::ParamMask decode_mask(std::string_view bytes, Json* provenance) {
  const Container c = decode_container(kMaskMagic, bytes);
  pruning::ParamMask mask;
  try {
    if (c.manifest.at("kind") != "mask") throw std::runtime_error("EFMK container: not a mask");
    mask.set_temperature(c.manifest.at("temperature").get<double>());
    mask.set_threshold(c.manifest.at("threshold").get<double>());
    const bool logits = c.manifest.at("has_logits").get<bool>();
    const bool hard = c.manifest.at("has_hard").get<bool>();
    for (const Json& j : c.manifest.at("entries")) {
      pruning::MaskEntry e;
      e.layer = j.at("layer").get<std::string>();
      e.param = j.at("param").get<std::string>();
      e.shape = shape_from(j.at("shape"));
      mask.entries().push_back(std::move(e));
    }
    Reader r(c.payload, "EFMK payload");
    if (hard) {
      for (auto& e : mask.entries()) {
        const std::size_t n = ad::numel(e.shape);
        const auto packed = r.take((n + 7) / 8);
        e.hard.resize(n);
        for (std::size_t i = 0; i < n; ++i) e.hard[i] = (static_cast<unsigned char>(packed[i / 8]) >> (i % 8)) & 1u;
      }
    }
    if (logits) {
      for (auto& e : mask.entries()) e.logits = read_tensor(r, e.shape);
    }
    if (!r.done()) r.fail("payload longer than manifest");
    if (provenance) *provenance = c.manifest.value("provenance", Json::object());
  } catch (const Json::exception& e) {
    throw std::runtime_error(std::string("EFMK manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("EFMK mask: ") + e.what());
  }
  return mask;
}

void save_mask(const fs::path& path, const pruning::ParamMask& mask, const Json& provenance) {
  atomic_write(path, encode_mask(mask, provenance));
}

pruning::ParamMask load_mask(const fs::path& path, Json* provenance) {
  try {
    return decode_mask(read_file(path), provenance);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string encode_probe(const eval::ProbeClassifier& probe) {
  Container c;
  c.manifest["kind"] = "probe";
  c.manifest["heldout_accuracy"] = probe.heldout_accuracy();
  Json tensors = Json::array();
  for (const auto& [name, t] : probe.params()) {
    tensors.push_back({{"name", name}, {"shape", shape_json(t.shape())}});
    put_tensor(c.payload, t);
  }
  c.manifest["tensors"] = std::move(tensors);
  return encode_container(kProbeMagic, c);
}

eval::ProbeClassifier decode_probe(std::string_view bytes) {
  const Container c = decode_container(kProbeMagic, bytes);
  try {
    if (c.manifest.at("kind") != "probe") throw std::runtime_error("EFPB container: not a probe");
    Reader r(c.payload, "EFPB payload");
    ad::NamedTensors<float> params;
    for (const Json& t : c.manifest.at("tensors")) {
      params.emplace(t.at("name").get<std::string>(), read_tensor(r, shape_from(t.at("shape"))));
    }
    if (!r.done()) r.fail("payload longer than manifest");
    eval::ProbeClassifier probe(std::move(params));
    probe.set_heldout_accuracy(c.manifest.at("heldout_accuracy").get<double>());
    return probe;
  } catch (const Json::exception& e) {
    throw std::runtime_error(std::string("EFPB manifest: ") + e.what());
  }
}

void save_probe(const fs::path& path, const eval::ProbeClassifier& probe) { atomic_write(path, encode_probe(probe)); }

eval::ProbeClassifier load_probe(const fs::path& path) {
  try {
    return decode_probe(read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

diffusion::DenoiserModel apply_mask_file(const fs::path& checkpoint, const fs::path& mask) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const pruning::ParamMask m = load_mask(mask);
  if (!m.has_hard()) throw std::runtime_error(mask.string() + ": mask has no hard bits");
  m.check_compatible(ckpt.model);
  return pruning::apply_mask(ckpt.model, m, pruning::MaskMode::kHard);
}

}  // namespace cerase::io
