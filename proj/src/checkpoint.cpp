#include "udc/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "udc/config.hpp"
#include "udc/error.hpp"

namespace udc {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void put_floats(std::ostream& out, const Tensor& t) {
  std::vector<unsigned char> bytes(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &t[i], 4);
    for (int k = 0; k < 4; ++k) bytes[i * 4 + k] = static_cast<unsigned char>(u >> (8 * k));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  model.check_shapes();
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["dtype"] = "float32";
  header["config"] = to_json(model.config);
  header["vocab_size"] = model.vocab_size;
  header["freeze_embeddings"] = model.freeze_embeddings;
  header["rng_seed"] = model.rng_seed;
  auto& tensors = header["tensors"];
  tensors = nlohmann::ordered_json::array();
  for (const auto* p : model.parameters()) tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* p : model.parameters()) put_floats(out, p->value);
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, const std::optional<EncoderConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(where + ": bad magic bytes");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw FormatError(where + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": unreadable header: " + e.what());
  }

  Model model;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError(where + ": format version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    if (header.at("dtype").get<std::string>() != "float32") throw FormatError(where + ": unsupported dtype");
    model.config = encoder_config_from_json(header.at("config"));
    model.vocab_size = header.at("vocab_size").get<std::size_t>();
    model.freeze_embeddings = header.at("freeze_embeddings").get<bool>();
    model.rng_seed = header.at("rng_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed header: " + e.what());
  }
  model.config.validate();
  if (expected && !(*expected == model.config)) {
    throw ShapeError(where + ": stored encoder config " + to_json(model.config).dump() +
                     " does not match the requested " + to_json(*expected).dump());
  }

  // Build the expected parameter set, then fill it from the payload.
  EmbeddingMatrix zeros;
  zeros.embed_dim = model.config.embed_dim;
  zeros.rows = model.vocab_size;
  zeros.values.assign(model.vocab_size * static_cast<std::size_t>(model.config.embed_dim), 0.0f);
  const bool freeze = model.freeze_embeddings;
  const auto seed = model.rng_seed;
  model = init_model<float>(model.config, zeros, seed);
  model.freeze_embeddings = freeze;

  const auto& tensors = header.at("tensors");
  auto params = model.parameters();
  if (!tensors.is_array() || tensors.size() != params.size()) {
    throw ShapeError(where + ": tensor count does not match the encoder config");
  }
  std::size_t offset = 16 + header_len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    const auto name = tensors[i].at("name").get<std::string>();
    const auto shape = tensors[i].at("shape").get<std::vector<std::size_t>>();
    if (name != p->name || shape != p->value.shape()) {
      throw ShapeError(where + ": tensor " + name + " " + shape_string(shape) + " does not match expected " + p->name +
                       " " + shape_string(p->value.shape()));
    }
    const std::size_t n = p->value.size();
    if (bytes.size() - offset < n * 4) throw FormatError(where + ": truncated payload in tensor " + name);
    for (std::size_t k = 0; k < n; ++k) {
      const unsigned char* b = bytes.data() + offset + k * 4;
      const std::uint32_t u = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                              std::uint32_t(b[3]) << 24;
      std::memcpy(&p->value[k], &u, 4);
    }
    offset += n * 4;
  }
  if (offset != bytes.size()) throw FormatError(where + ": trailing bytes after payload");
  return model;
}

}  // namespace udc
