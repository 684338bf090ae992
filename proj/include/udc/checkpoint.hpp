#pragma once

// Checkpoint layout:
//   8 bytes   magic "UDCMDL01"
//   8 bytes   header length N, little-endian uint64
//   N bytes   UTF-8 JSON header: format_version, dtype, config, vocab_size,
//             freeze_embeddings, rng_seed, tensors [{name, shape}]
//   payload   each tensor's values as little-endian float32, in header order

#include <filesystem>
#include <optional>

#include "udc/nn.hpp"

namespace udc {

inline constexpr char kCheckpointMagic[8] = {'U', 'D', 'C', 'M', 'D', 'L', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);

/// Throws FormatError on bad magic, version or truncation and ShapeError when a
/// tensor disagrees with the header config or with `expected` (when given).
Model load_checkpoint(const std::filesystem::path& path, const std::optional<EncoderConfig>& expected = std::nullopt);

}  // namespace udc
