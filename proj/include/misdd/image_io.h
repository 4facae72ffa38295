#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "misdd/data_synth.h"
#include "misdd/metrics.h"

namespace misdd {

/// 8-bit PNG writer; `channels` is 1 (gray) or 3 (RGB), rows packed.
void write_png(const std::filesystem::path& path, int height, int width, int channels,
               const std::vector<std::uint8_t>& pixels);

/// Map values in [0, 1] as 8-bit grayscale.
void write_score_png(const std::filesystem::path& path, const ScoreMap& map);

/// Jet-colored map alpha-blended over `base` (1 or 3 channels, values in [0, 1]).
void write_overlay_png(const std::filesystem::path& path, const Image& base, const ScoreMap& map,
                       double alpha = 0.5);

/// Raw tensor file (float64, H x W).
void write_score_tensor(const std::filesystem::path& path, const ScoreMap& map);

}  // namespace misdd
