#pragma once

#include <cstdint>
#include <filesystem>
#include <map>

#include "ctd/dataset.hpp"

namespace ctd::data {

/// Generator settings for the desk-scale surrogate dataset. Healthy
/// images are a smoothed mirror-symmetric texture; sick images add
/// mirrored blob pairs; TB images add one-sided blobs that are recorded
/// as boxes. The whole image is then perturbed by a small random
/// shift/rotation so the symmetry is only approximate, like a real
/// acquisition. Identical seeds reproduce identical bytes.
struct SynthConfig {
    std::map<ImageClass, int> counts;
    int image_size = 64;
    int lesion_count_min = 1;
    int lesion_count_max = 3;
    double lesion_size_min = 10.0;  // box side, pixels
    double lesion_size_max = 22.0;
    double lesion_contrast_min = 0.30;
    double lesion_contrast_max = 0.55;
    /// Peak amplitude of the symmetric background texture; its bumps are
    /// what an asymmetry-blind detector confuses with lesions.
    double background_amplitude = 0.45;
    /// Shift in pixels (and an equivalent edge rotation) applied to the
    /// whole chest; 0 keeps healthy images exactly mirror-symmetric.
    double jitter_px = 1.5;
    uint64_t seed = 0;
    std::string split = "train";

    void validate_fields() const;
};

/// Writes `<out_dir>/images/*.png` plus `<out_dir>/<split>.json` and
/// returns the in-memory index.
DatasetIndex generate_synthetic(const SynthConfig& cfg,
                                const std::filesystem::path& out_dir);

}  // namespace ctd::data
