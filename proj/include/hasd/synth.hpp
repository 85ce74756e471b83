#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hasd/io.hpp"
#include "hasd/matrix.hpp"
#include "hasd/mil.hpp"

namespace hasd {

// Domain-shift recipe applied to target features: x -> x Q + mu + noise.
struct ShiftSpec {
    bool orthogonal_warp = true;
    double warp_strength = 2.6;  // identity bias of the orthogonal warp
    double translation = 0.3;
    double noise_sigma = 0.1;
};

struct SynthSpec {
    std::uint32_t n_slides = 60;  // per domain
    std::uint32_t patches_min = 64;
    std::uint32_t patches_max = 256;
    std::uint32_t feature_dim = 32;
    double signal_fraction = 0.15;  // diagnostic patches in positive slides
    ShiftSpec shift;
    double prevalence_src = 0.5;
    double prevalence_tgt = 0.5;
    std::uint64_t seed = 0;
};

// What actually generated the data: the warp, the translation and the
// cluster means. Persisted so benchmarks can score recovery against it.
struct SynthGroundTruth {
    Matrix warp;                      // M x M orthogonal (identity if no warp)
    std::vector<double> translation;  // M
    Matrix background_means;          // n_background x M
    std::vector<double> signal_mean;  // M
};

struct SynthResult {
    std::vector<SlideBag> source;
    std::vector<SlideBag> target;
    SynthGroundTruth truth;
};

// Draws both domains from one cluster process, then shifts the target.
// Bitwise reproducible for a fixed spec.
SynthResult generate(const SynthSpec& spec);

// generate + persist: writes <out>/source/manifest.json with feature files,
// same for target, and <out>/groundtruth.hasm.
struct SynthPaths {
    std::filesystem::path source_manifest;
    std::filesystem::path target_manifest;
    std::filesystem::path ground_truth;
};
SynthPaths write_synth(const SynthSpec& spec, const std::filesystem::path& out_dir);

void save_ground_truth(const std::filesystem::path& path, const SynthGroundTruth& truth);
SynthGroundTruth load_ground_truth(const std::filesystem::path& path);

// Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
Matrix random_orthogonal(std::size_t dim, Rng& rng);

}  // namespace hasd
