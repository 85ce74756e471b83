#include "hasd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hasd/error.hpp"

namespace hasd {

namespace {

// Near-unit feature scale keeps squared-euclidean costs commensurate with
// the default entropic weight and the adaptation step size. Cluster masses
// are deliberately unequal so couplings cannot swap clusters for free,
// and the signal radius ties a background radius so no class signal
// survives an orthogonal warp through vector norms alone.
constexpr double kBackgroundRadii[] = {0.6, 1.0, 1.4};
constexpr double kBackgroundWeights[] = {0.60, 0.27, 0.13};
constexpr std::size_t kBackgroundCount = 3;
constexpr double kSignalLinePosition = 2.2;  // along the bg1 -> bg2 line
constexpr double kClusterSigma = 0.12;

// Per-slide batch effect: one Gaussian offset shared by all patches of a
// slide. Sets the bag-level noise floor that a misaligned classifier
// cannot beat.
constexpr double kSlideOffsetSigma = 0.06;

std::vector<double> random_direction(std::size_t dim, Rng& rng) {
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm += x * x;
        }
    } while (norm < 1e-12);
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

std::size_t pick_background(Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t c = 0; c < kBackgroundCount; ++c) {
        acc += kBackgroundWeights[c];
        if (u < acc) return c;
    }
    return kBackgroundCount - 1;
}

// Positive slides draw signal patches in place of same-radius background
// mass, so the per-patch radius distribution matches negative slides and
// the class signal lives in directions only. Index kBackgroundCount means
// "signal".
std::size_t pick_positive_component(double signal_fraction, Rng& rng) {
    const double u = rng.uniform();
    const double bg3 = std::max(kBackgroundWeights[2] - signal_fraction, 0.0);
    const double scale = signal_fraction <= kBackgroundWeights[2]
        ? 1.0
        : (1.0 - signal_fraction) / (kBackgroundWeights[0] + kBackgroundWeights[1]);
    double acc = kBackgroundWeights[0] * scale;
    if (u < acc) return 0;
    acc += kBackgroundWeights[1] * scale;
    if (u < acc) return 1;
    acc += bg3;
    if (u < acc) return 2;
    return kBackgroundCount;
}

std::vector<int> make_labels(std::uint32_t n_slides, double prevalence, Rng& rng) {
    const auto n_pos = static_cast<std::uint32_t>(
        std::lround(prevalence * static_cast<double>(n_slides)));
    if (n_pos == 0 || n_pos >= n_slides) {
        throw ArgumentError("generate: prevalence " + std::to_string(prevalence) +
                            " infeasible for " + std::to_string(n_slides) + " slides");
    }
    std::vector<int> labels(n_slides, 0);
    std::fill(labels.begin(), labels.begin() + n_pos, 1);
    // Fisher-Yates with the shared stream keeps label placement seeded.
    for (std::size_t i = labels.size() - 1; i > 0; --i) {
        std::swap(labels[i], labels[rng.index(i + 1)]);
    }
    return labels;
}

std::vector<SlideBag> draw_domain(const SynthSpec& spec, const std::string& prefix,
                                  const std::vector<int>& labels,
                                  const SynthGroundTruth& truth, Rng& rng) {
    const std::size_t dim = spec.feature_dim;
    std::vector<SlideBag> bags;
    bags.reserve(labels.size());
    for (std::size_t n = 0; n < labels.size(); ++n) {
        const std::uint32_t span = spec.patches_max - spec.patches_min + 1;
        const auto p = spec.patches_min + static_cast<std::uint32_t>(rng.index(span));
        const bool positive = labels[n] == 1;

        SlideBag bag;
        char id[32];
        std::snprintf(id, sizeof(id), "%s_%03zu", prefix.c_str(), n);
        bag.slide_id = id;
        bag.label = labels[n];
        bag.features = Matrix(p, dim);
        std::vector<double> offset(dim);
        for (auto& v : offset) v = kSlideOffsetSigma * rng.normal();
        bool has_signal = false;
        for (std::uint32_t i = 0; i < p; ++i) {
            auto row = bag.features.row(i);
            std::size_t c = positive ? pick_positive_component(spec.signal_fraction, rng)
                                     : pick_background(rng);
            if (positive && i + 1 == p && !has_signal) c = kBackgroundCount;
            if (c == kBackgroundCount) {
                has_signal = true;
                for (std::size_t k = 0; k < dim; ++k)
                    row[k] = truth.signal_mean[k] + offset[k] + kClusterSigma * rng.normal();
            } else {
                for (std::size_t k = 0; k < dim; ++k)
                    row[k] = truth.background_means(c, k) + offset[k] +
                             kClusterSigma * rng.normal();
            }
        }
        bags.push_back(std::move(bag));
    }
    return bags;
}

void shift_domain(std::vector<SlideBag>& bags, const SynthGroundTruth& truth,
                  double noise_sigma, Rng& rng) {
    const std::size_t dim = truth.translation.size();
    std::vector<double> tmp(dim);
    for (auto& bag : bags) {
        for (std::size_t i = 0; i < bag.features.rows(); ++i) {
            auto row = bag.features.row(i);
            for (std::size_t k = 0; k < dim; ++k) {
                double s = 0.0;
                for (std::size_t j = 0; j < dim; ++j) s += row[j] * truth.warp(j, k);
                tmp[k] = s + truth.translation[k] + noise_sigma * rng.normal();
            }
            std::copy(tmp.begin(), tmp.end(), row.begin());
        }
    }
}

}  // namespace

namespace {

// Orthogonalizes I + strength * G with Gaussian G of row norm ~strength.
Matrix perturbed_orthogonal(std::size_t dim, double strength, Rng& rng) {
    Matrix q = Matrix::identity(dim);
    const double scale = strength / std::sqrt(static_cast<double>(dim));
    for (double& v : q.data()) v += scale * rng.normal();
    for (std::size_t i = 0; i < dim; ++i) {
        auto ri = q.row(i);
        for (std::size_t j = 0; j < i; ++j) {
            const auto rj = q.row(j);
            double dot = 0.0;
            for (std::size_t k = 0; k < dim; ++k) dot += ri[k] * rj[k];
            for (std::size_t k = 0; k < dim; ++k) ri[k] -= dot * rj[k];
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < dim; ++k) norm += ri[k] * ri[k];
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw NumericError("perturbed_orthogonal: degenerate draw");
        for (std::size_t k = 0; k < dim; ++k) ri[k] /= norm;
    }
    return q;
}

}  // namespace

Matrix random_orthogonal(std::size_t dim, Rng& rng) {
    Matrix q(dim, dim);
    for (double& v : q.data()) v = rng.normal();
    // Gram-Schmidt over rows.
    for (std::size_t i = 0; i < dim; ++i) {
        auto ri = q.row(i);
        for (std::size_t j = 0; j < i; ++j) {
            const auto rj = q.row(j);
            double dot = 0.0;
            for (std::size_t k = 0; k < dim; ++k) dot += ri[k] * rj[k];
            for (std::size_t k = 0; k < dim; ++k) ri[k] -= dot * rj[k];
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < dim; ++k) norm += ri[k] * ri[k];
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw NumericError("random_orthogonal: degenerate draw");
        for (std::size_t k = 0; k < dim; ++k) ri[k] /= norm;
    }
    return q;
}

SynthResult generate(const SynthSpec& spec) {
    if (spec.feature_dim == 0) throw ArgumentError("generate: feature_dim must be >= 1");
    if (spec.patches_min == 0 || spec.patches_min > spec.patches_max) {
        throw ArgumentError("generate: invalid patch range [" +
                            std::to_string(spec.patches_min) + ", " +
                            std::to_string(spec.patches_max) + "]");
    }
    if (spec.n_slides < 2) throw ArgumentError("generate: need at least 2 slides per domain");
    if (!(spec.signal_fraction > 0.0 && spec.signal_fraction < 1.0)) {
        throw ArgumentError("generate: signal_fraction must be in (0,1)");
    }
    if (!(spec.prevalence_src > 0.0 && spec.prevalence_src < 1.0) ||
        !(spec.prevalence_tgt > 0.0 && spec.prevalence_tgt < 1.0)) {
        throw ArgumentError("generate: prevalence must be in (0,1)");
    }

    Rng rng(spec.seed);
    const std::size_t dim = spec.feature_dim;

    SynthResult out;
    out.truth.background_means = Matrix(kBackgroundCount, dim);
    for (std::size_t c = 0; c < kBackgroundCount; ++c) {
        const auto dir = random_direction(dim, rng);
        for (std::size_t k = 0; k < dim; ++k)
            out.truth.background_means(c, k) = kBackgroundRadii[c] * dir[k];
    }
    {
        // The diagnostic cluster sits on the affine line through the two
        // heaviest background clusters, past the second one. An affine map
        // that places those mass-anchored clusters correctly then places
        // the signal cluster too (affine combinations commute with T), and
        // the asymmetric 1-D mass pattern along the line cannot be flipped
        // under balanced marginals, which keeps adaptation out of
        // cluster-swap optima.
        out.truth.signal_mean.resize(dim);
        for (std::size_t k = 0; k < dim; ++k) {
            out.truth.signal_mean[k] = out.truth.background_means(0, k) +
                kSignalLinePosition * (out.truth.background_means(1, k) -
                                       out.truth.background_means(0, k));
        }
    }
    out.truth.warp = spec.shift.orthogonal_warp
        ? perturbed_orthogonal(dim, spec.shift.warp_strength, rng)
        : Matrix::identity(dim);
    out.truth.translation.assign(dim, 0.0);
    if (spec.shift.translation != 0.0) {
        const auto dir = random_direction(dim, rng);
        for (std::size_t k = 0; k < dim; ++k)
            out.truth.translation[k] = spec.shift.translation * dir[k];
    }

    const auto src_labels = make_labels(spec.n_slides, spec.prevalence_src, rng);
    const auto tgt_labels = make_labels(spec.n_slides, spec.prevalence_tgt, rng);
    out.source = draw_domain(spec, "src", src_labels, out.truth, rng);
    out.target = draw_domain(spec, "tgt", tgt_labels, out.truth, rng);
    shift_domain(out.target, out.truth, spec.shift.noise_sigma, rng);
    return out;
}

SynthPaths write_synth(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    const SynthResult result = generate(spec);

    SynthPaths paths;
    auto write_domain = [&](const std::vector<SlideBag>& bags, const std::string& name) {
        const auto domain_dir = out_dir / name;
        std::filesystem::create_directories(domain_dir / "features");
        DomainManifest manifest;
        manifest.domain_name = name;
        manifest.feature_dim = spec.feature_dim;
        for (const auto& bag : bags) {
            const std::string rel = "features/" + bag.slide_id + ".hasd";
            write_features(domain_dir / rel, bag.features);
            manifest.slides.push_back({bag.slide_id, rel,
                                       static_cast<std::uint32_t>(bag.features.rows()),
                                       bag.label});
        }
        const auto manifest_path = domain_dir / "manifest.json";
        write_manifest(manifest_path, manifest);
        return manifest_path;
    };

    paths.source_manifest = write_domain(result.source, "source");
    paths.target_manifest = write_domain(result.target, "target");
    paths.ground_truth = out_dir / "groundtruth.hasm";
    save_ground_truth(paths.ground_truth, result.truth);
    return paths;
}

void save_ground_truth(const std::filesystem::path& path, const SynthGroundTruth& truth) {
    write_checkpoint(path, {NamedTensor::from_matrix("warp", truth.warp),
                            NamedTensor::from_vector("translation", truth.translation),
                            NamedTensor::from_matrix("background_means",
                                                     truth.background_means),
                            NamedTensor::from_vector("signal_mean", truth.signal_mean)});
}

SynthGroundTruth load_ground_truth(const std::filesystem::path& path) {
    const auto tensors = read_checkpoint(path);
    constexpr const char* expected = "warp, translation, background_means, signal_mean";
    auto find = [&](const char* name) -> const NamedTensor& {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw SchemaError(path.string() + ": missing tensor '" + std::string(name) +
                          "' (expected " + expected + ")");
    };
    SynthGroundTruth truth;
    truth.warp = find("warp").to_matrix();
    truth.translation = find("translation").to_vector();
    truth.background_means = find("background_means").to_matrix();
    truth.signal_mean = find("signal_mean").to_vector();
    return truth;
}

}  // namespace hasd
