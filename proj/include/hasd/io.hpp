#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hasd/adapt.hpp"
#include "hasd/matrix.hpp"
#include "hasd/mil.hpp"

namespace hasd {

// Feature container: little-endian, magic "HASD", u32 version=1,
// u32 n_rows, u32 n_cols, then n_rows*n_cols real32 row-major.
// Checkpoint container: magic "HASM", u32 version=1, u32 tensor_count,
// then per tensor { u32 name_len, name bytes, u32 rank, u32 dims..., real32 payload }.
// Values are real64 in memory and real32 at rest; loads widen.

inline constexpr std::uint32_t kContainerVersion = 1;

void write_features(const std::filesystem::path& path, const Matrix& features);
Matrix read_features(const std::filesystem::path& path);

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<double> values;

    static NamedTensor from_matrix(std::string name, const Matrix& m);
    static NamedTensor from_vector(std::string name, const std::vector<double>& v);
    static NamedTensor from_scalar(std::string name, double v);

    Matrix to_matrix() const;
    std::vector<double> to_vector() const;
    double to_scalar() const;
};

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

// Tensor names "V", "w", "clf_weight", "clf_bias".
void save_model(const std::filesystem::path& path, const MilModel& model);
MilModel load_model(const std::filesystem::path& path);

// Tensor names "W", "bias".
void save_transport_map(const std::filesystem::path& path, const TransportMap& map);
TransportMap load_transport_map(const std::filesystem::path& path);

// JSON manifest describing one domain. file_path entries resolve relative
// to the manifest's own directory.
struct SlideRef {
    std::string slide_id;
    std::string file_path;
    std::uint32_t n_patches = 0;
    std::optional<int> label;
};

struct DomainManifest {
    std::string domain_name;
    std::uint32_t feature_dim = 0;
    std::vector<SlideRef> slides;
    std::filesystem::path base_dir;  // set on load, used to resolve file_path
};

void write_manifest(const std::filesystem::path& path, const DomainManifest& manifest);
DomainManifest read_manifest(const std::filesystem::path& path);

// Loads every slide's features; validates n_patches against each file header.
std::vector<SlideBag> load_bags(const DomainManifest& manifest);

}  // namespace hasd
