#include "hasd/io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "hasd/error.hpp"

namespace hasd {

namespace {

using json = nlohmann::ordered_json;

constexpr char kFeatureMagic[4] = {'H', 'A', 'S', 'D'};
constexpr char kCheckpointMagic[4] = {'H', 'A', 'S', 'M'};

// All containers are little-endian; this codebase targets little-endian
// hosts and the writers below store native byte order.

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw ArgumentError("cannot open for writing: " + path.string());
        path_ = path;
    }
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void f32(float v) { bytes(&v, 4); }
    void close() {
        out_.close();
        if (!out_) throw ArgumentError("write failed: " + path_.string());
    }

private:
    std::ofstream out_;
    std::filesystem::path path_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path)
        : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw ArgumentError("cannot open for reading: " + path.string());
    }

    std::uint64_t offset() const { return offset_; }
    const std::filesystem::path& path() const { return path_; }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError(FormatError::Kind::truncated, offset_,
                              path_.string() + ": truncated, expected " + std::to_string(n) +
                                  " more bytes");
        }
        offset_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    float f32() {
        float v;
        bytes(&v, 4);
        return v;
    }
    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

private:
    std::ifstream in_;
    std::filesystem::path path_;
    std::uint64_t offset_ = 0;
};

void read_magic(Reader& r, const char expected[4], const char* what) {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, expected, 4) != 0) {
        throw FormatError(FormatError::Kind::bad_magic, 0,
                          r.path().string() + ": not a " + what + " container, magic '" +
                              std::string(magic, 4) + "'");
    }
}

void read_version(Reader& r) {
    const std::uint64_t at = r.offset();
    const std::uint32_t version = r.u32();
    if (version != kContainerVersion) {
        throw FormatError(FormatError::Kind::bad_version, at,
                          r.path().string() + ": unsupported version " +
                              std::to_string(version));
    }
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors,
                               const std::string& name,
                               const std::filesystem::path& path,
                               const char* expected_list) {
    for (const auto& t : tensors) {
        if (t.name == name) return t;
    }
    throw SchemaError(path.string() + ": missing tensor '" + name + "' (expected " +
                      expected_list + ")");
}

}  // namespace

void write_features(const std::filesystem::path& path, const Matrix& features) {
    for (double v : features.data()) {
        if (!std::isfinite(v)) {
            throw ArgumentError("write_features: non-finite value");
        }
    }
    Writer w(path);
    w.bytes(kFeatureMagic, 4);
    w.u32(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(features.rows()));
    w.u32(static_cast<std::uint32_t>(features.cols()));
    for (double v : features.data()) w.f32(static_cast<float>(v));
    w.close();
}

Matrix read_features(const std::filesystem::path& path) {
    Reader r(path);
    read_magic(r, kFeatureMagic, "feature");
    read_version(r);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    Matrix m(rows, cols);
    for (double& v : m.data()) v = static_cast<double>(r.f32());
    if (!r.at_eof()) {
        throw FormatError(FormatError::Kind::size_mismatch, r.offset(),
                          path.string() + ": payload longer than header " +
                              std::to_string(rows) + "x" + std::to_string(cols));
    }
    return m;
}

NamedTensor NamedTensor::from_matrix(std::string name, const Matrix& m) {
    return {std::move(name),
            {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
            m.data()};
}

NamedTensor NamedTensor::from_vector(std::string name, const std::vector<double>& v) {
    return {std::move(name), {static_cast<std::uint32_t>(v.size())}, v};
}

NamedTensor NamedTensor::from_scalar(std::string name, double v) {
    return {std::move(name), {1}, {v}};
}

Matrix NamedTensor::to_matrix() const {
    if (dims.size() != 2) {
        throw SchemaError("tensor '" + name + "' has rank " + std::to_string(dims.size()) +
                          ", expected 2");
    }
    return Matrix(dims[0], dims[1], values);
}

std::vector<double> NamedTensor::to_vector() const {
    if (dims.size() != 1) {
        throw SchemaError("tensor '" + name + "' has rank " + std::to_string(dims.size()) +
                          ", expected 1");
    }
    return values;
}

double NamedTensor::to_scalar() const {
    if (values.size() != 1) {
        throw SchemaError("tensor '" + name + "' is not a scalar");
    }
    return values[0];
}

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<NamedTensor>& tensors) {
    Writer w(path);
    w.bytes(kCheckpointMagic, 4);
    w.u32(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        std::size_t count = 1;
        for (auto d : t.dims) count *= d;
        if (count != t.values.size()) {
            throw ArgumentError("write_checkpoint: tensor '" + t.name +
                                "' dims do not match value count");
        }
        w.u32(static_cast<std::uint32_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.u32(static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) w.u32(d);
        for (double v : t.values) w.f32(static_cast<float>(v));
    }
    w.close();
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
    Reader r(path);
    read_magic(r, kCheckpointMagic, "checkpoint");
    read_version(r);
    const std::uint32_t count = r.u32();
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        NamedTensor tensor;
        const std::uint32_t name_len = r.u32();
        tensor.name.resize(name_len);
        r.bytes(tensor.name.data(), name_len);
        const std::uint32_t rank = r.u32();
        std::size_t total = 1;
        tensor.dims.resize(rank);
        for (auto& d : tensor.dims) {
            d = r.u32();
            total *= d;
        }
        tensor.values.resize(total);
        for (double& v : tensor.values) v = static_cast<double>(r.f32());
        tensors.push_back(std::move(tensor));
    }
    if (!r.at_eof()) {
        throw FormatError(FormatError::Kind::size_mismatch, r.offset(),
                          path.string() + ": trailing bytes after " + std::to_string(count) +
                              " tensors");
    }
    return tensors;
}

void save_model(const std::filesystem::path& path, const MilModel& model) {
    write_checkpoint(path, {NamedTensor::from_matrix("V", model.V),
                            NamedTensor::from_vector("w", model.w),
                            NamedTensor::from_vector("clf_weight", model.clf_weight),
                            NamedTensor::from_scalar("clf_bias", model.clf_bias)});
}

MilModel load_model(const std::filesystem::path& path) {
    const auto tensors = read_checkpoint(path);
    constexpr const char* expected = "V, w, clf_weight, clf_bias";
    MilModel model;
    model.V = find_tensor(tensors, "V", path, expected).to_matrix();
    model.w = find_tensor(tensors, "w", path, expected).to_vector();
    model.clf_weight = find_tensor(tensors, "clf_weight", path, expected).to_vector();
    model.clf_bias = find_tensor(tensors, "clf_bias", path, expected).to_scalar();
    if (model.w.size() != model.V.rows() || model.clf_weight.size() != model.V.cols()) {
        throw SchemaError(path.string() + ": inconsistent model tensor shapes");
    }
    return model;
}

void save_transport_map(const std::filesystem::path& path, const TransportMap& map) {
    write_checkpoint(path, {NamedTensor::from_matrix("W", map.W),
                            NamedTensor::from_vector("bias", map.bias)});
}

TransportMap load_transport_map(const std::filesystem::path& path) {
    const auto tensors = read_checkpoint(path);
    constexpr const char* expected = "W, bias";
    TransportMap map;
    map.W = find_tensor(tensors, "W", path, expected).to_matrix();
    map.bias = find_tensor(tensors, "bias", path, expected).to_vector();
    if (map.W.rows() != map.W.cols() || map.W.rows() != map.bias.size()) {
        throw SchemaError(path.string() + ": inconsistent transport map shapes");
    }
    return map;
}

void write_manifest(const std::filesystem::path& path, const DomainManifest& manifest) {
    json doc;
    doc["domain_name"] = manifest.domain_name;
    doc["feature_dim"] = manifest.feature_dim;
    doc["slides"] = json::array();
    for (const auto& s : manifest.slides) {
        json slide;
        slide["slide_id"] = s.slide_id;
        slide["file_path"] = s.file_path;
        slide["n_patches"] = s.n_patches;
        if (s.label) slide["label"] = *s.label;
        doc["slides"].push_back(std::move(slide));
    }
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot open for writing: " + path.string());
    out << doc.dump(2) << "\n";
    if (!out) throw ArgumentError("write failed: " + path.string());
}

DomainManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open manifest: " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": invalid JSON: " + e.what());
    }
    DomainManifest manifest;
    try {
        manifest.domain_name = doc.at("domain_name").get<std::string>();
        manifest.feature_dim = doc.at("feature_dim").get<std::uint32_t>();
        for (const auto& slide : doc.at("slides")) {
            SlideRef ref;
            ref.slide_id = slide.at("slide_id").get<std::string>();
            ref.file_path = slide.at("file_path").get<std::string>();
            ref.n_patches = slide.at("n_patches").get<std::uint32_t>();
            if (slide.contains("label")) ref.label = slide.at("label").get<int>();
            manifest.slides.push_back(std::move(ref));
        }
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": manifest schema error: " + e.what());
    }
    for (std::size_t i = 0; i < manifest.slides.size(); ++i) {
        for (std::size_t j = i + 1; j < manifest.slides.size(); ++j) {
            if (manifest.slides[i].slide_id == manifest.slides[j].slide_id) {
                throw SchemaError(path.string() + ": duplicate slide_id '" +
                                  manifest.slides[i].slide_id + "'");
            }
        }
    }
    manifest.base_dir = path.parent_path();
    return manifest;
}

std::vector<SlideBag> load_bags(const DomainManifest& manifest) {
    std::vector<SlideBag> bags;
    bags.reserve(manifest.slides.size());
    for (const auto& ref : manifest.slides) {
        SlideBag bag;
        bag.slide_id = ref.slide_id;
        bag.features = read_features(manifest.base_dir / ref.file_path);
        if (bag.features.rows() != ref.n_patches) {
            throw SchemaError("slide '" + ref.slide_id + "': manifest says " +
                              std::to_string(ref.n_patches) + " patches, file has " +
                              std::to_string(bag.features.rows()));
        }
        if (bag.features.cols() != manifest.feature_dim) {
            throw SchemaError("slide '" + ref.slide_id + "': feature dim " +
                              std::to_string(bag.features.cols()) + " != manifest dim " +
                              std::to_string(manifest.feature_dim));
        }
        if (bag.features.rows() == 0) {
            throw SchemaError("slide '" + ref.slide_id + "': empty bag");
        }
        bag.label = ref.label;
        bags.push_back(std::move(bag));
    }
    return bags;
}

}  // namespace hasd
