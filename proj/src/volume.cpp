#include "amdiff/volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace amdiff {

using nlohmann::json;

Volume3D::Volume3D(Index3 d, Spacing3 v, float fill)
    : dims(d), voxel_mm(v), data(static_cast<size_t>(numel(d) > 0 ? numel(d) : 0), fill) {}

LabelVolume::LabelVolume(Index3 d, Spacing3 v, int num_classes_, uint8_t fill)
    : dims(d),
      voxel_mm(v),
      data(static_cast<size_t>(numel(d) > 0 ? numel(d) : 0), fill),
      num_classes(num_classes_) {}

namespace {

void validate_geometry(const Index3& dims, const Spacing3& voxel_mm) {
    for (int i = 0; i < 3; ++i) {
        if (dims[i] < 1)
            throw DataError("volume dims must be >= 1 per axis, got " + std::to_string(dims[i]));
        if (!(voxel_mm[i] > 0.0) || !std::isfinite(voxel_mm[i]))
            throw DataError("voxel_mm must be positive and finite, got " +
                            std::to_string(voxel_mm[i]));
    }
}

}  // namespace

void Volume3D::validate() const {
    validate_geometry(dims, voxel_mm);
    if (static_cast<long long>(data.size()) != size())
        throw DataError("volume data length " + std::to_string(data.size()) +
                        " does not match dims product " + std::to_string(size()));
    for (size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i]))
            throw DataError("non-finite SUV value at flat index " + std::to_string(i));
        if (data[i] < 0.0f)
            throw DataError("negative SUV value at flat index " + std::to_string(i));
    }
}

void LabelVolume::validate() const {
    validate_geometry(dims, voxel_mm);
    if (num_classes < 1 || num_classes > 255)
        throw DataError("num_classes must be in [1, 255], got " + std::to_string(num_classes));
    if (static_cast<long long>(data.size()) != size())
        throw DataError("label data length " + std::to_string(data.size()) +
                        " does not match dims product " + std::to_string(size()));
    for (size_t i = 0; i < data.size(); ++i) {
        if (data[i] >= num_classes)
            throw DataError("label index " + std::to_string(int(data[i])) +
                            " out of range [0, " + std::to_string(num_classes - 1) +
                            "] at flat index " + std::to_string(i));
    }
}

ClassRoster ClassRoster::default_roster() {
    return ClassRoster{{"background", "lesion", "liver", "lung", "bone", "muscle", "kidney",
                        "spleen", "aorta"}};
}

ClassRoster ClassRoster::truncated(int num_classes) {
    ClassRoster full = default_roster();
    if (num_classes < 3 || num_classes > full.num_classes())
        throw ConfigError("class roster supports 3.." + std::to_string(full.num_classes()) +
                          " classes, got " + std::to_string(num_classes));
    full.names.resize(static_cast<size_t>(num_classes));
    return full;
}

void ClassRoster::validate() const {
    if (names.size() < 3)
        throw ConfigError("class roster needs background, lesion and at least one organ");
    if (names[0] != "background")
        throw ConfigError("class 0 must be named background");
    if (names[1] != "lesion")
        throw ConfigError("class 1 must be the lesion class");
}

bool same_geometry(const Volume3D& a, const Volume3D& b) {
    return a.dims == b.dims && a.voxel_mm == b.voxel_mm;
}
bool same_geometry(const Volume3D& a, const LabelVolume& b) {
    return a.dims == b.dims && a.voxel_mm == b.voxel_mm;
}
bool same_geometry(const LabelVolume& a, const LabelVolume& b) {
    return a.dims == b.dims && a.voxel_mm == b.voxel_mm;
}

namespace {

std::string geometry_str(const Index3& d, const Spacing3& v) {
    return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]) +
           " @ " + std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]);
}

}  // namespace

void require_same_geometry(const Volume3D& a, const LabelVolume& b, const std::string& what) {
    if (!same_geometry(a, b))
        throw DataError(what + ": geometry mismatch (" + geometry_str(a.dims, a.voxel_mm) +
                        " vs " + geometry_str(b.dims, b.voxel_mm) + ")");
}

void require_same_geometry(const Volume3D& a, const Volume3D& b, const std::string& what) {
    if (!same_geometry(a, b))
        throw DataError(what + ": geometry mismatch (" + geometry_str(a.dims, a.voxel_mm) +
                        " vs " + geometry_str(b.dims, b.voxel_mm) + ")");
}

Volume3D one_hot_mask(const LabelVolume& labels, int s) {
    if (s < 0 || s >= labels.num_classes)
        throw DataError("class index " + std::to_string(s) + " out of range [0, " +
                        std::to_string(labels.num_classes - 1) + "]");
    Volume3D mask(labels.dims, labels.voxel_mm, 0.0f);
    for (size_t i = 0; i < labels.data.size(); ++i)
        mask.data[i] = labels.data[i] == s ? 1.0f : 0.0f;
    return mask;
}

namespace {

constexpr char kMagic[] = "PVOL1\n";

void write_container(const std::filesystem::path& path, const json& header, const void* payload,
                     size_t payload_bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(kMagic, 6);
    const std::string head = header.dump();
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.put('\n');
    out.put('\0');
    out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(payload_bytes));
    if (!out) throw DataError("write failed: " + path.string());
}

json geometry_header(const Index3& dims, const Spacing3& voxel_mm) {
    json h;
    h["dims"] = {dims[0], dims[1], dims[2]};
    h["voxel_mm"] = {voxel_mm[0], voxel_mm[1], voxel_mm[2]};
    return h;
}

struct RawContainer {
    json header;
    std::vector<char> payload;
};

RawContainer read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    char magic[6];
    in.read(magic, 6);
    if (in.gcount() != 6 || std::memcmp(magic, kMagic, 6) != 0)
        throw DataError(path.string() + ": bad magic, not a .pvol file");
    std::string head;
    if (!std::getline(in, head))
        throw DataError(path.string() + ": missing header line");
    int sep = in.get();
    if (sep != 0)
        throw DataError(path.string() + ": missing 0x00 separator after header");
    RawContainer rc;
    try {
        rc.header = json::parse(head);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": header is not valid JSON (" + e.what() + ")");
    }
    rc.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return rc;
}

Index3 parse_dims(const json& h, const std::string& path) {
    if (!h.contains("dims") || !h["dims"].is_array() || h["dims"].size() != 3)
        throw DataError(path + ": header field dims must be a 3-element array");
    Index3 d;
    for (int i = 0; i < 3; ++i) {
        if (!h["dims"][i].is_number_integer())
            throw DataError(path + ": header field dims must hold integers");
        d[i] = h["dims"][i].get<int>();
        if (d[i] < 1) throw DataError(path + ": header field dims must be >= 1");
    }
    return d;
}

Spacing3 parse_voxel_mm(const json& h, const std::string& path) {
    if (!h.contains("voxel_mm") || !h["voxel_mm"].is_array() || h["voxel_mm"].size() != 3)
        throw DataError(path + ": header field voxel_mm must be a 3-element array");
    Spacing3 v;
    for (int i = 0; i < 3; ++i) {
        v[i] = h["voxel_mm"][i].get<double>();
        if (!(v[i] > 0.0) || !std::isfinite(v[i]))
            throw DataError(path + ": header field voxel_mm must be positive");
    }
    return v;
}

}  // namespace

void write_volume(const Volume3D& volume, const std::filesystem::path& path) {
    volume.validate();
    json h = geometry_header(volume.dims, volume.voxel_mm);
    h["dtype"] = "f32le";
    h["kind"] = "suv";
    write_container(path, h, volume.data.data(), volume.data.size() * sizeof(float));
}

void write_volume(const LabelVolume& labels, const std::filesystem::path& path) {
    labels.validate();
    json h = geometry_header(labels.dims, labels.voxel_mm);
    h["dtype"] = "u8";
    h["kind"] = "label";
    h["num_classes"] = labels.num_classes;
    write_container(path, h, labels.data.data(), labels.data.size());
}

AnyVolume read_volume(const std::filesystem::path& path) {
    RawContainer rc = read_container(path);
    const json& h = rc.header;
    const std::string p = path.string();
    if (!h.contains("kind") || !h["kind"].is_string())
        throw DataError(p + ": header field kind missing");
    const std::string kind = h["kind"].get<std::string>();
    const std::string dtype = h.value("dtype", "");
    Index3 dims = parse_dims(h, p);
    Spacing3 voxel_mm = parse_voxel_mm(h, p);
    const size_t n = static_cast<size_t>(numel(dims));

    if (kind == "suv") {
        if (dtype != "f32le")
            throw DataError(p + ": header field dtype must be f32le for suv volumes, got '" +
                            dtype + "'");
        if (rc.payload.size() != n * sizeof(float))
            throw DataError(p + ": payload length " + std::to_string(rc.payload.size()) +
                            " bytes does not match dims (" + std::to_string(n * sizeof(float)) +
                            " expected)");
        Volume3D v;
        v.dims = dims;
        v.voxel_mm = voxel_mm;
        v.data.resize(n);
        std::memcpy(v.data.data(), rc.payload.data(), rc.payload.size());
        for (size_t i = 0; i < n; ++i) {
            if (!std::isfinite(v.data[i]))
                throw DataError(p + ": non-finite value in SUV payload at flat index " +
                                std::to_string(i));
            if (v.data[i] < 0.0f)
                throw DataError(p + ": negative value in SUV payload at flat index " +
                                std::to_string(i));
        }
        return v;
    }
    if (kind == "label") {
        if (dtype != "u8")
            throw DataError(p + ": header field dtype must be u8 for label volumes, got '" +
                            dtype + "'");
        if (!h.contains("num_classes") || !h["num_classes"].is_number_integer())
            throw DataError(p + ": header field num_classes missing for label volume");
        if (rc.payload.size() != n)
            throw DataError(p + ": payload length " + std::to_string(rc.payload.size()) +
                            " bytes does not match dims (" + std::to_string(n) + " expected)");
        LabelVolume l;
        l.dims = dims;
        l.voxel_mm = voxel_mm;
        l.num_classes = h["num_classes"].get<int>();
        l.data.assign(reinterpret_cast<const uint8_t*>(rc.payload.data()),
                      reinterpret_cast<const uint8_t*>(rc.payload.data()) + n);
        l.validate();
        return l;
    }
    throw DataError(p + ": header field kind must be suv or label, got '" + kind + "'");
}

Volume3D read_suv_volume(const std::filesystem::path& path) {
    AnyVolume v = read_volume(path);
    if (!std::holds_alternative<Volume3D>(v))
        throw DataError(path.string() + ": expected an SUV volume, found labels");
    return std::get<Volume3D>(std::move(v));
}

LabelVolume read_label_volume(const std::filesystem::path& path) {
    AnyVolume v = read_volume(path);
    if (!std::holds_alternative<LabelVolume>(v))
        throw DataError(path.string() + ": expected a label volume, found SUV data");
    return std::get<LabelVolume>(std::move(v));
}

}  // namespace amdiff
