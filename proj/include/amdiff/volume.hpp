#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "amdiff/common.hpp"

namespace amdiff {

/// Dense 3D scalar field of SUV values with voxel geometry.
/// Voxel order is x fastest: index = x + nx*(y + ny*z).
struct Volume3D {
    Index3 dims{0, 0, 0};
    Spacing3 voxel_mm{1.0, 1.0, 1.0};
    std::vector<float> data;

    Volume3D() = default;
    Volume3D(Index3 d, Spacing3 v, float fill = 0.0f);

    float at(int x, int y, int z) const { return data[flat_index(dims, x, y, z)]; }
    float& at(int x, int y, int z) { return data[flat_index(dims, x, y, z)]; }
    long long size() const { return numel(dims); }

    /// Throws DataError if dims/voxel_mm/data violate the type invariants
    /// (positive geometry, matching length, finite non-negative values).
    void validate() const;
};

/// Dense 3D class-index field, classes 0..S (0 background, 1 lesion, 2..S organs).
struct LabelVolume {
    Index3 dims{0, 0, 0};
    Spacing3 voxel_mm{1.0, 1.0, 1.0};
    std::vector<uint8_t> data;
    int num_classes = 0;  // S + 1

    LabelVolume() = default;
    LabelVolume(Index3 d, Spacing3 v, int num_classes_, uint8_t fill = 0);

    uint8_t at(int x, int y, int z) const { return data[flat_index(dims, x, y, z)]; }
    uint8_t& at(int x, int y, int z) { return data[flat_index(dims, x, y, z)]; }
    long long size() const { return numel(dims); }

    void validate() const;
};

/// Ordered class names; index 0 is background and index 1 is always the lesion class.
struct ClassRoster {
    std::vector<std::string> names;

    static ClassRoster default_roster();           // background..aorta, S = 8
    static ClassRoster truncated(int num_classes); // first num_classes entries of the default

    int num_classes() const { return static_cast<int>(names.size()); }
    void validate() const;
};

bool same_geometry(const Volume3D& a, const Volume3D& b);
bool same_geometry(const Volume3D& a, const LabelVolume& b);
bool same_geometry(const LabelVolume& a, const LabelVolume& b);

/// Throws DataError naming `what` when the two geometries differ.
void require_same_geometry(const Volume3D& a, const LabelVolume& b, const std::string& what);
void require_same_geometry(const Volume3D& a, const Volume3D& b, const std::string& what);

/// Binary mask volume: 1 where label == s, else 0. Throws DataError if s is out of range.
Volume3D one_hot_mask(const LabelVolume& labels, int s);

/// `.pvol` container I/O. Layout: "PVOL1\n", one JSON header line, a 0x00
/// separator byte, then the raw little-endian payload (f32 for SUV volumes,
/// u8 for labels), x fastest-varying. Writes are byte-deterministic.
void write_volume(const Volume3D& volume, const std::filesystem::path& path);
void write_volume(const LabelVolume& labels, const std::filesystem::path& path);

using AnyVolume = std::variant<Volume3D, LabelVolume>;
AnyVolume read_volume(const std::filesystem::path& path);
Volume3D read_suv_volume(const std::filesystem::path& path);
LabelVolume read_label_volume(const std::filesystem::path& path);

}  // namespace amdiff
