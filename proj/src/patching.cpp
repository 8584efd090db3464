#include "amdiff/patching.hpp"

#include <algorithm>

namespace amdiff {

namespace {

std::vector<int> axis_origins(int dim, int patch, int stride) {
    std::vector<int> origins;
    for (int o = 0; o + patch <= dim; o += stride) origins.push_back(o);
    const int last = dim - patch;
    if (origins.empty() || origins.back() != last) origins.push_back(last);
    return origins;
}

template <typename Vol>
void check_grid_geometry(const Vol& v, const PatchGrid& grid, const char* what) {
    if (v.dims != grid.dims)
        throw DataError(std::string(what) + ": volume dims do not match the planned grid");
}

template <typename Vol, typename T>
void copy_patch(const Vol& src, const Index3& origin, const Index3& patch, std::vector<T>& dst) {
    const Index3 d = src.dims;
    size_t k = 0;
    for (int z = 0; z < patch[2]; ++z)
        for (int y = 0; y < patch[1]; ++y) {
            const long long base =
                flat_index(d, origin[0], origin[1] + y, origin[2] + z);
            for (int x = 0; x < patch[0]; ++x) dst[k++] = src.data[base + x];
        }
}

}  // namespace

PatchGrid plan_grid(const Index3& dims, const Index3& patch_size, const Index3& stride) {
    for (int i = 0; i < 3; ++i) {
        if (dims[i] < 1) throw ConfigError("plan_grid: dims must be >= 1");
        if (patch_size[i] < 1 || patch_size[i] > dims[i])
            throw ConfigError("plan_grid: patch size " + std::to_string(patch_size[i]) +
                              " exceeds volume dim " + std::to_string(dims[i]) + " on axis " +
                              std::to_string(i));
        if (stride[i] < 1 || stride[i] > patch_size[i])
            throw ConfigError("plan_grid: stride must be in [1, patch] per axis");
    }
    PatchGrid grid;
    grid.dims = dims;
    grid.patch_size = patch_size;
    grid.stride = stride;
    const auto xs = axis_origins(dims[0], patch_size[0], stride[0]);
    const auto ys = axis_origins(dims[1], patch_size[1], stride[1]);
    const auto zs = axis_origins(dims[2], patch_size[2], stride[2]);
    grid.origins.reserve(xs.size() * ys.size() * zs.size());
    for (int z : zs)
        for (int y : ys)
            for (int x : xs) grid.origins.push_back({x, y, z});
    return grid;
}

Volume3D extract_one(const Volume3D& volume, const Index3& origin, const Index3& patch_size) {
    Volume3D p(patch_size, volume.voxel_mm);
    copy_patch(volume, origin, patch_size, p.data);
    return p;
}

LabelVolume extract_one(const LabelVolume& labels, const Index3& origin, const Index3& patch_size) {
    LabelVolume p(patch_size, labels.voxel_mm, labels.num_classes);
    copy_patch(labels, origin, patch_size, p.data);
    return p;
}

std::vector<Volume3D> extract(const Volume3D& volume, const PatchGrid& grid) {
    check_grid_geometry(volume, grid, "extract");
    std::vector<Volume3D> out;
    out.reserve(grid.origins.size());
    for (const auto& o : grid.origins) out.push_back(extract_one(volume, o, grid.patch_size));
    return out;
}

std::vector<LabelVolume> extract(const LabelVolume& labels, const PatchGrid& grid) {
    check_grid_geometry(labels, grid, "extract");
    std::vector<LabelVolume> out;
    out.reserve(grid.origins.size());
    for (const auto& o : grid.origins) out.push_back(extract_one(labels, o, grid.patch_size));
    return out;
}

Volume3D reassemble(const std::vector<Volume3D>& patches, const PatchGrid& grid) {
    if (patches.size() != grid.origins.size())
        throw DataError("reassemble: patch count " + std::to_string(patches.size()) +
                        " does not match grid (" + std::to_string(grid.origins.size()) + ")");
    std::vector<std::vector<double>> planes;
    planes.reserve(patches.size());
    for (size_t i = 0; i < patches.size(); ++i) {
        if (patches[i].dims != grid.patch_size)
            throw DataError("reassemble: patch " + std::to_string(i) + " has wrong shape");
        planes.emplace_back(patches[i].data.begin(), patches[i].data.end());
    }
    const std::vector<double> fused = reassemble_planes(planes, grid, 1);
    Volume3D out(grid.dims, patches.empty() ? Spacing3{1, 1, 1} : patches[0].voxel_mm);
    for (size_t i = 0; i < fused.size(); ++i) out.data[i] = static_cast<float>(fused[i]);
    return out;
}

std::vector<double> reassemble_planes(const std::vector<std::vector<double>>& patches,
                                      const PatchGrid& grid, int channels) {
    if (patches.size() != grid.origins.size())
        throw DataError("reassemble_planes: patch count mismatch");
    const long long n = numel(grid.dims);
    const long long pn = numel(grid.patch_size);
    std::vector<double> acc(static_cast<size_t>(n) * channels, 0.0);
    std::vector<double> cnt(static_cast<size_t>(n), 0.0);
    // Sequential accumulation in origin order keeps the result bit-stable.
    for (size_t i = 0; i < patches.size(); ++i) {
        if (static_cast<long long>(patches[i].size()) != pn * channels)
            throw DataError("reassemble_planes: patch " + std::to_string(i) + " has wrong length");
        const Index3& o = grid.origins[i];
        for (int z = 0; z < grid.patch_size[2]; ++z)
            for (int y = 0; y < grid.patch_size[1]; ++y) {
                const long long dst0 = flat_index(grid.dims, o[0], o[1] + y, o[2] + z);
                const long long src0 =
                    flat_index(grid.patch_size, 0, y, z);
                for (int x = 0; x < grid.patch_size[0]; ++x) cnt[dst0 + x] += 1.0;
                for (int c = 0; c < channels; ++c) {
                    const double* src = patches[i].data() + c * pn + src0;
                    double* dst = acc.data() + static_cast<long long>(c) * n + dst0;
                    for (int x = 0; x < grid.patch_size[0]; ++x) dst[x] += src[x];
                }
            }
    }
    for (long long v = 0; v < n; ++v) {
        if (cnt[v] <= 0.0) throw DataError("reassemble_planes: grid does not cover every voxel");
        for (int c = 0; c < channels; ++c) acc[static_cast<long long>(c) * n + v] /= cnt[v];
    }
    return acc;
}

OriginSample sample_patch_origin(const LabelVolume& labels, const Index3& patch_size,
                                 double lesion_target_frac, Rng& rng) {
    const Index3 d = labels.dims;
    for (int i = 0; i < 3; ++i)
        if (patch_size[i] < 1 || patch_size[i] > d[i])
            throw ConfigError("sample_patch_origin: patch does not fit in the volume");
    if (lesion_target_frac < 0.0 || lesion_target_frac > 1.0)
        throw ConfigError("lesion_target_frac must lie in [0, 1]");

    const Index3 nvalid = {d[0] - patch_size[0] + 1, d[1] - patch_size[1] + 1,
                           d[2] - patch_size[2] + 1};
    const long long total = numel(nvalid);

    OriginSample out;
    bool want_lesion = lesion_target_frac > 0.0 &&
                       (lesion_target_frac >= 1.0 || rng.uniform() < lesion_target_frac);

    if (want_lesion) {
        // 3D prefix sums of the lesion indicator for O(1) window queries.
        std::vector<long long> ps(static_cast<size_t>((d[0] + 1)) * (d[1] + 1) * (d[2] + 1), 0);
        auto P = [&](int x, int y, int z) -> long long& {
            return ps[x + static_cast<long long>(d[0] + 1) * (y + static_cast<long long>(d[1] + 1) * z)];
        };
        for (int z = 1; z <= d[2]; ++z)
            for (int y = 1; y <= d[1]; ++y)
                for (int x = 1; x <= d[0]; ++x) {
                    const long long v = labels.at(x - 1, y - 1, z - 1) == 1 ? 1 : 0;
                    P(x, y, z) = v + P(x - 1, y, z) + P(x, y - 1, z) + P(x, y, z - 1) -
                                 P(x - 1, y - 1, z) - P(x - 1, y, z - 1) - P(x, y - 1, z - 1) +
                                 P(x - 1, y - 1, z - 1);
                }
        auto window_sum = [&](int x, int y, int z) {
            const int x1 = x + patch_size[0], y1 = y + patch_size[1], z1 = z + patch_size[2];
            return P(x1, y1, z1) - P(x, y1, z1) - P(x1, y, z1) - P(x1, y1, z) + P(x, y, z1) +
                   P(x, y1, z) + P(x1, y, z) - P(x, y, z);
        };
        std::vector<Index3> lesion_origins;
        for (int z = 0; z < nvalid[2]; ++z)
            for (int y = 0; y < nvalid[1]; ++y)
                for (int x = 0; x < nvalid[0]; ++x)
                    if (window_sum(x, y, z) > 0) lesion_origins.push_back({x, y, z});
        if (!lesion_origins.empty()) {
            out.origin = lesion_origins[rng.below(lesion_origins.size())];
            return out;
        }
        out.lesion_fallback = true;  // no lesion voxels in this case; fall through to uniform
    }

    const long long pick = static_cast<long long>(rng.below(static_cast<uint64_t>(total)));
    out.origin = {static_cast<int>(pick % nvalid[0]),
                  static_cast<int>((pick / nvalid[0]) % nvalid[1]),
                  static_cast<int>(pick / (static_cast<long long>(nvalid[0]) * nvalid[1]))};
    return out;
}

TrainingPatch sample_training_patch(const Volume3D& lc, const Volume3D& hc,
                                    const LabelVolume& labels, const Index3& patch_size,
                                    double lesion_target_frac, Rng& rng) {
    require_same_geometry(lc, labels, "sample_training_patch");
    require_same_geometry(hc, labels, "sample_training_patch");
    OriginSample s = sample_patch_origin(labels, patch_size, lesion_target_frac, rng);
    TrainingPatch p;
    p.origin = s.origin;
    p.lesion_fallback = s.lesion_fallback;
    p.lc = extract_one(lc, s.origin, patch_size);
    p.hc = extract_one(hc, s.origin, patch_size);
    p.labels = extract_one(labels, s.origin, patch_size);
    return p;
}

}  // namespace amdiff
