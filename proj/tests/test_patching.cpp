#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "amdiff/patching.hpp"
#include "test_util.hpp"

using namespace amdiff;

namespace {

Volume3D random_volume(Rng& rng, Index3 dims) {
    Volume3D v(dims, {2, 2, 2});
    for (auto& x : v.data) x = float(rng.uniform(0.0, 10.0));
    return v;
}

}  // namespace

TEST_CASE("plan_grid arithmetic") {
    PatchGrid g = plan_grid({64, 64, 64}, {32, 32, 32}, {16, 16, 16});
    CHECK(g.origins.size() == 27);
    std::vector<int> xs;
    for (const auto& o : g.origins)
        if (o[1] == 0 && o[2] == 0) xs.push_back(o[0]);
    CHECK(xs == std::vector<int>{0, 16, 32});

    PatchGrid one = plan_grid({32, 32, 32}, {32, 32, 32}, {8, 8, 8});
    CHECK(one.origins.size() == 1);
    CHECK(one.origins[0] == Index3{0, 0, 0});
}

TEST_CASE("plan_grid clamps the boundary origin (440/128/32 geometry)") {
    PatchGrid g = plan_grid({440, 8, 8}, {128, 8, 8}, {32, 8, 8});
    std::vector<int> xs;
    for (const auto& o : g.origins) xs.push_back(o[0]);
    std::vector<int> expect;
    for (int x = 0; x <= 288; x += 32) expect.push_back(x);
    expect.push_back(312);
    CHECK(xs == expect);
    CHECK(xs.size() == 11);
}

TEST_CASE("plan_grid rejects impossible plans") {
    CHECK_THROWS_AS(plan_grid({16, 16, 16}, {32, 16, 16}, {8, 8, 8}), ConfigError);
    CHECK_THROWS_AS(plan_grid({16, 16, 16}, {8, 8, 8}, {0, 8, 8}), ConfigError);
    CHECK_THROWS_AS(plan_grid({16, 16, 16}, {8, 8, 8}, {9, 8, 8}), ConfigError);
}

TEST_CASE("coverage: every voxel lies in at least one patch") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Index3 dims = {int(4 + rng.below(12)), int(4 + rng.below(12)),
                             int(4 + rng.below(12))};
        Index3 patch, stride;
        for (int i = 0; i < 3; ++i) {
            patch[i] = 1 + int(rng.below(dims[i]));
            stride[i] = 1 + int(rng.below(patch[i]));
        }
        PatchGrid g = plan_grid(dims, patch, stride);
        std::vector<int> covered(numel(dims), 0);
        for (const auto& o : g.origins)
            for (int z = 0; z < patch[2]; ++z)
                for (int y = 0; y < patch[1]; ++y)
                    for (int x = 0; x < patch[0]; ++x)
                        covered[flat_index(dims, o[0] + x, o[1] + y, o[2] + z)] = 1;
        for (int c : covered) CHECK(c == 1);
    }
}

TEST_CASE("extract equals direct indexing") {
    Rng rng(5);
    Volume3D v = random_volume(rng, {8, 8, 8});
    PatchGrid g = plan_grid(v.dims, {4, 4, 4}, {4, 4, 4});
    auto patches = extract(v, g);
    REQUIRE(patches.size() == g.origins.size());
    for (size_t i = 0; i < patches.size(); ++i) {
        const Index3& o = g.origins[i];
        for (int z = 0; z < 4; ++z)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x)
                    CHECK(patches[i].at(x, y, z) == v.at(o[0] + x, o[1] + y, o[2] + z));
    }

    Volume3D constant({6, 6, 6}, {1, 1, 1}, 3.5f);
    for (const auto& p : extract(constant, plan_grid(constant.dims, {3, 3, 3}, {2, 2, 2})))
        for (float x : p.data) CHECK(x == 3.5f);

    PatchGrid single = plan_grid(v.dims, v.dims, v.dims);
    auto whole = extract(v, single);
    CHECK(whole.size() == 1);
    CHECK(whole[0].data == v.data);
}

TEST_CASE("reassemble(extract(v)) is the identity for any grid") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const Index3 dims = {int(3 + rng.below(10)), int(3 + rng.below(10)),
                             int(3 + rng.below(10))};
        Index3 patch, stride;
        for (int i = 0; i < 3; ++i) {
            patch[i] = 1 + int(rng.below(dims[i]));
            stride[i] = 1 + int(rng.below(patch[i]));
        }
        Volume3D v = random_volume(rng, dims);
        PatchGrid g = plan_grid(dims, patch, stride);
        Volume3D r = reassemble(extract(v, g), g);
        CHECK(r.data == v.data);  // exact
    }
}

TEST_CASE("two fully-overlapping patches average to the midpoint") {
    PatchGrid g;
    g.dims = {2, 2, 2};
    g.patch_size = {2, 2, 2};
    g.stride = {2, 2, 2};
    g.origins = {{0, 0, 0}, {0, 0, 0}};
    Volume3D p0({2, 2, 2}, {1, 1, 1}, 0.0f);
    Volume3D p2({2, 2, 2}, {1, 1, 1}, 2.0f);
    Volume3D fused = reassemble({p0, p2}, g);
    for (float v : fused.data) CHECK(v == 1.0f);
}

TEST_CASE("reassemble matches a brute-force accumulate/count oracle") {
    Rng rng(11);
    const Index3 dims = {6, 6, 6};
    PatchGrid g = plan_grid(dims, {3, 3, 3}, {3, 3, 3});
    std::vector<Volume3D> patches;
    for (size_t i = 0; i < g.origins.size(); ++i) patches.push_back(random_volume(rng, {3, 3, 3}));

    std::vector<double> acc(numel(dims), 0.0), cnt(numel(dims), 0.0);
    for (size_t i = 0; i < patches.size(); ++i) {
        const Index3& o = g.origins[i];
        for (int z = 0; z < 3; ++z)
            for (int y = 0; y < 3; ++y)
                for (int x = 0; x < 3; ++x) {
                    const auto idx = flat_index(dims, o[0] + x, o[1] + y, o[2] + z);
                    acc[idx] += patches[i].at(x, y, z);
                    cnt[idx] += 1;
                }
    }
    Volume3D fused = reassemble(patches, g);
    for (size_t i = 0; i < fused.data.size(); ++i)
        CHECK(std::fabs(fused.data[i] - acc[i] / cnt[i]) < 1e-6);
}

namespace {

LabelVolume labels_with_lesion(Index3 dims, bool any_lesion) {
    LabelVolume l(dims, {2, 2, 2}, 3);
    if (any_lesion) {
        l.at(1, 1, 1) = 1;
        l.at(2, 1, 1) = 1;
    }
    return l;
}

}  // namespace

TEST_CASE("uniform origin sampling passes a chi-square test at lesion_target_frac = 0") {
    LabelVolume labels = labels_with_lesion({8, 8, 8}, true);
    const Index3 patch = {4, 4, 4};
    const int bins = 5 * 5 * 5;
    std::map<long long, int> counts;
    Rng rng(101);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        OriginSample s = sample_patch_origin(labels, patch, 0.0, rng);
        counts[flat_index({5, 5, 5}, s.origin[0], s.origin[1], s.origin[2])]++;
    }
    const double expected = double(draws) / bins;
    double chi2 = 0.0;
    for (long long b = 0; b < bins; ++b) {
        const double obs = counts.count(b) ? counts[b] : 0.0;
        chi2 += (obs - expected) * (obs - expected) / expected;
    }
    // Wilson-Hilferty 99% critical value for df = bins - 1.
    const double df = bins - 1;
    const double z99 = 2.3263478740408408;
    const double crit = df * std::pow(1.0 - 2.0 / (9.0 * df) + z99 * std::sqrt(2.0 / (9.0 * df)), 3);
    CHECK(chi2 < crit);
}

TEST_CASE("lesion_target_frac = 1 always lands on lesion-containing patches") {
    LabelVolume labels = labels_with_lesion({8, 8, 8}, true);
    Volume3D lc(labels.dims, labels.voxel_mm, 1.0f);
    Volume3D hc = lc;
    Rng rng(55);
    for (int i = 0; i < 200; ++i) {
        TrainingPatch p = sample_training_patch(lc, hc, labels, {4, 4, 4}, 1.0, rng);
        CHECK_FALSE(p.lesion_fallback);
        bool has = false;
        for (uint8_t v : p.labels.data) has |= v == 1;
        CHECK(has);
    }
}

TEST_CASE("lesion-free cases fall back to uniform sampling with a flag") {
    LabelVolume labels = labels_with_lesion({8, 8, 8}, false);
    Volume3D lc(labels.dims, labels.voxel_mm, 1.0f);
    Rng rng(66);
    TrainingPatch p = sample_training_patch(lc, lc, labels, {4, 4, 4}, 1.0, rng);
    CHECK(p.lesion_fallback);
}

TEST_CASE("origin sampling is deterministic under a fixed rng state") {
    LabelVolume labels = labels_with_lesion({8, 8, 8}, true);
    Rng a(9), b(9);
    for (int i = 0; i < 50; ++i) {
        OriginSample sa = sample_patch_origin(labels, {4, 4, 4}, 0.5, a);
        OriginSample sb = sample_patch_origin(labels, {4, 4, 4}, 0.5, b);
        CHECK(sa.origin == sb.origin);
    }
}
