#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <fstream>

#include "amdiff/volume.hpp"
#include "test_util.hpp"

using namespace amdiff;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    fs::path p = fs::temp_directory_path() / "amdiff_volume_tests";
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("one_hot_mask basic cases") {
    LabelVolume labels({2, 1, 1}, {1, 1, 1}, 3);
    labels.data = {1, 2};
    Volume3D m1 = one_hot_mask(labels, 1);
    CHECK(m1.data[0] == 1.0f);
    CHECK(m1.data[1] == 0.0f);

    LabelVolume all_s({3, 2, 1}, {1, 1, 1}, 4, 3);
    Volume3D m = one_hot_mask(all_s, 3);
    for (float v : m.data) CHECK(v == 1.0f);
    Volume3D zero = one_hot_mask(all_s, 2);
    for (float v : zero.data) CHECK(v == 0.0f);

    CHECK_THROWS_AS(one_hot_mask(labels, 3), DataError);
    CHECK_THROWS_AS(one_hot_mask(labels, -1), DataError);
}

TEST_CASE("one_hot_mask partitions the volume") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        const Index3 dims = {int(1 + rng.below(6)), int(1 + rng.below(6)), int(1 + rng.below(6))};
        const int num_classes = 2 + int(rng.below(6));
        LabelVolume labels(dims, {2, 2, 2}, num_classes);
        for (auto& v : labels.data) v = uint8_t(rng.below(num_classes));
        std::vector<float> sum(labels.data.size(), 0.0f);
        for (int s = 0; s < num_classes; ++s) {
            Volume3D m = one_hot_mask(labels, s);
            for (size_t i = 0; i < sum.size(); ++i) sum[i] += m.data[i];
        }
        for (float v : sum) CHECK(v == 1.0f);
    }
}

TEST_CASE("pvol round trip is exact for random volumes") {
    Rng rng(11);
    const fs::path dir = tmp_dir();
    for (int trial = 0; trial < 8; ++trial) {
        const Index3 dims = {int(1 + rng.below(8)), int(1 + rng.below(8)), int(1 + rng.below(8))};
        Volume3D v(dims, {0.5 + rng.uniform(), 1.0, 2.0});
        for (auto& x : v.data) x = float(rng.uniform(0.0, 30.0));
        const fs::path p = dir / "rt.pvol";
        write_volume(v, p);
        Volume3D r = read_suv_volume(p);
        CHECK(r.dims == v.dims);
        CHECK(r.voxel_mm == v.voxel_mm);
        CHECK(r.data == v.data);

        LabelVolume l(dims, v.voxel_mm, 5);
        for (auto& x : l.data) x = uint8_t(rng.below(5));
        const fs::path pl = dir / "rt_label.pvol";
        write_volume(l, pl);
        LabelVolume rl = read_label_volume(pl);
        CHECK(rl.data == l.data);
        CHECK(rl.num_classes == 5);
    }
}

TEST_CASE("write_volume is byte-deterministic") {
    Rng rng(3);
    Volume3D v({4, 3, 2}, {2.0, 2.0, 2.0});
    for (auto& x : v.data) x = float(rng.uniform(0.0, 10.0));
    const fs::path a = tmp_dir() / "a.pvol";
    const fs::path b = tmp_dir() / "b.pvol";
    write_volume(v, a);
    write_volume(v, b);
    CHECK(slurp(a) == slurp(b));
}

TEST_CASE("label payload carries the integer dtype tag") {
    LabelVolume l({2, 2, 2}, {1, 1, 1}, 3, 1);
    const fs::path p = tmp_dir() / "dtype.pvol";
    write_volume(l, p);
    const std::string bytes = slurp(p);
    CHECK(bytes.find("\"dtype\":\"u8\"") != std::string::npos);
    CHECK(bytes.find("\"kind\":\"label\"") != std::string::npos);
    CHECK(bytes.rfind("PVOL1\n", 0) == 0);
}

TEST_CASE("malformed containers are rejected with format errors") {
    const fs::path dir = tmp_dir();
    Volume3D v({2, 2, 2}, {1, 1, 1}, 1.0f);
    const fs::path good = dir / "good.pvol";
    write_volume(v, good);
    std::string bytes = slurp(good);

    SUBCASE("truncated payload") {
        std::ofstream out(dir / "trunc.pvol", std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() - 5));
        out.close();
        CHECK_THROWS_AS(read_volume(dir / "trunc.pvol"), DataError);
    }
    SUBCASE("payload longer than header dims") {
        std::ofstream out(dir / "long.pvol", std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size()));
        const float extra = 1.0f;
        out.write(reinterpret_cast<const char*>(&extra), sizeof(float));
        out.close();
        CHECK_THROWS_AS(read_volume(dir / "long.pvol"), DataError);
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        std::ofstream out(dir / "magic.pvol", std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size()));
        out.close();
        CHECK_THROWS_AS(read_volume(dir / "magic.pvol"), DataError);
    }
    SUBCASE("non-finite SUV payload") {
        const size_t payload_at = bytes.find('\0') + 1;
        const float bad = std::numeric_limits<float>::quiet_NaN();
        std::memcpy(bytes.data() + payload_at, &bad, sizeof(float));
        std::ofstream out(dir / "nan.pvol", std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size()));
        out.close();
        CHECK_THROWS_AS(read_volume(dir / "nan.pvol"), DataError);
    }
}

TEST_CASE("dims/payload mismatch in header is a format error") {
    // Hand-built container: dims say 2x2x2 but payload holds 7 floats.
    const fs::path p = tmp_dir() / "mismatch.pvol";
    std::ofstream out(p, std::ios::binary);
    out << "PVOL1\n";
    out << R"({"dims":[2,2,2],"dtype":"f32le","kind":"suv","voxel_mm":[1.0,1.0,1.0]})" << "\n";
    out.put('\0');
    for (int i = 0; i < 7; ++i) {
        const float f = 1.0f;
        out.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
    out.close();
    CHECK_THROWS_AS(read_volume(p), DataError);
}

TEST_CASE("invalid volumes are rejected before write") {
    Volume3D zero_dim;
    zero_dim.dims = {0, 2, 2};
    zero_dim.voxel_mm = {1, 1, 1};
    CHECK_THROWS_AS(write_volume(zero_dim, tmp_dir() / "zero.pvol"), DataError);

    Volume3D negative({2, 2, 2}, {1, 1, 1}, -1.0f);
    CHECK_THROWS_AS(write_volume(negative, tmp_dir() / "neg.pvol"), DataError);
}

TEST_CASE("geometry checks") {
    Volume3D a({2, 2, 2}, {1, 1, 1});
    LabelVolume b({2, 2, 2}, {1, 1, 2}, 2);
    CHECK_FALSE(same_geometry(a, b));
    CHECK_THROWS_AS(require_same_geometry(a, b, "test"), DataError);
    ClassRoster roster = ClassRoster::default_roster();
    CHECK(roster.num_classes() == 9);
    CHECK(roster.names[1] == "lesion");
    CHECK(ClassRoster::truncated(5).names.size() == 5);
    CHECK_THROWS_AS(ClassRoster::truncated(2), ConfigError);
}
