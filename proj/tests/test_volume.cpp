#include <cmath>
#include <cstring>
#include <fstream>

#include <doctest.h>
#include <json.hpp>

#include "curvereg/error.hpp"
#include "curvereg/volume.hpp"
#include "test_util.hpp"

using namespace curvereg;
using testutil::TempDir;

namespace {

void write_raw(const std::filesystem::path &p, const std::vector<float> &v) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char *>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void write_header(const std::filesystem::path &p, std::array<int, 3> dims, const std::string &raw) {
    nlohmann::json h{{"dims", dims}, {"spacing_mm", {1, 1, 1}}, {"origin_mm", {0, 0, 0}},
                     {"channels", {{{"label", "CT"}, {"file", raw}}}}};
    std::ofstream(p) << h.dump();
}

ErrorKind kind_of(const std::function<void()> &f) {
    try{
        f();
    }catch(const Error &e){
        return e.kind();
    }
    FAIL("expected a curvereg::Error");
    return ErrorKind::InvalidArgument;
}

} // namespace

TEST_CASE("geometry round trip and voxel-center convention") {
    const GridGeometry g = testutil::geometry({5, 6, 7}, 2.0, Vec3(-3, 1, 10));
    CHECK(g.voxel_to_world(Vec3(0, 0, 0)).isApprox(Vec3(-2, 2, 11)));
    Rng rng(3);
    for(int i = 0; i < 100; ++i){
        const Vec3 v(rng.uniform(0, 4), rng.uniform(0, 5), rng.uniform(0, 6));
        CHECK((g.world_to_voxel(g.voxel_to_world(v)) - v).norm() < 1e-6);
    }
}

TEST_CASE("load_volume reads constant payloads and rejects short ones") {
    TempDir dir;
    write_raw(dir / "c.raw", std::vector<float>(64, 1.0f));
    write_header(dir / "c.vmeta", {4, 4, 4}, "c.raw");
    const VoxelGrid g = load_volume(dir / "c.vmeta");
    for(float v : g.values(Channel::CT)) CHECK(v == 1.0f);

    write_raw(dir / "s.raw", std::vector<float>(63, 1.0f));
    write_header(dir / "s.vmeta", {4, 4, 4}, "s.raw");
    CHECK(kind_of([&]{ load_volume(dir / "s.vmeta"); }) == ErrorKind::SizeMismatch);
}

TEST_CASE("load_volume error paths") {
    TempDir dir;
    CHECK(kind_of([&]{ load_volume(dir / "absent.vmeta"); }) == ErrorKind::MissingFile);
    std::ofstream(dir / "bad.vmeta") << "{ not json";
    CHECK(kind_of([&]{ load_volume(dir / "bad.vmeta"); }) == ErrorKind::HeaderParse);
    std::ofstream(dir / "nodims.vmeta") << R"({"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"channels":[]})";
    CHECK(kind_of([&]{ load_volume(dir / "nodims.vmeta"); }) == ErrorKind::HeaderParse);
}

TEST_CASE("save/load round trip is bit-exact") {
    TempDir dir;
    const VoxelGrid g = testutil::random_grid(testutil::geometry({7, 5, 4}, 1.5, Vec3(1, 2, 3)), 42);
    save_volume(g, dir / "r.vmeta");
    CHECK(std::filesystem::exists(dir / "r_CT.raw"));
    CHECK(std::filesystem::exists(dir / "r_PET.raw"));
    const VoxelGrid h = load_volume(dir / "r.vmeta");
    CHECK(h.geometry() == g.geometry());
    REQUIRE(h.labels() == g.labels());
    for(Channel c : g.labels()){
        const auto a = g.values(c), b = h.values(c);
        REQUIRE(a.size() == b.size());
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
        CHECK(h.fill(c) == g.fill(c));
    }
}

TEST_CASE("save_volume to an unwritable location fails with IoFailure") {
    TempDir dir;
    const VoxelGrid g = testutil::random_grid(testutil::geometry({2, 2, 2}), 1);
    CHECK(kind_of([&]{ save_volume(g, dir / "missing_dir" / "x.vmeta"); }) == ErrorKind::IoFailure);
}

TEST_CASE("set_channel validates the payload length") {
    VoxelGrid g(testutil::geometry({3, 3, 3}));
    CHECK(kind_of([&]{ g.set_channel(Channel::CT, std::vector<float>(26)); }) == ErrorKind::SizeMismatch);
    CHECK(kind_of([&]{ (void)g.values(Channel::PET); }) == ErrorKind::MissingChannel);
}

TEST_CASE("trilinear sampling") {
    const GridGeometry geo = testutil::geometry({4, 4, 4}, 2.0);
    VoxelGrid g(geo);
    std::vector<float> v(geo.voxel_count());
    // Affine field in world coordinates.
    const Vec3 a(0.5, -1.25, 2.0);
    const double b = 3.0;
    for(int k = 0; k < 4; ++k)
        for(int j = 0; j < 4; ++j)
            for(int i = 0; i < 4; ++i) v[geo.index(i, j, k)] = static_cast<float>(a.dot(geo.center(i, j, k)) + b);
    g.set_channel(Channel::CT, v);

    SUBCASE("voxel centers return stored values") {
        for(int k = 0; k < 4; ++k)
            for(int j = 0; j < 4; ++j)
                for(int i = 0; i < 4; ++i)
                    CHECK(trilinear_sample(g, Channel::CT, geo.center(i, j, k)) == g.at(Channel::CT, i, j, k));
    }
    SUBCASE("midpoint along x") {
        VoxelGrid h(geo);
        std::vector<float> w(geo.voxel_count(), 0.0f);
        w[geo.index(1, 1, 1)] = 2.0f;
        w[geo.index(2, 1, 1)] = 4.0f;
        h.set_channel(Channel::PET, w);
        const Vec3 mid = 0.5 * (geo.center(1, 1, 1) + geo.center(2, 1, 1));
        CHECK(trilinear_sample(h, Channel::PET, mid) == doctest::Approx(3.0).epsilon(1e-12));
    }
    SUBCASE("affine fields are reproduced inside the hull") {
        Rng rng(9);
        for(int i = 0; i < 500; ++i){
            const Vec3 p(rng.uniform(geo.hull_min().x(), geo.hull_max().x()),
                         rng.uniform(geo.hull_min().y(), geo.hull_max().y()),
                         rng.uniform(geo.hull_min().z(), geo.hull_max().z()));
            const double f = a.dot(p) + b;
            CHECK(std::abs(trilinear_sample(g, Channel::CT, p) - f) <= 1e-4 * (1 + std::abs(f)));
        }
    }
    SUBCASE("outside returns the fill value") {
        CHECK(trilinear_sample(g, Channel::CT, Vec3(-50, 0, 0)) == -1000.0f);
        g.set_fill(Channel::CT, 7.0f);
        CHECK(trilinear_sample(g, Channel::CT, Vec3(0, 0, 100)) == 7.0f);
    }
}

TEST_CASE("preprocess_pet") {
    const GridGeometry geo = testutil::geometry({6, 5, 5}, 0.5);
    SUBCASE("constant field gives zero") {
        VoxelGrid g(geo);
        g.set_channel(Channel::PET, std::vector<float>(geo.voxel_count(), 3.5f));
        const VoxelGrid p = preprocess_pet(g);
        for(float v : p.values(Channel::PET_PREPROCESSED)) CHECK(v == 0.0f);
    }
    SUBCASE("exp ramp along x has unit log-gradient") {
        VoxelGrid g(geo);
        std::vector<float> v(geo.voxel_count());
        for(int k = 0; k < 5; ++k)
            for(int j = 0; j < 5; ++j)
                for(int i = 0; i < 6; ++i) v[geo.index(i, j, k)] = static_cast<float>(std::exp(geo.center(i, j, k).x()));
        g.set_channel(Channel::PET, v);
        const VoxelGrid p = preprocess_pet(g);
        for(int k = 1; k < 4; ++k)
            for(int j = 1; j < 4; ++j)
                for(int i = 1; i < 5; ++i) CHECK(p.at(Channel::PET_PREPROCESSED, i, j, k) == doctest::Approx(1.0).epsilon(1e-4));
    }
    SUBCASE("zeros stay finite") {
        VoxelGrid g(geo);
        auto v = testutil::random_values(geo.voxel_count(), 5, 0.0, 4.0);
        for(std::size_t i = 0; i < v.size(); i += 3) v[i] = 0.0f;
        g.set_channel(Channel::PET, v);
        const VoxelGrid p = preprocess_pet(g);
        for(float x : p.values(Channel::PET_PREPROCESSED)) CHECK(std::isfinite(x));
    }
    SUBCASE("missing PET") {
        VoxelGrid g(geo);
        g.set_channel(Channel::CT, std::vector<float>(geo.voxel_count(), 0.0f));
        CHECK(kind_of([&]{ preprocess_pet(g); }) == ErrorKind::MissingChannel);
    }
}

TEST_CASE("extract_slice") {
    const GridGeometry geo = testutil::geometry({4, 3, 5});
    const VoxelGrid g = testutil::random_grid(geo, 11);
    const SliceImage s = extract_slice(g, Channel::PET, 2, {0.0f, 10.0f});
    CHECK(s.width == 4);
    CHECK(s.height == 3);
    for(int j = 0; j < 3; ++j)
        for(int i = 0; i < 4; ++i) CHECK(s.values[static_cast<std::size_t>(j * 4 + i)] == g.at(Channel::PET, i, j, 2));
    CHECK(kind_of([&]{ extract_slice(g, Channel::PET, 5, {0.0f, 1.0f}); }) == ErrorKind::IndexOutOfRange);
}

TEST_CASE("residual_image") {
    const GridGeometry geo = testutil::geometry({5, 4, 3});
    const VoxelGrid g = testutil::random_grid(geo, 12);
    const VoxelGrid self = residual_image(g, g, Channel::CT);
    for(float v : self.values(Channel::CT)) CHECK(v == 0.0f);

    // g shifted by one voxel along x: shifted(i) = g(i + 1)
    VoxelGrid shifted(geo);
    std::vector<float> v(geo.voxel_count(), 0.0f);
    for(int k = 0; k < 3; ++k)
        for(int j = 0; j < 4; ++j)
            for(int i = 0; i + 1 < 5; ++i) v[geo.index(i, j, k)] = g.at(Channel::CT, i + 1, j, k);
    shifted.set_channel(Channel::CT, v);
    const VoxelGrid r = residual_image(shifted, g, Channel::CT);
    for(int k = 0; k < 3; ++k)
        for(int j = 0; j < 4; ++j)
            for(int i = 0; i + 1 < 5; ++i)
                CHECK(r.at(Channel::CT, i, j, k) == g.at(Channel::CT, i + 1, j, k) - g.at(Channel::CT, i, j, k));

    const VoxelGrid other = testutil::random_grid(testutil::geometry({5, 4, 4}), 1);
    CHECK(kind_of([&]{ residual_image(g, other, Channel::CT); }) == ErrorKind::GridMismatch);
}

TEST_CASE("downsample block-averages") {
    const GridGeometry geo = testutil::geometry({4, 4, 6}, 1.0, Vec3(-2, -2, -3));
    const VoxelGrid g = testutil::random_grid(geo, 3);
    const VoxelGrid d = downsample(g, {2, 2, 3});
    CHECK(d.geometry().dims == std::array<int, 3>{2, 2, 2});
    CHECK(d.geometry().spacing.isApprox(Vec3(2, 2, 3)));
    double mean = 0.0;
    for(int k = 0; k < 3; ++k)
        for(int j = 0; j < 2; ++j)
            for(int i = 0; i < 2; ++i) mean += g.at(Channel::CT, i, j, k);
    CHECK(d.at(Channel::CT, 0, 0, 0) == doctest::Approx(mean / 12.0).epsilon(1e-6));
}

TEST_CASE("load_nrrd") {
    TempDir dir;
    const std::vector<float> v = testutil::random_values(24, 4);
    write_raw(dir / "n.raw", v);
    std::ofstream(dir / "n.nhdr") << "NRRD0004\ntype: float\ndimension: 3\nsizes: 2 3 4\nspacings: 1 2 3\n"
                                     "encoding: raw\nendian: little\ndata file: n.raw\n";
    const VoxelGrid g = load_nrrd(dir / "n.nhdr", Channel::PET);
    CHECK(g.geometry().dims == std::array<int, 3>{2, 3, 4});
    CHECK(g.geometry().spacing.isApprox(Vec3(1, 2, 3)));
    CHECK(std::equal(v.begin(), v.end(), g.values(Channel::PET).begin()));

    std::ofstream(dir / "b.nhdr") << "NRRD0004\ntype: float\ndimension: 3\nsizes: 2 3 4\n"
                                     "encoding: raw\nendian: big\ndata file: n.raw\n";
    CHECK(kind_of([&]{ load_nrrd(dir / "b.nhdr", Channel::PET); }) == ErrorKind::HeaderParse);
    std::ofstream(dir / "d.nhdr") << "NRRD0004\ntype: double\ndimension: 3\nsizes: 2 3 4\n"
                                     "encoding: raw\nendian: little\ndata file: n.raw\n";
    CHECK(kind_of([&]{ load_nrrd(dir / "d.nhdr", Channel::PET); }) == ErrorKind::HeaderParse);
}
