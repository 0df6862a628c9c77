#include <cmath>
#include <cstring>
#include <numbers>

#include <doctest.h>
#include <Eigen/Dense>

#include "curvereg/error.hpp"
#include "curvereg/warp.hpp"
#include "test_util.hpp"

using namespace curvereg;

namespace {

ErrorKind kind_of(const std::function<void()> &f) {
    try{
        f();
    }catch(const Error &e){
        return e.kind();
    }
    FAIL("expected a curvereg::Error");
    return ErrorKind::InvalidArgument;
}

Affine3 random_affine(Rng &rng, double spread = 0.3) {
    Affine3 a;
    for(int r = 0; r < 3; ++r)
        for(int c = 0; c < 3; ++c) a.linear(r, c) = (r == c ? 1.0 : 0.0) + rng.uniform(-spread, spread);
    a.translation = Vec3(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-20, 20));
    return a;
}

std::vector<Vec3> jittered_lattice(std::uint64_t seed, double jitter) {
    Rng rng(seed);
    std::vector<Vec3> pts;
    for(int k = 0; k < 3; ++k)
        for(int j = 0; j < 3; ++j)
            for(int i = 0; i < 3; ++i)
                pts.emplace_back(-40 + 40 * i + rng.uniform(-jitter, jitter), -40 + 40 * j + rng.uniform(-jitter, jitter),
                                 -40 + 40 * k + rng.uniform(-jitter, jitter));
    return pts;
}

// Smooth test image: low-frequency blobs on top of a ramp.
VoxelGrid smooth_grid(const GridGeometry &g) {
    VoxelGrid grid(g);
    std::vector<float> v(g.voxel_count());
    for(int k = 0; k < g.dims[2]; ++k)
        for(int j = 0; j < g.dims[1]; ++j)
            for(int i = 0; i < g.dims[0]; ++i){
                const Vec3 p = g.center(i, j, k);
                v[g.index(i, j, k)] = static_cast<float>(100.0 * std::sin(p.x() / 9.0) * std::cos(p.y() / 11.0) +
                                                         50.0 * std::sin(p.z() / 13.0) + p.x());
            }
    grid.set_channel(Channel::CT, v);
    return grid;
}

double interior_mean_abs_diff(const VoxelGrid &a, const VoxelGrid &b, int margin) {
    const auto &g = a.geometry();
    double sum = 0.0;
    int n = 0;
    for(int k = margin; k < g.dims[2] - margin; ++k)
        for(int j = margin; j < g.dims[1] - margin; ++j)
            for(int i = margin; i < g.dims[0] - margin; ++i){
                sum += std::abs(a.at(Channel::CT, i, j, k) - b.at(Channel::CT, i, j, k));
                ++n;
            }
    return sum / n;
}

double channel_range(const VoxelGrid &g) {
    const auto v = g.values(Channel::CT);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo;
}

} // namespace

TEST_CASE("affine basics") {
    CHECK(affine_apply(Affine3::identity(), Vec3(1, -2, 3)) == Vec3(1, -2, 3));
    Affine3 t;
    t.translation = Vec3(1, 2, 3);
    CHECK(affine_apply(t, Vec3::Zero()) == Vec3(1, 2, 3));
    CHECK(affine_invert(Affine3::identity()).is_identity());

    Rng rng(2);
    const Affine3 a = random_affine(rng);
    const Affine3 ca = affine_compose(Affine3::identity(), a);
    CHECK(ca.linear == a.linear);
    CHECK(ca.translation == a.translation);

    const Affine3 round = affine_compose(a, affine_invert(a));
    double worst = 0.0;
    for(int i = 0; i < 100; ++i){
        const Vec3 p(rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100));
        worst = std::max(worst, (affine_apply(round, p) - p).norm());
    }
    CHECK(worst < 1e-9);

    const Affine3 b = random_affine(rng);
    const Vec3 p(3, -1, 8);
    CHECK((affine_compose(a, b).apply(p) - a.apply(b.apply(p))).norm() < 1e-12);

    Affine3 singular;
    singular.linear.row(2) = singular.linear.row(0);
    CHECK_FALSE(singular.invertible());
    CHECK(kind_of([&]{ affine_invert(singular); }) == ErrorKind::SingularTransform);
}

TEST_CASE("affine_apply preserves collinearity") {
    Rng rng(8);
    for(int i = 0; i < 50; ++i){
        const Affine3 a = random_affine(rng);
        const Vec3 p(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
        const Vec3 d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        const Vec3 q0 = a.apply(p), q1 = a.apply(p + 10 * d), q2 = a.apply(p + 25 * d);
        const double scale = std::max({q0.norm(), q1.norm(), q2.norm(), 1.0});
        CHECK((q1 - q0).cross(q2 - q0).norm() <= 1e-8 * scale * scale * scale);
    }
}

TEST_CASE("tps_fit reproduces identity and translations") {
    const auto src = jittered_lattice(1, 5.0);
    const Tps3 id = tps_fit(src, src);
    for(const auto &w : id.weights) CHECK(w.norm() <= 1e-8);
    CHECK((id.affine_part.linear - Mat3::Identity()).norm() <= 1e-8);
    CHECK(id.affine_part.translation.norm() <= 1e-8);

    std::vector<Vec3> dst = src;
    for(auto &p : dst) p += Vec3(5, 0, 0);
    const Tps3 tr = tps_fit(src, dst);
    for(const auto &w : tr.weights) CHECK(w.norm() <= 1e-8);
    CHECK((tr.affine_part.translation - Vec3(5, 0, 0)).norm() <= 1e-8);
    CHECK((tr.affine_part.linear - Mat3::Identity()).norm() <= 1e-8);
}

TEST_CASE("tps_fit reproduces general affine maps") {
    Rng rng(12);
    const Affine3 a = random_affine(rng, 0.2);
    const auto src = jittered_lattice(3, 6.0);
    std::vector<Vec3> dst;
    for(const auto &p : src) dst.push_back(a.apply(p));
    const Tps3 t = tps_fit(src, dst);
    for(const auto &w : t.weights) CHECK(w.norm() <= 1e-8);
    CHECK((t.affine_part.linear - a.linear).norm() <= 1e-8);
    CHECK((t.affine_part.translation - a.translation).norm() <= 1e-8);
}

TEST_CASE("tps_fit interpolates a jittered lattice") {
    const auto src = jittered_lattice(4, 4.0);
    Rng rng(5);
    std::vector<Vec3> dst = src;
    for(auto &p : dst) p += Vec3(rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-6, 6));
    const Tps3 t = tps_fit(src, dst);
    for(std::size_t i = 0; i < src.size(); ++i) CHECK((tps_apply(t, src[i]) - dst[i]).norm() <= 1e-6);

    Vec3 sw = Vec3::Zero();
    Mat3 swc = Mat3::Zero();
    for(std::size_t i = 0; i < src.size(); ++i){
        sw += t.weights[i];
        swc += t.weights[i] * src[i].transpose();
    }
    CHECK(sw.norm() <= 1e-8);
    CHECK(swc.norm() <= 1e-8 * 100);

    SUBCASE("direct-sum oracle") {
        for(int n = 0; n < 20; ++n){
            const Vec3 p(rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(-60, 60));
            Vec3 expect = t.affine_part.linear * p + t.affine_part.translation;
            for(std::size_t i = 0; i < src.size(); ++i){
                const Vec3 d = p - src[i];
                expect += t.weights[i] * std::sqrt(d.x() * d.x() + d.y() * d.y() + d.z() * d.z());
            }
            CHECK((tps_apply(t, p) - expect).norm() <= 1e-9);
        }
    }
    SUBCASE("far field is dominated by the affine part") {
        const double extent = 80.0;
        const Vec3 dir = Vec3(0.3, -0.5, 0.8).normalized();
        const double r10 = (tps_apply(t, 10 * extent * dir) - t.affine_part.apply(10 * extent * dir)).norm() / (10 * extent);
        const double r100 = (tps_apply(t, 100 * extent * dir) - t.affine_part.apply(100 * extent * dir)).norm() / (100 * extent);
        CHECK(r100 < r10);
        CHECK(r100 < 1e-3);
    }
    SUBCASE("regularization shrinks the kernel weights") {
        double prev = INFINITY;
        for(double lambda : {0.0, 1.0, 10.0, 100.0}){
            const Tps3 r = tps_fit(src, dst, lambda);
            double norm = 0.0;
            for(const auto &w : r.weights) norm += w.squaredNorm();
            CHECK(norm < prev);
            prev = norm;
        }
    }
    SUBCASE("jacobian matches finite differences") {
        const Vec3 p(7, -3, 11);
        const Mat3 j = t.jacobian(p);
        for(int a = 0; a < 3; ++a){
            const Vec3 h = 1e-5 * Vec3::Unit(a);
            const Vec3 fd = (t.apply(p + h) - t.apply(p - h)) / 2e-5;
            CHECK((j.col(a) - fd).norm() <= 1e-6);
        }
    }
}

TEST_CASE("tps_fit errors") {
    const auto src = jittered_lattice(6, 3.0);
    std::vector<Vec3> fewer(src.begin(), src.end() - 1);
    CHECK(kind_of([&]{ tps_fit(src, fewer); }) == ErrorKind::ControlMismatch);
    std::vector<Vec3> planar;
    for(int i = 0; i < 3; ++i)
        for(int j = 0; j < 3; ++j) planar.emplace_back(10 * i, 10 * j, 5.0);
    CHECK(kind_of([&]{ tps_fit(planar, planar); }) == ErrorKind::DegenerateControls);
}

TEST_CASE("tps inverse") {
    const auto src = jittered_lattice(7, 3.0);
    Rng rng(9);
    std::vector<Vec3> dst = src;
    for(auto &p : dst) p += Vec3(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Tps3 t = tps_fit(src, dst);
    for(int i = 0; i < 20; ++i){
        const Vec3 q(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-30, 30));
        const Vec3 p = tps_invert_point(t, q);
        CHECK((t.apply(p) - q).norm() <= 1e-3);
    }
    Transform tr{Affine3::identity(), t};
    tr.affine.translation = Vec3(2, 0, -1);
    const Vec3 q(4, 5, 6);
    CHECK((tr.apply(tr.apply_inverse(q)) - q).norm() <= 1e-3);
}

TEST_CASE("warp_volume") {
    const GridGeometry g = testutil::geometry({20, 18, 16}, 2.0, Vec3(-20, -18, -16));

    SUBCASE("identity is bit-exact") {
        const VoxelGrid in = testutil::random_grid(g, 1);
        const VoxelGrid out = warp_volume(in, Affine3::identity(), g);
        for(Channel c : in.labels()){
            const auto a = in.values(c), b = out.values(c);
            CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
        }
        const VoxelGrid out2 = warp_volume(in, Transform{}, g);
        CHECK(std::memcmp(out2.values(Channel::CT).data(), in.values(Channel::CT).data(), g.voxel_count() * 4) == 0);
    }
    SUBCASE("one-voxel translation shifts indices") {
        const VoxelGrid in = testutil::random_grid(g, 2);
        Affine3 t;
        t.translation = Vec3(2.0, 0, 0);
        const VoxelGrid out = warp_volume(in, t, g);
        for(int k = 0; k < 16; ++k)
            for(int j = 0; j < 18; ++j){
                for(int i = 1; i < 20; ++i)
                    CHECK(out.at(Channel::CT, i, j, k) == doctest::Approx(in.at(Channel::CT, i - 1, j, k)).epsilon(1e-5));
                CHECK(out.at(Channel::CT, 0, j, k) == in.fill(Channel::CT));
            }
    }
    SUBCASE("round trip with a mild affine") {
        const VoxelGrid in = smooth_grid(g);
        Rng rng(3);
        Affine3 a = random_affine(rng, 0.03);
        a.translation = Vec3(1.5, -2.0, 0.7);
        const VoxelGrid back = warp_volume(warp_volume(in, a, g), affine_invert(a), g);
        const double range = channel_range(in);
        const auto &gg = g;
        double worst = 0.0;
        for(int k = 4; k < gg.dims[2] - 4; ++k)
            for(int j = 4; j < gg.dims[1] - 4; ++j)
                for(int i = 4; i < gg.dims[0] - 4; ++i)
                    worst = std::max(worst, static_cast<double>(std::abs(back.at(Channel::CT, i, j, k) - in.at(Channel::CT, i, j, k))));
        CHECK(worst <= 0.02 * range);
    }
    SUBCASE("warping commutes with composition") {
        const VoxelGrid in = smooth_grid(g);
        Rng rng(4);
        Affine3 a = random_affine(rng, 0.03), b = random_affine(rng, 0.03);
        a.translation = Vec3(1, 2, -1);
        b.translation = Vec3(-2, 0.5, 1);
        const VoxelGrid two = warp_volume(warp_volume(in, a, g), b, g);
        const VoxelGrid one = warp_volume(in, affine_compose(b, a), g);
        CHECK(interior_mean_abs_diff(two, one, 4) <= 0.01 * channel_range(in));
    }
    SUBCASE("singular affine") {
        const VoxelGrid in = testutil::random_grid(g, 5);
        Affine3 s;
        s.linear(2, 2) = 0.0;
        CHECK(kind_of([&]{ warp_volume(in, s, g); }) == ErrorKind::SingularTransform);
    }
    SUBCASE("tps warp matches per-voxel inversion") {
        const VoxelGrid in = smooth_grid(g);
        const Box3 box{g.hull_min(), g.hull_max()};
        DeformationConfig cfg = DeformationConfig::none();
        cfg.max_tps_jitter_mm = 2.0;
        cfg.seed = 11;
        const Tps3 t = random_transform(cfg, box).tps;
        const VoxelGrid out = warp_volume(in, t, g);
        for(auto [i, j, k] : {std::array<int, 3>{5, 5, 5}, {10, 9, 8}, {14, 3, 12}}){
            const Vec3 p = tps_invert_point(t, g.center(i, j, k));
            CHECK(out.at(Channel::CT, i, j, k) == doctest::Approx(trilinear_sample(in, Channel::CT, p)).epsilon(1e-3));
        }
    }
}

TEST_CASE("random_transform") {
    const Box3 box{Vec3(-100, -100, -150), Vec3(100, 100, 150)};

    SUBCASE("zero maxima give the identity") {
        DeformationConfig cfg = DeformationConfig::none();
        cfg.seed = 99;
        const SyntheticTransform st = random_transform(cfg, box);
        CHECK((st.affine.linear - Mat3::Identity()).norm() <= 1e-12);
        CHECK(st.affine.translation.norm() <= 1e-9);
        for(const auto &w : st.tps.weights) CHECK(w.norm() <= 1e-8);
        const Vec3 p(13, -40, 77);
        CHECK((st.combined().apply(p) - p).norm() <= 1e-8);
    }
    SUBCASE("deterministic per seed") {
        DeformationConfig cfg;
        cfg.seed = 17;
        const SyntheticTransform a = random_transform(cfg, box), b = random_transform(cfg, box);
        CHECK(a.affine.linear == b.affine.linear);
        CHECK(a.affine.translation == b.affine.translation);
        REQUIRE(a.tps.weights.size() == 64);
        for(std::size_t i = 0; i < 64; ++i) CHECK(a.tps.weights[i] == b.tps.weights[i]);
        cfg.seed = 18;
        CHECK(random_transform(cfg, box).affine.linear != a.affine.linear);
    }
    SUBCASE("draws respect the configured bounds") {
        DeformationConfig cfg;
        cfg.max_log_scale = cfg.max_shear = 0.0;
        cfg.tps_grid = {2, 2, 2};
        double max_t = 0.0, max_rot = 0.0;
        for(std::uint64_t seed = 0; seed < 1000; ++seed){
            cfg.seed = seed;
            const SyntheticTransform st = random_transform(cfg, box);
            max_t = std::max(max_t, st.translation.norm());
            const double c = std::clamp((st.affine.linear.trace() - 1.0) / 2.0, -1.0, 1.0);
            max_rot = std::max(max_rot, std::acos(c) * 180.0 / std::numbers::pi);
            for(std::size_t i = 0; i < st.tps.controls.size(); ++i){
                const Vec3 d = st.tps.apply(st.tps.controls[i]) - st.tps.controls[i];
                CHECK(d.cwiseAbs().maxCoeff() <= cfg.max_tps_jitter_mm + 1e-6);
            }
        }
        CHECK(max_t <= cfg.max_translation_mm);
        CHECK(max_rot <= cfg.max_rotation_deg + 1e-9);
        CHECK(max_t > 0.8 * cfg.max_translation_mm);
    }
    SUBCASE("invalid config") {
        DeformationConfig cfg;
        cfg.tps_grid = {1, 4, 4};
        CHECK(kind_of([&]{ random_transform(cfg, box); }) == ErrorKind::InvalidArgument);
    }
}
