#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "orchidkit/geometry.hpp"
#include "orchidkit/rng.hpp"
#include "orchidkit/synthdata.hpp"

using namespace orchid;

namespace {

MetricDepth make_depth(std::vector<std::size_t> shape, std::vector<double> values) {
    MetricDepth d;
    d.values = DenseArray::from(shape, std::move(values));
    d.valid = BoolMask(shape[0], shape[1], true);
    return d;
}

}  // namespace

TEST_CASE("preprocess_depth hand-derived case") {
    // d = [1,2,4]: inverse [1, .5, .25], median .5, deviation .25,
    // normalized [4,2,1], shifted to [3,1,0]
    MetricDepth d = make_depth({1, 3}, {1, 2, 4});
    ModelDepth out = preprocess_depth(d);
    CHECK(out.values.data[0] == 3.0);
    CHECK(out.values.data[1] == 1.0);
    CHECK(out.values.data[2] == 0.0);
    CHECK(out.d_sigma == doctest::Approx(0.25).epsilon(1e-15));
    CHECK_FALSE(out.degenerate);
}

TEST_CASE("preprocess_depth is invariant to positive scaling") {
    RandomStream rng(2);
    MetricDepth d;
    d.values = rng.uniform_array({16, 16}, 0.3, 12.0);
    d.valid = BoolMask(16, 16, true);
    d.valid.set(0, 0, false);
    d.valid.set(7, 9, false);
    ModelDepth a = preprocess_depth(d);

    for (double c : {3.0, 0.125, 1e3}) {
        MetricDepth dc;
        dc.values = d.values * c;
        dc.valid = d.valid;
        ModelDepth b = preprocess_depth(dc);
        CHECK(max_abs_diff(a.values, b.values) <= 1e-12);
    }
}

TEST_CASE("preprocess_depth output minimum over valid pixels is exactly zero") {
    RandomStream rng(3);
    MetricDepth d;
    d.values = rng.uniform_array({8, 8}, 0.5, 5.0);
    d.valid = BoolMask(8, 8, true);
    d.valid.set(2, 2, false);
    ModelDepth out = preprocess_depth(d);
    double mn = 1e300;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        if (d.valid.m[i]) mn = std::min(mn, out.values.data[i]);
    CHECK(mn == 0.0);
    CHECK(out.values.data[2 * 8 + 2] == 0.0);  // invalid pixels carry zero
}

TEST_CASE("preprocess_depth degeneracy and error paths") {
    SUBCASE("constant depth flags the epsilon floor") {
        MetricDepth d = make_depth({3, 3}, std::vector<double>(9, 2.0));
        ModelDepth out = preprocess_depth(d);
        CHECK(out.degenerate);
        for (double v : out.values.data) CHECK(v == 0.0);
    }
    SUBCASE("no valid pixels rejected") {
        MetricDepth d;
        d.values = DenseArray({2, 2}, 1.0);
        d.valid = BoolMask(2, 2, false);
        CHECK_THROWS_AS(preprocess_depth(d), GeometryError);
    }
}

TEST_CASE("depth_to_pointcloud") {
    Intrinsics K{2.0, 4.0, 3.0, 2.0};
    SUBCASE("principal point maps to the optical axis") {
        MetricDepth d = make_depth({5, 7}, std::vector<double>(35, 5.0));
        DenseArray p = depth_to_pointcloud(d, K);
        CHECK(p.at(0, 2, 3) == 0.0);
        CHECK(p.at(1, 2, 3) == 0.0);
        CHECK(p.at(2, 2, 3) == 5.0);
    }
    SUBCASE("unit intrinsics") {
        Intrinsics unit{1.0, 1.0, 0.0, 0.0};
        MetricDepth d = make_depth({4, 4}, std::vector<double>(16, 1.0));
        DenseArray p = depth_to_pointcloud(d, unit);
        CHECK(p.at(0, 3, 2) == 2.0);
        CHECK(p.at(1, 3, 2) == 3.0);
        CHECK(p.at(2, 3, 2) == 1.0);
    }
    SUBCASE("fronto-parallel plane keeps z constant") {
        MetricDepth d = make_depth({4, 4}, std::vector<double>(16, 2.5));
        DenseArray p = depth_to_pointcloud(d, K);
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) CHECK(p.at(2, y, x) == 2.5);
    }
    SUBCASE("non-positive focal rejected") {
        MetricDepth d = make_depth({4, 4}, std::vector<double>(16, 1.0));
        CHECK_THROWS_AS(depth_to_pointcloud(d, Intrinsics{0.0, 1.0, 0, 0}), GeometryError);
    }
}

TEST_CASE("normals_from_pointcloud on a fronto-parallel plane") {
    Intrinsics K{16.0, 16.0, 7.5, 7.5};
    MetricDepth d = make_depth({16, 16}, std::vector<double>(256, 2.0));
    NormalMap n = normals_from_pointcloud(depth_to_pointcloud(d, K));
    for (std::size_t y = 1; y < 15; ++y)
        for (std::size_t x = 1; x < 15; ++x) {
            REQUIRE(n.valid.at(y, x));
            CHECK(n.vectors.at(0, y, x) == doctest::Approx(0.0).epsilon(1e-9));
            CHECK(n.vectors.at(1, y, x) == doctest::Approx(0.0).epsilon(1e-9));
            CHECK(n.vectors.at(2, y, x) == doctest::Approx(-1.0).epsilon(1e-9));
        }
}

TEST_CASE("normals_from_pointcloud satisfies the unit-norm invariant") {
    DatasetOptions opts;
    opts.height = opts.width = 24;
    Sample s = render(scene_for_index(5, 2, opts.scene), 24, 24);
    NormalMap n = normals_from_pointcloud(depth_to_pointcloud(s.depth, s.intrinsics), s.depth.valid);
    std::size_t checked = 0;
    for (std::size_t y = 0; y < 24; ++y)
        for (std::size_t x = 0; x < 24; ++x) {
            if (!n.valid.at(y, x)) continue;
            double norm2 = 0;
            for (std::size_t c = 0; c < 3; ++c) norm2 += n.vectors.at(c, y, x) * n.vectors.at(c, y, x);
            CHECK(std::abs(std::sqrt(norm2) - 1.0) <= 1e-9);
            ++checked;
        }
    CHECK(checked > 0);
}

TEST_CASE("derived sphere normals match the analytic sphere away from the silhouette") {
    // analytic sphere oracle from the renderer
    SceneSpec spec;
    spec.has_ground = false;
    spec.has_back_wall = true;
    spec.wall_z = 12.0;
    ObjectSpec sphere;
    sphere.kind = ObjectSpec::Kind::Sphere;
    sphere.center[0] = 0.0;
    sphere.center[1] = 0.0;
    sphere.center[2] = 4.0;
    sphere.size[0] = 1.0;
    spec.objects.push_back(sphere);
    Sample s = render(spec, 64, 64);

    NormalMap derived =
        normals_from_pointcloud(depth_to_pointcloud(s.depth, s.intrinsics), s.depth.valid);
    BoolMask interior = interior_mask(s.depth, 0.05);

    double sum_deg = 0.0;
    std::size_t n = 0;
    for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
            if (!interior.at(y, x) || !derived.valid.at(y, x)) continue;
            if (s.depth.values.at(y, x) > 11.0) continue;  // wall pixels, not the sphere
            double dot = 0;
            for (std::size_t c = 0; c < 3; ++c) dot += derived.vectors.at(c, y, x) * s.normal.vectors.at(c, y, x);
            sum_deg += std::acos(std::min(1.0, std::max(-1.0, dot))) * 57.29577951308232;
            ++n;
        }
    REQUIRE(n > 100);
    CHECK(sum_deg / n < 2.0);
}

TEST_CASE("normals_from_pointcloud degenerate inputs") {
    SUBCASE("constant pointcloud marks everything invalid") {
        DenseArray p({3, 5, 5}, 1.0);
        NormalMap n = normals_from_pointcloud(p);
        CHECK(n.valid.count() == 0);
    }
    SUBCASE("raster must be at least 3x3") {
        DenseArray p({3, 2, 2}, 1.0);
        CHECK_THROWS_AS(normals_from_pointcloud(p), GeometryError);
    }
}

TEST_CASE("depth_normal_inconsistency endpoints") {
    Intrinsics K{16, 16, 7.5, 7.5};
    MetricDepth d = make_depth({16, 16}, std::vector<double>(256, 2.0));
    NormalMap derived = normals_from_pointcloud(depth_to_pointcloud(d, K));

    SUBCASE("identical normals give zero") {
        auto r = depth_normal_inconsistency(d, derived, K);
        CHECK(r.mean == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("opposed normals give one") {
        NormalMap flipped = derived;
        for (double& v : flipped.vectors.data) v = -v;
        auto r = depth_normal_inconsistency(d, flipped, K);
        CHECK(r.mean == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("empty joint mask rejected") {
        NormalMap none = derived;
        none.valid = BoolMask(16, 16, false);
        CHECK_THROWS_AS(depth_normal_inconsistency(d, none, K), GeometryError);
    }
    SUBCASE("bounded in [0,1] on random normals") {
        RandomStream rng(9);
        NormalMap noisy = derived;
        for (std::size_t i = 0; i < 256; ++i) {
            double v[3] = {rng.normal(), rng.normal(), rng.normal()};
            double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            for (std::size_t c = 0; c < 3; ++c) noisy.vectors.data[c * 256 + i] = v[c] / len;
        }
        auto r = depth_normal_inconsistency(d, noisy, K);
        CHECK(r.mean >= 0.0);
        CHECK(r.mean <= 1.0);
    }
}

TEST_CASE("rendered scenes are analytically depth-normal consistent") {
    DatasetOptions opts;
    opts.height = opts.width = 48;
    for (int idx : {0, 1, 2}) {
        Sample s = render(scene_for_index(21, idx, opts.scene), 48, 48);
        NormalMap gt = s.normal;
        gt.valid = interior_mask(s.depth, 0.05);
        auto r = depth_normal_inconsistency(s.depth, gt, s.intrinsics);
        CHECK(r.mean <= 0.01);
    }
}

TEST_CASE("align_affine") {
    RandomStream rng(12);
    MetricDepth gt;
    gt.values = rng.uniform_array({8, 8}, 1.0, 6.0);
    gt.valid = BoolMask(8, 8, true);

    SUBCASE("identity alignment") {
        DenseArray pred({8, 8});
        for (std::size_t i = 0; i < 64; ++i) pred.data[i] = 1.0 / gt.values.data[i];
        AffineFit f = fit_affine_inverse_depth(pred, gt);
        CHECK(f.scale == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(f.shift == doctest::Approx(0.0).epsilon(1e-10));
        MetricDepth out = align_affine(pred, gt);
        CHECK(max_abs_diff(out.values, gt.values) < 1e-9);
    }
    SUBCASE("exact affine recovery: pred = 2/gt + 3") {
        DenseArray pred({8, 8});
        for (std::size_t i = 0; i < 64; ++i) pred.data[i] = 2.0 / gt.values.data[i] + 3.0;
        AffineFit f = fit_affine_inverse_depth(pred, gt);
        CHECK(f.scale == doctest::Approx(0.5).epsilon(1e-10));
        CHECK(f.shift == doctest::Approx(-1.5).epsilon(1e-10));
        MetricDepth out = align_affine(pred, gt);
        CHECK(max_abs_diff(out.values, gt.values) < 1e-8);
    }
    SUBCASE("noisy recovery on a 64x64 ramp scene") {
        // synthetic regression oracle: inverse-depth ramp plus N(0, 0.01) noise
        MetricDepth ramp;
        ramp.values = DenseArray({64, 64});
        ramp.valid = BoolMask(64, 64, true);
        for (std::size_t y = 0; y < 64; ++y)
            for (std::size_t x = 0; x < 64; ++x)
                ramp.values.at(y, x) = 1.0 / (0.2 + 0.8 * (static_cast<double>(x) / 63.0));
        RandomStream noise(77);
        DenseArray pred({64, 64});
        for (std::size_t i = 0; i < pred.size(); ++i)
            pred.data[i] = 1.0 / ramp.values.data[i] + 0.01 * noise.normal();
        AffineFit f = fit_affine_inverse_depth(pred, ramp);
        CHECK(std::abs(f.scale - 1.0) < 1e-2);
        CHECK(std::abs(f.shift - 0.0) < 1e-2);
    }
    SUBCASE("constant prediction rejected with a degeneracy diagnostic") {
        DenseArray pred({8, 8}, 0.7);
        CHECK_THROWS_WITH_AS(fit_affine_inverse_depth(pred, gt), doctest::Contains("rank-deficient"),
                             GeometryError);
    }
    SUBCASE("alignment is idempotent") {
        DenseArray pred({8, 8});
        for (std::size_t i = 0; i < 64; ++i) pred.data[i] = 1.7 / gt.values.data[i] - 0.05;
        MetricDepth once = align_affine(pred, gt);
        DenseArray inv_once({8, 8});
        for (std::size_t i = 0; i < 64; ++i) inv_once.data[i] = 1.0 / once.values.data[i];
        MetricDepth twice = align_affine(inv_once, gt);
        CHECK(max_abs_diff(once.values, twice.values) <= 1e-12);
    }
    SUBCASE("fewer than two valid pixels rejected") {
        MetricDepth tiny;
        tiny.values = DenseArray({1, 2}, 2.0);
        tiny.valid = BoolMask(1, 2, false);
        tiny.valid.set(0, 0, true);
        DenseArray pred({1, 2}, 0.5);
        CHECK_THROWS_AS(fit_affine_inverse_depth(pred, tiny), GeometryError);
    }
}
