// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "mujica/error.hpp"
#include "mujica/losses.hpp"
#include "support.hpp"

using namespace mujica;
using mujica::test::grad_check_bound;

namespace {

MaterialSet test_material(int h, int w, Rng& rng) {
    MaterialSet set;
    auto add = [&](MapKind kind, Tensor px) {
        MaterialMap m;
        m.kind = kind;
        m.pixels = std::move(px);
        set.maps.emplace(kind, std::move(m));
    };
    add(MapKind::Basecolor, rng.uniform_tensor({h, w, 3}, 0.2, 0.8));
    Tensor normal({h, w, 3});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            normal.at(y, x, 0) = 0.5 + rng.uniform(-0.1, 0.1);
            normal.at(y, x, 1) = 0.5 + rng.uniform(-0.1, 0.1);
            normal.at(y, x, 2) = 0.9;
        }
    }
    add(MapKind::Normal, normal);
    Tensor rough({h, w, 3});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double v = rng.uniform(0.4, 0.8);
            rough.at(y, x, 0) = rough.at(y, x, 1) = rough.at(y, x, 2) = v;
        }
    }
    add(MapKind::Roughness, rough);
    return set;
}

// single-stage extractor whose feature function is the identity on
// nonnegative inputs: 1x1-equivalent center-tap conv, stride 1
PerceptualExtractor identity_extractor() {
    PerceptualExtractor ex;
    ConvParams conv;
    conv.w = Tensor({3, 3, 3, 3});
    for (int c = 0; c < 3; ++c) conv.w.data()[((1 * 3 + 1) * 3 + c) * 3 + c] = 1.0;
    conv.b = Tensor({3});
    ex.convs.push_back(std::move(conv));
    ex.lambdas = {1.0};
    ex.strides = {1};
    return ex;
}

constexpr double kEps = 1e-3;

} // namespace

TEST_CASE("charbonnier values") {
    Graph g;
    Rng rng(301);
    Tensor a = rng.uniform_tensor({4, 4, 3}, 0.0, 1.0);
    Var va = g.constant(a);

    CHECK(charbonnier(va, va, kEps).val()[0] == doctest::Approx(kEps).epsilon(1e-12));

    Tensor b = a;
    for (std::int64_t i = 0; i < b.size(); ++i) b[i] += 3e-3;
    Var vb = g.constant(b);
    CHECK(charbonnier(va, vb, kEps).val()[0] ==
          doctest::Approx(std::sqrt(1e-5)).epsilon(1e-9));

    // eps = 0 degenerates to mean absolute error
    double mae = 0.0;
    Tensor c = rng.uniform_tensor({4, 4, 3}, 0.0, 1.0);
    for (std::int64_t i = 0; i < c.size(); ++i) mae += std::abs(a[i] - c[i]);
    mae /= static_cast<double>(c.size());
    Var vc = g.constant(c);
    CHECK(charbonnier(va, vc, 0.0).val()[0] == doctest::Approx(mae).epsilon(1e-12));

    // symmetry, exact
    CHECK(charbonnier(va, vc, kEps).val()[0] == charbonnier(vc, va, kEps).val()[0]);

    CHECK_THROWS_AS(charbonnier(va, g.constant(Tensor({2, 2, 3})), kEps), Error);
}

TEST_CASE("perceptual loss reductions") {
    Rng rng(307);
    Tensor img = rng.uniform_tensor({8, 8, 3}, 0.0, 1.0);
    Tensor other = rng.uniform_tensor({8, 8, 3}, 0.0, 1.0);

    PerceptualExtractor builtin = PerceptualExtractor::built_in();
    {
        Graph g;
        Binder bind(g);
        Var v = g.constant(img);
        double lambda_sum = 0.0;
        for (double l : builtin.lambdas) lambda_sum += l;
        CHECK(perceptual_loss(bind, v, v, builtin, kEps).val()[0] ==
              doctest::Approx(lambda_sum * kEps).epsilon(1e-9));
    }
    {
        PerceptualExtractor zero = PerceptualExtractor::built_in();
        zero.lambdas = {0.0, 0.0, 0.0, 0.0};
        Graph g;
        Binder bind(g);
        CHECK(perceptual_loss(bind, g.constant(img), g.constant(other), zero, kEps).val()[0] ==
              0.0);
    }
    {
        // identity feature, lambda = 1 -> equals plain charbonnier
        PerceptualExtractor ident = identity_extractor();
        Graph g;
        Binder bind(g);
        Var a = g.constant(img);
        Var b = g.constant(other);
        CHECK(perceptual_loss(bind, a, b, ident, kEps).val()[0] ==
              doctest::Approx(charbonnier(a, b, kEps).val()[0]).epsilon(1e-12));
    }
}

TEST_CASE("extractor save/load round trip preserves features") {
    mujica::test::TempDir dir("extractor");
    Rng rng(311);
    PerceptualExtractor ex = PerceptualExtractor::built_in();
    const auto file = dir.path() / "extractor.mjc";
    ex.save(file);
    PerceptualExtractor loaded = PerceptualExtractor::load(file);
    CHECK(loaded.lambdas == ex.lambdas);
    CHECK(loaded.strides == ex.strides);

    Tensor img = rng.uniform_tensor({16, 16, 3}, 0.0, 1.0);
    Graph g;
    Binder bind(g);
    auto fa = ex.features(bind, g.constant(img));
    auto fb = loaded.features(bind, g.constant(img));
    REQUIRE(fa.size() == fb.size());
    for (size_t i = 0; i < fa.size(); ++i) CHECK(fa[i].val().same_values(fb[i].val()));

    CHECK_THROWS_AS(PerceptualExtractor::load(dir.path() / "none.mjc"), Error);
}

TEST_CASE("reconstruction loss on identical sets hits the floor") {
    Rng rng(313);
    MaterialSet gt = test_material(8, 8, rng);
    PerceptualExtractor ex = PerceptualExtractor::built_in();
    LightSet lights = fibonacci_hemisphere(3);

    Graph g;
    Binder bind(g);
    std::map<MapKind, Var> sr;
    for (MapKind kind : {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness}) {
        sr[kind] = g.constant(gt.at(kind).pixels);
    }
    LossReport report;
    Var rec = reconstruction_loss(bind, sr, gt, lights, ShadingParams{}, ex, kEps, &report);
    double lambda_sum = 0.0;
    for (double l : ex.lambdas) lambda_sum += l;
    const double expected = 3.0 * (kEps + lambda_sum * kEps);
    CHECK(rec.val()[0] == doctest::Approx(expected).epsilon(1e-9));
    CHECK(report.lights == 3);
    REQUIRE(report.per_light.size() == 3);
    for (double v : report.per_light) {
        CHECK(v == doctest::Approx(kEps + lambda_sum * kEps).epsilon(1e-9));
    }

    LightSet empty;
    CHECK_THROWS_AS(reconstruction_loss(bind, sr, gt, empty, ShadingParams{}, ex, kEps, nullptr),
                    Error);
}

TEST_CASE("one-light reconstruction loss equals its manual composition") {
    Rng rng(317);
    MaterialSet gt = test_material(8, 8, rng);
    MaterialSet sr_set = test_material(8, 8, rng);
    PerceptualExtractor ident = identity_extractor();
    LightSet one;
    one.lights.push_back(fibonacci_hemisphere(5).lights[3]);

    Graph g;
    Binder bind(g);
    std::map<MapKind, Var> sr;
    for (MapKind kind : {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness}) {
        sr[kind] = g.constant(sr_set.at(kind).pixels);
    }
    Var rec = reconstruction_loss(bind, sr, gt, one, ShadingParams{}, ident, kEps, nullptr);

    RenderInputs in{sr.at(MapKind::Basecolor), sr.at(MapKind::Normal), sr.at(MapKind::Roughness),
                    std::nullopt};
    Var sr_render = render_point_light_ad(g, in, one.lights[0], ShadingParams{});
    Var gt_render = g.constant(render_point_light(gt, one.lights[0], ShadingParams{}));
    const double expected = charbonnier(sr_render, gt_render, kEps).val()[0] +
                            charbonnier(sr_render, gt_render, kEps).val()[0];
    CHECK(rec.val()[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("material loss breakdown and additivity") {
    Rng rng(331);
    MaterialSet gt = test_material(8, 8, rng);
    PerceptualExtractor ex = PerceptualExtractor::built_in();
    double lambda_sum = 0.0;
    for (double l : ex.lambdas) lambda_sum += l;

    {
        Graph g;
        Binder bind(g);
        std::map<MapKind, Var> sr;
        for (MapKind kind : {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness}) {
            sr[kind] = g.constant(gt.at(kind).pixels);
        }
        LossReport report;
        Var mat = material_loss(bind, sr, gt, ex, kEps, &report);
        CHECK(mat.val()[0] == doctest::Approx(3.0 * (kEps + lambda_sum * kEps)).epsilon(1e-9));
        CHECK(report.per_map.size() == 3);
    }
    {
        // single-map set reduces to one charbonnier + one perceptual
        Graph g;
        Binder bind(g);
        MaterialSet other = test_material(8, 8, rng);
        std::map<MapKind, Var> sr{{MapKind::Basecolor, g.constant(other.at(MapKind::Basecolor).pixels)}};
        Var mat = material_loss(bind, sr, gt, ex, kEps, nullptr);
        Var pix = charbonnier(sr.at(MapKind::Basecolor), g.constant(gt.at(MapKind::Basecolor).pixels), kEps);
        Var perc = perceptual_loss(bind, sr.at(MapKind::Basecolor),
                                   g.constant(gt.at(MapKind::Basecolor).pixels), ex, kEps);
        CHECK(mat.val()[0] == doctest::Approx(pix.val()[0] + perc.val()[0]).epsilon(1e-12));
    }
    {
        // perturbing exactly one map changes only that breakdown entry
        Graph g;
        Binder bind(g);
        std::map<MapKind, Var> sr;
        for (MapKind kind : {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness}) {
            sr[kind] = g.constant(gt.at(kind).pixels);
        }
        LossReport base_report;
        material_loss(bind, sr, gt, ex, kEps, &base_report);

        Tensor bumped = gt.at(MapKind::Roughness).pixels;
        for (std::int64_t i = 0; i < bumped.size(); ++i) bumped[i] = std::min(1.0, bumped[i] + 0.05);
        sr[MapKind::Roughness] = g.constant(bumped);
        LossReport bumped_report;
        material_loss(bind, sr, gt, ex, kEps, &bumped_report);
        CHECK(bumped_report.per_map[MapKind::Basecolor] ==
              doctest::Approx(base_report.per_map[MapKind::Basecolor]).epsilon(1e-12));
        CHECK(bumped_report.per_map[MapKind::Normal] ==
              doctest::Approx(base_report.per_map[MapKind::Normal]).epsilon(1e-12));
        CHECK(bumped_report.per_map[MapKind::Roughness] >
              base_report.per_map[MapKind::Roughness] + 1e-6);
    }
}

TEST_CASE("total loss equals rec plus mat with a consistent report") {
    Rng rng(337);
    MaterialSet gt = test_material(8, 8, rng);
    MaterialSet pred = test_material(8, 8, rng);
    PerceptualExtractor ex = PerceptualExtractor::built_in();
    LightSet lights = fibonacci_hemisphere(2);

    Graph g;
    Binder bind(g);
    std::map<MapKind, Var> sr;
    for (MapKind kind : {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness}) {
        sr[kind] = g.constant(pred.at(kind).pixels);
    }
    LossReport report;
    Var total = total_loss(bind, sr, gt, lights, ShadingParams{}, ex, kEps, report);
    CHECK(total.val()[0] == doctest::Approx(report.rec + report.mat).epsilon(1e-9));
    CHECK(report.total == doctest::Approx(report.rec + report.mat).epsilon(1e-9));
    CHECK(report.rec == doctest::Approx(report.rec_pixel + report.rec_perc).epsilon(1e-9));
    CHECK(report.mat == doctest::Approx(report.mat_pixel + report.mat_perc).epsilon(1e-9));
    CHECK(total.val()[0] > 0.0);
    const std::string line = report.to_json();
    CHECK(line.find("\"total\"") != std::string::npos);
}

TEST_CASE("total loss gradients through the renderer match finite differences") {
    Rng rng(347);
    MaterialSet gt = test_material(4, 4, rng);
    MaterialSet pred = test_material(4, 4, rng);
    PerceptualExtractor ex = PerceptualExtractor::built_in();
    LightSet one;
    one.lights.push_back(fibonacci_hemisphere(3).lights[2]);

    Tensor bc = pred.at(MapKind::Basecolor).pixels;
    Tensor nm = pred.at(MapKind::Normal).pixels;
    Tensor rg = pred.at(MapKind::Roughness).pixels;

    auto r = grad_check_bound(
        {&bc, &nm, &rg},
        [&](Graph& g, Binder& bind) {
            (void)g;
            std::map<MapKind, Var> sr{{MapKind::Basecolor, bind(bc, true)},
                                      {MapKind::Normal, bind(nm, true)},
                                      {MapKind::Roughness, bind(rg, true)}};
            LossReport report;
            return total_loss(bind, sr, gt, one, ShadingParams{}, ex, kEps, report);
        },
        1e-5);
    CHECK(r.max_rel < 1e-3);
}
