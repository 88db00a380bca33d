// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/renderer.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mujica/error.hpp"
#include "mujica/parallel.hpp"

namespace mujica {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kGoldenConjugate = 0.6180339887498949; // (sqrt(5)-1)/2
constexpr double kMinRoughness = 0.01;                   // alpha >= 1e-4 inside D
constexpr double kMinCos = 1e-4;                         // geometry/denominator guard
constexpr double kSpecDenomEps = 1e-6;

std::array<double, 3> normalize3(const std::array<double, 3>& v) {
    const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / len, v[1] / len, v[2] / len};
}

double dot3s(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

} // namespace

LightSet fibonacci_hemisphere(int n) {
    if (n < 1) throw validation_error("fibonacci_hemisphere: n must be >= 1");
    LightSet set;
    set.lights.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double z = (i + 0.5) / n;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = 2.0 * kPi * (i * kGoldenConjugate);
        Light light;
        light.direction = {r * std::cos(phi), r * std::sin(phi), z};
        set.lights.push_back(light);
    }
    return set;
}

double ndf_ggx(double n_dot_h, double roughness) {
    const double alpha2 = std::max(roughness * roughness, kMinRoughness * kMinRoughness);
    const double a4 = alpha2 * alpha2;
    const double d = n_dot_h * n_dot_h * (a4 - 1.0) + 1.0;
    return a4 / (kPi * d * d);
}

double geometry_smith(double n_dot_v, double n_dot_l, double roughness) {
    const double k = (roughness + 1.0) * (roughness + 1.0) / 8.0;
    const double g1v = n_dot_v / (n_dot_v * (1.0 - k) + k);
    const double g1l = n_dot_l / (n_dot_l * (1.0 - k) + k);
    return g1v * g1l;
}

std::array<double, 3> fresnel_schlick(double h_dot_v, const std::array<double, 3>& f0) {
    const double m = 1.0 - h_dot_v;
    const double m5 = m * m * m * m * m;
    return {f0[0] + (1.0 - f0[0]) * m5, f0[1] + (1.0 - f0[1]) * m5, f0[2] + (1.0 - f0[2]) * m5};
}

Tensor render_point_light(const MaterialSet& set, const Light& light,
                          const ShadingParams& shading) {
    const MaterialMap& basecolor = set.at(MapKind::Basecolor);
    const MaterialMap& normal = set.at(MapKind::Normal);
    const MaterialMap& rough = set.at(MapKind::Roughness);
    const MaterialMap* metal = set.has(MapKind::Metallic) ? &set.at(MapKind::Metallic) : nullptr;

    const int h = basecolor.height(), w = basecolor.width();
    NormalField nf = decode_normal(normal);

    const std::array<double, 3> l = light.direction;
    const std::array<double, 3> v = shading.view;
    const std::array<double, 3> half = normalize3({l[0] + v[0], l[1] + v[1], l[2] + v[2]});
    const double h_dot_v = dot3s(half, v);
    const double gain = light.intensity * shading.exposure;

    Tensor out({h, w, 3});
    parallel_for(h, [&](std::int64_t y0, std::int64_t y1) {
        for (std::int64_t y = y0; y < y1; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::array<double, 3> n = {nf.vectors.at(static_cast<int>(y), x, 0),
                                                 nf.vectors.at(static_cast<int>(y), x, 1),
                                                 nf.vectors.at(static_cast<int>(y), x, 2)};
                const double ndl = dot3s(n, l);
                const double ndv = dot3s(n, v);
                const double ndh = dot3s(n, half);
                const double r = rough.pixels.at(static_cast<int>(y), x, 0);
                const double m = metal ? metal->pixels.at(static_cast<int>(y), x, 0) : 0.0;

                const double d = ndf_ggx(ndh, r);
                const double nl_s = std::max(ndl, kMinCos);
                const double nv_s = std::max(ndv, kMinCos);
                const double geom = geometry_smith(nv_s, nl_s, r);
                const double spec_scalar = d * geom / (4.0 * nv_s * nl_s + kSpecDenomEps);
                const double lit = std::max(ndl, 0.0) * gain;

                for (int c = 0; c < 3; ++c) {
                    const double albedo = basecolor.pixels.at(static_cast<int>(y), x, c);
                    const double f0 = shading.f0_dielectric * (1.0 - m) + albedo * m;
                    const double fres = f0 + (1.0 - f0) * std::pow(1.0 - h_dot_v, 5.0);
                    const double kd = (1.0 - fres) * (1.0 - m);
                    const double radiance = kd * albedo / kPi + fres * spec_scalar;
                    out.at(static_cast<int>(y), x, c) = std::clamp(radiance * lit, 0.0, 1.0);
                }
            }
        }
    });
    return out;
}

std::vector<Tensor> render_set(const MaterialSet& set, const LightSet& lights,
                               const ShadingParams& shading) {
    if (lights.lights.empty()) throw validation_error("render_set: empty light set");
    std::vector<Tensor> out;
    out.reserve(lights.lights.size());
    for (const Light& light : lights.lights) {
        out.push_back(render_point_light(set, light, shading));
    }
    return out;
}

Var render_point_light_ad(Graph& g, const RenderInputs& inputs, const Light& light,
                          const ShadingParams& shading) {
    const auto& shape = inputs.basecolor.shape();
    if (shape.size() != 3 || shape[2] != 3) {
        throw validation_error("render_point_light_ad expects (H,W,3) maps");
    }
    const int h = shape[0], w = shape[1];

    const std::array<double, 3> l = light.direction;
    const std::array<double, 3> v = shading.view;
    const std::array<double, 3> half = normalize3({l[0] + v[0], l[1] + v[1], l[2] + v[2]});
    const double h_dot_v = dot3s(half, v);
    const double m5 = std::pow(1.0 - h_dot_v, 5.0);
    const double gain = light.intensity * shading.exposure;

    // tangent-space decode: normalize(2p - 1)
    Var nvec = add_scalar(scale(inputs.normal, 2.0), -1.0);
    Var nlen = sqrt(add_scalar(csum(square(nvec)), 1e-20));
    Var n = cdiv(nvec, nlen);

    Var ndl = dot3(n, l);
    Var ndv = dot3(n, v);
    Var ndh = dot3(n, half);
    Var rough = slice_lastdim(inputs.roughness, 0, 1);
    Var metal = inputs.metallic ? slice_lastdim(*inputs.metallic, 0, 1)
                                : g.constant(Tensor({h, w, 1}));

    // GGX distribution with the clamped-alpha guard
    Var alpha2sq = powi(max_with(rough, kMinRoughness), 4);
    Var d_inner = add_scalar(mul(square(ndh), add_scalar(alpha2sq, -1.0)), 1.0);
    Var d = div(alpha2sq, scale(square(d_inner), kPi));

    // Smith geometry, k from unclamped roughness
    Var k = scale(square(add_scalar(rough, 1.0)), 1.0 / 8.0);
    Var one_minus_k = add_scalar(scale(k, -1.0), 1.0);
    Var nv_s = max_with(ndv, kMinCos);
    Var nl_s = max_with(ndl, kMinCos);
    Var g1v = div(nv_s, add(mul(nv_s, one_minus_k), k));
    Var g1l = div(nl_s, add(mul(nl_s, one_minus_k), k));
    Var geom = mul(g1v, g1l);

    // Fresnel with f0 = mix(f0_dielectric, basecolor, metallic)
    Var one_minus_m = add_scalar(scale(metal, -1.0), 1.0);
    Var f0 = add(cmul(inputs.basecolor, metal),
                 cmul(g.constant(Tensor::full({h, w, 3}, 1.0)),
                      scale(one_minus_m, shading.f0_dielectric)));
    Var fres = add_scalar(scale(f0, 1.0 - m5), m5);

    Var kd = cmul(add_scalar(scale(fres, -1.0), 1.0), one_minus_m);
    Var diffuse = scale(mul(kd, inputs.basecolor), 1.0 / kPi);
    Var spec_den = add_scalar(scale(mul(nv_s, nl_s), 4.0), kSpecDenomEps);
    Var spec = cmul(fres, div(mul(d, geom), spec_den));

    Var radiance = scale(add(diffuse, spec), gain);
    Var lit = cmul(radiance, max_with(ndl, 0.0));
    return clamp01(lit);
}

Tensor linear_to_srgb(const Tensor& image) {
    Tensor out = image;
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const double v = std::clamp(out[i], 0.0, 1.0);
        out[i] = v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
    }
    return out;
}

void save_lightset_json(const std::filesystem::path& file, const LightSet& lights) {
    nlohmann::json j = nlohmann::json::array();
    for (const Light& light : lights.lights) {
        j.push_back({light.direction[0], light.direction[1], light.direction[2], light.intensity});
    }
    std::ofstream out(file);
    if (!out) throw runtime_error("cannot write " + file.string());
    out << j.dump(2) << "\n";
}

LightSet load_lightset_json(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw runtime_error("cannot open " + file.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("bad light file " + file.string() + ": " + e.what());
    }
    if (!j.is_array() || j.empty()) throw validation_error("light file must be a non-empty array");
    LightSet set;
    for (const auto& item : j) {
        if (!item.is_array() || item.size() < 3) {
            throw validation_error("light entries must be [x,y,z] or [x,y,z,intensity]");
        }
        Light light;
        light.direction = {item[0].get<double>(), item[1].get<double>(), item[2].get<double>()};
        light.intensity = item.size() > 3 ? item[3].get<double>() : 1.0;
        const double len = std::sqrt(dot3s(light.direction, light.direction));
        if (len < 1e-9 || light.direction[2] <= 0.0) {
            throw validation_error("light direction must be unit-normalizable with z > 0");
        }
        light.direction = {light.direction[0] / len, light.direction[1] / len,
                           light.direction[2] / len};
        if (light.intensity < 0.0) throw validation_error("light intensity must be >= 0");
        set.lights.push_back(light);
    }
    return set;
}

} // namespace mujica
