// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include "mujica/graph.hpp"
#include "mujica/material.hpp"
#include "mujica/ops.hpp"

namespace mujica {

/// Distant directional light: `direction` points from the surface toward the
/// light, unit length, upper hemisphere.
struct Light {
    std::array<double, 3> direction{0.0, 0.0, 1.0};
    double intensity = 1.0;
};

struct LightSet {
    std::vector<Light> lights;
};

struct ShadingParams {
    std::array<double, 3> view{0.0, 0.0, 1.0};
    double f0_dielectric = 0.04;
    double exposure = 1.0;
};

/// Quasi-uniform upper-hemisphere directions: z_i = (i+0.5)/n, golden-angle
/// azimuth. Deterministic for a given n.
LightSet fibonacci_hemisphere(int n);

/// Trowbridge-Reitz GGX normal distribution, alpha = roughness^2 clamped to
/// >= 1e-4.
double ndf_ggx(double n_dot_h, double roughness);

/// Smith geometry with the Schlick-GGX form, k = (roughness+1)^2 / 8.
double geometry_smith(double n_dot_v, double n_dot_l, double roughness);

std::array<double, 3> fresnel_schlick(double h_dot_v, const std::array<double, 3>& f0);

/// Cook-Torrance render under one directional light. Requires basecolor,
/// normal and roughness; metallic defaults to 0. Output is (H,W,3) linear
/// in [0,1].
Tensor render_point_light(const MaterialSet& set, const Light& light,
                          const ShadingParams& shading);

std::vector<Tensor> render_set(const MaterialSet& set, const LightSet& lights,
                               const ShadingParams& shading);

/// Map tensors feeding the differentiable render path. All (H,W,3) in graph.
struct RenderInputs {
    Var basecolor;
    Var normal;
    Var roughness;
    std::optional<Var> metallic;
};

/// Same shading math as render_point_light, expressed on the tape so the
/// reconstruction loss can backpropagate into the maps.
Var render_point_light_ad(Graph& g, const RenderInputs& inputs, const Light& light,
                          const ShadingParams& shading);

Tensor linear_to_srgb(const Tensor& image);

void save_lightset_json(const std::filesystem::path& file, const LightSet& lights);
LightSet load_lightset_json(const std::filesystem::path& file);

} // namespace mujica
