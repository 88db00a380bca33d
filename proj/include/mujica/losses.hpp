// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mujica/model.hpp"
#include "mujica/renderer.hpp"

namespace mujica {

/// Frozen convolutional feature pyramid for the perceptual loss. `built_in`
/// is a fixed-seed 4-stage stride-2 stack; `load`/`save` exchange weights in
/// the MUJICA1 archive format for externally supplied extractors.
struct PerceptualExtractor {
    std::vector<ConvParams> convs;
    std::vector<double> lambdas; // per-stage weights, shallow layers weighted highest
    std::vector<int> strides;    // per-stage conv stride (built-in uses 2)

    static PerceptualExtractor built_in();
    static PerceptualExtractor load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file);

    /// Stage features of a (H,W,3) image; parameters bind as constants.
    std::vector<Var> features(Binder& bind, Var image);
};

struct LossReport {
    double total = 0.0;
    double rec = 0.0, mat = 0.0;
    double rec_pixel = 0.0, rec_perc = 0.0;
    double mat_pixel = 0.0, mat_perc = 0.0;
    int lights = 0;
    std::map<MapKind, double> per_map; // material-loss term per map
    std::vector<double> per_light;     // reconstruction-loss term per light

    std::string to_json() const; // one JSON-lines record
};

/// mean(sqrt((pred-gt)^2 + eps^2)); lower-bounded by eps, symmetric.
Var charbonnier(Var pred, Var gt, double eps = 1e-3);

/// sum_i lambda_i * charbonnier(phi_i(gt), phi_i(pred)).
Var perceptual_loss(Binder& bind, Var pred, Var gt, PerceptualExtractor& extractor,
                    double eps = 1e-3);

/// Renders SR and GT under every light and sums pixel + perceptual terms.
/// Maps absent from `sr_maps` are taken from `gt` (the GT-substitution rule).
Var reconstruction_loss(Binder& bind, const std::map<MapKind, Var>& sr_maps,
                        const MaterialSet& gt, const LightSet& lights,
                        const ShadingParams& shading, PerceptualExtractor& extractor,
                        double eps = 1e-3, LossReport* report = nullptr);

/// Per-map pixel + perceptual terms, no rendering.
Var material_loss(Binder& bind, const std::map<MapKind, Var>& sr_maps, const MaterialSet& gt,
                  PerceptualExtractor& extractor, double eps = 1e-3,
                  LossReport* report = nullptr);

/// total = rec + mat, with the full breakdown.
Var total_loss(Binder& bind, const std::map<MapKind, Var>& sr_maps, const MaterialSet& gt,
               const LightSet& lights, const ShadingParams& shading,
               PerceptualExtractor& extractor, double eps, LossReport& report);

} // namespace mujica
