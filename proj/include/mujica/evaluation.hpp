// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mujica/adapter.hpp"
#include "mujica/renderer.hpp"

namespace mujica {

/// 10*log10(1/MSE) on [0,1] images; identical images report the 99 dB cap.
double psnr(const Tensor& a, const Tensor& b);

/// Standard SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// dynamic range 1, evaluated on the valid region and averaged over channels.
double ssim(const Tensor& a, const Tensor& b);

struct PairMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
};

struct MetricsReport {
    std::string material_id;
    std::map<MapKind, PairMetrics> per_map;          // SR map vs GT map
    std::vector<PairMetrics> per_light;              // SR render vs GT render
    double render_psnr_mean = 0.0;
    double render_ssim_mean = 0.0;
    double render_psnr_stddev = 0.0;                 // across-light consistency proxy
    std::map<MapKind, PairMetrics> baseline_per_map; // bicubic upscale
    std::vector<PairMetrics> baseline_per_light;
    double baseline_render_psnr_mean = 0.0;
    double baseline_render_ssim_mean = 0.0;
    bool has_baseline = false;
};

/// Renders both sets under every light; per-light PSNR/SSIM plus the
/// across-light standard deviation of PSNR (low = consistent).
MetricsReport consistency_report(const MaterialSet& sr, const MaterialSet& gt,
                                 const LightSet& lights, const ShadingParams& shading = {});

struct EvalOptions {
    int lights_n = 6;
    int tile = 0; // 0 = untiled
    int tile_overlap = 8;
    bool gt_substitute = true; // non-SR maps replaced by GT during rendering
    bool baseline = true;      // also evaluate the bicubic upscale
    std::filesystem::path out_dir; // empty: no PNG dumps
};

/// For each material: bicubic LR generation, model forward, metrics on the
/// fused maps and on renders (with GT substitution), plus the bicubic
/// baseline on the same inputs.
std::vector<MetricsReport> evaluate_model(MujicaModel& model, const DatasetIndex& dataset,
                                          const EvalOptions& options);

void write_reports_json(const std::filesystem::path& file,
                        const std::vector<MetricsReport>& reports);
void write_reports_csv(const std::filesystem::path& file,
                       const std::vector<MetricsReport>& reports);

} // namespace mujica
