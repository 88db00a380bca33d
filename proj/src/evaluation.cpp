// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mujica/error.hpp"

namespace mujica {

double psnr(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) throw validation_error("psnr: shape mismatch");
    double mse = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse < 1e-10) return 99.0;
    return -10.0 * std::log10(mse);
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_kernel() {
    static const std::vector<double> kernel = [] {
        std::vector<double> k(kSsimWindow);
        const int half = kSsimWindow / 2;
        double sum = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - half;
            k[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
            sum += k[static_cast<size_t>(i)];
        }
        for (double& v : k) v /= sum;
        return k;
    }();
    return kernel;
}

// separable valid-region Gaussian filter of one channel-plane product
void gauss_valid(const Tensor& a, const Tensor& b, int channel, Tensor& out) {
    const auto& k = gaussian_kernel();
    const int h = a.dim(0), w = a.dim(1);
    const int vw = w - kSsimWindow + 1, vh = h - kSsimWindow + 1;
    Tensor rows({h, vw, 1});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < vw; ++x) {
            double acc = 0.0;
            for (int t = 0; t < kSsimWindow; ++t) {
                acc += k[static_cast<size_t>(t)] * a.at(y, x + t, channel) *
                       b.at(y, x + t, channel);
            }
            rows.at(y, x, 0) = acc;
        }
    }
    for (int y = 0; y < vh; ++y) {
        for (int x = 0; x < vw; ++x) {
            double acc = 0.0;
            for (int t = 0; t < kSsimWindow; ++t) acc += k[static_cast<size_t>(t)] * rows.at(y + t, x, 0);
            out.at(y, x, 0) = acc;
        }
    }
}

} // namespace

double ssim(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) throw validation_error("ssim: shape mismatch");
    if (a.rank() != 3) throw validation_error("ssim expects (H,W,C)");
    const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
    if (h < kSsimWindow || w < kSsimWindow) {
        throw validation_error("ssim: image smaller than the 11x11 window");
    }
    const int vh = h - kSsimWindow + 1, vw = w - kSsimWindow + 1;
    const auto& k = gaussian_kernel();

    double total = 0.0;
    Tensor mu_a({vh, vw, 1}), mu_b({vh, vw, 1});
    Tensor aa({vh, vw, 1}), bb({vh, vw, 1}), ab({vh, vw, 1});
    Tensor rows_a({h, vw, 1}), rows_b({h, vw, 1});
    for (int ch = 0; ch < c; ++ch) {
        gauss_valid(a, b, ch, ab);
        gauss_valid(a, a, ch, aa);
        gauss_valid(b, b, ch, bb);
        // separable means
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < vw; ++x) {
                double acc_a = 0.0, acc_b = 0.0;
                for (int t = 0; t < kSsimWindow; ++t) {
                    acc_a += k[static_cast<size_t>(t)] * a.at(y, x + t, ch);
                    acc_b += k[static_cast<size_t>(t)] * b.at(y, x + t, ch);
                }
                rows_a.at(y, x, 0) = acc_a;
                rows_b.at(y, x, 0) = acc_b;
            }
        }
        for (int y = 0; y < vh; ++y) {
            for (int x = 0; x < vw; ++x) {
                double acc_a = 0.0, acc_b = 0.0;
                for (int t = 0; t < kSsimWindow; ++t) {
                    acc_a += k[static_cast<size_t>(t)] * rows_a.at(y + t, x, 0);
                    acc_b += k[static_cast<size_t>(t)] * rows_b.at(y + t, x, 0);
                }
                mu_a.at(y, x, 0) = acc_a;
                mu_b.at(y, x, 0) = acc_b;
            }
        }
        for (int y = 0; y < vh; ++y) {
            for (int x = 0; x < vw; ++x) {
                const double ma = mu_a.at(y, x, 0), mb = mu_b.at(y, x, 0);
                const double va = aa.at(y, x, 0) - ma * ma;
                const double vb = bb.at(y, x, 0) - mb * mb;
                const double cov = ab.at(y, x, 0) - ma * mb;
                const double num = (2.0 * ma * mb + kSsimC1) * (2.0 * cov + kSsimC2);
                const double den = (ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2);
                total += num / den;
            }
        }
    }
    return total / (static_cast<double>(vh) * vw * c);
}

MetricsReport consistency_report(const MaterialSet& sr, const MaterialSet& gt,
                                 const LightSet& lights, const ShadingParams& shading) {
    if (lights.lights.size() < 2) {
        throw validation_error("consistency_report needs at least 2 lights");
    }
    MetricsReport report;
    std::vector<double> psnrs;
    for (const Light& light : lights.lights) {
        const Tensor sr_render = render_point_light(sr, light, shading);
        const Tensor gt_render = render_point_light(gt, light, shading);
        PairMetrics m{psnr(sr_render, gt_render), ssim(sr_render, gt_render)};
        psnrs.push_back(m.psnr);
        report.per_light.push_back(m);
        report.render_psnr_mean += m.psnr;
        report.render_ssim_mean += m.ssim;
    }
    const double n = static_cast<double>(psnrs.size());
    report.render_psnr_mean /= n;
    report.render_ssim_mean /= n;
    double var = 0.0;
    for (double p : psnrs) var += (p - report.render_psnr_mean) * (p - report.render_psnr_mean);
    report.render_psnr_stddev = std::sqrt(var / n);
    return report;
}

namespace {

MaterialSet substitute(const MaterialSet& sr, const MaterialSet& gt, bool gt_substitute) {
    MaterialSet out = sr;
    if (!gt_substitute) return out;
    for (const auto& [kind, map] : gt.maps) {
        if (!out.has(kind)) out.maps.emplace(kind, map);
    }
    return out;
}

void fill_render_metrics(MetricsReport& report, const MaterialSet& render_set,
                         const MaterialSet& gt, const LightSet& lights, bool baseline) {
    MetricsReport r = consistency_report(render_set, gt, lights, ShadingParams{});
    if (baseline) {
        report.baseline_per_light = r.per_light;
        report.baseline_render_psnr_mean = r.render_psnr_mean;
        report.baseline_render_ssim_mean = r.render_ssim_mean;
    } else {
        report.per_light = r.per_light;
        report.render_psnr_mean = r.render_psnr_mean;
        report.render_ssim_mean = r.render_ssim_mean;
        report.render_psnr_stddev = r.render_psnr_stddev;
    }
}

} // namespace

std::vector<MetricsReport> evaluate_model(MujicaModel& model, const DatasetIndex& dataset,
                                          const EvalOptions& options) {
    const ModelConfig& cfg = model.cfg;
    std::vector<MapKind> required = cfg.fused_maps;
    for (MapKind kind : {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness}) {
        if (std::find(required.begin(), required.end(), kind) == required.end()) {
            required.push_back(kind);
        }
    }
    const LightSet lights = fibonacci_hemisphere(options.lights_n);

    std::vector<MetricsReport> reports;
    for (const DatasetEntry& entry : dataset.entries) {
        MaterialSet hr = load_material_set(entry.dir, required);
        MaterialSet lr = bicubic_resample_set(hr, 1.0 / cfg.scale);

        MaterialSet sr = options.tile > 0
                             ? upscale_material_tiled(model, lr, options.tile, options.tile_overlap)
                             : upscale_material(model, lr);

        MetricsReport report;
        report.material_id = entry.id;
        for (MapKind kind : cfg.fused_maps) {
            report.per_map[kind] = {psnr(sr.at(kind).pixels, hr.at(kind).pixels),
                                    ssim(sr.at(kind).pixels, hr.at(kind).pixels)};
        }
        MaterialSet sr_render = substitute(sr, hr, options.gt_substitute);
        fill_render_metrics(report, sr_render, hr, lights, false);

        if (options.baseline) {
            report.has_baseline = true;
            MaterialSet bic = bicubic_resample_set(lr, static_cast<double>(cfg.scale));
            for (MapKind kind : cfg.fused_maps) {
                report.baseline_per_map[kind] = {psnr(bic.at(kind).pixels, hr.at(kind).pixels),
                                                 ssim(bic.at(kind).pixels, hr.at(kind).pixels)};
            }
            MaterialSet bic_render = substitute(bic, hr, options.gt_substitute);
            fill_render_metrics(report, bic_render, hr, lights, true);
        }

        if (!options.out_dir.empty()) {
            const auto mat_dir = options.out_dir / entry.id;
            save_material_set(sr, mat_dir / "sr");
            for (size_t i = 0; i < lights.lights.size(); ++i) {
                save_image_png(mat_dir / ("render_L" + std::to_string(i) + ".png"),
                               render_point_light(sr_render, lights.lights[i], ShadingParams{}));
            }
        }
        reports.push_back(std::move(report));
    }
    return reports;
}

namespace {

nlohmann::json pair_json(const PairMetrics& m) {
    return {{"psnr", m.psnr}, {"ssim", m.ssim}};
}

} // namespace

void write_reports_json(const std::filesystem::path& file,
                        const std::vector<MetricsReport>& reports) {
    nlohmann::json out = nlohmann::json::array();
    for (const MetricsReport& r : reports) {
        nlohmann::json j;
        j["material"] = r.material_id;
        for (const auto& [kind, m] : r.per_map) j["maps"][kind_name(kind)] = pair_json(m);
        j["render"]["per_light"] = nlohmann::json::array();
        for (const PairMetrics& m : r.per_light) j["render"]["per_light"].push_back(pair_json(m));
        j["render"]["psnr_mean"] = r.render_psnr_mean;
        j["render"]["ssim_mean"] = r.render_ssim_mean;
        j["render"]["psnr_stddev"] = r.render_psnr_stddev;
        if (r.has_baseline) {
            for (const auto& [kind, m] : r.baseline_per_map) {
                j["baseline"]["maps"][kind_name(kind)] = pair_json(m);
            }
            j["baseline"]["render"]["psnr_mean"] = r.baseline_render_psnr_mean;
            j["baseline"]["render"]["ssim_mean"] = r.baseline_render_ssim_mean;
            j["baseline"]["render"]["psnr_delta"] =
                r.render_psnr_mean - r.baseline_render_psnr_mean;
        }
        out.push_back(std::move(j));
    }
    std::ofstream os(file);
    if (!os) throw runtime_error("cannot write " + file.string());
    os << out.dump(2) << "\n";
}

void write_reports_csv(const std::filesystem::path& file,
                       const std::vector<MetricsReport>& reports) {
    std::ofstream os(file);
    if (!os) throw runtime_error("cannot write " + file.string());
    os << "material,subject,psnr,ssim\n";
    for (const MetricsReport& r : reports) {
        for (const auto& [kind, m] : r.per_map) {
            os << r.material_id << ",map:" << kind_name(kind) << "," << m.psnr << "," << m.ssim
               << "\n";
        }
        for (size_t i = 0; i < r.per_light.size(); ++i) {
            os << r.material_id << ",render:L" << i << "," << r.per_light[i].psnr << ","
               << r.per_light[i].ssim << "\n";
        }
        os << r.material_id << ",render:mean," << r.render_psnr_mean << "," << r.render_ssim_mean
           << "\n";
        if (r.has_baseline) {
            for (const auto& [kind, m] : r.baseline_per_map) {
                os << r.material_id << ",bicubic:" << kind_name(kind) << "," << m.psnr << ","
                   << m.ssim << "\n";
            }
            os << r.material_id << ",bicubic:render_mean," << r.baseline_render_psnr_mean << ","
               << r.baseline_render_ssim_mean << "\n";
        }
    }
}

} // namespace mujica
