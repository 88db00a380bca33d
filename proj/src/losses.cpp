// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/losses.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "mujica/checkpoint.hpp"
#include "mujica/error.hpp"

namespace mujica {

PerceptualExtractor PerceptualExtractor::built_in() {
    Rng rng(0x5EED0BEEULL);
    PerceptualExtractor ex;
    const int widths[] = {3, 8, 16, 24, 32};
    for (int i = 0; i < 4; ++i) {
        ex.convs.push_back(make_conv(rng, 3, 3, widths[i], widths[i + 1]));
    }
    ex.lambdas = {1.0, 0.5, 0.25, 0.125};
    ex.strides = {2, 2, 2, 2};
    return ex;
}

PerceptualExtractor PerceptualExtractor::load(const std::filesystem::path& file) {
    Archive archive = read_archive(file);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(archive.header_json);
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("bad extractor header: " + std::string(e.what()));
    }
    if (header.value("kind", "") != "extractor") {
        throw validation_error(file.string() + " is not an extractor archive");
    }
    PerceptualExtractor ex;
    ex.lambdas = header.at("lambdas").get<std::vector<double>>();
    if (header.contains("strides")) {
        ex.strides = header.at("strides").get<std::vector<int>>();
    } else {
        ex.strides.assign(ex.lambdas.size(), 2);
    }
    std::map<std::string, Tensor> by_name;
    for (auto& [name, tensor] : archive.tensors) by_name.emplace(name, std::move(tensor));
    for (size_t i = 0; i < ex.lambdas.size(); ++i) {
        const std::string prefix = "conv" + std::to_string(i);
        auto wit = by_name.find(prefix + ".w");
        auto bit = by_name.find(prefix + ".b");
        if (wit == by_name.end() || bit == by_name.end()) {
            throw validation_error("extractor archive missing " + prefix);
        }
        ex.convs.push_back({wit->second, bit->second});
    }
    return ex;
}

void PerceptualExtractor::save(const std::filesystem::path& file) {
    nlohmann::json header;
    header["kind"] = "extractor";
    header["lambdas"] = lambdas;
    header["strides"] = strides;
    Archive archive;
    archive.header_json = header.dump();
    for (size_t i = 0; i < convs.size(); ++i) {
        quantize_f32(convs[i].w);
        quantize_f32(convs[i].b);
        archive.tensors.emplace_back("conv" + std::to_string(i) + ".w", convs[i].w);
        archive.tensors.emplace_back("conv" + std::to_string(i) + ".b", convs[i].b);
    }
    write_archive(file, archive);
}

std::vector<Var> PerceptualExtractor::features(Binder& bind, Var image) {
    std::vector<Var> out;
    Var x = image;
    for (size_t i = 0; i < convs.size(); ++i) {
        const int stride = i < strides.size() ? strides[i] : 2;
        x = leaky_relu(conv2d(x, bind(convs[i].w, false), bind(convs[i].b, false), stride, 1),
                       0.2);
        out.push_back(x);
    }
    return out;
}

std::string LossReport::to_json() const {
    nlohmann::json j;
    j["total"] = total;
    j["rec"] = rec;
    j["mat"] = mat;
    j["rec_pixel"] = rec_pixel;
    j["rec_perc"] = rec_perc;
    j["mat_pixel"] = mat_pixel;
    j["mat_perc"] = mat_perc;
    j["lights"] = lights;
    for (const auto& [kind, value] : per_map) j["per_map"][kind_name(kind)] = value;
    j["per_light"] = per_light;
    return j.dump();
}

Var charbonnier(Var pred, Var gt, double eps) {
    if (pred.shape() != gt.shape()) throw validation_error("charbonnier: shape mismatch");
    return mean(sqrt(add_scalar(square(sub(pred, gt)), eps * eps)));
}

Var perceptual_loss(Binder& bind, Var pred, Var gt, PerceptualExtractor& extractor, double eps) {
    if (extractor.convs.size() != extractor.lambdas.size()) {
        throw validation_error("perceptual extractor: lambda count mismatch");
    }
    std::vector<Var> fp = extractor.features(bind, pred);
    std::vector<Var> fg = extractor.features(bind, gt);
    Var acc;
    for (size_t i = 0; i < fp.size(); ++i) {
        Var term = scale(charbonnier(fg[i], fp[i], eps), extractor.lambdas[i]);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

namespace {

RenderInputs compose_render_inputs(Binder& bind, const std::map<MapKind, Var>& sr_maps,
                                   const MaterialSet& gt) {
    auto pick = [&](MapKind kind) -> Var {
        auto it = sr_maps.find(kind);
        if (it != sr_maps.end()) return it->second;
        return bind.constant(gt.at(kind).pixels);
    };
    RenderInputs in;
    in.basecolor = pick(MapKind::Basecolor);
    in.normal = pick(MapKind::Normal);
    in.roughness = pick(MapKind::Roughness);
    if (sr_maps.count(MapKind::Metallic) || gt.has(MapKind::Metallic)) {
        in.metallic = pick(MapKind::Metallic);
    }
    return in;
}

} // namespace

Var reconstruction_loss(Binder& bind, const std::map<MapKind, Var>& sr_maps,
                        const MaterialSet& gt, const LightSet& lights,
                        const ShadingParams& shading, PerceptualExtractor& extractor, double eps,
                        LossReport* report) {
    if (lights.lights.empty()) throw validation_error("reconstruction_loss: empty light set");
    Graph& g = bind.graph();
    RenderInputs inputs = compose_render_inputs(bind, sr_maps, gt);

    Var pixel_total, perc_total;
    for (const Light& light : lights.lights) {
        Var sr_render = render_point_light_ad(g, inputs, light, shading);
        Var gt_render = g.constant(render_point_light(gt, light, shading));
        Var pix = charbonnier(sr_render, gt_render, eps);
        Var perc = perceptual_loss(bind, sr_render, gt_render, extractor, eps);
        pixel_total = pixel_total.defined() ? add(pixel_total, pix) : pix;
        perc_total = perc_total.defined() ? add(perc_total, perc) : perc;
        if (report) report->per_light.push_back(pix.val()[0] + perc.val()[0]);
    }
    Var total = add(pixel_total, perc_total);
    if (report) {
        report->lights = static_cast<int>(lights.lights.size());
        report->rec_pixel = pixel_total.val()[0];
        report->rec_perc = perc_total.val()[0];
        report->rec = total.val()[0];
    }
    return total;
}

Var material_loss(Binder& bind, const std::map<MapKind, Var>& sr_maps, const MaterialSet& gt,
                  PerceptualExtractor& extractor, double eps, LossReport* report) {
    if (sr_maps.empty()) throw validation_error("material_loss: no SR maps");
    Var pixel_total, perc_total;
    for (const auto& [kind, sr] : sr_maps) {
        if (!gt.has(kind)) {
            throw validation_error(std::string("material_loss: GT missing ") + kind_name(kind));
        }
        Var gt_map = bind.constant(gt.at(kind).pixels);
        Var pix = charbonnier(sr, gt_map, eps);
        Var perc = perceptual_loss(bind, sr, gt_map, extractor, eps);
        pixel_total = pixel_total.defined() ? add(pixel_total, pix) : pix;
        perc_total = perc_total.defined() ? add(perc_total, perc) : perc;
        if (report) report->per_map[kind] = pix.val()[0] + perc.val()[0];
    }
    Var total = add(pixel_total, perc_total);
    if (report) {
        report->mat_pixel = pixel_total.val()[0];
        report->mat_perc = perc_total.val()[0];
        report->mat = total.val()[0];
    }
    return total;
}

Var total_loss(Binder& bind, const std::map<MapKind, Var>& sr_maps, const MaterialSet& gt,
               const LightSet& lights, const ShadingParams& shading,
               PerceptualExtractor& extractor, double eps, LossReport& report) {
    Var rec = reconstruction_loss(bind, sr_maps, gt, lights, shading, extractor, eps, &report);
    Var mat = material_loss(bind, sr_maps, gt, extractor, eps, &report);
    Var total = add(rec, mat);
    report.total = total.val()[0];
    return total;
}

} // namespace mujica
