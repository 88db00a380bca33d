// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mujica/error.hpp"

namespace mujica {

void TrainConfig::validate() const {
    model.validate();
    if (epochs < 1) throw validation_error("train: epochs must be >= 1");
    if (batch < 1) throw validation_error("train: batch must be >= 1");
    if (patch < model.window || patch % model.window != 0) {
        throw validation_error("train: patch must be a positive multiple of the window size");
    }
    if (lr0 <= 0.0) throw validation_error("train: lr0 must be positive");
    double prev = 0.0;
    for (double f : schedule_fractions) {
        if (f <= prev || f >= 1.0) {
            throw validation_error("train: schedule fractions must be strictly increasing in (0,1)");
        }
        prev = f;
    }
    if (lights_n < 1) throw validation_error("train: lights_n must be >= 1");
    if (warmup_steps < 0) throw validation_error("train: warmup_steps must be >= 0");
}

std::string train_config_to_json(const TrainConfig& cfg) {
    nlohmann::json j = nlohmann::json::parse(model_config_to_json(cfg.model));
    j["epochs"] = cfg.epochs;
    j["batch"] = cfg.batch;
    j["patch"] = cfg.patch;
    j["lr0"] = cfg.lr0;
    j["schedule_fractions"] = cfg.schedule_fractions;
    j["seed"] = cfg.seed;
    j["lights_n"] = cfg.lights_n;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["weight_decay"] = cfg.weight_decay;
    j["charbonnier_eps"] = cfg.charbonnier_eps;
    j["clip_norm"] = cfg.clip_norm;
    j["warmup_steps"] = cfg.warmup_steps;
    j["warmup_lr"] = cfg.warmup_lr;
    j["steps_per_epoch"] = cfg.steps_per_epoch;
    j["checkpoint_every"] = cfg.checkpoint_every;
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text, bool strict_keys) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(std::string("bad train config JSON: ") + e.what());
    }
    static const std::set<std::string> known = {
        "channels",    "embed_dim",      "heads",
        "window",      "cabs",           "growth",
        "ffe_depth",   "backbone_depth", "scale",
        "modalities",  "fused_maps",     "connection",
        "fusion",      "epochs",         "batch",
        "patch",       "lr0",            "schedule_fractions",
        "seed",        "lights_n",       "beta1",
        "beta2",       "weight_decay",   "charbonnier_eps",
        "clip_norm",   "warmup_steps",   "warmup_lr",
        "steps_per_epoch", "checkpoint_every"};
    if (strict_keys) {
        for (const auto& [key, value] : j.items()) {
            if (!known.count(key)) throw validation_error("unknown config key: " + key);
        }
    }
    TrainConfig cfg;
    cfg.model = model_config_from_json(text);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch = j.value("batch", cfg.batch);
    cfg.patch = j.value("patch", cfg.patch);
    cfg.lr0 = j.value("lr0", cfg.lr0);
    if (j.contains("schedule_fractions")) {
        auto v = j["schedule_fractions"].get<std::vector<double>>();
        if (v.size() != 4) throw validation_error("schedule_fractions must have 4 entries");
        std::copy(v.begin(), v.end(), cfg.schedule_fractions.begin());
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.lights_n = j.value("lights_n", cfg.lights_n);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.charbonnier_eps = j.value("charbonnier_eps", cfg.charbonnier_eps);
    cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    cfg.warmup_lr = j.value("warmup_lr", cfg.warmup_lr);
    cfg.steps_per_epoch = j.value("steps_per_epoch", cfg.steps_per_epoch);
    cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
    cfg.validate();
    return cfg;
}

double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
    const double progress =
        total_steps > 0 ? static_cast<double>(step) / static_cast<double>(total_steps) : 0.0;
    int halvings = 0;
    for (double f : cfg.schedule_fractions) {
        if (progress >= f) ++halvings;
    }
    return cfg.lr0 * std::pow(0.5, halvings);
}

OptimizerState make_optimizer_state(const std::vector<ParamRef>& params) {
    OptimizerState state;
    state.momentum.reserve(params.size());
    for (const ParamRef& p : params) state.momentum.emplace_back(p.tensor->shape());
    return state;
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const Tensor& g : grads) {
        for (std::int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor& g : grads) {
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= s;
        }
    }
    return norm;
}

void lion_step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
               OptimizerState& state, double lr, double beta1, double beta2,
               double weight_decay) {
    if (params.size() != grads.size() || params.size() != state.momentum.size()) {
        throw runtime_error("lion_step: parameter/gradient/state size mismatch");
    }
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k].tensor;
        const Tensor& g = grads[k];
        Tensor& m = state.momentum[k];
        if (!same_shape(p, g) || !same_shape(p, m)) {
            throw runtime_error("lion_step: shape mismatch for " + params[k].name);
        }
        for (std::int64_t i = 0; i < p.size(); ++i) {
            const double u = beta1 * m[i] + (1.0 - beta1) * g[i];
            const double sign = u > 0.0 ? 1.0 : (u < 0.0 ? -1.0 : 0.0);
            p[i] -= lr * (sign + weight_decay * p[i]);
            m[i] = beta2 * m[i] + (1.0 - beta2) * g[i];
        }
    }
    ++state.step;
}

namespace {

std::map<MapKind, Var> bind_lr_maps(Graph& g, const MujicaModel& model, const MaterialSet& lr) {
    std::map<MapKind, Var> vars;
    for (MapKind kind : model.cfg.modalities) {
        if (lr.has(kind)) vars[kind] = g.constant(lr.at(kind).pixels);
    }
    return vars;
}

void accumulate_report(LossReport& into, const LossReport& item) {
    into.total += item.total;
    into.rec += item.rec;
    into.mat += item.mat;
    into.rec_pixel += item.rec_pixel;
    into.rec_perc += item.rec_perc;
    into.mat_pixel += item.mat_pixel;
    into.mat_perc += item.mat_perc;
    into.lights = item.lights;
    for (const auto& [kind, v] : item.per_map) into.per_map[kind] += v;
    if (into.per_light.size() < item.per_light.size()) {
        into.per_light.resize(item.per_light.size(), 0.0);
    }
    for (size_t i = 0; i < item.per_light.size(); ++i) into.per_light[i] += item.per_light[i];
}

void scale_report(LossReport& r, double s) {
    r.total *= s;
    r.rec *= s;
    r.mat *= s;
    r.rec_pixel *= s;
    r.rec_perc *= s;
    r.mat_pixel *= s;
    r.mat_perc *= s;
    for (auto& [kind, v] : r.per_map) v *= s;
    for (double& v : r.per_light) v *= s;
}

} // namespace

LossReport train_step(MujicaModel& model, const std::vector<TrainItem>& batch,
                      OptimizerState& state, const TrainConfig& cfg,
                      PerceptualExtractor& extractor, const LightSet& lights, double lr) {
    if (!model.core_frozen) throw validation_error("train_step: core must be frozen");
    if (batch.empty()) throw validation_error("train_step: empty batch");

    Graph g;
    Binder bind(g);
    Var total;
    LossReport merged;
    for (const TrainItem& item : batch) {
        std::map<MapKind, Var> lr_vars = bind_lr_maps(g, model, item.lr);
        std::map<MapKind, Var> sr = mujica_forward(bind, model, lr_vars, true);
        std::map<MapKind, Var> sr_fused;
        for (MapKind kind : model.cfg.fused_maps) sr_fused[kind] = sr.at(kind);
        LossReport item_report;
        Var item_loss = total_loss(bind, sr_fused, item.hr, lights, ShadingParams{}, extractor,
                                   cfg.charbonnier_eps, item_report);
        accumulate_report(merged, item_report);
        total = total.defined() ? add(total, item_loss) : item_loss;
    }
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    Var loss = scale(total, inv_batch);
    scale_report(merged, inv_batch);

    if (!std::isfinite(loss.val()[0])) {
        throw Error(ErrorKind::Runtime,
                    "non-finite loss at optimizer step " + std::to_string(state.step) +
                        "; diagnostic: " + merged.to_json());
    }

    g.backward(loss);
    std::vector<ParamRef> params = trainable_params(model);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (ParamRef& p : params) grads.push_back(bind.grad_of(*p.tensor));
    clip_global_norm(grads, cfg.clip_norm);
    lion_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    return merged;
}

double warmup_step(MujicaModel& model, const std::vector<TrainItem>& batch,
                   OptimizerState& state, const TrainConfig& cfg, double lr) {
    if (model.core_frozen) throw validation_error("warmup_step: core must be unfrozen");
    Graph g;
    Binder bind(g);
    Var total;
    int terms = 0;
    for (const TrainItem& item : batch) {
        for (MapKind kind : model.cfg.modalities) {
            if (!item.lr.has(kind)) continue;
            Var lr_map = g.constant(item.lr.at(kind).pixels);
            Var sr = sisr_forward(bind, model.core, lr_map, model.cfg, true);
            Var gt = g.constant(item.hr.at(kind).pixels);
            Var term = charbonnier(sr, gt, cfg.charbonnier_eps);
            total = total.defined() ? add(total, term) : term;
            ++terms;
        }
    }
    Var loss = scale(total, 1.0 / std::max(1, terms));
    if (!std::isfinite(loss.val()[0])) {
        throw Error(ErrorKind::Runtime, "non-finite warm-up loss");
    }
    g.backward(loss);
    std::vector<ParamRef> params = trainable_params(model);
    std::vector<Tensor> grads;
    for (ParamRef& p : params) grads.push_back(bind.grad_of(*p.tensor));
    clip_global_norm(grads, cfg.clip_norm);
    lion_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    return loss.val()[0];
}

void freeze_core(MujicaModel& model) {
    model.core_frozen = true;
    std::vector<ParamRef> refs;
    collect_core(model.core, false, refs);
    for (ParamRef& p : refs) quantize_f32(*p.tensor);
}

namespace {

struct LoadedMaterial {
    std::string id;
    MaterialSet hr;
    MaterialSet lr;
};

std::vector<LoadedMaterial> load_pairs(const DatasetIndex& dataset, const TrainConfig& cfg) {
    std::vector<MapKind> required = cfg.model.fused_maps;
    for (MapKind kind : {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness}) {
        if (std::find(required.begin(), required.end(), kind) == required.end()) {
            required.push_back(kind);
        }
    }
    std::vector<LoadedMaterial> out;
    for (const DatasetEntry& entry : dataset.entries) {
        LoadedMaterial lm;
        lm.id = entry.id;
        lm.hr = load_material_set(entry.dir, required);
        const auto lr_dir = entry.dir / ("lr_x" + std::to_string(cfg.model.scale));
        if (std::filesystem::is_directory(lr_dir)) {
            lm.lr = load_material_set(lr_dir, required);
            auto [lh, lw] = lm.lr.resolution();
            auto [hh, hw] = lm.hr.resolution();
            if (hh != lh * cfg.model.scale || hw != lw * cfg.model.scale) {
                throw validation_error("prepared LR resolution mismatch for " + entry.id);
            }
        } else {
            lm.lr = bicubic_resample_set(lm.hr, 1.0 / cfg.model.scale);
        }
        out.push_back(std::move(lm));
    }
    return out;
}

std::vector<TrainItem> sample_batch(const std::vector<LoadedMaterial>& materials,
                                    const TrainConfig& cfg, Rng& rng) {
    std::vector<TrainItem> batch;
    for (int i = 0; i < cfg.batch; ++i) {
        const auto& lm = materials[static_cast<size_t>(rng.index(
            static_cast<std::int64_t>(materials.size())))];
        auto [hr_crop, lr_crop] =
            random_crop_pair(lm.hr, lm.lr, cfg.patch, cfg.model.scale, rng);
        batch.push_back({std::move(lr_crop), std::move(hr_crop)});
    }
    return batch;
}

} // namespace

TrainResult run_training(const DatasetIndex& dataset, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const std::optional<std::filesystem::path>& resume,
                         const StepCallback& on_step) {
    cfg.validate();
    if (dataset.entries.empty()) throw validation_error("run_training: empty dataset");
    std::filesystem::create_directories(out_dir);

    std::vector<LoadedMaterial> materials = load_pairs(dataset, cfg);
    const LightSet lights = fibonacci_hemisphere(cfg.lights_n);
    PerceptualExtractor extractor = PerceptualExtractor::built_in();

    Rng rng(cfg.seed);
    MujicaModel model = build_model(cfg.model, rng);

    const int steps_per_epoch =
        cfg.steps_per_epoch > 0
            ? cfg.steps_per_epoch
            : static_cast<int>((materials.size() + cfg.batch - 1) / cfg.batch);
    const std::int64_t total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;

    OptimizerState opt;
    std::int64_t start_step = 0;

    if (resume) {
        Checkpoint ckpt = load_checkpoint(*resume);
        if (!ckpt.has_trainer) {
            throw validation_error("checkpoint has no trainer state; cannot resume");
        }
        model = model_from_checkpoint(ckpt);
        std::vector<ParamRef> trainable = trainable_params(model);
        opt = make_optimizer_state(trainable);
        for (size_t i = 0; i < trainable.size(); ++i) {
            auto it = ckpt.tensors.find("opt.m." + trainable[i].name);
            if (it == ckpt.tensors.end()) {
                throw validation_error("checkpoint missing momentum for " + trainable[i].name);
            }
            opt.momentum[i] = it->second;
        }
        opt.step = ckpt.trainer.step;
        start_step = ckpt.trainer.step;
        rng.restore(ckpt.trainer.rng_state);
    } else if (cfg.warmup_steps > 0) {
        model.core_frozen = false;
        OptimizerState warm_opt = make_optimizer_state(trainable_params(model));
        for (int w = 0; w < cfg.warmup_steps; ++w) {
            std::vector<TrainItem> batch = sample_batch(materials, cfg, rng);
            warmup_step(model, batch, warm_opt, cfg, cfg.warmup_lr);
        }
        freeze_core(model);
        reinit_ffe_from_backbone(model);
        opt = make_optimizer_state(trainable_params(model));
    } else {
        freeze_core(model);
        opt = make_optimizer_state(trainable_params(model));
    }
    if (!resume) opt.step = 0;

    std::ofstream log(out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
    TrainResult result;
    const auto ckpt_path = out_dir / "checkpoint.mjc";

    auto write_ckpt = [&](const std::filesystem::path& path) {
        TrainerState ts;
        ts.step = opt.step;
        ts.rng_state = rng.state();
        ts.momentum = opt.momentum;
        save_checkpoint(path, model, &ts);
        // keep live momentum equal to what was serialized
        opt.momentum = std::move(ts.momentum);
    };

    try {
        for (std::int64_t step = start_step; step < total_steps; ++step) {
            const double lr = lr_at(step, total_steps, cfg);
            std::vector<TrainItem> batch = sample_batch(materials, cfg, rng);
            LossReport report = train_step(model, batch, opt, cfg, extractor, lights, lr);
            nlohmann::json line = nlohmann::json::parse(report.to_json());
            line["step"] = step;
            line["lr"] = lr;
            log << line.dump() << "\n";
            result.reports.push_back(report);
            if (on_step) on_step(step, lr, report);
            if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
                step + 1 < total_steps) {
                write_ckpt(ckpt_path);
            }
        }
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Runtime) {
            std::ofstream snap(out_dir / "diagnostic_snapshot.json");
            snap << nlohmann::json{{"error", e.what()}, {"step", opt.step}}.dump(2) << "\n";
        }
        throw;
    }

    write_ckpt(ckpt_path);
    result.checkpoint = ckpt_path;
    return result;
}

} // namespace mujica
