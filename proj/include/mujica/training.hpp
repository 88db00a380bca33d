// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>

#include "mujica/checkpoint.hpp"
#include "mujica/losses.hpp"

namespace mujica {

struct TrainConfig {
    int epochs = 1;
    int batch = 2;
    int patch = 64; // LR pixels
    double lr0 = 1e-4;
    std::array<double, 4> schedule_fractions{0.35, 0.6, 0.75, 0.9};
    std::uint64_t seed = 0;
    int lights_n = 6;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.0;
    double charbonnier_eps = 1e-3;
    double clip_norm = 1.0;
    int warmup_steps = 150;      // SISR pre-fit before the core freezes
    double warmup_lr = 4e-4;
    int steps_per_epoch = 0;     // 0: ceil(materials / batch)
    int checkpoint_every = 0;    // extra periodic checkpoints; 0 = final only
    ModelConfig model;

    void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text, bool strict_keys = true);

/// Piecewise-constant schedule: lr0 halved at each fraction of total steps.
double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

struct OptimizerState {
    std::vector<Tensor> momentum; // aligned with the parameter list it was built for
    std::int64_t step = 0;
};

OptimizerState make_optimizer_state(const std::vector<ParamRef>& params);

/// Global-norm gradient clip; returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

/// Lion update: u = sign(b1*m + (1-b1)*g); p -= lr*(u + wd*p); m = b2*m + (1-b2)*g.
void lion_step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
               OptimizerState& state, double lr, double beta1, double beta2,
               double weight_decay);

struct TrainItem {
    MaterialSet lr;
    MaterialSet hr;
};

/// One optimization step on the adapter. Requires a frozen core. Throws a
/// runtime error carrying a diagnostic report when the loss is non-finite.
LossReport train_step(MujicaModel& model, const std::vector<TrainItem>& batch,
                      OptimizerState& state, const TrainConfig& cfg,
                      PerceptualExtractor& extractor, const LightSet& lights, double lr);

/// One SISR warm-up step on the unfrozen core (charbonnier per map).
double warmup_step(MujicaModel& model, const std::vector<TrainItem>& batch,
                   OptimizerState& state, const TrainConfig& cfg, double lr);

/// Freezes the core and rounds it to serialized precision.
void freeze_core(MujicaModel& model);

struct TrainResult {
    std::filesystem::path checkpoint;
    std::vector<LossReport> reports;
};

using StepCallback = std::function<void(std::int64_t step, double lr, const LossReport&)>;

/// Full run: loads materials, generates LR pairs, warm-up, freeze, adapter
/// training with the halving schedule, JSONL log + checkpoints under
/// `out_dir`. `resume` continues from a trainer checkpoint.
TrainResult run_training(const DatasetIndex& dataset, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const std::optional<std::filesystem::path>& resume = std::nullopt,
                         const StepCallback& on_step = nullptr);

} // namespace mujica
