// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mujica/adapter.hpp"

namespace mujica {

/// MUJICA1 archive: magic, JSON header, then named tensors as
/// (name, rank, dims..., little-endian float32 payload).
struct Archive {
    std::string header_json;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

void write_archive(const std::filesystem::path& file, const Archive& archive);
Archive read_archive(const std::filesystem::path& file);

/// Rounds every value through float32. Serialization stores float32, so the
/// trainer applies this when freezing/saving to keep memory and file equal —
/// that is what makes resume bit-exact.
void quantize_f32(Tensor& t);

struct TrainerState {
    std::int64_t step = 0;
    std::string rng_state;
    std::vector<Tensor> momentum; // aligned with trainable_params order
};

/// Writes model (+ optional trainer state) to a MUJICA1 checkpoint. State is
/// quantized to float32 in place first.
void save_checkpoint(const std::filesystem::path& file, MujicaModel& model,
                     TrainerState* trainer = nullptr);

struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;
    bool has_trainer = false;
    TrainerState trainer;
};

Checkpoint load_checkpoint(const std::filesystem::path& file);

/// Rebuilds a model from a checkpoint; every model parameter must be present.
MujicaModel model_from_checkpoint(const Checkpoint& ckpt);

} // namespace mujica
