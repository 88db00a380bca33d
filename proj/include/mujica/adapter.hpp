// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>

#include "mujica/model.hpp"

namespace mujica {

/// Window-based multi-head cross-map attention parameters for one target
/// modality. Queries exist per fused modality (with matching relative
/// position bias tables); keys and values come from the target modality only.
struct WmcaParams {
    std::vector<Tensor> pq;   // per fused modality, (C,d)
    Tensor pk, pv;            // (C,d)
    std::vector<Tensor> bias; // per fused modality, (heads,(2S-1)^2)
    Tensor ow;                // (d,C)
};

/// One Cross-Map Attention Block. Under dense connections the l-th block's
/// input projection consumes C + (l-1)*g channels. When the fusion mode is
/// ConcatConv the attention is replaced by a 1x1 conv over the concatenated
/// modality streams.
struct CabParams {
    ConvParams in_proj;
    NormParams ln_attn;
    WmcaParams wmca;
    ConvParams fuse; // ConcatConv mode only
    NormParams ln_mlp;
    MlpParams mlp;
};

/// Trainable adapter state for one fused modality.
struct FusionParams {
    std::vector<CabParams> cabs;
    std::vector<ConvParams> transitions; // L-1 of (1x1: C -> g) + LeakyReLU(0.2)
    Tensor alpha;                        // scalar residual gate, starts at 0
    std::vector<BlockParams> ffe;
};

struct MujicaModel {
    ModelConfig cfg;
    CoreParams core;
    bool core_frozen = true;
    std::map<MapKind, FusionParams> adapter; // one entry per fused map
};

MujicaModel build_model(const ModelConfig& cfg, Rng& rng);

/// Copies the surrogate backbone blocks into every FFE stack (cyclically when
/// depths differ) and zeroes their output projections so each block starts as
/// the identity.
void reinit_ffe_from_backbone(MujicaModel& model);

std::vector<ParamRef> collect_params(MujicaModel& model);
std::vector<ParamRef> trainable_params(MujicaModel& model);

/// Attention over one target modality's windows: queries from every fused
/// modality, keys/values from `target_index`. `windows` holds one
/// (N,S^2,C) stream per fused modality, in fused_maps order.
Var wmca_forward(Binder& bind, WmcaParams& params, const std::vector<Var>& windows,
                 int target_index, const ModelConfig& cfg, bool train,
                 AttentionProbe* probe = nullptr);

/// One CAB: 1x1 input projection, pre-norm cross attention (or concat-conv
/// fusion), then a pre-norm MLP, both with residuals. `streams` carries the
/// per-modality cross inputs; the slot at `target_index` is ignored and
/// replaced by the block's own projected stream.
Var cab_forward(Binder& bind, CabParams& params, Var dense_input,
                const std::vector<Var>& streams, int target_index, const ModelConfig& cfg,
                bool train, AttentionProbe* probe = nullptr);

/// 1x1 conv + LeakyReLU(0.2) transition compressing a block output to g
/// channels.
Var transition(Binder& bind, ConvParams& params, Var x, bool train);

/// The full cross-map fusion recurrence over all fused modalities in
/// lockstep, then the alpha-gated residual (per connection mode).
std::map<MapKind, Var> fusion_forward(Binder& bind, MujicaModel& model,
                                      const std::map<MapKind, Var>& deep,
                                      const std::map<MapKind, Var>& shallow, bool train,
                                      std::map<MapKind, AttentionProbe>* probes = nullptr);

Var ffe_forward(Binder& bind, FusionParams& params, Var fused, const ModelConfig& cfg,
                bool train);

/// End-to-end adapter forward. Fused maps flow through fusion + FFE; other
/// maps take the frozen SISR path. Outputs are unclamped SR images.
std::map<MapKind, Var> mujica_forward(Binder& bind, MujicaModel& model,
                                      const std::map<MapKind, Var>& lr_maps, bool train);

/// Inference helper: reflect-pads to a window multiple, forwards, crops, and
/// clamps to [0,1].
MaterialSet upscale_material(MujicaModel& model, const MaterialSet& lr);

/// Tiled inference with overlap and center-crop blending for large inputs.
MaterialSet upscale_material_tiled(MujicaModel& model, const MaterialSet& lr, int tile,
                                   int overlap);

} // namespace mujica
