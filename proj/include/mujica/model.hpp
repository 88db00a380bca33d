// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "mujica/graph.hpp"
#include "mujica/material.hpp"
#include "mujica/ops.hpp"

namespace mujica {

enum class Connection { NRC, RC, DC };
enum class Fusion { ConcatConv, WMCA };

const char* connection_name(Connection c);
const char* fusion_name(Fusion f);
Connection parse_connection(const std::string& name);
Fusion parse_fusion(const std::string& name);

struct ModelConfig {
    int channels = 32;  // feature channels C
    int embed_dim = 48; // attention embedding d
    int heads = 6;
    int window = 8;     // W-MCA window S
    int cabs = 4;       // fusion depth L
    int growth = 16;    // transition output channels g
    int ffe_depth = 3;
    int backbone_depth = 2;
    int scale = 2;
    std::vector<MapKind> modalities = {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness,
                                       MapKind::Metallic};
    std::vector<MapKind> fused_maps = {MapKind::Basecolor, MapKind::Normal};
    Connection connection = Connection::DC;
    Fusion fusion = Fusion::WMCA;

    void validate() const;
    int head_dim() const { return embed_dim / heads; }
    bool is_fused(MapKind kind) const;
    int fused_index(MapKind kind) const; // -1 when not fused
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

/// Named reference to one parameter tensor.
struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
    bool trainable = true;
};

struct ConvParams {
    Tensor w; // (kh,kw,cin,cout)
    Tensor b; // (cout)
};

struct NormParams {
    Tensor gamma;
    Tensor beta;
};

struct MlpParams {
    Tensor w1, b1; // C -> hidden
    Tensor w2, b2; // hidden -> C
};

/// Single-stream window attention parameters (backbone / FFE blocks).
struct AttnParams {
    Tensor pq, pk, pv; // (C,d)
    Tensor bias;       // (heads, (2S-1)^2)
    Tensor ow;         // (d,C)
};

/// Residual window-attention block: LN -> W-MSA -> residual -> LN -> MLP ->
/// residual. Zeroing `attn.ow` and `mlp.w2` makes it the identity.
struct BlockParams {
    NormParams ln1;
    AttnParams attn;
    NormParams ln2;
    MlpParams mlp;
};

/// The shape-preserving SISR surrogate: shared shallow conv, backbone blocks
/// and the pixel-shuffle reconstruction head. Frozen after the warm-up fit.
struct CoreParams {
    ConvParams shallow;              // 3 -> C, 3x3
    std::vector<BlockParams> blocks; // backbone_depth
    std::vector<ConvParams> up;      // per x2 stage: C -> 4C, 3x3
    ConvParams to_rgb;               // C -> 3, 3x3
};

CoreParams build_core(const ModelConfig& cfg, Rng& rng);
void collect_core(CoreParams& core, bool trainable, std::vector<ParamRef>& out);

ConvParams make_conv(Rng& rng, int kh, int kw, int cin, int cout);
NormParams make_norm(int c);
MlpParams make_mlp(Rng& rng, int c, int hidden);
AttnParams make_attn(Rng& rng, int c, int d, int heads, int window);
BlockParams make_block(Rng& rng, int c, int d, int heads, int window);

void collect_conv(ConvParams& p, const std::string& prefix, bool trainable,
                  std::vector<ParamRef>& out);
void collect_norm(NormParams& p, const std::string& prefix, bool trainable,
                  std::vector<ParamRef>& out);
void collect_mlp(MlpParams& p, const std::string& prefix, bool trainable,
                 std::vector<ParamRef>& out);
void collect_attn(AttnParams& p, const std::string& prefix, bool trainable,
                  std::vector<ParamRef>& out);
void collect_block(BlockParams& p, const std::string& prefix, bool trainable,
                   std::vector<ParamRef>& out);

/// Window-relative-position index, cached per window size.
std::shared_ptr<const std::vector<int>> cached_position_index(int window);

/// tokens (N,T,C) x weight (C,D), no bias.
Var project_tokens(Binder& bind, Var tokens, Tensor& weight, bool train);

// ---- forwards --------------------------------------------------------------

Var shallow_extract(Binder& bind, ConvParams& shallow, Var image, bool train);

Var block_forward(Binder& bind, BlockParams& block, Var x, int window, int heads, bool train,
                  AttentionProbe* probe = nullptr);

Var backbone_forward(Binder& bind, CoreParams& core, Var f0, const ModelConfig& cfg, bool train);

/// Pixel-shuffle upsampling head; output is unclamped.
Var reconstruct_hq(Binder& bind, CoreParams& core, Var features, const ModelConfig& cfg,
                   bool train);

/// Full frozen path: reconstruct(backbone(F0) + F0).
Var sisr_forward(Binder& bind, CoreParams& core, Var image, const ModelConfig& cfg, bool train);

} // namespace mujica
