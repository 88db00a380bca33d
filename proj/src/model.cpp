// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include <json.hpp>

#include "mujica/error.hpp"

namespace mujica {

const char* connection_name(Connection c) {
    switch (c) {
    case Connection::NRC: return "nrc";
    case Connection::RC: return "rc";
    case Connection::DC: return "dc";
    }
    return "dc";
}

const char* fusion_name(Fusion f) {
    return f == Fusion::ConcatConv ? "concat_conv" : "wmca";
}

Connection parse_connection(const std::string& name) {
    if (name == "nrc") return Connection::NRC;
    if (name == "rc") return Connection::RC;
    if (name == "dc") return Connection::DC;
    throw validation_error("unknown connection mode: " + name);
}

Fusion parse_fusion(const std::string& name) {
    if (name == "concat_conv") return Fusion::ConcatConv;
    if (name == "wmca") return Fusion::WMCA;
    throw validation_error("unknown fusion mode: " + name);
}

void ModelConfig::validate() const {
    if (channels < 1) throw validation_error("config: channels must be >= 1");
    if (embed_dim < 1 || embed_dim % heads != 0) {
        throw validation_error("config: embed_dim must be divisible by heads");
    }
    if (window < 2) throw validation_error("config: window must be >= 2");
    if (cabs < 1) throw validation_error("config: cabs must be >= 1");
    if (growth < 1) throw validation_error("config: growth must be >= 1");
    if (ffe_depth < 0) throw validation_error("config: ffe_depth must be >= 0");
    if (backbone_depth < 1) throw validation_error("config: backbone_depth must be >= 1");
    if (scale != 2 && scale != 4) throw validation_error("config: scale must be 2 or 4");
    if (modalities.empty()) throw validation_error("config: modalities must be non-empty");
    if (fused_maps.empty()) throw validation_error("config: fused_maps must be non-empty");
    std::set<MapKind> mods(modalities.begin(), modalities.end());
    if (mods.size() != modalities.size()) throw validation_error("config: duplicate modalities");
    for (MapKind k : fused_maps) {
        if (!mods.count(k)) {
            throw validation_error(std::string("config: fused map ") + kind_name(k) +
                                   " missing from modalities");
        }
    }
}

bool ModelConfig::is_fused(MapKind kind) const { return fused_index(kind) >= 0; }

int ModelConfig::fused_index(MapKind kind) const {
    for (size_t i = 0; i < fused_maps.size(); ++i) {
        if (fused_maps[i] == kind) return static_cast<int>(i);
    }
    return -1;
}

namespace {

nlohmann::json kinds_to_json(const std::vector<MapKind>& kinds) {
    nlohmann::json j = nlohmann::json::array();
    for (MapKind k : kinds) j.push_back(kind_name(k));
    return j;
}

std::vector<MapKind> kinds_from_json(const nlohmann::json& j) {
    std::vector<MapKind> out;
    for (const auto& item : j) {
        auto kind = parse_kind(item.get<std::string>());
        if (!kind) throw validation_error("unknown map kind: " + item.get<std::string>());
        out.push_back(*kind);
    }
    return out;
}

} // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["channels"] = cfg.channels;
    j["embed_dim"] = cfg.embed_dim;
    j["heads"] = cfg.heads;
    j["window"] = cfg.window;
    j["cabs"] = cfg.cabs;
    j["growth"] = cfg.growth;
    j["ffe_depth"] = cfg.ffe_depth;
    j["backbone_depth"] = cfg.backbone_depth;
    j["scale"] = cfg.scale;
    j["modalities"] = kinds_to_json(cfg.modalities);
    j["fused_maps"] = kinds_to_json(cfg.fused_maps);
    j["connection"] = connection_name(cfg.connection);
    j["fusion"] = fusion_name(cfg.fusion);
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(std::string("bad model config JSON: ") + e.what());
    }
    ModelConfig cfg;
    cfg.channels = j.value("channels", cfg.channels);
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.window = j.value("window", cfg.window);
    cfg.cabs = j.value("cabs", cfg.cabs);
    cfg.growth = j.value("growth", cfg.growth);
    cfg.ffe_depth = j.value("ffe_depth", cfg.ffe_depth);
    cfg.backbone_depth = j.value("backbone_depth", cfg.backbone_depth);
    cfg.scale = j.value("scale", cfg.scale);
    if (j.contains("modalities")) cfg.modalities = kinds_from_json(j["modalities"]);
    if (j.contains("fused_maps")) cfg.fused_maps = kinds_from_json(j["fused_maps"]);
    if (j.contains("connection")) cfg.connection = parse_connection(j["connection"]);
    if (j.contains("fusion")) cfg.fusion = parse_fusion(j["fusion"]);
    cfg.validate();
    return cfg;
}

// ---- construction ----------------------------------------------------------

namespace {

Tensor conv_weight(Rng& rng, int kh, int kw, int cin, int cout) {
    const double stddev = std::sqrt(2.0 / (kh * kw * cin));
    return rng.normal_tensor({kh, kw, cin, cout}, stddev);
}

} // namespace

ConvParams make_conv(Rng& rng, int kh, int kw, int cin, int cout) {
    return {conv_weight(rng, kh, kw, cin, cout), Tensor({cout})};
}

NormParams make_norm(int c) { return {Tensor::full({c}, 1.0), Tensor({c})}; }

MlpParams make_mlp(Rng& rng, int c, int hidden) {
    return {rng.normal_tensor({c, hidden}, std::sqrt(2.0 / c)), Tensor({hidden}),
            rng.normal_tensor({hidden, c}, std::sqrt(2.0 / hidden)), Tensor({c})};
}

AttnParams make_attn(Rng& rng, int c, int d, int heads, int window) {
    AttnParams a;
    const double proj_std = std::sqrt(1.0 / c);
    a.pq = rng.normal_tensor({c, d}, proj_std);
    a.pk = rng.normal_tensor({c, d}, proj_std);
    a.pv = rng.normal_tensor({c, d}, proj_std);
    a.bias = Tensor({heads, (2 * window - 1) * (2 * window - 1)});
    a.ow = rng.normal_tensor({d, c}, std::sqrt(1.0 / d));
    return a;
}

BlockParams make_block(Rng& rng, int c, int d, int heads, int window) {
    BlockParams blk;
    blk.ln1 = make_norm(c);
    blk.attn = make_attn(rng, c, d, heads, window);
    blk.ln2 = make_norm(c);
    blk.mlp = make_mlp(rng, c, 2 * c);
    // residual identity at init: attention and MLP outputs start at zero
    blk.attn.ow.zero();
    blk.mlp.w2.zero();
    return blk;
}

CoreParams build_core(const ModelConfig& cfg, Rng& rng) {
    const int c = cfg.channels;
    CoreParams core;
    core.shallow = make_conv(rng, 3, 3, 3, c);
    // seed the first three channels with an identity tap so the head starts
    // near a nearest-neighbour upsampler before the warm-up fit
    for (int ch = 0; ch < std::min(3, c); ++ch) {
        core.shallow.w.data()[((1 * 3 + 1) * 3 + ch) * c + ch] += 1.0;
    }
    for (int i = 0; i < cfg.backbone_depth; ++i) {
        core.blocks.push_back(make_block(rng, c, cfg.embed_dim, cfg.heads, cfg.window));
    }
    const int stages = cfg.scale == 2 ? 1 : 2;
    for (int s = 0; s < stages; ++s) {
        ConvParams up = make_conv(rng, 3, 3, c, 4 * c);
        for (int ch = 0; ch < c; ++ch) {
            for (int k = 0; k < 4; ++k) {
                up.w.data()[((1 * 3 + 1) * c + ch) * (4 * c) + (ch * 4 + k)] += 1.0;
            }
        }
        core.up.push_back(std::move(up));
    }
    core.to_rgb = make_conv(rng, 3, 3, c, 3);
    for (int ch = 0; ch < std::min(3, c); ++ch) {
        core.to_rgb.w.data()[((1 * 3 + 1) * c + ch) * 3 + ch] += 1.0;
    }
    return core;
}

// ---- parameter collection ---------------------------------------------------

void collect_conv(ConvParams& p, const std::string& prefix, bool trainable,
                  std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w", &p.w, trainable});
    out.push_back({prefix + ".b", &p.b, trainable});
}

void collect_norm(NormParams& p, const std::string& prefix, bool trainable,
                  std::vector<ParamRef>& out) {
    out.push_back({prefix + ".gamma", &p.gamma, trainable});
    out.push_back({prefix + ".beta", &p.beta, trainable});
}

void collect_mlp(MlpParams& p, const std::string& prefix, bool trainable,
                 std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w1", &p.w1, trainable});
    out.push_back({prefix + ".b1", &p.b1, trainable});
    out.push_back({prefix + ".w2", &p.w2, trainable});
    out.push_back({prefix + ".b2", &p.b2, trainable});
}

void collect_attn(AttnParams& p, const std::string& prefix, bool trainable,
                  std::vector<ParamRef>& out) {
    out.push_back({prefix + ".pq", &p.pq, trainable});
    out.push_back({prefix + ".pk", &p.pk, trainable});
    out.push_back({prefix + ".pv", &p.pv, trainable});
    out.push_back({prefix + ".bias", &p.bias, trainable});
    out.push_back({prefix + ".ow", &p.ow, trainable});
}

void collect_block(BlockParams& p, const std::string& prefix, bool trainable,
                   std::vector<ParamRef>& out) {
    collect_norm(p.ln1, prefix + ".ln1", trainable, out);
    collect_attn(p.attn, prefix + ".attn", trainable, out);
    collect_norm(p.ln2, prefix + ".ln2", trainable, out);
    collect_mlp(p.mlp, prefix + ".mlp", trainable, out);
}

void collect_core(CoreParams& core, bool trainable, std::vector<ParamRef>& out) {
    collect_conv(core.shallow, "core.shallow", trainable, out);
    for (size_t i = 0; i < core.blocks.size(); ++i) {
        collect_block(core.blocks[i], "core.block" + std::to_string(i), trainable, out);
    }
    for (size_t i = 0; i < core.up.size(); ++i) {
        collect_conv(core.up[i], "core.up" + std::to_string(i), trainable, out);
    }
    collect_conv(core.to_rgb, "core.to_rgb", trainable, out);
}

// ---- forwards ----------------------------------------------------------------

std::shared_ptr<const std::vector<int>> cached_position_index(int window) {
    static std::mutex mu;
    static std::map<int, std::shared_ptr<const std::vector<int>>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[window];
    if (!slot) slot = std::make_shared<const std::vector<int>>(relative_position_index(window));
    return slot;
}

Var project_tokens(Binder& bind, Var tokens, Tensor& weight, bool train) {
    const auto& s = tokens.shape();
    Var flat = reshape(tokens, {s[0] * s[1], s[2]});
    Var w = bind(weight, train);
    Var out = matmul(flat, w);
    return reshape(out, {s[0], s[1], w.shape()[1]});
}

Var shallow_extract(Binder& bind, ConvParams& shallow, Var image, bool train) {
    return conv2d(image, bind(shallow.w, train), bind(shallow.b, train), 1, 1);
}

Var block_forward(Binder& bind, BlockParams& block, Var x, int window, int heads, bool train,
                  AttentionProbe* probe) {
    const auto s = x.shape();
    Var normed = layer_norm(x, bind(block.ln1.gamma, train), bind(block.ln1.beta, train));
    Var tokens = window_partition(normed, window);
    Var q = split_heads(project_tokens(bind, tokens, block.attn.pq, train), heads);
    Var k = split_heads(project_tokens(bind, tokens, block.attn.pk, train), heads);
    Var v = split_heads(project_tokens(bind, tokens, block.attn.pv, train), heads);
    const int dh = q.shape()[2];
    Var attn = window_attention_sum({q}, k, v, {bind(block.attn.bias, train)},
                                    cached_position_index(window), heads,
                                    1.0 / std::sqrt(static_cast<double>(dh)), probe);
    Var merged = project_tokens(bind, merge_heads(attn, heads), block.attn.ow, train);
    Var r1 = add(x, window_reverse(merged, s[0], s[1]));
    Var normed2 = layer_norm(r1, bind(block.ln2.gamma, train), bind(block.ln2.beta, train));
    Var hidden = gelu(linear(normed2, bind(block.mlp.w1, train), bind(block.mlp.b1, train)));
    Var mlp_out = linear(hidden, bind(block.mlp.w2, train), bind(block.mlp.b2, train));
    return add(r1, mlp_out);
}

Var backbone_forward(Binder& bind, CoreParams& core, Var f0, const ModelConfig& cfg, bool train) {
    Var x = f0;
    for (BlockParams& block : core.blocks) {
        x = block_forward(bind, block, x, cfg.window, cfg.heads, train);
    }
    return x;
}

Var reconstruct_hq(Binder& bind, CoreParams& core, Var features, const ModelConfig& cfg,
                   bool train) {
    Var x = features;
    for (ConvParams& up : core.up) {
        x = conv2d(x, bind(up.w, train), bind(up.b, train), 1, 1);
        x = pixel_shuffle(x, 2);
    }
    return conv2d(x, bind(core.to_rgb.w, train), bind(core.to_rgb.b, train), 1, 1);
}

Var sisr_forward(Binder& bind, CoreParams& core, Var image, const ModelConfig& cfg, bool train) {
    Var f0 = shallow_extract(bind, core.shallow, image, train);
    Var deep = backbone_forward(bind, core, f0, cfg, train);
    return reconstruct_hq(bind, core, add(deep, f0), cfg, train);
}

} // namespace mujica
