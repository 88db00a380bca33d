// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/adapter.hpp"

#include <algorithm>
#include <cmath>

#include "mujica/error.hpp"

namespace mujica {

namespace {

Var conv1x1(Binder& bind, ConvParams& p, Var x, bool train) {
    return conv2d(x, bind(p.w, train), bind(p.b, train), 1, 0);
}

WmcaParams make_wmca(Rng& rng, const ModelConfig& cfg) {
    WmcaParams w;
    const int c = cfg.channels, d = cfg.embed_dim;
    const double proj_std = std::sqrt(1.0 / c);
    const int table = (2 * cfg.window - 1) * (2 * cfg.window - 1);
    for (size_t i = 0; i < cfg.fused_maps.size(); ++i) {
        w.pq.push_back(rng.normal_tensor({c, d}, proj_std));
        w.bias.push_back(rng.normal_tensor({cfg.heads, table}, 0.02));
    }
    w.pk = rng.normal_tensor({c, d}, proj_std);
    w.pv = rng.normal_tensor({c, d}, proj_std);
    w.ow = rng.normal_tensor({d, c}, std::sqrt(1.0 / d));
    return w;
}

CabParams make_cab(Rng& rng, const ModelConfig& cfg, int layer) {
    CabParams cab;
    const int c = cfg.channels;
    const int cin = cfg.connection == Connection::DC ? c + layer * cfg.growth : c;
    cab.in_proj = make_conv(rng, 1, 1, cin, c);
    cab.ln_attn = make_norm(c);
    if (cfg.fusion == Fusion::WMCA) {
        cab.wmca = make_wmca(rng, cfg);
    } else {
        cab.fuse = make_conv(rng, 1, 1, c * static_cast<int>(cfg.fused_maps.size()), c);
    }
    cab.ln_mlp = make_norm(c);
    cab.mlp = make_mlp(rng, c, 2 * c);
    return cab;
}

void collect_wmca(WmcaParams& p, const std::vector<MapKind>& fused, const std::string& prefix,
                  bool trainable, std::vector<ParamRef>& out) {
    for (size_t i = 0; i < p.pq.size(); ++i) {
        const std::string tag = kind_name(fused[i]);
        out.push_back({prefix + ".pq." + tag, &p.pq[i], trainable});
        out.push_back({prefix + ".bias." + tag, &p.bias[i], trainable});
    }
    out.push_back({prefix + ".pk", &p.pk, trainable});
    out.push_back({prefix + ".pv", &p.pv, trainable});
    out.push_back({prefix + ".ow", &p.ow, trainable});
}

} // namespace

MujicaModel build_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    MujicaModel model;
    model.cfg = cfg;
    model.core = build_core(cfg, rng);
    for (MapKind kind : cfg.fused_maps) {
        FusionParams fp;
        for (int l = 0; l < cfg.cabs; ++l) fp.cabs.push_back(make_cab(rng, cfg, l));
        if (cfg.connection == Connection::DC) {
            for (int l = 0; l + 1 < cfg.cabs; ++l) {
                fp.transitions.push_back(make_conv(rng, 1, 1, cfg.channels, cfg.growth));
            }
        }
        fp.alpha = Tensor({1});
        for (int i = 0; i < cfg.ffe_depth; ++i) {
            fp.ffe.push_back(make_block(rng, cfg.channels, cfg.embed_dim, cfg.heads, cfg.window));
        }
        model.adapter.emplace(kind, std::move(fp));
    }
    reinit_ffe_from_backbone(model);
    return model;
}

void reinit_ffe_from_backbone(MujicaModel& model) {
    if (model.core.blocks.empty()) return;
    for (auto& [kind, fp] : model.adapter) {
        for (size_t i = 0; i < fp.ffe.size(); ++i) {
            fp.ffe[i] = model.core.blocks[i % model.core.blocks.size()];
            fp.ffe[i].attn.ow.zero();
            fp.ffe[i].mlp.w2.zero();
        }
    }
}

namespace {

void collect_fusion_impl(FusionParams& p, const ModelConfig& cfg, const std::string& prefix,
                         bool trainable, std::vector<ParamRef>& out) {
    for (size_t l = 0; l < p.cabs.size(); ++l) {
        const std::string cp = prefix + ".cab" + std::to_string(l);
        CabParams& cab = p.cabs[l];
        collect_conv(cab.in_proj, cp + ".in_proj", trainable, out);
        collect_norm(cab.ln_attn, cp + ".ln_attn", trainable, out);
        if (cfg.fusion == Fusion::WMCA) {
            collect_wmca(cab.wmca, cfg.fused_maps, cp + ".wmca", trainable, out);
        } else {
            collect_conv(cab.fuse, cp + ".fuse", trainable, out);
        }
        collect_norm(cab.ln_mlp, cp + ".ln_mlp", trainable, out);
        collect_mlp(cab.mlp, cp + ".mlp", trainable, out);
    }
    for (size_t l = 0; l < p.transitions.size(); ++l) {
        collect_conv(p.transitions[l], prefix + ".transition" + std::to_string(l), trainable, out);
    }
    out.push_back({prefix + ".alpha", &p.alpha, trainable});
    for (size_t i = 0; i < p.ffe.size(); ++i) {
        collect_block(p.ffe[i], prefix + ".ffe" + std::to_string(i), trainable, out);
    }
}

} // namespace

std::vector<ParamRef> collect_params(MujicaModel& model) {
    std::vector<ParamRef> out;
    collect_core(model.core, !model.core_frozen, out);
    for (auto& [kind, fp] : model.adapter) {
        collect_fusion_impl(fp, model.cfg, std::string("adapter.") + kind_name(kind), true, out);
    }
    return out;
}

std::vector<ParamRef> trainable_params(MujicaModel& model) {
    std::vector<ParamRef> all = collect_params(model);
    std::vector<ParamRef> out;
    for (ParamRef& r : all) {
        if (r.trainable) out.push_back(r);
    }
    return out;
}

Var wmca_forward(Binder& bind, WmcaParams& params, const std::vector<Var>& windows,
                 int target_index, const ModelConfig& cfg, bool train, AttentionProbe* probe) {
    if (windows.size() != params.pq.size()) {
        throw validation_error("wmca: modality stream count does not match parameter count");
    }
    if (target_index < 0 || target_index >= static_cast<int>(windows.size())) {
        throw validation_error("wmca: bad target index");
    }
    Var kv = windows[static_cast<size_t>(target_index)];
    Var k = split_heads(project_tokens(bind, kv, params.pk, train), cfg.heads);
    Var v = split_heads(project_tokens(bind, kv, params.pv, train), cfg.heads);
    std::vector<Var> qs;
    std::vector<Var> tables;
    for (size_t i = 0; i < windows.size(); ++i) {
        qs.push_back(split_heads(project_tokens(bind, windows[i], params.pq[i], train), cfg.heads));
        tables.push_back(bind(params.bias[i], train));
    }
    Var attn = window_attention_sum(qs, k, v, tables, cached_position_index(cfg.window), cfg.heads,
                                    1.0 / std::sqrt(static_cast<double>(cfg.head_dim())), probe);
    return project_tokens(bind, merge_heads(attn, cfg.heads), params.ow, train);
}

Var cab_forward(Binder& bind, CabParams& params, Var dense_input, const std::vector<Var>& streams,
                int target_index, const ModelConfig& cfg, bool train, AttentionProbe* probe) {
    const int expected = params.in_proj.w.dim(2);
    if (dense_input.shape()[2] != expected) {
        throw validation_error("cab: dense input has " + std::to_string(dense_input.shape()[2]) +
                               " channels, expected " + std::to_string(expected));
    }
    Var y0 = conv1x1(bind, params.in_proj, dense_input, train);
    Var self_norm = layer_norm(y0, bind(params.ln_attn.gamma, train),
                               bind(params.ln_attn.beta, train));
    const auto s = y0.shape();

    Var fused_out;
    if (cfg.fusion == Fusion::WMCA) {
        std::vector<Var> windows;
        for (size_t i = 0; i < streams.size(); ++i) {
            Var stream = static_cast<int>(i) == target_index ? self_norm : streams[i];
            windows.push_back(window_partition(stream, cfg.window));
        }
        Var attn = wmca_forward(bind, params.wmca, windows, target_index, cfg, train, probe);
        fused_out = window_reverse(attn, s[0], s[1]);
    } else {
        std::vector<Var> cat;
        for (size_t i = 0; i < streams.size(); ++i) {
            cat.push_back(static_cast<int>(i) == target_index ? self_norm : streams[i]);
        }
        fused_out = conv1x1(bind, params.fuse, concat_lastdim(cat), train);
    }
    Var r1 = add(y0, fused_out);
    Var normed = layer_norm(r1, bind(params.ln_mlp.gamma, train), bind(params.ln_mlp.beta, train));
    Var hidden = gelu(linear(normed, bind(params.mlp.w1, train), bind(params.mlp.b1, train)));
    Var mlp_out = linear(hidden, bind(params.mlp.w2, train), bind(params.mlp.b2, train));
    return add(r1, mlp_out);
}

Var transition(Binder& bind, ConvParams& params, Var x, bool train) {
    return leaky_relu(conv1x1(bind, params, x, train), 0.2);
}

std::map<MapKind, Var> fusion_forward(Binder& bind, MujicaModel& model,
                                      const std::map<MapKind, Var>& deep,
                                      const std::map<MapKind, Var>& shallow, bool train,
                                      std::map<MapKind, AttentionProbe>* probes) {
    const ModelConfig& cfg = model.cfg;
    const auto& fused = cfg.fused_maps;
    for (MapKind kind : fused) {
        if (!deep.count(kind) || !shallow.count(kind)) {
            throw validation_error(std::string("fusion: missing features for ") + kind_name(kind));
        }
    }

    std::map<MapKind, Var> base;
    std::map<MapKind, Var> prev;
    std::map<MapKind, std::vector<Var>> dense_feats;
    for (MapKind kind : fused) {
        base[kind] = add(deep.at(kind), shallow.at(kind));
        dense_feats[kind] = {base[kind]};
    }

    const int layers = cfg.cabs;
    for (int l = 0; l < layers; ++l) {
        std::vector<Var> streams;
        for (MapKind kind : fused) {
            streams.push_back(l == 0 ? deep.at(kind) : prev.at(kind));
        }
        std::map<MapKind, Var> next;
        for (size_t mi = 0; mi < fused.size(); ++mi) {
            const MapKind kind = fused[mi];
            FusionParams& fp = model.adapter.at(kind);
            Var dense_in;
            if (cfg.connection == Connection::DC) {
                dense_in = concat_lastdim(dense_feats[kind]);
            } else {
                dense_in = l == 0 ? base[kind] : prev.at(kind);
            }
            AttentionProbe* probe = probes ? &(*probes)[kind] : nullptr;
            next[kind] = cab_forward(bind, fp.cabs[static_cast<size_t>(l)], dense_in, streams,
                                     static_cast<int>(mi), cfg, train, probe);
        }
        for (MapKind kind : fused) {
            if (cfg.connection == Connection::DC && l + 1 < layers) {
                FusionParams& fp = model.adapter.at(kind);
                dense_feats[kind].push_back(
                    transition(bind, fp.transitions[static_cast<size_t>(l)], next[kind], train));
            }
            prev[kind] = next[kind];
        }
    }

    std::map<MapKind, Var> out;
    for (MapKind kind : fused) {
        if (cfg.connection == Connection::NRC) {
            out[kind] = prev.at(kind);
        } else {
            FusionParams& fp = model.adapter.at(kind);
            out[kind] = add(smul(prev.at(kind), bind(fp.alpha, train)), base.at(kind));
        }
    }
    return out;
}

Var ffe_forward(Binder& bind, FusionParams& params, Var fused, const ModelConfig& cfg,
                bool train) {
    Var x = fused;
    for (BlockParams& block : params.ffe) {
        x = block_forward(bind, block, x, cfg.window, cfg.heads, train);
    }
    return x;
}

std::map<MapKind, Var> mujica_forward(Binder& bind, MujicaModel& model,
                                      const std::map<MapKind, Var>& lr_maps, bool train) {
    const ModelConfig& cfg = model.cfg;
    const bool train_core = train && !model.core_frozen;
    for (MapKind kind : cfg.fused_maps) {
        if (!lr_maps.count(kind)) {
            throw validation_error(std::string("MissingMap: ") + kind_name(kind));
        }
    }

    std::map<MapKind, Var> f0, deep;
    for (MapKind kind : cfg.modalities) {
        auto it = lr_maps.find(kind);
        if (it == lr_maps.end()) continue;
        f0[kind] = shallow_extract(bind, model.core.shallow, it->second, train_core);
        deep[kind] = backbone_forward(bind, model.core, f0[kind], cfg, train_core);
    }

    std::map<MapKind, Var> fused_deep, fused_shallow;
    for (MapKind kind : cfg.fused_maps) {
        fused_deep[kind] = deep.at(kind);
        fused_shallow[kind] = f0.at(kind);
    }
    std::map<MapKind, Var> fused = fusion_forward(bind, model, fused_deep, fused_shallow, train);

    std::map<MapKind, Var> out;
    for (MapKind kind : cfg.modalities) {
        if (!f0.count(kind)) continue;
        if (cfg.is_fused(kind)) {
            Var refined = ffe_forward(bind, model.adapter.at(kind), fused.at(kind), cfg, train);
            out[kind] = reconstruct_hq(bind, model.core, refined, cfg, train_core);
        } else {
            out[kind] =
                reconstruct_hq(bind, model.core, add(deep.at(kind), f0.at(kind)), cfg, train_core);
        }
    }
    return out;
}

// ---- inference helpers -------------------------------------------------------

namespace {

Tensor reflect_pad_bottom_right(const Tensor& x, int pad_bottom, int pad_right) {
    if (pad_bottom == 0 && pad_right == 0) return x;
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor out({h + pad_bottom, w + pad_right, c});
    for (int y = 0; y < h + pad_bottom; ++y) {
        const int sy = y < h ? y : 2 * h - 2 - y;
        for (int x2 = 0; x2 < w + pad_right; ++x2) {
            const int sx = x2 < w ? x2 : 2 * w - 2 - x2;
            for (int ch = 0; ch < c; ++ch) out.at(y, x2, ch) = x.at(sy, sx, ch);
        }
    }
    return out;
}

Tensor crop_image(const Tensor& x, int y0, int x0, int h, int w) {
    Tensor out({h, w, x.dim(2)});
    for (int y = 0; y < h; ++y) {
        for (int x2 = 0; x2 < w; ++x2) {
            for (int c = 0; c < x.dim(2); ++c) out.at(y, x2, c) = x.at(y0 + y, x0 + x2, c);
        }
    }
    return out;
}

} // namespace

MaterialSet upscale_material(MujicaModel& model, const MaterialSet& lr) {
    const ModelConfig& cfg = model.cfg;
    auto [h, w] = lr.resolution();
    if (h < 2 || w < 2) throw validation_error("upscale: input too small");
    const int s = cfg.window;
    const int ph = (s - h % s) % s;
    const int pw = (s - w % s) % s;

    Graph g;
    Binder bind(g);
    std::map<MapKind, Var> lr_vars;
    for (MapKind kind : cfg.modalities) {
        if (!lr.has(kind)) continue;
        lr_vars[kind] = g.constant(reflect_pad_bottom_right(lr.at(kind).pixels, ph, pw));
    }
    for (MapKind kind : cfg.fused_maps) {
        if (!lr_vars.count(kind)) {
            throw validation_error(std::string("MissingMap: ") + kind_name(kind));
        }
    }
    std::map<MapKind, Var> sr = mujica_forward(bind, model, lr_vars, false);

    MaterialSet out;
    for (auto& [kind, var] : sr) {
        MaterialMap map;
        map.kind = kind;
        Tensor full = var.val();
        Tensor cropped = (ph || pw)
                             ? crop_image(full, 0, 0, h * cfg.scale, w * cfg.scale)
                             : std::move(full);
        for (std::int64_t i = 0; i < cropped.size(); ++i) {
            cropped[i] = std::clamp(cropped[i], 0.0, 1.0);
        }
        map.pixels = std::move(cropped);
        out.maps.emplace(kind, std::move(map));
    }
    return out;
}

MaterialSet upscale_material_tiled(MujicaModel& model, const MaterialSet& lr, int tile,
                                   int overlap) {
    const ModelConfig& cfg = model.cfg;
    auto [h, w] = lr.resolution();
    if (tile <= 0 || (tile >= h && tile >= w)) return upscale_material(model, lr);
    const int s = cfg.window;
    if (tile % s != 0) throw validation_error("tile must be a multiple of the window size");
    if (overlap < 0) throw validation_error("tile overlap must be >= 0");
    // Written pixels must sit past the zone a tile edge can contaminate: the
    // edge convolution rim spreads across its attention window and one more
    // pixel through the reconstruction convs. Snapping the margin to the
    // window grid also keeps every tile's window partition aligned with the
    // untiled run, so tile interiors reproduce it exactly.
    int margin = std::max(overlap, s + 2);
    margin = ((margin + s - 1) / s) * s;
    const int step = tile - 2 * margin;
    if (step <= 0) {
        throw validation_error("tile too small for the required overlap margin");
    }

    MaterialSet out;
    const int scale = cfg.scale;
    for (int y = 0; y < h; y += step) {
        const int ty0 = std::max(0, y - margin);
        const int ty1 = std::min(h, y + step + margin);
        for (int x = 0; x < w; x += step) {
            const int tx0 = std::max(0, x - margin);
            const int tx1 = std::min(w, x + step + margin);

            MaterialSet tile_lr;
            for (const auto& [kind, map] : lr.maps) {
                MaterialMap m;
                m.kind = kind;
                m.pixels = crop_image(map.pixels, ty0, tx0, ty1 - ty0, tx1 - tx0);
                tile_lr.maps.emplace(kind, std::move(m));
            }
            MaterialSet tile_sr = upscale_material(model, tile_lr);

            const int wy1 = std::min(y + step, h);
            const int wx1 = std::min(x + step, w);
            for (auto& [kind, map] : tile_sr.maps) {
                if (!out.has(kind)) {
                    MaterialMap m;
                    m.kind = kind;
                    m.pixels = Tensor({h * scale, w * scale, 3});
                    out.maps.emplace(kind, std::move(m));
                }
                Tensor& dst = out.at(kind).pixels;
                for (int oy = y * scale; oy < wy1 * scale; ++oy) {
                    for (int ox = x * scale; ox < wx1 * scale; ++ox) {
                        for (int c = 0; c < 3; ++c) {
                            dst.at(oy, ox, c) =
                                map.pixels.at(oy - ty0 * scale, ox - tx0 * scale, c);
                        }
                    }
                }
            }
        }
    }
    return out;
}

} // namespace mujica
