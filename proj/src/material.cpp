// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/material.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "mujica/error.hpp"
#include "mujica/parallel.hpp"

namespace mujica {

const char* kind_name(MapKind kind) {
    switch (kind) {
    case MapKind::Basecolor: return "basecolor";
    case MapKind::Normal: return "normal";
    case MapKind::Roughness: return "roughness";
    case MapKind::Metallic: return "metallic";
    }
    return "unknown";
}

std::optional<MapKind> parse_kind(const std::string& name) {
    for (MapKind k : kAllMapKinds) {
        if (name == kind_name(k)) return k;
    }
    return std::nullopt;
}

bool is_gray_kind(MapKind kind) {
    return kind == MapKind::Roughness || kind == MapKind::Metallic;
}

const MaterialMap& MaterialSet::at(MapKind kind) const {
    auto it = maps.find(kind);
    if (it == maps.end()) {
        throw validation_error(std::string("MissingMap: ") + kind_name(kind));
    }
    return it->second;
}

MaterialMap& MaterialSet::at(MapKind kind) {
    return const_cast<MaterialMap&>(static_cast<const MaterialSet*>(this)->at(kind));
}

std::pair<int, int> MaterialSet::resolution() const {
    if (maps.empty()) throw validation_error("MaterialSet is empty");
    const MaterialMap& first = maps.begin()->second;
    return {first.height(), first.width()};
}

std::vector<MapKind> MaterialSet::kinds() const {
    std::vector<MapKind> out;
    for (const auto& [k, m] : maps) out.push_back(k);
    return out;
}

// ---- PNG I/O -------------------------------------------------------------

namespace {

struct PngRead {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* file = nullptr;
    ~PngRead() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (file) std::fclose(file);
    }
};

struct PngWrite {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* file = nullptr;
    ~PngWrite() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (file) std::fclose(file);
    }
};

} // namespace

Tensor load_image_png(const std::filesystem::path& file) {
    PngRead ctx;
    ctx.file = std::fopen(file.c_str(), "rb");
    if (!ctx.file) throw runtime_error("cannot open " + file.string());
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (setjmp(png_jmpbuf(ctx.png))) {
        throw runtime_error("failed to decode " + file.string());
    }
    png_init_io(ctx.png, ctx.file);
    png_read_info(ctx.png, ctx.info);

    png_set_palette_to_rgb(ctx.png);
    png_set_expand_gray_1_2_4_to_8(ctx.png);
    png_set_strip_alpha(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    const png_uint_32 width = png_get_image_width(ctx.png, ctx.info);
    const png_uint_32 height = png_get_image_height(ctx.png, ctx.info);
    const int depth = png_get_bit_depth(ctx.png, ctx.info);
    const int channels = png_get_channels(ctx.png, ctx.info);
    if (channels != 1 && channels != 3) {
        throw validation_error(file.string() + ": expected 1 or 3 channels, got " +
                               std::to_string(channels));
    }

    const size_t row_bytes = png_get_rowbytes(ctx.png, ctx.info);
    std::vector<png_byte> raw(row_bytes * height);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = raw.data() + y * row_bytes;
    png_read_image(ctx.png, rows.data());
    png_read_end(ctx.png, nullptr);

    Tensor out({static_cast<int>(height), static_cast<int>(width), 3});
    const double inv8 = 1.0 / 255.0;
    const double inv16 = 1.0 / 65535.0;
    for (png_uint_32 y = 0; y < height; ++y) {
        const png_byte* row = rows[y];
        for (png_uint_32 x = 0; x < width; ++x) {
            double rgb[3];
            if (depth == 16) {
                for (int c = 0; c < channels; ++c) {
                    // PNG 16-bit samples are big-endian
                    const int hi = row[(x * channels + c) * 2];
                    const int lo = row[(x * channels + c) * 2 + 1];
                    rgb[c] = ((hi << 8) | lo) * inv16;
                }
            } else {
                for (int c = 0; c < channels; ++c) rgb[c] = row[x * channels + c] * inv8;
            }
            if (channels == 1) rgb[1] = rgb[2] = rgb[0];
            for (int c = 0; c < 3; ++c) out.at(static_cast<int>(y), static_cast<int>(x), c) = rgb[c];
        }
    }
    return out;
}

void save_image_png(const std::filesystem::path& file, const Tensor& image, int bit_depth) {
    if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
        throw validation_error("save_image_png expects (H,W,1) or (H,W,3)");
    }
    if (bit_depth != 8 && bit_depth != 16) throw validation_error("bit depth must be 8 or 16");
    const int h = image.dim(0), w = image.dim(1), ch = image.dim(2);

    PngWrite ctx;
    ctx.file = std::fopen(file.c_str(), "wb");
    if (!ctx.file) throw runtime_error("cannot write " + file.string());
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (setjmp(png_jmpbuf(ctx.png))) {
        throw runtime_error("failed to encode " + file.string());
    }
    png_init_io(ctx.png, ctx.file);
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
                 bit_depth, ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);

    const int maxval = bit_depth == 8 ? 255 : 65535;
    const size_t sample_bytes = bit_depth == 8 ? 1 : 2;
    std::vector<png_byte> row(static_cast<size_t>(w) * ch * sample_bytes);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
                const long q = std::lround(v * maxval);
                if (bit_depth == 8) {
                    row[static_cast<size_t>(x) * ch + c] = static_cast<png_byte>(q);
                } else {
                    row[(static_cast<size_t>(x) * ch + c) * 2] = static_cast<png_byte>(q >> 8);
                    row[(static_cast<size_t>(x) * ch + c) * 2 + 1] = static_cast<png_byte>(q & 0xff);
                }
            }
        }
        png_write_row(ctx.png, row.data());
    }
    png_write_end(ctx.png, nullptr);
}

// ---- material sets -------------------------------------------------------

MaterialSet load_material_set(const std::filesystem::path& dir,
                              const std::vector<MapKind>& required, LoadReport* report) {
    if (!std::filesystem::is_directory(dir)) {
        throw validation_error("not a material directory: " + dir.string());
    }
    MaterialSet set;
    for (MapKind kind : kAllMapKinds) {
        const auto file = dir / (std::string(kind_name(kind)) + ".png");
        if (!std::filesystem::exists(file)) continue;
        MaterialMap map;
        map.kind = kind;
        map.pixels = load_image_png(file);
        if (is_gray_kind(kind)) {
            // collapse to the first channel so the three stored channels agree
            Tensor& px = map.pixels;
            for (int y = 0; y < map.height(); ++y) {
                for (int x = 0; x < map.width(); ++x) {
                    const double v = px.at(y, x, 0);
                    px.at(y, x, 1) = v;
                    px.at(y, x, 2) = v;
                }
            }
        }
        set.maps.emplace(kind, std::move(map));
    }
    for (MapKind kind : required) {
        if (!set.has(kind)) {
            throw validation_error(std::string("MissingMap: ") + kind_name(kind) + " in " +
                                   dir.string());
        }
    }
    auto [h, w] = set.resolution();
    for (const auto& [kind, map] : set.maps) {
        if (map.height() != h || map.width() != w) {
            throw validation_error(std::string("resolution mismatch for ") + kind_name(kind) +
                                   " in " + dir.string());
        }
    }
    if (set.has(MapKind::Normal)) {
        NormalField field = decode_normal(set.at(MapKind::Normal));
        if (report) report->degenerate_normals += field.degenerate;
    }
    return set;
}

NormalField decode_normal(const MaterialMap& map) {
    if (map.kind != MapKind::Normal) throw validation_error("decode_normal: map is not a normal");
    const int h = map.height(), w = map.width();
    NormalField out;
    out.vectors = Tensor({h, w, 3});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double vx = 2.0 * map.pixels.at(y, x, 0) - 1.0;
            const double vy = 2.0 * map.pixels.at(y, x, 1) - 1.0;
            const double vz = 2.0 * map.pixels.at(y, x, 2) - 1.0;
            const double len = std::sqrt(vx * vx + vy * vy + vz * vz);
            if (len < 1e-12 || vz <= 0.0) {
                out.vectors.at(y, x, 0) = 0.0;
                out.vectors.at(y, x, 1) = 0.0;
                out.vectors.at(y, x, 2) = 1.0;
                ++out.degenerate;
            } else {
                out.vectors.at(y, x, 0) = vx / len;
                out.vectors.at(y, x, 1) = vy / len;
                out.vectors.at(y, x, 2) = vz / len;
            }
        }
    }
    return out;
}

// ---- bicubic resampling --------------------------------------------------

namespace {

// Catmull-Rom family kernel, a = -0.5.
double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

struct TapPlan {
    std::vector<int> base;      // leftmost tap index per output position
    std::vector<double> weight; // 4 weights per output position
};

TapPlan plan_taps(int in_size, int out_size, double scale) {
    TapPlan plan;
    plan.base.resize(static_cast<size_t>(out_size));
    plan.weight.resize(static_cast<size_t>(out_size) * 4);
    for (int o = 0; o < out_size; ++o) {
        const double src = (o + 0.5) / scale - 0.5;
        const int base = static_cast<int>(std::floor(src)) - 1;
        plan.base[static_cast<size_t>(o)] = base;
        for (int t = 0; t < 4; ++t) {
            plan.weight[static_cast<size_t>(o) * 4 + t] = cubic_weight(src - (base + t));
        }
    }
    (void)in_size;
    return plan;
}

int clamp_index(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

} // namespace

Tensor bicubic_resample_image(const Tensor& image, double scale) {
    if (image.rank() != 3) throw validation_error("bicubic_resample expects (H,W,C)");
    const bool known = scale == 0.25 || scale == 0.5 || scale == 1.0 || scale == 2.0 || scale == 4.0;
    if (!known) throw validation_error("unsupported scale factor");
    if (scale == 1.0) return image;
    const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
    const double oh = h * scale, ow = w * scale;
    if (oh != std::floor(oh) || ow != std::floor(ow) || oh < 1 || ow < 1) {
        throw validation_error("non-integral output size for scale");
    }
    const int hout = static_cast<int>(oh), wout = static_cast<int>(ow);

    const TapPlan xplan = plan_taps(w, wout, scale);
    Tensor horizontal({h, wout, c});
    parallel_for(h, [&](std::int64_t y0, std::int64_t y1) {
        for (std::int64_t y = y0; y < y1; ++y) {
            for (int o = 0; o < wout; ++o) {
                const int base = xplan.base[static_cast<size_t>(o)];
                const double* wt = &xplan.weight[static_cast<size_t>(o) * 4];
                for (int ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (int t = 0; t < 4; ++t) {
                        acc += wt[t] * image.at(static_cast<int>(y), clamp_index(base + t, w), ch);
                    }
                    horizontal.at(static_cast<int>(y), o, ch) = acc;
                }
            }
        }
    });

    const TapPlan yplan = plan_taps(h, hout, scale);
    Tensor out({hout, wout, c});
    parallel_for(hout, [&](std::int64_t y0, std::int64_t y1) {
        for (std::int64_t o = y0; o < y1; ++o) {
            const int base = yplan.base[static_cast<size_t>(o)];
            const double* wt = &yplan.weight[static_cast<size_t>(o) * 4];
            for (int x = 0; x < wout; ++x) {
                for (int ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (int t = 0; t < 4; ++t) {
                        acc += wt[t] * horizontal.at(clamp_index(base + t, h), x, ch);
                    }
                    out.at(static_cast<int>(o), x, ch) = std::clamp(acc, 0.0, 1.0);
                }
            }
        }
    });
    return out;
}

MaterialMap bicubic_resample(const MaterialMap& map, double scale) {
    MaterialMap out;
    out.kind = map.kind;
    out.pixels = bicubic_resample_image(map.pixels, scale);
    return out;
}

MaterialSet bicubic_resample_set(const MaterialSet& set, double scale) {
    MaterialSet out;
    for (const auto& [kind, map] : set.maps) out.maps.emplace(kind, bicubic_resample(map, scale));
    return out;
}

std::pair<MaterialSet, MaterialSet> random_crop_pair(const MaterialSet& hr, const MaterialSet& lr,
                                                     int patch, int scale, Rng& rng) {
    auto [lh, lw] = lr.resolution();
    auto [hh, hw] = hr.resolution();
    if (hh != lh * scale || hw != lw * scale) {
        throw validation_error("random_crop_pair: HR resolution must be LR x scale");
    }
    if (patch > lh || patch > lw) {
        throw validation_error("random_crop_pair: patch larger than LR image");
    }
    const int oy = static_cast<int>(rng.index(lh - patch + 1));
    const int ox = static_cast<int>(rng.index(lw - patch + 1));

    auto crop = [](const MaterialSet& src, int y0, int x0, int size) {
        MaterialSet out;
        for (const auto& [kind, map] : src.maps) {
            MaterialMap m;
            m.kind = kind;
            m.pixels = Tensor({size, size, 3});
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    for (int c = 0; c < 3; ++c) {
                        m.pixels.at(y, x, c) = map.pixels.at(y0 + y, x0 + x, c);
                    }
                }
            }
            out.maps.emplace(kind, std::move(m));
        }
        return out;
    };

    return {crop(hr, oy * scale, ox * scale, patch * scale), crop(lr, oy, ox, patch)};
}

void save_material_set(const MaterialSet& set, const std::filesystem::path& dir, int bit_depth) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (!std::filesystem::is_directory(dir)) {
        throw runtime_error("cannot create output directory " + dir.string());
    }
    for (const auto& [kind, map] : set.maps) {
        const auto file = dir / (std::string(kind_name(kind)) + ".png");
        if (is_gray_kind(kind)) {
            Tensor gray({map.height(), map.width(), 1});
            for (int y = 0; y < map.height(); ++y) {
                for (int x = 0; x < map.width(); ++x) gray.at(y, x, 0) = map.pixels.at(y, x, 0);
            }
            save_image_png(file, gray, bit_depth);
        } else {
            save_image_png(file, map.pixels, bit_depth);
        }
    }
}

DatasetIndex scan_dataset(const std::filesystem::path& root,
                          const std::vector<MapKind>& required) {
    if (!std::filesystem::is_directory(root)) {
        throw validation_error("dataset root is not a directory: " + root.string());
    }
    DatasetIndex index;
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        bool ok = true;
        for (MapKind kind : required) {
            if (!std::filesystem::exists(entry.path() / (std::string(kind_name(kind)) + ".png"))) {
                ok = false;
                break;
            }
        }
        if (ok) index.entries.push_back({entry.path().filename().string(), entry.path()});
    }
    std::sort(index.entries.begin(), index.entries.end(),
              [](const DatasetEntry& a, const DatasetEntry& b) { return a.id < b.id; });
    if (index.entries.empty()) {
        throw validation_error("dataset contains no usable materials: " + root.string());
    }
    return index;
}

} // namespace mujica
