// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mujica/tensor.hpp"

namespace mujica {

enum class MapKind { Basecolor, Normal, Roughness, Metallic };

inline constexpr MapKind kAllMapKinds[] = {MapKind::Basecolor, MapKind::Normal,
                                           MapKind::Roughness, MapKind::Metallic};

const char* kind_name(MapKind kind);
std::optional<MapKind> parse_kind(const std::string& name);
bool is_gray_kind(MapKind kind); // roughness/metallic are stored as replicated gray

/// One texture map. Pixels are (H,W,3) in [0,1]; single-channel sources are
/// replicated so the shared shallow conv always sees three input channels.
struct MaterialMap {
    MapKind kind = MapKind::Basecolor;
    Tensor pixels;

    int height() const { return pixels.dim(0); }
    int width() const { return pixels.dim(1); }
};

/// Aligned set of maps at one resolution.
struct MaterialSet {
    std::map<MapKind, MaterialMap> maps;

    bool has(MapKind kind) const { return maps.count(kind) > 0; }
    const MaterialMap& at(MapKind kind) const;
    MaterialMap& at(MapKind kind);
    std::pair<int, int> resolution() const; // (H, W)
    std::vector<MapKind> kinds() const;
};

struct LoadReport {
    int degenerate_normals = 0;
};

/// Tangent-space decode result: unit vectors with positive z everywhere;
/// pixels whose decoded vector was degenerate (zero length or z <= 0) are
/// replaced by (0,0,1) and counted.
struct NormalField {
    Tensor vectors; // (H,W,3)
    int degenerate = 0;
};

MaterialSet load_material_set(const std::filesystem::path& dir,
                              const std::vector<MapKind>& required,
                              LoadReport* report = nullptr);

NormalField decode_normal(const MaterialMap& map);

/// Catmull-Rom bicubic (a = -0.5), edge-clamped, output clamped to [0,1].
/// Scale 1.0 returns a bit-identical copy.
MaterialMap bicubic_resample(const MaterialMap& map, double scale);
MaterialSet bicubic_resample_set(const MaterialSet& set, double scale);

Tensor bicubic_resample_image(const Tensor& image, double scale);

/// Spatially aligned random crop: LR crop is patch^2, HR crop is
/// (patch*scale)^2 at the LR origin times scale. Deterministic given `rng`.
std::pair<MaterialSet, MaterialSet> random_crop_pair(const MaterialSet& hr, const MaterialSet& lr,
                                                     int patch, int scale, Rng& rng);

void save_material_set(const MaterialSet& set, const std::filesystem::path& dir,
                       int bit_depth = 8);

/// Writes an (H,W,3) or (H,W,1) image in [0,1] as PNG.
void save_image_png(const std::filesystem::path& file, const Tensor& image, int bit_depth = 8);
Tensor load_image_png(const std::filesystem::path& file);

enum class Split { Train, Val, Test };

struct DatasetEntry {
    std::string id;
    std::filesystem::path dir;
};

/// Directory-of-material-directories index. Entries are sorted by id.
struct DatasetIndex {
    std::vector<DatasetEntry> entries;
    Split split = Split::Train;
};

DatasetIndex scan_dataset(const std::filesystem::path& root,
                          const std::vector<MapKind>& required);

} // namespace mujica
