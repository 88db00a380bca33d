// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mujica/error.hpp"

namespace mujica {

namespace {

constexpr char kMagic[8] = {'M', 'U', 'J', 'I', 'C', 'A', '1', '\n'};

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void quantize_f32(Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(t[i]);
}

void write_archive(const std::filesystem::path& file, const Archive& archive) {
    const auto tmp = file.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw runtime_error("cannot write " + file.string());
        out.write(kMagic, sizeof(kMagic));
        write_u32(out, static_cast<std::uint32_t>(archive.header_json.size()));
        out.write(archive.header_json.data(),
                  static_cast<std::streamsize>(archive.header_json.size()));
        write_u32(out, static_cast<std::uint32_t>(archive.tensors.size()));
        for (const auto& [name, tensor] : archive.tensors) {
            write_u32(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
            for (int d = 0; d < tensor.rank(); ++d) {
                write_u32(out, static_cast<std::uint32_t>(tensor.dim(d)));
            }
            std::vector<float> payload(static_cast<size_t>(tensor.size()));
            for (std::int64_t i = 0; i < tensor.size(); ++i) {
                payload[static_cast<size_t>(i)] = static_cast<float>(tensor[i]);
            }
            out.write(reinterpret_cast<const char*>(payload.data()),
                      static_cast<std::streamsize>(payload.size() * sizeof(float)));
        }
        if (!out) throw runtime_error("write failed for " + file.string());
    }
    std::filesystem::rename(tmp, file);
}

Archive read_archive(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw runtime_error("cannot open " + file.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw validation_error(file.string() + " is not a MUJICA1 archive");
    }
    Archive archive;
    const std::uint32_t header_len = read_u32(in);
    archive.header_json.resize(header_len);
    in.read(archive.header_json.data(), header_len);
    const std::uint32_t count = read_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rank = read_u32(in);
        std::vector<int> shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_u32(in));
        Tensor t(shape);
        std::vector<float> payload(static_cast<size_t>(t.size()));
        in.read(reinterpret_cast<char*>(payload.data()),
                static_cast<std::streamsize>(payload.size() * sizeof(float)));
        for (std::int64_t j = 0; j < t.size(); ++j) t[j] = payload[static_cast<size_t>(j)];
        archive.tensors.emplace_back(std::move(name), std::move(t));
        if (!in) throw runtime_error("truncated archive " + file.string());
    }
    return archive;
}

void save_checkpoint(const std::filesystem::path& file, MujicaModel& model,
                     TrainerState* trainer) {
    nlohmann::json header;
    header["format"] = "MUJICA1";
    header["config"] = nlohmann::json::parse(model_config_to_json(model.cfg));
    header["core_frozen"] = model.core_frozen;

    Archive archive;
    std::vector<ParamRef> params = collect_params(model);
    for (ParamRef& p : params) {
        quantize_f32(*p.tensor);
        archive.tensors.emplace_back(p.name, *p.tensor);
    }
    if (trainer) {
        header["trainer"] = {{"step", trainer->step}, {"rng", trainer->rng_state}};
        std::vector<ParamRef> trainable = trainable_params(model);
        if (trainer->momentum.size() != trainable.size()) {
            throw runtime_error("trainer momentum does not match trainable parameter count");
        }
        for (size_t i = 0; i < trainable.size(); ++i) {
            quantize_f32(trainer->momentum[i]);
            archive.tensors.emplace_back("opt.m." + trainable[i].name, trainer->momentum[i]);
        }
    }
    archive.header_json = header.dump();
    write_archive(file, archive);
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
    Archive archive = read_archive(file);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(archive.header_json);
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("bad checkpoint header: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    ckpt.config = model_config_from_json(header.at("config").dump());
    for (auto& [name, tensor] : archive.tensors) ckpt.tensors.emplace(name, std::move(tensor));
    if (header.contains("trainer")) {
        ckpt.has_trainer = true;
        ckpt.trainer.step = header["trainer"].value("step", 0);
        ckpt.trainer.rng_state = header["trainer"].value("rng", "");
    }
    return ckpt;
}

MujicaModel model_from_checkpoint(const Checkpoint& ckpt) {
    Rng rng(0);
    MujicaModel model = build_model(ckpt.config, rng);
    std::vector<ParamRef> params = collect_params(model);
    for (ParamRef& p : params) {
        auto it = ckpt.tensors.find(p.name);
        if (it == ckpt.tensors.end()) {
            throw validation_error("checkpoint missing parameter " + p.name);
        }
        if (it->second.shape() != p.tensor->shape()) {
            throw validation_error("checkpoint shape mismatch for " + p.name);
        }
        *p.tensor = it->second;
    }
    return model;
}

} // namespace mujica
