// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "mujica/checkpoint.hpp"
#include "mujica/error.hpp"
#include "mujica/evaluation.hpp"
#include "mujica/training.hpp"

namespace {

using namespace mujica;

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("cannot open config " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

int cmd_prepare(const std::string& root, const std::vector<int>& scales, int bits) {
    DatasetIndex index = scan_dataset(root, {MapKind::Basecolor});
    int failures = 0;
    for (const DatasetEntry& entry : index.entries) {
        try {
            MaterialSet hr = load_material_set(entry.dir, {});
            for (int scale : scales) {
                if (scale != 2 && scale != 4) throw validation_error("scales must be 2 or 4");
                MaterialSet lr = bicubic_resample_set(hr, 1.0 / scale);
                save_material_set(lr, entry.dir / ("lr_x" + std::to_string(scale)), bits);
            }
            std::cout << "prepared " << entry.id << "\n";
        } catch (const Error& e) {
            std::cerr << "failed " << entry.id << ": " << e.what() << "\n";
            ++failures;
        }
    }
    return failures == 0 ? 0 : 2;
}

struct TrainCli {
    std::string config_path;
    std::string dataset;
    std::string out = "train_out";
    std::string resume;
    // flag overrides; negative = keep config value
    long long seed = -1;
    int epochs = -1;
    int batch = -1;
    int steps_per_epoch = -1;
    int warmup_steps = -1;
    int scale = -1;
};

int cmd_train(const TrainCli& cli) {
    TrainConfig cfg = cli.config_path.empty()
                          ? TrainConfig{}
                          : train_config_from_json(read_file(cli.config_path));
    if (cli.seed >= 0) cfg.seed = static_cast<std::uint64_t>(cli.seed);
    if (cli.epochs > 0) cfg.epochs = cli.epochs;
    if (cli.batch > 0) cfg.batch = cli.batch;
    if (cli.steps_per_epoch > 0) cfg.steps_per_epoch = cli.steps_per_epoch;
    if (cli.warmup_steps >= 0) cfg.warmup_steps = cli.warmup_steps;
    if (cli.scale > 0) cfg.model.scale = cli.scale;
    cfg.validate();

    DatasetIndex dataset = scan_dataset(cli.dataset, cfg.model.fused_maps);
    std::optional<std::filesystem::path> resume;
    if (!cli.resume.empty()) resume = cli.resume;

    TrainResult result = run_training(dataset, cfg, cli.out, resume,
                                      [](std::int64_t step, double lr, const LossReport& r) {
                                          if (step % 25 == 0) {
                                              std::cout << "step " << step << " lr " << lr
                                                        << " total " << r.total << "\n";
                                          }
                                      });
    std::cout << "checkpoint: " << result.checkpoint.string() << "\n";
    return 0;
}

int cmd_upscale(const std::string& checkpoint, const std::string& material,
                const std::string& out, int tile, int overlap, int bits) {
    MujicaModel model = model_from_checkpoint(load_checkpoint(checkpoint));
    std::vector<MapKind> required = model.cfg.fused_maps;
    MaterialSet lr = load_material_set(material, required);
    MaterialSet sr = tile > 0 ? upscale_material_tiled(model, lr, tile, overlap)
                              : upscale_material(model, lr);
    save_material_set(sr, out, bits);
    std::cout << "wrote " << sr.maps.size() << " SR maps to " << out << "\n";
    return 0;
}

int cmd_render(const std::string& material, const std::string& out, int lights_n,
               const std::string& light_file, bool srgb, int bits) {
    MaterialSet set =
        load_material_set(material, {MapKind::Basecolor, MapKind::Normal, MapKind::Roughness});
    LightSet lights =
        light_file.empty() ? fibonacci_hemisphere(lights_n) : load_lightset_json(light_file);
    std::filesystem::create_directories(out);
    std::vector<Tensor> renders = render_set(set, lights, ShadingParams{});
    for (size_t i = 0; i < renders.size(); ++i) {
        const Tensor image = srgb ? linear_to_srgb(renders[i]) : renders[i];
        save_image_png(std::filesystem::path(out) / ("render_L" + std::to_string(i) + ".png"),
                       image, bits);
    }
    std::cout << "wrote " << renders.size() << " renders to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& out,
             int lights_n, int tile, int overlap, bool gt_substitute, bool baseline,
             bool dump_pngs) {
    MujicaModel model = model_from_checkpoint(load_checkpoint(checkpoint));
    DatasetIndex index = scan_dataset(dataset, model.cfg.fused_maps);
    EvalOptions options;
    options.lights_n = lights_n;
    options.tile = tile;
    options.tile_overlap = overlap;
    options.gt_substitute = gt_substitute;
    options.baseline = baseline;
    std::filesystem::create_directories(out);
    if (dump_pngs) options.out_dir = out;
    std::vector<MetricsReport> reports = evaluate_model(model, index, options);
    write_reports_json(std::filesystem::path(out) / "metrics.json", reports);
    write_reports_csv(std::filesystem::path(out) / "metrics.csv", reports);
    for (const MetricsReport& r : reports) {
        std::cout << r.material_id << ": render PSNR " << r.render_psnr_mean;
        if (r.has_baseline) {
            std::cout << " (bicubic " << r.baseline_render_psnr_mean << ")";
        }
        std::cout << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"PBR material super-resolution with a cross-map attention adapter"};
    app.require_subcommand(1);

    // prepare
    auto* prepare = app.add_subcommand("prepare", "Generate bicubic LR map trees");
    std::string prepare_root;
    std::vector<int> prepare_scales = {2, 4};
    int prepare_bits = 16;
    prepare->add_option("--root", prepare_root, "dataset root")->required();
    prepare->add_option("--scales", prepare_scales, "scale factors (2 and/or 4)");
    prepare->add_option("--bits", prepare_bits, "PNG bit depth (8 or 16)");

    // train
    auto* train = app.add_subcommand("train", "Train the adapter");
    TrainCli train_cli;
    train->add_option("--config", train_cli.config_path, "JSON config file");
    train->add_option("--dataset", train_cli.dataset, "dataset root")->required();
    train->add_option("--out", train_cli.out, "output directory");
    train->add_option("--resume", train_cli.resume, "checkpoint to resume from");
    train->add_option("--seed", train_cli.seed, "random seed override");
    train->add_option("--epochs", train_cli.epochs, "epoch override");
    train->add_option("--batch", train_cli.batch, "batch override");
    train->add_option("--steps-per-epoch", train_cli.steps_per_epoch, "steps per epoch override");
    train->add_option("--warmup-steps", train_cli.warmup_steps, "warm-up step override");
    train->add_option("--scale", train_cli.scale, "scale override (2 or 4)");

    // upscale
    auto* upscale = app.add_subcommand("upscale", "Super-resolve one material");
    std::string up_ckpt, up_material, up_out;
    int up_tile = 0, up_overlap = 8, up_bits = 16;
    upscale->add_option("--checkpoint", up_ckpt)->required();
    upscale->add_option("--material", up_material)->required();
    upscale->add_option("--out", up_out)->required();
    upscale->add_option("--tile", up_tile, "tile size in LR pixels (0 = whole image)");
    upscale->add_option("--tile-overlap", up_overlap, "tile overlap in LR pixels");
    upscale->add_option("--bits", up_bits, "output PNG bit depth");

    // render
    auto* render = app.add_subcommand("render", "Render a material under point lights");
    std::string render_material, render_out, render_light_file;
    int render_lights = 3, render_bits = 8;
    bool render_srgb = false;
    render->add_option("--material", render_material)->required();
    render->add_option("--out", render_out)->required();
    render->add_option("--lights", render_lights, "Fibonacci light count");
    render->add_option("--light-file", render_light_file, "JSON light set");
    render->add_flag("--srgb", render_srgb, "apply sRGB transform to previews");
    render->add_option("--bits", render_bits, "output PNG bit depth");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_dataset, eval_out;
    int eval_lights = 6, eval_tile = 0, eval_overlap = 8;
    bool eval_no_sub = false, eval_no_baseline = false, eval_dump = false;
    eval->add_option("--checkpoint", eval_ckpt)->required();
    eval->add_option("--dataset", eval_dataset)->required();
    eval->add_option("--out", eval_out)->required();
    eval->add_option("--lights", eval_lights, "light count");
    eval->add_option("--tile", eval_tile, "tile size (0 = whole image)");
    eval->add_option("--tile-overlap", eval_overlap, "tile overlap");
    eval->add_flag("--no-gt-substitute", eval_no_sub, "render SR-only map sets");
    eval->add_flag("--no-baseline", eval_no_baseline, "skip the bicubic baseline");
    eval->add_flag("--dump", eval_dump, "write SR maps and render previews");

    CLI11_PARSE(app, argc, argv);

    try {
        if (prepare->parsed()) return cmd_prepare(prepare_root, prepare_scales, prepare_bits);
        if (train->parsed()) return cmd_train(train_cli);
        if (upscale->parsed()) {
            return cmd_upscale(up_ckpt, up_material, up_out, up_tile, up_overlap, up_bits);
        }
        if (render->parsed()) {
            return cmd_render(render_material, render_out, render_lights, render_light_file,
                              render_srgb, render_bits);
        }
        if (eval->parsed()) {
            return cmd_eval(eval_ckpt, eval_dataset, eval_out, eval_lights, eval_tile,
                            eval_overlap, !eval_no_sub, !eval_no_baseline, eval_dump);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.kind() == ErrorKind::Validation ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
