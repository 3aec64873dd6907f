// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#include "dnrf/dnrf.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <iostream>
#include <string_view>

namespace {

using dnrf::ErrorKind;

std::vector<double> read_code(const std::string& path) {
  std::ifstream in(path);
  if (!in) dnrf::fail(ErrorKind::IoFailure, "cannot read " + path);
  try {
    return nlohmann::json::parse(in).get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    dnrf::fail(ErrorKind::InvalidArgument, path + ": expected a JSON array of numbers (" + e.what() + ")");
  }
}

std::vector<std::vector<double>> read_codes(const std::string& path) {
  std::ifstream in(path);
  if (!in) dnrf::fail(ErrorKind::IoFailure, "cannot read " + path);
  try {
    return nlohmann::json::parse(in).get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    dnrf::fail(ErrorKind::InvalidArgument, path + ": expected a JSON array of arrays (" + e.what() + ")");
  }
}

struct Loaded {
  dnrf::Checkpoint ckpt;
  dnrf::RadianceField<float> field;
  std::vector<float> params;
  std::optional<dnrf::OccupancyGrid> grid;
};

Loaded load_for_rendering(const std::string& path) {
  Loaded l;
  l.ckpt = dnrf::load_checkpoint(path);
  dnrf::FieldConfig fc;
  fc.grid = l.ckpt.grid;
  l.field = dnrf::RadianceField<float>(fc);
  l.params = dnrf::shadow_parameters(l.ckpt);
  if (l.ckpt.occupancy) l.grid = dnrf::restore_grid(*l.ckpt.occupancy);
  return l;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mesh-guided deformable neural radiance fields"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(36);

  // generate-scene
  auto* gen = app.add_subcommand("generate-scene", "Write a synthetic dynamic scene with analytic ground truth");
  std::string gen_out;
  dnrf::SyntheticSceneOptions scene;
  gen->add_option("--out", gen_out, "Output scene directory")->required();
  gen->add_option("--seed", scene.seed, "Random seed")->capture_default_str();
  gen->add_option("--frames", scene.frames, "Number of frames")->capture_default_str()->check(CLI::Range(2u, 100000u));
  gen->add_option("--res", scene.resolution, "Image width and height in pixels")
      ->capture_default_str()
      ->check(CLI::Range(1u, 8192u));
  gen->add_option("--amplitude", scene.amplitude, "Bump blendshape amplitude in meters")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Optimize a radiance field on a scene");
  std::string train_scene, train_ckpt, resume_path;
  // --desk swaps the defaults below, so scan for it before options are bound.
  const bool desk = std::any_of(argv + 1, argv + argc, [](const char* a) { return std::string_view(a) == "--desk"; });
  dnrf::TrainConfig cfg = desk ? dnrf::desk_train_config() : dnrf::TrainConfig{};
  std::uint32_t table_log2 = static_cast<std::uint32_t>(std::countr_zero(cfg.field.grid.table_size));
  bool no_geom_prior = false;
  double shell_width = cfg.occupancy_shell ? cfg.shell_width : 0.0;
  train->add_option("--scene", train_scene, "Scene directory")->required();
  train->add_option("--out-ckpt", train_ckpt, "Checkpoint to write")->required();
  train->add_option("--steps", cfg.total_steps, "Optimization steps")->capture_default_str();
  train->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
  train->add_option("--lambda-geom", cfg.loss.lambda_geom, "Geometric prior weight")->capture_default_str();
  train->add_flag("--no-geom-prior", no_geom_prior, "Disable the geometric prior");
  train->add_flag("--global-conditioning", cfg.global_conditioning,
                  "Feed the expression code to every sample, not only the mouth region");
  train->add_option("--huber-rho", cfg.loss.huber_rho, "Huber threshold")->capture_default_str();
  train->add_option("--rays", cfg.rays_per_step, "Rays per step")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--buffer", cfg.buffer_size, "Frames held in the training buffer")->capture_default_str();
  train->add_option("--resample", cfg.resample_period, "Steps between buffer resamples")->capture_default_str();
  train->add_option("--split-last", cfg.holdout_last, "Exclude the last N frames from training")
      ->capture_default_str();
  train->add_option("--lr", cfg.adam.learning_rate, "Adam learning rate")->capture_default_str();
  train->add_option("--levels", cfg.field.grid.levels, "Hash grid levels")->capture_default_str();
  train->add_option("--table-log2", table_log2, "log2 of the hash table size per level")
      ->capture_default_str()
      ->check(CLI::Range(4u, 24u));
  train->add_option("--features", cfg.field.grid.features_per_entry, "Features per hash entry")
      ->capture_default_str();
  train->add_option("--base-res", cfg.field.grid.base_resolution, "Coarsest grid resolution")->capture_default_str();
  train->add_option("--finest-res", cfg.field.grid.finest_resolution, "Finest grid resolution")
      ->capture_default_str();
  train->add_option("--density-bias", cfg.field.density_bias_init, "Initial log-density bias")
      ->capture_default_str();
  train->add_option("--shell-width", shell_width,
                    "Keep occupancy cells within this distance of the meshes always set (0 disables)")
      ->capture_default_str();
  train->add_option("--occupancy-period", cfg.occupancy_period, "Steps between occupancy updates")
      ->capture_default_str();
  train->add_option("--occupancy-threshold", cfg.occupancy.threshold, "Density EMA above which a cell is occupied")
      ->capture_default_str();
  train->add_flag("--desk", "Defaults for a short CPU run on a small scene (other flags still override)");
  train->add_option("--threads", cfg.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--resume", resume_path, "Continue from this checkpoint");
  train->footer("Rays march with step sqrt(3)/1024 of the occupancy box diagonal.\n"
                "Adam: lr 2.5e-3, beta 0.9/0.99, eps 1e-15, parameter EMA 0.95.");

  // render
  auto* render = app.add_subcommand("render", "Render one frame of a scene with a trained field");
  std::string render_ckpt, render_scene, render_out;
  std::size_t render_frame = 0;
  double yaw = 0.0;
  bool render_global = false;
  unsigned render_threads = 1;
  render->add_option("--ckpt", render_ckpt, "Checkpoint")->required();
  render->add_option("--scene", render_scene, "Scene directory")->required();
  render->add_option("--frame", render_frame, "Frame index")->required();
  render->add_option("--out", render_out, "Output PNG")->required();
  render->add_option("--yaw-offset", yaw, "Rotate the camera about the vertical axis (degrees)")
      ->capture_default_str();
  std::string depth_out;
  render->add_option("--depth-out", depth_out, "Optional PFM of the rendered depth");
  render->add_flag("--global-conditioning", render_global, "Checkpoint was trained with global conditioning");
  render->add_option("--threads", render_threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  // eval
  auto* eval = app.add_subcommand("eval", "Photometric errors on held-out frames");
  std::string eval_ckpt, eval_scene;
  std::size_t split_last = 10;
  bool eval_global = false;
  unsigned eval_threads = 1;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval->add_option("--scene", eval_scene, "Scene directory")->required();
  eval->add_option("--split-last", split_last, "Evaluate on the last N frames")->capture_default_str();
  eval->add_flag("--global-conditioning", eval_global, "Checkpoint was trained with global conditioning");
  eval->add_option("--threads", eval_threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  // transfer-expression
  auto* transfer = app.add_subcommand("transfer-expression", "Retarget expression codes to another actor");
  std::string source_codes, source_neutral, target_neutral, transfer_out;
  transfer->add_option("--source-codes", source_codes, "JSON array of 16-value codes")->required();
  transfer->add_option("--source-neutral", source_neutral, "JSON array of 16 values")->required();
  transfer->add_option("--target-neutral", target_neutral, "JSON array of 16 values")->required();
  transfer->add_option("--out", transfer_out, "Output JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (gen->parsed()) {
      dnrf::generate_synthetic_scene(gen_out, scene);
    } else if (train->parsed()) {
      cfg.field.grid.table_size = 1u << table_log2;
      if (no_geom_prior) cfg.loss.lambda_geom = 0.0;
      cfg.occupancy_shell = shell_width > 0.0;
      cfg.shell_width = shell_width;
      const auto data = dnrf::load_scene(train_scene);
      dnrf::TrainState state = resume_path.empty()
                                   ? dnrf::init_train_state(*data, cfg)
                                   : dnrf::restore_train_state(dnrf::load_checkpoint(resume_path), cfg.adam);
      dnrf::train(*data, cfg, state, &std::cout);
      dnrf::save_checkpoint(dnrf::make_checkpoint(state), train_ckpt);
    } else if (render->parsed()) {
      const auto data = dnrf::load_scene(render_scene);
      if (render_frame >= data->size())
        dnrf::fail(ErrorKind::InvalidArgument, "frame " + std::to_string(render_frame) + " out of range");
      const Loaded l = load_for_rendering(render_ckpt);
      const auto img = dnrf::render_frame(*data, render_frame, l.field.view(l.params),
                                          l.grid ? &*l.grid : nullptr, yaw, render_global, render_threads);
      dnrf::write_png(render_out, dnrf::to_image(img));
      if (!depth_out.empty()) {
        dnrf::Image depth(img.width, img.height, 1);
        depth.data = img.depth;
        dnrf::write_pfm(depth_out, depth);
      }
    } else if (eval->parsed()) {
      const auto data = dnrf::load_scene(eval_scene);
      const Loaded l = load_for_rendering(eval_ckpt);
      const auto m = dnrf::evaluate_last(*data, split_last, l.field.view(l.params), l.grid ? &*l.grid : nullptr,
                                         eval_global, eval_threads);
      std::cout << "mse\t" << m.mse << "\npsnr\t" << m.psnr << "\nssim\t" << m.ssim << '\n';
    } else if (transfer->parsed()) {
      const auto codes = read_codes(source_codes);
      const auto out = dnrf::transfer_expression(codes, read_code(source_neutral), read_code(target_neutral));
      nlohmann::json j = nlohmann::json::array();
      for (const auto& c : out) j.push_back(c.values);
      std::ofstream f(transfer_out);
      if (!f) dnrf::fail(ErrorKind::IoFailure, "cannot write " + transfer_out);
      f << j.dump() << '\n';
    }
  } catch (const dnrf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
