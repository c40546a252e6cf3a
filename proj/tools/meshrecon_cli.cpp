#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "meshrecon/image.hpp"
#include "meshrecon/losses.hpp"
#include "meshrecon/mesh.hpp"
#include "meshrecon/metrics.hpp"
#include "meshrecon/model.hpp"
#include "meshrecon/render.hpp"
#include "meshrecon/synthdata.hpp"
#include "meshrecon/trainer.hpp"

namespace fs = std::filesystem;
using namespace meshrecon;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_text(const std::string& path, const std::string& text) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f << text;
  }
  fs::rename(tmp, path);
}

int run_gen_data(const std::string& config_path, int classes, int samples, int size,
                 std::uint64_t seed, bool seed_set, const std::string& out) {
  DatasetConfig cfg = config_path.empty() ? default_dataset_config(classes)
                                          : dataset_config_from_json(read_text(config_path));
  if (samples > 0) cfg.samples_per_class = samples;
  if (size > 0) cfg.image_size = size;
  if (seed_set) cfg.seed = seed;
  generate_dataset(cfg, out);
  std::cout << "wrote " << cfg.classes.size() * cfg.samples_per_class << " samples to " << out
            << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& dataset, const std::string& out,
              bool resume, std::uint64_t seed, bool seed_set) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : train_config_from_file(config_path);
  if (seed_set) cfg.seed = seed;
  Trainer trainer(cfg, dataset, out);
  if (resume)
    trainer.resume();
  else
    trainer.init();
  trainer.run();
  std::cout << "checkpoint: " << trainer.checkpoint_path() << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& dataset, const std::string& split,
             int resolution, const std::string& out) {
  ModelParams params = load_checkpoint(checkpoint).params;
  EvalOptions opts;
  opts.split = split;
  opts.voxel_resolution = resolution;
  EvalReport rep = evaluate(params, dataset, opts);
  std::string json = rep.to_json();
  if (!out.empty()) write_text(out, json + "\n");
  std::cout << json << "\n";
  return 0;
}

int run_render(const std::string& checkpoint, const std::string& dataset, std::size_t index,
               const std::string& out, bool turntable, int resolution) {
  ModelParams params = load_checkpoint(checkpoint).params;
  auto entries = read_manifest(dataset);
  if (index >= entries.size())
    throw std::runtime_error("--index " + std::to_string(index) + " out of range (" +
                             std::to_string(entries.size()) + " samples)");
  LoadedSample s = load_sample(dataset, entries[index]);
  InferenceResult r = infer(params, s.image, s.mask);

  RenderConfig rc;
  rc.image_size = resolution > 0 ? resolution : static_cast<int>(s.mask.dim(0));
  fs::create_directories(out);
  Var verts{vertices_tensor(r.predicted)};
  Var tex{r.texture};

  auto emit = [&](const Pose& pose, const std::string& stem) {
    RenderOutput ro = render_color(verts, r.predicted, tex, constant_pose_vars(pose), rc);
    write_png(ro.rgb.value(), (fs::path(out) / (stem + ".png")).string());
    write_png(ro.mask.value(), (fs::path(out) / (stem + "_mask.png")).string());
  };
  emit(r.pose, "pred_cam");
  emit(s.pose, "gt_cam");

  if (turntable) {
    for (int step = 0; step < 6; ++step) {
      double deg = 60.0 * step;
      double half = deg * M_PI / 180.0 / 2.0;
      Pose p = s.pose;  // extra spin about the object's vertical axis
      p.q = quat_multiply(s.pose.q, Quat{std::cos(half), 0, std::sin(half), 0});
      char stem[32];
      std::snprintf(stem, sizeof stem, "turntable_%03d", static_cast<int>(deg));
      emit(p, stem);
    }
  }
  std::cout << "wrote renders to " << out << "\n";
  return 0;
}

int run_export_mesh(const std::string& checkpoint, const std::string& dataset, std::size_t index,
                    const std::string& out) {
  ModelParams params = load_checkpoint(checkpoint).params;
  auto entries = read_manifest(dataset);
  if (index >= entries.size())
    throw std::runtime_error("--index " + std::to_string(index) + " out of range (" +
                             std::to_string(entries.size()) + " samples)");
  LoadedSample s = load_sample(dataset, entries[index]);
  InferenceResult r = infer(params, s.image, s.mask);
  fs::create_directories(out);
  export_obj(r.base, (fs::path(out) / "meanshape.obj").string());
  export_obj(r.predicted, (fs::path(out) / "predicted.obj").string());
  std::cout << "wrote meanshape.obj and predicted.obj to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mesh reconstruction from image collections: data, training, evaluation"};
  app.require_subcommand(1);

  std::string config, dataset, checkpoint, out, split = "test";
  std::uint64_t seed = 0;
  bool seed_set = false, resume = false, turntable = false;
  int classes = 2, samples = -1, size = -1, resolution = -1;
  std::size_t index = 0;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "random seed")->each([&](const std::string&) { seed_set = true; });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config, "dataset config JSON");
  gen->add_option("--classes", classes, "built-in preset size (2 or 4)");
  gen->add_option("--samples", samples, "samples per class");
  gen->add_option("--size", size, "image side length");
  add_seed(gen);
  gen->add_option("--out", out, "output directory")->required();

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config, "train config JSON");
  train->add_option("--dataset", dataset, "dataset directory")->required();
  train->add_option("--out", out, "output directory")->required();
  train->add_flag("--resume", resume, "continue from <out>/checkpoint.mcmr");
  add_seed(train);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  eval_cmd->add_option("--dataset", dataset, "dataset directory")->required();
  eval_cmd->add_option("--split", split, "split to score (train/val/test/all)");
  eval_cmd->add_option("--resolution", resolution, "voxel grid resolution (default 32)");
  eval_cmd->add_option("--out", out, "write the JSON report here");

  CLI::App* render = app.add_subcommand("render", "render one sample's prediction");
  render->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  render->add_option("--dataset", dataset, "dataset directory")->required();
  render->add_option("--index", index, "manifest row to render");
  render->add_option("--resolution", resolution, "render size (default: dataset size)");
  render->add_flag("--turntable", turntable, "also render 60-degree azimuth steps");
  render->add_option("--out", out, "output directory")->required();

  CLI::App* exp = app.add_subcommand("export-mesh", "write meanshape and predicted OBJ");
  exp->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  exp->add_option("--dataset", dataset, "dataset directory")->required();
  exp->add_option("--index", index, "manifest row to reconstruct");
  exp->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_data(config, classes, samples, size, seed, seed_set, out);
    if (train->parsed()) return run_train(config, dataset, out, resume, seed, seed_set);
    if (eval_cmd->parsed())
      return run_eval(checkpoint, dataset, split, resolution > 0 ? resolution : 32, out);
    if (render->parsed()) return run_render(checkpoint, dataset, index, out, turntable, resolution);
    if (exp->parsed()) return run_export_mesh(checkpoint, dataset, index, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no command\n";
  return 1;
}
