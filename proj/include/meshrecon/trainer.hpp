#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "meshrecon/losses.hpp"
#include "meshrecon/model.hpp"
#include "meshrecon/render.hpp"
#include "meshrecon/synthdata.hpp"

namespace meshrecon {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 4;
  double lr = 1e-4;
  double lr_after_subdivision = 1e-5;
  int subdivision_epoch = -1;  // -1 resolves to round(0.7 * epochs)
  bool subdivide = true;       // when false the lr schedule still applies, the bank stays put
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double grad_clip = 10.0;  // global-norm ceiling; 0 disables
  double augment_prob = 0.5;
  LossWeights weights;
  ModelConfig model;
  RenderConfig render;  // image_size here is the training render size
  std::uint64_t seed = 0;
  int checkpoint_every = 25;   // epochs between checkpoint saves
  std::string split = "train";  // manifest split to optimize on ("all" = every row)

  int resolved_subdivision_epoch() const;
  void validate() const;
};

// JSON text -> config; unknown keys are an error (typos must not pass silently)
TrainConfig train_config_from_json(const std::string& text);
TrainConfig train_config_from_file(const std::string& path);

struct AdamState {
  std::map<std::string, Tensor> m, v;
  long step = 0;
};

// Standard bias-corrected Adam over the named parameter set.  Missing
// gradients count as zero (moments still decay); non-finite gradients are an
// error naming the offending parameter.
void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps);

// sqrt of the summed squared entries across all gradients
double global_grad_norm(const std::map<std::string, Tensor>& grads);

class Trainer {
public:
  // Loads the manifest and decodes every sample of the configured split up
  // front (the corpora are small); label fields never cross into this class.
  Trainer(TrainConfig cfg, const std::string& dataset_dir, const std::string& out_dir);

  // fresh start (epoch 0) or resume from <out>/checkpoint.mcmr
  void init();
  void resume();

  // One optimizer step on the given sample indices; `epoch` and
  // `step_in_epoch` key every random draw, so a replay is bit-identical.
  LossReport train_step(const std::vector<std::size_t>& batch, int epoch, int step_in_epoch);

  // full loop: shuffles, steps, logs CSV, subdivides on schedule, checkpoints
  void run();

  const ModelParams& params() const { return params_; }
  const TrainConfig& config() const { return cfg_; }
  int next_epoch() const { return next_epoch_; }
  std::size_t sample_count() const { return samples_.size(); }
  std::string checkpoint_path() const;

  // exposed for the subdivision-schedule tests
  void subdivide_now();

private:
  void save(int next_epoch);
  void rebuild_laplacian();
  double lr_for_epoch(int epoch) const;

  TrainConfig cfg_;
  std::string out_dir_;
  std::vector<TrainSample> samples_;
  ModelParams params_;
  AdamState adam_;
  SparseMatrix lap_;
  CounterRng rng_;
  int next_epoch_ = 0;
  bool initialized_ = false;
};

}  // namespace meshrecon
