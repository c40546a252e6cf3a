#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "meshrecon/mesh.hpp"
#include "meshrecon/pose.hpp"
#include "meshrecon/rng.hpp"
#include "meshrecon/tensor.hpp"

namespace meshrecon {

struct ModelConfig {
  int num_meanshapes = 2;    // bank size N
  int base_level = 3;        // icosphere level of the bank at initialization
  int texture_size = 32;     // decoded texture is [3,T,T]
  int image_feat = 256;      // encoder feature width (texture branch)
  int shape_feat = 64;       // projected feature width (shape/pose/selector branch)
  int deformer_hidden = 128;
  int encoder_side = 32;     // input images are resized to this square side
  double deformer_dropout = 0.2;
  double pose_dropout = 0.5;
};

// All trainable state.  The meanshape bank rows live in `tensors` under
// "bank.<i>" ([k,3] each); the face list / UV chart is derived from the level
// and never stored.  Everything else ("enc.*", "sel.*", "def.*", "pose.*",
// "tex.*") belongs to the heads, whose total size must stay constant across
// bank subdivision.
struct ModelParams {
  ModelConfig config;
  int bank_level = 3;
  Mesh topology;  // icosphere topology at bank_level (faces + uv chart)
  std::map<std::string, Tensor> tensors;

  std::size_t head_parameter_count() const;
  int bank_rows() const;  // vertex count of each bank entry
};

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed);

// Named parameter handles on one tape (ordering fixed by the map) plus helpers
// shared by the forward heads.
struct ParamVars {
  std::map<std::string, Var> vars;
  const Var& at(const std::string& name) const;
};
ParamVars watch_params(Tape& tape, const ModelParams& params);
ParamVars constant_params(const ModelParams& params);  // no-grad view

// Per-sample forward pieces.  Dropout draws from the counter stream under
// (k_epoch, k_sample, layer-salt), so a step can be replayed exactly.
struct Features {
  Var tex;    // [1, image_feat]
  Var shape;  // [1, shape_feat]
};
Features encode(const ParamVars& p, const ModelConfig& cfg, const Tensor& image,
                const Tensor& mask);

// softmax weights over the bank, shape [1, N]
Var select_shape(const ParamVars& p, const Var& shape_feat);

struct ShapePred {
  Var base;      // [k,3] selection-weighted meanshape
  Var delta;     // [k,3] predicted deformation
  Var vertices;  // base + delta
};
ShapePred predict_shape(const ParamVars& p, const ModelConfig& cfg, const Var& shape_feat,
                        const Var& select_weights, const CounterRng& rng, std::uint64_t k_epoch,
                        std::uint64_t k_sample, bool train);

struct PosePred {
  PoseVars pose;  // s {1} (positive via exp), t {2}, q {4} normalized
  Var q_raw;      // pre-normalization quaternion, for the unit-norm penalty
};
PosePred regress_pose(const ParamVars& p, const ModelConfig& cfg, const Var& shape_feat,
                      const CounterRng& rng, std::uint64_t k_epoch, std::uint64_t k_sample,
                      bool train);

Var decode_texture(const ParamVars& p, const ModelConfig& cfg, const Var& tex_feat);  // [3,T,T]

// In-place 1->4 subdivision of the bank (and topology).  Head tensors are
// untouched; optimizer state for the bank rows must be rebuilt by the caller
// using the returned plan.
SubdivisionPlan subdivide_bank(ModelParams& params);

// Binary checkpoint: magic "MCMR", version, level, bank size, then a named
// f64 tensor directory.  `extra` lets the trainer piggyback optimizer state
// and counters without the model knowing their meaning.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::map<std::string, Tensor>& extra = {});
struct Checkpoint {
  ModelParams params;
  std::map<std::string, Tensor> extra;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace meshrecon
