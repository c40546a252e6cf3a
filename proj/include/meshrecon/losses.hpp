#pragma once

#include <string>

#include "meshrecon/mesh.hpp"
#include "meshrecon/pose.hpp"
#include "meshrecon/tensor.hpp"

namespace meshrecon {

// lambda_1 .. lambda_9, the weighted composition of the training objective.
// The ninth slot (perceptual term) is carried in the config and the report but
// always contributes zero here; see README "Design notes".
struct LossWeights {
  double mask = 100.0;
  double smooth_mesh = 6.0;    // Laplacian smoothness of the deformed shape
  double smooth_deform = 1.8;  // Laplacian smoothness of the deformation field
  double deform = 0.05;
  double pose = 20.0;
  double quat = 2.0;
  double color = 0.03;
  double style = 0.05;
  double percept = 0.8;  // reserved slot, multiplies a hard zero
  void validate() const;  // non-negative, all of them
};

struct LossTerms {
  Var mask, smooth_mesh, smooth_deform, deform, pose, quat, color, style;  // unweighted
};

struct LossReport {
  double mask = 0, smooth_mesh = 0, smooth_deform = 0, deform = 0, pose = 0, quat = 0, color = 0,
         style = 0, percept = 0, total = 0;
  static std::string csv_header();       // "step,mask,...,total"
  std::string csv_row(long step) const;  // one log line per optimizer step
};

// unit-normalize a {4} quaternion on tape (norm below 1e-8 is an error)
Var quat_normalize_var(const Var& q);

// mean over pixels of (predicted - target)^2; shapes must match
Var mask_loss(const Var& pred, const Tensor& target);

// mean over vertices of ||(L X)_i||_2
Var smooth_loss(const SparseMatrix& lap, const Var& x);

// mean over vertices of ||delta_i||_2
Var deformation_reg(const Var& delta);

// (s_hat - s)^2 + ||t_hat - t||^2 + (1 - |<q, q_hat>|); both quaternions must
// be unit within 1e-6 (the absolute inner product makes q and -q equivalent)
Var pose_loss(const PoseVars& pred, const Pose& gt);

// (||q||^2 - 1)^2 on the raw head output
Var quat_unit_penalty(const Var& q_raw);

// [3,H,W] sRGB in [0,1] -> [3,H,W] CIELAB (D65), differentiable everywhere
// with the cube-root branch guarded at t = 0.008856
Var rgb_to_lab(const Var& rgb);

// Mean squared LAB difference between the prediction and the masked target,
// over pixels where mask > 0.5 (zero when the mask is empty): color compares
// the AB chroma channels, style the L channel.
Var color_loss(const Var& pred_rgb, const Tensor& image, const Tensor& mask);
Var style_loss(const Var& pred_rgb, const Tensor& image, const Tensor& mask);

// weighted sum; fills the report (term values and total) when given
Var total_loss(const LossTerms& terms, const LossWeights& w, LossReport* report = nullptr);

// What the optimizer sees: images, masks, poses -- never class labels.  The
// separation is structural, not a convention.
struct TrainSample {
  Tensor image;  // [3,H,W]
  Tensor mask;   // [H,W]
  Pose pose;
};

// the mirror-consistency augmentation: flip the image and mask left-right and
// spin the pose half a turn about the vertical axis; apply=false is identity
TrainSample symmetry_augment(const TrainSample& s, bool apply);

}  // namespace meshrecon
