#pragma once

#include <map>
#include <string>
#include <vector>

#include "meshrecon/mesh.hpp"
#include "meshrecon/model.hpp"
#include "meshrecon/pose.hpp"
#include "meshrecon/render.hpp"
#include "meshrecon/synthdata.hpp"
#include "meshrecon/tensor.hpp"

namespace meshrecon {

// Intersection over union of two masks binarized at 0.5.  Two empty masks
// agree perfectly, so that case is defined as 1.
double mask_iou(const Tensor& a, const Tensor& b);

// mean absolute difference over every entry
double l1_metric(const Tensor& a, const Tensor& b);

// SSIM on luma (BT.601 weights for RGB input), 11x11 Gaussian window with
// sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1; averaged over window
// positions that fit entirely inside the image.
double ssim_metric(const Tensor& a, const Tensor& b);

// Volumetric IoU on a resolution^3 occupancy grid.  Both meshes are mapped by
// ONE shared similarity transform -- centered on and scaled by the bounding
// sphere of the union -- so relative size and offset survive normalization.
// Occupancy comes from ray-parity tests along x at voxel-center rays.  Both
// meshes must be watertight.
double voxel_3d_iou(const Mesh& a, const Mesh& b, int resolution = 32);

// eval-mode forward pass of one sample (dropout off, nothing recorded)
struct InferenceResult {
  Mesh base;                    // selection-weighted meanshape
  Mesh predicted;               // base + deformation
  Pose pose;                    // predicted camera (unit quaternion)
  Tensor texture;               // [3,T,T]
  std::vector<double> weights;  // selection weights, length N
};
InferenceResult infer(const ModelParams& params, const Tensor& image, const Tensor& mask);

// Fraction of eval samples whose argmax selection, translated through the
// majority meanshape->class map built on the train split, matches the label.
// With fewer meanshapes than classes the map direction flips (classes sharing
// a meanshape merge into one scoring class) and a warning goes to stderr.
double selection_accuracy(const ModelParams& params, const std::string& dataset_dir,
                          const std::vector<ManifestEntry>& train_split,
                          const std::vector<ManifestEntry>& eval_split);

struct EvalOptions {
  std::string split = "test";
  int voxel_resolution = 32;
  bool voxel_iou = true;  // the expensive metric, separately toggleable
  RenderConfig render;    // image_size is taken from each sample
};

struct EvalReport {
  std::string split;
  int count = 0;
  double mask_iou_pred_cam = 0;  // silhouette rendered under the predicted camera
  double mask_iou_gt_cam = 0;    // ... under the ground-truth camera
  double l1 = 0;
  double ssim = 0;
  double voxel_3d_iou = 0;
  double selection_accuracy = 0;
  std::map<std::string, double> per_class_mask_iou;  // GT-cam, keyed by label
  std::string to_json() const;                       // carries "fid": null (not computable here)
};

EvalReport evaluate(const ModelParams& params, const std::string& dataset_dir,
                    const EvalOptions& opts = {});

}  // namespace meshrecon
