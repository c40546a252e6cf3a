#pragma once

#include <array>
#include <vector>

#include "meshrecon/mesh.hpp"
#include "meshrecon/pose.hpp"
#include "meshrecon/tensor.hpp"

namespace meshrecon {

// Soft rasterization over NDC [-1,1]^2.  Pixel (row r, col c) of an HxW
// image has center (-1 + (c+0.5)*2/W, 1 - (r+0.5)*2/H): x right, y up, row 0
// at the top.  Depth uses +z toward the viewer (larger = nearer).
struct RenderConfig {
  int image_size = 64;
  double sigma = 1e-5;   // boundary sharpness of the per-face probability
  double gamma = 1e-4;   // depth-aggregation temperature (nearest face wins as it -> 0)
  double eps_bg = 1e-3;  // background score inside the depth softmax
  std::array<double, 3> background = {0.0, 0.0, 0.0};
};

// Probability that a pixel belongs to one projected face:
// sigmoid(sign * d^2 / sigma) with d the distance to the triangle boundary,
// sign +1 inside / -1 outside.  Exactly 0.5 on the boundary.  Degenerate
// (zero-area) triangles count as outside everywhere.
double face_probability(const std::array<double, 2>& pixel,
                        const std::array<std::array<double, 2>, 3>& tri, double sigma);

// Differentiable silhouette [H,W]: mask = 1 - prod_j (1 - D_j).  A face's
// influence is truncated to its bounding box dilated by 3*sqrt(sigma) (the
// dropped terms are below sigmoid(-9)); outside that the contribution is
// exactly zero.  Gradients flow to vertices and pose.
Var render_silhouette(const Var& vertices, const std::vector<std::array<std::size_t, 3>>& faces,
                      const PoseVars& pose, const RenderConfig& cfg);

struct RenderOutput {
  Var rgb;   // [3,H,W]
  Var mask;  // [H,W], same silhouette as render_silhouette
};

// Differentiable textured render.  Per pixel, face colors are blended with
// weights D_j * exp(zbar_j / gamma) normalized against the background score
// exp(eps_bg / gamma); zbar is the barycentric face depth normalized to
// [0,1] by the per-view min/max (1e-8 guard) and clamped there, since pixels
// outside a face extrapolate depth (saturated entries get no depth gradient,
// and faces with probability below 1e-12 are skipped).  Texture is [3,Ht,Wt], sampled
// bilinearly through the mesh's UV chart (u wraps, v clamps, v=1 is texture
// row 0).  Gradients flow to texture, vertices, and pose; the barycentric
// coordinates themselves are treated as constants w.r.t. geometry.
// `topology` supplies faces and the UV chart; its vertex positions are
// ignored in favor of `vertices`.
RenderOutput render_color(const Var& vertices, const Mesh& topology, const Var& texture,
                          const PoseVars& pose, const RenderConfig& cfg);

}  // namespace meshrecon
