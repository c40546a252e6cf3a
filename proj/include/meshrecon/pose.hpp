#pragma once

#include <array>
#include <vector>

#include "meshrecon/tensor.hpp"

namespace meshrecon {

// Hamilton-convention quaternion (w + xi + yj + zk).  q and -q encode the
// same rotation; everything downstream must treat them as equal.
struct Quat {
  double w = 1, x = 0, y = 0, z = 0;
};

Quat quat_multiply(const Quat& a, const Quat& b);
Quat quat_normalize(const Quat& q);  // near-zero input is an error
double quat_dot(const Quat& a, const Quat& b);
// rotation matrix of a unit quaternion (unit within 1e-6, else error)
std::array<std::array<double, 3>, 3> quat_to_matrix(const Quat& q);

// Weak-perspective camera: p = s * (R(q) v)_xy + t, depth = (R(q) v)_z.
// +z points toward the viewer, so larger depth means nearer.
struct Pose {
  double s = 1.0;
  std::array<double, 2> t = {0, 0};
  Quat q;
};

// manifest layout: [s, tx, ty, qw, qx, qy, qz]
std::array<double, 7> pose_to_array(const Pose& p);
Pose pose_from_array(const std::array<double, 7>& a);

// The symmetry-augmentation partner of a pose: the object spun half a turn
// about the camera's vertical axis, with the horizontal translation mirrored.
// Applying it twice restores the original rotation (up to quaternion sign).
Pose rotate_pose_y180(const Pose& p);

// plain projection for data generation and hard rasterization
std::vector<std::array<double, 3>> project_points(const Pose& pose,
                                                  const std::vector<std::array<double, 3>>& verts);

// Differentiable pose: s {1}, t {2}, q {4}.  q need not be pre-normalized;
// the projection normalizes it on tape (gradients include that step).
struct PoseVars {
  Var s, t, q;
};

PoseVars constant_pose_vars(const Pose& p);

struct Projected {
  Var xy;     // [k,2] image-plane coordinates in NDC [-1,1]
  Var depth;  // [k] rotated z, larger = nearer
};

// differentiable weak-perspective projection of [k,3] vertices; s must be
// positive and q must not be near zero
Projected project_weak_perspective(const Var& vertices, const PoseVars& pose);

}  // namespace meshrecon
