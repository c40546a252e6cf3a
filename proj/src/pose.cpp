#include "meshrecon/pose.hpp"

#include <cmath>
#include <stdexcept>

namespace meshrecon {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

double quat_norm(const Quat& q) {
  return std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
}

}  // namespace

Quat quat_multiply(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quat quat_normalize(const Quat& q) {
  double n = quat_norm(q);
  if (n < 1e-8) fail("quat_normalize", "near-zero quaternion has no direction");
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

double quat_dot(const Quat& a, const Quat& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

std::array<std::array<double, 3>, 3> quat_to_matrix(const Quat& q) {
  if (std::fabs(quat_norm(q) - 1.0) > 1e-6)
    fail("quat_to_matrix", "expected a unit quaternion, |q| deviates by more than 1e-6");
  double w = q.w, x = q.x, y = q.y, z = q.z;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

std::array<double, 7> pose_to_array(const Pose& p) {
  return {p.s, p.t[0], p.t[1], p.q.w, p.q.x, p.q.y, p.q.z};
}

Pose pose_from_array(const std::array<double, 7>& a) {
  Pose p;
  p.s = a[0];
  p.t = {a[1], a[2]};
  p.q = {a[3], a[4], a[5], a[6]};
  return p;
}

Pose rotate_pose_y180(const Pose& p) {
  const Quat y180{0, 0, 1, 0};
  Pose out = p;
  out.q = quat_multiply(y180, p.q);
  out.t[0] = -p.t[0];
  return out;
}

std::vector<std::array<double, 3>> project_points(const Pose& pose,
                                                  const std::vector<std::array<double, 3>>& verts) {
  if (pose.s <= 0) fail("project_points", "scale must be positive");
  auto R = quat_to_matrix(quat_normalize(pose.q));
  std::vector<std::array<double, 3>> out;
  out.reserve(verts.size());
  for (const auto& v : verts) {
    double rx = R[0][0] * v[0] + R[0][1] * v[1] + R[0][2] * v[2];
    double ry = R[1][0] * v[0] + R[1][1] * v[1] + R[1][2] * v[2];
    double rz = R[2][0] * v[0] + R[2][1] * v[1] + R[2][2] * v[2];
    out.push_back({pose.s * rx + pose.t[0], pose.s * ry + pose.t[1], rz});
  }
  return out;
}

PoseVars constant_pose_vars(const Pose& p) {
  PoseVars pv;
  pv.s = Var(Tensor::scalar(p.s));
  pv.t = Var(Tensor({2}, {p.t[0], p.t[1]}));
  pv.q = Var(Tensor({4}, {p.q.w, p.q.x, p.q.y, p.q.z}));
  return pv;
}

Projected project_weak_perspective(const Var& vertices, const PoseVars& pose) {
  const Tensor& vv = vertices.value();
  if (vv.ndim() != 2 || vv.cols() != 3)
    fail("project_weak_perspective", "expected [k,3] vertices, got " + shape_str(vv.shape()));
  if (pose.s.value().numel() != 1 || pose.t.value().numel() != 2 || pose.q.value().numel() != 4)
    fail("project_weak_perspective", "pose components must have shapes [1], [2], [4]");
  if (pose.s.value()[0] <= 0) fail("project_weak_perspective", "scale must be positive");
  std::size_t k = vv.rows();

  // normalize the quaternion on tape so its gradient respects the constraint
  Var n = sqrt(sum(mul(pose.q, pose.q)));
  if (n.value()[0] < 1e-8) fail("project_weak_perspective", "near-zero quaternion");
  Var qn = scale_by(pose.q, pow(n, -1.0));

  Var w = gather_rows(qn, {0}), x = gather_rows(qn, {1});
  Var y = gather_rows(qn, {2}), z = gather_rows(qn, {3});
  Var xx = mul(x, x), yy = mul(y, y), zz = mul(z, z);
  Var xy = mul(x, y), xz = mul(x, z), yz = mul(y, z);
  Var wx = mul(w, x), wy = mul(w, y), wz = mul(w, z);
  auto one_minus2 = [](const Var& a, const Var& b) {
    return add_scalar(mul_scalar(add(a, b), -2.0), 1.0);
  };
  auto two = [](const Var& a, const Var& b, double sgn) {
    return mul_scalar(sgn > 0 ? add(a, b) : sub(a, b), 2.0);
  };
  Var R = reshape(concat({one_minus2(yy, zz), two(xy, wz, -1), two(xz, wy, +1),
                          two(xy, wz, +1), one_minus2(xx, zz), two(yz, wx, -1),
                          two(xz, wy, -1), two(yz, wx, +1), one_minus2(xx, yy)},
                         0),
                  {3, 3});

  Var rotated = matmul(vertices, transpose2d(R));  // row i = R * v_i
  Var rotT = transpose2d(rotated);                 // [3,k]
  Var img = transpose2d(gather_rows(rotT, {0, 1}));  // [k,2]
  Projected out;
  out.xy = bias_add(scale_by(img, pose.s), pose.t);
  out.depth = reshape(gather_rows(rotT, {2}), {k});
  return out;
}

}  // namespace meshrecon
