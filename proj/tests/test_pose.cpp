#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "meshrecon/pose.hpp"
#include "meshrecon/rng.hpp"

using namespace meshrecon;

namespace {

std::array<double, 3> apply(const std::array<std::array<double, 3>, 3>& m,
                            const std::array<double, 3>& v) {
  std::array<double, 3> r;
  for (int i = 0; i < 3; ++i) r[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
  return r;
}

Quat rand_quat(const CounterRng& rng, std::uint64_t trial) {
  Quat q;
  q.w = rng.uniform_in(-1, 1, 1, trial, 0);
  q.x = rng.uniform_in(-1, 1, 1, trial, 1);
  q.y = rng.uniform_in(-1, 1, 1, trial, 2);
  q.z = rng.uniform_in(-1, 1, 1, trial, 3);
  return q;
}

}  // namespace

TEST_CASE("quaternion basics") {
  auto id = quat_to_matrix(Quat{});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(id[i][j] == doctest::Approx(i == j ? 1 : 0).epsilon(1e-15));

  // Hamilton product: i * j = k
  Quat k = quat_multiply(Quat{0, 1, 0, 0}, Quat{0, 0, 1, 0});
  CHECK(k.w == doctest::Approx(0.0));
  CHECK(k.x == doctest::Approx(0.0));
  CHECK(k.y == doctest::Approx(0.0));
  CHECK(k.z == doctest::Approx(1.0));
  // and j * i = -k (non-commutative)
  Quat nk = quat_multiply(Quat{0, 0, 1, 0}, Quat{0, 1, 0, 0});
  CHECK(nk.z == doctest::Approx(-1.0));

  CHECK(quat_dot(Quat{1, 2, 3, 4}, Quat{5, 6, 7, 8}) == doctest::Approx(70.0));
  CHECK_THROWS(quat_normalize(Quat{0, 0, 0, 0}));
  CHECK_THROWS(quat_to_matrix(Quat{2, 0, 0, 0}));  // not unit
}

TEST_CASE("double cover: q and -q give the same matrix") {
  CounterRng rng(11);
  for (std::uint64_t t = 0; t < 50; ++t) {
    Quat q = quat_normalize(rand_quat(rng, t));
    auto a = quat_to_matrix(q);
    auto b = quat_to_matrix(Quat{-q.w, -q.x, -q.y, -q.z});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(a[i][j] == doctest::Approx(b[i][j]).epsilon(1e-14));
  }
}

TEST_CASE("90 degree rotation about +y") {
  double c = std::cos(M_PI / 4), s = std::sin(M_PI / 4);
  auto m = quat_to_matrix(Quat{c, 0, s, 0});
  auto r = apply(m, {1, 0, 0});
  CHECK(r[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r[2] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("quat_to_matrix(quat_normalize(q)) is a rotation for 1000 random q") {
  CounterRng rng(12);
  for (std::uint64_t t = 0; t < 1000; ++t) {
    Quat q = rand_quat(rng, t);
    if (std::fabs(q.w) + std::fabs(q.x) + std::fabs(q.y) + std::fabs(q.z) < 1e-6) continue;
    auto m = quat_to_matrix(quat_normalize(q));
    // orthonormal rows
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
        CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-9));
      }
    double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                 m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                 m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    CHECK(det == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("pose array round trip") {
  Pose p;
  p.s = 1.7;
  p.t = {0.2, -0.4};
  p.q = quat_normalize(Quat{0.9, 0.1, -0.3, 0.2});
  auto a = pose_to_array(p);
  CHECK(a[0] == p.s);
  CHECK(a[3] == p.q.w);
  Pose back = pose_from_array(a);
  CHECK(back.s == p.s);
  CHECK(back.t == p.t);
  CHECK(back.q.z == p.q.z);
}

TEST_CASE("projection arithmetic") {
  Pose id;
  auto r = project_points(id, {{0.3, -0.7, 0.9}});
  CHECK(r[0][0] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(r[0][1] == doctest::Approx(-0.7).epsilon(1e-15));
  CHECK(r[0][2] == doctest::Approx(0.9).epsilon(1e-15));

  Pose p;
  p.s = 2.0;
  p.t = {0.5, -0.5};
  auto q = project_points(p, {{1, 2, 3}});
  CHECK(q[0][0] == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(q[0][1] == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(q[0][2] == doctest::Approx(3.0).epsilon(1e-15));

  // doubling s doubles centered coordinates
  Pose s1, s2;
  s1.s = 1.3;
  s2.s = 2.6;
  auto a1 = project_points(s1, {{0.4, 0.2, -0.1}});
  auto a2 = project_points(s2, {{0.4, 0.2, -0.1}});
  CHECK(a2[0][0] == doctest::Approx(2 * a1[0][0]).epsilon(1e-12));
  CHECK(a2[0][1] == doctest::Approx(2 * a1[0][1]).epsilon(1e-12));
}

TEST_CASE("differentiable projection agrees with project_points") {
  Pose p;
  p.s = 1.4;
  p.t = {0.1, 0.25};
  p.q = quat_normalize(Quat{0.8, 0.2, -0.5, 0.1});
  std::vector<std::array<double, 3>> pts = {{0.3, 0.1, -0.4}, {-0.2, 0.8, 0.5}};
  auto plain = project_points(p, pts);

  Tensor v({2, 3}, {0.3, 0.1, -0.4, -0.2, 0.8, 0.5});
  Projected proj = project_weak_perspective(Var(v), constant_pose_vars(p));
  for (int i = 0; i < 2; ++i) {
    CHECK(proj.xy.value().at(i, 0) == doctest::Approx(plain[i][0]).epsilon(1e-12));
    CHECK(proj.xy.value().at(i, 1) == doctest::Approx(plain[i][1]).epsilon(1e-12));
    CHECK(proj.depth.value()[i] == doctest::Approx(plain[i][2]).epsilon(1e-12));
  }
}

TEST_CASE("projection gradients match finite differences") {
  Tensor v0({3, 3}, {0.3, 0.1, -0.4, -0.2, 0.8, 0.5, 0.9, -0.6, 0.2});
  Tensor s0 = Tensor::scalar(1.4);
  Tensor t0({2}, {0.1, -0.3});
  Tensor q0({4}, {0.8, 0.2, -0.5, 0.1});  // normalized on tape by the projection

  auto f = [](Tape&, const std::vector<Var>& in) {
    PoseVars pv{in[1], in[2], in[3]};
    Projected pr = project_weak_perspective(in[0], pv);
    // exercise both outputs with uneven weights so no gradient path cancels
    return add(sum(mul(pr.xy, pr.xy)), sum(mul(pr.depth, add_scalar(pr.depth, 0.7))));
  };
  FdiffReport rep = finite_difference_check_many(f, {v0, s0, t0, q0});
  CAPTURE(rep.worst_param);
  CAPTURE(rep.worst_coord);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("rotate_pose_y180") {
  Pose id;
  Pose r = rotate_pose_y180(id);
  auto m = quat_to_matrix(quat_normalize(r.q));
  auto flipped = apply(m, {1, 0, 0});
  CHECK(flipped[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(flipped[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(flipped[2] == doctest::Approx(0.0).epsilon(1e-12));

  Pose p;
  p.s = 1.2;
  p.t = {0.3, 0.1};
  p.q = quat_normalize(Quat{0.7, 0.3, -0.2, 0.6});
  Pose once = rotate_pose_y180(p);
  CHECK(once.t[0] == doctest::Approx(-0.3).epsilon(1e-15));
  CHECK(once.t[1] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(once.s == p.s);

  // involution at the rotation-matrix level (quaternion may flip sign)
  Pose twice = rotate_pose_y180(once);
  auto ma = quat_to_matrix(quat_normalize(p.q));
  auto mb = quat_to_matrix(quat_normalize(twice.q));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(ma[i][j] == doctest::Approx(mb[i][j]).epsilon(1e-12));
  CHECK(twice.t[0] == doctest::Approx(p.t[0]).epsilon(1e-15));
}

TEST_CASE("projection rejects invalid pose parameters") {
  Tensor v({1, 3}, {0, 0, 1});
  Pose p;
  PoseVars pv = constant_pose_vars(p);
  pv.s = Var(Tensor::scalar(-1.0));
  CHECK_THROWS(project_weak_perspective(Var(v), pv));
  pv = constant_pose_vars(p);
  pv.q = Var(Tensor({4}, {0, 0, 0, 0}));
  CHECK_THROWS(project_weak_perspective(Var(v), pv));
}
