#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "meshrecon/image.hpp"
#include "meshrecon/mesh.hpp"
#include "meshrecon/render.hpp"
#include "meshrecon/rng.hpp"

using namespace meshrecon;
namespace fs = std::filesystem;

namespace {

// the scene used across the hard-vs-soft comparisons
Mesh front_triangle() {
  Mesh m;
  m.vertices = {{-0.6, -0.5, 0.0}, {0.7, -0.4, 0.0}, {0.0, 0.8, 0.0}};
  m.faces = {{0, 1, 2}};
  m.uv = {{0.25, 0.25}, {0.75, 0.25}, {0.5, 0.75}};
  m.uv_faces = {{0, 1, 2}};
  return m;
}

double point_in_tri(const std::array<double, 2>& p, const std::array<std::array<double, 2>, 3>& t) {
  auto cross = [](const std::array<double, 2>& a, const std::array<double, 2>& b,
                  const std::array<double, 2>& c) {
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
  };
  double c0 = cross(t[0], t[1], p), c1 = cross(t[1], t[2], p), c2 = cross(t[2], t[0], p);
  bool pos = c0 > 0 || c1 > 0 || c2 > 0, neg = c0 < 0 || c1 < 0 || c2 < 0;
  return (pos && neg) ? 0.0 : 1.0;
}

Tensor hard_mask(const Mesh& m, const Pose& pose, int size) {
  auto pts = project_points(pose, m.vertices);
  Tensor out({(std::size_t)size, (std::size_t)size});
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      std::array<double, 2> px = {-1.0 + (c + 0.5) * 2.0 / size, 1.0 - (r + 0.5) * 2.0 / size};
      double v = 0;
      for (const auto& f : m.faces) {
        std::array<std::array<double, 2>, 3> tri = {{{pts[f[0]][0], pts[f[0]][1]},
                                                     {pts[f[1]][0], pts[f[1]][1]},
                                                     {pts[f[2]][0], pts[f[2]][1]}}};
        if (point_in_tri(px, tri) > 0.5) {
          v = 1;
          break;
        }
      }
      out.at(r, c) = v;
    }
  return out;
}

double mask_iou_plain(const Tensor& a, const Tensor& b) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    bool x = a[i] > 0.5, y = b[i] > 0.5;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : inter / uni;
}

}  // namespace

TEST_CASE("face_probability pinned values") {
  std::array<std::array<double, 2>, 3> tri = {{{-0.5, -0.5}, {0.5, -0.5}, {0.0, 0.5}}};
  double sigma = 1e-2;
  // on the bottom edge: exactly 0.5
  CHECK(face_probability({0.0, -0.5}, tri, sigma) == doctest::Approx(0.5).epsilon(1e-12));
  // inside at squared distance == sigma: sigmoid(1)
  double d = std::sqrt(sigma);
  CHECK(face_probability({0.0, -0.5 + d}, tri, sigma) ==
        doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-9));
  // far outside: ~0; deep inside: ~1
  CHECK(face_probability({5.0, 5.0}, tri, sigma) < 1e-12);
  CHECK(face_probability({0.0, -0.1}, tri, 1e-5) > 1 - 1e-9);
  // degenerate triangle counts as outside even at its own vertices
  std::array<std::array<double, 2>, 3> degen = {{{0, 0}, {1, 0}, {2, 0}}};
  CHECK(face_probability({0.5, 0.0}, degen, sigma) <= 0.5);
  CHECK(face_probability({0.5, 1.0}, degen, sigma) < 0.5);
}

TEST_CASE("face_probability decreases with distance outside") {
  std::array<std::array<double, 2>, 3> tri = {{{-0.5, -0.5}, {0.5, -0.5}, {0.0, 0.5}}};
  double prev = 0.5;
  for (int i = 1; i <= 20; ++i) {
    double p = face_probability({0.0, -0.5 - 0.05 * i}, tri, 1e-2);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("silhouette of an empty face list is zero") {
  RenderConfig rc;
  rc.image_size = 16;
  Var mask = render_silhouette(Var(Tensor({1, 3}, {0, 0, 0})), {}, constant_pose_vars(Pose{}), rc);
  CHECK(mask.value().rows() == 16);
  for (std::size_t i = 0; i < mask.value().numel(); ++i) CHECK(mask.value()[i] == 0.0);
}

TEST_CASE("sphere silhouette area matches the analytic disc") {
  Mesh sph = icosphere(4);
  RenderConfig rc;
  rc.image_size = 64;
  rc.sigma = 1e-6;
  Pose pose;
  pose.s = 0.8;  // radius in NDC
  Var mask =
      render_silhouette(Var(vertices_tensor(sph)), sph.faces, constant_pose_vars(pose), rc);
  double total = 0;
  for (std::size_t i = 0; i < mask.value().numel(); ++i) total += mask.value()[i];
  double r_px = pose.s * rc.image_size / 2.0;  // NDC radius -> pixels
  double want = M_PI * r_px * r_px;
  CHECK(total / want > 0.95);
  CHECK(total / want < 1.05);
}

TEST_CASE("mask range: strictly inside (0,1) where a face is near, 0 elsewhere") {
  Mesh tri = front_triangle();
  RenderConfig rc;
  rc.image_size = 32;
  rc.sigma = 1e-4;
  Var mask =
      render_silhouette(Var(vertices_tensor(tri)), tri.faces, constant_pose_vars(Pose{}), rc);
  bool saw_zero = false, saw_mid = false;
  for (std::size_t i = 0; i < mask.value().numel(); ++i) {
    double v = mask.value()[i];
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);  // deep-interior sigmoids round to 1.0 in doubles
    saw_zero |= v == 0.0;  // truncation far from the face
    saw_mid |= v > 0.2 && v < 0.8;
  }
  CHECK(saw_zero);
  CHECK(saw_mid);
}

TEST_CASE("adding a face never decreases a mask pixel") {
  Mesh one = front_triangle();
  Mesh two = one;
  two.vertices.push_back({0.9, 0.9, 0.1});
  two.vertices.push_back({0.2, 0.9, 0.1});
  two.vertices.push_back({0.9, 0.2, 0.1});
  two.faces.push_back({3, 4, 5});
  RenderConfig rc;
  rc.image_size = 24;
  rc.sigma = 1e-3;
  Var a = render_silhouette(Var(vertices_tensor(one)), one.faces, constant_pose_vars(Pose{}), rc);
  Var b = render_silhouette(Var(vertices_tensor(two)), two.faces, constant_pose_vars(Pose{}), rc);
  for (std::size_t i = 0; i < a.value().numel(); ++i)
    CHECK(b.value()[i] >= a.value()[i] - 1e-15);
}

TEST_CASE("soft mask converges to the hard rasterization as sigma shrinks") {
  Mesh sph = icosphere(2);
  Pose pose;
  pose.s = 0.7;
  Tensor hard = hard_mask(sph, pose, 48);
  RenderConfig rc;
  rc.image_size = 48;
  double prev = 0;
  for (double sigma : {1e-3, 1e-4, 1e-5, 1e-6}) {
    rc.sigma = sigma;
    Var soft =
        render_silhouette(Var(vertices_tensor(sph)), sph.faces, constant_pose_vars(pose), rc);
    double iou = mask_iou_plain(soft.value(), hard);
    CHECK(iou >= prev - 1e-12);
    prev = iou;
  }
  CHECK(prev > 0.97);
}

TEST_CASE("silhouette gradients match finite differences") {
  Mesh tri = front_triangle();
  RenderConfig rc;
  rc.image_size = 12;
  rc.sigma = 1e-2;  // smooth enough for stable central differences
  Tensor v0 = vertices_tensor(tri);
  Tensor s0 = Tensor::scalar(1.1);
  Tensor t0({2}, {0.05, -0.1});
  Tensor q0({4}, {0.95, 0.1, 0.2, -0.1});
  auto f = [&tri, &rc](Tape&, const std::vector<Var>& in) {
    PoseVars pv{in[1], in[2], in[3]};
    return sum(render_silhouette(in[0], tri.faces, pv, rc));
  };
  FdiffReport rep = finite_difference_check_many(f, {v0, s0, t0, q0}, 1e-5);
  CAPTURE(rep.worst_param);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("render_color: single red triangle fills its interior") {
  Mesh tri = front_triangle();
  RenderConfig rc;
  rc.image_size = 16;
  rc.sigma = 1e-5;
  Tensor tex({3, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) tex[i] = 1.0;  // red channel block
  RenderOutput out =
      render_color(Var(vertices_tensor(tri)), tri, Var(tex), constant_pose_vars(Pose{}), rc);
  REQUIRE(out.rgb.value().shape() == Shape{3, 16, 16});
  // centroid pixel: solidly interior
  std::size_t r = 8, c = 8;
  CHECK(out.rgb.value()[(0 * 16 + r) * 16 + c] > 0.98);
  CHECK(out.rgb.value()[(1 * 16 + r) * 16 + c] < 0.02);
  CHECK(out.mask.value().at(r, c) > 0.98);
  // far corner: background (black)
  CHECK(out.rgb.value()[0] < 0.02);
  for (std::size_t i = 0; i < out.rgb.value().numel(); ++i) {
    CHECK(out.rgb.value()[i] >= 0.0);
    CHECK(out.rgb.value()[i] <= 1.0);
  }
}

TEST_CASE("aggregation weights sum to one: white scene on white background") {
  // with every color source equal to 1, any convex combination is exactly 1,
  // so a deviation would expose weights not summing to unity
  Mesh sph = icosphere(2);
  RenderConfig rc;
  rc.image_size = 20;
  rc.sigma = 1e-4;
  rc.background = {1.0, 1.0, 1.0};
  Tensor tex = Tensor::full({3, 8, 8}, 1.0);
  Pose pose;
  pose.s = 0.6;
  RenderOutput out =
      render_color(Var(vertices_tensor(sph)), sph, Var(tex), constant_pose_vars(pose), rc);
  for (std::size_t i = 0; i < out.rgb.value().numel(); ++i)
    CHECK(std::fabs(out.rgb.value()[i] - 1.0) < 1e-9);
}

TEST_CASE("depth ordering: near face wins as gamma -> 0") {
  Mesh m;
  m.vertices = {{-0.8, -0.8, 0.5}, {0.8, -0.8, 0.5}, {0.0, 0.8, 0.5},    // near (z toward viewer)
                {-0.8, -0.8, -0.5}, {0.8, -0.8, -0.5}, {0.0, 0.8, -0.5}};  // far
  m.faces = {{0, 1, 2}, {3, 4, 5}};
  m.uv = {{0.2, 0.2}, {0.4, 0.2}, {0.3, 0.4}, {0.7, 0.7}, {0.9, 0.7}, {0.8, 0.9}};
  m.uv_faces = {{0, 1, 2}, {3, 4, 5}};
  Tensor tex({3, 8, 8});
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      bool left = c < 4;                       // near face samples u<0.5 -> red
      tex[(0 * 8 + r) * 8 + c] = left ? 1.0 : 0.0;
      tex[(2 * 8 + r) * 8 + c] = left ? 0.0 : 1.0;  // far face -> blue
    }
  RenderConfig rc;
  rc.image_size = 16;
  rc.sigma = 1e-5;
  rc.gamma = 1e-5;
  RenderOutput out =
      render_color(Var(vertices_tensor(m)), m, Var(tex), constant_pose_vars(Pose{}), rc);
  std::size_t r = 8, c = 8;  // overlap region pixel
  CHECK(out.rgb.value()[(0 * 16 + r) * 16 + c] > 0.95);  // red shows
  CHECK(out.rgb.value()[(2 * 16 + r) * 16 + c] < 0.05);  // blue hidden
}

TEST_CASE("render_color gradients: exact for mask geometry and texels") {
  Mesh tri = front_triangle();
  RenderConfig rc;
  rc.image_size = 8;
  rc.sigma = 1e-2;
  rc.gamma = 1e-2;  // smooth regime for the numeric oracle
  CounterRng rng(23);
  Tensor tex({3, 4, 4});
  for (std::size_t i = 0; i < tex.numel(); ++i) tex[i] = rng.uniform(60, i);
  Tensor v0 = vertices_tensor(tri);
  Tensor s0 = Tensor::scalar(1.05);
  Tensor t0({2}, {0.02, -0.03});
  Tensor q0({4}, {0.9, 0.1, -0.15, 0.05});

  // the mask output of the textured render is fully attached to geometry
  auto fmask = [&tri, &rc](Tape&, const std::vector<Var>& in) {
    PoseVars pv{in[2], in[3], in[4]};
    RenderOutput out = render_color(in[0], tri, in[1], pv, rc);
    return mean(out.mask);
  };
  FdiffReport rep = finite_difference_check_many(fmask, {v0, tex, s0, t0, q0}, 1e-5);
  CAPTURE(rep.worst_param);
  CHECK(rep.max_rel_err < 1e-4);

  // texel gradients of the RGB output are exact (the sampling weights do not
  // depend on the texture)
  Pose pose = pose_from_array({1.05, 0.02, -0.03, 0.9, 0.1, -0.15, 0.05});
  auto ftex = [&](Tape&, const Var& t) {
    RenderOutput out = render_color(Var(v0), tri, t, constant_pose_vars(pose), rc);
    return mean(out.rgb);
  };
  CHECK(finite_difference_check(ftex, tex, 1e-5).max_rel_err < 1e-4);

  // geometry gradients of RGB exist (probability and depth-weight paths) but
  // exclude the detached barycentric term, so they are checked for flow only
  Tape tape;
  Var v = tape.leaf(v0);
  PoseVars pv{tape.leaf(s0), tape.leaf(t0), tape.leaf(q0)};
  RenderOutput out = render_color(v, tri, Var(tex), pv, rc);
  GradientMap g = tape.backward(mean(out.rgb));
  double vnorm = 0, snorm = 0;
  Tensor gv = g.get(v);
  for (std::size_t i = 0; i < gv.numel(); ++i) vnorm += gv[i] * gv[i];
  Tensor gs = g.get(pv.s);
  for (std::size_t i = 0; i < gs.numel(); ++i) snorm += gs[i] * gs[i];
  CHECK(vnorm > 0.0);
  CHECK(snorm > 0.0);
}

TEST_CASE("render_color requires a UV chart") {
  Mesh bare = front_triangle();
  bare.uv.clear();
  bare.uv_faces.clear();
  RenderConfig rc;
  rc.image_size = 8;
  CHECK_THROWS(render_color(Var(vertices_tensor(bare)), bare, Var(Tensor::full({3, 4, 4}, 0.5)),
                            constant_pose_vars(Pose{}), rc));
}

TEST_CASE("render config validation") {
  Mesh tri = front_triangle();
  RenderConfig rc;
  rc.image_size = 4;  // below the minimum of 8
  CHECK_THROWS(
      render_silhouette(Var(vertices_tensor(tri)), tri.faces, constant_pose_vars(Pose{}), rc));
  rc.image_size = 8;
  rc.sigma = 0.0;
  CHECK_THROWS(
      render_silhouette(Var(vertices_tensor(tri)), tri.faces, constant_pose_vars(Pose{}), rc));
}

TEST_CASE("PNG round trip through [0,1] images") {
  fs::path p = fs::temp_directory_path() / "meshrecon_render_test.png";
  CounterRng rng(29);
  Tensor img({3, 9, 7});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(61, i);
  write_png(img, p.string());
  Tensor back = read_png(p.string());
  REQUIRE(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i)
    CHECK(std::fabs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-12);  // 8-bit quantization bound
  fs::remove(p);

  // grayscale path
  Tensor gray({5, 6});
  for (std::size_t i = 0; i < gray.numel(); ++i) gray[i] = rng.uniform(62, i);
  write_png(gray, p.string());
  Tensor gback = read_png(p.string());
  REQUIRE(gback.shape() == gray.shape());
  for (std::size_t i = 0; i < gray.numel(); ++i)
    CHECK(std::fabs(gback[i] - gray[i]) <= 0.5 / 255.0 + 1e-12);
  fs::remove(p);
}
