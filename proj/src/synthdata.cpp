#include "meshrecon/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "meshrecon/image.hpp"
#include "meshrecon/rng.hpp"

namespace meshrecon {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::runtime_error(where + ": " + msg);
}

}  // namespace

std::string to_string(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Ellipsoid: return "ellipsoid";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Capsule: return "capsule";
  }
  fail("to_string", "bad PrimitiveKind");
}

PrimitiveKind primitive_kind_from_string(const std::string& s) {
  if (s == "sphere") return PrimitiveKind::Sphere;
  if (s == "ellipsoid") return PrimitiveKind::Ellipsoid;
  if (s == "box") return PrimitiveKind::Box;
  if (s == "capsule") return PrimitiveKind::Capsule;
  fail("primitive_kind_from_string", "unknown primitive '" + s + "'");
}

Mesh primitive(const PrimitiveSpec& spec) {
  Mesh m = icosphere(spec.level);
  switch (spec.kind) {
    case PrimitiveKind::Sphere:
      return m;  // already the unit sphere
    case PrimitiveKind::Ellipsoid: {
      double ax = spec.axes[0], ay = spec.axes[1], az = spec.axes[2];
      if (ax <= 0 || ay <= 0 || az <= 0) fail("primitive", "ellipsoid axes must be positive");
      double r = std::max({ax, ay, az});  // bounding-sphere radius of the solid
      for (auto& v : m.vertices) {
        v[0] *= ax / r;
        v[1] *= ay / r;
        v[2] *= az / r;
      }
      return m;
    }
    case PrimitiveKind::Box: {
      double ax = spec.axes[0], ay = spec.axes[1], az = spec.axes[2];
      if (ax <= 0 || ay <= 0 || az <= 0) fail("primitive", "box half-extents must be positive");
      double r = std::sqrt(ax * ax + ay * ay + az * az);  // corner radius
      for (auto& v : m.vertices) {
        double linf = std::max({std::fabs(v[0]), std::fabs(v[1]), std::fabs(v[2])});
        // sphere point -> cube surface -> anisotropic scale -> unit bounding sphere
        v[0] *= ax / (linf * r);
        v[1] *= ay / (linf * r);
        v[2] *= az / (linf * r);
      }
      return m;
    }
    case PrimitiveKind::Capsule: {
      double h = spec.cap_half_length;
      if (h < 0) fail("primitive", "capsule half-length must be non-negative");
      double r = 1.0 + h;  // pole distance = bounding-sphere radius
      for (auto& v : m.vertices) {
        double z = v[2] + (v[2] > 0 ? h : v[2] < 0 ? -h : 0.0);
        v[0] /= r;
        v[1] /= r;
        v[2] = z / r;
      }
      return m;
    }
  }
  fail("primitive", "bad PrimitiveKind");
}

ShadedRender rasterize_hard(const Mesh& mesh, const Pose& pose, int image_size,
                            const std::array<double, 3>& albedo) {
  if (image_size <= 0) fail("rasterize_hard", "image_size must be positive");
  std::size_t H = static_cast<std::size_t>(image_size), W = H;

  auto R = quat_to_matrix(quat_normalize(pose.q));
  std::size_t k = mesh.vertices.size();
  std::vector<std::array<double, 3>> cam(k);  // rotated, unscaled camera-space vertices
  std::vector<std::array<double, 2>> ndc(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& v = mesh.vertices[i];
    for (int r = 0; r < 3; ++r)
      cam[i][r] = R[r][0] * v[0] + R[r][1] * v[1] + R[r][2] * v[2];
    ndc[i] = {pose.s * cam[i][0] + pose.t[0], pose.s * cam[i][1] + pose.t[1]};
  }

  const std::array<double, 3> light = {0.30 / 0.9899494936611665, 0.50 / 0.9899494936611665,
                                       0.80 / 0.9899494936611665};  // normalized (0.3, 0.5, 0.8)
  Tensor rgb({3, H, W});
  Tensor mask({H, W});
  std::vector<double> zbuf(H * W, -std::numeric_limits<double>::infinity());

  for (const auto& f : mesh.faces) {
    const auto &a = ndc[f[0]], &b = ndc[f[1]], &c = ndc[f[2]];
    double za = cam[f[0]][2], zb = cam[f[1]][2], zc = cam[f[2]][2];

    // flat two-sided Lambertian shade from the camera-space face normal
    std::array<double, 3> e1, e2, n;
    for (int i = 0; i < 3; ++i) {
      e1[i] = cam[f[1]][i] - cam[f[0]][i];
      e2[i] = cam[f[2]][i] - cam[f[0]][i];
    }
    n = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
         e1[0] * e2[1] - e1[1] * e2[0]};
    double nn = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    if (nn < 1e-14) continue;
    double flip = n[2] < 0 ? -1.0 : 1.0;
    double ndotl =
        flip * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / nn;
    double shade = 0.25 + 0.75 * std::max(0.0, ndotl);

    double area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if (std::fabs(area) < 1e-18) continue;

    double xmin = std::min({a[0], b[0], c[0]}), xmax = std::max({a[0], b[0], c[0]});
    double ymin = std::min({a[1], b[1], c[1]}), ymax = std::max({a[1], b[1], c[1]});
    // pixel (r,c) center: x = -1 + (c+0.5)*2/W, y = 1 - (r+0.5)*2/H
    long c0 = static_cast<long>(std::ceil((xmin + 1.0) * W / 2.0 - 0.5));
    long c1 = static_cast<long>(std::floor((xmax + 1.0) * W / 2.0 - 0.5));
    long r0 = static_cast<long>(std::ceil((1.0 - ymax) * H / 2.0 - 0.5));
    long r1 = static_cast<long>(std::floor((1.0 - ymin) * H / 2.0 - 0.5));
    c0 = std::max(c0, 0L);
    c1 = std::min(c1, static_cast<long>(W) - 1);
    r0 = std::max(r0, 0L);
    r1 = std::min(r1, static_cast<long>(H) - 1);

    for (long r = r0; r <= r1; ++r) {
      double py = 1.0 - (r + 0.5) * 2.0 / H;
      for (long col = c0; col <= c1; ++col) {
        double px = -1.0 + (col + 0.5) * 2.0 / W;
        double wa = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area;
        double wb = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area;
        double wc = 1.0 - wa - wb;
        if (wa < 0 || wb < 0 || wc < 0) continue;
        double z = wa * za + wb * zb + wc * zc;
        std::size_t idx = static_cast<std::size_t>(r) * W + col;
        if (z > zbuf[idx]) {
          zbuf[idx] = z;
          mask[idx] = 1.0;
          for (int ch = 0; ch < 3; ++ch)
            rgb[ch * H * W + idx] = std::clamp(albedo[ch] * shade, 0.0, 1.0);
        }
      }
    }
  }
  return {std::move(rgb), std::move(mask)};
}

DatasetConfig default_dataset_config(int num_classes) {
  if (num_classes != 2 && num_classes != 4)
    fail("default_dataset_config", "built-in corpora have 2 or 4 classes");
  DatasetConfig cfg;
  ClassSpec ellipsoid;
  ellipsoid.name = "ellipsoid";
  ellipsoid.kind = PrimitiveKind::Ellipsoid;
  ellipsoid.axes_min = {1.0, 0.45, 0.45};
  ellipsoid.axes_max = {1.0, 0.6, 0.6};
  ellipsoid.albedo = {0.85, 0.35, 0.30};
  ClassSpec box;
  box.name = "box";
  box.kind = PrimitiveKind::Box;
  box.axes_min = {0.8, 0.8, 0.8};
  box.axes_max = {1.0, 1.0, 1.0};
  box.albedo = {0.30, 0.45, 0.85};
  cfg.classes = {ellipsoid, box};
  if (num_classes == 4) {
    ClassSpec sphere;
    sphere.name = "sphere";
    sphere.kind = PrimitiveKind::Sphere;
    sphere.albedo = {0.35, 0.80, 0.40};
    ClassSpec capsule;
    capsule.name = "capsule";
    capsule.kind = PrimitiveKind::Capsule;
    capsule.cap_min = 0.4;
    capsule.cap_max = 0.7;
    capsule.albedo = {0.85, 0.75, 0.30};
    cfg.classes.push_back(sphere);
    cfg.classes.push_back(capsule);
  }
  return cfg;
}

DatasetConfig dataset_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail("dataset_config_from_json", std::string("parse error: ") + e.what());
  }
  DatasetConfig cfg;
  if (j.contains("preset")) {
    cfg = default_dataset_config(j.at("preset").get<int>());
  }
  if (j.contains("classes")) {
    if (!j.at("classes").is_array())
      fail("dataset_config_from_json", "\"classes\" must be an array of class objects"
           " (use \"preset\": 2 or 4 for the built-in corpora)");
    cfg.classes.clear();
    for (const auto& jc : j.at("classes")) {
      ClassSpec c;
      c.name = jc.at("name").get<std::string>();
      c.kind = primitive_kind_from_string(jc.at("kind").get<std::string>());
      if (jc.contains("axes_min")) c.axes_min = jc.at("axes_min").get<std::array<double, 3>>();
      if (jc.contains("axes_max")) c.axes_max = jc.at("axes_max").get<std::array<double, 3>>();
      if (jc.contains("cap_min")) c.cap_min = jc.at("cap_min").get<double>();
      if (jc.contains("cap_max")) c.cap_max = jc.at("cap_max").get<double>();
      if (jc.contains("albedo")) c.albedo = jc.at("albedo").get<std::array<double, 3>>();
      if (jc.contains("level")) c.level = jc.at("level").get<int>();
      cfg.classes.push_back(c);
    }
  }
  if (cfg.classes.empty()) fail("dataset_config_from_json", "no classes given");
  if (j.contains("samples_per_class")) cfg.samples_per_class = j.at("samples_per_class").get<int>();
  if (cfg.samples_per_class <= 0) fail("dataset_config_from_json", "samples_per_class must be positive");
  if (j.contains("image_size")) cfg.image_size = j.at("image_size").get<int>();
  if (cfg.image_size < 8) fail("dataset_config_from_json", "image_size must be at least 8");
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("scale_min")) cfg.scale_min = j.at("scale_min").get<double>();
  if (j.contains("scale_max")) cfg.scale_max = j.at("scale_max").get<double>();
  if (j.contains("elev_range")) cfg.elev_range = j.at("elev_range").get<double>();
  if (j.contains("t_range")) cfg.t_range = j.at("t_range").get<double>();
  return cfg;
}

namespace {

json shape_to_json(const PrimitiveSpec& s) {
  return json{{"kind", to_string(s.kind)},
              {"axes", s.axes},
              {"cap", s.cap_half_length},
              {"level", s.level}};
}

PrimitiveSpec shape_from_json(const json& j) {
  PrimitiveSpec s;
  s.kind = primitive_kind_from_string(j.at("kind").get<std::string>());
  s.axes = j.at("axes").get<std::array<double, 3>>();
  s.cap_half_length = j.at("cap").get<double>();
  s.level = j.at("level").get<int>();
  return s;
}

}  // namespace

void generate_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
  if (cfg.classes.empty()) fail("generate_dataset", "no classes configured");
  if (cfg.samples_per_class <= 0) fail("generate_dataset", "samples_per_class must be positive");
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks");

  CounterRng rng(cfg.seed);
  int n = cfg.samples_per_class;
  int n_train = n * 8 / 10, n_val = n / 10;

  std::ostringstream manifest;
  for (std::size_t ci = 0; ci < cfg.classes.size(); ++ci) {
    const ClassSpec& cls = cfg.classes[ci];
    for (int si = 0; si < n; ++si) {
      auto u = [&](std::uint64_t field) { return rng.uniform(rngkey::kDataset, ci, si, field); };
      PrimitiveSpec spec;
      spec.kind = cls.kind;
      spec.level = cls.level;
      for (int a = 0; a < 3; ++a)
        spec.axes[a] = cls.axes_min[a] + (cls.axes_max[a] - cls.axes_min[a]) * u(a);
      spec.cap_half_length = cls.cap_min + (cls.cap_max - cls.cap_min) * u(3);

      double az = 2.0 * M_PI * u(4);
      double el = (2.0 * u(5) - 1.0) * cfg.elev_range;
      Pose pose;
      pose.s = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * u(6);
      pose.t = {(2.0 * u(7) - 1.0) * cfg.t_range, (2.0 * u(8) - 1.0) * cfg.t_range};
      Quat qy{std::cos(az / 2), 0, std::sin(az / 2), 0};
      Quat qx{std::cos(el / 2), std::sin(el / 2), 0, 0};
      pose.q = quat_multiply(qx, qy);  // spin about the vertical axis, then tilt

      Mesh mesh = primitive(spec);
      ShadedRender out = rasterize_hard(mesh, pose, cfg.image_size, cls.albedo);

      char base[256];
      std::snprintf(base, sizeof base, "%s_%04d.png", cls.name.c_str(), si);
      std::string img_rel = "images/" + std::string(base);
      std::string mask_rel = "masks/" + std::string(base);
      write_png(out.rgb, (fs::path(out_dir) / img_rel).string());
      write_png(out.mask, (fs::path(out_dir) / mask_rel).string());

      std::string split = si < n_train ? "train" : si < n_train + n_val ? "val" : "test";
      json line{{"image", img_rel}, {"mask", mask_rel},
                {"pose", pose_to_array(pose)},  {"label", cls.name},
                {"split", split},   {"shape", shape_to_json(spec)}};
      manifest << line.dump() << "\n";
    }
  }

  // write-then-rename so readers never see a torn manifest
  fs::path final_path = fs::path(out_dir) / "manifest.jsonl";
  fs::path tmp_path = fs::path(out_dir) / "manifest.jsonl.tmp";
  {
    std::ofstream f(tmp_path, std::ios::binary);
    if (!f) fail("generate_dataset", "cannot write " + tmp_path.string());
    f << manifest.str();
  }
  fs::rename(tmp_path, final_path);
}

std::vector<ManifestEntry> read_manifest(const std::string& dataset_dir) {
  fs::path path = fs::path(dataset_dir) / "manifest.jsonl";
  std::ifstream f(path);
  if (!f) fail("read_manifest", "cannot open " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      fail("read_manifest", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ManifestEntry e;
    e.image = j.at("image").get<std::string>();
    e.mask = j.at("mask").get<std::string>();
    e.pose = pose_from_array(j.at("pose").get<std::array<double, 7>>());
    e.label = j.at("label").get<std::string>();
    e.split = j.at("split").get<std::string>();
    e.shape = shape_from_json(j.at("shape"));
    entries.push_back(std::move(e));
  }
  if (entries.empty()) fail("read_manifest", path.string() + " has no entries");
  return entries;
}

LoadedSample load_sample(const std::string& dataset_dir, const ManifestEntry& entry) {
  LoadedSample s;
  s.image = read_png((fs::path(dataset_dir) / entry.image).string());
  if (s.image.ndim() == 2) {  // grayscale image: expand to three channels
    Tensor rgb({3, s.image.dim(0), s.image.dim(1)});
    for (int c = 0; c < 3; ++c)
      std::copy(s.image.data(), s.image.data() + s.image.numel(),
                rgb.data() + c * s.image.numel());
    s.image = std::move(rgb);
  }
  Tensor m = read_png((fs::path(dataset_dir) / entry.mask).string());
  if (m.ndim() == 3) {  // RGB mask file: take the first channel
    Tensor g({m.dim(1), m.dim(2)});
    std::copy(m.data(), m.data() + g.numel(), g.data());
    m = std::move(g);
  }
  s.mask = std::move(m);
  s.pose = entry.pose;
  s.label = entry.label;
  s.shape = entry.shape;
  return s;
}

}  // namespace meshrecon
