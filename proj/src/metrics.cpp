#include "meshrecon/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "meshrecon/image.hpp"

namespace meshrecon {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::runtime_error(where + ": " + msg);
}

}  // namespace

double mask_iou(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("mask_iou", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    bool pa = a[i] > 0.5, pb = b[i] > 0.5;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double l1_metric(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("l1_metric", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.numel() == 0) fail("l1_metric", "empty input");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::fabs(a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

namespace {

// [3,H,W] -> BT.601 luma, [H,W] passes through
Tensor to_luma(const Tensor& img, const char* name) {
  if (img.ndim() == 2) return img;
  if (img.ndim() == 3 && img.dim(0) == 3) {
    std::size_t HW = img.dim(1) * img.dim(2);
    Tensor out({img.dim(1), img.dim(2)});
    for (std::size_t i = 0; i < HW; ++i)
      out[i] = 0.299 * img[i] + 0.587 * img[HW + i] + 0.114 * img[2 * HW + i];
    return out;
  }
  fail(name, "expected [H,W] or [3,H,W], got " + shape_str(img.shape()));
}

}  // namespace

double ssim_metric(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("ssim_metric", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor x = to_luma(a, "ssim_metric"), y = to_luma(b, "ssim_metric");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  std::size_t H = x.dim(0), W = x.dim(1);
  if (H < kWin || W < kWin) fail("ssim_metric", "image smaller than the 11x11 window");

  double w[kWin][kWin], wsum = 0;
  for (int r = 0; r < kWin; ++r)
    for (int c = 0; c < kWin; ++c) {
      double dr = r - 5, dc = c - 5;
      w[r][c] = std::exp(-(dr * dr + dc * dc) / (2 * kSigma * kSigma));
      wsum += w[r][c];
    }
  for (auto& row : w)
    for (double& v : row) v /= wsum;

  double total = 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r + kWin <= H; ++r) {
    for (std::size_t c = 0; c + kWin <= W; ++c) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          double xv = x[(r + i) * W + c + j], yv = y[(r + i) * W + c + j];
          mx += w[i][j] * xv;
          my += w[i][j] * yv;
          xx += w[i][j] * xv * xv;
          yy += w[i][j] * yv * yv;
          xy += w[i][j] * xv * yv;
        }
      double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      total += ((2 * mx * my + kC1) * (2 * cxy + kC2)) /
               ((mx * mx + my * my + kC1) * (vx + vy + kC2));
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

// ---- volumetric IoU ---------------------------------------------------------

double voxel_3d_iou(const Mesh& a, const Mesh& b, int resolution) {
  if (resolution < 2) fail("voxel_3d_iou", "resolution must be at least 2");
  validate_mesh(a, "voxel_3d_iou: first mesh");
  validate_mesh(b, "voxel_3d_iou: second mesh");
  if (!is_watertight(a)) fail("voxel_3d_iou", "first mesh is not watertight");
  if (!is_watertight(b)) fail("voxel_3d_iou", "second mesh is not watertight");

  // one shared canonical transform from the union of both vertex sets
  double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
  auto grow = [&](const Mesh& m) {
    for (const auto& v : m.vertices)
      for (int c = 0; c < 3; ++c) {
        lo[c] = std::min(lo[c], v[c]);
        hi[c] = std::max(hi[c], v[c]);
      }
  };
  grow(a);
  grow(b);
  double ctr[3] = {(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2};
  double radius = 0;
  auto grow_r = [&](const Mesh& m) {
    for (const auto& v : m.vertices) {
      double dx = v[0] - ctr[0], dy = v[1] - ctr[1], dz = v[2] - ctr[2];
      radius = std::max(radius, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
  };
  grow_r(a);
  grow_r(b);
  if (radius <= 0) fail("voxel_3d_iou", "degenerate geometry (zero bounding radius)");

  std::size_t R = static_cast<std::size_t>(resolution);
  auto center = [&](std::size_t i) { return -1.0 + (i + 0.5) * 2.0 / static_cast<double>(R); };
  // rays get a tiny fixed offset so they cannot graze shared edges/vertices
  constexpr double kJitterY = 1.2345e-7, kJitterZ = 2.7182e-7;

  // occupancy by crossing parity along x for each (y,z) ray
  auto occupancy = [&](const Mesh& m) {
    std::vector<std::vector<double>> crossings(R * R);
    for (const auto& f : m.faces) {
      double px[3], py[3], pz[3];
      for (int i = 0; i < 3; ++i) {
        const auto& v = m.vertices[f[i]];
        px[i] = (v[0] - ctr[0]) / radius;
        py[i] = (v[1] - ctr[1]) / radius;
        pz[i] = (v[2] - ctr[2]) / radius;
      }
      double ymin = std::min({py[0], py[1], py[2]}), ymax = std::max({py[0], py[1], py[2]});
      double zmin = std::min({pz[0], pz[1], pz[2]}), zmax = std::max({pz[0], pz[1], pz[2]});
      for (std::size_t j = 0; j < R; ++j) {
        double y = center(j) + kJitterY;
        if (y < ymin || y > ymax) continue;
        for (std::size_t k = 0; k < R; ++k) {
          double z = center(k) + kJitterZ;
          if (z < zmin || z > zmax) continue;
          double den = (py[1] - py[0]) * (pz[2] - pz[0]) - (pz[1] - pz[0]) * (py[2] - py[0]);
          if (std::fabs(den) < 1e-30) continue;  // face parallel to the ray
          double w1 = ((y - py[0]) * (pz[2] - pz[0]) - (z - pz[0]) * (py[2] - py[0])) / den;
          double w2 = ((py[1] - py[0]) * (z - pz[0]) - (pz[1] - pz[0]) * (y - py[0])) / den;
          double w0 = 1.0 - w1 - w2;
          if (w0 < 0 || w1 < 0 || w2 < 0) continue;
          crossings[j * R + k].push_back(w0 * px[0] + w1 * px[1] + w2 * px[2]);
        }
      }
    }
    std::vector<std::uint8_t> occ(R * R * R, 0);
    for (std::size_t j = 0; j < R; ++j)
      for (std::size_t k = 0; k < R; ++k) {
        auto& ts = crossings[j * R + k];
        if (ts.empty()) continue;
        std::sort(ts.begin(), ts.end());
        std::size_t p = 0;
        for (std::size_t i = 0; i < R; ++i) {
          double xc = center(i);
          while (p < ts.size() && ts[p] < xc) ++p;
          if (p % 2 == 1) occ[(i * R + j) * R + k] = 1;
        }
      }
    return occ;
  };

  std::vector<std::uint8_t> oa = occupancy(a), ob = occupancy(b);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < oa.size(); ++i) {
    inter += oa[i] && ob[i];
    uni += oa[i] || ob[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- model-level evaluation -------------------------------------------------

InferenceResult infer(const ModelParams& params, const Tensor& image, const Tensor& mask) {
  ParamVars p = constant_params(params);
  CounterRng rng(0);  // eval mode: dropout is the identity, the stream is never drawn
  Features f = encode(p, params.config, image, mask);
  Var w = select_shape(p, f.shape);
  ShapePred sp = predict_shape(p, params.config, f.shape, w, rng, 0, 0, false);
  PosePred pp = regress_pose(p, params.config, f.shape, rng, 0, 0, false);
  Var tex = decode_texture(p, params.config, f.tex);

  InferenceResult out;
  out.base = with_vertices(params.topology, sp.base.value());
  out.predicted = with_vertices(params.topology, sp.vertices.value());
  out.pose.s = pp.pose.s.value()[0];
  out.pose.t = {pp.pose.t.value()[0], pp.pose.t.value()[1]};
  const Tensor& q = pp.pose.q.value();
  out.pose.q = quat_normalize(Quat{q[0], q[1], q[2], q[3]});
  out.texture = tex.value();
  const Tensor& wv = w.value();
  out.weights.assign(wv.data(), wv.data() + wv.numel());
  return out;
}

namespace {

std::size_t argmax_index(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

double selection_accuracy(const ModelParams& params, const std::string& dataset_dir,
                          const std::vector<ManifestEntry>& train_split,
                          const std::vector<ManifestEntry>& eval_split) {
  if (eval_split.empty()) fail("selection_accuracy", "empty evaluation split");
  std::set<std::string> class_set;
  for (const auto& e : train_split) class_set.insert(e.label);
  for (const auto& e : eval_split) class_set.insert(e.label);
  std::vector<std::string> classes(class_set.begin(), class_set.end());
  auto class_id = [&](const std::string& label) {
    return static_cast<std::size_t>(
        std::lower_bound(classes.begin(), classes.end(), label) - classes.begin());
  };
  std::size_t N = static_cast<std::size_t>(params.config.num_meanshapes);

  auto pick = [&](const ManifestEntry& e) {
    LoadedSample s = load_sample(dataset_dir, e);
    return argmax_index(infer(params, s.image, s.mask).weights);
  };

  // majority vote table on the train split: meanshape x class
  std::vector<std::vector<long>> counts(N, std::vector<long>(classes.size(), 0));
  for (const auto& e : train_split) counts[pick(e)][class_id(e.label)] += 1;

  if (N >= classes.size()) {
    // meanshape -> class by majority (ties and unused meanshapes fall to class 0)
    std::vector<std::size_t> to_class(N, 0);
    for (std::size_t i = 0; i < N; ++i)
      to_class[i] = static_cast<std::size_t>(
          std::max_element(counts[i].begin(), counts[i].end()) - counts[i].begin());
    long correct = 0;
    for (const auto& e : eval_split) correct += to_class[pick(e)] == class_id(e.label);
    return static_cast<double>(correct) / static_cast<double>(eval_split.size());
  }

  // Fewer meanshapes than classes: classes sharing a meanshape merge into one
  // scoring class -- a sample counts as correct when it lands on its class's
  // majority meanshape.
  std::cerr << "selection_accuracy: " << N << " meanshapes for " << classes.size()
            << " classes; scoring with merged classes\n";
  std::vector<std::size_t> to_mean(classes.size(), 0);
  for (std::size_t cidx = 0; cidx < classes.size(); ++cidx) {
    long best = -1;
    for (std::size_t i = 0; i < N; ++i)
      if (counts[i][cidx] > best) {
        best = counts[i][cidx];
        to_mean[cidx] = i;
      }
  }
  long correct = 0;
  for (const auto& e : eval_split) correct += pick(e) == to_mean[class_id(e.label)];
  return static_cast<double>(correct) / static_cast<double>(eval_split.size());
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["split"] = split;
  j["count"] = count;
  j["mask_iou_pred_cam"] = mask_iou_pred_cam;
  j["mask_iou_gt_cam"] = mask_iou_gt_cam;
  j["l1"] = l1;
  j["ssim"] = ssim;
  j["voxel_3d_iou"] = voxel_3d_iou;
  j["selection_accuracy"] = selection_accuracy;
  j["fid"] = nullptr;  // needs a pretrained embedding network; out of reach here
  j["per_class_mask_iou"] = per_class_mask_iou;
  return j.dump(2);
}

EvalReport evaluate(const ModelParams& params, const std::string& dataset_dir,
                    const EvalOptions& opts) {
  std::vector<ManifestEntry> all = read_manifest(dataset_dir);
  std::vector<ManifestEntry> train_split, eval_split;
  for (const auto& e : all) {
    if (e.split == "train") train_split.push_back(e);
    if (opts.split == "all" || e.split == opts.split) eval_split.push_back(e);
  }
  if (eval_split.empty()) fail("evaluate", "no samples in split '" + opts.split + "'");

  EvalReport rep;
  rep.split = opts.split;
  std::map<std::string, std::pair<double, int>> per_class;

  for (const ManifestEntry& e : eval_split) {
    LoadedSample s = load_sample(dataset_dir, e);
    InferenceResult r = infer(params, s.image, s.mask);

    RenderConfig rc = opts.render;
    rc.image_size = static_cast<int>(s.mask.dim(0));
    Var verts{vertices_tensor(r.predicted)};
    Var sil_gt = render_silhouette(verts, r.predicted.faces, constant_pose_vars(s.pose), rc);
    Var sil_pred = render_silhouette(verts, r.predicted.faces, constant_pose_vars(r.pose), rc);
    double iou_gt = mask_iou(sil_gt.value(), s.mask);
    rep.mask_iou_gt_cam += iou_gt;
    rep.mask_iou_pred_cam += mask_iou(sil_pred.value(), s.mask);

    RenderOutput color =
        render_color(verts, r.predicted, Var(r.texture), constant_pose_vars(s.pose), rc);
    Tensor target = apply_mask(s.image, s.mask);
    rep.l1 += l1_metric(color.rgb.value(), target);
    rep.ssim += ssim_metric(color.rgb.value(), target);

    if (opts.voxel_iou)
      rep.voxel_3d_iou += voxel_3d_iou(r.predicted, primitive(e.shape), opts.voxel_resolution);

    auto& pc = per_class[e.label];
    pc.first += iou_gt;
    pc.second += 1;
  }

  double inv = 1.0 / static_cast<double>(eval_split.size());
  rep.count = static_cast<int>(eval_split.size());
  rep.mask_iou_pred_cam *= inv;
  rep.mask_iou_gt_cam *= inv;
  rep.l1 *= inv;
  rep.ssim *= inv;
  rep.voxel_3d_iou = opts.voxel_iou ? rep.voxel_3d_iou * inv : 0.0;
  for (const auto& [label, acc] : per_class)
    rep.per_class_mask_iou[label] = acc.first / acc.second;
  rep.selection_accuracy =
      train_split.empty() ? 0.0 : selection_accuracy(params, dataset_dir, train_split, eval_split);
  return rep;
}

}  // namespace meshrecon
