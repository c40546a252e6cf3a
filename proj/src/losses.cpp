#include "meshrecon/losses.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "meshrecon/image.hpp"

namespace meshrecon {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::runtime_error(where + ": " + msg);
}

// custom elementwise op: out and the local derivative are precomputed
Var unary_custom(const Var& x, Tensor out, Tensor dfdx) {
  Tape* t = x.tape();
  if (!t) return Var(std::move(out));
  int px = x.node();
  auto d = std::make_shared<Tensor>(std::move(dfdx));
  return t->record(std::move(out), {x}, [px, d](const Tensor& g, GradientMap& gm) {
    if (px < 0) return;
    Tensor& gx = gm.ensure(px, d->shape());
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (*d)[i];
  });
}

Var srgb_to_linear(const Var& x) {
  Tensor out(x.shape()), dfdx(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double v = x.value()[i];
    if (v <= 0.04045) {  // below the toe (and any negative overshoot) stays linear
      out[i] = v / 12.92;
      dfdx[i] = 1.0 / 12.92;
    } else {
      double b = (v + 0.055) / 1.055;
      out[i] = std::pow(b, 2.4);
      dfdx[i] = 2.4 * std::pow(b, 1.4) / 1.055;
    }
  }
  return unary_custom(x, std::move(out), std::move(dfdx));
}

Var lab_f(const Var& x) {
  constexpr double kThresh = 0.008856;
  Tensor out(x.shape()), dfdx(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double v = x.value()[i];
    if (v > kThresh) {
      out[i] = std::cbrt(v);
      dfdx[i] = 1.0 / (3.0 * std::cbrt(v) * std::cbrt(v));
    } else {
      out[i] = 7.787 * v + 16.0 / 116.0;
      dfdx[i] = 7.787;
    }
  }
  return unary_custom(x, std::move(out), std::move(dfdx));
}

// rows = pixels, cols = channels; returns [n,3] LAB rows
Var lab_rows(const Var& rgb_rows) {
  // sRGB (D65) -> XYZ with the reference white folded into the matrix rows,
  // transposed for the rows-layout matmul
  static const Tensor kRgb2XyzT(
      {3, 3}, {0.4124564 / 0.95047, 0.2126729, 0.0193339 / 1.08883,  //
               0.3575761 / 0.95047, 0.7151522, 0.1191920 / 1.08883,  //
               0.1804375 / 0.95047, 0.0721750, 0.9503041 / 1.08883});
  // L = 116 f_y - 16, a = 500 (f_x - f_y), b = 200 (f_y - f_z)
  static const Tensor kLabT({3, 3}, {0, 500, 0,  //
                                     116, -500, 200,  //
                                     0, 0, -200});
  static const Tensor kLabOffset({3}, {-16, 0, 0});
  Var f = lab_f(matmul(srgb_to_linear(rgb_rows), Var(kRgb2XyzT)));
  return bias_add(matmul(f, Var(kLabT)), Var(kLabOffset));
}

// [3,...] channel-major image -> [n,3] pixel rows
Var channels_to_rows(const Var& img) {
  if (img.shape().empty() || img.shape()[0] != 3)
    fail("rgb_to_lab", "expected a 3-channel image, got " + shape_str(img.shape()));
  std::size_t n = img.value().numel() / 3;
  return transpose2d(reshape(img, {3, n}));
}

std::vector<std::size_t> mask_interior(const Tensor& mask) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.numel(); ++i)
    if (mask[i] > 0.5) idx.push_back(i);
  return idx;
}

// shared plumbing of color_loss / style_loss; channels = LAB channel indices
Var lab_channel_loss(const char* name, const std::vector<std::size_t>& channels,
                     const Var& pred_rgb, const Tensor& image, const Tensor& mask) {
  if (pred_rgb.shape() != image.shape())
    fail(name, "prediction " + shape_str(pred_rgb.shape()) + " vs target " +
                   shape_str(image.shape()));
  if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != mask.dim(0) ||
      image.dim(2) != mask.dim(1))
    fail(name, "image " + shape_str(image.shape()) + " does not match mask " +
                   shape_str(mask.shape()));
  std::vector<std::size_t> interior = mask_interior(mask);
  if (interior.empty()) return Var(Tensor::scalar(0.0));

  Var pred_sel = gather_rows(lab_rows(channels_to_rows(pred_rgb)), interior);
  Var gt_sel =
      gather_rows(lab_rows(channels_to_rows(Var(apply_mask(image, mask)))), interior);
  Var diff = transpose2d(sub(pred_sel, gt_sel));  // [3,m]
  return mean(pow(gather_rows(diff, channels), 2.0));
}

bool is_set(const Var& v) { return v.ptr() != nullptr; }

}  // namespace

void LossWeights::validate() const {
  const double ws[] = {mask, smooth_mesh, smooth_deform, deform, pose, quat, color, style, percept};
  for (double w : ws)
    if (!(w >= 0.0)) fail("LossWeights", "weights must be non-negative");
}

std::string LossReport::csv_header() {
  return "step,mask,smooth_mesh,smooth_deform,deform,pose,quat,color,style,percept,total";
}

std::string LossReport::csv_row(long step) const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step, mask,
                smooth_mesh, smooth_deform, deform, pose, quat, color, style, percept, total);
  return buf;
}

Var quat_normalize_var(const Var& q) {
  if (q.shape() != Shape{4}) fail("quat_normalize_var", "expected shape [4]");
  Var n2 = sum(mul(q, q));
  if (n2.value()[0] < 1e-16) fail("quat_normalize_var", "quaternion norm below 1e-8");
  return scale_by(q, div(Var(Tensor::scalar(1.0)), sqrt(n2)));
}

Var mask_loss(const Var& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    fail("mask_loss", "prediction " + shape_str(pred.shape()) + " vs target " +
                          shape_str(target.shape()));
  return mean(pow(sub(pred, Var(target)), 2.0));
}

Var smooth_loss(const SparseMatrix& lap, const Var& x) {
  return row_norm_mean(laplacian_apply(lap, x));
}

Var deformation_reg(const Var& delta) { return row_norm_mean(delta); }

Var pose_loss(const PoseVars& pred, const Pose& gt) {
  auto unit = [](double n, const char* which) {
    if (std::fabs(n - 1.0) > 1e-6)
      fail("pose_loss", std::string(which) + " quaternion is not unit (norm " +
                            std::to_string(n) + ")");
  };
  const Tensor& qv = pred.q.value();
  if (qv.numel() != 4) fail("pose_loss", "predicted q must have shape [4]");
  unit(std::sqrt(qv[0] * qv[0] + qv[1] * qv[1] + qv[2] * qv[2] + qv[3] * qv[3]), "predicted");
  unit(std::sqrt(gt.q.w * gt.q.w + gt.q.x * gt.q.x + gt.q.y * gt.q.y + gt.q.z * gt.q.z),
       "target");

  Var ds = sub(pred.s, Var(Tensor::scalar(gt.s)));
  Var dt = sub(pred.t, Var(Tensor({2}, {gt.t[0], gt.t[1]})));
  Var qdot = sum(mul(pred.q, Var(Tensor({4}, {gt.q.w, gt.q.x, gt.q.y, gt.q.z}))));
  Var geo = add_scalar(mul_scalar(abs(qdot), -1.0), 1.0);
  return add(add(pow(ds, 2.0), sum(pow(dt, 2.0))), geo);
}

Var quat_unit_penalty(const Var& q_raw) {
  if (q_raw.value().numel() != 4) fail("quat_unit_penalty", "expected 4 components");
  return pow(add_scalar(sum(mul(q_raw, q_raw)), -1.0), 2.0);
}

Var rgb_to_lab(const Var& rgb) {
  Var lab = lab_rows(channels_to_rows(rgb));
  return reshape(transpose2d(lab), rgb.shape());
}

Var color_loss(const Var& pred_rgb, const Tensor& image, const Tensor& mask) {
  return lab_channel_loss("color_loss", {1, 2}, pred_rgb, image, mask);
}

Var style_loss(const Var& pred_rgb, const Tensor& image, const Tensor& mask) {
  return lab_channel_loss("style_loss", {0}, pred_rgb, image, mask);
}

Var total_loss(const LossTerms& terms, const LossWeights& w, LossReport* report) {
  w.validate();
  struct Item {
    const char* name;
    const Var* v;
    double lam;
    double* slot;
  };
  LossReport rep;
  Item items[] = {{"mask", &terms.mask, w.mask, &rep.mask},
                  {"smooth_mesh", &terms.smooth_mesh, w.smooth_mesh, &rep.smooth_mesh},
                  {"smooth_deform", &terms.smooth_deform, w.smooth_deform, &rep.smooth_deform},
                  {"deform", &terms.deform, w.deform, &rep.deform},
                  {"pose", &terms.pose, w.pose, &rep.pose},
                  {"quat", &terms.quat, w.quat, &rep.quat},
                  {"color", &terms.color, w.color, &rep.color},
                  {"style", &terms.style, w.style, &rep.style}};
  Var total;
  for (const Item& it : items) {
    if (!is_set(*it.v)) fail("total_loss", std::string("term '") + it.name + "' is not set");
    if (it.v->value().numel() != 1)
      fail("total_loss", std::string("term '") + it.name + "' is not scalar");
    *it.slot = it.v->value()[0];
    Var weighted = mul_scalar(*it.v, it.lam);
    total = is_set(total) ? add(total, weighted) : weighted;
  }
  rep.percept = 0.0;  // reserved slot: the weight exists, the term is hard zero
  rep.total = total.value()[0];
  if (report) *report = rep;
  return total;
}

TrainSample symmetry_augment(const TrainSample& s, bool apply) {
  if (!apply) return s;
  return {flip_horizontal(s.image), flip_horizontal(s.mask), rotate_pose_y180(s.pose)};
}

}  // namespace meshrecon
