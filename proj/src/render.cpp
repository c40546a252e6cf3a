#include "meshrecon/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace meshrecon {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

double stable_sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

// closest-feature query against a projected triangle
struct TriHit {
  double d2 = 0;        // squared distance to the boundary
  double sign = -1;     // +1 inside, -1 outside (degenerate: outside)
  int seg = 0;          // nearest boundary segment (0:ab 1:bc 2:ca)
  double tau = 0;       // parameter of the nearest point along that segment
  bool inside = false;
  std::array<double, 3> bary{};  // of the pixel if inside, else of the nearest boundary point
};

TriHit tri_hit(double px, double py, const std::array<double, 2>& a, const std::array<double, 2>& b,
               const std::array<double, 2>& c) {
  TriHit h;
  const std::array<double, 2> v[3] = {a, b, c};
  h.d2 = std::numeric_limits<double>::infinity();
  for (int s = 0; s < 3; ++s) {
    const auto& p0 = v[s];
    const auto& p1 = v[(s + 1) % 3];
    double ex = p1[0] - p0[0], ey = p1[1] - p0[1];
    double len2 = ex * ex + ey * ey;
    double tau = 0;
    if (len2 > 0) tau = std::clamp(((px - p0[0]) * ex + (py - p0[1]) * ey) / len2, 0.0, 1.0);
    double mx = p0[0] + tau * ex, my = p0[1] + tau * ey;
    double d2 = (px - mx) * (px - mx) + (py - my) * (py - my);
    if (d2 < h.d2) {
      h.d2 = d2;
      h.seg = s;
      h.tau = tau;
    }
  }

  double den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
  if (std::fabs(den) > 1e-30) {
    double b0 = ((b[1] - c[1]) * (px - c[0]) + (c[0] - b[0]) * (py - c[1])) / den;
    double b1 = ((c[1] - a[1]) * (px - a[0]) + (a[0] - c[0]) * (py - a[1])) / den;
    double b2 = 1.0 - b0 - b1;
    if (b0 >= 0 && b1 >= 0 && b2 >= 0) {
      h.inside = true;
      h.sign = 1.0;
      h.bary = {b0, b1, b2};
      return h;
    }
  }
  // outside (or degenerate): interpolate at the nearest boundary point
  switch (h.seg) {
    case 0: h.bary = {1.0 - h.tau, h.tau, 0.0}; break;
    case 1: h.bary = {0.0, 1.0 - h.tau, h.tau}; break;
    default: h.bary = {h.tau, 0.0, 1.0 - h.tau}; break;
  }
  return h;
}

struct PixelRect {
  int c0, c1, r0, r1;  // inclusive; empty when c0 > c1 or r0 > r1
};

PixelRect pixel_range(double xmin, double xmax, double ymin, double ymax, int W, int H) {
  PixelRect r;
  r.c0 = std::max(0, static_cast<int>(std::ceil((xmin + 1.0) * W / 2.0 - 0.5)));
  r.c1 = std::min(W - 1, static_cast<int>(std::floor((xmax + 1.0) * W / 2.0 - 0.5)));
  r.r0 = std::max(0, static_cast<int>(std::ceil((1.0 - ymax) * H / 2.0 - 0.5)));
  r.r1 = std::min(H - 1, static_cast<int>(std::floor((1.0 - ymin) * H / 2.0 - 0.5)));
  return r;
}

double pixel_x(int c, int W) { return -1.0 + (c + 0.5) * 2.0 / W; }
double pixel_y(int r, int H) { return 1.0 - (r + 0.5) * 2.0 / H; }

void check_faces(const char* where, const std::vector<std::array<std::size_t, 3>>& faces,
                 std::size_t nverts) {
  for (const auto& f : faces)
    for (std::size_t i : f)
      if (i >= nverts) fail(where, "face index out of range");
}

// accumulate d(d^2)/d(endpoints) for the stored nearest feature
void segment_grad(Tensor& gproj, const std::array<std::size_t, 3>& face, int seg, double tau,
                  double px, double py, const Tensor& proj, double gd2) {
  std::size_t i0 = face[seg], i1 = face[(seg + 1) % 3];
  double ax = proj.at(i0, 0), ay = proj.at(i0, 1);
  double bx = proj.at(i1, 0), by = proj.at(i1, 1);
  double mx = ax + tau * (bx - ax), my = ay + tau * (by - ay);
  double dx = px - mx, dy = py - my;
  gproj.at(i0, 0) += gd2 * (-2.0) * (1.0 - tau) * dx;
  gproj.at(i0, 1) += gd2 * (-2.0) * (1.0 - tau) * dy;
  gproj.at(i1, 0) += gd2 * (-2.0) * tau * dx;
  gproj.at(i1, 1) += gd2 * (-2.0) * tau * dy;
}

struct SilEntry {
  int face;
  double D, tau, sign;
  int seg;
};

// silhouette over an already-projected [k,2] tensor
Var silhouette_node(const Var& proj, const std::vector<std::array<std::size_t, 3>>& faces,
                    const RenderConfig& cfg) {
  const Tensor& pv = proj.value();
  check_faces("render_silhouette", faces, pv.rows());
  int W = cfg.image_size, H = cfg.image_size;
  if (W < 8) fail("render_silhouette", "image size must be at least 8");
  if (cfg.sigma <= 0) fail("render_silhouette", "sigma must be positive");
  if (cfg.gamma <= 0) fail("render_silhouette", "gamma must be positive");
  double dil = 3.0 * std::sqrt(cfg.sigma);

  auto grid = std::make_shared<std::vector<std::vector<SilEntry>>>(
      static_cast<std::size_t>(W) * H);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& fc = faces[f];
    std::array<double, 2> a{pv.at(fc[0], 0), pv.at(fc[0], 1)};
    std::array<double, 2> b{pv.at(fc[1], 0), pv.at(fc[1], 1)};
    std::array<double, 2> c{pv.at(fc[2], 0), pv.at(fc[2], 1)};
    PixelRect rect = pixel_range(std::min({a[0], b[0], c[0]}) - dil, std::max({a[0], b[0], c[0]}) + dil,
                                 std::min({a[1], b[1], c[1]}) - dil, std::max({a[1], b[1], c[1]}) + dil,
                                 W, H);
    for (int r = rect.r0; r <= rect.r1; ++r)
      for (int cc = rect.c0; cc <= rect.c1; ++cc) {
        TriHit h = tri_hit(pixel_x(cc, W), pixel_y(r, H), a, b, c);
        double D = stable_sigmoid(h.sign * h.d2 / cfg.sigma);
        if (D > 0)
          (*grid)[r * W + cc].push_back({static_cast<int>(f), D, h.tau, h.sign, h.seg});
      }
  }

  Tensor out({static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
  for (std::size_t p = 0; p < out.numel(); ++p) {
    double prod = 1.0;
    for (const SilEntry& e : (*grid)[p]) prod *= 1.0 - e.D;
    out[p] = 1.0 - prod;
  }

  if (!proj.on_tape()) return Var(std::move(out));
  int pp = proj.node();
  auto projp = proj.ptr();
  auto fcs = std::make_shared<std::vector<std::array<std::size_t, 3>>>(faces);
  double sigma = cfg.sigma;
  return proj.tape()->record(std::move(out), {proj}, [pp, projp, fcs, grid, W, H, sigma](
                                                         const Tensor& g, GradientMap& gm) {
    Tensor& gproj = gm.ensure(pp, projp->shape());
    std::vector<double> pref, suf;
    for (int r = 0; r < H; ++r)
      for (int cc = 0; cc < W; ++cc) {
        const auto& entries = (*grid)[r * W + cc];
        if (entries.empty()) continue;
        double gpix = g.at(r, cc);
        if (gpix == 0) continue;
        std::size_t n = entries.size();
        // exclusive products of (1 - D) so saturated entries stay exact
        pref.assign(n + 1, 1.0);
        suf.assign(n + 1, 1.0);
        for (std::size_t i = 0; i < n; ++i) pref[i + 1] = pref[i] * (1.0 - entries[i].D);
        for (std::size_t i = n; i > 0; --i) suf[i - 1] = suf[i] * (1.0 - entries[i - 1].D);
        for (std::size_t i = 0; i < n; ++i) {
          const SilEntry& e = entries[i];
          double gD = gpix * pref[i] * suf[i + 1];
          double gd2 = gD * e.D * (1.0 - e.D) * e.sign / sigma;
          if (gd2 == 0) continue;
          segment_grad(gproj, (*fcs)[e.face], e.seg, e.tau, pixel_x(cc, W), pixel_y(r, H),
                       *projp, gd2);
        }
      }
  });
}

struct ColEntry {
  int face;
  double D, tau, sign;
  int seg;
  double w, eoverS;     // aggregation weight and exp(zbar/gamma)/S
  double zbar;
  bool zsat;            // zbar hit the [0,1] clamp: no depth gradient
  std::array<double, 3> bary;
  std::array<std::size_t, 4> tex;  // plane-relative texel indices
  std::array<double, 4> twt;       // bilinear weights
  std::array<double, 3> color;
};

}  // namespace

double face_probability(const std::array<double, 2>& pixel,
                        const std::array<std::array<double, 2>, 3>& tri, double sigma) {
  if (sigma <= 0) fail("face_probability", "sigma must be positive");
  TriHit h = tri_hit(pixel[0], pixel[1], tri[0], tri[1], tri[2]);
  return stable_sigmoid(h.sign * h.d2 / sigma);
}

Var render_silhouette(const Var& vertices, const std::vector<std::array<std::size_t, 3>>& faces,
                      const PoseVars& pose, const RenderConfig& cfg) {
  Projected proj = project_weak_perspective(vertices, pose);
  return silhouette_node(proj.xy, faces, cfg);
}

RenderOutput render_color(const Var& vertices, const Mesh& topology, const Var& texture,
                          const PoseVars& pose, const RenderConfig& cfg) {
  if (!topology.has_uv() || topology.uv_faces.size() != topology.faces.size())
    fail("render_color", "mesh topology must carry a UV chart");
  const Tensor& tv = texture.value();
  if (tv.ndim() != 3 || tv.dim(0) != 3 || tv.dim(1) == 0 || tv.dim(2) == 0)
    fail("render_color", "texture must be [3,Ht,Wt], got " + shape_str(tv.shape()));
  if (cfg.gamma <= 0) fail("render_color", "gamma must be positive");
  int W = cfg.image_size, H = cfg.image_size;
  if (W < 8) fail("render_color", "image size must be at least 8");
  if (cfg.sigma <= 0) fail("render_color", "sigma must be positive");
  std::size_t Ht = tv.dim(1), Wt = tv.dim(2);

  Projected proj = project_weak_perspective(vertices, pose);
  Var mask = silhouette_node(proj.xy, topology.faces, cfg);

  const Tensor& pv = proj.xy.value();
  const Tensor& dv = proj.depth.value();
  check_faces("render_color", topology.faces, pv.rows());

  // per-view depth normalization (first extreme wins on ties)
  std::size_t argmin = 0, argmax = 0;
  for (std::size_t i = 1; i < dv.numel(); ++i) {
    if (dv[i] < dv[argmin]) argmin = i;
    if (dv[i] > dv[argmax]) argmax = i;
  }
  double zmin = dv[argmin];
  double zspread = dv[argmax] - zmin;
  double zr = zspread + 1e-8;
  // a view with no depth spread (front-parallel scene) has no occlusion
  // signal: score every face as nearest instead of letting the background
  // term win against exp(0)
  bool zdegen = zspread < 1e-8;

  double dil = 3.0 * std::sqrt(cfg.sigma);
  auto grid = std::make_shared<std::vector<std::vector<ColEntry>>>(static_cast<std::size_t>(W) * H);

  auto sample_texture = [&](double u, double vcoord, ColEntry& e) {
    u -= std::floor(u);  // azimuth wraps
    double vc = std::clamp(vcoord, 0.0, 1.0);
    double tx = u * static_cast<double>(Wt) - 0.5;
    double ty = (1.0 - vc) * static_cast<double>(Ht) - 0.5;
    long x0 = static_cast<long>(std::floor(tx));
    long y0 = static_cast<long>(std::floor(ty));
    double fx = tx - x0, fy = ty - y0;
    long x0w = ((x0 % static_cast<long>(Wt)) + Wt) % static_cast<long>(Wt);
    long x1w = ((x0 + 1) % static_cast<long>(Wt) + Wt) % static_cast<long>(Wt);
    long y0c = std::clamp(y0, 0L, static_cast<long>(Ht) - 1);
    long y1c = std::clamp(y0 + 1, 0L, static_cast<long>(Ht) - 1);
    e.tex = {static_cast<std::size_t>(y0c * Wt + x0w), static_cast<std::size_t>(y0c * Wt + x1w),
             static_cast<std::size_t>(y1c * Wt + x0w), static_cast<std::size_t>(y1c * Wt + x1w)};
    e.twt = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    for (int ch = 0; ch < 3; ++ch) {
      const double* plane = tv.data() + ch * Ht * Wt;
      e.color[ch] = e.twt[0] * plane[e.tex[0]] + e.twt[1] * plane[e.tex[1]] +
                    e.twt[2] * plane[e.tex[2]] + e.twt[3] * plane[e.tex[3]];
    }
  };

  for (std::size_t f = 0; f < topology.faces.size(); ++f) {
    const auto& fc = topology.faces[f];
    const auto& tf = topology.uv_faces[f];
    std::array<double, 2> a{pv.at(fc[0], 0), pv.at(fc[0], 1)};
    std::array<double, 2> b{pv.at(fc[1], 0), pv.at(fc[1], 1)};
    std::array<double, 2> c{pv.at(fc[2], 0), pv.at(fc[2], 1)};
    PixelRect rect = pixel_range(std::min({a[0], b[0], c[0]}) - dil, std::max({a[0], b[0], c[0]}) + dil,
                                 std::min({a[1], b[1], c[1]}) - dil, std::max({a[1], b[1], c[1]}) + dil,
                                 W, H);
    for (int r = rect.r0; r <= rect.r1; ++r)
      for (int cc = rect.c0; cc <= rect.c1; ++cc) {
        TriHit h = tri_hit(pixel_x(cc, W), pixel_y(r, H), a, b, c);
        double D = stable_sigmoid(h.sign * h.d2 / cfg.sigma);
        // negligible faces are dropped so the depth softmax denominator stays
        // bounded away from zero (far below the bbox truncation error anyway)
        if (D < 1e-12) continue;
        ColEntry e;
        e.face = static_cast<int>(f);
        e.D = D;
        e.tau = h.tau;
        e.sign = h.sign;
        e.seg = h.seg;
        e.bary = h.bary;
        double zf = h.bary[0] * dv[fc[0]] + h.bary[1] * dv[fc[1]] + h.bary[2] * dv[fc[2]];
        // pixels outside the face extrapolate zf arbitrarily far; saturate so
        // exp(zbar/gamma) stays representable
        double zfn = zdegen ? 1.0 : (zf - zmin) / zr;
        e.zbar = std::clamp(zfn, 0.0, 1.0);
        e.zsat = zdegen || zfn < 0.0 || zfn > 1.0;
        double u = h.bary[0] * topology.uv[tf[0]][0] + h.bary[1] * topology.uv[tf[1]][0] +
                   h.bary[2] * topology.uv[tf[2]][0];
        double vc = h.bary[0] * topology.uv[tf[0]][1] + h.bary[1] * topology.uv[tf[1]][1] +
                    h.bary[2] * topology.uv[tf[2]][1];
        sample_texture(u, vc, e);
        (*grid)[r * W + cc].push_back(e);
      }
  }

  Tensor rgb({3, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
  auto wbg_store = std::make_shared<std::vector<double>>(static_cast<std::size_t>(W) * H, 1.0);
  std::size_t npix = static_cast<std::size_t>(W) * H;
  for (std::size_t p = 0; p < npix; ++p) {
    auto& entries = (*grid)[p];
    double mexp = cfg.eps_bg / cfg.gamma;
    for (const ColEntry& e : entries) mexp = std::max(mexp, e.zbar / cfg.gamma);
    double ebg = std::exp(cfg.eps_bg / cfg.gamma - mexp);
    double S = ebg;
    for (ColEntry& e : entries) {
      e.eoverS = std::exp(e.zbar / cfg.gamma - mexp);  // scaled e_j until S is known
      S += e.D * e.eoverS;
    }
    double wbg = ebg / S;
    (*wbg_store)[p] = wbg;
    double out[3] = {wbg * cfg.background[0], wbg * cfg.background[1], wbg * cfg.background[2]};
    for (ColEntry& e : entries) {
      e.eoverS /= S;
      e.w = e.D * e.eoverS;
      for (int ch = 0; ch < 3; ++ch) out[ch] += e.w * e.color[ch];
    }
    for (int ch = 0; ch < 3; ++ch) rgb[ch * npix + p] = out[ch];
  }

  Tape* tape = proj.xy.tape();
  if (!tape && texture.on_tape()) tape = texture.tape();
  if (!tape) return {Var(std::move(rgb)), mask};

  int pproj = proj.xy.node(), pdepth = proj.depth.node(), ptex = texture.node();
  auto projp = proj.xy.ptr();
  auto depthp = proj.depth.ptr();
  auto fcs = std::make_shared<std::vector<std::array<std::size_t, 3>>>(topology.faces);
  double sigma = cfg.sigma, gamma = cfg.gamma;
  std::array<double, 3> bg = cfg.background;
  Shape texshape = tv.shape();
  Var rgb_var = tape->record(
      std::move(rgb), {proj.xy, proj.depth, texture},
      [pproj, pdepth, ptex, projp, depthp, fcs, grid, wbg_store, W, H, sigma, gamma, bg, texshape,
       Ht, Wt, argmin, argmax, zr](const Tensor& g, GradientMap& gm) {
        std::size_t npix = static_cast<std::size_t>(W) * H;
        Tensor* gproj = pproj >= 0 ? &gm.ensure(pproj, projp->shape()) : nullptr;
        Tensor* gdepth = pdepth >= 0 ? &gm.ensure(pdepth, depthp->shape()) : nullptr;
        Tensor* gtex = ptex >= 0 ? &gm.ensure(ptex, texshape) : nullptr;
        double gzmin = 0, gzmax = 0;
        for (int r = 0; r < H; ++r)
          for (int cc = 0; cc < W; ++cc) {
            std::size_t p = static_cast<std::size_t>(r) * W + cc;
            const auto& entries = (*grid)[p];
            if (entries.empty()) continue;
            double gch[3] = {g[0 * npix + p], g[1 * npix + p], g[2 * npix + p]};
            if (gch[0] == 0 && gch[1] == 0 && gch[2] == 0) continue;
            // dL/dw for each entry and the background, then the softmax pullback
            double dLdwbg = gch[0] * bg[0] + gch[1] * bg[1] + gch[2] * bg[2];
            double A = dLdwbg * (*wbg_store)[p];
            std::vector<double> dLdw(entries.size());
            for (std::size_t i = 0; i < entries.size(); ++i) {
              const ColEntry& e = entries[i];
              dLdw[i] = gch[0] * e.color[0] + gch[1] * e.color[1] + gch[2] * e.color[2];
              A += dLdw[i] * e.w;
            }
            for (std::size_t i = 0; i < entries.size(); ++i) {
              const ColEntry& e = entries[i];
              const auto& fc = (*fcs)[e.face];
              if (gtex) {
                for (int ch = 0; ch < 3; ++ch) {
                  double gc = gch[ch] * e.w;
                  if (gc == 0) continue;
                  double* plane = gtex->data() + ch * Ht * Wt;
                  for (int t = 0; t < 4; ++t) plane[e.tex[t]] += gc * e.twt[t];
                }
              }
              double gD = e.eoverS * (dLdw[i] - A);
              double gzbar = (e.w / gamma) * (dLdw[i] - A);
              if (gproj) {
                double gd2 = gD * e.D * (1.0 - e.D) * e.sign / sigma;
                if (gd2 != 0)
                  segment_grad(*gproj, fc, e.seg, e.tau, pixel_x(cc, W), pixel_y(r, H), *projp, gd2);
              }
              if (gdepth && gzbar != 0 && !e.zsat) {
                for (int t = 0; t < 3; ++t) (*gdepth)[fc[t]] += gzbar * e.bary[t] / zr;
                gzmin += gzbar * (e.zbar - 1.0) / zr;
                gzmax += gzbar * (-e.zbar) / zr;
              }
            }
          }
        // the normalization bounds belong to the extreme-depth vertices
        if (gdepth) {
          (*gdepth)[argmin] += gzmin;
          (*gdepth)[argmax] += gzmax;
        }
      });
  return {rgb_var, mask};
}

}  // namespace meshrecon
