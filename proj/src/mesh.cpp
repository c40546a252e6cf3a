#include "meshrecon/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace meshrecon {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::runtime_error(where + ": " + msg);
}

using EdgeKey = std::pair<std::size_t, std::size_t>;

EdgeKey edge_key(std::size_t a, std::size_t b) { return {std::min(a, b), std::max(a, b)}; }

}  // namespace

void validate_mesh(const Mesh& m, const std::string& context) {
  for (const auto& v : m.vertices)
    for (double c : v)
      if (!std::isfinite(c)) fail(context, "non-finite vertex coordinate");
  for (const auto& f : m.faces) {
    for (std::size_t i : f)
      if (i >= m.vertices.size())
        fail(context, "face index " + std::to_string(i) + " out of range (" +
                          std::to_string(m.vertices.size()) + " vertices)");
    if (f[0] == f[1] || f[1] == f[2] || f[2] == f[0])
      fail(context, "degenerate face (repeated vertex index)");
  }
  if (m.has_uv()) {
    if (m.uv_faces.size() != m.faces.size())
      fail(context, "uv chart present but uv_faces does not match the face list");
    for (const auto& f : m.uv_faces)
      for (std::size_t i : f)
        if (i >= m.uv.size()) fail(context, "uv index out of range");
  } else if (!m.uv_faces.empty()) {
    fail(context, "uv_faces present without uv entries");
  }
}

std::size_t edge_count(const Mesh& m) {
  std::set<EdgeKey> edges;
  for (const auto& f : m.faces) {
    edges.insert(edge_key(f[0], f[1]));
    edges.insert(edge_key(f[1], f[2]));
    edges.insert(edge_key(f[2], f[0]));
  }
  return edges.size();
}

long long euler_characteristic(const Mesh& m) {
  return static_cast<long long>(m.vertices.size()) - static_cast<long long>(edge_count(m)) +
         static_cast<long long>(m.faces.size());
}

bool is_watertight(const Mesh& m) {
  std::map<EdgeKey, int> uses;
  for (const auto& f : m.faces) {
    ++uses[edge_key(f[0], f[1])];
    ++uses[edge_key(f[1], f[2])];
    ++uses[edge_key(f[2], f[0])];
  }
  for (const auto& [e, n] : uses)
    if (n != 2) return false;
  return !m.faces.empty();
}

// ---- subdivision -----------------------------------------------------------

SubdivisionPlan make_subdivision_plan(const Mesh& m) {
  validate_mesh(m, "make_subdivision_plan");
  SubdivisionPlan plan;
  plan.old_vertex_count = m.vertices.size();

  std::map<EdgeKey, std::size_t> edge_ids;
  std::map<EdgeKey, int> edge_uses;
  auto midpoint_id = [&](std::size_t a, std::size_t b) {
    EdgeKey k = edge_key(a, b);
    auto it = edge_ids.find(k);
    if (it != edge_ids.end()) return it->second;
    std::size_t id = plan.old_vertex_count + plan.edges.size();
    plan.edges.push_back({k.first, k.second});
    edge_ids.emplace(k, id);
    return id;
  };

  for (const auto& f : m.faces) {
    for (int e = 0; e < 3; ++e) {
      int n = ++edge_uses[edge_key(f[e], f[(e + 1) % 3])];
      if (n > 2)
        fail("subdivide", "edge (" + std::to_string(f[e]) + "," + std::to_string(f[(e + 1) % 3]) +
                              ") is shared by more than two faces");
    }
    std::size_t a = f[0], b = f[1], c = f[2];
    std::size_t ab = midpoint_id(a, b), bc = midpoint_id(b, c), ca = midpoint_id(c, a);
    // corner triangles keep the parent's winding; the center one follows
    plan.faces.push_back({a, ab, ca});
    plan.faces.push_back({b, bc, ab});
    plan.faces.push_back({c, ca, bc});
    plan.faces.push_back({ab, bc, ca});
  }
  return plan;
}

Tensor subdivide_vertices(const SubdivisionPlan& plan, const Tensor& v) {
  if (v.ndim() != 2 || v.dim(0) != plan.old_vertex_count)
    fail("subdivide_vertices", "vertex tensor " + shape_str(v.shape()) + " does not match plan (" +
                                   std::to_string(plan.old_vertex_count) + " vertices)");
  std::size_t d = v.cols();
  Tensor out({plan.new_vertex_count(), d});
  std::copy_n(v.data(), v.numel(), out.data());
  for (std::size_t e = 0; e < plan.edges.size(); ++e) {
    std::size_t row = plan.old_vertex_count + e;
    for (std::size_t c = 0; c < d; ++c)
      out.at(row, c) = 0.5 * (v.at(plan.edges[e][0], c) + v.at(plan.edges[e][1], c));
  }
  return out;
}

Mesh subdivide(const Mesh& m) {
  SubdivisionPlan plan = make_subdivision_plan(m);
  Mesh out;
  out.vertices.resize(plan.new_vertex_count());
  std::copy(m.vertices.begin(), m.vertices.end(), out.vertices.begin());
  for (std::size_t e = 0; e < plan.edges.size(); ++e) {
    const auto& va = m.vertices[plan.edges[e][0]];
    const auto& vb = m.vertices[plan.edges[e][1]];
    out.vertices[plan.old_vertex_count + e] = {0.5 * (va[0] + vb[0]), 0.5 * (va[1] + vb[1]),
                                               0.5 * (va[2] + vb[2])};
  }
  out.faces = plan.faces;

  if (m.has_uv()) {
    // the chart splits by its own edge identity, so seam-side midpoints stay
    // distinct even though the 3-D midpoint is shared
    out.uv = m.uv;
    std::map<EdgeKey, std::size_t> uv_edge_ids;
    auto uv_mid = [&](std::size_t a, std::size_t b) {
      EdgeKey k = edge_key(a, b);
      auto it = uv_edge_ids.find(k);
      if (it != uv_edge_ids.end()) return it->second;
      std::size_t id = out.uv.size();
      out.uv.push_back({0.5 * (m.uv[k.first][0] + m.uv[k.second][0]),
                        0.5 * (m.uv[k.first][1] + m.uv[k.second][1])});
      uv_edge_ids.emplace(k, id);
      return id;
    };
    for (const auto& f : m.uv_faces) {
      std::size_t a = f[0], b = f[1], c = f[2];
      std::size_t ab = uv_mid(a, b), bc = uv_mid(b, c), ca = uv_mid(c, a);
      out.uv_faces.push_back({a, ab, ca});
      out.uv_faces.push_back({b, bc, ab});
      out.uv_faces.push_back({c, ca, bc});
      out.uv_faces.push_back({ab, bc, ca});
    }
  }
  return out;
}

// ---- icosphere -------------------------------------------------------------

namespace {

Mesh icosahedron() {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh m;
  m.vertices = {{-1, t, 0}, {1, t, 0},   {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (auto& v : m.vertices) {
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    v = {v[0] / n, v[1] / n, v[2] / n};
  }
  return m;
}

void project_to_unit_sphere(Mesh& m) {
  for (auto& v : m.vertices) {
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    v = {v[0] / n, v[1] / n, v[2] / n};
  }
}

// per-vertex spherical UV, then duplicate chart entries for faces whose u
// span exceeds 0.5 (they straddle the azimuth wrap)
void assign_sphere_uv(Mesh& m) {
  m.uv.clear();
  m.uv_faces.clear();
  m.uv.reserve(m.vertices.size());
  for (const auto& v : m.vertices) m.uv.push_back(sphere_uv(v));
  m.uv_faces.reserve(m.faces.size());
  std::map<std::size_t, std::size_t> shifted;  // original uv id -> u+1 duplicate
  for (const auto& f : m.faces) {
    std::array<std::size_t, 3> uvf = {f[0], f[1], f[2]};
    double umax = std::max({m.uv[f[0]][0], m.uv[f[1]][0], m.uv[f[2]][0]});
    double umin = std::min({m.uv[f[0]][0], m.uv[f[1]][0], m.uv[f[2]][0]});
    if (umax - umin > 0.5) {
      for (int i = 0; i < 3; ++i) {
        if (m.uv[f[i]][0] < umax - 0.5) {
          auto it = shifted.find(f[i]);
          if (it == shifted.end()) {
            std::size_t id = m.uv.size();
            m.uv.push_back({m.uv[f[i]][0] + 1.0, m.uv[f[i]][1]});
            it = shifted.emplace(f[i], id).first;
          }
          uvf[i] = it->second;
        }
      }
    }
    m.uv_faces.push_back(uvf);
  }
}

}  // namespace

Mesh icosphere(int level) {
  if (level < 0) fail("icosphere", "level must be non-negative");
  if (level > 7) fail("icosphere", "level " + std::to_string(level) + " exceeds the supported maximum of 7");
  Mesh m = icosahedron();
  // the base solid counts as level 1; level 0 is the same solid
  for (int l = 1; l < level; ++l) {
    m.uv.clear();
    m.uv_faces.clear();
    m = subdivide(m);
    project_to_unit_sphere(m);
  }
  assign_sphere_uv(m);
  return m;
}

// ---- Laplacian -------------------------------------------------------------

SparseMatrix uniform_laplacian(const Mesh& m) {
  validate_mesh(m, "uniform_laplacian");
  std::size_t k = m.vertices.size();
  std::vector<std::set<std::size_t>> ring(k);
  for (const auto& f : m.faces)
    for (int e = 0; e < 3; ++e) {
      std::size_t a = f[e], b = f[(e + 1) % 3];
      if (a != b) {
        ring[a].insert(b);
        ring[b].insert(a);
      }
    }
  SparseMatrix lap;
  lap.rows = lap.cols = k;
  lap.row_ptr.assign(k + 1, 0);
  for (std::size_t i = 0; i < k; ++i) {
    if (ring[i].empty())
      fail("uniform_laplacian", "vertex " + std::to_string(i) + " has no neighbors");
    lap.row_ptr[i + 1] = lap.row_ptr[i] + ring[i].size() + 1;
  }
  lap.col.reserve(lap.row_ptr[k]);
  lap.val.reserve(lap.row_ptr[k]);
  for (std::size_t i = 0; i < k; ++i) {
    double w = -1.0 / static_cast<double>(ring[i].size());
    bool diag_written = false;
    // keep columns sorted so the row layout is deterministic
    for (std::size_t j : ring[i]) {
      if (!diag_written && j > i) {
        lap.col.push_back(i);
        lap.val.push_back(1.0);
        diag_written = true;
      }
      lap.col.push_back(j);
      lap.val.push_back(w);
    }
    if (!diag_written) {
      lap.col.push_back(i);
      lap.val.push_back(1.0);
    }
  }
  return lap;
}

Var laplacian_apply(const SparseMatrix& lap, const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2 || xv.rows() != lap.cols)
    fail("laplacian_apply", "expected [" + std::to_string(lap.cols) + ",d], got " + shape_str(xv.shape()));
  std::size_t d = xv.cols();
  Tensor out({lap.rows, d});
  for (std::size_t r = 0; r < lap.rows; ++r)
    for (std::size_t e = lap.row_ptr[r]; e < lap.row_ptr[r + 1]; ++e) {
      double w = lap.val[e];
      const double* src = xv.data() + lap.col[e] * d;
      double* dst = out.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += w * src[c];
    }
  if (!x.on_tape()) return Var(std::move(out));
  int px = x.node();
  Shape sh = xv.shape();
  // the closure keeps its own copy of the CSR arrays: the caller's matrix may
  // be rebuilt (e.g. after a subdivision event) before backward runs
  auto L = std::make_shared<SparseMatrix>(lap);
  return x.tape()->record(std::move(out), {x}, [px, sh, d, L](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, sh);
    for (std::size_t r = 0; r < L->rows; ++r)
      for (std::size_t e = L->row_ptr[r]; e < L->row_ptr[r + 1]; ++e) {
        double w = L->val[e];
        const double* src = g.data() + r * d;
        double* dst = gx.data() + L->col[e] * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += w * src[c];
      }
  });
}

Tensor vertices_tensor(const Mesh& m) {
  Tensor out({m.vertices.size(), 3});
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    for (int c = 0; c < 3; ++c) out.at(i, c) = m.vertices[i][c];
  return out;
}

Mesh with_vertices(const Mesh& topology, const Tensor& v) {
  if (v.ndim() != 2 || v.dim(1) != 3 || v.dim(0) != topology.vertices.size())
    fail("with_vertices", "vertex tensor " + shape_str(v.shape()) + " does not match topology (" +
                              std::to_string(topology.vertices.size()) + " vertices)");
  Mesh out = topology;
  for (std::size_t i = 0; i < out.vertices.size(); ++i)
    for (int c = 0; c < 3; ++c) out.vertices[i][c] = v.at(i, c);
  return out;
}

// ---- UV --------------------------------------------------------------------

std::array<double, 2> sphere_uv(const std::array<double, 3>& v) {
  double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (n < 1e-12) fail("sphere_uv", "vector too close to the origin has no direction");
  double u = std::atan2(v[1], v[0]) / (2.0 * M_PI) + 0.5;
  double w = std::asin(std::clamp(v[2] / n, -1.0, 1.0)) / M_PI + 0.5;
  return {u, w};
}

// ---- OBJ -------------------------------------------------------------------

void export_obj(const Mesh& m, const std::string& path) {
  validate_mesh(m, "export_obj");
  std::string tmp = path + ".tmp";  // rename at the end: no partial files
  {
    std::ofstream out(tmp);
    if (!out) fail("export_obj", "cannot open " + tmp + " for writing");
    char buf[128];
    for (const auto& v : m.vertices) {
      std::snprintf(buf, sizeof buf, "v %.6f %.6f %.6f\n", v[0], v[1], v[2]);
      out << buf;
    }
    for (const auto& t : m.uv) {
      std::snprintf(buf, sizeof buf, "vt %.6f %.6f\n", t[0], t[1]);
      out << buf;
    }
    if (m.has_uv()) {
      for (std::size_t i = 0; i < m.faces.size(); ++i) {
        const auto& f = m.faces[i];
        const auto& tf = m.uv_faces[i];
        out << "f " << f[0] + 1 << '/' << tf[0] + 1 << ' ' << f[1] + 1 << '/' << tf[1] + 1 << ' '
            << f[2] + 1 << '/' << tf[2] + 1 << '\n';
      }
    } else {
      for (const auto& f : m.faces)
        out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    }
    if (!out) fail("export_obj", "write to " + tmp + " failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    fail("export_obj", "cannot move " + tmp + " into place");
}

namespace {

[[noreturn]] void obj_fail(const std::string& path, std::size_t line, const std::string& msg) {
  throw std::runtime_error("import_obj: " + path + ":" + std::to_string(line) + ": " + msg);
}

}  // namespace

Mesh import_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("import_obj: cannot open " + path);
  Mesh m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) obj_fail(path, lineno, "malformed vertex record");
      m.vertices.push_back({x, y, z});
    } else if (tag == "vt") {
      double u, v;
      if (!(ss >> u >> v)) obj_fail(path, lineno, "malformed texture coordinate record");
      m.uv.push_back({u, v});
    } else if (tag == "f") {
      std::vector<long long> vids, tids;
      std::string corner;
      while (ss >> corner) {
        // accepted corner forms: "a", "a/t", "a//n", "a/t/n"
        std::size_t s1 = corner.find('/');
        std::string vtok = corner.substr(0, s1);
        std::string ttok;
        if (s1 != std::string::npos) {
          std::size_t s2 = corner.find('/', s1 + 1);
          ttok = corner.substr(s1 + 1, s2 == std::string::npos ? std::string::npos : s2 - s1 - 1);
        }
        try {
          vids.push_back(std::stoll(vtok));
        } catch (const std::exception&) {
          obj_fail(path, lineno, "malformed face corner '" + corner + "'");
        }
        if (!ttok.empty()) {
          try {
            tids.push_back(std::stoll(ttok));
          } catch (const std::exception&) {
            obj_fail(path, lineno, "malformed face corner '" + corner + "'");
          }
        }
      }
      if (vids.size() != 3)
        obj_fail(path, lineno, "expected a triangle, got " + std::to_string(vids.size()) + " corners");
      if (!tids.empty() && tids.size() != 3)
        obj_fail(path, lineno, "face mixes corners with and without texture indices");
      std::array<std::size_t, 3> f{}, tf{};
      for (int i = 0; i < 3; ++i) {
        if (vids[i] <= 0) obj_fail(path, lineno, "indices must be positive (1-based)");
        f[i] = static_cast<std::size_t>(vids[i] - 1);
        if (!tids.empty()) {
          if (tids[i] <= 0) obj_fail(path, lineno, "indices must be positive (1-based)");
          tf[i] = static_cast<std::size_t>(tids[i] - 1);
        }
      }
      m.faces.push_back(f);
      if (!tids.empty()) m.uv_faces.push_back(tf);
    }
    // other records (vn, o, g, s, usemtl, mtllib, ...) are ignored
  }
  if (!m.uv_faces.empty() && m.uv_faces.size() != m.faces.size())
    throw std::runtime_error("import_obj: " + path + ": only some faces carry texture indices");
  if (m.uv.empty()) m.uv_faces.clear();
  validate_mesh(m, "import_obj: " + path);
  return m;
}

}  // namespace meshrecon
