#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "meshrecon/tensor.hpp"

namespace meshrecon {

// Triangle mesh with an optional UV chart.  The chart is indexed separately
// (OBJ-style v/vt): a seam face references duplicated UV entries whose u was
// shifted by 1 so interpolation never wraps, while the 3-D vertex stays
// shared.  Geometry counts (Euler characteristic, vertex totals) therefore
// never depend on texturing.
struct Mesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<std::size_t, 3>> faces;
  std::vector<std::array<double, 2>> uv;               // empty when untextured
  std::vector<std::array<std::size_t, 3>> uv_faces;    // parallel to faces when uv present

  bool has_uv() const { return !uv.empty(); }
};

// throws when face indices are out of range, coordinates are non-finite, or
// the uv chart is inconsistent with the face list
void validate_mesh(const Mesh& m, const std::string& context = "mesh");

std::size_t edge_count(const Mesh& m);
long long euler_characteristic(const Mesh& m);  // V - E + F
bool is_watertight(const Mesh& m);              // every edge shared by exactly two faces

// Unit sphere built by repeatedly splitting the icosahedron and reprojecting
// onto the sphere.  Level 1 is the icosahedron itself (12 V / 20 F); each
// level above that quadruples the faces, so level 3 has 162 V / 320 F.
// Level 0 is accepted as an alias of level 1.  Levels above 7 are rejected
// (memory guard).  The result carries spherical UV with seam duplicates.
Mesh icosphere(int level);

// One 1->4 midpoint split for arbitrary triangle meshes: no reprojection, no
// smoothing.  Midpoints are deduplicated per undirected edge; UV midpoints
// average the chart entries per chart edge.  Edges shared by more than two
// faces are rejected.
Mesh subdivide(const Mesh& m);

// The split as a reusable recipe, so several vertex sets over one face list
// (a meanshape bank) subdivide identically and stay row-aligned.
struct SubdivisionPlan {
  std::size_t old_vertex_count = 0;
  std::vector<std::array<std::size_t, 2>> edges;        // new vertex i = old_count + i, midpoint of edges[i]
  std::vector<std::array<std::size_t, 3>> faces;        // faces after the split
  std::size_t new_vertex_count() const { return old_vertex_count + edges.size(); }
};

SubdivisionPlan make_subdivision_plan(const Mesh& m);
// apply to a [k,3] vertex tensor (rows beyond the plan's vertex count are an error)
Tensor subdivide_vertices(const SubdivisionPlan& plan, const Tensor& v);

// Uniform (graph) Laplacian in CSR form: (L x)_i = x_i - mean of x over the
// 1-ring of vertex i.  Isolated vertices are an error.
struct SparseMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> row_ptr;  // rows+1 offsets
  std::vector<std::size_t> col;
  std::vector<double> val;
};

SparseMatrix uniform_laplacian(const Mesh& m);
// differentiable y = L x for x of shape [k,d]; backward applies L^T
Var laplacian_apply(const SparseMatrix& lap, const Var& x);

// Spherical parameterization of a direction: u from the azimuth, v from the
// inclination, both in [0,1].  A vector too close to the origin has no
// well-defined direction and is rejected.
std::array<double, 2> sphere_uv(const std::array<double, 3>& v);

// position <-> tensor bridges used by the model (which stores vertex sets as
// [k,3] tensors) and the exporters
Tensor vertices_tensor(const Mesh& m);
Mesh with_vertices(const Mesh& topology, const Tensor& v);  // same faces/uv, new positions

// Wavefront OBJ, ASCII, 1-based indices, 6 decimal places.  Faces are written
// as "f a b c" or "f a/ta b/tb c/tc" when a UV chart is present.  The reader
// accepts v/vt/f plus ignorable records and reports malformed input with a
// line number.
void export_obj(const Mesh& m, const std::string& path);
Mesh import_obj(const std::string& path);

}  // namespace meshrecon
