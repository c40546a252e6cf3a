#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "meshrecon/mesh.hpp"
#include "meshrecon/pose.hpp"
#include "meshrecon/tensor.hpp"

namespace meshrecon {

enum class PrimitiveKind { Sphere, Ellipsoid, Box, Capsule };

std::string to_string(PrimitiveKind k);
PrimitiveKind primitive_kind_from_string(const std::string& s);

struct PrimitiveSpec {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  // semi-axes for ellipsoid / half-extents for box (ignored for sphere)
  std::array<double, 3> axes = {1.0, 1.0, 1.0};
  double cap_half_length = 0.5;  // capsule cylinder half-length (radius is 1 before normalization)
  int level = 3;
};

// A closed triangle mesh obtained by deforming an icosphere, rescaled by the
// shape's analytic bounding-sphere radius so every vertex lies in the closed
// unit ball (the radius is exact even where no vertex samples the extreme
// point).  A plain sphere is bit-identical to icosphere(level).
Mesh primitive(const PrimitiveSpec& spec);

// Hard z-buffered rasterization with flat Lambertian shading.  Written from
// scratch against the same conventions as the soft renderer (NDC [-1,1]^2,
// pixel centers, +z toward the viewer) but sharing no code with it, so the
// two can be checked against each other.
struct ShadedRender {
  Tensor rgb;   // [3,H,W]
  Tensor mask;  // [H,W], exactly 0 or 1
};
ShadedRender rasterize_hard(const Mesh& mesh, const Pose& pose, int image_size,
                            const std::array<double, 3>& albedo);

struct ClassSpec {
  std::string name;
  PrimitiveKind kind = PrimitiveKind::Sphere;
  std::array<double, 3> axes_min = {1.0, 1.0, 1.0};
  std::array<double, 3> axes_max = {1.0, 1.0, 1.0};
  double cap_min = 0.4, cap_max = 0.7;
  std::array<double, 3> albedo = {0.8, 0.8, 0.8};
  int level = 3;
};

struct DatasetConfig {
  std::vector<ClassSpec> classes;
  int samples_per_class = 100;
  int image_size = 64;
  std::uint64_t seed = 0;
  double scale_min = 0.7, scale_max = 1.1;
  double elev_range = 0.5235987755982988;  // +/- 30 degrees
  double t_range = 0.1;
};

// Built-in two-class and four-class corpora used throughout the tests.
DatasetConfig default_dataset_config(int num_classes);
DatasetConfig dataset_config_from_json(const std::string& text);

struct ManifestEntry {
  std::string image;  // path relative to the dataset directory
  std::string mask;
  Pose pose;
  std::string label;
  std::string split;  // train | val | test
  PrimitiveSpec shape;
};

// Renders every sample, writes PNGs plus manifest.jsonl under out_dir.
// The same seed yields byte-identical files.
void generate_dataset(const DatasetConfig& cfg, const std::string& out_dir);

std::vector<ManifestEntry> read_manifest(const std::string& dataset_dir);

struct LoadedSample {
  Tensor image;  // [3,H,W]
  Tensor mask;   // [H,W]
  Pose pose;
  std::string label;
  PrimitiveSpec shape;
};
LoadedSample load_sample(const std::string& dataset_dir, const ManifestEntry& entry);

}  // namespace meshrecon
