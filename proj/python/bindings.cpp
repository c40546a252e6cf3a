#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "meshrecon/image.hpp"
#include "meshrecon/mesh.hpp"
#include "meshrecon/metrics.hpp"
#include "meshrecon/model.hpp"
#include "meshrecon/pose.hpp"
#include "meshrecon/render.hpp"
#include "meshrecon/synthdata.hpp"
#include "meshrecon/trainer.hpp"

namespace py = pybind11;
using namespace meshrecon;

namespace {

py::array_t<double> tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

Tensor array_to_tensor(const py::array& a) {
  auto arr = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(a);
  if (!arr) throw std::invalid_argument("expected a numeric array");
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = static_cast<std::size_t>(arr.shape(i));
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> vertices_array(const Mesh& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.vertices.size()), py::ssize_t(3)});
  auto* p = out.mutable_data();
  for (const auto& v : m.vertices) {
    *p++ = v[0];
    *p++ = v[1];
    *p++ = v[2];
  }
  return out;
}

py::array_t<std::size_t> faces_array(const Mesh& m) {
  py::array_t<std::size_t> out({static_cast<py::ssize_t>(m.faces.size()), py::ssize_t(3)});
  auto* p = out.mutable_data();
  for (const auto& f : m.faces) {
    *p++ = f[0];
    *p++ = f[1];
    *p++ = f[2];
  }
  return out;
}

py::array_t<double> pose_array(const Pose& p) {
  auto a = pose_to_array(p);
  py::array_t<double> out(py::ssize_t(7));
  std::copy(a.begin(), a.end(), out.mutable_data());
  return out;
}

Pose pose_from_pyarray(const py::array& a) {
  Tensor t = array_to_tensor(a);
  if (t.numel() != 7) throw std::invalid_argument("pose must have 7 entries [s,tx,ty,qw,qx,qy,qz]");
  std::array<double, 7> v;
  std::copy(t.data(), t.data() + 7, v.begin());
  return pose_from_array(v);
}

}  // namespace

PYBIND11_MODULE(meshrecon_py, m) {
  m.doc() = "multi-meanshape mesh reconstruction: geometry, rendering, training, evaluation";

  py::class_<Mesh>(m, "Mesh")
      .def_property_readonly("vertices", &vertices_array)
      .def_property_readonly("faces", &faces_array)
      .def_property_readonly("euler_characteristic", &euler_characteristic)
      .def_property_readonly("watertight", &is_watertight)
      .def("save_obj", [](const Mesh& mesh, const std::string& path) { export_obj(mesh, path); })
      .def("__repr__", [](const Mesh& mesh) {
        return "Mesh(" + std::to_string(mesh.vertices.size()) + " vertices, " +
               std::to_string(mesh.faces.size()) + " faces)";
      });

  m.def("icosphere", &icosphere, py::arg("level"),
        "unit icosphere; level 1 is the icosahedron, each level quadruples the faces");
  m.def("subdivide", &subdivide, py::arg("mesh"), "one 1->4 midpoint split");
  m.def("load_obj", &import_obj, py::arg("path"));

  py::class_<ModelParams>(m, "Model")
      .def_property_readonly("num_meanshapes",
                             [](const ModelParams& p) { return p.config.num_meanshapes; })
      .def_property_readonly("bank_level", [](const ModelParams& p) { return p.bank_level; })
      .def_property_readonly("head_parameter_count", &ModelParams::head_parameter_count)
      .def_property_readonly("meanshapes",
                             [](const ModelParams& p) {
                               py::list out;
                               for (int i = 0; i < p.config.num_meanshapes; ++i) {
                                 const Tensor& b = p.tensors.at("bank." + std::to_string(i));
                                 out.append(with_vertices(p.topology, b));
                               }
                               return out;
                             })
      .def("save", [](const ModelParams& p, const std::string& path) { save_checkpoint(path, p); })
      .def("__repr__", [](const ModelParams& p) {
        return "Model(N=" + std::to_string(p.config.num_meanshapes) +
               ", bank_level=" + std::to_string(p.bank_level) + ")";
      });

  m.def(
      "init_model",
      [](int num_meanshapes, int base_level, std::uint64_t seed) {
        ModelConfig cfg;
        cfg.num_meanshapes = num_meanshapes;
        cfg.base_level = base_level;
        return init_model(cfg, seed);
      },
      py::arg("num_meanshapes") = 2, py::arg("base_level") = 3, py::arg("seed") = 0);
  m.def("load_model", [](const std::string& path) { return load_checkpoint(path).params; },
        py::arg("path"));

  m.def(
      "infer",
      [](const ModelParams& params, const py::array& image, const py::array& mask) {
        InferenceResult r = infer(params, array_to_tensor(image), array_to_tensor(mask));
        py::dict out;
        out["meanshape"] = r.base;
        out["mesh"] = r.predicted;
        out["pose"] = pose_array(r.pose);
        out["texture"] = tensor_to_array(r.texture);
        out["weights"] = py::cast(r.weights);
        return out;
      },
      py::arg("model"), py::arg("image"), py::arg("mask"),
      "single-image reconstruction: meanshape, deformed mesh, pose, texture, selector weights");

  m.def(
      "render_silhouette",
      [](const py::array& vertices, const py::array& faces, const py::array& pose, int size,
         double sigma) {
        Tensor v = array_to_tensor(vertices);
        Tensor f = array_to_tensor(faces);
        if (f.ndim() != 2 || f.cols() != 3) throw std::invalid_argument("faces must be [m,3]");
        std::vector<std::array<std::size_t, 3>> fl(f.rows());
        for (std::size_t i = 0; i < f.rows(); ++i)
          fl[i] = {static_cast<std::size_t>(f.at(i, 0)), static_cast<std::size_t>(f.at(i, 1)),
                   static_cast<std::size_t>(f.at(i, 2))};
        RenderConfig cfg;
        cfg.image_size = size;
        cfg.sigma = sigma;
        Var sil = render_silhouette(Var(std::move(v)), fl, constant_pose_vars(pose_from_pyarray(pose)), cfg);
        return tensor_to_array(sil.value());
      },
      py::arg("vertices"), py::arg("faces"), py::arg("pose"), py::arg("size") = 64,
      py::arg("sigma") = 1e-5, "soft silhouette [H,W] of [k,3] vertices under a weak-perspective pose");

  m.def(
      "generate_dataset",
      [](const std::string& out, int classes, int samples, int size, std::uint64_t seed) {
        DatasetConfig cfg = default_dataset_config(classes);
        cfg.samples_per_class = samples;
        cfg.image_size = size;
        cfg.seed = seed;
        generate_dataset(cfg, out);
      },
      py::arg("out"), py::arg("classes") = 2, py::arg("samples") = 8, py::arg("size") = 32,
      py::arg("seed") = 7, "synthetic two- or four-class dataset with images, masks and manifest");

  m.def(
      "train",
      [](const std::string& config_json, const std::string& dataset, const std::string& out) {
        TrainConfig cfg = train_config_from_json(config_json);
        Trainer t(cfg, dataset, out);
        t.init();
        t.run();
        return t.checkpoint_path();
      },
      py::arg("config_json"), py::arg("dataset"), py::arg("out"),
      "run the full training loop; returns the final checkpoint path");

  m.def(
      "evaluate",
      [](const ModelParams& params, const std::string& dataset, const std::string& split,
         int voxel_resolution, bool voxel) {
        EvalOptions opts;
        opts.split = split;
        opts.voxel_resolution = voxel_resolution;
        opts.voxel_iou = voxel;
        return evaluate(params, dataset, opts).to_json();
      },
      py::arg("model"), py::arg("dataset"), py::arg("split") = "test",
      py::arg("voxel_resolution") = 16, py::arg("voxel") = true,
      "evaluation report as a JSON string");

  m.def("mask_iou", [](const py::array& a, const py::array& b) {
    return mask_iou(array_to_tensor(a), array_to_tensor(b));
  });
  m.def("ssim", [](const py::array& a, const py::array& b) {
    return ssim_metric(array_to_tensor(a), array_to_tensor(b));
  });
  m.def("voxel_iou",
        [](const Mesh& a, const Mesh& b, int res) { return voxel_3d_iou(a, b, res); },
        py::arg("a"), py::arg("b"), py::arg("resolution") = 32);

  m.def("read_png", [](const std::string& path) { return tensor_to_array(read_png(path)); });
  m.def("write_png",
        [](const py::array& img, const std::string& path) { write_png(array_to_tensor(img), path); });
}
