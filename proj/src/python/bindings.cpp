// Python bindings for the core operations and the end-to-end model.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hsia/gradcheck.hpp"
#include "hsia/train.hpp"

namespace py = pybind11;
using namespace hsia;

namespace {

using ArrayF = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ArrayU8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

TensorT<float> to_tensor(const ArrayF& a) {
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
  auto t = make_tensor<float>(shape);
  std::copy(a.data(), a.data() + a.size(), t->data.begin());
  return t;
}

py::array_t<float> to_array(const TensorT<float>& t) {
  std::vector<py::ssize_t> shape(t->shape.begin(), t->shape.end());
  py::array_t<float> out(shape);
  std::copy(t->data.begin(), t->data.end(), out.mutable_data());
  return out;
}

HyperCube to_cube(const ArrayF& data, const ArrayU8& labels) {
  if (data.ndim() != 3) throw ShapeError("cube data must be [bands, h, w]");
  HyperCube cube;
  cube.bands = static_cast<int>(data.shape(0));
  cube.height = static_cast<int>(data.shape(1));
  cube.width = static_cast<int>(data.shape(2));
  cube.data.assign(data.data(), data.data() + data.size());
  cube.labels.assign(labels.data(), labels.data() + labels.size());
  cube.validate();
  return cube;
}

}  // namespace

PYBIND11_MODULE(_hsia, m) {
  m.doc() = "hyperspectral segmentation adapter: core ops and model";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<ShapeError>(m, "HsiaShapeError");
  py::register_exception<DataError>(m, "DataError");
  py::register_exception<NumericError>(m, "NumericError");

  m.def(
      "conv2d",
      [](const ArrayF& x, const ArrayF& w, const ArrayF& b, int stride, int padding, int groups) {
        NoGradGuard ng;
        return to_array(conv2d(to_tensor(x), to_tensor(w), to_tensor(b), stride, padding, groups));
      },
      py::arg("x"), py::arg("w"), py::arg("b"), py::arg("stride") = 1, py::arg("padding") = 0,
      py::arg("groups") = 1);

  m.def("softmax_rows", [](const ArrayF& x) {
    NoGradGuard ng;
    return to_array(softmax_rows(to_tensor(x)));
  });

  m.def(
      "layernorm",
      [](const ArrayF& x, const ArrayF& g, const ArrayF& b) {
        NoGradGuard ng;
        return to_array(layernorm(to_tensor(x), to_tensor(g), to_tensor(b)));
      },
      py::arg("x"), py::arg("gamma"), py::arg("beta"));

  m.def(
      "bilinear_sample",
      [](const ArrayF& value, const ArrayF& points) {
        NoGradGuard ng;
        return to_array(bilinear_sample(to_tensor(value), to_tensor(points)));
      },
      py::arg("value"), py::arg("points"));

  m.def(
      "ms_deform_attn",
      [](const ArrayF& query, const ArrayF& value, const std::vector<std::pair<int, int>>& levels,
         const ArrayF& refs, int heads, int points, std::uint64_t seed) {
        NoGradGuard ng;
        auto spec = LevelSpec::from_levels(levels);
        int d = static_cast<int>(query.shape(1));
        Rng rng(seed);
        ModelParamsT<float> params;
        detail::init_deform(params, "deform", d, spec.num_levels(), heads, points, rng);
        MsDeformParams<float> p;
        p.heads = heads;
        p.points = points;
        p.w_value = params.at("deform.value.weight");
        p.b_value = params.at("deform.value.bias");
        p.w_offset = params.at("deform.offset.weight");
        p.b_offset = params.at("deform.offset.bias");
        p.w_attn = params.at("deform.attn.weight");
        p.b_attn = params.at("deform.attn.bias");
        p.w_out = params.at("deform.out.weight");
        p.b_out = params.at("deform.out.bias");
        std::vector<float> r(refs.data(), refs.data() + refs.size());
        return to_array(ms_deform_attn(to_tensor(query), to_tensor(value), spec, r, p));
      },
      py::arg("query"), py::arg("value"), py::arg("levels"), py::arg("refs"), py::arg("heads") = 8,
      py::arg("points") = 4, py::arg("seed") = 0,
      "Deformable attention with randomly initialized projections (value proj "
      "trunc-normal, offset/attention/output projections zero).");

  m.def(
      "gate",
      [](const ArrayF& x_vit, const ArrayF& x_injected, const ArrayF& w, const ArrayF& b) {
        NoGradGuard ng;
        auto a = to_tensor(x_vit), inj = to_tensor(x_injected);
        auto gamma = gate_gamma(a, inj, to_tensor(w), to_tensor(b));
        return py::make_tuple(to_array(gate_blend(a, inj, gamma)), to_array(gamma));
      },
      py::arg("x_vit"), py::arg("x_injected"), py::arg("w"), py::arg("b"),
      "Returns (blended tokens, per-token gamma).");

  m.def(
      "cross_entropy",
      [](const ArrayF& logits, const ArrayU8& labels, int ignore) {
        NoGradGuard ng;
        std::vector<std::uint8_t> lab(labels.data(), labels.data() + labels.size());
        return cross_entropy(to_tensor(logits), lab, ignore)->data[0];
      },
      py::arg("logits"), py::arg("labels"), py::arg("ignore") = 255);

  m.def(
      "synth_scene",
      [](int bands, int classes, int h, int w, std::uint64_t seed, int index) {
        auto cube = synth_scene(default_synth(bands, classes, h, w, seed), index);
        std::vector<py::ssize_t> dshape{cube.bands, cube.height, cube.width};
        py::array_t<float> data(dshape);
        std::copy(cube.data.begin(), cube.data.end(), data.mutable_data());
        std::vector<py::ssize_t> lshape{cube.height, cube.width};
        py::array_t<std::uint8_t> lab(lshape);
        std::copy(cube.labels.begin(), cube.labels.end(), lab.mutable_data());
        return py::make_tuple(data, lab);
      },
      py::arg("bands"), py::arg("classes"), py::arg("height"), py::arg("width"), py::arg("seed"),
      py::arg("index") = 0);

  m.def(
      "segmentation_metrics",
      [](const ArrayU8& pred, const ArrayU8& gt, int classes) {
        std::vector<std::uint8_t> p(pred.data(), pred.data() + pred.size());
        std::vector<std::uint8_t> g(gt.data(), gt.data() + gt.size());
        auto r = metrics(confusion(p, g, classes));
        py::dict out;
        out["iou"] = r.iou;
        out["acc"] = r.acc;
        out["miou"] = r.miou;
        out["aacc"] = r.aacc;
        out["macc"] = r.macc;
        return out;
      },
      py::arg("pred"), py::arg("gt"), py::arg("classes"));

  py::class_<HsiAdapterConfig>(m, "ModelConfig")
      .def_static("desk", &HsiAdapterConfig::desk)
      .def_static("full", &HsiAdapterConfig::full)
      .def_readwrite("bands", &HsiAdapterConfig::bands)
      .def_readwrite("num_classes", &HsiAdapterConfig::num_classes)
      .def("sync", &HsiAdapterConfig::sync);

  py::class_<HsiAdapterT<float>>(m, "Model")
      .def(py::init([](const HsiAdapterConfig& cfg, std::uint64_t seed) {
             auto c = cfg;
             c.sync();
             return std::make_unique<HsiAdapterT<float>>(c, seed);
           }),
           py::arg("config"), py::arg("seed") = 0)
      .def("num_trainable",
           [](const HsiAdapterT<float>& m2) { return m2.params().count_trainable(); })
      .def(
          "predict",
          [](const HsiAdapterT<float>& m2, const ArrayF& data) {
            HyperCube cube;
            cube.bands = static_cast<int>(data.shape(0));
            cube.height = static_cast<int>(data.shape(1));
            cube.width = static_cast<int>(data.shape(2));
            cube.data.assign(data.data(), data.data() + data.size());
            cube.labels.assign(static_cast<std::size_t>(cube.pixels()), 0);
            auto pred = predict(m2, cube);
            std::vector<py::ssize_t> shape{cube.height, cube.width};
            py::array_t<std::uint8_t> out(shape);
            std::copy(pred.begin(), pred.end(), out.mutable_data());
            return out;
          },
          py::arg("cube"))
      .def(
          "train",
          [](HsiAdapterT<float>& m2, const std::vector<std::pair<ArrayF, ArrayU8>>& scenes,
             int steps, int batch, double lr, int warmup, int crop_h, int crop_w,
             std::uint64_t seed) {
            std::vector<HyperCube> set;
            for (auto& [d, l] : scenes) set.push_back(to_cube(d, l));
            OptimProfile opt;
            opt.steps = steps;
            opt.batch = batch;
            opt.lr = lr;
            opt.warmup = warmup;
            return train_model(m2, set, opt, crop_h, crop_w, seed);
          },
          py::arg("scenes"), py::arg("steps") = 100, py::arg("batch") = 2, py::arg("lr") = 1e-4,
          py::arg("warmup") = 10, py::arg("crop_h") = 32, py::arg("crop_w") = 64,
          py::arg("seed") = 0, "Runs the optimizer and returns the loss CSV.")
      .def("save", [](const HsiAdapterT<float>& m2, const std::string& path) {
        checkpoint_save(path, m2);
      })
      .def("load", [](HsiAdapterT<float>& m2, const std::string& path) {
        checkpoint_load(path, m2);
      });

  m.def("gradcheck_ops", [](double tol, int samples) {
    auto results = run_op_gradchecks<double>(tol, samples);
    py::list out;
    for (auto& r : results) {
      py::dict d;
      d["name"] = r.name;
      d["max_rel"] = r.max_rel;
      d["pass"] = r.pass;
      out.append(d);
    }
    return out;
  }, py::arg("tol") = 1e-6, py::arg("samples") = 50);
}
