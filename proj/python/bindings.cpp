#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "aggpose/checkpoint.hpp"
#include "aggpose/dataset.hpp"
#include "aggpose/heatmap.hpp"
#include "aggpose/inference.hpp"
#include "aggpose/metrics.hpp"
#include "aggpose/model.hpp"

namespace py = pybind11;
using namespace aggpose;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor<float>& t) {
  FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Rows of (x, y, visibility).
KeypointSet to_keypoints(const DoubleArray& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw std::invalid_argument("keypoints must have shape (K, 3)");
  KeypointSet kps;
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < r.shape(0); ++i) kps.push_back({r(i, 0), r(i, 1), static_cast<int>(r(i, 2))});
  return kps;
}

// Rows of (x, y, confidence).
DoubleArray decoded_to_array(const std::vector<DecodedKeypoint>& kps) {
  DoubleArray out({static_cast<py::ssize_t>(kps.size()), py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < kps.size(); ++i) {
    const auto k = static_cast<py::ssize_t>(i);
    w(k, 0) = kps[i].x;
    w(k, 1) = kps[i].y;
    w(k, 2) = kps[i].confidence;
  }
  return out;
}

Image to_image(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("image must have shape (H, W, 3)");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

py::dict result_dict(const EvalResult& r) {
  auto value = [](const std::optional<double>& v) -> py::object { return v ? py::object(py::float_(*v)) : py::object(py::none()); };
  py::dict d;
  d["AP"] = value(r.ap);
  d["AP50"] = value(r.ap50);
  d["AP75"] = value(r.ap75);
  d["AP_M"] = value(r.ap_medium);
  d["AP_L"] = value(r.ap_large);
  d["AR"] = value(r.ar);
  d["AR50"] = value(r.ar50);
  d["AR75"] = value(r.ar75);
  d["AR_M"] = value(r.ar_medium);
  d["AR_L"] = value(r.ar_large);
  d["num_annotations"] = r.num_annotations;
  d["num_detections"] = r.num_detections;
  return d;
}

}  // namespace

PYBIND11_MODULE(_aggpose, m) {
  m.doc() = "Transformer keypoint estimator with cross-resolution feature aggregation";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<DatasetError>(m, "DatasetError", PyExc_RuntimeError);
  py::register_exception<ImageIoError>(m, "ImageIoError", PyExc_OSError);

  py::class_<AggPoseModel<float>>(m, "Model")
      .def(py::init([](const std::string& variant, int num_keypoints, std::uint64_t seed) {
             return AggPoseModel<float>(ModelConfig::named(variant, num_keypoints), seed);
           }),
           py::arg("variant") = "aggpose-t", py::arg("num_keypoints") = 21, py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& p) { return model_from_checkpoint<float>(read_checkpoint(p)); },
          py::arg("path"))
      .def(
          "save", [](const AggPoseModel<float>& m, const std::filesystem::path& p) { write_checkpoint(make_checkpoint(m), p); },
          py::arg("path"))
      .def(
          "forward",
          [](const AggPoseModel<float>& m, const FloatArray& images) {
            Tensor<float> x = to_tensor(images);
            const Tensor<float> y = [&] {
              py::gil_scoped_release release;
              return m.forward(x);
            }();
            return to_array(y);
          },
          py::arg("images"), "Heatmaps [N, K, H/4, W/4] for normalized images [N, 3, H, W].")
      .def(
          "predict",
          [](const AggPoseModel<float>& m, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& image) {
            const Image img = to_image(image);
            return decoded_to_array(predict_image(m, img).keypoints);
          },
          py::arg("image"), "Keypoints (x, y, confidence) in pixel coordinates of an RGB uint8 image.")
      .def_property_readonly("parameter_count", &AggPoseModel<float>::parameter_count)
      .def_property_readonly("config", [](const AggPoseModel<float>& m) { return m.config().to_json().dump(); });

  m.def(
      "encode_heatmaps",
      [](const DoubleArray& keypoints, Index height, Index width, double sigma, int stride) {
        const auto enc = encode<float>(to_keypoints(keypoints), HeatmapGeometry{height, width, stride, sigma});
        return py::make_tuple(to_array(enc.targets), FloatArray(static_cast<py::ssize_t>(enc.mask.size()), enc.mask.data()));
      },
      py::arg("keypoints"), py::arg("height") = 64, py::arg("width") = 48, py::arg("sigma") = 2.0, py::arg("stride") = 4,
      "Gaussian targets [K, H, W] and a per-keypoint mask from (x, y, visibility) rows in input pixels.");
  m.def(
      "decode_heatmaps",
      [](const FloatArray& heatmaps, int stride) { return decoded_to_array(decode(to_tensor(heatmaps), stride)); },
      py::arg("heatmaps"), py::arg("stride") = 4);
  m.def(
      "oks",
      [](const DoubleArray& pred, const DoubleArray& gt, double area, const std::string& schema) -> py::object {
        AnnotationRecord ann;
        ann.area = area;
        ann.keypoints = to_keypoints(gt);
        DetectionRecord det;
        det.keypoints = to_keypoints(pred);
        const auto v = oks(det, ann, KeypointSchema::named(schema));
        return v ? py::object(py::float_(*v)) : py::object(py::none());
      },
      py::arg("pred"), py::arg("gt"), py::arg("area"), py::arg("schema") = "infant");
  m.def(
      "evaluate",
      [](const std::filesystem::path& annotations, const std::filesystem::path& results, const std::string& schema) {
        const KeypointSchema s = KeypointSchema::named(schema);
        return result_dict(evaluate(load_coco_results(results, s), load_coco_keypoints(annotations, s).annotations, s));
      },
      py::arg("annotations"), py::arg("results"), py::arg("schema") = "infant");
  m.def(
      "generate_synthetic",
      [](int n, std::uint64_t seed, const std::filesystem::path& out_dir, const std::string& schema, int height, int width) {
        SyntheticOptions opts;
        opts.height = height;
        opts.width = width;
        return generate_synthetic(n, seed, KeypointSchema::named(schema), out_dir, opts).images.size();
      },
      py::arg("n"), py::arg("seed"), py::arg("out_dir"), py::arg("schema") = "infant", py::arg("height") = 128,
      py::arg("width") = 96, "Writes a synthetic dataset and returns the number of images.");
}
