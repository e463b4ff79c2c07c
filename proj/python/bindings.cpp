#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cellflow/classifier.hpp"
#include "cellflow/datagen.hpp"
#include "cellflow/metrics.hpp"
#include "cellflow/postproc.hpp"
#include "cellflow/tensor_io.hpp"
#include "cellflow/tokens.hpp"
#include "cellflow/wsi.hpp"

namespace py = pybind11;
using namespace cellflow;

namespace {

template <class T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <class T>
Raster<T> raster_from(const Array<T>& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw py::value_error("expected a 2-D or 3-D array");
  const int ch = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  return Raster<T>(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), ch,
                   std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
Array<T> array_from(const Raster<T>& r) {
  std::vector<py::ssize_t> shape{r.rows(), r.cols()};
  if (r.channels() > 1) shape.push_back(r.channels());
  Array<T> out(shape);
  std::copy(r.data().begin(), r.data().end(), out.mutable_data());
  return out;
}

template <class T>
py::array tensor_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.dims().begin(), t.dims().end());
  py::array_t<T> out(shape);
  const auto v = t.values<T>();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array to_numpy(const Tensor& t) {
  switch (t.dtype()) {
    case DType::Float32:
      return tensor_array<float>(t);
    case DType::UInt8:
      return tensor_array<std::uint8_t>(t);
    case DType::UInt32:
      return tensor_array<std::uint32_t>(t);
  }
  throw py::value_error("unknown dtype");
}

template <class T>
Tensor tensor_from(const py::array& a) {
  const auto typed = Array<T>::ensure(a);
  std::vector<std::uint32_t> dims;
  for (py::ssize_t i = 0; i < typed.ndim(); ++i) dims.push_back(static_cast<std::uint32_t>(typed.shape(i)));
  return Tensor(dims, std::vector<T>(typed.data(), typed.data() + typed.size()));
}

Tensor from_numpy(const py::array& a) {
  if (a.dtype().is(py::dtype::of<float>())) return tensor_from<float>(a);
  if (a.dtype().is(py::dtype::of<std::uint8_t>())) return tensor_from<std::uint8_t>(a);
  if (a.dtype().is(py::dtype::of<std::uint32_t>())) return tensor_from<std::uint32_t>(a);
  throw py::type_error("tensors hold float32, uint8 or uint32");
}

py::dict pq_dict(const PQResult& r) {
  py::dict d;
  d["dq"] = r.dq;
  d["sq"] = r.sq;
  d["pq"] = r.pq;
  d["tp"] = r.counts.tp;
  d["fp"] = r.counts.fp;
  d["fn"] = r.counts.fn;
  return d;
}

std::vector<Detection> detections(const Array<double>& points, const std::vector<int>& classes) {
  if (points.ndim() != 2 || (points.size() > 0 && points.shape(1) != 2)) throw py::value_error("points must be (N, 2)");
  const auto n = static_cast<std::size_t>(points.shape(0));
  if (!classes.empty() && classes.size() != n) throw py::value_error("one class per point");
  std::vector<Detection> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].position = {points.at(i, 0), points.at(i, 1)};
    out[i].cls = classes.empty() ? 0 : classes[i];
  }
  return out;
}

Dataset dataset(const Array<float>& x, const Array<int>& y) {
  if (x.ndim() != 2 || y.ndim() != 1 || x.shape(0) != y.shape(0)) throw py::value_error("x must be (N, D) and y (N,)");
  Dataset d;
  d.dim = static_cast<std::size_t>(x.shape(1));
  d.x.assign(x.data(), x.data() + x.size());
  d.y.assign(y.data(), y.data() + y.size());
  return d;
}

nlohmann::json to_nlohmann(const py::dict& d) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(d).cast<std::string>());
}

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cellflow native core";
  // Messages start with the error code name, e.g. "BadMagic: ...".
  py::register_exception<Error>(m, "CellflowError", PyExc_ValueError);

  m.def("read_tensor", [](const std::filesystem::path& p) { return to_numpy(read_tensor(p)); }, py::arg("path"));
  m.def("write_tensor", [](const std::filesystem::path& p, const py::array& a) { write_tensor(p, from_numpy(a)); },
        py::arg("path"), py::arg("array"));
  m.def("tensor_header_size", &tensor_header_size, py::arg("ndim"));

  m.def(
      "postprocess",
      [](const Array<float>& np_map, const Array<float>& h, const Array<float>& v, float np_threshold, float marker_threshold,
         std::size_t min_size) {
        PostprocParams params;
        params.np_threshold = np_threshold;
        params.marker_threshold = marker_threshold;
        params.min_object_size = min_size;
        ProbMaps maps{raster_from(np_map), raster_from(h), raster_from(v), std::nullopt};
        LabelRaster out;
        {
          py::gil_scoped_release release;
          out = postprocess(maps, params).labels();
        }
        return array_from(out);
      },
      py::arg("np"), py::arg("h"), py::arg("v"), py::arg("np_threshold") = 0.5f, py::arg("marker_threshold") = 0.4f,
      py::arg("min_size") = 10, "Instance label map from nucleus-probability and HV maps.");
  m.def(
      "encode_targets",
      [](const Array<std::uint32_t>& labels) {
        const auto maps = encode_targets(InstanceMap(raster_from(labels)));
        return py::make_tuple(array_from(maps.np), array_from(maps.horizontal), array_from(maps.vertical));
      },
      py::arg("labels"), "(np, h, v) training targets for an instance map.");

  m.def("pq", [](const Array<std::uint32_t>& pred, const Array<std::uint32_t>& gt) { return pq_dict(pq(raster_from(pred), raster_from(gt))); },
        py::arg("pred"), py::arg("gt"));
  m.def(
      "match_detections",
      [](const Array<double>& preds, const Array<double>& gts, std::vector<int> pred_classes, std::vector<int> gt_classes,
         double radius) {
        const auto m = match_detections(detections(preds, pred_classes), detections(gts, gt_classes), radius);
        py::dict out;
        for (const auto& [cls, sets] : m) {
          py::list tp;
          for (const auto& p : sets.tp) tp.append(py::make_tuple(p.gt, p.pred, p.score));
          py::dict d;
          d["tp"] = tp;
          d["fp"] = sets.fp;
          d["fn"] = sets.fn;
          out[py::int_(cls)] = d;
        }
        return out;
      },
      py::arg("preds"), py::arg("gts"), py::arg("pred_classes") = std::vector<int>{},
      py::arg("gt_classes") = std::vector<int>{}, py::arg("radius") = kDetectionRadius);
  m.def(
      "detection_score",
      [](std::size_t tp, std::size_t fp, std::size_t fn) {
        const auto s = detection_score(tp, fp, fn);
        return py::make_tuple(s.precision, s.recall, s.f1);
      },
      py::arg("tp"), py::arg("fp"), py::arg("fn"), "(precision, recall, f1)");
  m.def("co2_kg", &co2_kg, py::arg("energy_wh"), py::arg("carbon_intensity") = kCarbonIntensity);

  m.def(
      "plan_tiles",
      [](int width, int height, int tile_edge, int overlap, int patch) {
        return to_python(to_json(plan_tiles(SlideGeometry{width, height, 0.25, tile_edge, overlap, patch})));
      },
      py::arg("width"), py::arg("height"), py::arg("tile_edge") = 1024, py::arg("overlap") = 64, py::arg("patch") = 16);
  m.def(
      "segment_tiled",
      [](const Array<float>& np_map, const Array<float>& h, const Array<float>& v, int tile_edge, int overlap,
         const std::string& slide_id) {
        const ProbMaps maps{raster_from(np_map), raster_from(h), raster_from(v), std::nullopt};
        const auto plan = plan_tiles(SlideGeometry{maps.cols(), maps.rows(), 0.25, tile_edge, overlap, 16});
        py::list out;
        for (const auto& c : segment_tiled(maps, plan, {}, slide_id)) {
          py::dict d;
          d["cell_id"] = c.cell_id;
          d["centroid"] = py::make_tuple(c.centroid.row, c.centroid.col);
          d["area"] = c.area;
          d["tile"] = py::make_tuple(c.tile_row, c.tile_col);
          out.append(d);
        }
        return out;
      },
      py::arg("np"), py::arg("h"), py::arg("v"), py::arg("tile_edge") = 1024, py::arg("overlap") = 64,
      py::arg("slide_id") = "slide", "Tiled segmentation followed by cross-tile merging.");
  m.def("lanczos_resample", [](const Array<float>& image, double scale) { return array_from(lanczos_resample(raster_from(image), scale)); },
        py::arg("image"), py::arg("scale"));
  m.def(
      "resample_labels",
      [](const Array<std::uint32_t>& labels, double scale) {
        const auto r = resample_labels(InstanceMap(raster_from(labels)), scale);
        return py::make_tuple(array_from(r.map.labels()), r.dropped);
      },
      py::arg("labels"), py::arg("scale"), "(labels, dropped_instance_count)");

  m.def(
      "reshape_tokens",
      [](const Array<float>& flat, int patch, int height, int width, int k_extra) {
        if (flat.ndim() != 2) throw py::value_error("tokens must be (N, D)");
        const TokenLayout layout{patch, height, width, k_extra, {}};
        const auto grid = reshape_tokens(std::span<const float>(flat.data(), flat.size()), flat.shape(0), flat.shape(1), layout);
        Array<float> out({grid.rows, grid.cols, grid.dim});
        std::copy(grid.data.begin(), grid.data.end(), out.mutable_data());
        return out;
      },
      py::arg("flat"), py::arg("patch"), py::arg("height"), py::arg("width"), py::arg("k_extra") = 0,
      "(rows, cols, D) token grid.");
  m.def(
      "extract_embeddings",
      [](const Array<std::uint32_t>& labels, const Array<float>& grid, int patch) {
        if (grid.ndim() != 3) throw py::value_error("grid must be (rows, cols, D)");
        TokenGrid g;
        g.rows = static_cast<int>(grid.shape(0));
        g.cols = static_cast<int>(grid.shape(1));
        g.dim = static_cast<int>(grid.shape(2));
        g.patch = patch;
        g.data.assign(grid.data(), grid.data() + grid.size());
        const auto embs = extract_embeddings(InstanceMap(raster_from(labels)), g);
        std::vector<std::uint32_t> ids;
        Array<float> out({static_cast<py::ssize_t>(embs.size()), static_cast<py::ssize_t>(g.dim)});
        for (std::size_t i = 0; i < embs.size(); ++i) {
          ids.push_back(embs[i].instance_id);
          std::copy(embs[i].vector.begin(), embs[i].vector.end(), out.mutable_data() + i * g.dim);
        }
        return py::make_tuple(ids, out);
      },
      py::arg("labels"), py::arg("grid"), py::arg("patch"), "(instance_ids, (N, D) mean token embeddings)");

  m.def(
      "if_overlap_fraction",
      [](const Array<std::uint8_t>& cell, const Array<std::uint8_t>& mask) {
        ByteRaster c = raster_from(cell);
        LabelRaster l(c.rows(), c.cols(), 1, 0u);
        for (std::size_t i = 0; i < c.data().size(); ++i) l.data()[i] = c.data()[i] != 0;
        return if_overlap_fraction(PixelMask::from_label(l, 1), raster_from(mask));
      },
      py::arg("cell"), py::arg("mask"));

  m.def(
      "auroc",
      [](const Array<double>& scores, const Array<int>& labels) {
        if (scores.ndim() != 2) throw py::value_error("scores must be (N, C)");
        return auroc(std::span<const double>(scores.data(), scores.size()), scores.shape(1),
                     std::span<const int>(labels.data(), labels.size()));
      },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "macro_f1",
      [](const Array<int>& predicted, const Array<int>& labels, std::size_t classes) {
        return macro_f1(std::span<const int>(predicted.data(), predicted.size()),
                        std::span<const int>(labels.data(), labels.size()), classes);
      },
      py::arg("predicted"), py::arg("labels"), py::arg("classes"));

  py::class_<Classifier>(m, "Classifier")
      .def_readonly("class_names", &Classifier::class_names)
      .def("predict_proba",
           [](const Classifier& c, const Array<float>& x) {
             if (x.ndim() != 2) throw py::value_error("x must be (N, D)");
             const auto p = predict_proba(c, std::span<const float>(x.data(), x.size()), x.shape(0));
             Array<double> out({x.shape(0), static_cast<py::ssize_t>(c.class_names.size())});
             std::copy(p.begin(), p.end(), out.mutable_data());
             return out;
           })
      .def("save", [](const Classifier& c, const std::filesystem::path& p) { save_checkpoint(p, c); })
      .def_static("load", &load_checkpoint);

  m.def(
      "train",
      [](const Array<float>& x_train, const Array<int>& y_train, const Array<float>& x_val, const Array<int>& y_val,
         std::vector<std::string> class_names, const py::dict& config) {
        LabeledCellSet set{std::move(class_names), {}, dataset(x_train, y_train), dataset(x_val, y_val)};
        const TrainConfig cfg = train_config_from_json(to_nlohmann(config));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(set, cfg);
        }
        py::list history;
        for (const auto& e : r.history) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["train_loss"] = e.train_loss;
          d["val_auroc"] = e.val_auroc;
          d["lr"] = e.lr;
          history.append(d);
        }
        py::dict out;
        out["model"] = r.model;
        out["history"] = history;
        out["best_epoch"] = r.best_epoch;
        out["val_auroc"] = r.best_auroc;
        out["val_macro_f1"] = r.val_macro_f1;
        return out;
      },
      py::arg("x_train"), py::arg("y_train"), py::arg("x_val"), py::arg("y_val"), py::arg("class_names"),
      py::arg("config") = py::dict());
}
