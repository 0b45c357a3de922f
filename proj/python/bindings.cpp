// SPDX-License-Identifier: Apache-2.0
// Python bindings for the core library. Arrays cross the boundary as float64
// numpy copies; feature maps are (H, W, C), datasets (N, H, W, C).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "meds/dataio.hpp"
#include "meds/memory.hpp"
#include "meds/metrics.hpp"
#include "meds/pipeline.hpp"
#include "meds/reconstructor.hpp"
#include "meds/selection.hpp"
#include "meds/theory.hpp"

namespace py = pybind11;
using namespace meds;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

void require_ndim(const py::buffer_info& info, py::ssize_t ndim, const char* what) {
  if (info.ndim != ndim) {
    throw ContractError(std::string(what) + " must have " + std::to_string(ndim) + " dimensions");
  }
}

PatchFeatureMap image_from(const F64Array& a) {
  const auto info = a.request();
  require_ndim(info, 3, "image");
  const auto* p = static_cast<const double*>(info.ptr);
  PatchFeatureMap img(static_cast<std::uint32_t>(info.shape[0]), static_cast<std::uint32_t>(info.shape[1]),
                      static_cast<std::uint32_t>(info.shape[2]),
                      std::vector<double>(p, p + info.size));
  img.validate();
  return img;
}

py::array_t<double> map_to_array(const ScoreMap& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

std::vector<ScoreMap> maps_from(const F64Array& a) {
  const auto info = a.request();
  require_ndim(info, 3, "score maps");
  const auto n = static_cast<std::size_t>(info.shape[0]);
  const auto h = static_cast<std::uint32_t>(info.shape[1]);
  const auto w = static_cast<std::uint32_t>(info.shape[2]);
  const auto* p = static_cast<const double*>(info.ptr);
  std::vector<ScoreMap> maps(n);
  for (std::size_t i = 0; i < n; ++i) {
    maps[i].height = h;
    maps[i].width = w;
    maps[i].values.assign(p + i * h * w, p + (i + 1) * h * w);
  }
  return maps;
}

std::vector<Mask> masks_from(const U8Array& a) {
  const auto info = a.request();
  require_ndim(info, 3, "masks");
  const auto n = static_cast<std::size_t>(info.shape[0]);
  const std::size_t per = static_cast<std::size_t>(info.shape[1] * info.shape[2]);
  const auto* p = static_cast<const std::uint8_t*>(info.ptr);
  std::vector<Mask> masks(n);
  for (std::size_t i = 0; i < n; ++i) masks[i].assign(p + i * per, p + (i + 1) * per);
  return masks;
}

theory::FinitePool pool_from(const F64Array& a) {
  const auto info = a.request();
  require_ndim(info, 2, "pool");
  const auto* p = static_cast<const double*>(info.ptr);
  return theory::FinitePool(static_cast<std::size_t>(info.shape[1]), std::vector<double>(p, p + info.size));
}

std::vector<double> vec_from(const F64Array& a) {
  const auto info = a.request();
  require_ndim(info, 1, "vector");
  const auto* p = static_cast<const double*>(info.ptr);
  return {p, p + info.size};
}

FeatureDataset dataset_from(const F64Array& features, std::vector<std::uint32_t> class_ids,
                            std::optional<std::vector<std::uint8_t>> labels, std::optional<U8Array> masks) {
  const auto info = features.request();
  require_ndim(info, 4, "features");
  const auto n = static_cast<std::size_t>(info.shape[0]);
  const auto h = static_cast<std::uint32_t>(info.shape[1]);
  const auto w = static_cast<std::uint32_t>(info.shape[2]);
  const auto c = static_cast<std::uint32_t>(info.shape[3]);
  const std::size_t per = std::size_t{h} * w * c;
  const auto* p = static_cast<const double*>(info.ptr);
  FeatureDataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    ds.images.emplace_back(h, w, c, std::vector<double>(p + i * per, p + (i + 1) * per));
  }
  ds.class_ids = std::move(class_ids);
  ds.truth_labels = std::move(labels);
  if (masks) ds.pixel_masks = masks_from(*masks);
  ds.validate();
  return ds;
}

py::array_t<double> dataset_features(const FeatureDataset& ds) {
  if (ds.empty()) return py::array_t<double>(std::vector<py::ssize_t>{0, 0, 0, 0});
  const auto& f = ds.images.front();
  py::array_t<double> out({static_cast<py::ssize_t>(ds.size()), static_cast<py::ssize_t>(f.height),
                           static_cast<py::ssize_t>(f.width), static_cast<py::ssize_t>(f.channels)});
  double* dst = out.mutable_data();
  for (const auto& img : ds.images) dst = std::copy(img.values.begin(), img.values.end(), dst);
  return out;
}

py::object dataset_masks(const FeatureDataset& ds) {
  if (!ds.pixel_masks || ds.empty()) return py::none();
  const auto& f = ds.images.front();
  py::array_t<std::uint8_t> out(
      {static_cast<py::ssize_t>(ds.size()), static_cast<py::ssize_t>(f.height), static_cast<py::ssize_t>(f.width)});
  std::uint8_t* dst = out.mutable_data();
  for (const auto& m : *ds.pixel_masks) dst = std::copy(m.begin(), m.end(), dst);
  return std::move(out);
}

py::dict report_dict(const metrics::KeyValueReport& r) {
  py::dict d;
  for (const auto& [k, v] : r.entries()) d[py::str(k)] = r.number(k);
  return d;
}

}  // namespace

PYBIND11_MODULE(_meds, m) {
  m.doc() = "Core bindings: data, memory scoring, training pipeline, metrics, theory checks";

  // Kept alive by the module; the translator only borrows it.
  static py::handle meds_error = py::exception<Error>(m, "MedsError", PyExc_RuntimeError).release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object inst = py::reinterpret_borrow<py::object>(meds_error)(e.what());
      inst.attr("kind") = e.kind();
      const auto* pe = dynamic_cast<const PhaseError*>(&e);
      inst.attr("phase") = pe ? py::object(py::str(pe->phase())) : py::object(py::none());
      PyErr_SetObject(meds_error.ptr(), inst.ptr());
    }
  });

  py::class_<SynthSpec>(m, "SynthSpec")
      .def(py::init<>())
      .def_readwrite("classes", &SynthSpec::classes)
      .def_readwrite("images_per_class", &SynthSpec::images_per_class)
      .def_readwrite("height", &SynthSpec::height)
      .def_readwrite("width", &SynthSpec::width)
      .def_readwrite("channels", &SynthSpec::channels)
      .def_readwrite("cluster_count", &SynthSpec::cluster_count)
      .def_readwrite("cluster_spread", &SynthSpec::cluster_spread)
      .def_readwrite("anomaly_shift", &SynthSpec::anomaly_shift)
      .def_readwrite("region_min", &SynthSpec::region_min)
      .def_readwrite("region_max", &SynthSpec::region_max)
      .def_readwrite("seed", &SynthSpec::seed)
      .def("validate", &SynthSpec::validate);

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def(py::init<>())
      .def_readwrite("train_file", &PipelineConfig::train_file)
      .def_readwrite("test_file", &PipelineConfig::test_file)
      .def_readwrite("synth", &PipelineConfig::synth)
      .def_readwrite("noise_ratio", &PipelineConfig::noise_ratio)
      .def_readwrite("train_normal_per_class", &PipelineConfig::train_normal_per_class)
      .def_readwrite("test_normal_per_class", &PipelineConfig::test_normal_per_class)
      .def_readwrite("test_anomalies_per_class", &PipelineConfig::test_anomalies_per_class)
      .def_readwrite("ensemble_size", &PipelineConfig::ensemble_size)
      .def_readwrite("subsample_ratio", &PipelineConfig::subsample_ratio)
      .def_readwrite("learning_rate", &PipelineConfig::learning_rate)
      .def_readwrite("batch_size", &PipelineConfig::batch_size)
      .def_readwrite("distill_iterations", &PipelineConfig::distill_iterations)
      .def_readwrite("finetune_iterations", &PipelineConfig::finetune_iterations)
      .def_readwrite("critical_value", &PipelineConfig::critical_value)
      .def_readwrite("top_percent", &PipelineConfig::top_percent)
      .def_readwrite("selection_enabled", &PipelineConfig::selection_enabled)
      .def_property(
          "random_init", [](const PipelineConfig& c) { return c.finetune_init == FinetuneInit::kRandom; },
          [](PipelineConfig& c, bool v) { c.finetune_init = v ? FinetuneInit::kRandom : FinetuneInit::kDistilled; })
      .def_property(
          "memory_criterion", [](const PipelineConfig& c) { return c.criterion == SelectionCriterion::kMemory; },
          [](PipelineConfig& c, bool v) {
            c.criterion = v ? SelectionCriterion::kMemory : SelectionCriterion::kDistilled;
          })
      .def_readwrite("aupro_fpr_limit", &PipelineConfig::aupro_fpr_limit)
      .def_readwrite("data_seed", &PipelineConfig::data_seed)
      .def_readwrite("ensemble_seed", &PipelineConfig::ensemble_seed)
      .def_readwrite("training_seed", &PipelineConfig::training_seed)
      .def_readwrite("output_dir", &PipelineConfig::output_dir)
      .def("validate", &PipelineConfig::validate)
      .def("to_json", &PipelineConfig::to_json)
      .def_static("from_json", py::overload_cast<const std::string&>(&PipelineConfig::from_json));

  py::class_<FeatureDataset>(m, "FeatureDataset")
      .def(py::init(&dataset_from), py::arg("features"), py::arg("class_ids"), py::arg("truth_labels") = py::none(),
           py::arg("pixel_masks") = py::none())
      .def("__len__", &FeatureDataset::size)
      .def_property_readonly("features", &dataset_features)
      .def_property_readonly("class_ids", [](const FeatureDataset& d) { return d.class_ids; })
      .def_property_readonly("truth_labels", [](const FeatureDataset& d) { return d.truth_labels; })
      .def_property_readonly("pixel_masks", &dataset_masks)
      .def("classes", &FeatureDataset::classes)
      .def("noise_ratio", &FeatureDataset::noise_ratio)
      .def("__eq__", [](const FeatureDataset& a, const FeatureDataset& b) { return a == b; });

  m.def("generate_synthetic", [](const SynthSpec& spec) {
    auto out = generate_synthetic_dataset(spec);
    return py::make_tuple(std::move(out.clean), std::move(out.anomaly_pool));
  }, py::arg("spec"), "Returns (clean, anomaly_pool).");
  m.def("inject_contamination", &inject_contamination, py::arg("clean"), py::arg("anomaly_pool"), py::arg("ratio"),
        py::arg("seed"));
  m.def("read_feature_file", &read_feature_file, py::arg("path"));
  m.def("write_feature_file", &write_feature_file, py::arg("dataset"), py::arg("path"));
  m.def("prepare_data", [](const PipelineConfig& c) {
    auto d = prepare_data(c);
    return py::make_tuple(std::move(d.train), std::move(d.test));
  }, py::arg("config"), "Returns (train, test) as the pipeline would see them.");

  m.def("memory_scores", [](const FeatureDataset& train, std::size_t ensemble_size, double subsample_ratio,
                            std::uint64_t seed) {
    const auto ensemble = build_ensemble(train, ensemble_size, subsample_ratio, seed);
    const auto cache = cache_ensemble_scores(train, ensemble);
    py::list out;
    for (const auto& s : cache.maps()) out.append(map_to_array(s));
    return out;
  }, py::arg("train"), py::arg("ensemble_size") = 100, py::arg("subsample_ratio") = 0.1, py::arg("seed") = 0,
        "Ensemble memory score map of every training image.");

  m.def("run_pipeline", [](const PipelineConfig& c) {
    PipelineResult r;
    {
      py::gil_scoped_release release;
      r = run_pipeline(c);
    }
    py::dict out;
    out["report"] = report_dict(r.report);
    out["final_etas"] = r.finetune.final_etas;
    out["final_selection"] = r.finetune.final_selection;
    out["audit"] = format_audit(r.finetune.audit);
    return out;
  }, py::arg("config"));

  py::class_<ReconstructorParams>(m, "Reconstructor")
      .def_static("init", [](std::size_t channels, std::uint64_t seed) { return init_reconstructor(channels, seed); },
                  py::arg("channels"), py::arg("seed") = 0)
      .def_static("load", &read_checkpoint, py::arg("path"))
      .def("save", [](const ReconstructorParams& p, const std::filesystem::path& path) { write_checkpoint(p, path); })
      .def_property_readonly("channels", &ReconstructorParams::channels)
      .def_property_readonly("hidden", &ReconstructorParams::hidden)
      .def_property_readonly("parameter_count", &ReconstructorParams::parameter_count)
      .def("score", [](const ReconstructorParams& p, const F64Array& image) {
        return map_to_array(reconstruction_score(p, image_from(image)));
      }, py::arg("image"), "Per-patch reconstruction error of an (H, W, C) feature map.")
      .def("__eq__", [](const ReconstructorParams& a, const ReconstructorParams& b) { return a == b; });

  m.def("infer", [](const ReconstructorParams& p, const F64Array& image, std::uint32_t height, std::uint32_t width,
                    double top_percent) {
    const auto r = infer(p, image_from(image), height, width, top_percent);
    return py::make_tuple(map_to_array(r.map), r.image_score);
  }, py::arg("params"), py::arg("image"), py::arg("height"), py::arg("width"), py::arg("top_percent") = 1.0,
        "Returns (upsampled score map, image score).");

  m.def("auroc", [](std::vector<double> s, std::vector<std::uint8_t> y) { return metrics::auroc(s, y); });
  m.def("average_precision",
        [](std::vector<double> s, std::vector<std::uint8_t> y) { return metrics::average_precision(s, y); });
  m.def("inspection_depth",
        [](std::vector<double> s, std::vector<std::uint8_t> y) { return metrics::inspection_depth(s, y); });
  m.def("aupro", [](const F64Array& maps, const U8Array& masks, double fpr_limit) {
    return metrics::aupro(maps_from(maps), masks_from(masks), fpr_limit);
  }, py::arg("maps"), py::arg("masks"), py::arg("fpr_limit") = 0.3);

  m.def("robust_max", [](std::vector<double> s, double n) { return robust_max(s, n); }, py::arg("scores"),
        py::arg("top_percent") = 1.0);
  m.def("class_threshold", [](std::vector<double> etas, double k) { return class_threshold(etas, k); },
        py::arg("etas"), py::arg("critical"));
  m.def("schedule", [](std::size_t t, std::size_t total, double k) {
    const auto s = schedule(t, total, k);
    return py::make_tuple(s.alpha, s.critical);
  }, py::arg("t"), py::arg("total"), py::arg("critical"), "Returns (alpha_t, k_t).");

  m.def("spatial_proportion", [](const F64Array& q, const F64Array& pool, double r) {
    return theory::spatial_proportion(vec_from(q), pool_from(pool), r);
  }, py::arg("q"), py::arg("pool"), py::arg("r"));
  m.def("expected_nn_distance", [](const F64Array& q, const F64Array& pool, std::size_t mem) {
    return theory::expected_nn_distance_exact(vec_from(q), pool_from(pool), mem);
  }, py::arg("q"), py::arg("pool"), py::arg("m"));
  m.def("expected_nn_distance_mc", [](const F64Array& q, const F64Array& pool, std::size_t mem, std::size_t trials,
                                      std::uint64_t seed) {
    const auto e = theory::expected_nn_distance_mc(vec_from(q), pool_from(pool), mem, trials, seed);
    return py::make_tuple(e.estimate, e.standard_error);
  }, py::arg("q"), py::arg("pool"), py::arg("m"), py::arg("trials"), py::arg("seed") = 0,
        "Returns (estimate, standard error).");
  m.def("verify_theorem", [](const F64Array& pool_array, std::size_t pairs, std::size_t m_max, std::uint64_t seed,
                             double tolerance) {
    const auto pool = pool_from(pool_array);
    std::vector<theory::QueryPair> qp;
    for (std::size_t k = 0; k < pairs; ++k) qp.push_back(theory::make_separable_pair(pool, derive_seed(seed, 100 + k)));
    std::vector<std::size_t> grid;
    for (std::size_t mm = 1; mm <= m_max; ++mm) grid.push_back(mm);
    const auto report = theory::verify_theorem(pool, qp, grid, tolerance);
    py::dict out;
    out["all_pass"] = report.all_pass();
    out["pairs"] = report.pairs.size();
    out["table"] = report.to_table();
    out["key_values"] = report.to_key_value();
    return out;
  }, py::arg("pool"), py::arg("pairs") = 20, py::arg("m_max") = 50, py::arg("seed") = 0,
        py::arg("tolerance") = 1e-9);
}
