#include "segguide/checkpoint.hpp"
#include "segguide/dataset.hpp"
#include "segguide/losses.hpp"
#include "segguide/metrics.hpp"
#include "segguide/network.hpp"
#include "segguide/phantom.hpp"
#include "segguide/preprocess.hpp"
#include "segguide/trainer.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace segguide;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
torch::Tensor to_tensor(const Array<T>& a, torch::ScalarType type) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<T*>(a.data()), shape, type).clone();
}

torch::Tensor to_double(const Array<double>& a) { return to_tensor(a, torch::kFloat64); }
torch::Tensor to_labels(const Array<int64_t>& a) { return to_tensor(a, torch::kInt64); }
torch::Tensor to_mask(const Array<bool>& a) { return to_tensor(a, torch::kBool); }

template <typename T>
py::array_t<T> to_numpy(torch::Tensor t) {
  t = t.contiguous();
  std::vector<py::ssize_t> shape(t.sizes().begin(), t.sizes().end());
  py::array_t<T> out(shape);
  std::memcpy(out.mutable_data(), t.data_ptr<T>(), sizeof(T) * static_cast<size_t>(t.numel()));
  return out;
}

py::dict subject_dict(const Subject& s) {
  py::dict d;
  d["subject_id"] = s.volume.subject_id();
  d["image"] = to_numpy<float>(s.volume.channels().to(torch::kFloat32));
  d["brain_mask"] = to_numpy<bool>(s.volume.brain_mask());
  d["labels"] = to_numpy<int64_t>(s.labels.labels().to(torch::kInt64));
  d["spacing_mm"] = s.volume.voxel_spacing_mm();
  return d;
}

py::dict region_dict(const RegionMetrics& r) {
  py::dict d;
  d["dice"] = r.dice;
  d["hd95_mm"] = r.hd95_mm;
  d["sensitivity"] = r.sensitivity;
  d["specificity"] = r.specificity;
  return d;
}

class Model {
 public:
  explicit Model(const std::filesystem::path& checkpoint) {
    auto loaded = load_network(checkpoint);
    net_ = loaded.first;
    meta_ = loaded.second;
    net_->eval();
  }

  py::tuple predict(const Array<float>& image, const Array<bool>& brain_mask, const std::vector<int64_t>& patch) {
    if (patch.size() != 3) throw std::invalid_argument("patch must have 3 entries");
    const auto channels = to_tensor(image, torch::kFloat32);
    const auto mask = to_mask(brain_mask);
    const auto extent = spatial_extent(mask);
    const Subject s{zscore_normalize(MpMriVolume(channels, mask, "input")),
                    LabelMap(torch::zeros(extent, torch::kUInt8))};
    const auto p = [&] {
      py::gil_scoped_release release;
      return predict_subject(net_, s, {patch[0], patch[1], patch[2]});
    }();
    return py::make_tuple(to_numpy<int64_t>(p.labels.labels().to(torch::kInt64)),
                          to_numpy<float>(p.attention.to(torch::kFloat32)));
  }

  int64_t epoch() const { return meta_.epoch; }
  double val_loss() const { return meta_.val_loss; }
  int64_t num_parameters() const { return count_parameters(*net_); }

 private:
  SegGuidedNet net_{nullptr};
  CheckpointMeta meta_;
};

}  // namespace

PYBIND11_MODULE(_segguide, m) {
  m.doc() = "SegGuidedNet brain tumour segmentation";
  torch::set_num_threads(1);

  m.def("network_parameter_count", [](int64_t base) {
    return network_parameter_count(NetworkConfig::with_base_channels(base));
  }, py::arg("base_channels") = 32);
  m.def("attention_gate_parameter_count", [](int64_t base) {
    return attention_gate_parameter_count(NetworkConfig::with_base_channels(base));
  }, py::arg("base_channels") = 32);
  m.def("instantiated_parameter_count", [](int64_t base) {
    SegGuidedNet net(NetworkConfig::with_base_channels(base));
    return count_parameters(*net);
  }, py::arg("base_channels") = 32);

  m.def("dice_loss", [](const Array<double>& probs, const Array<int64_t>& target, double eps) {
    return segguide::dice_loss(to_double(probs), to_labels(target), eps).item<double>();
  }, py::arg("probs"), py::arg("target"), py::arg("eps") = 1e-5);
  m.def("cross_entropy_loss", [](const Array<double>& logits, const Array<int64_t>& target) {
    return segguide::cross_entropy_loss(to_double(logits), to_labels(target)).item<double>();
  }, py::arg("seg_logits"), py::arg("target"));
  m.def("attention_loss", [](const Array<double>& logits, const Array<int64_t>& target) {
    return segguide::attention_loss(to_double(logits), to_labels(target)).item<double>();
  }, py::arg("attn_logits"), py::arg("target"));

  m.def("dsc", [](const Array<bool>& p, const Array<bool>& g, double eps) {
    return segguide::dsc(to_mask(p), to_mask(g), eps);
  }, py::arg("pred"), py::arg("gt"), py::arg("eps") = 1e-5);
  m.def("hd95", [](const Array<bool>& p, const Array<bool>& g, const Spacing3& spacing) {
    return segguide::hd95(to_mask(p), to_mask(g), spacing);
  }, py::arg("pred"), py::arg("gt"), py::arg("spacing_mm") = Spacing3{1.0, 1.0, 1.0});
  m.def("percentile", &percentile, py::arg("values"), py::arg("q"));
  m.def("evaluate_case", [](const Array<int64_t>& pred, const Array<int64_t>& gt, const Spacing3& spacing) {
    const auto c = evaluate_case("case", LabelMap(to_labels(pred).to(torch::kUInt8)),
                                 LabelMap(to_labels(gt).to(torch::kUInt8)), spacing);
    py::dict d;
    for (size_t r = 0; r < 3; ++r) d[region_name(kRegions[r])] = region_dict(c.regions[r]);
    d["subregion_dice"] = c.subregion_dice;
    return d;
  }, py::arg("pred"), py::arg("gt"), py::arg("spacing_mm") = Spacing3{1.0, 1.0, 1.0});

  m.def("cosine_lr", [](int64_t epoch, int64_t epochs, double lr0, double lr_min) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.lr0 = lr0;
    cfg.lr_min = lr_min;
    return cosine_lr(epoch, cfg);
  }, py::arg("epoch"), py::arg("epochs") = 50, py::arg("lr0") = 1e-4, py::arg("lr_min") = 1e-6);

  m.def("split_ids", [](const std::vector<std::string>& ids, uint64_t seed) {
    DatasetIndex index;
    for (const auto& id : ids) index.subjects.push_back({id, {}, {}});
    std::sort(index.subjects.begin(), index.subjects.end(),
              [](const auto& a, const auto& b) { return a.subject_id < b.subject_id; });
    const auto split = split_dataset(index, {}, seed);
    std::map<std::string, std::string> out;
    for (const auto& [id, s] : split.split_assignment) out[id] = to_string(s);
    return out;
  }, py::arg("ids"), py::arg("seed") = 42);

  m.def("generate_phantom", [](const std::vector<int64_t>& grid, double noise_sigma, uint64_t seed) {
    if (grid.size() != 3) throw std::invalid_argument("grid must have 3 entries");
    return subject_dict(generate_phantom(random_phantom_spec({grid[0], grid[1], grid[2]}, noise_sigma, seed)));
  }, py::arg("grid") = std::vector<int64_t>{32, 32, 32}, py::arg("noise_sigma") = 0.0, py::arg("seed") = 0);
  m.def("generate_phantom_cohort", [](size_t count, const std::vector<int64_t>& grid, double noise_sigma,
                                      uint64_t seed) {
    if (grid.size() != 3) throw std::invalid_argument("grid must have 3 entries");
    py::list out;
    for (const auto& s : generate_phantom_cohort(count, {grid[0], grid[1], grid[2]}, noise_sigma, seed)) {
      out.append(subject_dict(s));
    }
    return out;
  }, py::arg("count"), py::arg("grid") = std::vector<int64_t>{64, 64, 64}, py::arg("noise_sigma") = 0.0,
     py::arg("seed") = 42);
  m.def("load_subject_dir", [](const std::filesystem::path& root, const std::string& subject_id) {
    const auto index = scan_dataset(root);
    for (const auto& e : index.subjects) {
      if (e.subject_id == subject_id) return subject_dict(load_subject(e));
    }
    throw std::invalid_argument("subject not found: " + subject_id);
  }, py::arg("root"), py::arg("subject_id"));

  m.def("init_checkpoint", [](const std::filesystem::path& path, int64_t base, uint64_t seed) {
    SegGuidedNet net(NetworkConfig::with_base_channels(base));
    initialize_weights(net, seed);
    CheckpointMeta meta;
    meta.network = net->config();
    meta.seed = seed;
    save_checkpoint(path, net, meta);
  }, py::arg("path"), py::arg("base_channels") = 32, py::arg("seed") = 42,
     "Writes an untrained, initialised network as a checkpoint.");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("predict", &Model::predict, py::arg("image"), py::arg("brain_mask"),
           py::arg("patch") = std::vector<int64_t>{128, 128, 128},
           "Returns (labels [D,H,W] int64, attention [3,D,H,W] float32). The image is z-scored internally.")
      .def_property_readonly("epoch", &Model::epoch)
      .def_property_readonly("val_loss", &Model::val_loss)
      .def_property_readonly("num_parameters", &Model::num_parameters);

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  m.attr("METRICS_SCHEMA_VERSION") = kMetricsSchemaVersion;
  m.attr("CHECKPOINT_FORMAT_VERSION") = kCheckpointFormatVersion;
}
