#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "bevkd/config.hpp"
#include "bevkd/pipeline.hpp"
#include "bevkd/util.hpp"

namespace py = pybind11;
using namespace bevkd;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  std::vector<std::int64_t> shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<std::size_t>(i)] = arr.shape(i);
  Tensor t(shape);
  std::copy(arr.data(), arr.data() + arr.size(), t.data());
  return t;
}

py::dict metrics_dict(const evalkit::Metrics& m) {
  py::dict d;
  d["mAP"] = m.map;
  d["NDS_star"] = m.nds;
  d["mATE"] = m.errors.mate;
  d["mASE"] = m.errors.mase;
  d["mAOE"] = m.errors.maoe;
  d["gt_count"] = m.gt_count;
  d["pred_count"] = m.pred_count;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Synthetic BEV detection world with cross-modal knowledge distillation";

  py::register_exception<Error>(m, "BevkdError");

  // --- world -----------------------------------------------------------
  py::class_<world::BoxLabel>(m, "BoxLabel")
      .def(py::init([](int cls, float x, float y, float w, float l, float yaw) {
             return world::BoxLabel{cls, x, y, w, l, yaw};
           }),
           py::arg("class_id"), py::arg("x"), py::arg("y"), py::arg("w"), py::arg("l"),
           py::arg("yaw"))
      .def_readwrite("class_id", &world::BoxLabel::class_id)
      .def_readwrite("x", &world::BoxLabel::x)
      .def_readwrite("y", &world::BoxLabel::y)
      .def_readwrite("w", &world::BoxLabel::w)
      .def_readwrite("l", &world::BoxLabel::l)
      .def_readwrite("yaw", &world::BoxLabel::yaw)
      .def("distance", &world::BoxLabel::distance);

  py::class_<world::Scene>(m, "Scene")
      .def(py::init<>())
      .def_readwrite("scene_id", &world::Scene::scene_id)
      .def_readwrite("boxes", &world::Scene::boxes)
      .def_property_readonly("num_points",
                             [](const world::Scene& s) { return s.points.size(); })
      .def_property_readonly("points",
                             [](const world::Scene& s) {
                               py::array_t<float> out(
                                   {static_cast<py::ssize_t>(s.points.size()), py::ssize_t(2)});
                               auto* dst = out.mutable_data();
                               for (const auto& p : s.points) {
                                 *dst++ = p.x;
                                 *dst++ = p.y;
                               }
                               return out;
                             })
      .def_property_readonly("panorama", [](const world::Scene& s) {
        py::array_t<float> out({static_cast<py::ssize_t>(s.panorama.size())});
        std::copy(s.panorama.begin(), s.panorama.end(), out.mutable_data());
        return out;
      });

  py::class_<world::WorldSpec>(m, "WorldSpec")
      .def_static("defaults", &world::WorldSpec::defaults)
      .def_readwrite("extent", &world::WorldSpec::extent)
      .def_readwrite("num_classes", &world::WorldSpec::num_classes)
      .def_readwrite("max_objects", &world::WorldSpec::max_objects)
      .def_readwrite("density_k", &world::WorldSpec::density_k)
      .def_readwrite("occlusion", &world::WorldSpec::occlusion)
      .def_readwrite("lidar_noise", &world::WorldSpec::lidar_noise)
      .def_readwrite("camera_range_noise", &world::WorldSpec::camera_range_noise)
      .def_readwrite("azimuth_bins", &world::WorldSpec::azimuth_bins)
      .def_readwrite("seed", &world::WorldSpec::seed);

  m.def(
      "make_dataset",
      [](const world::WorldSpec& spec, std::int64_t count, std::uint64_t seed) {
        return world::make_dataset(spec, count, seed);
      },
      py::arg("spec"), py::arg("count"), py::arg("seed"));
  m.def("serialize_dataset", &world::serialize_dataset, py::arg("scenes"), py::arg("spec"),
        py::arg("path"));
  m.def(
      "load_dataset",
      [](const std::filesystem::path& path) {
        auto ds = world::load_dataset(path);
        return py::make_tuple(ds.spec, ds.scenes);
      },
      py::arg("path"));

  // --- grid ops ----------------------------------------------------------
  py::class_<bev::BevGridSpec>(m, "BevGridSpec")
      .def(py::init([](std::int32_t h, std::int32_t w, double cell, double ox, double oy) {
             return bev::BevGridSpec{h, w, cell, ox, oy};
           }),
           py::arg("height"), py::arg("width"), py::arg("cell_size"), py::arg("origin_x"),
           py::arg("origin_y"))
      .def_static("covering", &bev::BevGridSpec::covering, py::arg("world"), py::arg("cells"))
      .def_readonly("height", &bev::BevGridSpec::height)
      .def_readonly("width", &bev::BevGridSpec::width)
      .def_readonly("cell_size", &bev::BevGridSpec::cell_size);

  m.def(
      "gt_heatmap",
      [](const world::Scene& scene, const bev::BevGridSpec& grid, std::int32_t classes,
         double beta, double r_min) {
        return to_numpy(bev::gt_heatmap(scene, grid, classes, {beta, r_min}).data);
      },
      py::arg("scene"), py::arg("grid"), py::arg("num_classes"), py::arg("beta") = 0.5,
      py::arg("r_min") = 2.0);
  m.def(
      "foreground_mask",
      [](const py::array_t<double>& heatmap, const bev::BevGridSpec& grid, double tau) {
        bev::Heatmap hm{grid, from_numpy(heatmap)};
        const auto mask = bev::foreground_mask(hm, tau);
        return py::make_tuple(to_numpy(mask.mask), mask.n_p);
      },
      py::arg("heatmap"), py::arg("grid"), py::arg("tau"));
  m.def(
      "box_footprint",
      [](const world::BoxLabel& box, const bev::BevGridSpec& grid) {
        std::vector<std::pair<std::int64_t, std::int64_t>> out;
        for (const auto& c : bev::box_footprint(box, grid)) out.emplace_back(c.i, c.j);
        return out;
      },
      py::arg("box"), py::arg("grid"));
  m.def(
      "map_to_bev",
      [](const std::vector<py::array_t<double>>& vectors, const std::vector<world::BoxLabel>& boxes,
         const bev::BevGridSpec& grid) {
        std::vector<Tensor> vs;
        vs.reserve(vectors.size());
        for (const auto& v : vectors) vs.push_back(from_numpy(v));
        return to_numpy(bev::map_to_bev(vs, boxes, grid));
      },
      py::arg("vectors"), py::arg("boxes"), py::arg("grid"));

  // --- losses -------------------------------------------------------------
  m.def(
      "masked_feature_loss",
      [](const py::array_t<double>& target, const py::array_t<double>& adapted,
         const py::array_t<double>& mask, std::int64_t n_p) {
        return distill::masked_feature_loss(from_numpy(target), from_numpy(adapted),
                                            from_numpy(mask), n_p, nullptr);
      },
      py::arg("target"), py::arg("adapted"), py::arg("mask"), py::arg("n_p"));
  m.def(
      "response_loss",
      [](const py::array_t<double>& t_hm, const py::array_t<double>& t_reg,
         const py::array_t<double>& s_hm, const py::array_t<double>& s_reg,
         const py::array_t<double>& mask, std::int64_t n_fg, double gamma) {
        return distill::response_loss(from_numpy(t_hm), from_numpy(t_reg), from_numpy(s_hm),
                                      from_numpy(s_reg), from_numpy(mask), n_fg, gamma, nullptr,
                                      nullptr);
      },
      py::arg("teacher_heatmap"), py::arg("teacher_regress"), py::arg("student_heatmap"),
      py::arg("student_regress"), py::arg("mask"), py::arg("n_fg"), py::arg("focal_gamma") = 2.0);
  m.def(
      "total_loss",
      [](double det, std::optional<double> lidar_feat, std::optional<double> label_feat,
         std::optional<double> lidar_resp, double l1, double l2, double l3) {
        distill::LossWeights w;
        w.lambda_lidar_feat = l1;
        w.lambda_label_feat = l2;
        w.lambda_lidar_resp = l3;
        return distill::total_loss(det, lidar_feat, label_feat, lidar_resp, w);
      },
      py::arg("detection"), py::arg("lidar_feat") = std::nullopt,
      py::arg("label_feat") = std::nullopt, py::arg("lidar_resp") = std::nullopt,
      py::arg("lambda1") = 1.0, py::arg("lambda2") = 1.0, py::arg("lambda3") = 0.25);

  // --- evaluation -----------------------------------------------------------
  m.def(
      "evaluate",
      [](const std::vector<std::tuple<world::BoxLabel, double, std::int64_t>>& preds,
         const std::vector<std::pair<world::BoxLabel, std::int64_t>>& gts, std::int32_t classes,
         const std::vector<double>& thresholds, double tp_threshold) {
        std::vector<evalkit::PredBox> p;
        std::int64_t det_id = 0;
        for (const auto& [box, score, scene] : preds) p.push_back({box, score, scene, det_id++});
        std::vector<evalkit::GtBox> g;
        for (const auto& [box, scene] : gts) g.push_back({box, scene});
        return metrics_dict(evalkit::evaluate(p, g, classes, thresholds, tp_threshold));
      },
      py::arg("predictions"), py::arg("ground_truth"), py::arg("num_classes"),
      py::arg("thresholds") = std::vector<double>{0.5, 1.0, 2.0, 4.0},
      py::arg("tp_threshold") = 2.0);

  // --- config and pipeline ---------------------------------------------------
  py::class_<config::ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_static("load", &config::ExperimentConfig::load, py::arg("path"))
      .def_static(
          "from_json",
          [](const std::string& text) {
            return config::ExperimentConfig::from_json_string(text, "<string>");
          },
          py::arg("text"))
      .def("to_json", &config::ExperimentConfig::to_json_string)
      .def("save", &config::ExperimentConfig::save, py::arg("path"))
      .def_readwrite("seed", &config::ExperimentConfig::seed)
      .def_readwrite("world", &config::ExperimentConfig::world)
      .def_readwrite("grid_cells", &config::ExperimentConfig::grid_cells)
      .def("validate", &config::ExperimentConfig::validate);

  m.def(
      "run_stage_teacher",
      [](const config::ExperimentConfig& cfg, const std::vector<world::Scene>& train,
         const std::vector<world::Scene>& val, const std::filesystem::path& out,
         std::uint64_t seed) {
        const auto res = pipeline::run_stage_teacher(cfg, train, val, out, seed);
        py::dict d;
        d["checkpoint"] = res.checkpoint.string();
        d["metrics"] = metrics_dict(res.final_metrics);
        return d;
      },
      py::arg("config"), py::arg("train"), py::arg("val"), py::arg("out_dir"), py::arg("seed"));
  m.def(
      "run_stage_labelenc",
      [](const config::ExperimentConfig& cfg, const std::vector<world::Scene>& train,
         const std::vector<world::Scene>& val, const std::filesystem::path& teacher_ckpt,
         const std::filesystem::path& out, std::uint64_t seed) {
        const auto res = pipeline::run_stage_labelenc(cfg, train, val, teacher_ckpt, out, seed);
        py::dict d;
        d["checkpoint"] = res.checkpoint.string();
        d["autoencoder_metrics"] = metrics_dict(res.autoencoder_metrics);
        return d;
      },
      py::arg("config"), py::arg("train"), py::arg("val"), py::arg("teacher_ckpt"),
      py::arg("out_dir"), py::arg("seed"));
  m.def(
      "run_stage_student",
      [](const config::ExperimentConfig& cfg, const std::vector<world::Scene>& train,
         const std::vector<world::Scene>& val, const std::filesystem::path& teacher_ckpt,
         const std::filesystem::path& labelenc_ckpt, const std::filesystem::path& out,
         std::uint64_t seed) {
        const auto res =
            pipeline::run_stage_student(cfg, train, val, teacher_ckpt, labelenc_ckpt, out, seed);
        py::dict d;
        d["checkpoint"] = res.checkpoint.string();
        d["metrics"] = metrics_dict(res.final_metrics);
        d["near"] = metrics_dict(res.buckets.near_bucket);
        d["far"] = metrics_dict(res.buckets.far_bucket);
        return d;
      },
      py::arg("config"), py::arg("train"), py::arg("val"), py::arg("teacher_ckpt") = "",
      py::arg("labelenc_ckpt") = "", py::arg("out_dir") = "run", py::arg("seed") = 0);
  m.def(
      "run_ablation_matrix",
      [](const config::ExperimentConfig& cfg, const std::string& axis,
         const std::vector<world::Scene>& train, const std::vector<world::Scene>& val,
         const std::filesystem::path& out, int seeds) {
        const auto rep = pipeline::run_ablation_matrix(cfg, axis, train, val, out, seeds);
        py::dict d;
        d["axis"] = rep.axis;
        d["columns"] = rep.columns;
        d["rows"] = rep.rows;
        d["csv"] = rep.csv_path.string();
        return d;
      },
      py::arg("config"), py::arg("axis"), py::arg("train"), py::arg("val"), py::arg("out_dir"),
      py::arg("seeds") = 3);

  m.attr("__version__") = "0.1.0";
}
