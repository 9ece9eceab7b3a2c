#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <array>
#include <sstream>

#include "upm/config.hpp"
#include "upm/data.hpp"
#include "upm/error.hpp"
#include "upm/eval.hpp"
#include "upm/geometry.hpp"
#include "upm/objectives.hpp"
#include "upm/parallel.hpp"
#include "upm/probe.hpp"
#include "upm/report.hpp"
#include "upm/trainer.hpp"
#include "upm/workflows.hpp"

namespace py = pybind11;

namespace {

using Points = std::vector<std::array<double, 3>>;

std::vector<upm::Vec3> to_vec3(const Points& pts) {
  std::vector<upm::Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back({p[0], p[1], p[2]});
  return out;
}

upm::RunConfig make_config(const std::string& config_text, const std::vector<std::string>& overrides) {
  upm::RunConfig cfg = upm::parse_run_config(config_text, "<config>");
  for (const auto& o : overrides) upm::apply_override(cfg, o);
  return cfg;
}

py::dict report_dict(const upm::EvalReport& rep) {
  py::dict d;
  for (const auto& [k, v] : upm::summary_entries(rep)) d[py::str(k)] = v;
  return d;
}

}  // namespace

PYBIND11_MODULE(_upm, m) {
  m.doc() = "Colored-pointmap contrastive pretraining: data, geometry, objectives, training and evaluation.";

  // Translators run newest first, so the base class goes in before its subclasses.
  py::register_exception<upm::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<upm::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<upm::ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<upm::DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
  py::register_exception<upm::NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<upm::FormatError>(m, "FormatError", PyExc_OSError);
  py::register_exception<upm::IoError>(m, "IoError", PyExc_OSError);

  m.def("set_max_threads", &upm::set_max_threads, py::arg("n"));

  m.def(
      "chamfer_distance",
      [](const Points& a, const Points& b, bool grid) {
        const auto va = to_vec3(a), vb = to_vec3(b);
        return upm::chamfer_distance(va, vb, grid ? upm::NearestNeighbor::kGrid : upm::NearestNeighbor::kBruteForce);
      },
      py::arg("a"), py::arg("b"), py::arg("grid") = true, "Symmetric mean squared nearest-neighbor distance.");

  m.def(
      "soft_targets",
      [](const std::vector<std::size_t>& ranks, double alpha, double tau_r) {
        return upm::soft_targets(ranks, upm::GeoAlignConfig{alpha, tau_r});
      },
      py::arg("ranks"), py::arg("alpha") = 0.7, py::arg("tau_r") = 0.35);

  m.def("cosine_lr", &upm::cosine_lr, py::arg("step"), py::arg("total_steps"), py::arg("base_lr"),
        py::arg("warmup_fraction"));
  m.def("assign_splits", &upm::assign_splits, py::arg("count"), py::arg("seed"));
  m.def("scene_seed", &upm::scene_seed, py::arg("seed"), py::arg("index"));

  py::class_<upm::ObjectAnnotation>(m, "ObjectAnnotation")
      .def_readonly("object_id", &upm::ObjectAnnotation::object_id)
      .def_readonly("referring_text", &upm::ObjectAnnotation::referring_text)
      .def_readonly("category", &upm::ObjectAnnotation::category)
      .def_readonly("color", &upm::ObjectAnnotation::color)
      .def_property_readonly("aabb", [](const upm::ObjectAnnotation& o) {
        return std::make_pair(std::array<double, 3>{o.aabb.min.x, o.aabb.min.y, o.aabb.min.z},
                              std::array<double, 3>{o.aabb.max.x, o.aabb.max.y, o.aabb.max.z});
      });

  py::class_<upm::View>(m, "View")
      .def_readonly("height", &upm::View::height)
      .def_readonly("width", &upm::View::width)
      .def_readonly("image", &upm::View::image)
      .def_readonly("depth", &upm::View::depth)
      .def("valid_points", [](const upm::View& v) {
        Points out;
        for (const auto& p : v.pointmap().valid_points()) out.push_back({p.x, p.y, p.z});
        return out;
      });

  py::class_<upm::Scene>(m, "Scene")
      .def_readonly("scene_id", &upm::Scene::scene_id)
      .def_readonly("scene_type", &upm::Scene::scene_type)
      .def_readonly("scene_caption", &upm::Scene::scene_caption)
      .def_readonly("view_captions", &upm::Scene::view_captions)
      .def_readonly("views", &upm::Scene::views)
      .def_readonly("objects", &upm::Scene::objects)
      .def("__eq__", [](const upm::Scene& a, const upm::Scene& b) { return a == b; })
      .def("chamfer_matrix", [](const upm::Scene& s, std::size_t points) {
        return upm::chamfer_matrix(s.pointmaps(), upm::Subsample{points, 0});
      }, py::arg("points") = 512);

  m.def(
      "generate_scene",
      [](std::uint64_t seed, const std::string& scene_type, const std::vector<std::string>& overrides) {
        auto cfg = make_config("", overrides);
        if (!scene_type.empty()) cfg.data.scene_type = scene_type;
        cfg.data.validate();
        return upm::generate_scene(cfg.data, seed);
      },
      py::arg("seed"), py::arg("scene_type") = "", py::arg("overrides") = std::vector<std::string>{});
  m.def("render_depth_consistency_check", &upm::render_depth_consistency_check, py::arg("scene"));
  m.def("save_scene", &upm::save_scene, py::arg("scene"), py::arg("dir"));
  m.def("load_scene", &upm::load_scene, py::arg("dir"));

  m.def(
      "validate_config",
      [](const std::string& text, const std::vector<std::string>& overrides) { make_config(text, overrides).validate(); },
      py::arg("text"), py::arg("overrides") = std::vector<std::string>{},
      "Parses and validates an INI-style config; raises ConfigError on any problem.");

  m.def(
      "gen",
      [](const std::filesystem::path& out_dir, std::size_t count, std::uint64_t seed, const std::string& config_text,
         const std::vector<std::string>& overrides) {
        auto cfg = make_config(config_text, overrides);
        cfg.data.seed = seed;
        py::gil_scoped_release release;
        const auto man = upm::cmd_gen(cfg, out_dir, count, seed);
        std::vector<std::pair<std::string, std::string>> entries;
        for (const auto& e : man.entries) entries.emplace_back(e.split, e.dir.string());
        return entries;
      },
      py::arg("out_dir"), py::arg("count"), py::arg("seed"), py::arg("config_text") = "",
      py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "pretrain",
      [](const std::filesystem::path& manifest, const std::filesystem::path& out_dir, const std::string& config_text,
         const std::vector<std::string>& overrides) {
        const auto cfg = make_config(config_text, overrides);
        py::gil_scoped_release release;
        const auto r = upm::cmd_pretrain(cfg, manifest, out_dir);
        std::vector<double> totals;
        for (const auto& s : r.steps) totals.push_back(s.loss.total);
        return totals;
      },
      py::arg("manifest"), py::arg("out_dir"), py::arg("config_text") = "",
      py::arg("overrides") = std::vector<std::string>{}, "Trains and returns the per-step total loss.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
         const std::filesystem::path& out_dir, const std::string& config_text, const std::vector<std::string>& overrides) {
        const auto cfg = make_config(config_text, overrides);
        std::ostringstream sink;
        upm::EvalReport rep;
        {
          py::gil_scoped_release release;
          rep = upm::cmd_eval(cfg, checkpoint, manifest, out_dir, sink);
        }
        return report_dict(rep);
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("out_dir"), py::arg("config_text") = "",
      py::arg("overrides") = std::vector<std::string>{}, "Runs the evaluation suite; returns summary key/values.");

  m.def(
      "inspect",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& scene_dir) {
        std::ostringstream sink;
        const auto r = upm::cmd_inspect(checkpoint, scene_dir, sink);
        py::dict d;
        d["similarity"] = r.similarity;
        d["chamfer"] = r.chamfer;
        d["views"] = r.embeddings.size();
        d["spearman"] = r.spearman;
        d["text"] = sink.str();
        return d;
      },
      py::arg("checkpoint"), py::arg("scene_dir"));

  m.def(
      "linear_probe",
      [](const std::vector<std::vector<double>>& train_x, const std::vector<std::size_t>& train_y,
         const std::vector<std::vector<double>>& test_x, const std::vector<std::size_t>& test_y, std::size_t classes,
         std::size_t shots, std::uint64_t seed) {
        const auto pack = [](const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y) {
          if (x.size() != y.size()) throw upm::ContractError("one label per row required");
          upm::LabeledSet s;
          s.dim = x.empty() ? 0 : x.front().size();
          for (std::size_t i = 0; i < x.size(); ++i) s.push_back(x[i], y[i]);
          return s;
        };
        upm::ProbeConfig cfg;
        cfg.shots = shots;
        cfg.seed = seed;
        const auto r = upm::linear_probe(pack(train_x, train_y), pack(test_x, test_y), classes, cfg);
        py::dict d;
        d["test_accuracy"] = r.test_accuracy;
        d["train_accuracy"] = r.train_accuracy;
        d["chosen_reg"] = r.chosen_reg;
        return d;
      },
      py::arg("train_x"), py::arg("train_y"), py::arg("test_x"), py::arg("test_y"), py::arg("classes"),
      py::arg("shots") = 5, py::arg("seed") = 0);
}
