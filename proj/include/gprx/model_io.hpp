#ifndef GPRX_MODEL_IO_HPP
#define GPRX_MODEL_IO_HPP

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>

#include "gprx/dataset.hpp"
#include "gprx/error.hpp"
#include "gprx/gp.hpp"

namespace gprx {

using json = nlohmann::json;

namespace io {

inline json vec(const Eigen::VectorXd &v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    a.push_back(v(i));
  }
  return a;
}

inline json mat(const Eigen::MatrixXd &m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(vec(m.row(r).transpose()));
  }
  return rows;
}

// null encodes NaN (JSON has no NaN literal).
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double to_num(const json &j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline Eigen::VectorXd to_vec(const json &j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    v(static_cast<Eigen::Index>(i)) = to_num(j[i]);
  }
  return v;
}

inline Eigen::MatrixXd to_mat(const json &j, Eigen::Index cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (static_cast<Eigen::Index>(j[r].size()) != cols) {
      throw Error("ragged matrix in model file");
    }
    m.row(static_cast<Eigen::Index>(r)) = to_vec(j[r]).transpose();
  }
  return m;
}

} // namespace io

inline json schema_to_json(const Schema &schema) {
  json out = json::array();
  for (const auto &c : schema) {
    out.push_back({{"name", c.name},
                   {"symbol", c.symbol},
                   {"unit", c.unit},
                   {"role", c.role == ColumnRole::target ? "target" : "feature"}});
  }
  return out;
}

inline Schema schema_from_json(const json &j) {
  if (!j.is_array()) {
    throw SchemaError("schema must be a JSON array of columns");
  }
  Schema schema;
  for (const auto &c : j) {
    ColumnSchema col;
    col.name = c.at("name").get<std::string>();
    col.symbol = c.at("symbol").get<std::string>();
    col.unit = c.value("unit", "");
    const auto role = c.value("role", "feature");
    if (role != "feature" && role != "target") {
      throw SchemaError("column role must be feature or target, got " + role);
    }
    col.role = role == "target" ? ColumnRole::target : ColumnRole::feature;
    schema.push_back(std::move(col));
  }
  validate_schema(schema);
  return schema;
}

inline json scaling_to_json(const ScalingParams &p) {
  return {{"feature_mean", io::vec(p.feature_mean)},
          {"feature_std", io::vec(p.feature_std)},
          {"target_mean", p.target_mean},
          {"target_std", p.target_std}};
}

inline ScalingParams scaling_from_json(const json &j) {
  ScalingParams p;
  p.feature_mean = io::to_vec(j.at("feature_mean"));
  p.feature_std = io::to_vec(j.at("feature_std"));
  p.target_mean = j.at("target_mean").get<double>();
  p.target_std = j.at("target_std").get<double>();
  return p;
}

inline json optimizer_to_json(const LbfgsConfig &c) {
  return {{"memory", c.memory},
          {"max_iterations", c.max_iterations},
          {"gradient_tolerance", c.gradient_tolerance},
          {"c1", c.c1},
          {"c2", c.c2},
          {"max_line_search_steps", c.max_line_search_steps}};
}

inline LbfgsConfig optimizer_from_json(const json &j) {
  LbfgsConfig c;
  c.memory = j.value("memory", c.memory);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.gradient_tolerance = j.value("gradient_tolerance", c.gradient_tolerance);
  c.c1 = j.value("c1", c.c1);
  c.c2 = j.value("c2", c.c2);
  c.max_line_search_steps = j.value("max_line_search_steps", c.max_line_search_steps);
  return c;
}

inline json fit_log_to_json(const FitLog &log) {
  json restarts = json::array();
  for (const auto &r : log.restarts) {
    json trace = json::array();
    for (const auto &t : r.trace) {
      trace.push_back({t.iteration, io::num(t.value), io::num(t.gradient_norm)});
    }
    restarts.push_back({{"initial_theta", io::vec(r.initial_theta)},
                        {"final_theta", io::vec(r.final_theta)},
                        {"initial_lml", io::num(r.initial_lml)},
                        {"final_lml", io::num(r.final_lml)},
                        {"iterations", r.iterations},
                        {"evaluations", r.evaluations},
                        {"termination", r.termination},
                        {"error", r.error},
                        {"trace", trace}});
  }
  return {{"restarts", restarts},
          {"best_restart", log.best_restart},
          {"optimizer", optimizer_to_json(log.optimizer)},
          {"seed", log.seed},
          {"initial_lml", io::num(log.initial_lml)},
          {"final_lml", io::num(log.final_lml)}};
}

inline FitLog fit_log_from_json(const json &j) {
  FitLog log;
  for (const auto &r : j.at("restarts")) {
    RestartRecord rec;
    rec.initial_theta = io::to_vec(r.at("initial_theta"));
    rec.final_theta = io::to_vec(r.at("final_theta"));
    rec.initial_lml = io::to_num(r.at("initial_lml"));
    rec.final_lml = io::to_num(r.at("final_lml"));
    rec.iterations = r.at("iterations").get<int>();
    rec.evaluations = r.at("evaluations").get<int>();
    rec.termination = r.at("termination").get<std::string>();
    rec.error = r.at("error").get<std::string>();
    for (const auto &t : r.at("trace")) {
      rec.trace.push_back({t[0].get<int>(), io::to_num(t[1]), io::to_num(t[2])});
    }
    log.restarts.push_back(std::move(rec));
  }
  log.best_restart = j.at("best_restart").get<int>();
  log.optimizer = optimizer_from_json(j.at("optimizer"));
  log.seed = j.at("seed").get<std::uint64_t>();
  log.initial_lml = io::to_num(j.at("initial_lml"));
  log.final_lml = io::to_num(j.at("final_lml"));
  return log;
}

/// A trained model together with the preprocessing needed to apply it to
/// raw rows.
struct SavedModel {
  TrainedGP model;
  std::optional<ScalingParams> scaling;
  Schema schema; ///< feature columns the model was trained on, plus target
};

inline json model_to_json(const SavedModel &m) {
  const auto &gp = m.model;
  const auto &h = gp.hyperparams();
  return {{"format", "gprx-model"},
          {"version", 1},
          {"kernel", to_string(gp.mode())},
          {"hyperparameters",
           {{"signal_std", h.signal_std},
            {"length_scales", io::vec(h.length_scales)},
            {"noise_std", h.noise_std}}},
          {"jitter", gp.jitter()},
          {"log_marginal_likelihood", gp.log_marginal_likelihood()},
          {"target_transform",
           {{"offset", gp.target_transform().offset},
            {"scale", gp.target_transform().scale}}},
          {"scaling", m.scaling ? scaling_to_json(*m.scaling) : json(nullptr)},
          {"schema", schema_to_json(m.schema)},
          {"training", {{"inputs", io::mat(gp.inputs())}, {"targets", io::vec(gp.targets())}}},
          {"fit_log", fit_log_to_json(gp.fit_log())}};
}

/// Rebuilds the model with the stored jitter, so predictions match the
/// saved model bit for bit on the same platform.
inline SavedModel model_from_json(const json &j) {
  if (j.value("format", "") != "gprx-model") {
    throw Error("not a gprx model file");
  }
  const auto &hj = j.at("hyperparameters");
  KernelHyperparams h;
  h.signal_std = hj.at("signal_std").get<double>();
  h.length_scales = io::to_vec(hj.at("length_scales"));
  h.noise_std = hj.at("noise_std").get<double>();
  const auto d = h.length_scales.size();
  const auto &tj = j.at("training");
  Eigen::MatrixXd X = io::to_mat(tj.at("inputs"), d);
  Eigen::VectorXd y = io::to_vec(tj.at("targets"));
  TrainedGP gp(std::move(X), std::move(y), std::move(h),
               kernel_mode_from_string(j.at("kernel").get<std::string>()),
               j.at("jitter").get<double>(), fit_log_from_json(j.at("fit_log")));
  const auto &tt = j.at("target_transform");
  std::optional<ScalingParams> scaling;
  if (!j.at("scaling").is_null()) {
    scaling = scaling_from_json(j.at("scaling"));
  }
  return {gp.with_target_transform({tt.at("offset").get<double>(), tt.at("scale").get<double>()}),
          std::move(scaling), schema_from_json(j.at("schema"))};
}

inline SavedModel load_model(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open model file: " + path);
  }
  json j;
  try {
    in >> j;
  } catch (const json::exception &e) {
    throw Error("malformed model file " + path + ": " + e.what());
  }
  return model_from_json(j);
}

} // namespace gprx

#endif // GPRX_MODEL_IO_HPP
