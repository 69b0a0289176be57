#ifndef GPRX_PIPELINE_HPP
#define GPRX_PIPELINE_HPP

#include <json.hpp>
#include <openssl/evp.h>
#include <openssl/crypto.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gprx/csv.hpp"
#include "gprx/dataset.hpp"
#include "gprx/error.hpp"
#include "gprx/gp.hpp"
#include "gprx/lime.hpp"
#include "gprx/model_io.hpp"
#include "gprx/savitzky_golay.hpp"
#include "gprx/selection.hpp"

namespace gprx {

inline constexpr const char *kVersion = "1.0.0";

namespace fs = std::filesystem;

/// Invalid configuration: unknown keys, wrong types, unknown enum names.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// A pipeline stage failed; the message is prefixed with the stage name.
class StageError : public Error {
public:
  StageError(std::string stage, const std::string &what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string &stage() const { return stage_; }

private:
  std::string stage_;
};

// ---------------------------------------------------------------- config

struct PreprocessSettings {
  bool deduplicate = true;
  bool filter = true;
  int filter_window = 11;
  int filter_order = 3;
};

struct SplitSettings {
  double train_fraction = 0.8;
  int bins = 10;
};

struct GpSettings {
  KernelMode kernel = KernelMode::ard;
  int restarts = 3;
  LbfgsConfig optimizer;
};

struct LimeSettings {
  int samples = 1000;
  std::optional<double> kernel_width; ///< null: 0.75 * sqrt(d)
  PerturbationKind distribution = PerturbationKind::gaussian;
  double scale = 1.0;
  double lambda = 0.01;
  unsigned threads = 0; ///< 0: hardware concurrency; never changes results
};

struct SelectionSettings {
  SelectionStrategy strategy = SelectionStrategy::elbow;
  ImportanceScore rank_by = ImportanceScore::mean_abs;
  double elbow_threshold = 0.90;
  int bootstrap_runs = 100;
  double bootstrap_inclusion = 0.7;
  double improvement_floor = 0.01;
};

struct RunConfig {
  std::string input = "data.csv";
  std::optional<std::string> schema; ///< JSON schema file; null: default schema
  std::string output_dir = "out";
  std::uint64_t seed = 42;
  PreprocessSettings preprocess;
  SplitSettings split;
  GpSettings gp;
  LimeSettings lime;
  SelectionSettings selection;
};

inline json config_to_json(const RunConfig &c) {
  return {
      {"input", c.input},
      {"schema", c.schema ? json(*c.schema) : json(nullptr)},
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"preprocess",
       {{"deduplicate", c.preprocess.deduplicate},
        {"filter", c.preprocess.filter},
        {"filter_window", c.preprocess.filter_window},
        {"filter_order", c.preprocess.filter_order}}},
      {"split", {{"train_fraction", c.split.train_fraction}, {"bins", c.split.bins}}},
      {"gp",
       {{"kernel", to_string(c.gp.kernel)},
        {"restarts", c.gp.restarts},
        {"optimizer", optimizer_to_json(c.gp.optimizer)}}},
      {"lime",
       {{"samples", c.lime.samples},
        {"kernel_width", c.lime.kernel_width ? json(*c.lime.kernel_width) : json(nullptr)},
        {"distribution", to_string(c.lime.distribution)},
        {"scale", c.lime.scale},
        {"lambda", c.lime.lambda},
        {"threads", c.lime.threads}}},
      {"selection",
       {{"strategy", to_string(c.selection.strategy)},
        {"rank_by", to_string(c.selection.rank_by)},
        {"elbow_threshold", c.selection.elbow_threshold},
        {"bootstrap_runs", c.selection.bootstrap_runs},
        {"bootstrap_inclusion", c.selection.bootstrap_inclusion},
        {"improvement_floor", c.selection.improvement_floor}}},
  };
}

namespace detail {

// Overlays `patch` on `base`, rejecting keys `base` does not have.
inline void merge_known(json &base, const json &patch, const std::string &path) {
  if (!patch.is_object()) {
    throw ConfigError("config" + (path.empty() ? "" : " key '" + path + "'") +
                      " must be a JSON object");
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const auto key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    auto &slot = base[it.key()];
    if (slot.is_object()) {
      merge_known(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

template <typename T>
T field(const json &j, const std::string &path) {
  const json *node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    node = &node->at(path.substr(start, dot - start));
    if (dot == std::string::npos) {
      break;
    }
    start = dot + 1;
  }
  try {
    if constexpr (std::is_same_v<T, std::uint64_t> || std::is_same_v<T, unsigned>) {
      if (!node->is_number_unsigned()) {
        throw ConfigError("");
      }
    } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!node->is_number_integer()) {
        throw ConfigError("");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!node->is_number()) {
        throw ConfigError("");
      }
    }
    return node->get<T>();
  } catch (const std::exception &) {
    throw ConfigError("config key '" + path + "' has the wrong type: " + node->dump());
  }
}

template <typename F>
auto enum_field(const json &j, const std::string &path, F parse) {
  const auto text = field<std::string>(j, path);
  try {
    return parse(text);
  } catch (const Error &e) {
    throw ConfigError("config key '" + path + "': " + e.what());
  }
}

} // namespace detail

/// Parses a config, filling every missing key with its default. Unknown keys
/// and wrongly typed values are ConfigErrors.
inline RunConfig config_from_json(const json &patch) {
  json j = config_to_json(RunConfig{});
  detail::merge_known(j, patch, "");
  using detail::field;
  RunConfig c;
  c.input = field<std::string>(j, "input");
  if (!j.at("schema").is_null()) {
    c.schema = field<std::string>(j, "schema");
  }
  c.output_dir = field<std::string>(j, "output_dir");
  c.seed = field<std::uint64_t>(j, "seed");
  c.preprocess.deduplicate = field<bool>(j, "preprocess.deduplicate");
  c.preprocess.filter = field<bool>(j, "preprocess.filter");
  c.preprocess.filter_window = field<int>(j, "preprocess.filter_window");
  c.preprocess.filter_order = field<int>(j, "preprocess.filter_order");
  c.split.train_fraction = field<double>(j, "split.train_fraction");
  c.split.bins = field<int>(j, "split.bins");
  c.gp.kernel = detail::enum_field(j, "gp.kernel", kernel_mode_from_string);
  c.gp.restarts = field<int>(j, "gp.restarts");
  auto &o = c.gp.optimizer;
  o.memory = field<int>(j, "gp.optimizer.memory");
  o.max_iterations = field<int>(j, "gp.optimizer.max_iterations");
  o.gradient_tolerance = field<double>(j, "gp.optimizer.gradient_tolerance");
  o.c1 = field<double>(j, "gp.optimizer.c1");
  o.c2 = field<double>(j, "gp.optimizer.c2");
  o.max_line_search_steps = field<int>(j, "gp.optimizer.max_line_search_steps");
  c.lime.samples = field<int>(j, "lime.samples");
  if (!j.at("lime").at("kernel_width").is_null()) {
    c.lime.kernel_width = field<double>(j, "lime.kernel_width");
  }
  c.lime.distribution = detail::enum_field(j, "lime.distribution", perturbation_from_string);
  c.lime.scale = field<double>(j, "lime.scale");
  c.lime.lambda = field<double>(j, "lime.lambda");
  c.lime.threads = field<unsigned>(j, "lime.threads");
  c.selection.strategy =
      detail::enum_field(j, "selection.strategy", selection_strategy_from_string);
  c.selection.rank_by =
      detail::enum_field(j, "selection.rank_by", importance_score_from_string);
  c.selection.elbow_threshold = field<double>(j, "selection.elbow_threshold");
  c.selection.bootstrap_runs = field<int>(j, "selection.bootstrap_runs");
  c.selection.bootstrap_inclusion = field<double>(j, "selection.bootstrap_inclusion");
  c.selection.improvement_floor = field<double>(j, "selection.improvement_floor");
  return c;
}

/// Applies `key=value` to a config JSON tree. The key is a dotted path that
/// must already exist; the value is parsed as JSON, falling back to a plain
/// string (so `--set input=data.csv` needs no quoting).
inline void apply_override(json &config, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like key=value, got '" + assignment + "'");
  }
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) {
    value = text;
  }
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t start = 0;;) {
    const auto dot = rest.find('.', start);
    parts.push_back(rest.substr(start, dot - start));
    if (dot == std::string::npos) {
      break;
    }
    start = dot + 1;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    patch = json{{*it, patch}};
  }
  json defaults = config_to_json(RunConfig{});
  detail::merge_known(defaults, patch, ""); // rejects unknown keys
  detail::merge_known(config, patch, "");
}

/// Reads the config file (or starts from defaults), applies overrides in
/// order, then the seed override.
inline RunConfig load_config(const std::optional<std::string> &path,
                             const std::vector<std::string> &overrides = {},
                             std::optional<std::uint64_t> seed = std::nullopt) {
  json j = config_to_json(RunConfig{});
  if (path) {
    std::ifstream in(*path);
    if (!in) {
      throw ConfigError("cannot open config file: " + *path);
    }
    json file;
    try {
      in >> file;
    } catch (const json::exception &e) {
      throw ConfigError("malformed config file " + *path + ": " + e.what());
    }
    detail::merge_known(j, file, "");
  }
  for (const auto &o : overrides) {
    apply_override(j, o);
  }
  if (seed) {
    j["seed"] = *seed;
  }
  return config_from_json(j);
}

// --------------------------------------------------------------- file io

inline std::string read_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partially written file.
inline void write_atomic(const fs::path &path, const std::string &content) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error("cannot write " + tmp.string());
    }
    out << content;
    out.flush();
    if (!out) {
      throw Error("failed writing " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

inline void write_json(const fs::path &path, const json &j) {
  write_atomic(path, j.dump(2) + "\n");
}

inline json read_json(const fs::path &path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception &e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline std::string sha256_hex(const std::string &data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  }
  return hex.str();
}

inline std::string dataset_csv(const Dataset &ds) {
  std::ostringstream s;
  write_dataset(s, ds);
  return s.str();
}

inline Schema load_schema_file(const std::string &path) {
  return schema_from_json(read_json(path));
}

// ---------------------------------------------------------------- stages

/// Stages in execution order.
inline const std::vector<std::string> &stage_names() {
  static const std::vector<std::string> names = {"preprocess", "fit", "predict", "explain",
                                                 "select"};
  return names;
}

struct StageResult {
  std::vector<std::string> artifacts; ///< file names inside the output dir
  json summary = json::object();
};

namespace detail {

inline fs::path require(const RunConfig &c, const std::string &name, const std::string &stage) {
  const fs::path p = fs::path(c.output_dir) / name;
  if (!fs::exists(p)) {
    throw Error("missing " + p.string() + "; run " + stage + " first");
  }
  return p;
}

inline Schema preprocessed_schema(const RunConfig &c) {
  return schema_from_json(read_json(require(c, "preprocess.json", "preprocess")).at("schema"));
}

inline std::vector<std::size_t> test_rows(const RunConfig &c) {
  return read_json(require(c, "split.json", "preprocess"))
      .at("test")
      .get<std::vector<std::size_t>>();
}

inline FitOptions fit_options(const RunConfig &c) {
  FitOptions o;
  o.mode = c.gp.kernel;
  o.optimizer = c.gp.optimizer;
  o.restarts = c.gp.restarts;
  o.seed = c.seed;
  return o;
}

inline LimeConfig lime_config(const RunConfig &c) {
  LimeConfig l;
  l.samples = c.lime.samples;
  l.kernel_width = c.lime.kernel_width;
  l.distribution = c.lime.distribution;
  l.scale = c.lime.scale;
  l.lambda = c.lime.lambda;
  l.seed = c.seed;
  return l;
}

inline SelectionParams selection_params(const RunConfig &c) {
  SelectionParams p;
  p.elbow_threshold = c.selection.elbow_threshold;
  p.bootstrap_runs = c.selection.bootstrap_runs;
  p.bootstrap_inclusion = c.selection.bootstrap_inclusion;
  p.improvement_floor = c.selection.improvement_floor;
  p.seed = c.seed;
  return p;
}

inline Eigen::VectorXd raw_target(const Dataset &standardized, const ScalingParams &p) {
  return (standardized.target.array() * p.target_std + p.target_mean).matrix();
}

inline std::string csv_line(const csv::Row &row) {
  std::ostringstream s;
  csv::write_row(s, row);
  return s.str();
}

inline std::string num(double v) { return csv::format_double(v); }

} // namespace detail

/// Load, deduplicate, filter, split, and standardize the input table.
inline StageResult cmd_preprocess(const RunConfig &c) {
  const Schema schema = c.schema ? load_schema_file(*c.schema) : marun_schema();
  const Dataset raw = load_dataset(c.input, schema);
  const auto rows_read = static_cast<std::size_t>(raw.rows());

  DedupResult dedup;
  if (c.preprocess.deduplicate) {
    dedup = deduplicate(raw);
  } else {
    dedup.data = raw;
    dedup.kept.resize(rows_read);
    std::iota(dedup.kept.begin(), dedup.kept.end(), std::size_t{0});
  }
  Dataset clean = std::move(dedup.data);

  if (c.preprocess.filter) {
    const int w = c.preprocess.filter_window;
    const int o = c.preprocess.filter_order;
    check_savgol_params(w, o);
    if (clean.rows() < w) {
      throw Error("Savitzky-Golay window (" + std::to_string(w) + ") exceeds the " +
                  std::to_string(clean.rows()) + " rows left after deduplication");
    }
    for (Eigen::Index j = 0; j < clean.dims(); ++j) {
      clean.features.col(j) = savitzky_golay(clean.features.col(j), w, o);
    }
    clean.target = savitzky_golay(clean.target, w, o);
  }

  SplitSpec spec;
  spec.train_fraction = c.split.train_fraction;
  spec.bins = c.split.bins;
  spec.seed = c.seed;
  const auto idx = split_indices(clean.target, spec);
  const Dataset train = select_rows(clean, idx.train);
  const Dataset test = select_rows(clean, idx.test);
  const ScalingParams scaling = fit_scaling(train);

  const fs::path out = c.output_dir;
  std::vector<std::size_t> source_test;
  for (auto i : idx.test) {
    source_test.push_back(dedup.kept[i]);
  }
  const json split_json = {{"index_base", "rows after deduplication, 0-based"},
                           {"rows", clean.rows()},
                           {"train_fraction", spec.train_fraction},
                           {"bins", spec.bins},
                           {"seed", spec.seed},
                           {"train", idx.train},
                           {"test", idx.test},
                           {"test_input_rows", source_test}};
  json feature_symbols = json::array();
  for (const auto &f : clean.feature_columns()) {
    feature_symbols.push_back(f.symbol);
  }
  json scaling_json = scaling_to_json(scaling);
  scaling_json["features"] = feature_symbols;
  scaling_json["target"] = clean.target_column().symbol;

  const json sidecar = {{"input", c.input},
                        {"rows_read", rows_read},
                        {"duplicates_removed", dedup.removed},
                        {"rows_after_dedup", clean.rows()},
                        {"deduplicate", c.preprocess.deduplicate},
                        {"filter",
                         {{"enabled", c.preprocess.filter},
                          {"method", "savitzky-golay"},
                          {"window", c.preprocess.filter_window},
                          {"order", c.preprocess.filter_order}}},
                        {"n_train", train.rows()},
                        {"n_test", test.rows()},
                        {"schema", schema_to_json(clean.schema)},
                        {"scaling", scaling_json},
                        {"split", {{"train", idx.train}, {"test", idx.test}}}};

  write_atomic(out / "train.csv", dataset_csv(apply_scaling(train, scaling)));
  write_atomic(out / "test.csv", dataset_csv(apply_scaling(test, scaling)));
  write_json(out / "scaling.json", scaling_json);
  write_json(out / "split.json", split_json);
  write_json(out / "preprocess.json", sidecar);

  StageResult r;
  r.artifacts = {"train.csv", "test.csv", "scaling.json", "split.json", "preprocess.json"};
  r.summary = {{"rows_read", rows_read},
               {"removed", dedup.removed},
               {"n_train", train.rows()},
               {"n_test", test.rows()}};
  return r;
}

namespace detail {

inline json restart_summaries(const FitLog &log) {
  json out = json::array();
  for (std::size_t i = 0; i < log.restarts.size(); ++i) {
    const auto &r = log.restarts[i];
    out.push_back({{"restart", i},
                   {"initial_lml", io::num(r.initial_lml)},
                   {"final_lml", io::num(r.final_lml)},
                   {"iterations", r.iterations},
                   {"evaluations", r.evaluations},
                   {"termination", r.termination},
                   {"error", r.error}});
  }
  return out;
}

inline std::string trace_csv(const FitLog &log) {
  std::string s = csv_line({"restart", "iteration", "lml", "gradient_max_abs"});
  for (std::size_t i = 0; i < log.restarts.size(); ++i) {
    for (const auto &t : log.restarts[i].trace) {
      // the optimizer minimizes -LML
      s += csv_line({std::to_string(i), std::to_string(t.iteration), num(-t.value),
                     num(t.gradient_norm)});
    }
  }
  return s;
}

} // namespace detail

/// Fits the GP on the standardized training split.
inline StageResult cmd_fit(const RunConfig &c) {
  const Schema schema = detail::preprocessed_schema(c);
  const auto scaling = scaling_from_json(read_json(detail::require(c, "scaling.json", "preprocess")));
  const Dataset train = load_dataset(detail::require(c, "train.csv", "preprocess").string(), schema);
  const fs::path out = c.output_dir;

  TrainedGP model = [&] {
    try {
      return fit(train.features, train.target, detail::fit_options(c));
    } catch (const FitError &e) {
      write_json(out / "fit_report.json", {{"status", "failed"},
                                           {"error", e.what()},
                                           {"restarts", detail::restart_summaries(e.log())}});
      write_atomic(out / "fit_trace.csv", detail::trace_csv(e.log()));
      throw;
    }
  }();
  model = model.with_target_transform({scaling.target_mean, scaling.target_std});
  write_json(out / "model.json", model_to_json({model, scaling, schema}));

  const auto &h = model.hyperparams();
  const auto features = train.feature_columns();
  std::string table = detail::csv_line({"parameter", "symbol", "name", "value"});
  table += detail::csv_line({"signal_std", "", "", detail::num(h.signal_std)});
  table += detail::csv_line({"noise_std", "", "", detail::num(h.noise_std)});
  json length_scales = json::array();
  for (std::size_t j = 0; j < features.size(); ++j) {
    const double l = h.length_scales(static_cast<Eigen::Index>(j));
    table += detail::csv_line({"length_scale", features[j].symbol, features[j].name, detail::num(l)});
    length_scales.push_back({{"symbol", features[j].symbol}, {"name", features[j].name}, {"value", l}});
  }
  const auto &log = model.fit_log();
  const json report = {{"status", "ok"},
                       {"kernel", to_string(model.mode())},
                       {"units", "standardized inputs and target"},
                       {"signal_std", h.signal_std},
                       {"noise_std", h.noise_std},
                       {"length_scales", length_scales},
                       {"jitter", model.jitter()},
                       {"initial_lml", io::num(log.initial_lml)},
                       {"final_lml", io::num(log.final_lml)},
                       {"best_restart", log.best_restart},
                       {"restarts", detail::restart_summaries(log)}};
  write_json(out / "fit_report.json", report);
  write_atomic(out / "hyperparameters.csv", table);
  write_atomic(out / "fit_trace.csv", detail::trace_csv(log));

  StageResult r;
  r.artifacts = {"model.json", "fit_report.json", "hyperparameters.csv", "fit_trace.csv"};
  r.summary = {{"initial_lml", io::num(log.initial_lml)},
               {"final_lml", io::num(log.final_lml)},
               {"best_restart", log.best_restart}};
  return r;
}

/// Raw-unit evaluation of a model on a standardized split.
struct Evaluation {
  std::vector<Prediction> predictions;
  Eigen::VectorXd actual;
  Score score;
  double coverage = 0.0;
};

inline Evaluation evaluate(const TrainedGP &model, const Dataset &test,
                           const ScalingParams &scaling) {
  if (model.dims() != test.dims()) {
    throw Error("model expects " + std::to_string(model.dims()) +
                " features but the test split has " + std::to_string(test.dims()));
  }
  Evaluation e;
  e.predictions = model.predict(test.features);
  e.actual = detail::raw_target(test, scaling);
  e.score = score(means_of(e.predictions), e.actual);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < e.predictions.size(); ++i) {
    const auto a = e.actual(static_cast<Eigen::Index>(i));
    inside += a >= e.predictions[i].lower95 && a <= e.predictions[i].upper95;
  }
  e.coverage = e.predictions.empty() ? 0.0 : double(inside) / double(e.predictions.size());
  return e;
}

/// Predictions with 95% intervals on the test split, in raw target units.
inline StageResult cmd_predict(const RunConfig &c) {
  const auto saved = load_model(detail::require(c, "model.json", "fit").string());
  if (!saved.scaling) {
    throw Error("model file carries no scaling parameters");
  }
  const Schema schema = detail::preprocessed_schema(c);
  const Dataset test = load_dataset(detail::require(c, "test.csv", "preprocess").string(), schema);
  const auto rows = detail::test_rows(c);
  const auto e = evaluate(saved.model, test, *saved.scaling);

  const csv::Row header = {"index", "row", "actual", "predicted", "lower95", "upper95"};
  std::string all = detail::csv_line(header);
  std::string first = all;
  double width = 0.0;
  for (std::size_t i = 0; i < e.predictions.size(); ++i) {
    const auto &p = e.predictions[i];
    const auto line = detail::csv_line(
        {std::to_string(i), std::to_string(rows.at(i)),
         detail::num(e.actual(static_cast<Eigen::Index>(i))), detail::num(p.mean),
         detail::num(p.lower95), detail::num(p.upper95)});
    all += line;
    if (i < 150) {
      first += line;
    }
    width += p.upper95 - p.lower95;
  }
  const auto n = e.predictions.size();
  const json metrics = {{"n_test", n},
                        {"units", test.target_column().unit},
                        {"rmse", e.score.rmse},
                        {"r2", e.score.r2},
                        {"coverage95", e.coverage},
                        {"mean_interval_width", n ? width / double(n) : 0.0}};
  const fs::path out = c.output_dir;
  write_atomic(out / "predictions.csv", all);
  write_atomic(out / "predictions_first150.csv", first);
  write_json(out / "metrics.json", metrics);

  StageResult r;
  r.artifacts = {"predictions.csv", "predictions_first150.csv", "metrics.json"};
  r.summary = {{"rmse", e.score.rmse}, {"r2", e.score.r2}, {"coverage95", e.coverage}};
  return r;
}

namespace detail {

inline json explanation_to_json(const LocalExplanation &e, std::size_t row) {
  return {{"instance", e.instance},
          {"row", row},
          {"intercept", e.intercept},
          {"coefficients", io::vec(e.coefficients)},
          {"r2", e.r2},
          {"kernel_width", e.kernel_width},
          {"samples", e.samples},
          {"sweeps", e.sweeps}};
}

inline LocalExplanation explanation_from_json(const json &j) {
  LocalExplanation e;
  e.instance = j.at("instance").get<std::size_t>();
  e.intercept = j.at("intercept").get<double>();
  e.coefficients = io::to_vec(j.at("coefficients"));
  e.r2 = j.at("r2").get<double>();
  e.kernel_width = j.at("kernel_width").get<double>();
  e.samples = j.at("samples").get<int>();
  e.sweeps = j.at("sweeps").get<int>();
  return e;
}

inline std::vector<LocalExplanation> load_explanations(const RunConfig &c) {
  const auto path = require(c, "local_explanations.jsonl", "explain");
  std::istringstream in(read_file(path));
  std::vector<LocalExplanation> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      out.push_back(explanation_from_json(json::parse(line)));
    }
  }
  if (out.empty()) {
    throw Error(path.string() + " holds no explanations");
  }
  return out;
}

} // namespace detail

/// LIME explanations of the raw-unit posterior mean for every test sample,
/// plus the aggregated global importance report.
inline StageResult cmd_explain(const RunConfig &c) {
  const auto saved = load_model(detail::require(c, "model.json", "fit").string());
  const Schema schema = detail::preprocessed_schema(c);
  const Dataset test = load_dataset(detail::require(c, "test.csv", "preprocess").string(), schema);
  if (saved.model.dims() != test.dims()) {
    throw Error("model expects " + std::to_string(saved.model.dims()) +
                " features but the test split has " + std::to_string(test.dims()));
  }
  const auto rows = detail::test_rows(c);
  const LimeConfig lime = detail::lime_config(c);
  const auto explanations = explain_all(saved.model, test.features, lime, c.lime.threads);
  const auto report = global_scores(explanations, c.selection.rank_by);

  std::string jsonl;
  for (const auto &e : explanations) {
    jsonl += detail::explanation_to_json(e, rows.at(e.instance)).dump() + "\n";
  }

  const auto features = test.feature_columns();
  std::vector<std::size_t> rank(features.size());
  for (std::size_t k = 0; k < report.ranking.size(); ++k) {
    rank[report.ranking[k]] = k + 1;
  }
  std::string table = detail::csv_line(
      {"symbol", "name", "mean_abs", "actual_mean", "support_freq", "weighted_mean", "rank"});
  json rows_json = json::array();
  for (auto j : report.ranking) {
    const auto i = static_cast<Eigen::Index>(j);
    table += detail::csv_line({features[j].symbol, features[j].name,
                               detail::num(report.mean_abs(i)), detail::num(report.actual_mean(i)),
                               detail::num(report.support_freq(i)),
                               detail::num(report.weighted_mean(i)), std::to_string(rank[j])});
    rows_json.push_back({{"symbol", features[j].symbol},
                         {"name", features[j].name},
                         {"mean_abs", report.mean_abs(i)},
                         {"actual_mean", report.actual_mean(i)},
                         {"support_freq", report.support_freq(i)},
                         {"weighted_mean", report.weighted_mean(i)},
                         {"rank", rank[j]}});
  }
  const json global = {{"K", report.explanations},
                       {"ranked_by", to_string(report.ranked_by)},
                       {"weighted_fallback", report.weighted_fallback},
                       {"units", "target units per standardized feature unit"},
                       {"features", rows_json},
                       {"lime",
                        {{"samples", lime.samples},
                         {"kernel_width", lime.width_for(test.dims())},
                         {"distribution", to_string(lime.distribution)},
                         {"scale", lime.scale},
                         {"lambda", lime.lambda},
                         {"seed", lime.seed},
                         {"distance", "euclidean on standardized features"},
                         {"explained", "posterior mean in raw target units"}}}};

  const fs::path out = c.output_dir;
  write_atomic(out / "local_explanations.jsonl", jsonl);
  write_atomic(out / "global_importance.csv", table);
  write_json(out / "global_importance.json", global);

  StageResult r;
  r.artifacts = {"local_explanations.jsonl", "global_importance.csv", "global_importance.json"};
  r.summary = {{"K", report.explanations}, {"weighted_fallback", report.weighted_fallback}};
  return r;
}

/// Applies the configured selection strategy, retrains on the selected
/// features, and compares against the full model in raw target units.
inline StageResult cmd_select(const RunConfig &c) {
  detail::require(c, "global_importance.json", "explain");
  const auto explanations = detail::load_explanations(c);
  const auto report = global_scores(explanations, c.selection.rank_by);
  const auto saved = load_model(detail::require(c, "model.json", "fit").string());
  if (!saved.scaling) {
    throw Error("model file carries no scaling parameters");
  }
  const auto &scaling = *saved.scaling;
  const Schema schema = detail::preprocessed_schema(c);
  const Dataset train = load_dataset(detail::require(c, "train.csv", "preprocess").string(), schema);
  const Dataset test = load_dataset(detail::require(c, "test.csv", "preprocess").string(), schema);
  const auto features = train.feature_columns();
  if (report.mean_abs.size() != train.dims()) {
    throw Error("explanations cover " + std::to_string(report.mean_abs.size()) +
                " features but the training split has " + std::to_string(train.dims()));
  }
  const auto params = detail::selection_params(c);
  params.validate();
  const auto opts = detail::fit_options(c);

  auto retrain = [&](const std::vector<std::size_t> &cols) {
    auto m = fit(select_features(train, cols).features, train.target, opts)
                 .with_target_transform({scaling.target_mean, scaling.target_std});
    auto e = evaluate(m, select_features(test, cols), scaling);
    return std::make_pair(std::move(m), e.score);
  };
  auto symbols = [&](const std::vector<std::size_t> &cols) {
    std::string s;
    for (auto j : cols) {
      s += (s.empty() ? "" : " ") + features[j].symbol;
    }
    return s;
  };

  const Score full = evaluate(saved.model, test, scaling).score;
  std::vector<std::size_t> all_cols(features.size());
  std::iota(all_cols.begin(), all_cols.end(), std::size_t{0});

  std::string steps = detail::csv_line(
      {"step", "feature_count", "added", "features", "rmse", "r2", "relative_improvement"});
  steps += detail::csv_line({"0", std::to_string(features.size()), "", "full model",
                             detail::num(full.rmse), detail::num(full.r2), ""});

  std::vector<std::size_t> selected;
  std::optional<TrainedGP> chosen;
  Score chosen_score;
  json strategy_detail = json::object();

  switch (c.selection.strategy) {
  case SelectionStrategy::elbow:
    selected = select_elbow(report, params.elbow_threshold);
    break;
  case SelectionStrategy::bootstrap: {
    const auto b = select_bootstrap(explanations, params);
    selected = b.selected;
    json freq = json::object();
    for (std::size_t j = 0; j < features.size(); ++j) {
      freq[features[j].symbol] = b.frequency(static_cast<Eigen::Index>(j));
    }
    strategy_detail = {{"elbow_size", b.elbow_size}, {"frequency", freq}};
    break;
  }
  case SelectionStrategy::forward: {
    const auto order = forward_candidates(report);
    std::string stop = "all candidates added";
    std::vector<std::size_t> cols;
    for (std::size_t k = 0; k < order.size(); ++k) {
      cols.push_back(order[k]);
      auto [m, s] = retrain(cols);
      std::string gain;
      bool accept = true;
      if (chosen) {
        const double g = (chosen_score.rmse - s.rmse) / chosen_score.rmse;
        gain = detail::num(g);
        accept = g >= params.improvement_floor;
      }
      steps += detail::csv_line({std::to_string(k + 1), std::to_string(cols.size()),
                                 features[order[k]].symbol, symbols(cols),
                                 detail::num(s.rmse), detail::num(s.r2), gain});
      if (!accept) {
        stop = "adding " + features[order[k]].symbol + " improved test RMSE by less than " +
               detail::num(params.improvement_floor);
        break;
      }
      selected = cols;
      chosen.emplace(std::move(m));
      chosen_score = s;
    }
    strategy_detail = {{"stop_reason", stop}, {"candidates", symbols(order)}};
    break;
  }
  }
  if (selected.empty()) {
    throw Error("selection yields an empty feature set; at least one feature is required");
  }
  if (!chosen) {
    auto [m, s] = retrain(selected);
    chosen.emplace(std::move(m));
    chosen_score = s;
    steps += detail::csv_line({"1", std::to_string(selected.size()), "", symbols(selected),
                               detail::num(s.rmse), detail::num(s.r2),
                               detail::num((full.rmse - s.rmse) / full.rmse)});
  }

  json chosen_json = json::array();
  for (auto j : selected) {
    chosen_json.push_back({{"index", j}, {"symbol", features[j].symbol}, {"name", features[j].name}});
  }
  const auto units = train.target_column().unit;
  const json selection = {
      {"strategy", to_string(c.selection.strategy)},
      {"ranked_by", to_string(report.ranked_by)},
      {"params",
       {{"elbow_threshold", params.elbow_threshold},
        {"bootstrap_runs", params.bootstrap_runs},
        {"bootstrap_inclusion", params.bootstrap_inclusion},
        {"improvement_floor", params.improvement_floor},
        {"seed", params.seed}}},
      {"selected", chosen_json},
      {"selected_count", selected.size()},
      {"units", units},
      {"full_model", {{"feature_count", features.size()}, {"rmse", full.rmse}, {"r2", full.r2}}},
      {"selected_model",
       {{"feature_count", selected.size()}, {"rmse", chosen_score.rmse}, {"r2", chosen_score.r2}}},
      {"detail", strategy_detail}};

  Schema selected_schema;
  for (auto j : selected) {
    selected_schema.push_back(features[j]);
  }
  selected_schema.push_back(train.target_column());

  const fs::path out = c.output_dir;
  write_json(out / "selection.json", selection);
  write_atomic(out / "selection_steps.csv", steps);
  write_json(out / "model_selected.json", model_to_json({*chosen, scaling, selected_schema}));

  StageResult r;
  r.artifacts = {"selection.json", "selection_steps.csv", "model_selected.json"};
  r.summary = {{"selected", symbols(selected)},
               {"full_rmse", full.rmse},
               {"selected_rmse", chosen_score.rmse}};
  return r;
}

// --------------------------------------------------------------- manifest

inline json versions() {
  return {{"gprx", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                        "." + std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"openssl", OpenSSL_version(OPENSSL_VERSION)},
          {"compiler", __VERSION__}};
}

/// Records a finished stage in manifest.json: config echo, timings, the
/// stage summary, and a SHA-256 for every artifact listed so far.
inline json record_stage(const RunConfig &c, const std::string &stage, const StageResult &r,
                         double seconds) {
  const fs::path out = c.output_dir;
  const fs::path path = out / "manifest.json";
  json m = fs::exists(path) ? read_json(path) : json::object();
  m["config"] = config_to_json(c);
  m["versions"] = versions();
  m["stages"][stage] = {{"seconds", seconds}, {"summary", r.summary}, {"artifacts", r.artifacts}};
  json artifacts = json::array();
  for (const auto &name : stage_names()) {
    if (!m["stages"].contains(name)) {
      continue;
    }
    for (const auto &file : m["stages"][name]["artifacts"]) {
      const auto data = read_file(out / file.get<std::string>());
      artifacts.push_back({{"path", file},
                           {"stage", name},
                           {"bytes", data.size()},
                           {"sha256", sha256_hex(data)}});
    }
  }
  m["artifacts"] = artifacts;
  write_json(path, m);
  return m;
}

/// Runs one stage by name, timing it and updating the manifest. Failures
/// surface as StageError naming the stage.
inline json run_stage(const RunConfig &c, const std::string &stage) {
  static const std::map<std::string, std::function<StageResult(const RunConfig &)>> stages = {
      {"preprocess", cmd_preprocess}, {"fit", cmd_fit},       {"predict", cmd_predict},
      {"explain", cmd_explain},       {"select", cmd_select}};
  const auto it = stages.find(stage);
  if (it == stages.end()) {
    throw Error("unknown stage '" + stage + "'");
  }
  const auto start = std::chrono::steady_clock::now();
  StageResult r;
  try {
    r = it->second(c);
  } catch (const std::exception &e) {
    throw StageError(stage, e.what());
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record_stage(c, stage, r, seconds);
}

/// preprocess -> fit -> predict -> explain -> select with a fresh manifest.
/// Stops at the first failure; artifacts of completed stages stay in place.
inline json cmd_run_all(const RunConfig &c) {
  fs::create_directories(c.output_dir);
  fs::remove(fs::path(c.output_dir) / "manifest.json");
  json m;
  for (const auto &stage : stage_names()) {
    m = run_stage(c, stage);
  }
  return m;
}

} // namespace gprx

#endif // GPRX_PIPELINE_HPP
