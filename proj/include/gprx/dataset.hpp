#ifndef GPRX_DATASET_HPP
#define GPRX_DATASET_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gprx/csv.hpp"
#include "gprx/error.hpp"

namespace gprx {

enum class ColumnRole { feature, target };

struct ColumnSchema {
  std::string name;
  std::string symbol;
  std::string unit;
  ColumnRole role = ColumnRole::feature;
};

using Schema = std::vector<ColumnSchema>;

/// Throws SchemaError unless exactly one column is the target and symbols
/// and names are unique.
inline void validate_schema(const Schema &schema) {
  if (schema.empty()) {
    throw SchemaError("schema has no columns");
  }
  std::set<std::string> symbols;
  std::set<std::string> names;
  int targets = 0;
  for (const auto &col : schema) {
    if (!symbols.insert(col.symbol).second) {
      throw SchemaError("duplicate schema symbol: " + col.symbol);
    }
    if (!names.insert(col.name).second) {
      throw SchemaError("duplicate schema column name: " + col.name);
    }
    targets += col.role == ColumnRole::target;
  }
  if (targets != 1) {
    throw SchemaError("schema must contain exactly one target column, found " +
                      std::to_string(targets));
  }
  if (schema.size() < 2) {
    throw SchemaError("schema must contain at least one feature column");
  }
}

/// The 18 drilling inputs and the mud-loss severity target of the Marun
/// field dataset.
inline Schema marun_schema() {
  auto f = [](std::string name, std::string symbol, std::string unit) {
    return ColumnSchema{std::move(name), std::move(symbol), std::move(unit),
                        ColumnRole::feature};
  };
  return {
      f("Northing", "X1", "m"),
      f("Easting", "X2", "m"),
      f("Depth", "X3", "m"),
      f("Meterage", "X4", "m"),
      f("Drilling time", "X5", "hr"),
      f("Formation type", "X6", "-"),
      f("Hole size", "X7", "in"),
      f("Weight on bit", "X8", "1000 lb"),
      f("Flow rate", "X9", "gpm"),
      f("Mud weight", "X10", "pcf"),
      f("Marsh funnel viscosity", "X11", "-"),
      f("Retort solid", "X12", "%"),
      f("Pore pressure", "X13", "psi"),
      f("Fracture pressure", "X14", "psi"),
      f("FAN600/FAN300", "X15", "-"),
      f("Gel10min/Gel10s", "X16", "-"),
      f("Pump pressure", "X17", "psi"),
      f("Bit rotational speed", "X18", "rpm"),
      {"Mud-loss severity", "Y", "bbl/hr", ColumnRole::target},
  };
}

/// Tabular samples. `features` holds the feature-role columns in schema
/// order; `schema` keeps every column including the target.
struct Dataset {
  Eigen::MatrixXd features;
  Eigen::VectorXd target;
  Schema schema;

  Eigen::Index rows() const { return features.rows(); }
  Eigen::Index dims() const { return features.cols(); }

  std::vector<ColumnSchema> feature_columns() const {
    std::vector<ColumnSchema> out;
    for (const auto &c : schema) {
      if (c.role == ColumnRole::feature) {
        out.push_back(c);
      }
    }
    return out;
  }

  const ColumnSchema &target_column() const {
    for (const auto &c : schema) {
      if (c.role == ColumnRole::target) {
        return c;
      }
    }
    throw SchemaError("dataset schema has no target column");
  }
};

inline Dataset load_dataset(std::istream &in, const Schema &schema,
                            const std::string &source = "<stream>") {
  validate_schema(schema);
  const auto table = csv::read(in);
  if (table.empty()) {
    throw ParseError(source + ": empty file");
  }
  const auto &header = table.front();
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!position.emplace(header[i], i).second) {
      throw SchemaError(source + ": duplicate column '" + header[i] + "'");
    }
  }
  std::vector<std::size_t> source_column;
  for (const auto &col : schema) {
    auto it = position.find(col.name);
    if (it == position.end()) {
      throw SchemaError(source + ": missing column '" + col.name + "'");
    }
    source_column.push_back(it->second);
  }
  if (header.size() != schema.size()) {
    std::set<std::string> expected;
    for (const auto &col : schema) {
      expected.insert(col.name);
    }
    for (const auto &name : header) {
      if (!expected.count(name)) {
        throw SchemaError(source + ": unexpected column '" + name + "'");
      }
    }
  }
  const auto n = static_cast<Eigen::Index>(table.size() - 1);
  if (n == 0) {
    throw ParseError(source + ": file has a header but no data rows");
  }
  const auto d = static_cast<Eigen::Index>(schema.size() - 1);

  Dataset ds;
  ds.schema = schema;
  ds.features.resize(n, d);
  ds.target.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto &row = table[static_cast<std::size_t>(r) + 1];
    const std::string where = source + ": row " + std::to_string(r + 1) +
                              " (line " + std::to_string(r + 2) + ")";
    if (row.size() != header.size()) {
      throw ParseError(where + " has " + std::to_string(row.size()) +
                       " fields, expected " + std::to_string(header.size()));
    }
    Eigen::Index feature = 0;
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const std::string &cell = row[source_column[c]];
      double value = 0.0;
      if (!csv::parse_double(cell, value)) {
        throw ParseError(where + ", column '" + schema[c].name +
                         "': cannot parse '" + cell + "' as a number");
      }
      if (!std::isfinite(value)) {
        throw ParseError(where + ", column '" + schema[c].name +
                         "': non-finite value '" + cell + "'");
      }
      if (schema[c].role == ColumnRole::target) {
        ds.target(r) = value;
      } else {
        ds.features(r, feature++) = value;
      }
    }
  }
  return ds;
}

inline Dataset load_dataset(const std::string &path, const Schema &schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open input file: " + path);
  }
  return load_dataset(in, schema, path);
}

/// Writes the dataset with a header row in schema order.
inline void write_dataset(std::ostream &out, const Dataset &ds) {
  csv::Row header;
  for (const auto &c : ds.schema) {
    header.push_back(c.name);
  }
  csv::write_row(out, header);
  for (Eigen::Index r = 0; r < ds.rows(); ++r) {
    csv::Row row;
    Eigen::Index feature = 0;
    for (const auto &c : ds.schema) {
      row.push_back(csv::format_double(c.role == ColumnRole::target
                                           ? ds.target(r)
                                           : ds.features(r, feature++)));
    }
    csv::write_row(out, row);
  }
}

inline Dataset select_rows(const Dataset &ds,
                           const std::vector<std::size_t> &indices) {
  Dataset out;
  out.schema = ds.schema;
  out.features.resize(static_cast<Eigen::Index>(indices.size()), ds.dims());
  out.target.resize(static_cast<Eigen::Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = static_cast<Eigen::Index>(indices[i]);
    out.features.row(static_cast<Eigen::Index>(i)) = ds.features.row(src);
    out.target(static_cast<Eigen::Index>(i)) = ds.target(src);
  }
  return out;
}

/// Keeps only the listed feature columns (indices into the feature matrix),
/// in the order given.
inline Dataset select_features(const Dataset &ds,
                               const std::vector<std::size_t> &columns) {
  const auto all = ds.feature_columns();
  Dataset out;
  out.features.resize(ds.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (columns[j] >= all.size()) {
      throw Error("feature index out of range: " + std::to_string(columns[j]));
    }
    out.features.col(static_cast<Eigen::Index>(j)) =
        ds.features.col(static_cast<Eigen::Index>(columns[j]));
    out.schema.push_back(all[columns[j]]);
  }
  out.schema.push_back(ds.target_column());
  out.target = ds.target;
  return out;
}

struct DedupResult {
  Dataset data;
  std::vector<std::size_t> kept; ///< original row index of every kept row
  std::size_t removed = 0;
};

/// Collapses rows that are bitwise identical in every feature and the
/// target to their first occurrence. Relative order is preserved.
inline DedupResult deduplicate(const Dataset &ds) {
  std::set<std::vector<std::uint64_t>> seen;
  DedupResult result;
  std::vector<std::uint64_t> key(static_cast<std::size_t>(ds.dims()) + 1);
  for (Eigen::Index r = 0; r < ds.rows(); ++r) {
    for (Eigen::Index c = 0; c < ds.dims(); ++c) {
      const double v = ds.features(r, c);
      std::memcpy(&key[static_cast<std::size_t>(c)], &v, sizeof v);
    }
    const double t = ds.target(r);
    std::memcpy(&key.back(), &t, sizeof t);
    if (seen.insert(key).second) {
      result.kept.push_back(static_cast<std::size_t>(r));
    }
  }
  result.removed = static_cast<std::size_t>(ds.rows()) - result.kept.size();
  result.data = select_rows(ds, result.kept);
  return result;
}

struct ScalingParams {
  Eigen::VectorXd feature_mean;
  Eigen::VectorXd feature_std;
  double target_mean = 0.0;
  double target_std = 1.0;
};

namespace detail {

inline std::pair<double, double> mean_and_sample_std(const Eigen::VectorXd &v) {
  const double mean = v.mean();
  const double n = static_cast<double>(v.size());
  const double var =
      n > 1 ? (v.array() - mean).square().sum() / (n - 1.0) : 0.0;
  return {mean, std::sqrt(var)};
}

} // namespace detail

/// Per-column mean and sample (n-1) standard deviation.
inline ScalingParams fit_scaling(const Dataset &ds) {
  const auto columns = ds.feature_columns();
  ScalingParams p;
  p.feature_mean.resize(ds.dims());
  p.feature_std.resize(ds.dims());
  for (Eigen::Index c = 0; c < ds.dims(); ++c) {
    const auto [mean, sd] = detail::mean_and_sample_std(ds.features.col(c));
    if (!(sd > 0.0) || !std::isfinite(sd)) {
      throw ConstantColumnError(columns[static_cast<std::size_t>(c)].name);
    }
    p.feature_mean(c) = mean;
    p.feature_std(c) = sd;
  }
  const auto [mean, sd] = detail::mean_and_sample_std(ds.target);
  if (!(sd > 0.0) || !std::isfinite(sd)) {
    throw ConstantColumnError(ds.target_column().name);
  }
  p.target_mean = mean;
  p.target_std = sd;
  return p;
}

inline Dataset apply_scaling(const Dataset &ds, const ScalingParams &p) {
  if (p.feature_mean.size() != ds.dims()) {
    throw Error("scaling parameters do not match dataset width");
  }
  Dataset out = ds;
  out.features = ((ds.features.rowwise() - p.feature_mean.transpose()).array()
                      .rowwise() /
                  p.feature_std.transpose().array())
                     .matrix();
  out.target = (ds.target.array() - p.target_mean) / p.target_std;
  return out;
}

inline Dataset invert_scaling(const Dataset &ds, const ScalingParams &p) {
  if (p.feature_mean.size() != ds.dims()) {
    throw Error("scaling parameters do not match dataset width");
  }
  Dataset out = ds;
  out.features = ((ds.features.array().rowwise() *
                   p.feature_std.transpose().array())
                      .rowwise() +
                  p.feature_mean.transpose().array())
                     .matrix();
  out.target = ds.target.array() * p.target_std + p.target_mean;
  return out;
}

/// z-scores every feature and the target using statistics of `ds` itself.
inline std::pair<Dataset, ScalingParams> standardize(const Dataset &ds) {
  auto params = fit_scaling(ds);
  return {apply_scaling(ds, params), std::move(params)};
}

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 42;
  int bins = 10;
};

struct SplitIndices {
  std::vector<std::size_t> train; ///< ascending
  std::vector<std::size_t> test;  ///< ascending
};

/// Stratified train/test partition. Rows are ranked by target and cut into
/// `bins` equal-count quantile bins; the global train count
/// round(fraction * n) is apportioned across bins by largest remainder so
/// every bin's train count is within one sample of fraction * bin size.
inline SplitIndices split_indices(const Eigen::VectorXd &target,
                                  const SplitSpec &spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw Error("train fraction must lie in (0, 1)");
  }
  if (spec.bins < 1) {
    throw Error("stratification bin count must be at least 1");
  }
  const auto n = static_cast<std::size_t>(target.size());
  const auto bins = static_cast<std::size_t>(spec.bins);
  if (n < bins) {
    throw Error("dataset too small for requested bins: " + std::to_string(n) +
                " rows, " + std::to_string(bins) + " bins");
  }
  const auto n_train =
      static_cast<std::size_t>(std::llround(spec.train_fraction * double(n)));
  if (n_train < 1 || n_train >= n) {
    throw Error("split would leave the train or test set empty (" +
                std::to_string(n) + " rows)");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return target(static_cast<Eigen::Index>(a)) <
           target(static_cast<Eigen::Index>(b));
  });

  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> bin_begin(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) {
    bin_begin[b] = b * n / bins;
  }
  std::vector<std::size_t> quota(bins);
  std::vector<double> remainder(bins);
  std::size_t assigned = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double exact =
        spec.train_fraction * double(bin_begin[b + 1] - bin_begin[b]);
    quota[b] = static_cast<std::size_t>(std::floor(exact));
    remainder[b] = exact - double(quota[b]);
    assigned += quota[b];
  }
  std::vector<std::size_t> bin_order(bins);
  std::iota(bin_order.begin(), bin_order.end(), std::size_t{0});
  std::shuffle(bin_order.begin(), bin_order.end(), rng);
  std::stable_sort(bin_order.begin(), bin_order.end(),
                   [&](auto a, auto b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n_train; k = (k + 1) % bins) {
    const auto b = bin_order[k];
    if (quota[b] < bin_begin[b + 1] - bin_begin[b]) {
      ++quota[b];
      ++assigned;
    }
  }

  SplitIndices out;
  for (std::size_t b = 0; b < bins; ++b) {
    std::vector<std::size_t> members(order.begin() + bin_begin[b],
                                     order.begin() + bin_begin[b + 1]);
    std::shuffle(members.begin(), members.end(), rng);
    out.train.insert(out.train.end(), members.begin(),
                     members.begin() + quota[b]);
    out.test.insert(out.test.end(), members.begin() + quota[b], members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

inline std::pair<Dataset, Dataset> split(const Dataset &ds,
                                         const SplitSpec &spec) {
  const auto idx = split_indices(ds.target, spec);
  return {select_rows(ds, idx.train), select_rows(ds, idx.test)};
}

} // namespace gprx

#endif // GPRX_DATASET_HPP
