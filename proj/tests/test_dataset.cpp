#include <gtest/gtest.h>

#include <gprx/dataset.hpp>

#include <random>
#include <set>
#include <sstream>

namespace gprx {
namespace {

Schema small_schema() {
  return {{"a", "X1", "", ColumnRole::feature},
          {"b", "X2", "", ColumnRole::feature},
          {"y", "Y", "", ColumnRole::target}};
}

Dataset make(std::initializer_list<std::initializer_list<double>> rows) {
  Dataset ds;
  ds.schema = small_schema();
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), 2);
  ds.target.resize(static_cast<Eigen::Index>(rows.size()));
  Eigen::Index r = 0;
  for (auto row : rows) {
    auto it = row.begin();
    ds.features(r, 0) = *it++;
    ds.features(r, 1) = *it++;
    ds.target(r) = *it;
    ++r;
  }
  return ds;
}

std::string marun_header(const std::string &skip = "") {
  std::string out;
  for (const auto &c : marun_schema()) {
    if (c.name == skip) {
      continue;
    }
    out += (out.empty() ? "" : ",") + csv::quote(c.name);
  }
  return out + "\n";
}

TEST(Csv, ReadsQuotedFieldsAndCrlf) {
  std::istringstream in("name,\"a,b\",\"say \"\"hi\"\"\"\r\n1,2,3\r\n");
  const auto rows = csv::read(in);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0][1], "a,b");
  EXPECT_EQ(rows[0][2], "say \"hi\"");
  EXPECT_EQ(rows[1][2], "3");
}

TEST(Csv, QuoteRoundTrip) {
  std::ostringstream out;
  csv::write_row(out, {"plain", "with,comma", "with \"quote\""});
  std::istringstream in(out.str());
  const auto rows = csv::read(in);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0][1], "with,comma");
  EXPECT_EQ(rows[0][2], "with \"quote\"");
}

TEST(Csv, DoubleFormattingRoundTrips) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> dist(0.0, 1e3);
  for (int i = 0; i < 200; ++i) {
    const double v = dist(rng);
    double back = 0.0;
    ASSERT_TRUE(csv::parse_double(csv::format_double(v), back));
    EXPECT_EQ(back, v);
  }
}

TEST(LoadDataset, ThreeRowsAllColumns) {
  std::string text = marun_header();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 19; ++c) {
      text += (c ? "," : "") + std::to_string(r * 100 + c);
    }
    text += "\n";
  }
  std::istringstream in(text);
  const auto ds = load_dataset(in, marun_schema());
  EXPECT_EQ(ds.rows(), 3);
  EXPECT_EQ(ds.dims(), 18);
  EXPECT_EQ(ds.features(2, 17), 217.0);
  EXPECT_EQ(ds.target(1), 118.0);
}

TEST(LoadDataset, ReordersColumnsToSchemaOrder) {
  std::istringstream in("y,b,a\n3,2,1\n");
  const auto ds = load_dataset(in, small_schema());
  EXPECT_EQ(ds.features(0, 0), 1.0);
  EXPECT_EQ(ds.features(0, 1), 2.0);
  EXPECT_EQ(ds.target(0), 3.0);
}

TEST(LoadDataset, MissingColumnIsNamed) {
  std::string text = marun_header("Depth");
  for (int c = 0; c < 18; ++c) {
    text += (c ? "," : "") + std::to_string(c);
  }
  std::istringstream in(text + "\n");
  try {
    load_dataset(in, marun_schema());
    FAIL() << "expected SchemaError";
  } catch (const SchemaError &e) {
    EXPECT_NE(std::string(e.what()).find("Depth"), std::string::npos);
  }
}

TEST(LoadDataset, NanCellNamesRowAndColumn) {
  std::istringstream in("a,b,y\n1,2,3\n4,NaN,6\n");
  try {
    load_dataset(in, small_schema());
    FAIL() << "expected ParseError";
  } catch (const ParseError &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'b'"), std::string::npos) << msg;
  }
}

TEST(LoadDataset, RejectsInfinityGarbageAndEmpty) {
  std::istringstream inf("a,b,y\n1,inf,3\n");
  EXPECT_THROW(load_dataset(inf, small_schema()), ParseError);
  std::istringstream junk("a,b,y\n1,2x,3\n");
  EXPECT_THROW(load_dataset(junk, small_schema()), ParseError);
  std::istringstream empty("");
  EXPECT_THROW(load_dataset(empty, small_schema()), ParseError);
  std::istringstream extra("a,b,y,z\n1,2,3,4\n");
  EXPECT_THROW(load_dataset(extra, small_schema()), SchemaError);
}

TEST(Schema, ValidationRejectsBadSchemas) {
  EXPECT_NO_THROW(validate_schema(marun_schema()));
  auto two_targets = small_schema();
  two_targets[0].role = ColumnRole::target;
  EXPECT_THROW(validate_schema(two_targets), SchemaError);
  auto dup = small_schema();
  dup[1].symbol = "X1";
  EXPECT_THROW(validate_schema(dup), SchemaError);
}

TEST(Deduplicate, ExactDuplicatesCollapse) {
  const auto r = deduplicate(make({{1, 2, 5}, {1, 2, 5}, {3, 4, 6}}));
  EXPECT_EQ(r.data.rows(), 2);
  EXPECT_EQ(r.removed, 1u);
  EXPECT_EQ(r.kept, (std::vector<std::size_t>{0, 2}));
}

TEST(Deduplicate, DifferentTargetIsKept) {
  const auto r = deduplicate(make({{1, 2, 5}, {1, 2, 7}}));
  EXPECT_EQ(r.data.rows(), 2);
  EXPECT_EQ(r.removed, 0u);
}

TEST(Deduplicate, DistinctDatasetUnchangedAndIdempotent) {
  const auto ds = make({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}, {4, 5, 6}, {1, 2, 3}});
  const auto once = deduplicate(ds);
  EXPECT_EQ(once.kept, (std::vector<std::size_t>{0, 1, 2}));
  const auto twice = deduplicate(once.data);
  EXPECT_EQ(twice.removed, 0u);
  EXPECT_EQ(twice.data.features, once.data.features);
  EXPECT_EQ(twice.data.target, once.data.target);
}

TEST(Standardize, SimpleColumn) {
  const auto [z, p] = standardize(make({{1, 10, 0}, {2, 20, 1}, {3, 60, 5}}));
  EXPECT_DOUBLE_EQ(z.features(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(z.features(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(z.features(2, 0), 1.0);
  EXPECT_DOUBLE_EQ(p.feature_mean(0), 2.0);
  EXPECT_DOUBLE_EQ(p.feature_std(0), 1.0);
}

TEST(Standardize, MatchesIndependentMeanAndStd) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> dist(5.0, 3.0);
  Dataset ds;
  ds.schema = small_schema();
  ds.features.resize(40, 2);
  ds.target.resize(40);
  for (int r = 0; r < 40; ++r) {
    ds.features(r, 0) = dist(rng);
    ds.features(r, 1) = 100.0 * dist(rng);
    ds.target(r) = dist(rng);
  }
  const auto [z, p] = standardize(ds);
  for (int c = 0; c < 2; ++c) {
    // Oracle: plain loops, two passes.
    double sum = 0.0;
    for (int r = 0; r < 40; ++r) {
      sum += ds.features(r, c);
    }
    const double mean = sum / 40.0;
    double ss = 0.0;
    for (int r = 0; r < 40; ++r) {
      ss += (ds.features(r, c) - mean) * (ds.features(r, c) - mean);
    }
    EXPECT_NEAR(p.feature_mean(c), mean, 1e-12 * std::abs(mean));
    EXPECT_NEAR(p.feature_std(c), std::sqrt(ss / 39.0), 1e-12 * std::sqrt(ss));
    EXPECT_LT(std::abs(z.features.col(c).mean()), 1e-12);
    const double sd = std::sqrt(z.features.col(c).squaredNorm() / 39.0);
    EXPECT_LT(std::abs(sd - 1.0), 1e-12);
  }
  const auto back = invert_scaling(z, p);
  EXPECT_LT((back.features - ds.features).cwiseAbs().maxCoeff(), 1e-12 * 1000);
  EXPECT_LT((back.target - ds.target).cwiseAbs().maxCoeff(), 1e-12 * 10);
}

TEST(Standardize, RoundTripProperty) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    Dataset ds;
    ds.schema = small_schema();
    ds.features = Eigen::MatrixXd::NullaryExpr(15, 2, [&] { return u(rng); });
    ds.target = Eigen::VectorXd::NullaryExpr(15, [&] { return u(rng); });
    const auto [z, p] = standardize(ds);
    const auto back = invert_scaling(z, p);
    EXPECT_LT((back.features - ds.features).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((back.target - ds.target).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Standardize, ConstantColumnIsNamed) {
  try {
    standardize(make({{1, 7, 0}, {2, 7, 1}, {3, 7, 2}}));
    FAIL() << "expected ConstantColumnError";
  } catch (const ConstantColumnError &e) {
    EXPECT_EQ(e.column(), "b");
  }
}

Eigen::VectorXd ramp(int n) {
  Eigen::VectorXd t(n);
  for (int i = 0; i < n; ++i) {
    t(i) = std::sin(1.7 * i) * 10.0 + i;
  }
  return t;
}

void expect_partition(const SplitIndices &s, std::size_t n) {
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (auto i : s.test) {
    EXPECT_TRUE(all.insert(i).second) << "index in both sets: " << i;
  }
  EXPECT_EQ(all.size(), n);
  EXPECT_EQ(*all.rbegin(), n - 1);
}

TEST(Split, TenRowsIsDeterministic) {
  SplitSpec spec{0.8, 42, 10};
  const auto a = split_indices(ramp(10), spec);
  const auto b = split_indices(ramp(10), spec);
  EXPECT_EQ(a.train.size(), 8u);
  EXPECT_EQ(a.test.size(), 2u);
  expect_partition(a, 10);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);

  spec.seed = 43;
  const auto c = split_indices(ramp(10), spec);
  EXPECT_EQ(c.train.size(), 8u);
  EXPECT_EQ(c.test.size(), 2u);
  expect_partition(c, 10);
}

TEST(Split, FourEqualBinsEachGiveTwentyPercent) {
  const int n = 100;
  const auto target = ramp(n);
  const auto s = split_indices(target, {0.8, 7, 4});
  expect_partition(s, n);
  EXPECT_EQ(s.test.size(), 20u);
  // Enumerate bins independently: rank by target, 25 rows per bin.
  std::vector<std::pair<double, int>> ranked;
  for (int i = 0; i < n; ++i) {
    ranked.emplace_back(target(i), i);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<int> bin_of(n);
  for (int k = 0; k < n; ++k) {
    bin_of[ranked[k].second] = k / 25;
  }
  std::vector<int> test_per_bin(4, 0);
  for (auto i : s.test) {
    ++test_per_bin[bin_of[i]];
  }
  for (int b = 0; b < 4; ++b) {
    EXPECT_NEAR(test_per_bin[b], 5, 1) << "bin " << b;
  }
}

TEST(Split, PartitionPropertyOverSeedsAndSizes) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const int n = 12 + static_cast<int>(seed) * 7;
    const int bins = 1 + static_cast<int>(seed % 10);
    const auto s = split_indices(ramp(n), {0.7, seed, bins});
    expect_partition(s, static_cast<std::size_t>(n));
    EXPECT_EQ(s.train.size(), static_cast<std::size_t>(std::llround(0.7 * n)));
  }
}

TEST(Split, Errors) {
  EXPECT_THROW(split_indices(ramp(10), {1.0, 1, 2}), Error);
  EXPECT_THROW(split_indices(ramp(10), {0.0, 1, 2}), Error);
  EXPECT_THROW(split_indices(ramp(5), {0.8, 1, 10}), Error);
  EXPECT_THROW(split_indices(ramp(2), {0.9, 1, 1}), Error);
}

} // namespace
} // namespace gprx
