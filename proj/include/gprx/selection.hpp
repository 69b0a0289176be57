#ifndef GPRX_SELECTION_HPP
#define GPRX_SELECTION_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gprx/error.hpp"
#include "gprx/lime.hpp"

namespace gprx {

enum class SelectionStrategy { elbow, bootstrap, forward };

inline const char *to_string(SelectionStrategy s) {
  switch (s) {
  case SelectionStrategy::elbow:
    return "elbow";
  case SelectionStrategy::bootstrap:
    return "bootstrap";
  case SelectionStrategy::forward:
    return "forward";
  }
  return "unknown";
}

inline SelectionStrategy selection_strategy_from_string(const std::string &s) {
  for (auto v : {SelectionStrategy::elbow, SelectionStrategy::bootstrap,
                 SelectionStrategy::forward}) {
    if (s == to_string(v)) {
      return v;
    }
  }
  throw Error("unknown selection strategy '" + s +
              "' (expected elbow, bootstrap or forward)");
}

struct SelectionParams {
  double elbow_threshold = 0.90;
  int bootstrap_runs = 100;
  double bootstrap_inclusion = 0.7;
  double improvement_floor = 0.01; ///< relative RMSE gain for forward inclusion
  std::uint64_t seed = 42;

  void validate() const {
    if (!(elbow_threshold > 0.0 && elbow_threshold < 1.0)) {
      throw Error("elbow threshold must lie in (0, 1)");
    }
    if (bootstrap_runs < 10) {
      throw Error("bootstrap needs at least 10 runs");
    }
    if (!(bootstrap_inclusion > 0.0 && bootstrap_inclusion <= 1.0)) {
      throw Error("bootstrap inclusion threshold must lie in (0, 1]");
    }
    if (!(improvement_floor >= 0.0)) {
      throw Error("improvement floor must be non-negative");
    }
  }
};

/// Smallest prefix of the features ranked by weighted score whose share of
/// the total weighted score reaches `threshold`. Returned in rank order.
inline std::vector<std::size_t> select_elbow(const Eigen::VectorXd &weighted,
                                             double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error("elbow threshold must lie in (0, 1)");
  }
  if (weighted.size() == 0) {
    throw Error("cannot select from an empty report");
  }
  const auto order = rank_descending(weighted);
  if (weighted.size() == 1) {
    return order;
  }
  const double total = weighted.sum();
  if (!(total > 0.0)) {
    throw Error("all weighted importance scores are zero; nothing to select");
  }
  std::vector<std::size_t> chosen;
  double cumulative = 0.0;
  for (auto j : order) {
    chosen.push_back(j);
    cumulative += weighted(static_cast<Eigen::Index>(j));
    // Relative slack absorbs summation round-off for uniform scores.
    if (cumulative / total >= threshold - 1e-12) {
      break;
    }
  }
  return chosen;
}

inline std::vector<std::size_t> select_elbow(const GlobalImportanceReport &r,
                                             double threshold) {
  return select_elbow(r.weighted_mean, threshold);
}

struct BootstrapSelection {
  std::vector<std::size_t> selected; ///< in full-sample weighted rank order
  Eigen::VectorXd frequency;         ///< share of runs selecting each feature
  std::size_t elbow_size = 0;
};

/// Resamples the explanations with replacement, keeps the top elbow-size
/// features of each resample by weighted score, and retains features chosen
/// in at least `bootstrap_inclusion` of the runs.
inline BootstrapSelection
select_bootstrap(const std::vector<LocalExplanation> &explanations,
                 const SelectionParams &p) {
  p.validate();
  const auto full = global_scores(explanations);
  BootstrapSelection out;
  out.elbow_size = select_elbow(full, p.elbow_threshold).size();
  const auto d = full.mean_abs.size();
  out.frequency = Eigen::VectorXd::Zero(d);
  std::mt19937_64 rng(p.seed);
  std::uniform_int_distribution<std::size_t> pick(0, explanations.size() - 1);
  std::vector<LocalExplanation> sample(explanations.size());
  for (int b = 0; b < p.bootstrap_runs; ++b) {
    for (auto &s : sample) {
      s = explanations[pick(rng)];
    }
    const auto ranked = rank_descending(global_scores(sample).weighted_mean);
    for (std::size_t k = 0; k < out.elbow_size; ++k) {
      out.frequency(static_cast<Eigen::Index>(ranked[k])) += 1.0;
    }
  }
  out.frequency /= static_cast<double>(p.bootstrap_runs);
  for (auto j : rank_descending(full.weighted_mean)) {
    if (out.frequency(static_cast<Eigen::Index>(j)) >=
        p.bootstrap_inclusion - 1e-12) {
      out.selected.push_back(j);
    }
  }
  return out;
}

/// Candidate order for forward inclusion: the report's ranking.
inline std::vector<std::size_t>
forward_candidates(const GlobalImportanceReport &r) {
  if (r.ranking.empty()) {
    throw Error("cannot select from an empty report");
  }
  return r.ranking;
}

} // namespace gprx

#endif // GPRX_SELECTION_HPP
