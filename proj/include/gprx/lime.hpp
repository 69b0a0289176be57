#ifndef GPRX_LIME_HPP
#define GPRX_LIME_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "gprx/error.hpp"
#include "gprx/gp.hpp"

namespace gprx {

enum class PerturbationKind { gaussian, uniform };

inline const char *to_string(PerturbationKind k) {
  return k == PerturbationKind::gaussian ? "gaussian" : "uniform";
}

inline PerturbationKind perturbation_from_string(const std::string &s) {
  if (s == "gaussian") {
    return PerturbationKind::gaussian;
  }
  if (s == "uniform") {
    return PerturbationKind::uniform;
  }
  throw Error("unknown perturbation distribution '" + s +
              "' (expected gaussian or uniform)");
}

struct LimeConfig {
  int samples = 1000;
  std::optional<double> kernel_width; ///< defaults to 0.75 * sqrt(d)
  PerturbationKind distribution = PerturbationKind::gaussian;
  double scale = 1.0; ///< noise std per standardized feature
  double lambda = 0.01;
  std::uint64_t seed = 42;

  double width_for(Eigen::Index dims) const {
    return kernel_width.value_or(0.75 * std::sqrt(static_cast<double>(dims)));
  }

  void validate(Eigen::Index dims) const {
    if (dims < 1) {
      throw Error("LIME needs at least one feature");
    }
    if (samples < dims + 2) {
      throw Error("LIME sample count must be at least d + 2 = " +
                  std::to_string(dims + 2));
    }
    if (!(width_for(dims) > 0.0)) {
      throw Error("LIME kernel width must be positive");
    }
    if (!(lambda >= 0.0)) {
      throw Error("LIME L1 penalty must be non-negative");
    }
    if (!(scale >= 0.0)) {
      throw Error("LIME perturbation scale must be non-negative");
    }
  }
};

struct LocalExplanation {
  std::size_t instance = 0;
  double intercept = 0.0;
  Eigen::VectorXd coefficients;
  double r2 = 0.0;
  double kernel_width = 0.0;
  int samples = 0;
  int sweeps = 0;
};

/// N x d samples around `x`; row 0 is `x` itself. Gaussian noise has std
/// `scale`; uniform noise spans +-scale*sqrt(3) so the variance matches.
inline Eigen::MatrixXd perturb_samples(const Eigen::VectorXd &x,
                                       const LimeConfig &cfg) {
  if (x.size() < 1) {
    throw Error("cannot perturb an empty instance");
  }
  if (cfg.samples < 1) {
    throw Error("LIME sample count must be positive");
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  const double half_width = cfg.scale * std::sqrt(3.0);
  Eigen::MatrixXd Z(cfg.samples, x.size());
  Z.row(0) = x.transpose();
  for (Eigen::Index i = 1; i < Z.rows(); ++i) {
    for (Eigen::Index j = 0; j < Z.cols(); ++j) {
      const double noise = cfg.distribution == PerturbationKind::gaussian
                               ? cfg.scale * normal(rng)
                               : half_width * uniform(rng);
      Z(i, j) = x(j) + noise;
    }
  }
  return Z;
}

/// exp(-D^2 / width^2) with D the Euclidean distance to `x`.
inline Eigen::VectorXd proximity_weights(const Eigen::VectorXd &x,
                                         const Eigen::MatrixXd &Z,
                                         double width) {
  if (!(width > 0.0)) {
    throw Error("kernel width must be positive");
  }
  if (Z.cols() != x.size()) {
    throw Error("perturbation matrix width does not match the instance");
  }
  const Eigen::VectorXd d2 = (Z.rowwise() - x.transpose()).rowwise().squaredNorm();
  return (-d2.array() / (width * width)).exp().matrix();
}

inline constexpr double kSurrogateTolerance = 1e-8;
inline constexpr int kSurrogateMaxSweeps = 10000;

/// Weighted lasso surrogate. Features are centered and scaled by their
/// weighted mean and weighted std, then
///   1/2 sum_i w_i (y~_i - z~_i' b)^2 + lambda * ||b||_1
/// is minimized by cyclic coordinate descent with soft-thresholding. The
/// returned coefficients are mapped back to the original feature scale with
/// an unpenalized intercept.
inline LocalExplanation fit_local_surrogate(const Eigen::MatrixXd &Z,
                                            const Eigen::VectorXd &y,
                                            const Eigen::VectorXd &weights,
                                            double lambda) {
  const auto n = Z.rows();
  const auto d = Z.cols();
  if (y.size() != n || weights.size() != n) {
    throw Error("surrogate inputs have inconsistent lengths");
  }
  if (n < d + 2) {
    throw Error("surrogate needs at least d + 2 samples");
  }
  if (!(lambda >= 0.0)) {
    throw Error("L1 penalty must be non-negative");
  }
  if ((weights.array() < 0.0).any() || !weights.allFinite()) {
    throw Error("surrogate weights must be finite and non-negative");
  }
  const double wsum = weights.sum();
  if (!(wsum > 0.0)) {
    throw Error("surrogate weights are all zero");
  }

  LocalExplanation out;
  out.samples = static_cast<int>(n);
  out.coefficients = Eigen::VectorXd::Zero(d);

  const double y_mean = weights.dot(y) / wsum;
  if ((y.array() == y(0)).all()) {
    out.intercept = y(0);
    out.r2 = 1.0;
    return out;
  }
  const Eigen::RowVectorXd z_mean = (weights.transpose() * Z) / wsum;
  Eigen::MatrixXd Zs = Z.rowwise() - z_mean;
  Eigen::VectorXd z_std(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    z_std(j) = std::sqrt(weights.dot(Zs.col(j).cwiseAbs2()) / wsum);
    if (z_std(j) > 0.0) {
      Zs.col(j) /= z_std(j);
    }
  }
  const Eigen::VectorXd yc = y.array() - y_mean;

  Eigen::VectorXd b = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd residual = yc;
  Eigen::VectorXd wz(n);
  int sweep = 0;
  for (;;) {
    if (sweep == kSurrogateMaxSweeps) {
      throw ConvergenceError("LIME surrogate coordinate descent did not "
                             "converge after " +
                                 std::to_string(sweep) + " sweeps",
                             sweep);
    }
    ++sweep;
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (!(z_std(j) > 0.0)) {
        continue;
      }
      wz = weights.cwiseProduct(Zs.col(j));
      const double curvature = wz.dot(Zs.col(j));
      const double rho = wz.dot(residual) + curvature * b(j);
      const double shrunk =
          std::copysign(std::max(std::abs(rho) - lambda, 0.0), rho);
      const double next = shrunk / curvature;
      const double change = next - b(j);
      if (change != 0.0) {
        residual -= change * Zs.col(j);
        b(j) = next;
        max_change = std::max(max_change, std::abs(change));
      }
    }
    if (max_change < kSurrogateTolerance) {
      break;
    }
  }
  out.sweeps = sweep;

  for (Eigen::Index j = 0; j < d; ++j) {
    if (z_std(j) > 0.0) {
      out.coefficients(j) = b(j) / z_std(j);
    }
  }
  out.intercept = y_mean - z_mean.dot(out.coefficients);

  const Eigen::VectorXd fitted =
      (Z * out.coefficients).array() + out.intercept;
  const double sse = weights.dot((y - fitted).cwiseAbs2());
  const double sst = weights.dot(yc.cwiseAbs2());
  out.r2 = sst > 0.0 ? 1.0 - sse / sst : 1.0;
  return out;
}

/// Explains `mean_fn` (maps an N x d matrix to N outputs) around `x`.
template <typename MeanFn>
LocalExplanation explain_with(const MeanFn &mean_fn, const Eigen::VectorXd &x,
                              const LimeConfig &cfg, std::size_t instance = 0) {
  cfg.validate(x.size());
  const Eigen::MatrixXd Z = perturb_samples(x, cfg);
  const Eigen::VectorXd y = mean_fn(Z);
  const double width = cfg.width_for(x.size());
  const Eigen::VectorXd w = proximity_weights(x, Z, width);
  auto e = fit_local_surrogate(Z, y, w, cfg.lambda);
  e.instance = instance;
  e.kernel_width = width;
  return e;
}

/// Surrogate of the GP posterior mean around `x`.
inline LocalExplanation explain_instance(const TrainedGP &model,
                                         const Eigen::VectorXd &x,
                                         const LimeConfig &cfg,
                                         std::size_t instance = 0) {
  if (x.size() != model.dims()) {
    throw Error("instance has " + std::to_string(x.size()) +
                " features, model expects " + std::to_string(model.dims()));
  }
  return explain_with(
      [&model](const Eigen::MatrixXd &Z) { return model.predict_mean(Z); }, x,
      cfg, instance);
}

/// Explains every row of `X`. Row k uses seed cfg.seed + k, so the result
/// does not depend on `threads` (0 = hardware concurrency).
inline std::vector<LocalExplanation>
explain_all(const TrainedGP &model, const Eigen::MatrixXd &X,
            const LimeConfig &cfg, unsigned threads = 0) {
  cfg.validate(X.cols());
  const auto K = static_cast<std::size_t>(X.rows());
  std::vector<LocalExplanation> out(K);
  if (threads == 0) {
    threads = std::max(1u, std::thread::hardware_concurrency());
  }
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(K, 1)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= K) {
        return;
      }
      try {
        LimeConfig local = cfg;
        local.seed = cfg.seed + k;
        out[k] = explain_instance(model, X.row(static_cast<Eigen::Index>(k)).transpose(),
                                  local, k);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) {
          failure = std::current_exception();
        }
        next = K;
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back(worker);
    }
    for (auto &th : pool) {
      th.join();
    }
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
  return out;
}

enum class ImportanceScore { mean_abs, weighted_mean, support_freq, actual_mean };

inline const char *to_string(ImportanceScore s) {
  switch (s) {
  case ImportanceScore::mean_abs:
    return "mean_abs";
  case ImportanceScore::weighted_mean:
    return "weighted_mean";
  case ImportanceScore::support_freq:
    return "support_freq";
  case ImportanceScore::actual_mean:
    return "actual_mean";
  }
  return "unknown";
}

inline ImportanceScore importance_score_from_string(const std::string &s) {
  for (auto v : {ImportanceScore::mean_abs, ImportanceScore::weighted_mean,
                 ImportanceScore::support_freq, ImportanceScore::actual_mean}) {
    if (s == to_string(v)) {
      return v;
    }
  }
  throw Error("unknown importance score '" + s + "'");
}

/// Coefficients with magnitude at or below this count as zero.
inline constexpr double kNonzeroThreshold = 1e-12;

struct GlobalImportanceReport {
  Eigen::VectorXd mean_abs;      ///< (1/K) sum |b_j|
  Eigen::VectorXd support_freq;  ///< fraction of |b_j| > 1e-12
  Eigen::VectorXd weighted_mean; ///< sum w_k |b_j| / sum w_k, w_k = max(R2,0)
  Eigen::VectorXd actual_mean;   ///< (1/K) sum b_j
  bool weighted_fallback = false; ///< all w_k were zero; weighted = mean_abs
  ImportanceScore ranked_by = ImportanceScore::mean_abs;
  std::vector<std::size_t> ranking;
  std::size_t explanations = 0;

  const Eigen::VectorXd &scores(ImportanceScore s) const {
    switch (s) {
    case ImportanceScore::weighted_mean:
      return weighted_mean;
    case ImportanceScore::support_freq:
      return support_freq;
    case ImportanceScore::actual_mean:
      return actual_mean;
    case ImportanceScore::mean_abs:
      break;
    }
    return mean_abs;
  }
};

/// Feature indices by descending score; ties go to the lower index.
inline std::vector<std::size_t> rank_descending(const Eigen::VectorXd &scores) {
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return scores(static_cast<Eigen::Index>(a)) >
           scores(static_cast<Eigen::Index>(b));
  });
  return order;
}

inline GlobalImportanceReport
global_scores(const std::vector<LocalExplanation> &explanations,
              ImportanceScore rank_by = ImportanceScore::mean_abs) {
  if (explanations.empty()) {
    throw Error("global scores need at least one local explanation");
  }
  const auto d = explanations.front().coefficients.size();
  GlobalImportanceReport r;
  r.mean_abs = Eigen::VectorXd::Zero(d);
  r.support_freq = Eigen::VectorXd::Zero(d);
  r.weighted_mean = Eigen::VectorXd::Zero(d);
  r.actual_mean = Eigen::VectorXd::Zero(d);
  double wsum = 0.0;
  for (const auto &e : explanations) {
    if (e.coefficients.size() != d) {
      throw Error("local explanations have mismatched feature counts");
    }
    const Eigen::ArrayXd mag = e.coefficients.array().abs();
    const double w = std::max(e.r2, 0.0);
    r.mean_abs.array() += mag;
    r.actual_mean += e.coefficients;
    r.support_freq.array() += (mag > kNonzeroThreshold).cast<double>();
    r.weighted_mean.array() += w * mag;
    wsum += w;
  }
  const double K = static_cast<double>(explanations.size());
  r.mean_abs /= K;
  r.actual_mean /= K;
  r.support_freq /= K;
  if (wsum > 0.0) {
    r.weighted_mean /= wsum;
  } else {
    r.weighted_mean = r.mean_abs;
    r.weighted_fallback = true;
  }
  r.explanations = explanations.size();
  r.ranked_by = rank_by;
  r.ranking = rank_descending(r.scores(rank_by));
  return r;
}

} // namespace gprx

#endif // GPRX_LIME_HPP
