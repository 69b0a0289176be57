#ifndef GPRX_GP_HPP
#define GPRX_GP_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gprx/error.hpp"
#include "gprx/lbfgs.hpp"

namespace gprx {

/// Two-sided 95% standard normal quantile.
inline constexpr double kZ95 = 1.959963984540054;

/// ARD uses one length scale per feature; isotropic ties them together.
enum class KernelMode { ard, isotropic };

inline const char *to_string(KernelMode m) {
  return m == KernelMode::ard ? "ard" : "isotropic";
}

inline KernelMode kernel_mode_from_string(const std::string &s) {
  if (s == "ard") {
    return KernelMode::ard;
  }
  if (s == "isotropic") {
    return KernelMode::isotropic;
  }
  throw Error("unknown kernel mode '" + s + "' (expected ard or isotropic)");
}

struct KernelHyperparams {
  double signal_std = 1.0;
  Eigen::VectorXd length_scales;
  double noise_std = 0.0;

  void validate() const {
    if (!(signal_std > 0.0) || !std::isfinite(signal_std)) {
      throw Error("signal std must be positive and finite");
    }
    if (length_scales.size() == 0 || !(length_scales.array() > 0.0).all()) {
      throw Error("length scales must be positive");
    }
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
      throw Error("noise std must be non-negative and finite");
    }
  }
};

/// Squared-exponential covariance with per-feature length scales:
/// sf^2 * exp(-1/2 * sum_j (x_j - x'_j)^2 / l_j^2).
inline double kernel_eval(const Eigen::Ref<const Eigen::VectorXd> &x,
                          const Eigen::Ref<const Eigen::VectorXd> &xp,
                          const KernelHyperparams &h) {
  if (x.size() != h.length_scales.size() || xp.size() != x.size()) {
    throw Error("kernel input dimension does not match the length scales");
  }
  const double r2 =
      ((x - xp).array() / h.length_scales.array()).square().sum();
  return h.signal_std * h.signal_std * std::exp(-0.5 * r2);
}

inline Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd &X,
                                     const Eigen::MatrixXd &Xp,
                                     const KernelHyperparams &h) {
  const auto d = h.length_scales.size();
  if (X.cols() != d || Xp.cols() != d) {
    throw Error("kernel matrix inputs have " + std::to_string(X.cols()) +
                " and " + std::to_string(Xp.cols()) +
                " columns, expected " + std::to_string(d));
  }
  const Eigen::ArrayXd inv_l = h.length_scales.array().inverse();
  const Eigen::MatrixXd A = X.array().rowwise() * inv_l.transpose();
  const Eigen::MatrixXd B = Xp.array().rowwise() * inv_l.transpose();
  const double sf2 = h.signal_std * h.signal_std;
  Eigen::MatrixXd K(X.rows(), Xp.rows());
  const bool same = &X == &Xp || (X.rows() == Xp.rows() && X == Xp);
  for (Eigen::Index j = 0; j < Xp.rows(); ++j) {
    const Eigen::Index start = same ? j : 0;
    for (Eigen::Index i = start; i < X.rows(); ++i) {
      const double r2 = (A.row(i) - B.row(j)).squaredNorm();
      K(i, j) = sf2 * std::exp(-0.5 * r2);
    }
    if (same) {
      for (Eigen::Index i = 0; i < j; ++i) {
        K(i, j) = K(j, i);
      }
    }
  }
  return K;
}

/// Optimization variable: (log sf, log l_1 .. log l_d, log sn) for ARD,
/// (log sf, log l, log sn) for the isotropic kernel.
struct LogParams {
  Eigen::VectorXd values;
  KernelMode mode = KernelMode::ard;

  static LogParams from(const KernelHyperparams &h,
                        KernelMode mode = KernelMode::ard) {
    LogParams p;
    p.mode = mode;
    const auto d = h.length_scales.size();
    if (mode == KernelMode::ard) {
      p.values.resize(d + 2);
      p.values.segment(1, d) = h.length_scales.array().log().matrix();
    } else {
      p.values.resize(3);
      p.values(1) = std::log(h.length_scales(0));
    }
    p.values(0) = std::log(h.signal_std);
    p.values(p.values.size() - 1) = std::log(h.noise_std);
    return p;
  }

  /// Default start on standardized data: unit signal and length scales,
  /// noise std 0.1.
  static LogParams initial(Eigen::Index dims, KernelMode mode = KernelMode::ard) {
    KernelHyperparams h;
    h.signal_std = 1.0;
    h.length_scales = Eigen::VectorXd::Ones(dims);
    h.noise_std = 0.1;
    return from(h, mode);
  }

  Eigen::Index expected_size(Eigen::Index dims) const {
    return mode == KernelMode::ard ? dims + 2 : 3;
  }

  KernelHyperparams hyperparams(Eigen::Index dims) const {
    if (values.size() != expected_size(dims)) {
      throw Error("log-parameter vector has length " +
                  std::to_string(values.size()) + ", expected " +
                  std::to_string(expected_size(dims)));
    }
    KernelHyperparams h;
    h.signal_std = std::exp(values(0));
    if (mode == KernelMode::ard) {
      h.length_scales = values.segment(1, dims).array().exp().matrix();
    } else {
      h.length_scales = Eigen::VectorXd::Constant(dims, std::exp(values(1)));
    }
    h.noise_std = std::exp(values(values.size() - 1));
    return h;
  }
};

/// Jitter escalation bounds, relative to the mean diagonal.
inline constexpr double kJitterStart = 1e-10;
inline constexpr double kJitterMax = 1e-4;

struct CholeskyFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
};

/// Factorizes `K + jitter * I` with exactly the given jitter.
inline std::optional<Eigen::LLT<Eigen::MatrixXd>>
try_cholesky(const Eigen::MatrixXd &K, double jitter) {
  Eigen::MatrixXd A = K;
  A.diagonal().array() += jitter;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success ||
      !llt.matrixLLT().diagonal().allFinite()) {
    return std::nullopt;
  }
  return llt;
}

/// Cholesky of K with jitter escalated x10 from 1e-10 to 1e-4 of the mean
/// diagonal; throws CholeskyError past the last level.
inline CholeskyFactor jittered_cholesky(const Eigen::MatrixXd &K) {
  const double scale = K.diagonal().mean();
  if (!std::isfinite(scale) || !(scale > 0.0)) {
    throw CholeskyError("covariance matrix has a non-positive diagonal");
  }
  for (double rel = kJitterStart; rel <= kJitterMax * 1.0000001; rel *= 10.0) {
    const double jitter = rel * scale;
    if (auto llt = try_cholesky(K, jitter)) {
      return {std::move(*llt), jitter};
    }
  }
  throw CholeskyError("Cholesky factorization failed with jitter up to " +
                      std::to_string(kJitterMax) + " x mean diagonal");
}

struct LmlResult {
  double value = 0.0;
  Eigen::VectorXd gradient; ///< with respect to the log parameters
  double jitter = 0.0;
};

/// Log marginal likelihood of y under a zero-mean GP with noise, and its
/// analytic gradient with respect to the log parameters:
/// d/dtheta_p = 1/2 tr((alpha alpha' - K^-1) dK/dtheta_p).
inline LmlResult log_marginal_likelihood(const KernelHyperparams &h,
                                         KernelMode mode,
                                         const Eigen::MatrixXd &X,
                                         const Eigen::VectorXd &y) {
  const auto n = X.rows();
  const auto d = X.cols();
  if (n < 1 || y.size() != n) {
    throw Error("log marginal likelihood needs matching non-empty X and y");
  }
  const Eigen::MatrixXd Kf = kernel_matrix(X, X, h);
  Eigen::MatrixXd K = Kf;
  const double sn2 = h.noise_std * h.noise_std;
  K.diagonal().array() += sn2;
  const auto factor = jittered_cholesky(K);
  const Eigen::VectorXd alpha = factor.llt.solve(y);

  LmlResult out;
  out.jitter = factor.jitter;
  const double log_det =
      2.0 * factor.llt.matrixLLT().diagonal().array().log().sum();
  out.value = -0.5 * y.dot(alpha) - 0.5 * log_det -
              0.5 * double(n) * std::log(2.0 * std::numbers::pi);

  const Eigen::MatrixXd Kinv =
      factor.llt.solve(Eigen::MatrixXd::Identity(n, n));
  const Eigen::MatrixXd W = alpha * alpha.transpose() - Kinv;
  const Eigen::MatrixXd M = W.cwiseProduct(Kf);

  const Eigen::Index p = mode == KernelMode::ard ? d + 2 : 3;
  out.gradient = Eigen::VectorXd::Zero(p);
  // dK/dlog(sf) = 2 Kf
  out.gradient(0) = M.sum();
  // dK/dlog(sn) = 2 sn^2 I
  out.gradient(p - 1) = sn2 * W.trace();
  // dK/dlog(l_j) = Kf .* (x_aj - x_bj)^2 / l_j^2, and for symmetric M
  // 1/2 sum_ab M_ab (x_a - x_b)^2 = x.^2' M 1 - x' M x. Columns are centered
  // first; the pairwise differences do not change.
  const Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
  const Eigen::VectorXd row_sums = M.rowwise().sum();
  const Eigen::MatrixXd MX = M * Xc;
  Eigen::VectorXd per_feature(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double l = h.length_scales(j);
    per_feature(j) = (Xc.col(j).cwiseAbs2().dot(row_sums) -
                      Xc.col(j).dot(MX.col(j))) /
                     (l * l);
  }
  if (mode == KernelMode::ard) {
    out.gradient.segment(1, d) = per_feature;
  } else {
    out.gradient(1) = per_feature.sum();
  }
  return out;
}

inline LmlResult log_marginal_likelihood(const LogParams &theta,
                                         const Eigen::MatrixXd &X,
                                         const Eigen::VectorXd &y) {
  return log_marginal_likelihood(theta.hyperparams(X.cols()), theta.mode, X, y);
}

struct Prediction {
  double mean = 0.0;
  double latent_var = 0.0;
  double observation_var = 0.0;
  double lower95 = 0.0;
  double upper95 = 0.0;
};

/// Affine map from the model's internal target units to reported units.
struct TargetTransform {
  double offset = 0.0;
  double scale = 1.0;
};

struct RestartRecord {
  Eigen::VectorXd initial_theta;
  Eigen::VectorXd final_theta;
  double initial_lml = std::numeric_limits<double>::quiet_NaN();
  double final_lml = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  int evaluations = 0;
  std::string termination; ///< Termination name, or "error"
  std::string error;
  std::vector<TraceEntry> trace; ///< values are negated LML
};

struct FitLog {
  std::vector<RestartRecord> restarts;
  int best_restart = -1;
  LbfgsConfig optimizer;
  std::uint64_t seed = 0;
  double initial_lml = std::numeric_limits<double>::quiet_NaN();
  double final_lml = std::numeric_limits<double>::quiet_NaN();
};

/// Exact GP posterior conditioned on training data. Immutable; predict is
/// safe to call concurrently.
class TrainedGP {
public:
  /// Factorizes K + sn^2 I with jitter escalation.
  TrainedGP(Eigen::MatrixXd X, Eigen::VectorXd y, KernelHyperparams h,
            KernelMode mode = KernelMode::ard, FitLog log = {})
      : X_(std::move(X)), y_(std::move(y)), h_(std::move(h)), mode_(mode),
        log_(std::move(log)) {
    check();
    auto factor = jittered_cholesky(noisy_kernel());
    llt_ = std::move(factor.llt);
    jitter_ = factor.jitter;
    alpha_ = llt_.solve(y_);
  }

  /// Factorizes with a fixed jitter, as recorded in a saved model.
  TrainedGP(Eigen::MatrixXd X, Eigen::VectorXd y, KernelHyperparams h,
            KernelMode mode, double jitter, FitLog log = {})
      : X_(std::move(X)), y_(std::move(y)), h_(std::move(h)), mode_(mode),
        log_(std::move(log)) {
    check();
    auto llt = try_cholesky(noisy_kernel(), jitter);
    if (!llt) {
      throw CholeskyError("stored jitter does not yield a positive definite "
                          "covariance matrix");
    }
    llt_ = std::move(*llt);
    jitter_ = jitter;
    alpha_ = llt_.solve(y_);
  }

  const Eigen::MatrixXd &inputs() const { return X_; }
  const Eigen::VectorXd &targets() const { return y_; }
  const KernelHyperparams &hyperparams() const { return h_; }
  KernelMode mode() const { return mode_; }
  double jitter() const { return jitter_; }
  const Eigen::VectorXd &alpha() const { return alpha_; }
  Eigen::MatrixXd chol_lower() const { return llt_.matrixL(); }
  const FitLog &fit_log() const { return log_; }
  const TargetTransform &target_transform() const { return transform_; }
  Eigen::Index dims() const { return X_.cols(); }

  /// Returns a copy reporting predictions through `t`.
  TrainedGP with_target_transform(TargetTransform t) const {
    TrainedGP copy = *this;
    copy.transform_ = t;
    return copy;
  }

  double log_marginal_likelihood() const {
    const double log_det = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
    return -0.5 * y_.dot(alpha_) - 0.5 * log_det -
           0.5 * double(X_.rows()) * std::log(2.0 * std::numbers::pi);
  }

  /// Posterior mean k*' alpha, in reported units.
  Eigen::VectorXd predict_mean(const Eigen::MatrixXd &Xq) const {
    check_query(Xq);
    const Eigen::MatrixXd Ks = kernel_matrix(X_, Xq, h_);
    return ((Ks.transpose() * alpha_).array() * transform_.scale +
            transform_.offset)
        .matrix();
  }

  /// Mean, latent variance k** - v'v (v = L^-1 k*), observation variance
  /// and 95% interval for every query row, in reported units.
  std::vector<Prediction> predict(const Eigen::MatrixXd &Xq) const {
    check_query(Xq);
    const Eigen::MatrixXd Ks = kernel_matrix(X_, Xq, h_);
    const Eigen::VectorXd mean = Ks.transpose() * alpha_;
    const Eigen::MatrixXd V = llt_.matrixL().solve(Ks);
    const double sf2 = h_.signal_std * h_.signal_std;
    const double sn2 = h_.noise_std * h_.noise_std;
    const double s2 = transform_.scale * transform_.scale;
    std::vector<Prediction> out(static_cast<std::size_t>(Xq.rows()));
    for (Eigen::Index i = 0; i < Xq.rows(); ++i) {
      auto &p = out[static_cast<std::size_t>(i)];
      const double latent = std::max(0.0, sf2 - V.col(i).squaredNorm());
      p.mean = transform_.offset + transform_.scale * mean(i);
      p.latent_var = s2 * latent;
      p.observation_var = s2 * (latent + sn2);
      const double half = kZ95 * std::sqrt(p.observation_var);
      p.lower95 = p.mean - half;
      p.upper95 = p.mean + half;
    }
    return out;
  }

private:
  void check() const {
    if (X_.rows() < 1 || y_.size() != X_.rows()) {
      throw Error("training inputs and targets must be non-empty and match");
    }
    h_.validate();
    if (h_.length_scales.size() != X_.cols()) {
      throw Error("length scale count does not match input dimension");
    }
  }

  void check_query(const Eigen::MatrixXd &Xq) const {
    if (Xq.cols() != X_.cols()) {
      throw Error("query has " + std::to_string(Xq.cols()) +
                  " features, model expects " + std::to_string(X_.cols()));
    }
  }

  Eigen::MatrixXd noisy_kernel() const {
    Eigen::MatrixXd K = kernel_matrix(X_, X_, h_);
    K.diagonal().array() += h_.noise_std * h_.noise_std;
    return K;
  }

  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  KernelHyperparams h_;
  KernelMode mode_;
  FitLog log_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double jitter_ = 0.0;
  Eigen::VectorXd alpha_;
  TargetTransform transform_;
};

/// Every restart failed; carries the per-restart log for diagnostics.
class FitError : public Error {
public:
  FitError(const std::string &what, FitLog log) : Error(what), log_(std::move(log)) {}
  const FitLog &log() const { return log_; }

private:
  FitLog log_;
};

struct FitOptions {
  std::optional<LogParams> init; ///< defaults to LogParams::initial
  KernelMode mode = KernelMode::ard;
  LbfgsConfig optimizer;
  int restarts = 1;
  std::uint64_t seed = 0;
};

/// Maximizes the log marginal likelihood from the initial point and from
/// restarts-1 random starts drawn log-uniformly over [e^-2, e^2] per
/// coordinate; keeps the best.
inline TrainedGP fit(const Eigen::MatrixXd &X, const Eigen::VectorXd &y,
                     const FitOptions &opts = {}) {
  if (X.rows() < 1 || y.size() != X.rows()) {
    throw Error("fit needs a non-empty training set with matching targets");
  }
  if (opts.restarts < 1) {
    throw Error("restarts must be >= 1");
  }
  const auto d = X.cols();
  LogParams init = opts.init.value_or(LogParams::initial(d, opts.mode));
  if (init.mode != opts.mode || init.values.size() != init.expected_size(d)) {
    throw Error("initial log parameters do not match the kernel mode and "
                "input dimension");
  }

  FitLog log;
  log.optimizer = opts.optimizer;
  log.seed = opts.seed;
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> draw(-2.0, 2.0);

  double best = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_theta;
  for (int r = 0; r < opts.restarts; ++r) {
    RestartRecord rec;
    rec.initial_theta = init.values;
    if (r > 0) {
      for (Eigen::Index k = 0; k < rec.initial_theta.size(); ++k) {
        rec.initial_theta(k) = draw(rng);
      }
    }
    auto negated = [&](const Eigen::VectorXd &theta) {
      LogParams p{theta, opts.mode};
      try {
        auto lml = log_marginal_likelihood(p, X, y);
        return std::make_pair(-lml.value, Eigen::VectorXd(-lml.gradient));
      } catch (const CholeskyError &) {
        return std::make_pair(std::numeric_limits<double>::infinity(),
                              Eigen::VectorXd(theta.size()).setZero());
      }
    };
    try {
      auto res = minimize(negated, rec.initial_theta, opts.optimizer);
      rec.initial_lml = -res.trace.front().value;
      rec.final_theta = res.point;
      rec.final_lml = -res.value;
      rec.iterations = res.iterations;
      rec.evaluations = res.evaluations;
      rec.termination = to_string(res.reason);
      rec.trace = std::move(res.trace);
      if (rec.final_lml > best) {
        best = rec.final_lml;
        best_theta = rec.final_theta;
        log.best_restart = r;
      }
    } catch (const Error &e) {
      rec.termination = "error";
      rec.error = e.what();
    }
    if (r == 0) {
      log.initial_lml = rec.initial_lml;
    }
    log.restarts.push_back(std::move(rec));
  }
  if (log.best_restart < 0) {
    throw FitError("GP fit failed: every restart hit a non-finite objective or "
                   "Cholesky failure",
                   std::move(log));
  }
  log.final_lml = best;
  const LogParams fitted{best_theta, opts.mode};
  return TrainedGP(X, y, fitted.hyperparams(d), opts.mode, std::move(log));
}

struct Score {
  double rmse = 0.0;
  double r2 = 0.0;
};

inline Score score(const Eigen::VectorXd &predicted,
                   const Eigen::VectorXd &actual) {
  if (predicted.size() != actual.size() || actual.size() < 2) {
    throw Error("score needs two equal-length vectors with at least 2 entries");
  }
  const double sse = (predicted - actual).squaredNorm();
  const double sst = (actual.array() - actual.mean()).square().sum();
  if (!(sst > 0.0)) {
    throw ZeroVarianceError("r2 undefined: actual values have zero variance");
  }
  return {std::sqrt(sse / double(actual.size())), 1.0 - sse / sst};
}

inline Eigen::VectorXd means_of(const std::vector<Prediction> &preds) {
  Eigen::VectorXd m(static_cast<Eigen::Index>(preds.size()));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    m(static_cast<Eigen::Index>(i)) = preds[i].mean;
  }
  return m;
}

} // namespace gprx

#endif // GPRX_GP_HPP
