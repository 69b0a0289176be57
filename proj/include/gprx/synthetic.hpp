#ifndef GPRX_SYNTHETIC_HPP
#define GPRX_SYNTHETIC_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "gprx/dataset.hpp"
#include "gprx/error.hpp"
#include "gprx/gp.hpp"

namespace gprx {

struct DrillingSynthSpec {
  int rows = 240;
  int duplicates = 5;       ///< exact copies inserted after random rows
  double noise_std = 0.1;   ///< target noise, in latent (pre-unit) scale
  std::uint64_t seed = 7;
};

/// Latent-scale truth behind a synthetic drilling log.
struct DrillingSynthTruth {
  Eigen::VectorXd linear; ///< coefficient per feature on the latent scale
  std::size_t nonlinear_feature = 0;
  double nonlinear_amplitude = 0.0;
};

/// Planted coefficients: five informative features, the rest inert.
inline DrillingSynthTruth drilling_truth() {
  DrillingSynthTruth t;
  t.linear = Eigen::VectorXd::Zero(18);
  t.linear(11) = 1.5;  // X12
  t.linear(10) = 1.0;  // X11
  t.linear(1) = -0.8;  // X2
  t.linear(12) = 0.6;  // X13
  t.linear(16) = -0.5; // X17
  t.nonlinear_feature = 11;
  t.nonlinear_amplitude = 0.4;
  return t;
}

/// A drilling-like table with the default 18-feature schema. Each feature is
/// a smooth trajectory in file order (a sum of sinusoids plus a little noise)
/// mapped to a plausible unit range; the target is a known linear function of
/// the latent trajectories plus a smooth nonlinear bump and Gaussian noise.
/// `duplicates` rows are repeated verbatim immediately after their original.
inline Dataset synthetic_drilling(const DrillingSynthSpec &spec = {}) {
  if (spec.rows < 3) {
    throw Error("synthetic dataset needs at least 3 rows");
  }
  if (spec.duplicates < 0 || spec.duplicates > spec.rows) {
    throw Error("duplicate count must lie in [0, rows]");
  }
  const auto truth = drilling_truth();
  const Eigen::Index n = spec.rows;
  // Up to one cycle per ~20 rows: rich enough that features are not
  // collinear through the row index, slow enough to survive smoothing.
  const double kMaxCycles = std::max(1.0, double(n) / 20.0);
  const Eigen::Index d = truth.linear.size();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss;

  Eigen::MatrixXd latent(n, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    constexpr int kWaves = 8;
    double a[kWaves], f[kWaves], p[kWaves];
    for (int k = 0; k < kWaves; ++k) {
      a[k] = 0.5 + unit(rng);
      f[k] = 1.0 + kMaxCycles * unit(rng);
      p[k] = 2.0 * std::numbers::pi * unit(rng);
    }
    for (Eigen::Index t = 0; t < n; ++t) {
      const double s = double(t) / double(n);
      double v = 0.0;
      for (int k = 0; k < kWaves; ++k) {
        v += a[k] * std::sin(2.0 * std::numbers::pi * f[k] * s + p[k]);
      }
      latent(t, j) = v + 0.05 * gauss(rng);
    }
    const double mean = latent.col(j).mean();
    const double sd = std::sqrt((latent.col(j).array() - mean).square().sum() / double(n - 1));
    latent.col(j) = (latent.col(j).array() - mean) / sd;
  }

  Eigen::VectorXd y(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const double u = latent(t, static_cast<Eigen::Index>(truth.nonlinear_feature));
    y(t) = latent.row(t).dot(truth.linear) + truth.nonlinear_amplitude * std::sin(1.5 * u) +
           spec.noise_std * gauss(rng);
  }

  Dataset base;
  base.schema = marun_schema();
  base.features.resize(n, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double centre = std::pow(10.0, 3.0 * unit(rng));
    const double spread = centre * (0.05 + 0.2 * unit(rng));
    base.features.col(j) = centre + spread * latent.col(j).array();
  }
  base.target = 20.0 + 6.0 * y.array();

  std::vector<std::size_t> rows(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i] = i;
  }
  std::shuffle(rows.begin(), rows.end(), rng);
  std::vector<bool> repeat(static_cast<std::size_t>(n), false);
  for (int k = 0; k < spec.duplicates; ++k) {
    repeat[rows[static_cast<std::size_t>(k)]] = true;
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < repeat.size(); ++i) {
    order.push_back(i);
    if (repeat[i]) {
      order.push_back(i);
    }
  }
  return select_rows(base, order);
}

/// Draws from a zero-mean GP with the given ARD kernel plus Gaussian noise.
struct GpSample {
  Eigen::MatrixXd X;
  Eigen::VectorXd latent; ///< noise-free function values
  Eigen::VectorXd y;      ///< latent + N(0, noise_std^2)
};

/// Inputs are uniform on [lo, hi]^d; the latent function is sampled through
/// a Cholesky factor of the kernel matrix with a small fixed jitter.
inline GpSample sample_gp_prior(Eigen::Index n, const KernelHyperparams &h,
                                std::uint64_t seed, double lo = -2.0,
                                double hi = 2.0) {
  h.validate();
  const auto d = h.length_scales.size();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(lo, hi);
  std::normal_distribution<double> gauss;
  GpSample s;
  s.X = Eigen::MatrixXd::NullaryExpr(n, d, [&] { return unit(rng); });
  Eigen::MatrixXd K = kernel_matrix(s.X, s.X, h);
  K.diagonal().array() += 1e-8 * h.signal_std * h.signal_std;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) {
    throw CholeskyError("GP prior sample: kernel matrix not positive definite");
  }
  const Eigen::VectorXd z = Eigen::VectorXd::NullaryExpr(n, [&] { return gauss(rng); });
  s.latent = llt.matrixL() * z;
  s.y = s.latent + h.noise_std * Eigen::VectorXd::NullaryExpr(n, [&] { return gauss(rng); });
  return s;
}

} // namespace gprx

#endif // GPRX_SYNTHETIC_HPP
