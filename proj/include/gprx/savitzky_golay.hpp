#ifndef GPRX_SAVITZKY_GOLAY_HPP
#define GPRX_SAVITZKY_GOLAY_HPP

#include <Eigen/Dense>

#include <string>

#include "gprx/error.hpp"

namespace gprx {

inline void check_savgol_params(int window, int order) {
  if (window < 3 || window % 2 == 0) {
    throw Error("Savitzky-Golay window must be an odd integer >= 3, got " +
                std::to_string(window));
  }
  if (order < 0 || order >= window) {
    throw Error("Savitzky-Golay order must satisfy 0 <= order < window, got "
                "order " +
                std::to_string(order) + " for window " +
                std::to_string(window));
  }
}

/// Weights that map `window` consecutive samples to the value, at sample
/// position `eval_pos` (0-based within the window), of the least-squares
/// polynomial of degree `order` fitted to them.
inline Eigen::VectorXd savgol_weights(int window, int order, int eval_pos) {
  check_savgol_params(window, order);
  const int half = window / 2;
  // Abscissae scaled to [-1, 1] keep the Vandermonde matrix well conditioned.
  auto abscissa = [half](int pos) {
    return static_cast<double>(pos - half) / static_cast<double>(half);
  };
  Eigen::MatrixXd vander(window, order + 1);
  for (int i = 0; i < window; ++i) {
    double p = 1.0;
    for (int k = 0; k <= order; ++k) {
      vander(i, k) = p;
      p *= abscissa(i);
    }
  }
  Eigen::VectorXd basis(order + 1);
  double p = 1.0;
  for (int k = 0; k <= order; ++k) {
    basis(k) = p;
    p *= abscissa(eval_pos);
  }
  // pinv(V) = (V^T V)^-1 V^T, evaluated through QR.
  const Eigen::MatrixXd pinv = vander.colPivHouseholderQr().solve(
      Eigen::MatrixXd::Identity(window, window));
  return pinv.transpose() * basis;
}

/// Smooths `series` with a centered Savitzky-Golay filter. Points within
/// half a window of either end take the value of the polynomial fitted to
/// the first (or last) `window` samples, evaluated at that point.
inline Eigen::VectorXd savitzky_golay(const Eigen::VectorXd &series,
                                      int window, int order) {
  check_savgol_params(window, order);
  const auto n = series.size();
  if (n < window) {
    throw Error("Savitzky-Golay window (" + std::to_string(window) +
                ") exceeds series length (" + std::to_string(n) + ")");
  }
  const int half = window / 2;
  Eigen::VectorXd out(n);

  const Eigen::VectorXd center = savgol_weights(window, order, half);
  for (Eigen::Index i = half; i < n - half; ++i) {
    out(i) = center.dot(series.segment(i - half, window));
  }
  for (int i = 0; i < half; ++i) {
    out(i) = savgol_weights(window, order, i).dot(series.head(window));
    out(n - 1 - i) = savgol_weights(window, order, window - 1 - i)
                         .dot(series.tail(window));
  }
  return out;
}

} // namespace gprx

#endif // GPRX_SAVITZKY_GOLAY_HPP
