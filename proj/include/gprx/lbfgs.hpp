#ifndef GPRX_LBFGS_HPP
#define GPRX_LBFGS_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <exception>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gprx/error.hpp"

namespace gprx {

/// One evaluation of the objective: the point, its value and gradient.
struct ObjectiveEval {
  Eigen::VectorXd point;
  double value = 0.0;
  Eigen::VectorXd gradient;

  bool finite() const {
    return std::isfinite(value) && gradient.allFinite();
  }
};

struct LbfgsConfig {
  int memory = 10;
  int max_iterations = 200;
  double gradient_tolerance = 1e-6; ///< on the max-norm of the gradient
  double c1 = 1e-4;                 ///< sufficient decrease
  double c2 = 0.9;                  ///< curvature
  int max_line_search_steps = 40;

  void validate() const {
    if (memory < 1) {
      throw Error("L-BFGS memory must be >= 1");
    }
    if (!(c1 > 0.0 && c1 < c2 && c2 < 1.0)) {
      throw Error("Wolfe constants must satisfy 0 < c1 < c2 < 1");
    }
    if (max_iterations < 0 || max_line_search_steps < 1) {
      throw Error("L-BFGS iteration limits must be positive");
    }
    if (!(gradient_tolerance >= 0.0)) {
      throw Error("gradient tolerance must be non-negative");
    }
  }
};

enum class Termination { gradient_tol, max_iter, line_search_failure };

inline const char *to_string(Termination t) {
  switch (t) {
  case Termination::gradient_tol:
    return "gradient_tol";
  case Termination::max_iter:
    return "max_iter";
  case Termination::line_search_failure:
    return "line_search_failure";
  }
  return "unknown";
}

struct TraceEntry {
  int iteration = 0;
  double value = 0.0;
  double gradient_norm = 0.0; ///< max-norm
};

struct OptResult {
  Eigen::VectorXd point;
  double value = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  int evaluations = 0;
  Termination reason = Termination::max_iter;
  std::vector<TraceEntry> trace;
  LbfgsConfig config;
};

/// Raised when the objective fails; carries the best point reached so far.
class OptimizerError : public Error {
public:
  OptimizerError(const std::string &what, Eigen::VectorXd best_point,
                 double best_value)
      : Error(what), best_point_(std::move(best_point)),
        best_value_(best_value) {}

  const Eigen::VectorXd &best_point() const noexcept { return best_point_; }
  double best_value() const noexcept { return best_value_; }

private:
  Eigen::VectorXd best_point_;
  double best_value_;
};

struct CurvaturePair {
  Eigen::VectorXd s; ///< x_{k+1} - x_k
  Eigen::VectorXd y; ///< g_{k+1} - g_k
};

/// Two-loop recursion: returns -H g where H is the limited-memory inverse
/// Hessian built from `history` (oldest first) with initial scaling
/// gamma = s'y / y'y of the newest pair. Every pair must have s'y > 0.
inline Eigen::VectorXd
two_loop_direction(const Eigen::VectorXd &gradient,
                   const std::deque<CurvaturePair> &history) {
  Eigen::VectorXd q = gradient;
  const auto m = history.size();
  std::vector<double> alpha(m), rho(m);
  for (std::size_t k = m; k-- > 0;) {
    const auto &p = history[k];
    rho[k] = 1.0 / p.y.dot(p.s);
    alpha[k] = rho[k] * p.s.dot(q);
    q -= alpha[k] * p.y;
  }
  double gamma = 1.0;
  if (m > 0) {
    const auto &last = history.back();
    gamma = last.s.dot(last.y) / last.y.dot(last.y);
  }
  Eigen::VectorXd r = gamma * q;
  for (std::size_t k = 0; k < m; ++k) {
    const auto &p = history[k];
    const double beta = rho[k] * p.y.dot(r);
    r += (alpha[k] - beta) * p.s;
  }
  return -r;
}

namespace detail {

// Minimizer of the cubic matching values and slopes at a and b; NaN when the
// cubic has no interior minimum.
inline double cubic_minimizer(double a, double fa, double ga, double b,
                              double fb, double gb) {
  const double d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - ga * gb;
  if (!(disc >= 0.0)) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  const double d2 = std::copysign(std::sqrt(disc), b - a);
  const double denom = gb - ga + 2.0 * d2;
  if (denom == 0.0) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return b - (b - a) * (gb + d2 - d1) / denom;
}

struct LinePoint {
  double step = 0.0;
  double value = 0.0;
  double slope = 0.0;
  ObjectiveEval eval;
};

template <typename Evaluate> class StrongWolfeSearch {
public:
  StrongWolfeSearch(Evaluate &evaluate, const ObjectiveEval &start,
                    const Eigen::VectorXd &direction, const LbfgsConfig &cfg)
      : evaluate_(evaluate), start_(start), direction_(direction), cfg_(cfg) {
    origin_.step = 0.0;
    origin_.value = start.value;
    origin_.slope = start.gradient.dot(direction);
    origin_.eval = start;
    best_ = origin_;
  }

  /// Returns true with the accepted point in `accepted`; on failure
  /// `best()` holds the lowest point visited.
  bool run(LinePoint &accepted) {
    LinePoint prev = origin_;
    double step = 1.0;
    for (int i = 0; i < cfg_.max_line_search_steps; ++i) {
      LinePoint cur;
      if (!probe(step, cur)) {
        // Non-finite: the step overshot into an invalid region.
        step = prev.step + 0.5 * (step - prev.step);
        continue;
      }
      if (cur.value > armijo(cur.step) || (i > 0 && cur.value >= prev.value)) {
        return zoom(prev, cur, i + 1, accepted);
      }
      if (std::abs(cur.slope) <= -cfg_.c2 * origin_.slope) {
        accepted = cur;
        return true;
      }
      if (cur.slope >= 0.0) {
        return zoom(cur, prev, i + 1, accepted);
      }
      double next = cubic_minimizer(prev.step, prev.value, prev.slope,
                                    cur.step, cur.value, cur.slope);
      if (!std::isfinite(next) || next < 1.1 * cur.step) {
        next = 2.0 * cur.step;
      }
      next = std::min(next, 10.0 * cur.step);
      prev = cur;
      step = next;
    }
    return false;
  }

  const LinePoint &best() const { return best_; }

private:
  double armijo(double step) const {
    return origin_.value + cfg_.c1 * step * origin_.slope;
  }

  bool probe(double step, LinePoint &out) {
    out.step = step;
    out.eval = evaluate_(start_.point + step * direction_);
    if (!out.eval.finite()) {
      return false;
    }
    out.value = out.eval.value;
    out.slope = out.eval.gradient.dot(direction_);
    if (out.value < best_.value) {
      best_ = out;
    }
    return true;
  }

  bool zoom(LinePoint lo, LinePoint hi, int used, LinePoint &accepted) {
    bool hi_finite = true;
    for (int i = used; i < cfg_.max_line_search_steps; ++i) {
      const double left = std::min(lo.step, hi.step);
      const double right = std::max(lo.step, hi.step);
      const double width = right - left;
      double step = std::numeric_limits<double>::quiet_NaN();
      if (hi_finite) {
        step = cubic_minimizer(lo.step, lo.value, lo.slope, hi.step, hi.value,
                               hi.slope);
      }
      const double margin = 1e-3 * width;
      if (!std::isfinite(step)) {
        step = 0.5 * (left + right);
      } else {
        step = std::clamp(step, left + margin, right - margin);
      }
      if (width <= std::numeric_limits<double>::epsilon() *
                       std::max(1.0, right)) {
        return false;
      }
      LinePoint cur;
      if (!probe(step, cur)) {
        hi.step = step;
        hi_finite = false;
        continue;
      }
      if (cur.value > armijo(cur.step) || cur.value >= lo.value) {
        hi = cur;
        hi_finite = true;
        continue;
      }
      if (std::abs(cur.slope) <= -cfg_.c2 * origin_.slope) {
        accepted = cur;
        return true;
      }
      if (cur.slope * (hi.step - lo.step) >= 0.0) {
        hi = lo;
        hi_finite = true;
      }
      lo = cur;
    }
    return false;
  }

  Evaluate &evaluate_;
  const ObjectiveEval &start_;
  const Eigen::VectorXd &direction_;
  const LbfgsConfig &cfg_;
  LinePoint origin_;
  LinePoint best_;
};

} // namespace detail

/// Minimizes `objective` from `x0` with L-BFGS and a strong-Wolfe line
/// search. `objective(x)` returns a (value, gradient) pair; non-finite
/// results are rejected by the line search.
template <typename Objective>
OptResult minimize(Objective &&objective, const Eigen::VectorXd &x0,
                   const LbfgsConfig &cfg = {}) {
  cfg.validate();
  OptResult result;
  result.config = cfg;

  ObjectiveEval current;
  auto evaluate = [&](const Eigen::VectorXd &x) {
    ObjectiveEval e;
    e.point = x;
    try {
      auto [value, gradient] = objective(x);
      e.value = value;
      e.gradient = std::move(gradient);
    } catch (const std::exception &ex) {
      const bool started = current.point.size() > 0;
      throw OptimizerError(std::string("objective failed: ") + ex.what(),
                           started ? current.point : x0,
                           started ? current.value
                                   : std::numeric_limits<double>::quiet_NaN());
    }
    if (e.gradient.size() != x.size()) {
      throw OptimizerError("objective gradient has wrong dimension",
                           current.point.size() ? current.point : x0,
                           current.value);
    }
    ++result.evaluations;
    return e;
  };

  current = evaluate(x0);
  if (!current.finite()) {
    throw OptimizerError("objective is not finite at the initial point", x0,
                         current.value);
  }
  result.trace.push_back({0, current.value, current.gradient.lpNorm<Eigen::Infinity>()});

  std::deque<CurvaturePair> history;
  int iter = 0;
  for (;;) {
    if (current.gradient.lpNorm<Eigen::Infinity>() <= cfg.gradient_tolerance) {
      result.reason = Termination::gradient_tol;
      break;
    }
    if (iter >= cfg.max_iterations) {
      result.reason = Termination::max_iter;
      break;
    }
    Eigen::VectorXd direction = two_loop_direction(current.gradient, history);
    if (!(direction.dot(current.gradient) < 0.0) || !direction.allFinite()) {
      history.clear();
      direction = -current.gradient;
    }
    detail::StrongWolfeSearch search(evaluate, current, direction, cfg);
    detail::LinePoint accepted;
    const bool ok = search.run(accepted);
    if (!ok) {
      if (search.best().value < current.value) {
        current = search.best().eval;
        ++iter;
        result.trace.push_back(
            {iter, current.value, current.gradient.lpNorm<Eigen::Infinity>()});
      }
      result.reason = Termination::line_search_failure;
      break;
    }
    CurvaturePair pair{accepted.eval.point - current.point,
                       accepted.eval.gradient - current.gradient};
    const double sy = pair.s.dot(pair.y);
    if (sy > 1e-10 * pair.s.norm() * pair.y.norm()) {
      history.push_back(std::move(pair));
      if (static_cast<int>(history.size()) > cfg.memory) {
        history.pop_front();
      }
    }
    current = std::move(accepted.eval);
    ++iter;
    result.trace.push_back(
        {iter, current.value, current.gradient.lpNorm<Eigen::Infinity>()});
  }

  result.point = current.point;
  result.value = current.value;
  result.gradient = current.gradient;
  result.iterations = iter;
  return result;
}

} // namespace gprx

#endif // GPRX_LBFGS_HPP
