#include <gtest/gtest.h>

#include <gprx/lime.hpp>
#include <gprx/selection.hpp>

#include <random>

namespace gprx {
namespace {

// Oracle: weighted least squares with intercept via the normal equations.
Eigen::VectorXd wls_oracle(const Eigen::MatrixXd &Z, const Eigen::VectorXd &y,
                           const Eigen::VectorXd &w) {
  Eigen::MatrixXd A(Z.rows(), Z.cols() + 1);
  A.col(0).setOnes();
  A.rightCols(Z.cols()) = Z;
  const Eigen::MatrixXd AtW = A.transpose() * w.asDiagonal();
  return (AtW * A).ldlt().solve(AtW * y); // (b0, b1, ..., bd)
}

struct Problem {
  Eigen::MatrixXd Z;
  Eigen::VectorXd y;
  Eigen::VectorXd w;
};

Problem random_problem(std::mt19937_64 &rng, int n, int d, double noise = 0.3) {
  std::normal_distribution<double> normal;
  Problem p;
  LimeConfig cfg;
  cfg.samples = n;
  cfg.seed = rng();
  const Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(d, [&] { return normal(rng); });
  p.Z = perturb_samples(x, cfg);
  const Eigen::VectorXd beta = Eigen::VectorXd::NullaryExpr(d, [&] { return 2.0 * normal(rng); });
  p.y = (p.Z * beta).array() + 0.7 + (p.Z.col(0).array().sin() * noise);
  p.w = proximity_weights(x, p.Z, cfg.width_for(d));
  return p;
}

TEST(Perturb, ZeroScaleRepeatsInstance) {
  LimeConfig cfg;
  cfg.samples = 20;
  cfg.scale = 0.0;
  const Eigen::Vector3d x(1.0, -2.0, 0.5);
  const auto Z = perturb_samples(x, cfg);
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    EXPECT_EQ(Z.row(i), x.transpose());
  }
}

TEST(Perturb, GaussianSampleStdIsScale) {
  LimeConfig cfg;
  cfg.samples = 10000;
  cfg.seed = 17;
  const Eigen::Vector3d x(0.5, 0.0, -1.0);
  const auto Z = perturb_samples(x, cfg);
  EXPECT_EQ(Z.row(0), x.transpose());
  const Eigen::MatrixXd noise = Z.rowwise() - x.transpose();
  for (Eigen::Index j = 0; j < 3; ++j) {
    const Eigen::VectorXd c = noise.col(j);
    const double sd = std::sqrt((c.array() - c.mean()).square().sum() / (c.size() - 1.0));
    EXPECT_NEAR(sd, 1.0, 0.03);
  }
}

TEST(Perturb, UniformMatchesVarianceAndBounds) {
  LimeConfig cfg;
  cfg.samples = 10000;
  cfg.scale = 2.0;
  cfg.distribution = PerturbationKind::uniform;
  const Eigen::Vector2d x(0.0, 0.0);
  const auto Z = perturb_samples(x, cfg);
  EXPECT_LE(Z.cwiseAbs().maxCoeff(), 2.0 * std::sqrt(3.0));
  for (Eigen::Index j = 0; j < 2; ++j) {
    const double sd = std::sqrt(Z.col(j).squaredNorm() / (Z.rows() - 1.0));
    EXPECT_NEAR(sd, 2.0, 0.06);
  }
}

TEST(Perturb, DeterministicForSeed) {
  LimeConfig cfg;
  cfg.samples = 50;
  const Eigen::Vector2d x(1.0, 2.0);
  EXPECT_EQ(perturb_samples(x, cfg), perturb_samples(x, cfg));
  LimeConfig other = cfg;
  other.seed = cfg.seed + 1;
  EXPECT_NE(perturb_samples(x, cfg), perturb_samples(x, other));
}

TEST(Proximity, KnownValuesAndMonotonicity) {
  const Eigen::Vector2d x(0.0, 0.0);
  Eigen::MatrixXd Z(4, 2);
  Z << 0.0, 0.0, 0.6, 0.8, 1.0, 1.0, 3.0, 0.0;
  const auto w = proximity_weights(x, Z, 1.0);
  EXPECT_EQ(w(0), 1.0);
  EXPECT_NEAR(w(1), 0.36787944117144233, 1e-15); // D = 1 = width
  EXPECT_GT(w(1), w(2));
  EXPECT_GT(w(2), w(3));
  EXPECT_GT(w(3), 0.0);
  EXPECT_THROW(proximity_weights(x, Z, 0.0), Error);
}

TEST(Surrogate, RecoversExactLinearFunction) {
  LimeConfig cfg;
  cfg.samples = 200;
  const Eigen::Vector2d x(0.3, -0.4);
  const auto Z = perturb_samples(x, cfg);
  const Eigen::VectorXd y = (3.0 * Z.col(0) - 2.0 * Z.col(1)).array() + 1.0;
  const auto w = proximity_weights(x, Z, 1.0);
  const auto e = fit_local_surrogate(Z, y, w, 0.0);
  const auto oracle = wls_oracle(Z, y, w);
  EXPECT_NEAR(e.coefficients(0), 3.0, 1e-6);
  EXPECT_NEAR(e.coefficients(1), -2.0, 1e-6);
  EXPECT_NEAR(e.intercept, 1.0, 1e-6);
  EXPECT_NEAR(e.coefficients(0), oracle(1), 1e-6);
  EXPECT_NEAR(e.r2, 1.0, 1e-10);
}

TEST(Surrogate, ConstantTarget) {
  LimeConfig cfg;
  cfg.samples = 30;
  const Eigen::Vector3d x(1, 2, 3);
  const auto Z = perturb_samples(x, cfg);
  const auto e = fit_local_surrogate(Z, Eigen::VectorXd::Constant(30, 4.5),
                                     proximity_weights(x, Z, 1.0), 0.0);
  EXPECT_EQ(e.coefficients, Eigen::VectorXd::Zero(3));
  EXPECT_EQ(e.intercept, 4.5);
  EXPECT_EQ(e.r2, 1.0);
}

// lambda_max from the soft-threshold condition at b = 0, computed here from
// scratch: weighted centering and scaling, then |sum w z~ y~|.
double lambda_max_oracle(const Problem &p) {
  const double W = p.w.sum();
  double ybar = 0.0;
  for (Eigen::Index i = 0; i < p.y.size(); ++i) {
    ybar += p.w(i) * p.y(i) / W;
  }
  double best = 0.0;
  for (Eigen::Index j = 0; j < p.Z.cols(); ++j) {
    double zbar = 0.0;
    for (Eigen::Index i = 0; i < p.Z.rows(); ++i) {
      zbar += p.w(i) * p.Z(i, j) / W;
    }
    double var = 0.0;
    for (Eigen::Index i = 0; i < p.Z.rows(); ++i) {
      var += p.w(i) * (p.Z(i, j) - zbar) * (p.Z(i, j) - zbar) / W;
    }
    double corr = 0.0;
    for (Eigen::Index i = 0; i < p.Z.rows(); ++i) {
      corr += p.w(i) * (p.Z(i, j) - zbar) / std::sqrt(var) * (p.y(i) - ybar);
    }
    best = std::max(best, std::abs(corr));
  }
  return best;
}

TEST(Surrogate, LambdaAboveThresholdZeroesEverything) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_problem(rng, 100, 4);
    const double lmax = lambda_max_oracle(p);
    const auto at = fit_local_surrogate(p.Z, p.y, p.w, lmax * (1.0 + 1e-9));
    EXPECT_EQ(at.coefficients.cwiseAbs().maxCoeff(), 0.0);
    const auto below = fit_local_surrogate(p.Z, p.y, p.w, 0.9 * lmax);
    EXPECT_GT(below.coefficients.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Surrogate, UnpenalizedMatchesWeightedLeastSquares) {
  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + trial % 5;
    const int n = d + 2 + static_cast<int>(rng() % 190);
    const auto p = random_problem(rng, n, d);
    const auto e = fit_local_surrogate(p.Z, p.y, p.w, 0.0);
    const auto oracle = wls_oracle(p.Z, p.y, p.w);
    EXPECT_NEAR(e.intercept, oracle(0), 1e-6);
    for (int j = 0; j < d; ++j) {
      EXPECT_NEAR(e.coefficients(j), oracle(j + 1), 1e-6) << "trial " << trial;
    }
  }
}

TEST(Surrogate, ScalingOutputsScalesCoefficients) {
  std::mt19937_64 rng(303);
  const auto p = random_problem(rng, 150, 4);
  const auto a = fit_local_surrogate(p.Z, p.y, p.w, 0.0);
  const auto b = fit_local_surrogate(p.Z, 2.5 * p.y, p.w, 0.0);
  EXPECT_LT((b.coefficients - 2.5 * a.coefficients).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Surrogate, SupportIsNestedInLambda) {
  std::mt19937_64 rng(404);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_problem(rng, 120, 5, 0.0);
    // Coefficients of very different magnitude so the path is non-trivial.
    const Eigen::VectorXd beta = (Eigen::VectorXd(5) << 2.0, 0.5, 0.05, 0.005, 0.0).finished();
    p.y = (p.Z * beta).array() + 0.02 * Eigen::VectorXd::NullaryExpr(120, [&] { return normal(rng); }).array();
    std::vector<Eigen::VectorXd> coefs;
    for (double lambda : {0.01, 0.1, 1.0}) {
      coefs.push_back(fit_local_surrogate(p.Z, p.y, p.w, lambda).coefficients);
    }
    for (std::size_t k = 1; k < coefs.size(); ++k) {
      for (int j = 0; j < 5; ++j) {
        if (std::abs(coefs[k](j)) > kNonzeroThreshold) {
          EXPECT_GT(std::abs(coefs[k - 1](j)), kNonzeroThreshold);
        }
      }
    }
  }
}

TEST(Surrogate, WideKernelApproachesUnweightedFit) {
  std::mt19937_64 rng(505);
  const auto p = random_problem(rng, 80, 3);
  const Eigen::VectorXd x = p.Z.row(0).transpose();
  const auto w = proximity_weights(x, p.Z, 1e6);
  EXPECT_GT(w.minCoeff(), 1.0 - 1e-9);
  const auto e = fit_local_surrogate(p.Z, p.y, w, 0.0);
  const auto oracle = wls_oracle(p.Z, p.y, Eigen::VectorXd::Ones(80));
  for (int j = 0; j < 3; ++j) {
    EXPECT_NEAR(e.coefficients(j), oracle(j + 1), 1e-6);
  }
}

TEST(Surrogate, Errors) {
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Random(4, 3);
  EXPECT_THROW(fit_local_surrogate(Z, Eigen::VectorXd::Random(4), Eigen::VectorXd::Ones(4), 0.0), Error);
  const Eigen::MatrixXd Z2 = Eigen::MatrixXd::Random(6, 2);
  EXPECT_THROW(fit_local_surrogate(Z2, Eigen::VectorXd::Random(6), Eigen::VectorXd::Zero(6), 0.0), Error);
  EXPECT_THROW(fit_local_surrogate(Z2, Eigen::VectorXd::Random(6), Eigen::VectorXd::Ones(6), -1.0), Error);
}

TrainedGP linear_gp(const Eigen::VectorXd &coef, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  const auto d = coef.size();
  const Eigen::MatrixXd X = Eigen::MatrixXd::NullaryExpr(n, d, [&] { return u(rng); });
  const Eigen::VectorXd y = X * coef;
  return fit(X, y, {.restarts = 2, .seed = seed});
}

TEST(Explain, LinearModelRecoversCoefficients) {
  const Eigen::Vector3d coef(2.0, -1.0, 0.5);
  const auto gp = linear_gp(coef, 120, 7);
  LimeConfig cfg;
  cfg.lambda = 0.0;
  for (const Eigen::Vector3d x : {Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(0.5, -0.8, 1.0)}) {
    const auto e = explain_instance(gp, x, cfg);
    for (int j = 0; j < 3; ++j) {
      EXPECT_NEAR(e.coefficients(j), coef(j), 0.05 * std::abs(coef(j)));
    }
  }
}

TEST(Explain, InertFeatureGetsSmallCoefficient) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  const Eigen::MatrixXd X = Eigen::MatrixXd::NullaryExpr(120, 3, [&] { return u(rng); });
  const Eigen::VectorXd y = (X.col(0).array() * 0.5).sin() * 2.0 + X.col(1).array();
  const auto gp = fit(X, y, {.restarts = 2, .seed = 8});
  const auto e = explain_instance(gp, Eigen::Vector3d(0.2, 0.1, -0.3), LimeConfig{});
  EXPECT_LT(std::abs(e.coefficients(2)), 0.05 * e.coefficients.cwiseAbs().maxCoeff());
}

TEST(Explain, DeterministicAndThreadIndependent) {
  const auto gp = linear_gp(Eigen::Vector2d(1.0, -3.0), 40, 9);
  LimeConfig cfg;
  cfg.samples = 200;
  const Eigen::Vector2d x(0.1, 0.2);
  const auto a = explain_instance(gp, x, cfg);
  const auto b = explain_instance(gp, x, cfg);
  EXPECT_EQ(a.coefficients, b.coefficients);
  EXPECT_EQ(a.intercept, b.intercept);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Eigen::MatrixXd Xt = Eigen::MatrixXd::NullaryExpr(9, 2, [&] { return u(rng); });
  const auto seq = explain_all(gp, Xt, cfg, 1);
  const auto par = explain_all(gp, Xt, cfg, 4);
  ASSERT_EQ(seq.size(), 9u);
  for (std::size_t k = 0; k < seq.size(); ++k) {
    EXPECT_EQ(seq[k].instance, k);
    EXPECT_EQ(seq[k].coefficients, par[k].coefficients);
    EXPECT_EQ(seq[k].r2, par[k].r2);
  }
  EXPECT_THROW(explain_instance(gp, Eigen::Vector3d(0, 0, 0), cfg), Error);
}

LocalExplanation expl(std::initializer_list<double> beta, double r2 = 1.0) {
  LocalExplanation e;
  e.coefficients = Eigen::VectorXd(static_cast<Eigen::Index>(beta.size()));
  Eigen::Index j = 0;
  for (double b : beta) {
    e.coefficients(j++) = b;
  }
  e.r2 = r2;
  return e;
}

TEST(GlobalScores, Examples) {
  const auto cancel = global_scores({expl({1.0}), expl({-1.0})});
  EXPECT_EQ(cancel.mean_abs(0), 1.0);
  EXPECT_EQ(cancel.actual_mean(0), 0.0);
  EXPECT_EQ(cancel.support_freq(0), 1.0);

  const auto count = global_scores({expl({0.0}), expl({2.0}), expl({0.0}), expl({0.0})});
  EXPECT_EQ(count.support_freq(0), 0.25);
  EXPECT_EQ(count.mean_abs(0), 0.5);

  const auto weighted = global_scores({expl({1.0}, 1.0), expl({3.0}, 0.0)});
  EXPECT_EQ(weighted.weighted_mean(0), 1.0);
  EXPECT_FALSE(weighted.weighted_fallback);

  // Negative R2 counts as zero weight.
  const auto neg = global_scores({expl({1.0}, 0.5), expl({3.0}, -0.4)});
  EXPECT_EQ(neg.weighted_mean(0), 1.0);
}

TEST(GlobalScores, AllPositiveColumnHasEqualMeans) {
  // Mirrors a feature whose absolute and signed mean coincide.
  const auto r = global_scores({expl({1.2, -0.5}), expl({1.721026, 0.5})});
  EXPECT_DOUBLE_EQ(r.mean_abs(0), 1.460513);
  EXPECT_DOUBLE_EQ(r.actual_mean(0), 1.460513);
  EXPECT_LT(std::abs(r.actual_mean(1)), r.mean_abs(1));
}

TEST(GlobalScores, ZeroWeightsFallBackToMeanAbs) {
  const auto r = global_scores({expl({1.0, 2.0}, 0.0), expl({3.0, 0.0}, -1.0)});
  EXPECT_TRUE(r.weighted_fallback);
  EXPECT_EQ(r.weighted_mean, r.mean_abs);
}

TEST(GlobalScores, RankingTiesGoToLowerIndex) {
  const auto r = global_scores({expl({0.5, 2.0, 0.5, 2.0})});
  EXPECT_EQ(r.ranking, (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(GlobalScores, Errors) {
  EXPECT_THROW(global_scores({}), Error);
  EXPECT_THROW(global_scores({expl({1.0}), expl({1.0, 2.0})}), Error);
}

TEST(Selection, ElbowExample) {
  const Eigen::VectorXd scores = (Eigen::VectorXd(5) << 10, 5, 1, 0.5, 0.5).finished();
  EXPECT_EQ(select_elbow(scores, 0.90), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Selection, ElbowUniformScores) {
  for (int d : {1, 3, 7, 10, 18}) {
    const auto chosen = select_elbow(Eigen::VectorXd::Constant(d, 0.3), 0.90);
    EXPECT_EQ(chosen.size(), static_cast<std::size_t>(std::ceil(0.9 * d))) << d;
  }
}

TEST(Selection, SingleFeatureAndNearTotalThreshold) {
  EXPECT_EQ(select_elbow(Eigen::VectorXd::Zero(1), 0.5).size(), 1u);
  const Eigen::VectorXd scores = (Eigen::VectorXd(5) << 0.0, 3.0, 0.0, 1.0, 2.0).finished();
  EXPECT_EQ(select_elbow(scores, 0.999), (std::vector<std::size_t>{1, 4, 3}));
  EXPECT_THROW(select_elbow(scores, 1.0), Error);
  EXPECT_THROW(select_elbow(scores, 0.0), Error);
  EXPECT_THROW(select_elbow(Eigen::VectorXd::Zero(3), 0.5), Error);
}

TEST(Selection, BootstrapKeepsStableFeatures) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  std::vector<LocalExplanation> ex;
  for (int k = 0; k < 60; ++k) {
    ex.push_back(expl({3.0 + 0.3 * normal(rng), 0.05 * normal(rng), -2.0 + 0.3 * normal(rng),
                       0.05 * normal(rng)},
                      0.9));
  }
  SelectionParams p;
  const auto sel = select_bootstrap(ex, p);
  EXPECT_EQ(sel.elbow_size, 2u);
  EXPECT_EQ(sel.selected, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(sel.frequency(0), 1.0);
  p.bootstrap_runs = 5;
  EXPECT_THROW(select_bootstrap(ex, p), Error);
}

TEST(Selection, ForwardCandidatesFollowRanking) {
  const auto r = global_scores({expl({0.1, 0.9, 0.5})});
  EXPECT_EQ(forward_candidates(r), (std::vector<std::size_t>{1, 2, 0}));
}

} // namespace
} // namespace gprx
