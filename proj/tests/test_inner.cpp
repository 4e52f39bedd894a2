#include "metarhc/inner.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace metarhc;
using namespace metarhc::inner;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }
Vector vscalar(double v) { return Vector::Constant(1, v); }

RegressionData make_data(const Matrix& X, const Matrix& Y) {
  RegressionData d;
  d.X = X;
  d.Y = Y;
  return d;
}

// rows z_k ~ N(0, I), targets theta z_k + noise
RegressionData synthetic(std::mt19937_64& rng, const Matrix& theta, long count, double noise) {
  const Matrix X = oracle::random_matrix(rng, count, theta.cols());
  const Matrix Y = X * theta.transpose() + oracle::random_matrix(rng, count, theta.rows(), noise);
  return make_data(X, Y);
}

linsys::ThetaSet scalar_set() {
  linsys::ThetaSet s;
  s.n = 1;
  s.m = 1;
  s.S = 2.0;
  s.rho_max = 0.95;
  s.anchor = linsys::SystemParams(scalar(0.5), scalar(1.0));
  return s;
}

const qp::QuadCostSpec kCost = qp::QuadCostSpec::constant(scalar(1.0), scalar(0.1));
const qp::InputPolytope kBox = qp::InputPolytope::box(vscalar(-1.0), vscalar(1.0));

}  // namespace

TEST(RegularizedLs, IdentityDesignShrinksHalfway) {
  const auto d = make_data(Matrix::Identity(2, 2), (Matrix(2, 1) << 0.6, 0.9).finished());
  const Matrix th = regularized_ls(d, Matrix::Zero(1, 2), 1.0);
  EXPECT_NEAR(th(0, 0), 0.3, 1e-14);
  EXPECT_NEAR(th(0, 1), 0.45, 1e-14);
}

TEST(RegularizedLs, HugeLambdaReturnsPrior) {
  std::mt19937_64 rng(3);
  const auto d = synthetic(rng, oracle::random_matrix(rng, 2, 3), 30, 0.1);
  const Matrix phi = oracle::random_matrix(rng, 2, 3);
  EXPECT_LE(frobenius_distance(regularized_ls(d, phi, 1e12), phi), 1e-9);
}

TEST(RegularizedLs, NormalEquationsHold) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 1 + trial % 3, m = 1 + trial % 2;
    const auto d = synthetic(rng, oracle::random_matrix(rng, n, n + m), 5 + trial, 0.2);
    const Matrix phi = oracle::random_matrix(rng, n, n + m);
    const double lambda = 0.5 * trial;
    const Matrix th = regularized_ls(d, phi, lambda);
    const Matrix grad = d.X.transpose() * (d.X * th.transpose() - d.Y) + lambda * (th - phi).transpose();
    EXPECT_LE(grad.cwiseAbs().maxCoeff(), 1e-9 * (1.0 + d.Y.cwiseAbs().maxCoeff() * d.count()));
  }
}

TEST(RegularizedLs, SingularGramThrowsWithoutRegularization) {
  const auto d = make_data((Matrix(2, 2) << 1, 1, 1, 1).finished(), (Matrix(2, 1) << 0.7, 0.7).finished());
  EXPECT_THROW(regularized_ls(d, Matrix::Zero(1, 2), 0.0), SolverError);
  EXPECT_NO_THROW(regularized_ls(d, Matrix::Zero(1, 2), 1e-3));
}

TEST(RegularizedLs, ShrinkageMonotoneInLambda) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = synthetic(rng, oracle::random_matrix(rng, 2, 3), 12, 0.3);
    const Matrix phi = oracle::random_matrix(rng, 2, 3);
    double prev = std::numeric_limits<double>::infinity();
    for (double lambda : {0.0, 0.1, 1.0, 4.0, 30.0, 500.0}) {
      const double dist = frobenius_distance(regularized_ls(d, phi, lambda), phi);
      EXPECT_LE(dist, prev + 1e-12);
      prev = dist;
    }
  }
}

TEST(RegularizedLs, ConsistentAsDataGrows) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix theta = oracle::random_matrix(rng, 2, 3, 0.5);
    const auto d = synthetic(rng, theta, 4000, 0.05);
    const Matrix phi = oracle::random_matrix(rng, 2, 3);
    for (double lambda : {0.0, 1.0, 10.0, 100.0})
      EXPECT_LE(frobenius_distance(regularized_ls(d, phi, lambda), theta), 0.02 + 2.0 * lambda / 4000.0 * 3.0)
          << "lambda " << lambda;
  }
}

TEST(UnregularizedLs, ExactFitOnNoiselessData) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix theta = oracle::random_matrix(rng, 3, 5);
    const auto f = unregularized_ls(synthetic(rng, theta, 8, 0.0));
    EXPECT_FALSE(f.rank_deficient);
    EXPECT_EQ(f.rank, 5);
    EXPECT_LE(frobenius_distance(f.theta, theta), 1e-10);
  }
}

TEST(UnregularizedLs, RankDeficientMinimumNorm) {
  const auto f = unregularized_ls(make_data((Matrix(2, 2) << 1, 1, 1, 1).finished(), (Matrix(2, 1) << 0.7, 0.7).finished()));
  EXPECT_TRUE(f.rank_deficient);
  EXPECT_EQ(f.rank, 1);
  EXPECT_NEAR(f.theta(0, 0), 0.35, 1e-12);
  EXPECT_NEAR(f.theta(0, 1), 0.35, 1e-12);
  EXPECT_NEAR(std::abs(f.null_direction(0) + f.null_direction(1)), 0.0, 1e-12);
}

TEST(UnregularizedLs, AgreesWithZeroLambda) {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = synthetic(rng, oracle::random_matrix(rng, 2, 3), 10, 0.4);
    EXPECT_LE(frobenius_distance(unregularized_ls(d).theta, regularized_ls(d, oracle::random_matrix(rng, 2, 3), 0.0)),
              1e-10);
  }
}

TEST(RegressionData, FromStreamShiftsTargets) {
  const std::vector<Vector> y{vscalar(1), vscalar(2), vscalar(3)};
  const std::vector<Vector> ub{vscalar(-1), vscalar(-2)};
  const auto d = RegressionData::from_stream(y, ub, 2);
  EXPECT_EQ(d.X, (Matrix(2, 2) << 1, -1, 2, -2).finished());
  EXPECT_EQ(d.Y, (Matrix(2, 1) << 2, 3).finished());
  EXPECT_THROW(RegressionData::from_stream(y, ub, 3), DimensionError);
}

TEST(Constants, JStarMatchesLiteralSearch) {
  for (int n : {1, 2, 3})
    for (int m : {1, 2})
      for (long T : {64L, 512L, 4096L})
        for (double R : {0.0, 0.01, 0.05}) {
          const auto c = compute_constants(n, m, T, 20, 0.1, R, 1.0);
          EXPECT_EQ(c.j_star, oracle::j_star_literal(n, m, T, 20, 0.1, R));
          EXPECT_EQ(c.H, c.j_star * (n + 1) * m + n);
          EXPECT_DOUBLE_EQ(c.gamma, 1.0 / ((n + 1) * m));
          EXPECT_DOUBLE_EQ(c.lambda, std::pow(static_cast<double>(T), 0.25));
          EXPECT_DOUBLE_EQ(c.delta_tilde, 0.1 / (40.0 * std::log(2.0 * T)));
        }
}

TEST(Constants, SmallestJIsMinimal) {
  for (double rhs : {0.5, 4.0, 7.0, 9.0, 1234.5})
    for (Index nc : {1, 2, 3, 6}) {
      const long j = smallest_j(rhs, nc);
      EXPECT_GE(static_cast<double>(j * nc), rhs);
      if (j > 1) EXPECT_LT(static_cast<double>((j - 1) * nc), rhs);
    }
}

TEST(Constants, Overrides) {
  const auto c = compute_constants(2, 1, 256, 20, 0.1, 0.05, 1.0, 40L, 2.5);
  EXPECT_EQ(c.H, 40);
  EXPECT_TRUE(c.H_overridden);
  EXPECT_DOUBLE_EQ(c.lambda, 2.5);
  EXPECT_DOUBLE_EQ(c.c_p(3), 1.0 / std::sqrt(160.0));
  EXPECT_THROW(compute_constants(2, 1, 256, 20, 0.1, 0.05, 1.0, 0L), ConfigError);
  EXPECT_THROW(compute_constants(2, 1, 256, 20, 1.5, 0.05, 1.0), ConfigError);
  EXPECT_THROW(compute_constants(0, 1, 256, 20, 0.1, 0.05, 1.0), ConfigError);
}

TEST(ConfidenceRadius, MatchesLiteralFormula) {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + trial % 3, m = 1 + trial % 2;
    const auto c = compute_constants(n, m, 1024, 10, 0.05, 0.002 * (1 + trial % 4), 1.5);
    ASSERT_GT(c.gamma_y, 0);
    const Matrix ts = oracle::random_matrix(rng, n, n + m), phi = oracle::random_matrix(rng, n, n + m);
    const long t = 10 + 7 * trial;
    const double cp = c.c_p(1 + trial % 3);
    EXPECT_NEAR(confidence_radius(c, cp, t, ts, phi),
                oracle::beta_formula(n, m, c.R, c.S, c.delta_tilde, c.gamma, c.gamma_y, cp, t, c.lambda,
                                     (ts - phi).norm()),
                1e-10);
  }
}

TEST(ConfidenceRadius, ZeroLambdaScalesAsInverseRootT) {
  const auto c = compute_constants(2, 1, 512, 20, 0.1, 0.05, 1.0, std::nullopt, 0.0);
  const Matrix a = Matrix::Ones(2, 3), b = Matrix::Zero(2, 3);
  const double b1 = confidence_radius(c, c.c_p(2), 50, a, b), b2 = confidence_radius(c, c.c_p(2), 100, a, b);
  EXPECT_NEAR(b2 / b1, 1.0 / std::sqrt(2.0), 1e-13);
  EXPECT_NEAR(b1, c.R_tilde / std::sqrt(c.gamma * c.c_p(2) * 50), 1e-13);
}

TEST(ConfidenceRadius, NonPositiveGammaYIsUnbounded) {
  auto c = compute_constants(1, 1, 512, 20, 0.1, 0.05, 1.0);
  c.gamma_y = -0.3;
  EXPECT_TRUE(std::isinf(confidence_radius(c, 0.2, 10, scalar(1), scalar(0))));
  // no prior error: the second term vanishes regardless
  EXPECT_TRUE(std::isfinite(confidence_radius(c, 0.2, 10, scalar(1), scalar(1))));
  EXPECT_THROW(confidence_radius(c, 0.2, 0, scalar(1), scalar(0)), Error);
}

TEST(ConfidenceRadius, AlgorithmVariantUsesBound) {
  auto c = compute_constants(1, 1, 512, 20, 0.1, 0.05, 1.7);
  c.beta_variant = BetaVariant::algorithm;
  const double first = c.R_tilde / std::sqrt(c.gamma * 0.25 * 40);
  EXPECT_NEAR(confidence_radius(c, 0.25, 40, scalar(0.3), scalar(0.1)), first + c.lambda * 1.7 / c.gamma_y, 1e-12);
}

TEST(ConfidenceSet, EntireIsCenteredAtProjectedPrior) {
  const auto set = scalar_set();
  const Matrix phi = (Matrix(1, 2) << 3.0, 0.0).finished();
  const auto cs = ConfidenceSet::entire(set, phi);
  EXPECT_TRUE(cs.whole);
  EXPECT_LE(cs.center.norm(), set.S + 1e-12);
  EXPECT_TRUE(cs.contains((Matrix(1, 2) << -0.9, -1.0).finished()));
  EXPECT_FALSE(cs.contains((Matrix(1, 2) << 0.99, 1.0).finished()));  // unstable
}

TEST(Select, SingletonCandidateWins) {
  const Matrix th = (Matrix(1, 2) << 0.5, 1.0).finished();
  const auto r = select_from_candidates({th}, th, vscalar(0.8), 0.1, 3, 9, kCost, kBox);
  EXPECT_EQ(r.winner, 0u);
  EXPECT_EQ(r.theta_hat, th);
  EXPECT_LE(std::abs(r.x_hat(0) - 0.8), 0.1 + 1e-12);
}

TEST(Select, NeverWorseThanObservedStateAtCenter) {
  std::mt19937_64 rng(89);
  const auto set = scalar_set();
  for (int trial = 0; trial < 20; ++trial) {
    ConfidenceSet cs;
    cs.center = (Matrix(1, 2) << 0.5, 1.0).finished() + oracle::random_matrix(rng, 1, 2, 0.05);
    cs.radius = 0.2;
    cs.ambient = set;
    const Vector y = oracle::random_matrix(rng, 1, 1, 1.5);
    SelectOptions opt;
    opt.k_theta = 6;
    const auto r = select(cs, y, 0.3, 1, 12, kCost, kBox, opt);
    const double ref = window_solution(outer::project_theta(cs.center, set), y, 1, 12, kCost, kBox, {}).objective;
    EXPECT_LE(r.cost, ref + 1e-12);
    EXPECT_LE((r.x_hat - y).norm(), 0.3 + 1e-12);
    EXPECT_TRUE(cs.contains(r.theta_hat));
    for (const auto& cand : r.candidates) EXPECT_TRUE(cs.contains(cand));
  }
}

TEST(Select, EnumerationOracleOverThreeByThree) {
  const std::vector<Matrix> thetas{(Matrix(1, 2) << 0.5, 1.0).finished(), (Matrix(1, 2) << 0.2, 0.8).finished(),
                                   (Matrix(1, 2) << 0.7, 1.3).finished()};
  const std::vector<Vector> xs{vscalar(0.6), vscalar(0.9), vscalar(1.2)};
  const auto r = select_from_candidates(thetas, thetas[0], vscalar(0.9), 0.3, 2, 8, kCost, kBox, {}, &xs);
  // direct evaluation of each (theta, x) pair through the dense oracle, box inactive at these scales
  double best = std::numeric_limits<double>::infinity();
  std::size_t bi = 0, bx = 0;
  for (std::size_t i = 0; i < thetas.size(); ++i)
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const auto sol = oracle::box_enumeration(thetas[i].leftCols(1), thetas[i].rightCols(1), xs[k], kCost, 2, 7, -1, 1);
      ASSERT_TRUE(sol.has_value());
      if (sol->objective < best) {
        best = sol->objective;
        bi = i;
        bx = k;
      }
    }
  EXPECT_EQ(r.winner, bi);
  EXPECT_NEAR(r.x_hat(0), xs[bx](0), 0.0);
  EXPECT_NEAR(r.cost, best, 1e-9);
}

TEST(Select, TieBreaksTowardCenter) {
  const Matrix a = (Matrix(1, 2) << 0.5, 1.0).finished();
  const auto r = select_from_candidates({a, a, a}, a, vscalar(0.4), 0.0, 1, 5, kCost, kBox);
  EXPECT_EQ(r.winner, 0u);
}

TEST(OptimizeXhat, NoWorseThanGridOnBall) {
  std::mt19937_64 rng(144);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix th = (Matrix(1, 2) << 0.3 + 0.06 * trial, 1.0).finished();
    const Vector y = oracle::random_matrix(rng, 1, 1, 2.0);
    const double eps = 0.4;
    SelectOptions opt;
    const auto xr = optimize_xhat(th, y, eps, 1, 10, kCost, kBox, opt);
    const auto grid = oracle::grid_min(
        [&](const std::vector<double>& v) {
          return window_solution(th, vscalar(y(0) + v[0]), 1, 10, kCost, kBox, {}).objective;
        },
        1, -eps, eps, 1e-3);
    EXPECT_LE(xr.cost, grid.first + 1e-9);
    EXPECT_LE(std::abs(xr.x(0) - y(0)), eps + 1e-12);
  }
}

TEST(SelectCandidates, CenterFirstAndAllInside) {
  linsys::ThetaSet set;
  set.n = 2;
  set.m = 1;
  set.S = 3.0;
  set.rho_max = 0.95;
  ConfidenceSet cs;
  cs.center = (Matrix(2, 3) << 0.8, 0.1, 0, 0, 0.7, 1).finished();
  cs.radius = 0.3;
  cs.ambient = set;
  const auto c = select_candidates(cs, 10);
  ASSERT_FALSE(c.empty());
  EXPECT_LE(frobenius_distance(c.front(), cs.center), 1e-12);
  for (const auto& th : c) EXPECT_TRUE(cs.contains(th));
  EXPECT_LE(c.size(), 10u);
  cs.radius = 0.0;
  EXPECT_EQ(select_candidates(cs, 10).size(), 1u);
  EXPECT_THROW(select_candidates(cs, 0), ConfigError);
}
