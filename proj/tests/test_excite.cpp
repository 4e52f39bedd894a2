#include "metarhc/excite.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace metarhc;
using namespace metarhc::excite;

namespace {

Vector v(std::initializer_list<double> xs) {
  Vector out(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) out(i++) = x;
  return out;
}

NullDirection dir_with(const Vector& u_perp) {
  NullDirection d;
  d.u_perp = u_perp;
  d.w_perp = u_perp;
  d.e_perp_zero = u_perp.norm() < 1e-10;
  return d;
}

double smin(const Matrix& M) {
  Eigen::JacobiSVD<Matrix> svd(M);
  return svd.singularValues()(svd.singularValues().size() - 1);
}

}  // namespace

TEST(NullDirection, EmptyRetainedPrefersLastBlock) {
  const auto d = null_direction(Matrix(4, 0), 2);
  EXPECT_NEAR(d.w_perp.head(2).norm(), 0.0, 1e-14);
  EXPECT_NEAR(d.u_perp.norm(), 1.0, 1e-14);
  EXPECT_FALSE(d.e_perp_zero);
}

TEST(NullDirection, OrthogonalToRetained) {
  const auto d = null_direction(v({1.0, 1.0}), 1);
  EXPECT_NEAR(std::abs(d.w_perp(0)), 1.0 / std::sqrt(2.0), 1e-14);
  EXPECT_NEAR(d.w_perp(0) + d.w_perp(1), 0.0, 1e-14);
}

TEST(NullDirection, TwoDimensionalComplement) {
  const auto d = null_direction(v({1.0, 0.0}), 1);
  EXPECT_NEAR(std::abs(d.w_perp(1)), 1.0, 1e-14);
  EXPECT_NEAR(std::abs(d.u_perp(0)), 1.0, 1e-14);
  EXPECT_FALSE(d.e_perp_zero);
}

TEST(NullDirection, SquareHistoryWithFirstColumnRemoved) {
  std::mt19937_64 rng(40);
  for (Index q : {2, 3, 4, 6}) {
    const Matrix M = oracle::random_matrix(rng, q, q);
    const auto d = null_direction(M.rightCols(q - 1), q % 2 == 0 ? 2 : 1);
    EXPECT_NEAR(d.w_perp.norm(), 1.0, 1e-12);
    EXPECT_LE((M.rightCols(q - 1).transpose() * d.w_perp).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(NullDirection, ComplementInsideFirstBlock) {
  // retained span {e2}: the only orthogonal direction is e1, whose last block is zero
  const auto d = null_direction(v({0.0, 1.0}), 1);
  EXPECT_TRUE(d.e_perp_zero);
  EXPECT_NEAR(std::abs(d.w_perp(0)), 1.0, 1e-14);
}

TEST(NullDirection, FullRankHasNoDirection) {
  const auto d = null_direction(Matrix::Identity(2, 2), 1);
  EXPECT_TRUE(d.e_perp_zero);
  EXPECT_EQ(d.w_perp.norm(), 0.0);
  EXPECT_THROW(null_direction(Matrix::Identity(3, 3), 2), DimensionError);
}

TEST(NullDirection, RandomRetainedIsOrthogonal) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1 + trial % 3, m = 1 + trial % 2, q = (n + 1) * m;
    const Matrix R = oracle::random_matrix(rng, q, trial % q);
    const auto d = null_direction(R, m);
    EXPECT_NEAR(d.w_perp.norm(), 1.0, 1e-12);
    if (R.cols()) EXPECT_LE((R.transpose() * d.w_perp).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Perturb, CaseTable) {
  const double cp = 0.25, s = 0.5;
  // no usable direction: push along u
  auto r = perturb(v({2.0}), dir_with(v({0.0})), 0.0, cp);
  EXPECT_EQ(r.which, Case::no_perp);
  EXPECT_DOUBLE_EQ(r.du(0), s);
  // u orthogonal to e_perp: sign follows g, with g = 0 taken as positive
  r = perturb(v({1.0, 0.0}), dir_with(v({0.0, 1.0})), -0.3, cp);
  EXPECT_EQ(r.which, Case::perp);
  EXPECT_DOUBLE_EQ(r.du(1), -s);
  r = perturb(v({1.0, 0.0}), dir_with(v({0.0, 1.0})), 0.0, cp);
  EXPECT_DOUBLE_EQ(r.du(1), s);
  // g cancels g_perp, large u: single flip
  r = perturb(v({3.0}), dir_with(v({1.0})), -5.0, cp);
  EXPECT_EQ(r.which, Case::flip);
  EXPECT_DOUBLE_EQ(r.du(0), -s);
  // g cancels g_perp, small u: double flip
  r = perturb(v({0.4}), dir_with(v({1.0})), -1.0, cp);
  EXPECT_EQ(r.which, Case::double_flip);
  EXPECT_DOUBLE_EQ(r.du(0), -2.0 * s);
  // signs agree: along u
  r = perturb(v({0.4}), dir_with(v({1.0})), 1.0, cp);
  EXPECT_EQ(r.which, Case::along);
  EXPECT_DOUBLE_EQ(r.du(0), s);
}

TEST(Perturb, ZeroInputUsesFirstAxis) {
  const auto r = perturb(v({0.0, 0.0}), dir_with(v({0.0, 0.0})), 0.0, 0.16);
  EXPECT_DOUBLE_EQ(r.du(0), 0.4);
  EXPECT_DOUBLE_EQ(r.du(1), 0.0);
}

TEST(Perturb, BudgetNeverExceedsTwiceRootCp) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 2000; ++trial) {
    const Index m = 1 + trial % 3;
    const double cp = 0.01 + 0.001 * (trial % 50);
    const Vector u = oracle::random_matrix(rng, m, 1, 0.5);
    const auto r = perturb(u, dir_with(oracle::random_matrix(rng, m, 1)), oracle::random_matrix(rng, 1, 1)(0), cp);
    EXPECT_LE(r.du.norm(), 2.0 * std::sqrt(cp) + 1e-14);
  }
}

TEST(Exciter, ScalarReplayMatchesClosedFormAlignment) {
  // n = m = 1: the retained column [a; b] has complement [-b; a]
  std::mt19937_64 rng(12);
  Exciter ex(1, 1);
  ex.start_interval(1, 0.09);
  std::vector<double> ub;
  for (int k = 0; k < 20; ++k) {
    const Vector u = k % 5 == 0 ? Vector::Zero(1) : oracle::random_matrix(rng, 1, 1, 0.3);
    const auto r = ex.next(u);
    ub.push_back(u(0) + r.du(0));
    EXPECT_NEAR(ex.interval_inputs().back()(0), ub.back(), 0.0);
    if (k == 0) {
      EXPECT_EQ(r.which, Case::lead_in);
      continue;
    }
    const std::size_t col = static_cast<std::size_t>(k - 1);
    double expected;
    if (col == 0) {
      expected = std::abs(ub[1]);
    } else {
      const double a = ub[col - 1], b = ub[col];
      expected = std::abs(-b * ub[col] + a * ub[col + 1]) / std::hypot(a, b);
    }
    ASSERT_TRUE(ex.has_alignment());
    EXPECT_NEAR(std::abs(ex.last_alignment()), expected, 1e-12) << "k=" << k;
    EXPECT_GT(std::abs(ex.last_alignment()), 1e-12) << "k=" << k;
  }
}

TEST(Exciter, BlocksStayFullRank) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 60; ++trial) {
    const Index n = 1 + trial % 3, m = 1 + (trial / 3) % 2;
    Exciter ex(n, m);
    const double cp = 1.0 / std::sqrt(10.0 + trial);
    ex.start_interval(1, cp);
    for (int k = 0; k < 40; ++k) {
      Vector u;
      switch (k % 4) {
        case 0: u = Vector::Zero(m); break;
        case 1: u = Vector::Constant(m, 0.7); break;
        default: u = oracle::random_matrix(rng, m, 1, 0.4);
      }
      const auto r = ex.next(u);
      EXPECT_LE(r.du.norm(), 2.0 * std::sqrt(cp) + 1e-14);
      const Matrix blk = ex.latest_block();
      if (blk.cols()) EXPECT_GT(smin(blk), 1e-9) << "trial " << trial << " k=" << k;
    }
    EXPECT_EQ(ex.complete_columns(), 40 - n);
  }
}

TEST(Exciter, RestartsAtInterval) {
  Exciter ex(2, 1);
  ex.start_interval(1, 0.5);
  for (int k = 0; k < 5; ++k) ex.next(Vector::Ones(1));
  ex.start_interval(2, 0.25);
  EXPECT_EQ(ex.complete_columns(), 0);
  EXPECT_EQ(ex.next(Vector::Ones(1)).which, Case::lead_in);
  EXPECT_EQ(ex.interval(), 2);
  EXPECT_THROW(ex.start_interval(3, 0.0), Error);
  EXPECT_THROW(ex.next(Vector::Ones(2)), DimensionError);
}

TEST(CertifyPe, RepeatedOrthonormalBasis) {
  std::mt19937_64 rng(2);
  const Matrix Q = oracle::random_matrix(rng, 4, 4).householderQr().householderQ();
  std::vector<Vector> z;
  for (int r = 0; r < 3; ++r)
    for (Index i = 0; i < 4; ++i) z.push_back(Q.col(i));
  const auto c = certify_pe(z, 2, 0.25, 1.0, 12);
  EXPECT_NEAR(c.lambda_min, 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(c.threshold, 3.0);
  EXPECT_TRUE(c.lambda_min >= c.threshold - 1e-12);
}

TEST(CertifyPe, ZeroHistoryFails) {
  const auto c = certify_pe({Vector::Zero(3), Vector::Zero(3)}, 1, 0.5, 0.1, 2);
  EXPECT_FALSE(c.pass);
  EXPECT_THROW(certify_pe({}, 1, 0.5, 0.1, 2), Error);
}

TEST(CertifyPe, OrthogonalBlocksWithLargeColumnsPass) {
  // every q consecutive columns orthogonal with norms >= sqrt(c_p) gives
  // lambda_min >= c_p per block, hence gamma c_p t over t = r q columns
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 1 + trial % 3, m = 1 + trial % 2, q = (n + 1) * m;
    const double cp = 0.05 + 0.01 * trial;
    std::vector<Vector> z;
    const int blocks = 1 + trial % 5;
    for (int b = 0; b < blocks; ++b) {
      const Matrix Q = oracle::random_matrix(rng, q, q).householderQr().householderQ();
      for (Index i = 0; i < q; ++i) z.push_back(Q.col(i) * std::sqrt(cp) * (1.0 + 0.5 * (i % 2)));
    }
    const long t = static_cast<long>(z.size());
    const auto c = certify_pe(z, 1, 1.0 / static_cast<double>(q), cp, t);
    EXPECT_GE(c.lambda_min, c.threshold * (1.0 - 1e-12));
  }
}

TEST(CertifyPe, FullRankLargeColumnsAloneAreNotEnough) {
  // nearly collinear full-rank columns with norm sqrt(c_p)
  const double cp = 1.0, e = 0.05;
  std::vector<Vector> z{v({1.0, 0.0}), v({std::sqrt(1 - e * e), e})};
  EXPECT_FALSE(certify_pe(z, 1, 0.5, cp, 2).pass);
}

TEST(ProbingSequence, Examples) {
  EXPECT_EQ(probing_sequence(1, 1, 1), v({1.0}));
  EXPECT_EQ(probing_sequence(2, 1, 1), v({0.0}));
  EXPECT_EQ(probing_sequence(3, 1, 1), v({1.0}));
  EXPECT_EQ(probing_sequence(1, 1, 2), v({0.0, 1.0}));
  EXPECT_EQ(probing_sequence(3, 1, 2), v({1.0, 0.0}));
  EXPECT_EQ(probing_sequence(5, 1, 2), v({0.0, 1.0}));
  EXPECT_THROW(probing_sequence(0, 1, 1), Error);
}

TEST(ProbingSequence, StackedColumnsExciteEveryDirection) {
  for (Index n : {1, 2, 3})
    for (Index m : {1, 2}) {
      const Index q = (n + 1) * m;
      const long len = 4 * q * m + n;
      std::vector<Vector> u;
      for (long k = 1; k <= len; ++k) u.push_back(probing_sequence(k, n, m));
      Matrix W(q, len - n);
      for (long c = 0; c < len - n; ++c)
        for (Index b = 0; b <= n; ++b) W.block(b * m, c, m, 1) = u[static_cast<std::size_t>(c + b)];
      EXPECT_GT(smin(W), 0.5) << "n=" << n << " m=" << m;
    }
}
