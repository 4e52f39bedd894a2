#include "metarhc/outer.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace metarhc;
using namespace metarhc::outer;

namespace {

Matrix row(double a, double b) { return (Matrix(1, 2) << a, b).finished(); }

linsys::ThetaSet set1(double S = 2.0, double rho = 0.95) {
  linsys::ThetaSet s;
  s.n = 1;
  s.m = 1;
  s.S = S;
  s.rho_max = rho;
  return s;
}

linsys::ThetaSet set2(double S = 3.0, double rho = 0.95) {
  linsys::ThetaSet s;
  s.n = 2;
  s.m = 1;
  s.S = S;
  s.rho_max = rho;
  return s;
}

// geometric median by Weiszfeld iteration
Matrix weiszfeld(const std::vector<Matrix>& pts) {
  Matrix x = Matrix::Zero(pts[0].rows(), pts[0].cols());
  for (const auto& p : pts) x += p / static_cast<double>(pts.size());
  for (int it = 0; it < 5000; ++it) {
    Matrix num = Matrix::Zero(x.rows(), x.cols());
    double den = 0.0;
    for (const auto& p : pts) {
      const double d = std::max(frobenius_distance(p, x), 1e-14);
      num += p / d;
      den += 1.0 / d;
    }
    const Matrix nx = num / den;
    if (frobenius_distance(nx, x) < 1e-13) return nx;
    x = nx;
  }
  return x;
}

}  // namespace

TEST(EpisodeAnchor, FarthestFitWins) {
  const std::vector<Matrix> fits{row(0.1, 0), row(0.5, 0), row(-0.2, 0)};
  EXPECT_EQ(episode_anchor_index(fits, row(0, 0)), 1u);
  EXPECT_EQ(episode_anchor(fits, row(0.4, 0)), row(-0.2, 0));
}

TEST(EpisodeAnchor, TiesGoToEarliest) {
  const std::vector<Matrix> fits{row(1, 0), row(-1, 0), row(0, 1)};
  EXPECT_EQ(episode_anchor_index(fits, row(0, 0)), 0u);
  EXPECT_THROW(episode_anchor_index({}, row(0, 0)), Error);
}

TEST(MetaUpdate, UnitStepTowardAnchor) {
  const auto s = meta_update(MetaState::initial(row(0, 0)), row(2, 0), set1(5.0, 2.0));
  EXPECT_NEAR(frobenius_distance(s.last_psi, row(1, 0)), 0.0, 1e-15);
  EXPECT_NEAR(frobenius_distance(s.phi, row(1, 0)), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(s.losses.at(0), 2.0);
  EXPECT_DOUBLE_EQ(s.cumulative_loss, 2.0);
  EXPECT_EQ(s.episode, 2);
}

TEST(MetaUpdate, AnchorAtPriorIsFixedPoint) {
  const Matrix phi = row(0.4, 1.0);
  const auto s = meta_update(MetaState::initial(phi), phi, set1());
  EXPECT_EQ(s.phi, phi);
  EXPECT_DOUBLE_EQ(s.losses.at(0), 0.0);
}

TEST(MetaUpdate, FourthEpisodeHalvesStep) {
  auto st = MetaState::initial(row(0, 0));
  st.episode = 4;
  const auto s = meta_update(st, row(0, 3), set1(5.0, 2.0));
  EXPECT_NEAR(frobenius_distance(s.phi, row(0, 0.5)), 0.0, 1e-15);
  st.episode = 0;
  EXPECT_THROW(meta_update(st, row(0, 3), set1()), Error);
}

TEST(ProjectTheta, ShrinksUnstableA) {
  const Matrix p = project_theta(row(2.0, 0.0), set1(10.0, 0.95));
  EXPECT_NEAR(p(0, 0), 0.949, 1e-14);
}

TEST(ProjectTheta, ScalesIntoBall) {
  const Matrix p = project_theta(row(0.0, 4.0), set1(2.0, 0.95));
  EXPECT_NEAR(p(0, 1), 2.0, 1e-14);
  const Matrix in = row(0.3, -0.4);
  EXPECT_EQ(project_theta(in, set1()), in);
  EXPECT_THROW(project_theta(Matrix::Zero(2, 2), set1()), DimensionError);
}

TEST(ProjectTheta, OutputSatisfiesNormAndSpectralBounds) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto set = set2(2.0 + trial % 3, 0.9);
    const Matrix p = project_theta(oracle::random_matrix(rng, 2, 3, 2.0), set);
    EXPECT_LE(p.norm(), set.S + 1e-12);
    EXPECT_LE(linsys::spectral_radius(p.leftCols(2)), set.rho_max + 1e-12);
  }
}

TEST(ProjectTheta, BallStageIsNonExpansive) {
  std::mt19937_64 rng(27);
  const auto set = set2(2.0, 1e9);
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix a = oracle::random_matrix(rng, 2, 3, 1.5), b = oracle::random_matrix(rng, 2, 3, 1.5);
    EXPECT_LE(frobenius_distance(project_theta(a, set), project_theta(b, set)), frobenius_distance(a, b) + 1e-12);
  }
}

TEST(ProjectTheta, NonExpansiveTowardPointsInTheta) {
  // the property the meta-regret argument needs: ||P(psi) - theta|| <= ||psi - theta|| for theta in Theta
  std::mt19937_64 rng(28);
  const auto set = set1(2.0, 0.95);
  int checked = 0;
  for (int trial = 0; trial < 5000 && checked < 1000; ++trial) {
    const Matrix th = oracle::random_matrix(rng, 1, 2, 0.6);
    if (th.norm() > set.S || std::abs(th(0, 0)) > set.rho_max - 1e-3) continue;
    const Matrix psi = oracle::random_matrix(rng, 1, 2, 2.0);
    EXPECT_LE(frobenius_distance(project_theta(psi, set), th), frobenius_distance(psi, th) + 1e-12);
    ++checked;
  }
  EXPECT_EQ(checked, 1000);
}

TEST(MetaUpdate, PriorStaysInSet) {
  std::mt19937_64 rng(44);
  const auto set = set2();
  auto st = MetaState::initial(Matrix::Zero(2, 3));
  for (int i = 0; i < 200; ++i) {
    st = meta_update(st, oracle::random_matrix(rng, 2, 3, 2.0), set);
    EXPECT_LE(st.phi.norm(), set.S + 1e-12);
    EXPECT_LE(linsys::spectral_radius(st.phi.leftCols(2)), set.rho_max + 1e-12);
  }
  EXPECT_EQ(st.losses.size(), 200u);
}

TEST(MetaUpdate, AverageRegretDecaysLikeInverseRootN) {
  const auto set = set2();
  const Matrix center = (Matrix(2, 3) << 0.6, 0.1, 0.0, 0.0, 0.5, 1.0).finished();
  std::vector<double> logN, logR;
  for (int N : {4, 16, 64}) {
    double total = 0.0;
    const int reps = 40;
    for (int rep = 0; rep < reps; ++rep) {
      std::mt19937_64 rng(1000 + rep);
      std::vector<Matrix> anchors;
      for (int i = 0; i < N; ++i) anchors.push_back(center + oracle::random_matrix(rng, 2, 3, 0.15));
      auto st = MetaState::initial(Matrix::Zero(2, 3));
      for (const auto& a : anchors) st = meta_update(st, a, set);
      const Matrix best = weiszfeld(anchors);
      double comparator = 0.0;
      for (const auto& a : anchors) comparator += frobenius_distance(a, best);
      total += (st.cumulative_loss - comparator) / N;
    }
    logN.push_back(std::log(static_cast<double>(N)));
    logR.push_back(std::log(total / reps));
  }
  const double slope = ((logR[2] - logR[0]) / (logN[2] - logN[0]));
  EXPECT_LE(slope, -0.4);
}
