#pragma once

// Stage costs c_t(x,u) = x'Q_t x + u'R_t u and the input polytope {u : F u <= b}.

#include "metarhc/common.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <limits>
#include <optional>
#include <vector>

namespace metarhc::qp {

/// Time-indexed quadratic stage cost. The schedule is periodic in t (1-based):
/// stage t uses entry (t-1) mod size. A single entry is a time-invariant cost.
class QuadCostSpec {
 public:
  QuadCostSpec() = default;
  QuadCostSpec(std::vector<Matrix> Q, std::vector<Matrix> R) : Q_(std::move(Q)), R_(std::move(R)) {
    if (Q_.empty() || Q_.size() != R_.size()) throw ConfigError("cost: Q and R schedules must be nonempty and equally long");
  }

  static QuadCostSpec constant(const Matrix& Q, const Matrix& R) { return QuadCostSpec({Q}, {R}); }

  const Matrix& Q(long t) const { return Q_[slot(t)]; }
  const Matrix& R(long t) const { return R_[slot(t)]; }
  std::size_t period() const { return Q_.size(); }
  const std::vector<Matrix>& Q_schedule() const { return Q_; }
  const std::vector<Matrix>& R_schedule() const { return R_; }

  double stage(long t, const Vector& x, const Vector& u) const {
    return x.dot(Q(t) * x) + u.dot(R(t) * u);
  }

  /// Q_t positive definite, R_t positive semidefinite, sizes n and m.
  void validate(Index n, Index m) const {
    if (Q_.empty()) throw ConfigError("cost: empty schedule");
    for (std::size_t k = 0; k < Q_.size(); ++k) {
      if (Q_[k].rows() != n || Q_[k].cols() != n) throw ConfigError("cost: Q must be n x n");
      if (R_[k].rows() != m || R_[k].cols() != m) throw ConfigError("cost: R must be m x m");
      if ((Q_[k] - Q_[k].transpose()).norm() > 1e-12 || (R_[k] - R_[k].transpose()).norm() > 1e-12)
        throw ConfigError("cost: Q and R must be symmetric");
      Eigen::SelfAdjointEigenSolver<Matrix> eq(Q_[k], Eigen::EigenvaluesOnly);
      if (!(eq.eigenvalues().minCoeff() > 0)) throw ConfigError("cost: Q must be positive definite");
      Eigen::SelfAdjointEigenSolver<Matrix> er(R_[k], Eigen::EigenvaluesOnly);
      if (er.eigenvalues().minCoeff() < -1e-12) throw ConfigError("cost: R must be positive semidefinite");
    }
  }

  QuadCostSpec scaled(double s) const {
    QuadCostSpec out = *this;
    for (auto& q : out.Q_) q *= s;
    for (auto& r : out.R_) r *= s;
    return out;
  }

 private:
  std::size_t slot(long t) const {
    const long p = static_cast<long>(Q_.size());
    long k = (t - 1) % p;
    if (k < 0) k += p;
    return static_cast<std::size_t>(k);
  }

  std::vector<Matrix> Q_;
  std::vector<Matrix> R_;
};

namespace detail {

// max c'z s.t. G z <= h by enumerating basic solutions. Only meant for the tiny
// LPs of polytope validation (dimension <= 4, a few dozen rows).
inline std::optional<Vector> enumerate_lp(const Vector& c, const Matrix& G, const Vector& h) {
  const Index d = c.size();
  const Index rows = G.rows();
  if (rows < d) return std::nullopt;
  std::vector<Index> pick(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) pick[static_cast<std::size_t>(i)] = i;

  std::optional<Vector> best;
  double best_val = -std::numeric_limits<double>::infinity();
  Matrix sub(d, d);
  Vector rhs(d);
  while (true) {
    for (Index i = 0; i < d; ++i) {
      sub.row(i) = G.row(pick[static_cast<std::size_t>(i)]);
      rhs(i) = h(pick[static_cast<std::size_t>(i)]);
    }
    Eigen::FullPivLU<Matrix> lu(sub);
    if (lu.isInvertible()) {
      Vector z = lu.solve(rhs);
      const double slack = ((G * z - h).array()).maxCoeff();
      const double scale = 1.0 + h.cwiseAbs().maxCoeff();
      if (slack <= 1e-9 * scale) {
        const double val = c.dot(z);
        if (val > best_val) {
          best_val = val;
          best = z;
        }
      }
    }
    // next combination
    Index i = d - 1;
    while (i >= 0 && pick[static_cast<std::size_t>(i)] == rows - d + i) --i;
    if (i < 0) break;
    ++pick[static_cast<std::size_t>(i)];
    for (Index k = i + 1; k < d; ++k) pick[static_cast<std::size_t>(k)] = pick[static_cast<std::size_t>(k - 1)] + 1;
  }
  return best;
}

}  // namespace detail

/// U = {u : F u <= b}. Construction checks that the set is nonempty (a
/// Chebyshev ball of positive radius exists) and bounded (finite LP optimum in
/// every +-coordinate direction).
class InputPolytope {
 public:
  InputPolytope() = default;
  InputPolytope(Matrix F, Vector b) : F_(std::move(F)), b_(std::move(b)) {
    if (F_.rows() == 0 || F_.cols() == 0) throw ConfigError("polytope: F must be nonempty");
    if (b_.size() != F_.rows()) throw ConfigError("polytope: b must have one entry per row of F");
    analyse();
  }

  static InputPolytope box(const Vector& lo, const Vector& hi) {
    const Index m = lo.size();
    Matrix F(2 * m, m);
    Vector b(2 * m);
    F << Matrix::Identity(m, m), -Matrix::Identity(m, m);
    b << hi, -lo;
    return InputPolytope(F, b);
  }

  const Matrix& F() const { return F_; }
  const Vector& b() const { return b_; }
  Index m() const { return F_.cols(); }
  Index rows() const { return F_.rows(); }
  const Vector& chebyshev_center() const { return center_; }
  double chebyshev_radius() const { return radius_; }

  bool contains(const Vector& u, double tol = 1e-9) const {
    return ((F_ * u - b_).array() <= tol).all();
  }

  /// sum_k max{(F u - b)_k, 0}
  double violation(const Vector& u) const {
    return (F_ * u - b_).cwiseMax(0.0).sum();
  }

  /// Induced infinity norm (max absolute row sum) of F.
  double F_inf_norm() const { return F_.cwiseAbs().rowwise().sum().maxCoeff(); }

 private:
  void analyse() {
    const Index m = F_.cols();
    const double big = 1e6;
    // Chebyshev centre: max r s.t. F_i u + r ||F_i|| <= b_i, r >= 0, |u_i| <= big.
    Matrix G(F_.rows() + 1 + 2 * m, m + 1);
    Vector h(G.rows());
    G.setZero();
    G.topLeftCorner(F_.rows(), m) = F_;
    G.block(0, m, F_.rows(), 1) = F_.rowwise().norm();
    h.head(F_.rows()) = b_;
    G(F_.rows(), m) = -1.0;
    h(F_.rows()) = 0.0;
    G.block(F_.rows() + 1, 0, m, m) = Matrix::Identity(m, m);
    G.block(F_.rows() + 1 + m, 0, m, m) = -Matrix::Identity(m, m);
    h.tail(2 * m).setConstant(big);
    Vector c = Vector::Zero(m + 1);
    c(m) = 1.0;
    auto sol = detail::enumerate_lp(c, G, h);
    if (!sol || !((*sol)(m) > 1e-12)) throw ConfigError("polytope: empty or without interior (no Chebyshev ball)");
    center_ = sol->head(m);
    radius_ = (*sol)(m);

    Matrix Gb(F_.rows() + 2 * m, m);
    Vector hb(Gb.rows());
    Gb << F_, Matrix::Identity(m, m), -Matrix::Identity(m, m);
    hb << b_, Vector::Constant(2 * m, big);
    for (Index i = 0; i < m; ++i) {
      for (double sgn : {1.0, -1.0}) {
        Vector dir = Vector::Zero(m);
        dir(i) = sgn;
        auto z = detail::enumerate_lp(dir, Gb, hb);
        if (!z || std::abs((*z)(i)) >= big * (1 - 1e-9)) throw ConfigError("polytope: set is unbounded");
      }
    }
  }

  Matrix F_;
  Vector b_;
  Vector center_;
  double radius_ = 0.0;
};

}  // namespace metarhc::qp
