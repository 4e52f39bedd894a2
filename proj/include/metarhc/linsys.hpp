#pragma once

// Linear plant x_{t+1} = A x_t + B u_t observed through bounded additive noise,
// plus the structural quantities (characteristic polynomial, G matrix) used to
// reason about excitation.

#include "metarhc/common.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <optional>
#include <random>
#include <vector>

namespace metarhc::linsys {

struct SystemParams {
  Matrix A;
  Matrix B;

  SystemParams() = default;
  SystemParams(Matrix a, Matrix b) : A(std::move(a)), B(std::move(b)) {
    require_dims(A.rows() == A.cols(), "A must be square");
    require_dims(B.rows() == A.rows(), "B must have n rows");
    require_dims(A.rows() > 0 && B.cols() > 0, "n and m must be positive");
  }

  Index n() const { return A.rows(); }
  Index m() const { return B.cols(); }

  /// theta = [A, B], n x (n+m).
  Matrix theta() const {
    Matrix t(n(), n() + m());
    t << A, B;
    return t;
  }

  static SystemParams from_theta(const Matrix& theta, Index n) {
    require_dims(theta.rows() == n && theta.cols() > n, "theta must be n x (n+m)");
    return SystemParams(theta.leftCols(n), theta.rightCols(theta.cols() - n));
  }
};

inline double spectral_radius(const Matrix& A) {
  require_dims(A.rows() == A.cols(), "spectral_radius needs a square matrix");
  Eigen::EigenSolver<Matrix> es(A, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// [B, AB, ..., A^{n-1}B]
inline Matrix controllability_matrix(const Matrix& A, const Matrix& B) {
  const Index n = A.rows();
  const Index m = B.cols();
  Matrix C(n, n * m);
  Matrix blk = B;
  for (Index k = 0; k < n; ++k) {
    C.middleCols(k * m, m) = blk;
    blk = A * blk;
  }
  return C;
}

inline Index controllability_rank(const Matrix& A, const Matrix& B, double tol = 1e-9) {
  Eigen::JacobiSVD<Matrix> svd(controllability_matrix(A, B));
  const auto& s = svd.singularValues();
  const double scale = std::max(1.0, s.size() > 0 ? s(0) : 0.0);
  Index r = 0;
  for (Index i = 0; i < s.size(); ++i)
    if (s(i) > tol * scale) ++r;
  return r;
}

inline bool is_controllable(const SystemParams& sys) {
  return controllability_rank(sys.A, sys.B) == sys.n();
}

inline Vector step(const SystemParams& sys, const Vector& x, const Vector& u) {
  require_dims(x.size() == sys.n(), "step: x has wrong size");
  require_dims(u.size() == sys.m(), "step: u has wrong size");
  return sys.A * x + sys.B * u;
}

/// Coefficients [d_0, ..., d_n] with det(zI - A) = sum_k d_k z^{n-k}, d_0 = 1.
/// Faddeev-LeVerrier recurrence.
inline Vector char_poly_coeffs(const Matrix& A) {
  require_dims(A.rows() == A.cols(), "char_poly_coeffs needs a square matrix");
  const Index n = A.rows();
  Vector d = Vector::Zero(n + 1);
  d(0) = 1.0;
  Matrix Mk = Matrix::Identity(n, n);
  for (Index k = 1; k <= n; ++k) {
    if (k > 1) Mk = A * Mk + d(k - 1) * Matrix::Identity(n, n);
    d(k) = -(A * Mk).trace() / static_cast<double>(k);
  }
  return d;
}

struct GMatrix {
  Matrix Q;  // [q_n, ..., q_1], n x nm
  Matrix H;  // [d_n I, ..., d_1 I], m x nm
  Matrix G;  // [[Q, 0], [H, I_m]]
  double c_g = 0.0;
};

inline GMatrix g_matrix(const SystemParams& sys) {
  const Index n = sys.n();
  const Index m = sys.m();
  const Vector d = char_poly_coeffs(sys.A);

  std::vector<Matrix> powB;  // A^{l} B, l = 0..n-1
  powB.reserve(static_cast<std::size_t>(n));
  Matrix blk = sys.B;
  for (Index l = 0; l < n; ++l) {
    powB.push_back(blk);
    blk = sys.A * blk;
  }

  GMatrix out;
  out.Q = Matrix::Zero(n, n * m);
  out.H = Matrix::Zero(m, n * m);
  for (Index slot = 0; slot < n; ++slot) {
    const Index j = n - slot;  // slot 0 holds q_n
    Matrix q = Matrix::Zero(n, m);
    for (Index l = 1; l <= j; ++l) q += d(j - l) * powB[static_cast<std::size_t>(l - 1)];
    out.Q.middleCols(slot * m, m) = q;
    out.H.middleCols(slot * m, m) = d(j) * Matrix::Identity(m, m);
  }
  out.G = Matrix::Zero(n + m, (n + 1) * m);
  out.G.topLeftCorner(n, n * m) = out.Q;
  out.G.bottomLeftCorner(m, n * m) = out.H;
  out.G.bottomRightCorner(m, m) = Matrix::Identity(m, m);

  Eigen::SelfAdjointEigenSolver<Matrix> es(out.G * out.G.transpose(), Eigen::EigenvaluesOnly);
  out.c_g = es.eigenvalues().minCoeff();
  if (std::abs(out.c_g) < 1e-13) out.c_g = 0.0;
  return out;
}

/// Known parameter set: Frobenius ball of radius S intersected with
/// {rho(A) <= rho_max} and controllability. An optional anchor describes the
/// task distribution (draws lie within task_radius of it).
struct ThetaSet {
  Index n = 1;
  Index m = 1;
  double S = 2.0;
  double rho_max = 0.95;
  std::optional<SystemParams> anchor;
  double task_radius = 0.0;
  int max_rejections = 10000;

  bool contains(const SystemParams& sys, double tol = 1e-12) const {
    if (sys.n() != n || sys.m() != m) return false;
    if (sys.theta().norm() > S + tol) return false;
    if (spectral_radius(sys.A) > rho_max + tol) return false;
    return is_controllable(sys);
  }

  void validate() const {
    if (n <= 0 || m <= 0) throw ConfigError("theta set: n and m must be positive");
    if (!(S > 0)) throw ConfigError("theta set: S must be positive");
    if (!(rho_max > 0 && rho_max < 1)) throw ConfigError("theta set: rho_max must lie in (0,1)");
    if (task_radius < 0) throw ConfigError("theta set: task_radius must be nonnegative");
    if (max_rejections <= 0) throw ConfigError("theta set: max_rejections must be positive");
    if (anchor) {
      if (anchor->n() != n || anchor->m() != m) throw ConfigError("theta set: anchor has wrong dimensions");
      if (!contains(*anchor)) throw ConfigError("theta set: anchor is not a member of the set");
    }
  }
};

namespace detail {

inline Vector uniform_in_ball(std::mt19937_64& rng, Index dim, double radius) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vector d(dim);
  for (Index i = 0; i < dim; ++i) d(i) = normal(rng);
  const double len = d.norm();
  if (len == 0.0) return Vector::Zero(dim);
  const double r = radius * std::pow(unif(rng), 1.0 / static_cast<double>(dim));
  return d * (r / len);
}

}  // namespace detail

/// Draws a member of the set. With an anchor the draw is uniform in the
/// Frobenius ball of radius task_radius around it, otherwise uniform in the
/// ball of radius S; rejection-resampled until every invariant holds.
inline SystemParams sample_theta(const ThetaSet& set, std::uint64_t seed) {
  set.validate();
  if (set.anchor && set.task_radius == 0.0) return *set.anchor;

  std::mt19937_64 rng(seed);
  const Index n = set.n;
  const Index dim = set.n * (set.n + set.m);
  const Matrix center = set.anchor ? set.anchor->theta() : Matrix::Zero(n, n + set.m);
  const double radius = set.anchor ? set.task_radius : set.S;

  for (int attempt = 0; attempt < set.max_rejections; ++attempt) {
    const Vector delta = detail::uniform_in_ball(rng, dim, radius);
    Matrix theta = center + Eigen::Map<const Matrix>(delta.data(), n, n + set.m);
    SystemParams cand = SystemParams::from_theta(theta, n);
    if (theta.norm() > set.S) continue;
    if (!(spectral_radius(cand.A) < set.rho_max)) continue;
    if (!is_controllable(cand)) continue;
    return cand;
  }
  throw ConfigError("sample_theta: no member found after " + std::to_string(set.max_rejections) +
                    " rejections; the theta set looks infeasible");
}

struct NoiseModel {
  double R = 0.0;      // per-component standard deviation before truncation
  double eps_c = 0.0;  // Euclidean truncation bound
  std::uint64_t seed = 0;
};

/// Stateful i.i.d. noise source. Draws are per-component N(0, R^2) vectors,
/// rejected and redrawn while their norm exceeds eps_c.
class NoiseStream {
 public:
  NoiseStream(const NoiseModel& model, Index n) : model_(model), n_(n), rng_(model.seed) {
    if (model.R < 0 || model.eps_c < 0) throw ConfigError("noise: R and eps_c must be nonnegative");
  }

  Vector sample() {
    if (model_.eps_c == 0.0 || model_.R == 0.0) return Vector::Zero(n_);
    Vector e(n_);
    for (int attempt = 0; attempt < 1000000; ++attempt) {
      for (Index i = 0; i < n_; ++i) e(i) = model_.R * normal_(rng_);
      if (e.norm() <= model_.eps_c) return e;
    }
    throw Error("noise: truncation bound is too tight relative to R");
  }

  Vector observe(const Vector& x) {
    require_dims(x.size() == n_, "observe: state has wrong size");
    return x + sample();
  }

  const NoiseModel& model() const { return model_; }

 private:
  NoiseModel model_;
  Index n_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace metarhc::linsys
