#pragma once

// Per-episode identification: ridge regression toward the prior, confidence
// sets, and the joint (initial state, model) selection at interval boundaries.

#include "metarhc/common.hpp"
#include "metarhc/cost.hpp"
#include "metarhc/linsys.hpp"
#include "metarhc/outer.hpp"
#include "metarhc/qp.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>
#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace metarhc::inner {

enum class BetaVariant { interval, algorithm };  // lambda*||theta*-phi||/(gamma_y c_p t_j)  vs  lambda*S/gamma_y

struct InnerConstants {
  Index n = 1, m = 1;
  long T = 1, N = 1;
  double delta = 0.1, R = 0.0, S = 1.0;

  double lambda = 1.0;
  double delta_tilde = 0.0;
  Index n_c = 1;
  double gamma = 1.0;
  double n_c_tilde = 0.0;   // (16 n^2 R^2 / gamma)^2
  double n_c_tilde2 = 0.0;  // sqrt(2)^(n+m+2)
  double j_star_rhs = 0.0;  // right-hand side of the j* inequality
  long j_star = 0;          // -1 when not computable and H was overridden
  long H = 1;
  bool H_overridden = false;
  double R_hat = 0.0;
  double R_tilde = 0.0;
  double gamma_y = 0.0;
  BetaVariant beta_variant = BetaVariant::interval;

  /// c_{p,j} = H_j^{-1/2} with H_j = 2^{j-1} H.
  double c_p(long j) const { return 1.0 / std::sqrt(interval_length(j)); }
  double interval_length(long j) const { return std::ldexp(static_cast<double>(H), static_cast<int>(j - 1)); }
};

/// Smallest j >= 1 with j*n_c >= rhs. Returns -1 if it does not fit in a long.
inline long smallest_j(double rhs, Index n_c) {
  const double q = rhs / static_cast<double>(n_c);
  if (!(q < 1e15)) return -1;
  long j = std::max(1L, static_cast<long>(std::ceil(q)));
  while (j > 1 && static_cast<double>((j - 1) * n_c) >= rhs) --j;
  while (static_cast<double>(j * n_c) < rhs) ++j;
  return j;
}

inline InnerConstants compute_constants(Index n, Index m, long T, long N, double delta, double R, double S,
                                        std::optional<long> H_override = std::nullopt,
                                        std::optional<double> lambda_override = std::nullopt) {
  if (n < 1 || m < 1) throw ConfigError("constants: n and m must be positive");
  if (T < 1 || N < 1) throw ConfigError("constants: T and N must be positive");
  if (!(delta > 0 && delta < 1)) throw ConfigError("constants: delta must lie in (0,1)");
  if (R < 0 || !(S > 0)) throw ConfigError("constants: R >= 0 and S > 0 required");

  InnerConstants c;
  c.n = n;
  c.m = m;
  c.T = T;
  c.N = N;
  c.delta = delta;
  c.R = R;
  c.S = S;
  const double nd = static_cast<double>(n), md = static_cast<double>(m);
  c.lambda = lambda_override ? *lambda_override : std::pow(static_cast<double>(T), 0.25);
  if (c.lambda < 0) throw ConfigError("constants: lambda must be nonnegative");
  c.delta_tilde = delta / (2.0 * static_cast<double>(N) * std::log(2.0 * static_cast<double>(T)));
  c.n_c = (n + 1) * m;
  c.gamma = 1.0 / static_cast<double>(c.n_c);
  c.n_c_tilde = std::pow(16.0 * nd * nd * R * R / c.gamma, 2);
  c.n_c_tilde2 = std::pow(std::sqrt(2.0), nd + md + 2.0);
  const double lg = std::log(c.n_c_tilde2 * static_cast<double>(N) * std::log(2.0 * static_cast<double>(T)) / delta);
  c.j_star_rhs = std::max(2.0 * static_cast<double>(c.n_c), c.n_c_tilde * lg * lg);
  c.j_star = smallest_j(c.j_star_rhs, c.n_c);
  if (H_override) {
    if (*H_override < 1) throw ConfigError("constants: H override must be >= 1");
    c.H = *H_override;
    c.H_overridden = true;
  } else {
    if (c.j_star < 0)
      throw ConfigError("constants: j* is astronomically large for this R; set an explicit H override");
    c.H = c.j_star * static_cast<long>(c.n_c) + static_cast<long>(n);
  }
  c.R_hat = nd * (nd + 1.0) * std::max(1.0, S) * R;
  c.R_tilde = 2.0 * c.R_hat * std::sqrt((nd + md) * std::log(std::sqrt(2.0)) - std::log(c.delta_tilde));
  const double sq = std::sqrt(c.gamma * std::sqrt(static_cast<double>(c.H)));
  c.gamma_y = c.gamma * (1.0 - (2.0 * nd * R / sq) *
                                   std::sqrt(4.0 * std::log(std::pow(std::sqrt(2.0), nd + md) / c.delta_tilde)));
  return c;
}

/// beta_j. A nonpositive gamma_y makes the second term unbounded (Theta_hat = Theta).
inline double confidence_radius(const InnerConstants& c, double c_p, long t_j, const Matrix& theta_star,
                                const Matrix& phi) {
  if (t_j < 1 || !(c_p > 0)) throw Error("confidence_radius: t_j >= 1 and c_p > 0 required");
  const double first = c.R_tilde / std::sqrt(c.gamma * c_p * static_cast<double>(t_j));
  const double num = c.beta_variant == BetaVariant::interval ? c.lambda * frobenius_distance(theta_star, phi)
                                                             : c.lambda * c.S;
  if (num == 0.0) return first;
  if (!(c.gamma_y > 0)) return std::numeric_limits<double>::infinity();
  const double den = c.beta_variant == BetaVariant::interval ? c.gamma_y * c_p * static_cast<double>(t_j) : c.gamma_y;
  return first + num / den;
}

/// Rows z_k = [y_k; ubar_k] and targets y_{k+1}, k = 1..count.
struct RegressionData {
  Matrix X;  // count x (n+m)
  Matrix Y;  // count x n

  Index count() const { return X.rows(); }

  static RegressionData from_stream(const std::vector<Vector>& y, const std::vector<Vector>& ubar, long count) {
    if (count < 1) throw Error("regression data: count must be >= 1");
    if (static_cast<long>(y.size()) < count + 1 || static_cast<long>(ubar.size()) < count)
      throw DimensionError("regression data: stream shorter than requested count");
    const Index n = y.front().size();
    const Index m = ubar.front().size();
    RegressionData d;
    d.X.resize(count, n + m);
    d.Y.resize(count, n);
    for (long k = 0; k < count; ++k) {
      d.X.row(k).head(n) = y[static_cast<std::size_t>(k)].transpose();
      d.X.row(k).tail(m) = ubar[static_cast<std::size_t>(k)].transpose();
      d.Y.row(k) = y[static_cast<std::size_t>(k + 1)].transpose();
    }
    d.validate();
    return d;
  }

  void validate() const {
    require_dims(X.rows() == Y.rows(), "regression data: row counts differ");
    if (X.rows() == 0) throw Error("regression data: empty");
    if (!X.allFinite() || !Y.allFinite()) throw Error("regression data: non-finite entries");
  }
};

/// theta^T = (X'X + lambda I)^{-1} X'(Y - X phi^T) + phi^T, solved through the
/// stacked least-squares form [X; sqrt(lambda) I] for accuracy.
inline Matrix regularized_ls(const RegressionData& data, const Matrix& phi, double lambda) {
  data.validate();
  const Index d = data.X.cols();
  require_dims(phi.cols() == d && phi.rows() == data.Y.cols(), "regularized_ls: prior shape");
  if (lambda < 0) throw Error("regularized_ls: lambda must be nonnegative");
  const Index rows = data.count();
  Matrix Xa(rows + d, d);
  Matrix Ya(rows + d, data.Y.cols());
  Xa << data.X, std::sqrt(lambda) * Matrix::Identity(d, d);
  Ya << data.Y - data.X * phi.transpose(), Matrix::Zero(d, data.Y.cols());
  Eigen::ColPivHouseholderQR<Matrix> qr(Xa);
  qr.setThreshold(1e-13);
  if (qr.rank() < d)
    throw SolverError("regularized_ls: Gram matrix is singular (rank " + std::to_string(qr.rank()) + " < " +
                      std::to_string(d) + ")");
  const Matrix delta = qr.solve(Ya);
  return (delta + phi.transpose()).transpose();
}

struct LsFit {
  Matrix theta;  // n x (n+m)
  Index rank = 0;
  double condition_number = 0.0;
  bool rank_deficient = false;
  Vector null_direction;  // regressor direction with the smallest singular value, when deficient
};

/// Ordinary least squares; minimum-norm solution when the regressors are rank deficient.
inline LsFit unregularized_ls(const RegressionData& data, double rank_tol = 1e-10) {
  data.validate();
  Eigen::JacobiSVD<Matrix> svd(data.X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double smax = s.size() ? s(0) : 0.0;
  svd.setThreshold(rank_tol);
  LsFit f;
  f.rank = svd.rank();
  f.rank_deficient = f.rank < data.X.cols();
  const double smin = data.X.rows() >= data.X.cols() ? s(s.size() - 1) : 0.0;
  f.condition_number = smin > 0 ? smax / smin : std::numeric_limits<double>::infinity();
  if (f.rank_deficient) {
    Eigen::JacobiSVD<Matrix> full(data.X, Eigen::ComputeFullV);
    f.null_direction = full.matrixV().col(data.X.cols() - 1);
  }
  f.theta = svd.solve(data.Y).transpose();
  return f;
}

/// {theta : ||theta - center||_F <= radius} intersected with Theta.
struct ConfidenceSet {
  Matrix center;
  double radius = 0.0;
  linsys::ThetaSet ambient;
  bool whole = false;  // Theta itself (before the first interval)

  bool contains(const Matrix& theta, double tol = 1e-12) const {
    if (!whole && frobenius_distance(theta, center) > radius + tol) return false;
    return ambient.contains(linsys::SystemParams::from_theta(theta, ambient.n), tol);
  }

  /// Theta_hat_0 = Theta, centred at the projected prior.
  static ConfidenceSet entire(const linsys::ThetaSet& set, const Matrix& phi) {
    ConfidenceSet c;
    c.center = outer::project_theta(phi, set);
    c.radius = 2.0 * set.S;
    c.ambient = set;
    c.whole = true;
    return c;
  }
};

struct SelectOptions {
  int k_theta = 8;
  int xhat_iterations = 20;
  int draw_budget_factor = 8;  // at most k_theta * factor quasi-random draws
  qp::QPOptions solver;
};

struct SelectResult {
  Vector x_hat;
  Matrix theta_hat;
  double cost = 0.0;
  std::vector<Matrix> candidates;
  std::vector<double> candidate_costs;
  std::size_t winner = 0;
};

namespace detail {

inline double radical_inverse(unsigned long i, unsigned long base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

inline std::vector<unsigned long> first_primes(std::size_t count) {
  std::vector<unsigned long> p;
  for (unsigned long k = 2; p.size() < count; ++k) {
    bool prime = true;
    for (unsigned long q : p) {
      if (q * q > k) break;
      if (k % q == 0) {
        prime = false;
        break;
      }
    }
    if (prime) p.push_back(k);
  }
  return p;
}

// Point `index` (>= 1) of a Halton sequence mapped to the Frobenius ball of
// radius r: inverse-normal coordinates give the direction, the last
// coordinate the radius.
inline Matrix halton_ball_point(unsigned long index, Index rows, Index cols, double r) {
  const Index d = rows * cols;
  const auto primes = first_primes(static_cast<std::size_t>(d + 1));
  Vector z(d);
  for (Index l = 0; l < d; ++l) {
    const double h = radical_inverse(index, primes[static_cast<std::size_t>(l)]);
    z(l) = std::sqrt(2.0) * boost::math::erf_inv(2.0 * h - 1.0);
  }
  const double len = z.norm();
  if (len == 0.0) return Matrix::Zero(rows, cols);
  const double hr = radical_inverse(index, primes[static_cast<std::size_t>(d)]);
  const double rad = r * std::pow(hr, 1.0 / static_cast<double>(d));
  z *= rad / len;
  return Eigen::Map<const Matrix>(z.data(), rows, cols);
}

// min 0.5 z'Hz + c'z  s.t. ||z|| <= eps, H symmetric positive semidefinite.
inline Vector ball_qp(const Matrix& H, const Vector& c, double eps) {
  const Index d = c.size();
  if (eps <= 0) return Vector::Zero(d);
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (H + H.transpose()));
  const Vector lam = es.eigenvalues().cwiseMax(0.0);
  const Vector cv = es.eigenvectors().transpose() * c;
  const double lam_max = std::max(lam.maxCoeff(), 1e-300);
  auto z_of = [&](double mu) {
    Vector zv(d);
    for (Index i = 0; i < d; ++i) {
      const double den = lam(i) + mu;
      zv(i) = den > 1e-14 * lam_max ? -cv(i) / den : 0.0;
    }
    return zv;
  };
  bool in_range = true;
  for (Index i = 0; i < d; ++i)
    if (lam(i) <= 1e-14 * lam_max && std::abs(cv(i)) > 1e-14 * (1.0 + cv.norm())) in_range = false;
  Vector z0 = z_of(0.0);
  if (in_range && z0.norm() <= eps) return es.eigenvectors() * z0;
  double lo = 0.0, hi = std::max(1.0, cv.norm() / eps);
  while (z_of(hi).norm() > eps) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (z_of(mid).norm() > eps) lo = mid; else hi = mid;
  }
  Vector z = es.eigenvectors() * z_of(hi);
  const double nz = z.norm();
  if (nz > eps) z *= eps / nz;
  return z;
}

}  // namespace detail

/// Optimal constrained cost of the window [t_start, t_end] under theta from x.
inline qp::QPSolution window_solution(const Matrix& theta, const Vector& x, long t_start, long t_end,
                                      const qp::QuadCostSpec& cost, const qp::InputPolytope& constraints,
                                      const qp::QPOptions& opt) {
  const Index n = theta.rows();
  qp::HorizonProblem p;
  p.A = theta.leftCols(n);
  p.B = theta.rightCols(theta.cols() - n);
  p.x0 = x;
  p.t0 = t_start;
  p.horizon = t_end - t_start + 1;
  p.cost = cost;
  p.constraints = constraints;
  auto sol = qp::solve_horizon(p, opt);
  if (!sol.optimal()) throw SolverError("select: window problem not solved");
  return sol;
}

struct XhatResult {
  Vector x;
  double cost = 0.0;
  int evaluations = 0;
};

/// Minimises the (convex, piecewise quadratic) window value over the ball
/// ||x - y|| <= eps_c by a projected Newton iteration with backtracking. The
/// start y is always evaluated, so the result never costs more than y.
inline XhatResult optimize_xhat(const Matrix& theta, const Vector& y, double eps_c, long t_start, long t_end,
                                const qp::QuadCostSpec& cost, const qp::InputPolytope& constraints,
                                const SelectOptions& opt) {
  qp::QPOptions qo = opt.solver;
  qo.value_hessian = eps_c > 0;
  XhatResult r;
  auto sol = window_solution(theta, y, t_start, t_end, cost, constraints, qo);
  r.x = y;
  r.cost = sol.objective;
  r.evaluations = 1;
  if (eps_c <= 0) return r;
  for (int it = 0; it < opt.xhat_iterations; ++it) {
    const Vector g = sol.initial_state_gradient;
    const Matrix Hs = sol.value_hessian.size() ? sol.value_hessian : Matrix::Zero(y.size(), y.size());
    const Vector zk = r.x - y;
    const Vector c = g - Hs * zk;
    Vector target = y + detail::ball_qp(Hs, c, eps_c);
    const Vector dir = target - r.x;
    if (dir.norm() <= 1e-12 * (1.0 + eps_c)) break;
    bool accepted = false;
    double alpha = 1.0;
    for (int bt = 0; bt < 30; ++bt, alpha *= 0.5) {
      const Vector xn = r.x + alpha * dir;
      auto sn = window_solution(theta, xn, t_start, t_end, cost, constraints, qo);
      ++r.evaluations;
      if (sn.objective < r.cost - 1e-15 * std::abs(r.cost)) {
        const double gain = r.cost - sn.objective;
        r.x = xn;
        r.cost = sn.objective;
        sol = std::move(sn);
        accepted = true;
        if (gain <= 1e-13 * (1.0 + std::abs(r.cost))) it = opt.xhat_iterations;
        break;
      }
    }
    if (!accepted) break;
  }
  return r;
}

/// Quasi-random candidates of a confidence set: the projected centre first,
/// then Halton points of the ball of radius min(beta, 2S) that lie in the set.
inline std::vector<Matrix> select_candidates(const ConfidenceSet& set, int k_theta, int budget_factor = 8) {
  if (k_theta < 1) throw ConfigError("select: k_theta must be >= 1");
  std::vector<Matrix> out;
  const Matrix c0 = outer::project_theta(set.center, set.ambient);
  out.push_back(c0);
  const double r = std::min(set.radius, 2.0 * set.ambient.S);
  if (!(r > 0)) return out;
  const long budget = static_cast<long>(k_theta) * budget_factor;
  for (long idx = 1; idx <= budget && static_cast<int>(out.size()) < k_theta; ++idx) {
    const Matrix cand = c0 + detail::halton_ball_point(static_cast<unsigned long>(idx), c0.rows(), c0.cols(), r);
    if (set.contains(cand)) out.push_back(cand);
  }
  return out;
}

/// Exhaustive evaluation over an explicit candidate list. With `xhats` given,
/// x_hat ranges over that list instead of being optimised on the ball.
/// Ties go to the candidate closer to `center`, then to the earlier one.
inline SelectResult select_from_candidates(const std::vector<Matrix>& thetas, const Matrix& center, const Vector& y,
                                           double eps_c, long t_start, long t_end, const qp::QuadCostSpec& cost,
                                           const qp::InputPolytope& constraints, const SelectOptions& opt = {},
                                           const std::vector<Vector>* xhats = nullptr) {
  if (thetas.empty()) throw Error("select: empty candidate list");
  if (t_end < t_start) throw Error("select: empty cost window");
  SelectResult best;
  best.cost = std::numeric_limits<double>::infinity();
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    double ci = std::numeric_limits<double>::infinity();
    Vector xi;
    if (xhats) {
      for (const auto& xc : *xhats) {
        const double v = window_solution(thetas[i], xc, t_start, t_end, cost, constraints, opt.solver).objective;
        if (v < ci) {
          ci = v;
          xi = xc;
        }
      }
    } else {
      auto xr = optimize_xhat(thetas[i], y, eps_c, t_start, t_end, cost, constraints, opt);
      ci = xr.cost;
      xi = xr.x;
    }
    best.candidates.push_back(thetas[i]);
    best.candidate_costs.push_back(ci);
    const double dist = frobenius_distance(thetas[i], center);
    const double scale = 1e-12 * (1.0 + std::abs(ci));
    if (ci < best.cost - scale || (std::abs(ci - best.cost) <= scale && dist < best_dist)) {
      best.cost = ci;
      best.x_hat = xi;
      best.theta_hat = thetas[i];
      best.winner = i;
      best_dist = dist;
    }
  }
  return best;
}

/// Joint choice of the nominal restart state and model for the next interval.
inline SelectResult select(const ConfidenceSet& set, const Vector& y, double eps_c, long t_start, long t_end,
                           const qp::QuadCostSpec& cost, const qp::InputPolytope& constraints,
                           const SelectOptions& opt = {}) {
  const auto cands = select_candidates(set, opt.k_theta, opt.draw_budget_factor);
  return select_from_candidates(cands, cands.front(), y, eps_c, t_start, t_end, cost, constraints, opt);
}

}  // namespace metarhc::inner
