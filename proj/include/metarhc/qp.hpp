#pragma once

// Finite-horizon input-constrained LQ problems
//
//   min_{w_0..w_{H-1}}  sum_{k=0}^{H-1} x_k' Q_{t0+k} x_k + w_k' R_{t0+k} w_k
//   s.t.  x_{k+1} = A x_k + B w_k,  x_0 given,  F w_k <= b.
//
// The decision variables are the inputs only (states are eliminated through the
// dynamics). Equality-constrained subproblems for a given working set are solved
// by a backward Riccati sweep over a stage-wise null-space parametrisation of the
// active rows, so the condensed Hessian is never formed. The outer loop is a
// primal-dual active-set iteration with a primal active-set fallback; every
// returned optimum carries a KKT certificate.

#include "metarhc/common.hpp"
#include "metarhc/cost.hpp"
#include "metarhc/linsys.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace metarhc::qp {

enum class Status { optimal, infeasible, iteration_limit };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::optimal: return "optimal";
    case Status::infeasible: return "infeasible";
    case Status::iteration_limit: return "iteration-limit";
  }
  return "?";
}

struct QPOptions {
  double tol_kkt = 1e-8;
  double tol_feas = 1e-9;
  int max_iterations = 2000;
  /// Added to R_t when some R_t is singular; selects the minimum-norm minimiser.
  double regularization = 1e-10;
  /// Also report the Hessian of the optimal value in x0 for the final working set.
  bool value_hessian = false;
};

struct HorizonProblem {
  Matrix A;
  Matrix B;
  Vector x0;
  long t0 = 1;  // absolute time of stage 0, used for cost lookup
  Index horizon = 1;
  QuadCostSpec cost;
  InputPolytope constraints;  // default-constructed = unconstrained

  void validate() const {
    require_dims(A.rows() == A.cols() && B.rows() == A.rows(), "horizon problem: model");
    require_dims(x0.size() == A.rows(), "horizon problem: x0");
    require_dims(constraints.rows() == 0 || constraints.m() == B.cols(), "horizon problem: polytope");
    if (horizon < 1) throw Error("horizon problem: horizon must be >= 1");
  }
};

/// Row indices of the input polytope held active, one list per stage.
using ActiveSet = std::vector<std::vector<Index>>;

struct QPSolution {
  Status status = Status::iteration_limit;
  std::vector<Vector> inputs;       // w_0 .. w_{H-1}
  std::vector<Vector> states;       // x_0 .. x_H
  std::vector<Vector> multipliers;  // one vector of polytope-row multipliers per stage
  double objective = 0.0;
  double kkt_residual = 0.0;          // max of stationarity, dual infeasibility, complementarity
  double feasibility_residual = 0.0;  // max_k,i (F w_k - b)_i^+
  double regularization = 0.0;
  int iterations = 0;
  Vector initial_state_gradient;  // d(objective)/d(x0) at the optimum
  Matrix value_hessian;           // only when requested in QPOptions
  ActiveSet active_set;

  bool optimal() const { return status == Status::optimal; }
};

/// Process-wide record of every certified solution; consumed by the
/// acceptance suite to confirm certificates across whole runs.
class CertificateAudit {
 public:
  static CertificateAudit& instance() {
    static CertificateAudit audit;
    return audit;
  }
  void record(const QPSolution& s) {
    if (!s.optimal()) return;
    std::lock_guard<std::mutex> lock(mu_);
    ++count_;
    max_kkt_ = std::max(max_kkt_, s.kkt_residual);
    max_feas_ = std::max(max_feas_, s.feasibility_residual);
  }
  void reset() {
    std::lock_guard<std::mutex> lock(mu_);
    count_ = 0;
    max_kkt_ = max_feas_ = 0.0;
  }
  long count() const { std::lock_guard<std::mutex> lock(mu_); return count_; }
  double max_kkt() const { std::lock_guard<std::mutex> lock(mu_); return max_kkt_; }
  double max_feas() const { std::lock_guard<std::mutex> lock(mu_); return max_feas_; }

 private:
  mutable std::mutex mu_;
  long count_ = 0;
  double max_kkt_ = 0.0;
  double max_feas_ = 0.0;
};

namespace detail {

struct StageParam {
  Vector c;  // particular solution of the active rows
  Matrix N;  // orthonormal basis of their null space
};

inline std::optional<StageParam> stage_param(const InputPolytope& poly, const std::vector<Index>& rows, Index m) {
  StageParam p;
  if (rows.empty()) {
    p.c = Vector::Zero(m);
    p.N = Matrix::Identity(m, m);
    return p;
  }
  const Index r = static_cast<Index>(rows.size());
  if (r > m) return std::nullopt;
  Matrix Fa(r, m);
  Vector ba(r);
  for (Index i = 0; i < r; ++i) {
    Fa.row(i) = poly.F().row(rows[static_cast<std::size_t>(i)]);
    ba(i) = poly.b()(rows[static_cast<std::size_t>(i)]);
  }
  Eigen::JacobiSVD<Matrix> svd(Fa, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  if (s(s.size() - 1) <= 1e-10 * std::max(1.0, s(0))) return std::nullopt;
  p.c = svd.solve(ba);
  p.N = svd.matrixV().rightCols(m - r);
  return p;
}

struct Workspace {
  std::vector<Matrix> K;
  std::vector<Vector> k;
};

class Engine {
 public:
  Engine(const HorizonProblem& p, const QPOptions& opt) : p_(p), opt_(opt) {
    n_ = p.A.rows();
    m_ = p.B.cols();
    H_ = p.horizon;
    reg_ = 0.0;
    for (Index k = 0; k < H_; ++k) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(p.cost.R(p.t0 + k), Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() <= 1e-12) {
        reg_ = opt.regularization;
        break;
      }
    }
    Q_.reserve(static_cast<std::size_t>(H_));
    R_.reserve(static_cast<std::size_t>(H_));
    for (Index k = 0; k < H_; ++k) {
      Q_.push_back(p.cost.Q(p.t0 + k));
      R_.push_back(p.cost.R(p.t0 + k) + reg_ * Matrix::Identity(m_, m_));
    }
  }

  double regularization() const { return reg_; }
  bool constrained() const { return p_.constraints.rows() > 0; }

  // Solves the equality-constrained problem for the given working set.
  std::optional<std::vector<Vector>> solve_eqp(const ActiveSet& W, Matrix* P0 = nullptr) const {
    std::vector<StageParam> params;
    params.reserve(static_cast<std::size_t>(H_));
    for (Index k = 0; k < H_; ++k) {
      const auto& rows = W.empty() ? empty_ : W[static_cast<std::size_t>(k)];
      auto sp = stage_param(p_.constraints, rows, m_);
      if (!sp) return std::nullopt;
      params.push_back(std::move(*sp));
    }
    const Matrix& A = p_.A;
    const Matrix& B = p_.B;
    std::vector<Matrix> K(static_cast<std::size_t>(H_));
    std::vector<Vector> kf(static_cast<std::size_t>(H_));
    Matrix P = Matrix::Zero(n_, n_);
    Vector s = Vector::Zero(n_);
    for (Index k = H_ - 1; k >= 0; --k) {
      const auto& sp = params[static_cast<std::size_t>(k)];
      const Matrix PB = P * B;
      const Matrix Rb = R_[static_cast<std::size_t>(k)] + B.transpose() * PB;
      const Vector s_aff = A.transpose() * (PB * sp.c + s);
      Matrix Pn = Q_[static_cast<std::size_t>(k)] + A.transpose() * P * A;
      if (sp.N.cols() == 0) {
        K[static_cast<std::size_t>(k)] = Matrix::Zero(m_, n_);
        kf[static_cast<std::size_t>(k)] = sp.c;
        s = s_aff;
      } else {
        const Matrix Huu = sp.N.transpose() * Rb * sp.N;
        const Matrix Hux = sp.N.transpose() * PB.transpose() * A;
        const Vector hu = sp.N.transpose() * (Rb * sp.c + B.transpose() * s);
        Eigen::LLT<Matrix> llt(Huu);
        if (llt.info() != Eigen::Success) return std::nullopt;
        const Matrix Kv = -llt.solve(Hux);
        const Vector kv = -llt.solve(hu);
        Pn += Hux.transpose() * Kv;
        s = s_aff + Hux.transpose() * kv;
        K[static_cast<std::size_t>(k)] = sp.N * Kv;
        kf[static_cast<std::size_t>(k)] = sp.c + sp.N * kv;
      }
      P = 0.5 * (Pn + Pn.transpose());
    }
    if (P0) *P0 = 2.0 * P;
    std::vector<Vector> w(static_cast<std::size_t>(H_));
    Vector x = p_.x0;
    for (Index k = 0; k < H_; ++k) {
      w[static_cast<std::size_t>(k)] = K[static_cast<std::size_t>(k)] * x + kf[static_cast<std::size_t>(k)];
      x = A * x + B * w[static_cast<std::size_t>(k)];
    }
    return w;
  }

  std::vector<Vector> rollout(const std::vector<Vector>& w) const {
    std::vector<Vector> x(static_cast<std::size_t>(H_ + 1));
    x[0] = p_.x0;
    for (Index k = 0; k < H_; ++k)
      x[static_cast<std::size_t>(k + 1)] = p_.A * x[static_cast<std::size_t>(k)] + p_.B * w[static_cast<std::size_t>(k)];
    return x;
  }

  // Gradient of the (regularised) objective in each w_k; also returns p_0.
  std::vector<Vector> gradient(const std::vector<Vector>& w, const std::vector<Vector>& x, Vector* p0) const {
    std::vector<Vector> g(static_cast<std::size_t>(H_));
    Vector p = Vector::Zero(n_);
    for (Index k = H_ - 1; k >= 0; --k) {
      const auto ks = static_cast<std::size_t>(k);
      g[ks] = 2.0 * R_[ks] * w[ks] + p_.B.transpose() * p;
      p = 2.0 * Q_[ks] * x[ks] + p_.A.transpose() * p;
    }
    if (p0) *p0 = p;
    return g;
  }

  double objective(const std::vector<Vector>& w, const std::vector<Vector>& x) const {
    double J = 0.0;
    for (Index k = 0; k < H_; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      J += p_.cost.stage(p_.t0 + k, x[ks], w[ks]);
    }
    return J;
  }

  Vector residual(Index k, const Vector& wk) const { return p_.constraints.F() * wk - p_.constraints.b(); }

  Vector multipliers_for(const std::vector<Index>& rows, const Vector& gk) const {
    Vector mu = Vector::Zero(p_.constraints.rows());
    if (rows.empty()) return mu;
    Matrix Fa(static_cast<Index>(rows.size()), m_);
    for (std::size_t i = 0; i < rows.size(); ++i) Fa.row(static_cast<Index>(i)) = p_.constraints.F().row(rows[i]);
    const Vector ma = (Fa * Fa.transpose()).ldlt().solve(-(Fa * gk));
    for (std::size_t i = 0; i < rows.size(); ++i) mu(rows[i]) = ma(static_cast<Index>(i));
    return mu;
  }

  Index H() const { return H_; }
  Index m() const { return m_; }
  const HorizonProblem& problem() const { return p_; }

 private:
  const HorizonProblem& p_;
  QPOptions opt_;
  Index n_ = 0, m_ = 0, H_ = 0;
  double reg_ = 0.0;
  std::vector<Matrix> Q_, R_;
  std::vector<Index> empty_;
};

inline bool contains_row(const std::vector<Index>& rows, Index i) {
  return std::find(rows.begin(), rows.end(), i) != rows.end();
}

}  // namespace detail

/// Solves a HorizonProblem. `warm` is an optional working-set guess (e.g. the
/// previous receding-horizon solution shifted by one stage).
inline QPSolution solve_horizon(const HorizonProblem& prob, const QPOptions& opt = {}, const ActiveSet* warm = nullptr) {
  prob.validate();
  detail::Engine eng(prob, opt);
  const Index H = eng.H();
  const auto& poly = prob.constraints;
  const Index rows = poly.rows();

  QPSolution sol;
  sol.regularization = eng.regularization();
  ActiveSet W(static_cast<std::size_t>(H));
  std::vector<Vector> w;
  bool done = false;
  int iters = 0;

  auto feasible_stage = [&](const Vector& wk) { return rows == 0 || ((eng.residual(0, wk)).array() <= opt.tol_feas).all(); };

  // Unconstrained solution first; it is the answer whenever it is feasible.
  auto w_unc = eng.solve_eqp(ActiveSet{});
  if (!w_unc) throw SolverError("qp: unconstrained subproblem is not positive definite");
  ++iters;
  if (rows == 0 || std::all_of(w_unc->begin(), w_unc->end(), feasible_stage)) {
    w = *w_unc;
    done = true;
  }

  // Primal-dual active-set iteration.
  if (!done) {
    ActiveSet cur(static_cast<std::size_t>(H));
    bool seeded = false;
    if (warm && static_cast<Index>(warm->size()) == H) {
      cur = *warm;
      seeded = true;
    }
    if (!seeded) {
      for (Index k = 0; k < H; ++k) {
        const Vector r = eng.residual(k, (*w_unc)[static_cast<std::size_t>(k)]);
        for (Index i = 0; i < rows; ++i)
          if (r(i) > 0) cur[static_cast<std::size_t>(k)].push_back(i);
      }
    }
    for (int it = 0; it < 50 && iters < opt.max_iterations; ++it) {
      auto we = eng.solve_eqp(cur);
      ++iters;
      if (!we) break;
      const auto x = eng.rollout(*we);
      const auto g = eng.gradient(*we, x, nullptr);
      ActiveSet next(static_cast<std::size_t>(H));
      for (Index k = 0; k < H; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const Vector mu = eng.multipliers_for(cur[ks], g[ks]);
        const Vector r = eng.residual(k, (*we)[ks]);
        for (Index i = 0; i < rows; ++i) {
          const bool in = detail::contains_row(cur[ks], i);
          if ((in && mu(i) > 0) || (!in && r(i) > opt.tol_feas)) next[ks].push_back(i);
        }
      }
      if (next == cur) {
        w = *we;
        W = cur;
        done = true;
        break;
      }
      cur = std::move(next);
    }
  }

  // Primal active-set fallback from a feasible start.
  if (!done) {
    std::vector<Vector> wk(static_cast<std::size_t>(H));
    for (Index k = 0; k < H; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      wk[ks] = feasible_stage((*w_unc)[ks]) ? (*w_unc)[ks] : poly.chebyshev_center();
    }
    W.assign(static_cast<std::size_t>(H), {});
    while (iters < opt.max_iterations) {
      auto we = eng.solve_eqp(W);
      ++iters;
      if (!we) throw SolverError("qp: singular working set in primal active-set iteration");
      double pmax = 0.0, wmax = 1.0;
      for (Index k = 0; k < H; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        pmax = std::max(pmax, ((*we)[ks] - wk[ks]).cwiseAbs().maxCoeff());
        wmax = std::max(wmax, wk[ks].cwiseAbs().maxCoeff());
      }
      if (pmax <= 1e-12 * wmax) {
        wk = *we;
        const auto x = eng.rollout(wk);
        const auto g = eng.gradient(wk, x, nullptr);
        double worst = -1e-12;
        Index wk_stage = -1, wk_row = -1;
        for (Index k = 0; k < H; ++k) {
          const auto ks = static_cast<std::size_t>(k);
          const Vector mu = eng.multipliers_for(W[ks], g[ks]);
          for (Index i : W[ks])
            if (mu(i) < worst) {
              worst = mu(i);
              wk_stage = k;
              wk_row = i;
            }
        }
        if (wk_stage < 0) {
          w = wk;
          done = true;
          break;
        }
        auto& rs = W[static_cast<std::size_t>(wk_stage)];
        rs.erase(std::find(rs.begin(), rs.end(), wk_row));
        continue;
      }
      double alpha = 1.0;
      Index bs = -1, br = -1;
      for (Index k = 0; k < H; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const Vector dir = (*we)[ks] - wk[ks];
        const Vector Fd = poly.F() * dir;
        const Vector r = eng.residual(k, wk[ks]);
        for (Index i = 0; i < rows; ++i) {
          if (detail::contains_row(W[ks], i) || Fd(i) <= 1e-14) continue;
          const double ratio = std::max(0.0, -r(i) / Fd(i));
          if (ratio < alpha) {
            alpha = ratio;
            bs = k;
            br = i;
          }
        }
      }
      for (Index k = 0; k < H; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        wk[ks] += alpha * ((*we)[ks] - wk[ks]);
      }
      if (bs >= 0) W[static_cast<std::size_t>(bs)].push_back(br);
    }
    if (!done) w = wk;
  }

  // Certificate.
  sol.inputs = w;
  sol.states = eng.rollout(w);
  Vector p0;
  const auto g = eng.gradient(w, sol.states, &p0);
  sol.initial_state_gradient = p0;
  sol.objective = eng.objective(w, sol.states);
  sol.iterations = iters;
  sol.active_set = W;
  sol.multipliers.resize(static_cast<std::size_t>(H));
  double stat = 0.0, dual = 0.0, comp = 0.0, feas = 0.0;
  for (Index k = 0; k < H; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (rows > 0) {
      if (W.size() != static_cast<std::size_t>(H)) W.assign(static_cast<std::size_t>(H), {});
      const Vector mu = eng.multipliers_for(W[ks], g[ks]);
      const Vector r = eng.residual(k, w[ks]);
      sol.multipliers[ks] = mu;
      stat = std::max(stat, (g[ks] + poly.F().transpose() * mu).cwiseAbs().maxCoeff());
      dual = std::max(dual, (-mu).cwiseMax(0.0).maxCoeff());
      comp = std::max(comp, (mu.cwiseProduct(r)).cwiseAbs().maxCoeff());
      feas = std::max(feas, r.cwiseMax(0.0).maxCoeff());
    } else {
      sol.multipliers[ks] = Vector();
      stat = std::max(stat, g[ks].cwiseAbs().maxCoeff());
    }
  }
  sol.active_set = W;
  if (opt.value_hessian) {
    Matrix P0;
    if (eng.solve_eqp(rows > 0 ? W : ActiveSet{}, &P0)) sol.value_hessian = P0;
  }
  sol.kkt_residual = std::max({stat, dual, comp});
  sol.feasibility_residual = feas;
  sol.status = (done && sol.kkt_residual <= opt.tol_kkt && sol.feasibility_residual <= opt.tol_feas)
                   ? Status::optimal
                   : Status::iteration_limit;
  CertificateAudit::instance().record(sol);
  return sol;
}

/// Optimal constrained open-loop plan for the true plant over the whole
/// episode t = 1..T from x_s; its objective is the regret baseline.
inline QPSolution solve_full_horizon_baseline(const linsys::SystemParams& sys, const QuadCostSpec& cost,
                                              const InputPolytope& constraints, long T, const Vector& x_s,
                                              const QPOptions& opt = {}) {
  HorizonProblem p;
  p.A = sys.A;
  p.B = sys.B;
  p.x0 = x_s;
  p.t0 = 1;
  p.horizon = T;
  p.cost = cost;
  p.constraints = constraints;
  return solve_horizon(p, opt);
}

struct RiccatiResult {
  std::vector<Vector> inputs;
  std::vector<Vector> states;
  std::vector<Matrix> gains;  // u_k = -gains[k] x_k
  Matrix P0;
  double cost = 0.0;
};

/// Unconstrained finite-horizon LQ solution by backward Riccati recursion.
/// `terminal` weights x_T (zero unless given).
inline RiccatiResult riccati_reference(const linsys::SystemParams& sys, const QuadCostSpec& cost, long T,
                                       const Vector& x_s, long t0 = 1,
                                       const std::optional<Matrix>& terminal = std::nullopt) {
  const Index n = sys.n();
  RiccatiResult out;
  out.gains.resize(static_cast<std::size_t>(T));
  Matrix P = terminal ? *terminal : Matrix::Zero(n, n);
  for (long k = T - 1; k >= 0; --k) {
    const Matrix& Q = cost.Q(t0 + k);
    const Matrix& R = cost.R(t0 + k);
    const Matrix S = R + sys.B.transpose() * P * sys.B;
    const Matrix K = S.completeOrthogonalDecomposition().solve(sys.B.transpose() * P * sys.A);
    out.gains[static_cast<std::size_t>(k)] = K;
    P = Q + sys.A.transpose() * P * (sys.A - sys.B * K);
    P = 0.5 * (P + P.transpose());
  }
  out.P0 = P;
  Vector x = x_s;
  out.states.push_back(x);
  for (long k = 0; k < T; ++k) {
    Vector u = -out.gains[static_cast<std::size_t>(k)] * x;
    out.cost += cost.stage(t0 + k, x, u);
    out.inputs.push_back(u);
    x = sys.A * x + sys.B * u;
    out.states.push_back(x);
  }
  if (terminal) out.cost += x.dot(*terminal * x);
  return out;
}

}  // namespace metarhc::qp
