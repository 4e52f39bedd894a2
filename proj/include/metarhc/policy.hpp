#pragma once

// One episode of the learning controller: doubling intervals, model selection
// at interval boundaries, MPC on the nominal state, and excitation.

#include "metarhc/common.hpp"
#include "metarhc/cost.hpp"
#include "metarhc/excite.hpp"
#include "metarhc/inner.hpp"
#include "metarhc/linsys.hpp"
#include "metarhc/mpc.hpp"
#include "metarhc/qp.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace metarhc::policy {

/// Interval j (1-based) covers t_{j-1}+1 .. t_j with t_j = H(2^j - 1); the last
/// interval is cut at T.
class IntervalSchedule {
 public:
  IntervalSchedule(long H, long T) : H_(H), T_(T) {
    if (H < 1 || T < 1) throw ConfigError("schedule: H and T must be positive");
    long t = 0, len = H;
    while (t < T) {
      t = std::min(T, t + len);
      ends_.push_back(t);
      len *= 2;
    }
  }

  long count() const { return static_cast<long>(ends_.size()); }
  long end(long j) const { return ends_.at(static_cast<std::size_t>(j - 1)); }
  long start(long j) const { return j == 1 ? 1 : end(j - 1) + 1; }
  long length(long j) const { return end(j) - start(j) + 1; }
  long nominal_end(long j) const { return H_ * ((1L << j) - 1); }
  double nominal_length(long j) const { return std::ldexp(static_cast<double>(H_), static_cast<int>(j - 1)); }
  long interval_of(long t) const {
    for (long j = 1; j <= count(); ++j)
      if (t <= end(j)) return j;
    throw Error("schedule: t beyond T");
  }
  const std::vector<long>& boundaries() const { return ends_; }
  long H() const { return H_; }
  long T() const { return T_; }

 private:
  long H_, T_;
  std::vector<long> ends_;
};

struct EpisodeConfig {
  long T = 1;
  linsys::ThetaSet theta_set;
  qp::QuadCostSpec cost;
  qp::InputPolytope constraints;
  inner::InnerConstants consts;
  mpc::MpcConfig mpc;
  inner::SelectOptions select;
  linsys::NoiseModel noise;
  Vector x_s;
  bool perturbation = true;
  bool y_feedback = false;  // ablation: MPC from y_t instead of the nominal state
};

struct StepRecord {
  long t = 0;
  long j = 0;  // interval being executed
  Vector x, y, xbar, u, du, ubar;
  double cost = 0.0;
  double violation = 0.0;
  excite::Case perturb_case = excite::Case::along;
  double alignment = 0.0;  // g + u_perp' ubar for column-completing inputs
  bool has_alignment = false;
};

struct BoundaryRecord {
  long j = 0;  // completed intervals (0 at t = 1)
  long t = 0;  // time of the selection
  Matrix theta_l;
  Matrix theta_star;
  bool fit_rank_deficient = false;
  double beta = 0.0;
  Matrix theta_hat;
  Vector x_hat;
  bool covered = true;
  double select_cost = 0.0;
};

struct EpisodeTrace {
  std::vector<StepRecord> steps;
  std::vector<BoundaryRecord> boundaries;   // one per selection
  std::vector<Matrix> theta_tilde;          // model in force at t = 1..T
  std::vector<Matrix> fits;                 // theta*_j, j = 1..N_T
  std::vector<excite::PECertificate> pe;    // j = 1..N_T
  std::vector<double> c_p;                  // c_{p,j}, j = 1..N_T
  std::vector<long> interval_lengths;       // actual (possibly truncated) H_j
  double policy_cost = 0.0;

  bool coverage_all() const {
    return std::all_of(boundaries.begin(), boundaries.end(), [](const BoundaryRecord& b) { return b.covered; });
  }
  bool pe_all() const {
    return std::all_of(pe.begin(), pe.end(), [](const excite::PECertificate& c) { return c.pass; });
  }
};

namespace detail {

inline Vector stack(const Vector& a, const Vector& b) {
  Vector z(a.size() + b.size());
  z << a, b;
  return z;
}

}  // namespace detail

/// Runs one episode against the hidden plant `sys` with prior `phi`.
inline EpisodeTrace run_episode(const linsys::SystemParams& sys, const Matrix& phi, const EpisodeConfig& cfg) {
  const Index n = sys.n(), m = sys.m();
  const long T = cfg.T;
  require_dims(phi.rows() == n && phi.cols() == n + m, "run_episode: prior shape");
  require_dims(cfg.x_s.size() == n, "run_episode: x_s size");
  require_dims(cfg.constraints.m() == m, "run_episode: polytope dimension");
  const IntervalSchedule sched(cfg.consts.H, T);
  const long NT = sched.count();

  linsys::NoiseStream noise(cfg.noise, n);
  mpc::MpcController ctrl(cfg.mpc);
  excite::Exciter exciter(n, m);
  const double Finf = cfg.constraints.F_inf_norm();
  (void)Finf;

  EpisodeTrace tr;
  tr.steps.reserve(static_cast<std::size_t>(T));
  tr.theta_tilde.reserve(static_cast<std::size_t>(T));
  for (long j = 1; j <= NT; ++j) {
    tr.c_p.push_back(cfg.consts.c_p(j));
    tr.interval_lengths.push_back(sched.length(j));
  }

  std::vector<Vector> ys, ubars, xs;
  ys.reserve(static_cast<std::size_t>(T + 1));
  Vector x = cfg.x_s;
  Vector xbar;
  Matrix theta_tilde;
  linsys::SystemParams model;
  const Matrix theta_true = sys.theta();

  auto fit_and_certify = [&](long j, long rows) {
    auto data = inner::RegressionData::from_stream(ys, ubars, rows);
    auto ls = inner::unregularized_ls(data);
    std::vector<Vector> z;
    z.reserve(static_cast<std::size_t>(sched.end(j)));
    for (long k = 0; k < sched.end(j); ++k) z.push_back(detail::stack(xs[static_cast<std::size_t>(k)], ubars[static_cast<std::size_t>(k)]));
    tr.pe.push_back(excite::certify_pe(z, j, cfg.consts.gamma, cfg.consts.c_p(j), sched.end(j)));
    tr.fits.push_back(ls.theta);
    return std::make_pair(data, ls);
  };

  long j_exec = 0;
  for (long t = 1; t <= T; ++t) {
    const Vector y = noise.observe(x);
    ys.push_back(y);
    xs.push_back(x);
    if (t == 1 || t == sched.end(j_exec) + 1) {
      const long j = j_exec;  // completed intervals
      BoundaryRecord br;
      br.j = j;
      br.t = t;
      inner::ConfidenceSet set;
      if (j == 0) {
        set = inner::ConfidenceSet::entire(cfg.theta_set, phi);
      } else {
        auto [data, ls] = fit_and_certify(j, sched.end(j));
        br.theta_star = ls.theta;
        br.fit_rank_deficient = ls.rank_deficient;
        br.theta_l = inner::regularized_ls(data, phi, cfg.consts.lambda);
        br.beta = inner::confidence_radius(cfg.consts, cfg.consts.c_p(j), sched.end(j), ls.theta, phi);
        set.center = br.theta_l;
        set.radius = br.beta;
        set.ambient = cfg.theta_set;
        br.covered = set.contains(theta_true, 1e-9);
      }
      const long w_end = sched.end(j + 1);
      inner::SelectResult sel;
      try {
        sel = inner::select(set, y, cfg.noise.eps_c, t, w_end, cfg.cost, cfg.constraints, cfg.select);
      } catch (const SolverError& e) {
        throw SolverError(std::string(e.what()) + " (selection at t=" + std::to_string(t) + ")");
      }
      br.theta_hat = sel.theta_hat;
      br.x_hat = sel.x_hat;
      br.select_cost = sel.cost;
      tr.boundaries.push_back(br);
      theta_tilde = sel.theta_hat;
      model = linsys::SystemParams::from_theta(theta_tilde, n);
      xbar = sel.x_hat;
      j_exec = j + 1;
      exciter.start_interval(j_exec, cfg.consts.c_p(j_exec));
      ctrl.reset();
    }

    StepRecord s;
    s.t = t;
    s.j = j_exec;
    s.x = x;
    s.y = y;
    s.xbar = xbar;
    try {
      s.u = ctrl.step(t, cfg.y_feedback ? y : xbar, model, sched.end(j_exec), T);
    } catch (const SolverError& e) {
      throw SolverError(std::string(e.what()) + " (step t=" + std::to_string(t) + ")");
    }
    if (cfg.perturbation) {
      const auto pr = exciter.next(s.u);
      s.du = pr.du;
      s.perturb_case = pr.which;
      if (pr.which != excite::Case::lead_in && exciter.has_alignment()) {
        s.alignment = exciter.last_alignment();
        s.has_alignment = true;
      }
    } else {
      s.du = Vector::Zero(m);
    }
    s.ubar = s.u + s.du;
    s.cost = cfg.cost.stage(t, x, s.ubar);
    s.violation = cfg.constraints.violation(s.ubar);
    tr.policy_cost += s.cost;
    tr.theta_tilde.push_back(theta_tilde);
    ubars.push_back(s.ubar);

    x = linsys::step(sys, x, s.ubar);
    xbar = mpc::propagate_nominal(model, xbar, s.u);
    tr.steps.push_back(std::move(s));
  }

  // Final boundary: certificate over 1..T, fit over the T-1 complete transitions.
  if (T >= 2) {
    fit_and_certify(NT, T - 1);
  } else {
    std::vector<Vector> z{detail::stack(xs[0], ubars[0])};
    tr.pe.push_back(excite::certify_pe(z, NT, cfg.consts.gamma, cfg.consts.c_p(NT), 1));
  }
  return tr;
}

struct EpisodeMetrics {
  double regret = 0.0;
  double violation = 0.0;
  double E_theta = 0.0;
  double policy_cost = 0.0;
  double baseline_cost = 0.0;
};

/// Regret against the constrained optimum, cumulative violation, and
/// sum_{t<T} ||theta_tilde_t - theta||_F.
inline EpisodeMetrics episode_metrics(const EpisodeTrace& trace, const qp::QPSolution& baseline,
                                      const linsys::SystemParams& sys) {
  EpisodeMetrics mtr;
  for (const auto& s : trace.steps) {
    mtr.policy_cost += s.cost;
    mtr.violation += s.violation;
  }
  mtr.baseline_cost = baseline.objective;
  mtr.regret = mtr.policy_cost - mtr.baseline_cost;
  const Matrix th = sys.theta();
  for (std::size_t k = 0; k + 1 < trace.theta_tilde.size(); ++k) mtr.E_theta += frobenius_distance(trace.theta_tilde[k], th);
  return mtr;
}

}  // namespace metarhc::policy
