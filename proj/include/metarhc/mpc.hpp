#pragma once

// Receding-horizon control law: solve the look-ahead problem under the current
// model estimate and apply the first input.

#include "metarhc/common.hpp"
#include "metarhc/cost.hpp"
#include "metarhc/linsys.hpp"
#include "metarhc/qp.hpp"

#include <algorithm>
#include <limits>
#include <optional>

namespace metarhc::mpc {

struct MpcConfig {
  Index horizon = 12;  // M
  qp::QuadCostSpec cost;
  qp::InputPolytope constraints;
  qp::QPOptions solver;
  /// Never look past the end of the current cost-preview window.
  bool preview_clamp = true;

  void validate() const {
    if (horizon < 1) throw ConfigError("mpc: horizon must be >= 1");
  }
};

/// Number of look-ahead stages used at time t. `window_end` is the last time
/// step whose cost is previewed (the current interval end), `T` the episode end.
inline Index lookahead(const MpcConfig& cfg, long t, std::optional<long> window_end = std::nullopt,
                       std::optional<long> T = std::nullopt) {
  long L = static_cast<long>(cfg.horizon);
  if (cfg.preview_clamp && window_end) L = std::min(L, *window_end - t + 1);
  if (T) L = std::min(L, *T - t + 1);
  return static_cast<Index>(std::max(1L, L));
}

inline qp::HorizonProblem make_problem(long t, const Vector& x, const linsys::SystemParams& model,
                                       const MpcConfig& cfg, Index L) {
  qp::HorizonProblem p;
  p.A = model.A;
  p.B = model.B;
  p.x0 = x;
  p.t0 = t;
  p.horizon = L;
  p.cost = cfg.cost;
  p.constraints = cfg.constraints;
  return p;
}

/// Stateless form: first input of the optimal look-ahead plan from x.
inline Vector mpc_step(long t, const Vector& x, const linsys::SystemParams& model, const MpcConfig& cfg,
                       std::optional<long> window_end = std::nullopt, std::optional<long> T = std::nullopt) {
  cfg.validate();
  require_dims(x.size() == model.n(), "mpc_step: x has wrong size");
  const auto sol = qp::solve_horizon(make_problem(t, x, model, cfg, lookahead(cfg, t, window_end, T)), cfg.solver);
  if (!sol.optimal()) throw SolverError("mpc: look-ahead problem not solved at t=" + std::to_string(t));
  return sol.inputs.front();
}

/// x_bar_{t+1} = A_hat x_bar_t + B_hat u_t (intermediate input, not the perturbed one).
inline Vector propagate_nominal(const linsys::SystemParams& model, const Vector& xbar, const Vector& u) {
  return linsys::step(model, xbar, u);
}

/// Stateful controller that warm-starts each solve with the previous working
/// set shifted by one stage.
class MpcController {
 public:
  explicit MpcController(MpcConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  Vector step(long t, const Vector& x, const linsys::SystemParams& model,
              std::optional<long> window_end = std::nullopt, std::optional<long> T = std::nullopt) {
    require_dims(x.size() == model.n(), "mpc step: x has wrong size");
    const Index L = lookahead(cfg_, t, window_end, T);
    qp::ActiveSet guess;
    const qp::ActiveSet* warm = nullptr;
    if (!prev_.empty()) {
      guess.assign(static_cast<std::size_t>(L), {});
      for (Index k = 0; k < L && k + 1 < static_cast<Index>(prev_.size()); ++k)
        guess[static_cast<std::size_t>(k)] = prev_[static_cast<std::size_t>(k + 1)];
      warm = &guess;
    }
    last_ = qp::solve_horizon(make_problem(t, x, model, cfg_, L), cfg_.solver, warm);
    if (!last_.optimal()) throw SolverError("mpc: look-ahead problem not solved at t=" + std::to_string(t));
    prev_ = last_.active_set;
    return last_.inputs.front();
  }

  void reset() { prev_.clear(); }
  const qp::QPSolution& last_solution() const { return last_; }
  const MpcConfig& config() const { return cfg_; }

 private:
  MpcConfig cfg_;
  qp::ActiveSet prev_;
  qp::QPSolution last_;
};

}  // namespace metarhc::mpc
