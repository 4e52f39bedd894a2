#pragma once

// Meta-learner: projected online gradient descent on the prior phi over episodes.

#include "metarhc/common.hpp"
#include "metarhc/linsys.hpp"

#include <cmath>
#include <vector>

namespace metarhc::outer {

/// Two-stage map into Theta: scale into the Frobenius ball of radius S, then
/// shrink the A block if its spectral radius exceeds rho_max.
inline Matrix project_theta(const Matrix& psi, const linsys::ThetaSet& set, double margin = 1e-3) {
  require_dims(psi.rows() == set.n && psi.cols() == set.n + set.m, "project_theta: psi has wrong shape");
  if (!psi.allFinite()) throw Error("project_theta: psi is not finite");
  Matrix out = psi;
  const double nrm = out.norm();
  if (nrm > set.S) out *= set.S / nrm;
  const double rho = linsys::spectral_radius(out.leftCols(set.n));
  if (rho > set.rho_max) out.leftCols(set.n) *= (set.rho_max - margin) / rho;
  return out;
}

/// Anchor of an episode: the interval fit farthest from phi (smallest j on ties).
inline std::size_t episode_anchor_index(const std::vector<Matrix>& fits, const Matrix& phi) {
  if (fits.empty()) throw Error("episode_anchor: no completed interval");
  std::size_t best = 0;
  double best_d = frobenius_distance(fits[0], phi);
  for (std::size_t j = 1; j < fits.size(); ++j) {
    const double d = frobenius_distance(fits[j], phi);
    if (d > best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

inline Matrix episode_anchor(const std::vector<Matrix>& fits, const Matrix& phi) {
  return fits[episode_anchor_index(fits, phi)];
}

struct MetaState {
  Matrix phi;        // current prior
  long episode = 1;  // index i of the next update
  std::vector<double> losses;
  std::vector<Matrix> anchors;
  Matrix last_psi;
  double cumulative_loss = 0.0;

  static MetaState initial(const Matrix& phi0) {
    MetaState s;
    s.phi = phi0;
    return s;
  }
};

/// One OGD step with eta_i = 1/sqrt(i) on l(phi) = ||anchor - phi||_F.
inline MetaState meta_update(const MetaState& state, const Matrix& anchor, const linsys::ThetaSet& set) {
  if (state.episode < 1) throw Error("meta_update: episode index must be >= 1");
  require_dims(anchor.rows() == state.phi.rows() && anchor.cols() == state.phi.cols(), "meta_update: anchor shape");
  MetaState next = state;
  const Matrix diff = anchor - state.phi;
  const double loss = diff.norm();
  Matrix grad = Matrix::Zero(diff.rows(), diff.cols());
  if (loss > 0) grad = -diff / loss;
  const double eta = 1.0 / std::sqrt(static_cast<double>(state.episode));
  next.last_psi = state.phi - eta * grad;
  next.phi = project_theta(next.last_psi, set);
  next.losses.push_back(loss);
  next.anchors.push_back(anchor);
  next.cumulative_loss += loss;
  next.episode = state.episode + 1;
  return next;
}

}  // namespace metarhc::outer
