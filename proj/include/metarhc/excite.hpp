#pragma once

// Excitation: perturbations that keep the stacked-input block matrices full
// rank within an interval, and the online excitation certificate.

#include "metarhc/common.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <vector>

namespace metarhc::excite {

struct NullDirection {
  Vector w_perp;         // unit vector orthogonal to the retained columns, length (n+1)m
  Vector u_perp;         // its last block (length m)
  bool e_perp_zero = true;
};

/// Unit vector orthogonal to every column of `retained` ((n+1)m rows). When
/// the complement has more than one dimension, the direction with the largest
/// last block is taken.
inline NullDirection null_direction(const Matrix& retained, Index m, double floor = 1e-10) {
  const Index q = retained.rows();
  require_dims(q > 0 && m > 0 && q % m == 0, "null_direction: rows must be a multiple of m");
  Matrix basis;
  if (retained.cols() == 0) {
    basis = Matrix::Identity(q, q);
  } else {
    Eigen::JacobiSVD<Matrix> svd(retained, Eigen::ComputeFullU);
    const auto& s = svd.singularValues();
    const double scale = std::max(1.0, s(0));
    Index rank = 0;
    for (Index i = 0; i < s.size(); ++i)
      if (s(i) > floor * scale) ++rank;
    basis = svd.matrixU().rightCols(q - rank);
  }
  NullDirection out;
  if (basis.cols() == 0) {
    out.w_perp = Vector::Zero(q);
    out.u_perp = Vector::Zero(m);
    return out;
  }
  Eigen::JacobiSVD<Matrix> last(basis.bottomRows(m), Eigen::ComputeFullV);
  out.w_perp = basis * last.matrixV().col(0);
  out.w_perp.normalize();
  out.u_perp = out.w_perp.tail(m);
  out.e_perp_zero = out.u_perp.norm() < floor;
  return out;
}

enum class Case { lead_in, perp, flip, double_flip, along, no_perp };

inline const char* to_string(Case c) {
  switch (c) {
    case Case::lead_in: return "lead-in";
    case Case::perp: return "perp";
    case Case::flip: return "flip";
    case Case::double_flip: return "double-flip";
    case Case::along: return "along";
    case Case::no_perp: return "no-perp";
  }
  return "?";
}

struct PerturbResult {
  Vector du;
  Case which = Case::along;
  double g = 0.0;
  double g_perp = 0.0;
};

inline Vector unit_or_first(const Vector& u) {
  const double nu = u.norm();
  if (nu > 0) return u / nu;
  Vector e = Vector::Zero(u.size());
  e(0) = 1.0;
  return e;
}

inline double sign_pos(double v) { return v < 0 ? -1.0 : 1.0; }

/// Case table for the perturbation of the input that completes a column.
/// `g` is the inner product of W_perp with the already fixed part of the new
/// column, `dir` the orthogonal direction for the current slot.
inline PerturbResult perturb(const Vector& u, const NullDirection& dir, double g, double c_p, double zero_tol = 1e-12) {
  PerturbResult r;
  r.g = g;
  const double s = std::sqrt(c_p);
  const Vector e_t = unit_or_first(u);
  if (dir.e_perp_zero) {
    r.which = Case::no_perp;
    r.du = s * e_t;
    return r;
  }
  const Vector e_perp = dir.u_perp / dir.u_perp.norm();
  r.g_perp = dir.u_perp.dot(u);
  if (std::abs(r.g_perp) <= zero_tol) {
    r.which = Case::perp;
    r.du = sign_pos(g) * s * e_perp;
    return r;
  }
  const double gs = sign_pos(r.g_perp + g) * sign_pos(r.g_perp);
  if (gs < 0) {
    if (std::abs(u.norm() - s) >= s) {
      r.which = Case::flip;
      r.du = gs * s * e_t;
    } else {
      r.which = Case::double_flip;
      r.du = 2.0 * gs * s * e_t;
    }
    return r;
  }
  r.which = Case::along;
  r.du = s * e_t;
  return r;
}

/// Per-episode perturbation generator. Columns W_k = [ubar_k; ...; ubar_{k+n}]
/// restart at every interval.
class Exciter {
 public:
  Exciter(Index n, Index m) : n_(n), m_(m), q_((n + 1) * m) {
    require_dims(n > 0 && m > 0, "exciter: n and m must be positive");
  }

  void start_interval(long j, double c_p) {
    if (!(c_p > 0)) throw Error("exciter: c_p must be positive");
    j_ = j;
    c_p_ = c_p;
    ubar_.clear();
  }

  /// Perturbation for the next intermediate input u; records ubar = u + du.
  PerturbResult next(const Vector& u) {
    require_dims(u.size() == m_, "exciter: u has wrong size");
    const Index r = static_cast<Index>(ubar_.size());
    PerturbResult res;
    if (r < n_) {
      res.which = Case::lead_in;
      res.du = std::sqrt(c_p_) * unit_or_first(u);
    } else {
      const Index col = r - n_;  // column completed by this input
      const Index first = std::max<Index>(0, col - (q_ - 1));
      const Matrix retained = columns(first, col);
      const NullDirection dir = null_direction(retained, m_);
      double g = 0.0;
      for (Index b = 0; b < n_; ++b) g += dir.w_perp.segment(b * m_, m_).dot(ubar_[static_cast<std::size_t>(col + b)]);
      res = perturb(u, dir, g, c_p_);
      last_alignment_ = g + dir.u_perp.dot(u + res.du);
      last_dir_ = dir;
      has_alignment_ = !dir.e_perp_zero || dir.w_perp.norm() > 0;
    }
    ubar_.push_back(u + res.du);
    return res;
  }

  /// Columns W_first .. W_{last-1} of the current interval.
  Matrix columns(Index first, Index last) const {
    Matrix M(q_, std::max<Index>(0, last - first));
    for (Index c = first; c < last; ++c)
      for (Index b = 0; b <= n_; ++b) M.block(b * m_, c - first, m_, 1) = ubar_[static_cast<std::size_t>(c + b)];
    return M;
  }

  /// Number of complete columns in the current interval.
  Index complete_columns() const { return std::max<Index>(0, static_cast<Index>(ubar_.size()) - n_); }

  /// The latest block of q complete columns (empty if fewer exist).
  Matrix latest_block() const {
    const Index k = complete_columns();
    if (k < q_) return Matrix(q_, 0);
    return columns(k - q_, k);
  }

  double last_alignment() const { return last_alignment_; }
  bool has_alignment() const { return has_alignment_; }
  Index q() const { return q_; }
  double c_p() const { return c_p_; }
  long interval() const { return j_; }
  const std::vector<Vector>& interval_inputs() const { return ubar_; }

 private:
  Index n_, m_, q_;
  long j_ = 0;
  double c_p_ = 1.0;
  std::vector<Vector> ubar_;
  NullDirection last_dir_;
  double last_alignment_ = 0.0;
  bool has_alignment_ = false;
};

struct PECertificate {
  long interval = 0;
  double lambda_min = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

/// lambda_min(sum z_k z_k') against gamma * c_p * t_j.
inline PECertificate certify_pe(const std::vector<Vector>& z, long j, double gamma, double c_p, long t_j) {
  if (z.empty()) throw Error("certify_pe: empty history");
  const Index d = z.front().size();
  Matrix V = Matrix::Zero(d, d);
  for (const auto& zk : z) {
    require_dims(zk.size() == d, "certify_pe: inconsistent regressor size");
    V.noalias() += zk * zk.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(V, Eigen::EigenvaluesOnly);
  PECertificate c;
  c.interval = j;
  c.lambda_min = es.eigenvalues().minCoeff();
  c.threshold = gamma * c_p * static_cast<double>(t_j);
  c.pass = c.lambda_min >= c.threshold;
  return c;
}

/// u_k = e_j for the largest j <= m with (k-1) mod (n+1)j == 0, else 0.
inline Vector probing_sequence(long k, Index n, Index m) {
  if (k < 1) throw Error("probing_sequence: k must be >= 1");
  Vector u = Vector::Zero(m);
  for (Index j = m; j >= 1; --j) {
    if ((k - 1) % ((n + 1) * j) == 0) {
      u(j - 1) = 1.0;
      break;
    }
  }
  return u;
}

}  // namespace metarhc::excite
