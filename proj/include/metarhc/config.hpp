#pragma once

// Experiment configuration: JSON schema with nested sections, strict key
// checking, dotted-path overrides, and the built-in presets.

#include "metarhc/common.hpp"
#include "metarhc/cost.hpp"
#include "metarhc/inner.hpp"
#include "metarhc/linsys.hpp"
#include "metarhc/policy.hpp"
#include "metarhc/qp.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace metarhc::harness {

using json = nlohmann::json;

struct RunConfig {
  // system
  Index n = 2;
  Index m = 1;
  Vector x_s;  // empty = zero
  // theta set
  double S = 2.0;
  double rho_max = 0.95;
  std::optional<Matrix> anchor_A;
  std::optional<Matrix> anchor_B;
  double task_radius = 0.1;
  int max_rejections = 10000;
  // episodes
  long T = 256;
  long N = 20;
  // noise
  double R = 0.05;
  double eps_c = 0.2;
  // learning
  double delta = 0.1;
  std::optional<double> lambda;  // auto = T^{1/4}
  std::optional<long> H;         // auto = j* n_c + n
  inner::BetaVariant beta_variant = inner::BetaVariant::interval;
  std::optional<Matrix> phi_init;  // auto = 0
  int k_theta = 8;
  int xhat_iterations = 20;
  // mpc
  Index M = 12;
  bool preview_clamp = true;
  bool y_feedback = false;
  // cost schedule and input polytope
  std::vector<Matrix> Q;
  std::vector<Matrix> R_cost;
  Matrix F;
  Vector b;
  // solver
  qp::QPOptions solver;
  // flags
  bool perturbation = true;
  bool meta_update = true;
  // seeds
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::uint64_t> episode_seeds;  // optional explicit per-episode seeds
  // sweep
  std::string sweep_axis;  // "T" or "N"; empty = none
  std::vector<long> sweep_values;

  Vector initial_state() const { return x_s.size() ? x_s : Vector::Zero(n); }

  linsys::ThetaSet theta_set() const {
    linsys::ThetaSet s;
    s.n = n;
    s.m = m;
    s.S = S;
    s.rho_max = rho_max;
    if (anchor_A && anchor_B) s.anchor = linsys::SystemParams(*anchor_A, *anchor_B);
    s.task_radius = task_radius;
    s.max_rejections = max_rejections;
    return s;
  }

  qp::QuadCostSpec cost() const { return qp::QuadCostSpec(Q, R_cost); }
  qp::InputPolytope polytope() const { return qp::InputPolytope(F, b); }
  Matrix initial_phi() const { return phi_init ? *phi_init : Matrix::Zero(n, n + m); }

  inner::InnerConstants constants() const {
    auto c = inner::compute_constants(n, m, T, N, delta, R, S, H, lambda);
    c.beta_variant = beta_variant;
    return c;
  }

  /// Throws ConfigError naming the offending field. `theta` also checks that
  /// the anchor is a member of the parameter set.
  void validate(bool theta = true) const {
    auto fail = [](const std::string& path, const std::string& why) { throw ConfigError(path + ": " + why); };
    if (n < 1) fail("system.n", "must be >= 1");
    if (m < 1) fail("system.m", "must be >= 1");
    if (x_s.size() && x_s.size() != n) fail("system.x_s", "must have n entries");
    if (!(S > 0)) fail("theta_set.S", "must be positive");
    if (!(rho_max > 0 && rho_max < 1)) fail("theta_set.rho_max", "must lie in (0,1)");
    if (task_radius < 0) fail("theta_set.task_radius", "must be nonnegative");
    if (max_rejections < 1) fail("theta_set.max_rejections", "must be >= 1");
    if (anchor_A.has_value() != anchor_B.has_value()) fail("theta_set.anchor", "needs both A and B");
    if (anchor_A && (anchor_A->rows() != n || anchor_A->cols() != n)) fail("theta_set.anchor.A", "must be n x n");
    if (anchor_B && (anchor_B->rows() != n || anchor_B->cols() != m)) fail("theta_set.anchor.B", "must be n x m");
    if (T < 1) fail("episodes.T", "must be >= 1");
    if (N < 1) fail("episodes.N", "must be >= 1");
    if (R < 0) fail("noise.R", "must be nonnegative");
    if (eps_c < 0) fail("noise.eps_c", "must be nonnegative");
    if (!(delta > 0 && delta < 1)) fail("learning.delta", "must lie in (0,1)");
    if (lambda && *lambda < 0) fail("learning.lambda", "must be nonnegative");
    if (H && *H < 1) fail("learning.H", "must be >= 1");
    if (phi_init && (phi_init->rows() != n || phi_init->cols() != n + m)) fail("learning.phi_init", "must be n x (n+m)");
    if (k_theta < 1) fail("learning.k_theta", "must be >= 1");
    if (xhat_iterations < 0) fail("learning.xhat_iterations", "must be >= 0");
    if (M < 1) fail("mpc.horizon", "must be >= 1");
    if (Q.empty() || Q.size() != R_cost.size()) fail("cost", "Q and R schedules must be nonempty and equally long");
    try {
      cost().validate(n, m);
    } catch (const ConfigError& e) {
      fail("cost", e.what());
    }
    if (F.cols() != m) fail("constraints.F", "must have m columns");
    if (F.rows() != b.size()) fail("constraints.b", "must have one entry per row of F");
    try {
      (void)polytope();
    } catch (const ConfigError& e) {
      fail("constraints", e.what());
    }
    if (!(solver.tol_kkt > 0)) fail("solver.tol_kkt", "must be positive");
    if (!(solver.tol_feas > 0)) fail("solver.tol_feas", "must be positive");
    if (solver.max_iterations < 1) fail("solver.max_iterations", "must be >= 1");
    if (seeds.empty()) fail("seeds", "must be nonempty");
    if (!episode_seeds.empty() && static_cast<long>(episode_seeds.size()) < N)
      fail("episode_seeds", "must list at least N seeds");
    if (!sweep_axis.empty()) {
      if (sweep_axis != "T" && sweep_axis != "N") fail("sweep.axis", "must be \"T\" or \"N\"");
      if (sweep_values.empty()) fail("sweep.values", "must be nonempty");
      for (std::size_t i = 0; i < sweep_values.size(); ++i) {
        if (sweep_values[i] < 1) fail("sweep.values", "must be positive");
        if (i && sweep_values[i] <= sweep_values[i - 1]) fail("sweep.values", "must be sorted ascending");
      }
    }
    if (!theta) return;
    try {
      theta_set().validate();
    } catch (const ConfigError& e) {
      fail("theta_set", e.what());
    }
  }
};

// ---------------------------------------------------------------- JSON codec

namespace detail {

inline json matrix_to_json(const Matrix& M) {
  json rows = json::array();
  for (Index i = 0; i < M.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < M.cols(); ++j) r.push_back(M(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline json vector_to_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  return j.get<double>();
}

inline long integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
  return j.get<long>();
}

inline bool boolean(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
  return j.get<bool>();
}

inline Matrix matrix_from_json(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ConfigError(path + ": expected a nonempty array of rows");
  const Index rows = static_cast<Index>(j.size());
  if (!j[0].is_array() || j[0].empty()) throw ConfigError(path + ": expected rows as arrays");
  const Index cols = static_cast<Index>(j[0].size());
  Matrix M(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) throw ConfigError(path + ": ragged rows");
    for (Index c = 0; c < cols; ++c)
      M(r, c) = number(row[static_cast<std::size_t>(c)], path + "[" + std::to_string(r) + "][" + std::to_string(c) + "]");
  }
  return M;
}

inline Vector vector_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = number(j[i], path + "[" + std::to_string(i) + "]");
  return v;
}

// A matrix or a schedule (array of matrices).
inline std::vector<Matrix> schedule_from_json(const json& j, const std::string& path) {
  if (j.is_array() && !j.empty() && j[0].is_array() && !j[0].empty() && j[0][0].is_array()) {
    std::vector<Matrix> out;
    for (std::size_t k = 0; k < j.size(); ++k) out.push_back(matrix_from_json(j[k], path + "[" + std::to_string(k) + "]"));
    return out;
  }
  return {matrix_from_json(j, path)};
}

inline std::vector<std::uint64_t> seeds_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array of nonnegative integers");
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number_unsigned() && !(j[i].is_number_integer() && j[i].get<long long>() >= 0))
      throw ConfigError(path + "[" + std::to_string(i) + "]: expected a nonnegative integer");
    out.push_back(j[i].get<std::uint64_t>());
  }
  return out;
}

inline void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("unknown key: " + (path.empty() ? "" : path + ".") + it.key());
}

}  // namespace detail

/// Parses a configuration object on top of `base` (fields absent from `j`
/// keep their values from `base`).
inline RunConfig config_from_json(const json& j, RunConfig c, bool check_theta = true) {
  using namespace detail;
  check_keys(j, "", {"system", "theta_set", "episodes", "noise", "learning", "mpc", "cost", "constraints", "solver",
                     "flags", "seeds", "episode_seeds", "sweep"});
  if (j.contains("system")) {
    const auto& s = j["system"];
    check_keys(s, "system", {"n", "m", "x_s"});
    if (s.contains("n")) c.n = integer(s["n"], "system.n");
    if (s.contains("m")) c.m = integer(s["m"], "system.m");
    if (s.contains("x_s")) c.x_s = vector_from_json(s["x_s"], "system.x_s");
  }
  if (j.contains("theta_set")) {
    const auto& s = j["theta_set"];
    check_keys(s, "theta_set", {"S", "rho_max", "anchor", "task_radius", "max_rejections"});
    if (s.contains("S")) c.S = number(s["S"], "theta_set.S");
    if (s.contains("rho_max")) c.rho_max = number(s["rho_max"], "theta_set.rho_max");
    if (s.contains("task_radius")) c.task_radius = number(s["task_radius"], "theta_set.task_radius");
    if (s.contains("max_rejections")) c.max_rejections = static_cast<int>(integer(s["max_rejections"], "theta_set.max_rejections"));
    if (s.contains("anchor")) {
      const auto& a = s["anchor"];
      if (a.is_null()) {
        c.anchor_A.reset();
        c.anchor_B.reset();
      } else {
        check_keys(a, "theta_set.anchor", {"A", "B"});
        if (!a.contains("A") || !a.contains("B")) throw ConfigError("theta_set.anchor: needs both A and B");
        c.anchor_A = matrix_from_json(a["A"], "theta_set.anchor.A");
        c.anchor_B = matrix_from_json(a["B"], "theta_set.anchor.B");
      }
    }
  }
  if (j.contains("episodes")) {
    const auto& s = j["episodes"];
    check_keys(s, "episodes", {"T", "N"});
    if (s.contains("T")) c.T = integer(s["T"], "episodes.T");
    if (s.contains("N")) c.N = integer(s["N"], "episodes.N");
  }
  if (j.contains("noise")) {
    const auto& s = j["noise"];
    check_keys(s, "noise", {"R", "eps_c"});
    if (s.contains("R")) c.R = number(s["R"], "noise.R");
    if (s.contains("eps_c")) c.eps_c = number(s["eps_c"], "noise.eps_c");
  }
  if (j.contains("learning")) {
    const auto& s = j["learning"];
    check_keys(s, "learning", {"delta", "lambda", "H", "beta_variant", "phi_init", "k_theta", "xhat_iterations"});
    if (s.contains("delta")) c.delta = number(s["delta"], "learning.delta");
    if (s.contains("lambda")) {
      if (s["lambda"] == "auto") c.lambda.reset();
      else c.lambda = number(s["lambda"], "learning.lambda");
    }
    if (s.contains("H")) {
      if (s["H"] == "auto") c.H.reset();
      else c.H = integer(s["H"], "learning.H");
    }
    if (s.contains("beta_variant")) {
      const auto& v = s["beta_variant"];
      if (v == "interval") c.beta_variant = inner::BetaVariant::interval;
      else if (v == "algorithm") c.beta_variant = inner::BetaVariant::algorithm;
      else throw ConfigError("learning.beta_variant: expected \"interval\" or \"algorithm\"");
    }
    if (s.contains("phi_init")) {
      if (s["phi_init"] == "zero") c.phi_init.reset();
      else c.phi_init = matrix_from_json(s["phi_init"], "learning.phi_init");
    }
    if (s.contains("k_theta")) c.k_theta = static_cast<int>(integer(s["k_theta"], "learning.k_theta"));
    if (s.contains("xhat_iterations"))
      c.xhat_iterations = static_cast<int>(integer(s["xhat_iterations"], "learning.xhat_iterations"));
  }
  if (j.contains("mpc")) {
    const auto& s = j["mpc"];
    check_keys(s, "mpc", {"horizon", "preview_clamp", "y_feedback"});
    if (s.contains("horizon")) c.M = integer(s["horizon"], "mpc.horizon");
    if (s.contains("preview_clamp")) c.preview_clamp = boolean(s["preview_clamp"], "mpc.preview_clamp");
    if (s.contains("y_feedback")) c.y_feedback = boolean(s["y_feedback"], "mpc.y_feedback");
  }
  if (j.contains("cost")) {
    const auto& s = j["cost"];
    check_keys(s, "cost", {"Q", "R"});
    if (s.contains("Q")) c.Q = schedule_from_json(s["Q"], "cost.Q");
    if (s.contains("R")) c.R_cost = schedule_from_json(s["R"], "cost.R");
  }
  if (j.contains("constraints")) {
    const auto& s = j["constraints"];
    check_keys(s, "constraints", {"box", "F", "b"});
    if (s.contains("box")) {
      if (s.contains("F") || s.contains("b")) throw ConfigError("constraints: give either box or F/b");
      const auto& bx = s["box"];
      check_keys(bx, "constraints.box", {"lo", "hi"});
      if (!bx.contains("lo") || !bx.contains("hi")) throw ConfigError("constraints.box: needs lo and hi");
      const Vector lo = vector_from_json(bx["lo"], "constraints.box.lo");
      const Vector hi = vector_from_json(bx["hi"], "constraints.box.hi");
      if (lo.size() != hi.size()) throw ConfigError("constraints.box: lo and hi differ in length");
      c.F.resize(2 * lo.size(), lo.size());
      c.F << Matrix::Identity(lo.size(), lo.size()), -Matrix::Identity(lo.size(), lo.size());
      c.b.resize(2 * lo.size());
      c.b << hi, -lo;
    } else {
      if (s.contains("F")) c.F = matrix_from_json(s["F"], "constraints.F");
      if (s.contains("b")) c.b = vector_from_json(s["b"], "constraints.b");
    }
  }
  if (j.contains("solver")) {
    const auto& s = j["solver"];
    check_keys(s, "solver", {"tol_kkt", "tol_feas", "max_iterations", "regularization"});
    if (s.contains("tol_kkt")) c.solver.tol_kkt = number(s["tol_kkt"], "solver.tol_kkt");
    if (s.contains("tol_feas")) c.solver.tol_feas = number(s["tol_feas"], "solver.tol_feas");
    if (s.contains("max_iterations")) c.solver.max_iterations = static_cast<int>(integer(s["max_iterations"], "solver.max_iterations"));
    if (s.contains("regularization")) c.solver.regularization = number(s["regularization"], "solver.regularization");
  }
  if (j.contains("flags")) {
    const auto& s = j["flags"];
    check_keys(s, "flags", {"perturbation", "meta_update"});
    if (s.contains("perturbation")) c.perturbation = boolean(s["perturbation"], "flags.perturbation");
    if (s.contains("meta_update")) c.meta_update = boolean(s["meta_update"], "flags.meta_update");
  }
  if (j.contains("seeds")) c.seeds = seeds_from_json(j["seeds"], "seeds");
  if (j.contains("episode_seeds")) c.episode_seeds = seeds_from_json(j["episode_seeds"], "episode_seeds");
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    if (s.is_null()) {
      c.sweep_axis.clear();
      c.sweep_values.clear();
    } else {
      check_keys(s, "sweep", {"axis", "values"});
      if (s.contains("axis")) {
        if (!s["axis"].is_string()) throw ConfigError("sweep.axis: expected a string");
        c.sweep_axis = s["axis"].get<std::string>();
      }
      if (s.contains("values")) {
        c.sweep_values.clear();
        if (!s["values"].is_array()) throw ConfigError("sweep.values: expected an array");
        for (std::size_t i = 0; i < s["values"].size(); ++i)
          c.sweep_values.push_back(integer(s["values"][i], "sweep.values[" + std::to_string(i) + "]"));
      }
    }
  }
  c.validate(check_theta);
  return c;
}

inline json config_to_json(const RunConfig& c) {
  using namespace detail;
  json j;
  j["system"] = {{"n", c.n}, {"m", c.m}, {"x_s", vector_to_json(c.initial_state())}};
  json ts = {{"S", c.S}, {"rho_max", c.rho_max}, {"task_radius", c.task_radius}, {"max_rejections", c.max_rejections}};
  if (c.anchor_A) ts["anchor"] = {{"A", matrix_to_json(*c.anchor_A)}, {"B", matrix_to_json(*c.anchor_B)}};
  else ts["anchor"] = nullptr;
  j["theta_set"] = ts;
  j["episodes"] = {{"T", c.T}, {"N", c.N}};
  j["noise"] = {{"R", c.R}, {"eps_c", c.eps_c}};
  json l;
  l["delta"] = c.delta;
  l["lambda"] = c.lambda ? json(*c.lambda) : json("auto");
  l["H"] = c.H ? json(*c.H) : json("auto");
  l["beta_variant"] = c.beta_variant == inner::BetaVariant::interval ? "interval" : "algorithm";
  l["phi_init"] = c.phi_init ? matrix_to_json(*c.phi_init) : json("zero");
  l["k_theta"] = c.k_theta;
  l["xhat_iterations"] = c.xhat_iterations;
  j["learning"] = l;
  j["mpc"] = {{"horizon", c.M}, {"preview_clamp", c.preview_clamp}, {"y_feedback", c.y_feedback}};
  json q = json::array(), r = json::array();
  for (const auto& M : c.Q) q.push_back(matrix_to_json(M));
  for (const auto& M : c.R_cost) r.push_back(matrix_to_json(M));
  j["cost"] = {{"Q", q}, {"R", r}};
  j["constraints"] = {{"F", matrix_to_json(c.F)}, {"b", vector_to_json(c.b)}};
  j["solver"] = {{"tol_kkt", c.solver.tol_kkt},
                 {"tol_feas", c.solver.tol_feas},
                 {"max_iterations", c.solver.max_iterations},
                 {"regularization", c.solver.regularization}};
  j["flags"] = {{"perturbation", c.perturbation}, {"meta_update", c.meta_update}};
  j["seeds"] = c.seeds;
  j["episode_seeds"] = c.episode_seeds;
  if (c.sweep_axis.empty()) j["sweep"] = nullptr;
  else j["sweep"] = {{"axis", c.sweep_axis}, {"values", c.sweep_values}};
  return j;
}

/// Desk-scale preset: n=2, m=1, T=256, N=20, U=[-1,1].
inline RunConfig default_config() {
  RunConfig c;
  c.n = 2;
  c.m = 1;
  Matrix A(2, 2);
  A << 0.8, 0.1, 0.0, 0.7;
  Matrix B(2, 1);
  B << 0.0, 1.0;
  c.anchor_A = A;
  c.anchor_B = B;
  c.Q = {Matrix::Identity(2, 2)};
  c.R_cost = {0.1 * Matrix::Identity(1, 1)};
  c.F.resize(2, 1);
  c.F << 1.0, -1.0;
  c.b = Vector::Constant(2, 1.0);
  c.validate();
  return c;
}

/// Scalar preset (n = m = 1) around A=0.5, B=1.
inline RunConfig scalar_config() {
  RunConfig c = default_config();
  c.n = 1;
  c.m = 1;
  c.anchor_A = Matrix::Constant(1, 1, 0.5);
  c.anchor_B = Matrix::Constant(1, 1, 1.0);
  c.Q = {Matrix::Identity(1, 1)};
  c.R_cost = {0.1 * Matrix::Identity(1, 1)};
  c.validate();
  return c;
}

/// Applies "a.b.c=value" overrides. The value is parsed as JSON when possible
/// and taken as a string otherwise.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\": expected KEY=VALUE");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  std::string ptr;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("override \"" + assignment + "\": empty path component");
    ptr += "/" + part;
  }
  j[json::json_pointer(ptr)] = value;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Loads a configuration file (or the default preset when `path` is empty)
/// and applies overrides.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {},
                             bool check_theta = true) {
  json j = path.empty() ? json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j, default_config(), check_theta);
}

/// Episode configuration for one run of the meta-loop.
inline policy::EpisodeConfig episode_config(const RunConfig& c, const inner::InnerConstants& k, std::uint64_t noise_seed) {
  policy::EpisodeConfig e;
  e.T = c.T;
  e.theta_set = c.theta_set();
  e.cost = c.cost();
  e.constraints = c.polytope();
  e.consts = k;
  e.mpc.horizon = c.M;
  e.mpc.cost = e.cost;
  e.mpc.constraints = e.constraints;
  e.mpc.solver = c.solver;
  e.mpc.preview_clamp = c.preview_clamp;
  e.select.k_theta = c.k_theta;
  e.select.xhat_iterations = c.xhat_iterations;
  e.select.solver = c.solver;
  e.noise = {c.R, c.eps_c, noise_seed};
  e.x_s = c.initial_state();
  e.perturbation = c.perturbation;
  e.y_feedback = c.y_feedback;
  return e;
}

}  // namespace metarhc::harness
