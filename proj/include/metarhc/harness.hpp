#pragma once

// Meta-runs, sweeps, result files, configuration checks and plot tables.

#include "metarhc/common.hpp"
#include "metarhc/config.hpp"
#include "metarhc/excite.hpp"
#include "metarhc/inner.hpp"
#include "metarhc/linsys.hpp"
#include "metarhc/outer.hpp"
#include "metarhc/policy.hpp"
#include "metarhc/qp.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace metarhc::harness {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ logging

enum class Verbosity { quiet = 0, info = 1, debug = 2 };

inline std::atomic<int>& verbosity_level() {
  static std::atomic<int> level{static_cast<int>(Verbosity::info)};
  return level;
}

inline void log(Verbosity v, const std::string& msg) {
  if (static_cast<int>(v) > verbosity_level().load()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << (v == Verbosity::debug ? "[debug] " : "[info] ") << msg << "\n";
}

// ------------------------------------------------------------------ rows

struct EpisodeRow {
  long episode_index = 0;
  std::uint64_t seed = 0;
  double regret = 0.0;
  double baseline_cost = 0.0;
  double policy_cost = 0.0;
  double violation = 0.0;
  double E_theta = 0.0;
  int coverage_all_intervals = 0;
  int pe_all_intervals = 0;
  double phi_distance = 0.0;
};

inline const char* kEpisodeHeader =
    "episode_index,seed,regret,baseline_cost,policy_cost,violation,E_theta,coverage_all_intervals,pe_all_intervals,"
    "phi_distance";

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string episodes_csv(const std::vector<EpisodeRow>& rows) {
  std::ostringstream os;
  os << kEpisodeHeader << "\n";
  for (const auto& r : rows) {
    os << r.episode_index << "," << r.seed << "," << fmt(r.regret) << "," << fmt(r.baseline_cost) << ","
       << fmt(r.policy_cost) << "," << fmt(r.violation) << "," << fmt(r.E_theta) << "," << r.coverage_all_intervals
       << "," << r.pe_all_intervals << "," << fmt(r.phi_distance) << "\n";
  }
  return os.str();
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("missing file: " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
  }
  fs::rename(tmp, p);
}

inline std::vector<EpisodeRow> parse_episodes_csv(const std::string& text, const std::string& where = "episodes.csv") {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || line != kEpisodeHeader) throw Error("schema mismatch in " + where);
  std::vector<EpisodeRow> rows;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 10) throw Error("schema mismatch in " + where + ": expected 10 fields");
    try {
      EpisodeRow r;
      r.episode_index = std::stol(f[0]);
      r.seed = std::stoull(f[1]);
      r.regret = std::stod(f[2]);
      r.baseline_cost = std::stod(f[3]);
      r.policy_cost = std::stod(f[4]);
      r.violation = std::stod(f[5]);
      r.E_theta = std::stod(f[6]);
      r.coverage_all_intervals = std::stoi(f[7]);
      r.pe_all_intervals = std::stoi(f[8]);
      r.phi_distance = std::stod(f[9]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw Error("schema mismatch in " + where + ": unparsable field");
    }
  }
  return rows;
}

inline std::vector<EpisodeRow> read_episodes_csv(const fs::path& p) { return parse_episodes_csv(read_file(p), p.string()); }

struct Aggregates {
  long episodes = 0;
  double mean_regret = 0.0;
  double mean_violation = 0.0;
  double mean_E_theta = 0.0;  // average cumulative estimation error over the episodes
  double mean_policy_cost = 0.0;
  double mean_baseline_cost = 0.0;
  double mean_phi_distance = 0.0;
  double coverage_rate = 0.0;
  double pe_rate = 0.0;
};

inline Aggregates aggregate(const std::vector<EpisodeRow>& rows) {
  Aggregates a;
  a.episodes = static_cast<long>(rows.size());
  if (rows.empty()) return a;
  for (const auto& r : rows) {
    a.mean_regret += r.regret;
    a.mean_violation += r.violation;
    a.mean_E_theta += r.E_theta;
    a.mean_policy_cost += r.policy_cost;
    a.mean_baseline_cost += r.baseline_cost;
    a.mean_phi_distance += r.phi_distance;
    a.coverage_rate += r.coverage_all_intervals;
    a.pe_rate += r.pe_all_intervals;
  }
  const double k = static_cast<double>(rows.size());
  a.mean_regret /= k;
  a.mean_violation /= k;
  a.mean_E_theta /= k;
  a.mean_policy_cost /= k;
  a.mean_baseline_cost /= k;
  a.mean_phi_distance /= k;
  a.coverage_rate /= k;
  a.pe_rate /= k;
  return a;
}

inline std::string aggregates_csv(const Aggregates& a) {
  std::ostringstream os;
  os << "metric,value\n"
     << "episodes," << a.episodes << "\n"
     << "mean_regret," << fmt(a.mean_regret) << "\n"
     << "mean_violation," << fmt(a.mean_violation) << "\n"
     << "mean_E_theta," << fmt(a.mean_E_theta) << "\n"
     << "mean_policy_cost," << fmt(a.mean_policy_cost) << "\n"
     << "mean_baseline_cost," << fmt(a.mean_baseline_cost) << "\n"
     << "mean_phi_distance," << fmt(a.mean_phi_distance) << "\n"
     << "coverage_rate," << fmt(a.coverage_rate) << "\n"
     << "pe_rate," << fmt(a.pe_rate) << "\n";
  return os.str();
}

// ------------------------------------------------------------------ statistics

struct MeanSe {
  double mean = 0.0;
  double sd = 0.0;
  double se = 0.0;
  long count = 0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  r.count = static_cast<long>(v.size());
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    r.se = r.sd / std::sqrt(static_cast<double>(v.size()));
  }
  return r;
}

struct LineFit {
  double slope = std::nan("");
  double intercept = std::nan("");
};

/// Least-squares fit of log y against log x (NaN when some y <= 0 or fewer than 2 points).
inline LineFit loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  LineFit f;
  if (x.size() != y.size() || x.size() < 2) return f;
  const double k = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) return f;
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = k * sxx - sx * sx;
  if (den == 0) return f;
  f.slope = (k * sxy - sx * sy) / den;
  f.intercept = (sy - f.slope * sx) / k;
  return f;
}

// ------------------------------------------------------------------ meta-run

struct EpisodeOutcome {
  EpisodeRow row;
  Matrix theta_true;
  Matrix phi;     // prior used for the episode
  Matrix anchor;  // theta*,i
  double violation_budget = 0.0;  // sum_j sqrt(c_{p,j}) * H_j
  double max_step_ratio = 0.0;    // max_t violation_t / (||F||_inf * 2 sqrt(c_{p,j}))
  double max_step_excess = 0.0;   // max_t violation_t - ||F||_inf * 2 sqrt(c_{p,j})
  double min_abs_alignment = std::numeric_limits<double>::infinity();
  std::vector<excite::PECertificate> pe;
  std::vector<bool> coverage;
  std::optional<policy::EpisodeTrace> trace;
};

struct RunOptions {
  bool keep_traces = false;
  std::optional<outer::MetaState> resume_state;
  std::vector<EpisodeOutcome> resume_outcomes;
  std::function<void(const EpisodeOutcome&, const outer::MetaState&)> on_episode;
};

struct RunResult {
  std::uint64_t seed = 0;
  inner::InnerConstants consts;
  std::vector<EpisodeOutcome> episodes;
  outer::MetaState meta;

  std::vector<EpisodeRow> rows() const {
    std::vector<EpisodeRow> r;
    for (const auto& e : episodes) r.push_back(e.row);
    return r;
  }
};

inline std::uint64_t episode_seed(const RunConfig& cfg, std::uint64_t run_seed, long i) {
  if (!cfg.episode_seeds.empty()) return cfg.episode_seeds.at(static_cast<std::size_t>(i - 1));
  return mix_seed(run_seed, static_cast<std::uint64_t>(i));
}

inline std::uint64_t theta_seed(std::uint64_t ep_seed) { return mix_seed(ep_seed, 1); }
inline std::uint64_t noise_seed(std::uint64_t ep_seed) { return mix_seed(ep_seed, 2); }

/// Executes the meta-loop for one seed: sample the plant, run the episode,
/// score it against the constrained optimum, and update the prior.
inline RunResult run_meta(const RunConfig& cfg, std::uint64_t seed, const RunOptions& opt = {}) {
  cfg.validate();
  RunResult res;
  res.seed = seed;
  res.consts = cfg.constants();
  const auto set = cfg.theta_set();
  const auto cost = cfg.cost();
  const auto poly = cfg.polytope();
  const double Finf = poly.F_inf_norm();
  res.meta = opt.resume_state ? *opt.resume_state : outer::MetaState::initial(cfg.initial_phi());
  res.episodes = opt.resume_outcomes;

  for (long i = res.meta.episode; i <= cfg.N; ++i) {
    EpisodeOutcome out;
    const std::uint64_t es = episode_seed(cfg, seed, i);
    try {
      const auto sys = linsys::sample_theta(set, theta_seed(es));
      const auto ecfg = episode_config(cfg, res.consts, noise_seed(es));
      auto trace = policy::run_episode(sys, res.meta.phi, ecfg);
      const auto base = qp::solve_full_horizon_baseline(sys, cost, poly, cfg.T, cfg.initial_state(), cfg.solver);
      if (!base.optimal()) throw SolverError("baseline problem not solved");
      const auto mtr = policy::episode_metrics(trace, base, sys);
      out.theta_true = sys.theta();
      out.phi = res.meta.phi;
      out.anchor = outer::episode_anchor(trace.fits, res.meta.phi);
      out.row.episode_index = i;
      out.row.seed = es;
      out.row.regret = mtr.regret;
      out.row.baseline_cost = mtr.baseline_cost;
      out.row.policy_cost = mtr.policy_cost;
      out.row.violation = mtr.violation;
      out.row.E_theta = mtr.E_theta;
      out.row.coverage_all_intervals = trace.coverage_all() ? 1 : 0;
      out.row.pe_all_intervals = trace.pe_all() ? 1 : 0;
      out.row.phi_distance = frobenius_distance(out.anchor, res.meta.phi);
      for (std::size_t j = 0; j < trace.c_p.size(); ++j)
        out.violation_budget += std::sqrt(trace.c_p[j]) * static_cast<double>(trace.interval_lengths[j]);
      for (const auto& s : trace.steps) {
        const double cap = Finf * 2.0 * std::sqrt(trace.c_p[static_cast<std::size_t>(s.j - 1)]);
        out.max_step_ratio = std::max(out.max_step_ratio, s.violation / cap);
        out.max_step_excess = std::max(out.max_step_excess, s.violation - cap);
        if (s.has_alignment) out.min_abs_alignment = std::min(out.min_abs_alignment, std::abs(s.alignment));
      }
      out.pe = trace.pe;
      for (const auto& b : trace.boundaries)
        if (b.j > 0) out.coverage.push_back(b.covered);
      if (opt.keep_traces) out.trace = std::move(trace);
    } catch (const Error& e) {
      throw Error(std::string(e.what()) + " [seed " + std::to_string(seed) + ", episode " + std::to_string(i) + "]");
    }
    if (cfg.meta_update) {
      res.meta = outer::meta_update(res.meta, out.anchor, set);
    } else {
      res.meta.losses.push_back(out.row.phi_distance);
      res.meta.anchors.push_back(out.anchor);
      res.meta.cumulative_loss += out.row.phi_distance;
      ++res.meta.episode;
    }
    log(Verbosity::debug, "seed " + std::to_string(seed) + " episode " + std::to_string(i) + " regret " +
                              fmt(out.row.regret) + " E_theta " + fmt(out.row.E_theta));
    if (opt.on_episode) opt.on_episode(out, res.meta);
    res.episodes.push_back(std::move(out));
  }
  return res;
}

// ------------------------------------------------------------------ persistence

inline json constants_to_json(const inner::InnerConstants& c) {
  return {{"lambda", c.lambda},         {"delta_tilde", c.delta_tilde}, {"n_c", c.n_c},
          {"gamma", c.gamma},           {"gamma_y", c.gamma_y},         {"n_c_tilde", c.n_c_tilde},
          {"n_c_tilde2", c.n_c_tilde2}, {"j_star", c.j_star},           {"j_star_rhs", c.j_star_rhs},
          {"H", c.H},                   {"H_overridden", c.H_overridden}, {"R_hat", c.R_hat},
          {"R_tilde", c.R_tilde}};
}

inline json meta_to_json(const outer::MetaState& m) {
  json a = json::array();
  for (const auto& x : m.anchors) a.push_back(detail::matrix_to_json(x));
  return {{"phi", detail::matrix_to_json(m.phi)},
          {"episode", m.episode},
          {"losses", m.losses},
          {"anchors", a},
          {"cumulative_loss", m.cumulative_loss},
          {"last_psi", m.last_psi.size() ? detail::matrix_to_json(m.last_psi) : json(nullptr)}};
}

inline outer::MetaState meta_from_json(const json& j) {
  outer::MetaState m;
  m.phi = detail::matrix_from_json(j.at("phi"), "meta_state.phi");
  m.episode = j.at("episode").get<long>();
  m.losses = j.at("losses").get<std::vector<double>>();
  for (const auto& a : j.at("anchors")) m.anchors.push_back(detail::matrix_from_json(a, "meta_state.anchors"));
  m.cumulative_loss = j.at("cumulative_loss").get<double>();
  if (!j.at("last_psi").is_null()) m.last_psi = detail::matrix_from_json(j.at("last_psi"), "meta_state.last_psi");
  return m;
}

inline json episode_audit_json(const EpisodeOutcome& e) {
  json pe = json::array();
  for (const auto& c : e.pe)
    pe.push_back({{"interval", c.interval}, {"lambda_min", c.lambda_min}, {"threshold", c.threshold}, {"pass", c.pass}});
  json cov = json::array();
  for (bool b : e.coverage) cov.push_back(b);
  return {{"episode_index", e.row.episode_index},
          {"seed", e.row.seed},
          {"theta_true", detail::matrix_to_json(e.theta_true)},
          {"phi", detail::matrix_to_json(e.phi)},
          {"anchor", detail::matrix_to_json(e.anchor)},
          {"violation_budget", e.violation_budget},
          {"max_step_violation_ratio", e.max_step_ratio},
          {"max_step_violation_excess", e.max_step_excess},
          {"pe", pe},
          {"coverage", cov}};
}

inline std::string traces_csv(const std::vector<EpisodeOutcome>& eps, Index n, Index m) {
  std::ostringstream os;
  os << "episode_index,t,j";
  for (Index i = 0; i < n; ++i) os << ",x" << i + 1;
  for (Index i = 0; i < n; ++i) os << ",y" << i + 1;
  for (Index i = 0; i < n; ++i) os << ",xbar" << i + 1;
  for (Index i = 0; i < m; ++i) os << ",u" << i + 1;
  for (Index i = 0; i < m; ++i) os << ",du" << i + 1;
  for (Index i = 0; i < m; ++i) os << ",ubar" << i + 1;
  os << ",cost,violation\n";
  for (const auto& e : eps) {
    if (!e.trace) continue;
    for (const auto& s : e.trace->steps) {
      os << e.row.episode_index << "," << s.t << "," << s.j;
      for (const Vector* v : {&s.x, &s.y, &s.xbar, &s.u, &s.du, &s.ubar})
        for (Index i = 0; i < v->size(); ++i) os << "," << fmt((*v)(i));
      os << "," << fmt(s.cost) << "," << fmt(s.violation) << "\n";
    }
  }
  return os.str();
}

inline json manifest_json(const RunConfig& cfg) {
  json j;
  j["version"] = kVersion;
  j["config"] = config_to_json(cfg);
  j["constants"] = constants_to_json(cfg.constants());
  j["seeds"] = cfg.seeds;
  return j;
}

struct RunFiles {
  bool traces = false;
  bool resume = false;
};

inline fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed_" + std::to_string(seed)); }

/// Runs one seed and keeps its directory up to date after every episode so
/// an interrupted run can resume.
inline RunResult run_seed_to_dir(const RunConfig& cfg, std::uint64_t seed, const fs::path& out, const RunFiles& files) {
  const fs::path dir = seed_dir(out, seed);
  fs::create_directories(dir);
  RunOptions opt;
  opt.keep_traces = files.traces;
  json audits = json::array();
  if (files.resume && fs::exists(dir / "meta_state.json") && fs::exists(dir / "episodes.csv")) {
    const auto meta = meta_from_json(json::parse(read_file(dir / "meta_state.json")));
    const auto rows = read_episodes_csv(dir / "episodes.csv");
    const json prev = fs::exists(dir / "episodes.json") ? json::parse(read_file(dir / "episodes.json")) : json::array();
    if (static_cast<long>(rows.size()) != meta.episode - 1 || prev.size() != rows.size())
      throw Error("resume: " + dir.string() + " is inconsistent");
    for (std::size_t k = 0; k < rows.size(); ++k) {
      EpisodeOutcome e;
      e.row = rows[k];
      opt.resume_outcomes.push_back(e);
      audits.push_back(prev[k]);
    }
    opt.resume_state = meta;
    if (files.traces) log(Verbosity::info, "resume: traces of earlier episodes are not regenerated");
    log(Verbosity::info, "resuming seed " + std::to_string(seed) + " at episode " + std::to_string(meta.episode));
  }
  std::vector<EpisodeRow> rows;
  for (const auto& e : opt.resume_outcomes) rows.push_back(e.row);
  opt.on_episode = [&](const EpisodeOutcome& e, const outer::MetaState& meta) {
    rows.push_back(e.row);
    audits.push_back(episode_audit_json(e));
    write_file(dir / "episodes.csv", episodes_csv(rows));
    write_file(dir / "episodes.json", audits.dump(1) + "\n");
    write_file(dir / "meta_state.json", meta_to_json(meta).dump(1) + "\n");
  };
  auto res = run_meta(cfg, seed, opt);
  write_file(dir / "episodes.csv", episodes_csv(res.rows()));
  write_file(dir / "aggregates.csv", aggregates_csv(aggregate(res.rows())));
  if (files.traces) write_file(dir / "traces.csv", traces_csv(res.episodes, cfg.n, cfg.m));
  return res;
}

/// Runs `fn(k)` for k = 0..count-1 on up to `workers` threads.
inline void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), count));
  std::atomic<std::size_t> next{0};
  auto body = [&] {
    for (std::size_t k = next++; k < count; k = next++) fn(k);
  };
  if (w == 1) {
    body();
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < w; ++i) pool.emplace_back(body);
  for (auto& t : pool) t.join();
}

struct RunSummary {
  std::vector<RunResult> results;  // in seed order
  std::vector<std::string> failures;
};

/// `run`: every seed is an independent meta-chain written to seed_<s>/.
inline RunSummary run_to_dir(const RunConfig& cfg, const fs::path& out, int workers, const RunFiles& files) {
  cfg.validate();
  if (cfg.N < cfg.T)
    log(Verbosity::info, "notice: N < T; the N >= T hypothesis of the regret bound does not hold for this run");
  const auto k = cfg.constants();
  if (k.H_overridden) log(Verbosity::info, "warning: H overridden to " + std::to_string(k.H) + " (j* gives " +
                                               (k.j_star < 0 ? std::string("overflow") : std::to_string(k.j_star * k.n_c + cfg.n)) + ")");
  log(Verbosity::info, "constants: delta_tilde = delta/(2N ln 2T) = " + fmt(k.delta_tilde) + ", lambda = " +
                           fmt(k.lambda) + ", n_c = " + std::to_string(k.n_c) + ", H = " + std::to_string(k.H) +
                           ", gamma_y = " + fmt(k.gamma_y));
  fs::create_directories(out);
  write_file(out / "manifest.json", manifest_json(cfg).dump(1) + "\n");
  RunSummary sum;
  sum.results.resize(cfg.seeds.size());
  std::vector<std::string> errs(cfg.seeds.size());
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(cfg.seeds.size(), workers, [&](std::size_t i) {
    try {
      sum.results[i] = run_seed_to_dir(cfg, cfg.seeds[i], out, files);
      log(Verbosity::info, "seed " + std::to_string(cfg.seeds[i]) + " done");
    } catch (const std::exception& e) {
      errs[i] = e.what();
    }
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file(out / "timing.json", json({{"wall_clock_seconds", secs}}).dump(1) + "\n");
  for (auto& e : errs)
    if (!e.empty()) sum.failures.push_back(e);
  return sum;
}

// ------------------------------------------------------------------ sweep

struct SweepPoint {
  long value = 0;
  MeanSe regret, violation, E_theta;
  long seeds_completed = 0;
};

struct SweepResult {
  std::string axis;
  std::vector<SweepPoint> points;
  LineFit regret_slope, violation_slope, E_theta_slope;
  std::vector<std::string> failures;
};

inline RunConfig with_axis(RunConfig c, const std::string& axis, long v) {
  if (axis == "T") c.T = v;
  else c.N = v;
  c.sweep_axis.clear();
  c.sweep_values.clear();
  return c;
}

inline std::string sweep_csv(const SweepResult& s) {
  std::ostringstream os;
  os << "axis_value,seeds,mean_regret,stderr_regret,mean_violation,stderr_violation,mean_E_theta,stderr_E_theta\n";
  for (const auto& p : s.points)
    os << p.value << "," << p.seeds_completed << "," << fmt(p.regret.mean) << "," << fmt(p.regret.se) << ","
       << fmt(p.violation.mean) << "," << fmt(p.violation.se) << "," << fmt(p.E_theta.mean) << "," << fmt(p.E_theta.se)
       << "\n";
  return os.str();
}

inline std::string slopes_csv(const SweepResult& s) {
  std::ostringstream os;
  os << "metric,slope,intercept\n";
  os << "regret," << fmt(s.regret_slope.slope) << "," << fmt(s.regret_slope.intercept) << "\n";
  os << "violation," << fmt(s.violation_slope.slope) << "," << fmt(s.violation_slope.intercept) << "\n";
  os << "E_theta," << fmt(s.E_theta_slope.slope) << "," << fmt(s.E_theta_slope.intercept) << "\n";
  return os.str();
}

inline fs::path cell_dir(const fs::path& out, const std::string& axis, long v) {
  return out / (axis + "_" + std::to_string(v));
}

/// Per-seed episode means of the completed cells, keyed by axis value.
struct CellTable {
  std::string axis;
  std::vector<long> values;
  std::map<long, std::vector<Aggregates>> per_value;
};

inline CellTable read_cells(const fs::path& out) {
  const fs::path mf = out / "cells.json";
  if (!fs::exists(mf)) throw Error("missing file: " + mf.string());
  const json j = json::parse(read_file(mf));
  if (!j.contains("axis") || !j.contains("values") || !j.contains("completed"))
    throw Error("schema mismatch in " + mf.string());
  CellTable t;
  t.axis = j["axis"].get<std::string>();
  t.values = j["values"].get<std::vector<long>>();
  for (long v : t.values) t.per_value[v];
  for (const auto& c : j["completed"]) {
    const long v = c.at("value").get<long>();
    const auto s = c.at("seed").get<std::uint64_t>();
    t.per_value[v].push_back(aggregate(read_episodes_csv(seed_dir(cell_dir(out, t.axis, v), s) / "episodes.csv")));
  }
  return t;
}

inline SweepResult summarize_cells(const CellTable& t) {
  SweepResult s;
  s.axis = t.axis;
  std::vector<double> xs, yr, yv, ye;
  for (long v : t.values) {
    SweepPoint p;
    p.value = v;
    std::vector<double> r, vi, e;
    for (const auto& a : t.per_value.at(v)) {
      r.push_back(a.mean_regret);
      vi.push_back(a.mean_violation);
      e.push_back(a.mean_E_theta);
    }
    p.regret = mean_se(r);
    p.violation = mean_se(vi);
    p.E_theta = mean_se(e);
    p.seeds_completed = static_cast<long>(r.size());
    if (p.seeds_completed == 0) continue;
    s.points.push_back(p);
    xs.push_back(static_cast<double>(v));
    yr.push_back(p.regret.mean);
    yv.push_back(p.violation.mean);
    ye.push_back(p.E_theta.mean);
  }
  s.regret_slope = loglog_slope(xs, yr);
  s.violation_slope = loglog_slope(xs, yv);
  s.E_theta_slope = loglog_slope(xs, ye);
  return s;
}

/// Cross product (axis value x seed), run concurrently; partial results and
/// the list of completed cells survive failures.
inline SweepResult sweep_to_dir(const RunConfig& cfg, const fs::path& out, int workers, const RunFiles& files) {
  cfg.validate();
  if (cfg.sweep_axis.empty()) throw ConfigError("sweep: no sweep.axis configured");
  fs::create_directories(out);
  struct Cell {
    long value;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (long v : cfg.sweep_values) {
    const RunConfig cv = with_axis(cfg, cfg.sweep_axis, v);
    write_file(cell_dir(out, cfg.sweep_axis, v) / "manifest.json", manifest_json(cv).dump(1) + "\n");
    for (auto s : cfg.seeds) cells.push_back({v, s});
  }
  std::vector<int> ok(cells.size(), 0);
  std::vector<std::string> errs(cells.size());
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(cells.size(), workers, [&](std::size_t k) {
    const auto& c = cells[k];
    try {
      run_seed_to_dir(with_axis(cfg, cfg.sweep_axis, c.value), c.seed, cell_dir(out, cfg.sweep_axis, c.value), files);
      ok[k] = 1;
      log(Verbosity::info, "cell " + cfg.sweep_axis + "=" + std::to_string(c.value) + " seed " + std::to_string(c.seed) + " done");
    } catch (const std::exception& e) {
      errs[k] = e.what();
      log(Verbosity::info, "cell failed: " + errs[k]);
    }
  });
  json done = json::array(), failed = json::array();
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (ok[k]) done.push_back({{"value", cells[k].value}, {"seed", cells[k].seed}});
    else failed.push_back({{"value", cells[k].value}, {"seed", cells[k].seed}, {"error", errs[k]}});
  }
  json mf = {{"version", kVersion}, {"axis", cfg.sweep_axis}, {"values", cfg.sweep_values}, {"seeds", cfg.seeds},
             {"completed", done}, {"failed", failed}};
  write_file(out / "cells.json", mf.dump(1) + "\n");
  auto s = summarize_cells(read_cells(out));
  for (const auto& e : errs)
    if (!e.empty()) s.failures.push_back(e);
  write_file(out / "sweep.csv", sweep_csv(s));
  write_file(out / "slopes.csv", slopes_csv(s));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file(out / "timing.json", json({{"wall_clock_seconds", secs}}).dump(1) + "\n");
  return s;
}

// ------------------------------------------------------------------ validate

struct SystemCheck {
  double rho = 0.0;
  Index controllability_rank = 0;
  double c_g = 0.0;
  double norm = 0.0;
  bool stable = false;
  bool controllable = false;
  bool in_ball = false;
  bool c_g_positive = false;
  bool ok() const { return stable && controllable && in_ball && c_g_positive; }
};

inline SystemCheck check_system(const linsys::SystemParams& sys, double S, double rho_max) {
  SystemCheck c;
  c.rho = linsys::spectral_radius(sys.A);
  c.controllability_rank = linsys::controllability_rank(sys.A, sys.B);
  c.c_g = linsys::g_matrix(sys).c_g;
  c.norm = sys.theta().norm();
  c.stable = c.rho <= rho_max && c.rho < 1.0;
  c.controllable = c.controllability_rank == sys.n();
  c.in_ball = c.norm <= S;
  c.c_g_positive = c.c_g > 0;
  return c;
}

struct ValidationReport {
  std::optional<SystemCheck> anchor;
  std::vector<SystemCheck> samples;
  std::optional<inner::InnerConstants> constants;
  std::vector<std::string> flags;
  bool ok() const { return flags.empty(); }
};

inline ValidationReport validate_config(const RunConfig& cfg, int samples = 20, std::uint64_t seed = 1) {
  ValidationReport rep;
  if (cfg.anchor_A && cfg.anchor_B) {
    rep.anchor = check_system(linsys::SystemParams(*cfg.anchor_A, *cfg.anchor_B), cfg.S, cfg.rho_max);
    if (!rep.anchor->stable) rep.flags.push_back("anchor: spectral radius exceeds rho_max");
    if (!rep.anchor->controllable) rep.flags.push_back("anchor: (A,B) is not controllable");
    if (!rep.anchor->in_ball) rep.flags.push_back("anchor: ||[A,B]||_F exceeds S");
    if (!rep.anchor->c_g_positive) rep.flags.push_back("anchor: lambda_min(G G') is not positive");
  }
  try {
    rep.constants = cfg.constants();
    if (!(rep.constants->gamma_y > 0))
      rep.flags.push_back("gamma_y <= 0: the confidence radius is unbounded and the sets equal Theta");
  } catch (const ConfigError& e) {
    rep.flags.push_back(std::string("constants: ") + e.what());
  }
  if (rep.flags.empty() || !rep.anchor || rep.anchor->ok()) {
    try {
      const auto set = cfg.theta_set();
      for (int k = 0; k < samples; ++k) {
        const auto sys = linsys::sample_theta(set, mix_seed(seed, static_cast<std::uint64_t>(k)));
        auto c = check_system(sys, cfg.S, cfg.rho_max);
        if (!c.ok()) rep.flags.push_back("sample " + std::to_string(k) + ": assumption check failed");
        rep.samples.push_back(c);
      }
    } catch (const ConfigError& e) {
      rep.flags.push_back(std::string("sampling: ") + e.what());
    }
  }
  return rep;
}

inline std::string format_report(const ValidationReport& r) {
  std::ostringstream os;
  auto line = [&](const std::string& label, const SystemCheck& c) {
    os << label << ": rho=" << fmt(c.rho) << " rank=" << c.controllability_rank << " c_g=" << fmt(c.c_g)
       << " norm=" << fmt(c.norm) << (c.ok() ? " ok" : " FLAGGED") << "\n";
  };
  if (r.anchor) line("anchor", *r.anchor);
  for (std::size_t k = 0; k < r.samples.size(); ++k) line("sample " + std::to_string(k), r.samples[k]);
  if (r.constants) {
    const auto& c = *r.constants;
    os << "n_c=" << c.n_c << " gamma=" << fmt(c.gamma) << " j*=" << c.j_star << " H=" << c.H
       << (c.H_overridden ? " (override)" : "") << " lambda=" << fmt(c.lambda) << " delta_tilde=" << fmt(c.delta_tilde)
       << " gamma_y=" << fmt(c.gamma_y) << " R_tilde=" << fmt(c.R_tilde) << "\n";
  }
  for (const auto& f : r.flags) os << "FLAG " << f << "\n";
  os << (r.ok() ? "all checks passed" : "assumption violations flagged") << "\n";
  return os.str();
}

// ------------------------------------------------------------------ plot data

struct PlotRow {
  double x = 0.0;
  double y = 0.0;
  double stderr_ = 0.0;
};

inline std::string plot_csv(const std::vector<PlotRow>& rows) {
  std::ostringstream os;
  os << "x,y,stderr\n";
  for (const auto& r : rows) os << fmt(r.x) << "," << fmt(r.y) << "," << fmt(r.stderr_) << "\n";
  return os.str();
}

inline std::vector<std::uint64_t> seeds_in(const fs::path& dir) {
  const fs::path mf = dir / "manifest.json";
  if (!fs::exists(mf)) throw Error("missing file: " + mf.string());
  const json j = json::parse(read_file(mf));
  if (!j.contains("seeds")) throw Error("schema mismatch in " + mf.string());
  std::vector<std::uint64_t> out;
  for (auto s : j["seeds"].get<std::vector<std::uint64_t>>())
    if (fs::exists(seed_dir(dir, s) / "episodes.csv")) out.push_back(s);
  return out;
}

/// kind: regret-vs-T | regret-vs-N (sweep directory), coverage | traces (run directory).
inline std::vector<PlotRow> plotdata(const std::string& kind, const fs::path& dir) {
  std::vector<PlotRow> rows;
  if (kind == "regret-vs-T" || kind == "regret-vs-N") {
    const auto t = read_cells(dir);
    if (t.axis != kind.substr(kind.size() - 1)) throw Error("schema mismatch: sweep axis is " + t.axis);
    for (const auto& p : summarize_cells(t).points)
      rows.push_back({static_cast<double>(p.value), p.regret.mean, p.regret.se});
    return rows;
  }
  if (kind == "coverage") {
    std::map<long, std::vector<double>> by_ep;
    for (auto s : seeds_in(dir))
      for (const auto& r : read_episodes_csv(seed_dir(dir, s) / "episodes.csv"))
        by_ep[r.episode_index].push_back(r.coverage_all_intervals);
    for (const auto& [i, v] : by_ep) {
      const auto ms = mean_se(v);
      rows.push_back({static_cast<double>(i), ms.mean, ms.se});
    }
    return rows;
  }
  if (kind == "traces") {
    std::map<long, std::vector<double>> by_t;  // per-seed mean stage cost at t
    for (auto s : seeds_in(dir)) {
      const fs::path p = seed_dir(dir, s) / "traces.csv";
      if (!fs::exists(p)) continue;
      std::stringstream ss(read_file(p));
      std::string line;
      std::getline(ss, line);
      const auto head = split(line);
      if (head.size() < 5 || head[0] != "episode_index" || head[1] != "t" || head[head.size() - 2] != "cost")
        throw Error("schema mismatch in " + p.string());
      std::map<long, std::pair<double, long>> acc;
      while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const auto f = split(line);
        if (f.size() != head.size()) throw Error("schema mismatch in " + p.string());
        auto& a = acc[std::stol(f[1])];
        a.first += std::stod(f[f.size() - 2]);
        ++a.second;
      }
      for (const auto& [t, a] : acc) by_t[t].push_back(a.first / static_cast<double>(a.second));
    }
    for (const auto& [t, v] : by_t) {
      const auto ms = mean_se(v);
      rows.push_back({static_cast<double>(t), ms.mean, ms.se});
    }
    return rows;
  }
  throw Error("plotdata: unknown kind \"" + kind + "\"");
}

}  // namespace metarhc::harness
