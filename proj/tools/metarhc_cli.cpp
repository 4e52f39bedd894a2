// metarhc: run, sweep, validate and plotdata front end.

#include "metarhc/harness.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

namespace h = metarhc::harness;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto a = std::stoull(item.substr(0, dash));
        const auto b = std::stoull(item.substr(dash + 1));
        if (b < a) throw metarhc::ConfigError("--seeds: descending range " + item);
        for (auto s = a; s <= b; ++s) out.push_back(s);
      } else {
        out.push_back(std::stoull(item));
      }
    } catch (const std::logic_error&) {
      throw metarhc::ConfigError("--seeds: cannot parse \"" + item + "\"");
    }
  }
  if (out.empty()) throw metarhc::ConfigError("--seeds: empty list");
  return out;
}

h::Verbosity parse_verbosity(const std::string& v) {
  if (v == "quiet") return h::Verbosity::quiet;
  if (v == "debug") return h::Verbosity::debug;
  return h::Verbosity::info;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned receding-horizon control experiments"};
  app.require_subcommand(1);

  std::string config_path, seeds, out_dir = "results", verbosity = "info";
  std::vector<std::string> flags;
  int workers = 1;
  bool resume = false, traces = false;

  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", config_path, "configuration file (JSON)");
    sub->add_option("--flag", flags, "override KEY.PATH=VALUE (repeatable)");
    sub->add_option("--verbosity", verbosity, "quiet | info | debug")->check(CLI::IsMember({"quiet", "info", "debug"}));
    if (with_out) {
      sub->add_option("--seeds", seeds, "seed list, e.g. 1,2,5-8");
      sub->add_option("--workers", workers, "concurrent runs")->check(CLI::PositiveNumber);
      sub->add_option("--out", out_dir, "output directory");
      sub->add_flag("--traces", traces, "also write per-step traces");
      sub->add_flag("--resume", resume, "continue from existing per-seed state");
    }
  };

  auto* run = app.add_subcommand("run", "execute the meta-loop for every seed");
  add_common(run, true);
  auto* sweep = app.add_subcommand("sweep", "run the (axis value x seed) cross product");
  add_common(sweep, true);
  auto* validate = app.add_subcommand("validate", "check assumptions and print derived constants");
  add_common(validate, false);
  int samples = 20;
  validate->add_option("--samples", samples, "systems drawn from the parameter set");
  auto* plot = app.add_subcommand("plotdata", "emit x,y,stderr tables from result files");
  std::string kind, in_dir;
  plot->add_option("kind", kind, "regret-vs-T | regret-vs-N | coverage | traces")
      ->required()
      ->check(CLI::IsMember({"regret-vs-T", "regret-vs-N", "coverage", "traces"}));
  plot->add_option("dir", in_dir, "result directory")->required();

  CLI11_PARSE(app, argc, argv);
  h::verbosity_level() = static_cast<int>(parse_verbosity(verbosity));

  try {
    if (*plot) {
      std::cout << h::plot_csv(h::plotdata(kind, in_dir));
      return 0;
    }
    if (*validate) {
      auto cfg = h::load_config(config_path, flags, false);
      const auto rep = h::validate_config(cfg, samples);
      std::cout << h::format_report(rep);
      return rep.ok() ? 0 : 2;
    }
    auto cfg = h::load_config(config_path, flags);
    if (!seeds.empty()) cfg.seeds = parse_seeds(seeds);
    cfg.validate();
    const h::RunFiles files{traces, resume};
    if (*run) {
      const auto sum = h::run_to_dir(cfg, out_dir, workers, files);
      for (const auto& f : sum.failures) std::cerr << "error: " << f << "\n";
      if (!sum.failures.empty()) return 1;
      for (const auto& r : sum.results) {
        const auto a = h::aggregate(r.rows());
        std::cout << "seed " << r.seed << ": episodes=" << a.episodes << " mean_regret=" << h::fmt(a.mean_regret)
                  << " mean_violation=" << h::fmt(a.mean_violation) << " mean_E_theta=" << h::fmt(a.mean_E_theta)
                  << "\n";
      }
      return 0;
    }
    if (*sweep) {
      const auto s = h::sweep_to_dir(cfg, out_dir, workers, files);
      std::cout << h::sweep_csv(s) << h::slopes_csv(s);
      for (const auto& f : s.failures) std::cerr << "error: " << f << "\n";
      return s.failures.empty() ? 0 : 1;
    }
  } catch (const metarhc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
