#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sftl/sftl.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;
constexpr int kExitData = 3;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string token;
  while (std::getline(ss, token, ',')) {
    try {
      std::size_t pos = 0;
      const int v = std::stoi(token, &pos);
      if (pos != token.size() || v < 1) throw std::invalid_argument(token);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + " must be comma-separated " +
                        "positive integers, got '" + text + "'");
    }
  }
  if (out.empty()) {
    throw ConfigError(std::string(what) + " must not be empty");
  }
  return out;
}

int smoothness_from_nu(double nu) {
  for (int p = 0; p <= 2; ++p) {
    if (std::abs(nu - (p + 0.5)) < 1e-12) return p;
  }
  throw ConfigError("--nu must be one of 0.5, 1.5, 2.5");
}

struct GridSpec {
  double lo = 0.0;
  double hi = 1.0;
  int count = 2;
};

GridSpec parse_grid(const std::string& text) {
  GridSpec grid;
  char trailing = 0;
  const int matched = std::sscanf(text.c_str(), "%lf:%lf:%d%c", &grid.lo,
                                  &grid.hi, &grid.count, &trailing);
  if (matched != 3 || grid.count < 1 || !(grid.hi >= grid.lo)) {
    throw ConfigError("--grid expects lo:hi:count with count >= 1, got '" +
                      text + "'");
  }
  return grid;
}

struct SimulateArgs {
  std::string out;
  std::string truth_out;
  std::uint64_t seed = 0;
  int n_times = 500;
  int per_time = 2;
  double noise = 0.05;
};

int run_simulate(const SimulateArgs& args) {
  if (args.n_times < 1 || args.per_time < 1 || args.noise < 0.0) {
    throw ConfigError("--n-times/--per-time must be >= 1 and --noise >= 0");
  }
  const std::vector<sftl::Event> events = sftl::generate_synthetic(
      args.seed, args.n_times, args.per_time, args.noise);
  sftl::write_events(args.out, events);
  std::cout << "wrote " << events.size() << " events to " << args.out << "\n";
  if (!args.truth_out.empty()) {
    std::ofstream out(args.truth_out);
    if (!out) throw sftl::IoError("cannot open " + args.truth_out);
    out << "t,u1_1,u1_2,u2_1,u2_2\n";
    char buf[40];
    for (int k = 0; k <= 1000; ++k) {
      const double t = k / 1000.0;
      std::snprintf(buf, sizeof(buf), "%.9g", t);
      out << buf;
      for (int mode = 1; mode <= 2; ++mode) {
        for (int object = 1; object <= 2; ++object) {
          std::snprintf(buf, sizeof(buf), "%.9g",
                        sftl::synthetic_factor(mode, object, t));
          out << ',' << buf;
        }
      }
      out << '\n';
    }
    if (!out) throw sftl::IoError("failed while writing " + args.truth_out);
    std::cout << "wrote truth grid to " << args.truth_out << "\n";
  }
  return kExitOk;
}

struct FitArgs {
  std::string input;
  std::string dims;
  std::string form = "cp";
  int rank = 3;
  double nu = 1.5;
  double amplitude = 1.0;
  double lengthscale = 1.0;
  double noise_shape = 1.0;
  double noise_rate = 0.1;
  double fixed_tau = 0.0;
  bool has_fixed_tau = false;
  int max_iters = 50;
  double tol = 1e-4;
  double damping = 0.5;
  double init_scale = 1.0;
  double split = 0.8;
  std::uint64_t seed = 0;
  bool no_rescale = false;
  int eval_every = 0;
  bool fix_core = false;
  std::string checkpoint;
  std::string report;
};

int run_fit(const FitArgs& args) {
  if (args.rank < 1) throw ConfigError("--rank must be >= 1");
  if (args.max_iters < 1) throw ConfigError("--max-iters must be >= 1");
  if (!(args.tol >= 0.0)) throw ConfigError("--tol must be >= 0");
  if (!(args.damping > 0.0) || args.damping > 1.0) {
    throw ConfigError("--damping must be in (0, 1]");
  }
  if (!(args.split > 0.0) || args.split > 1.0) {
    throw ConfigError("--split must be in (0, 1]");
  }
  if (args.eval_every < 0) throw ConfigError("--eval-every must be >= 0");
  if (args.has_fixed_tau && !(args.fixed_tau > 0.0)) {
    throw ConfigError("--fixed-tau must be > 0");
  }
  if (!(args.noise_shape > 0.0) || !(args.noise_rate > 0.0)) {
    throw ConfigError("--noise-shape and --noise-rate must be > 0");
  }
  if (!(args.init_scale >= 0.0)) throw ConfigError("--init-scale must be >= 0");

  sftl::ModelConfig config;
  config.dims = parse_int_list(args.dims, "--dims");
  if (args.form == "cp") {
    config.form = sftl::ObservationForm::kCp;
  } else if (args.form == "tucker") {
    config.form = sftl::ObservationForm::kTucker;
  } else {
    throw ConfigError("--form must be cp or tucker");
  }
  config.rank = args.rank;
  config.kernel = sftl::MaternKernel(smoothness_from_nu(args.nu),
                                     args.amplitude, args.lengthscale);
  config.noise_shape = args.noise_shape;
  config.noise_rate = args.noise_rate;
  config.cep.max_iters = args.max_iters;
  config.cep.tol = args.tol;
  config.cep.damping = args.damping;
  if (args.has_fixed_tau) config.cep.fixed_tau = args.fixed_tau;
  config.init_scale = args.init_scale;
  config.init_seed = args.seed;
  config.fix_core = args.fix_core;

  std::vector<sftl::Event> events = sftl::load_events(args.input);
  if (events.empty()) {
    throw sftl::EmptyModel("input " + args.input + " contains no events");
  }
  for (const sftl::Event& e : events) {
    if (e.idx.size() != config.dims.size()) {
      throw sftl::DimensionMismatch(
          "event arity " + std::to_string(e.idx.size()) +
          " does not match --dims arity " +
          std::to_string(config.dims.size()));
    }
  }
  if (!args.no_rescale) {
    const sftl::TimeRescale rescale = sftl::rescale_timestamps(events);
    if (rescale.degenerate) {
      std::cerr << "warning: all timestamps identical; rescaled to 0\n";
    }
  }

  auto [train, test] = sftl::split_train_test(events, args.split, args.seed);
  const std::vector<sftl::Batch> batches = sftl::make_batches(train);

  sftl::PosteriorModel model(config);
  const sftl::ErrorReport report =
      sftl::online_score(model, batches, test, args.eval_every);

  std::cout << "processed " << train.size() << " events in " << batches.size()
            << " batches over " << model.chains().size() << " trajectories\n";
  if (config.cep.fixed_tau.has_value()) {
    std::cout << "noise precision fixed at " << *config.cep.fixed_tau << "\n";
  } else {
    std::cout << "posterior noise precision E[tau] = " << model.noise().etau()
              << " (noise std ~ " << 1.0 / std::sqrt(model.noise().etau())
              << ")\n";
  }
  if (report.rmse.has_value()) {
    std::cout << "test rmse = " << *report.rmse << ", mae = " << *report.mae
              << " over " << report.n << " held-out events\n";
  }

  if (!args.report.empty()) {
    nlohmann::json j;
    j["rmse"] = report.rmse.has_value() ? nlohmann::json(*report.rmse)
                                        : nlohmann::json(nullptr);
    j["mae"] = report.mae.has_value() ? nlohmann::json(*report.mae)
                                      : nlohmann::json(nullptr);
    j["n"] = report.n;
    j["curve"] = nlohmann::json::array();
    for (const sftl::CurvePoint& point : report.curve) {
      j["curve"].push_back({{"processed", point.processed},
                            {"rmse", point.rmse},
                            {"mae", point.mae}});
    }
    std::ofstream out(args.report);
    if (!out) throw sftl::IoError("cannot open " + args.report);
    out << j.dump(2) << "\n";
    if (!out) throw sftl::IoError("failed while writing " + args.report);
    std::cout << "wrote report to " << args.report << "\n";
  }

  if (!args.checkpoint.empty()) {
    std::ofstream out(args.checkpoint, std::ios::binary);
    if (!out) throw sftl::IoError("cannot open " + args.checkpoint);
    model.checkpoint(out);
    std::cout << "wrote checkpoint to " << args.checkpoint << "\n";
  }
  return kExitOk;
}

struct ExportArgs {
  std::string checkpoint;
  std::string out;
  std::string grid;
  int mode = 0;
  int object = 0;
};

int run_export(const ExportArgs& args) {
  const GridSpec grid = parse_grid(args.grid);
  if ((args.mode == 0) != (args.object == 0)) {
    throw ConfigError("--mode and --object must be given together");
  }
  std::ifstream in(args.checkpoint, std::ios::binary);
  if (!in) throw sftl::IoError("cannot open " + args.checkpoint);
  sftl::PosteriorModel model = sftl::PosteriorModel::restore(in);
  if (!model.finalized()) model.finalize();

  std::vector<sftl::ChainKey> selected;
  if (args.mode != 0) {
    if (model.chains().count({args.mode, args.object}) == 0) {
      std::set<int> known;
      for (const auto& [key, chain] : model.chains()) {
        if (key.first == args.mode) known.insert(key.second);
      }
      std::ostringstream msg;
      msg << "unknown object " << args.object << " for mode " << args.mode
          << "; known objects:";
      if (known.empty()) {
        msg << " (none)";
      } else {
        for (int o : known) msg << ' ' << o;
      }
      throw ConfigError(msg.str());
    }
    selected.push_back({args.mode, args.object});
  } else {
    for (const auto& [key, chain] : model.chains()) selected.push_back(key);
  }

  std::ofstream out(args.out);
  if (!out) throw sftl::IoError("cannot open " + args.out);
  out << "mode,object,factor,t,mean,std\n";
  char buf[40];
  for (const sftl::ChainKey& key : selected) {
    for (int g = 0; g < grid.count; ++g) {
      const double t =
          grid.count == 1
              ? grid.lo
              : grid.lo + (grid.hi - grid.lo) * g / (grid.count - 1);
      const auto [mean, std] = model.factor_mean_std(key.first, key.second, t);
      for (int r = 0; r < mean.size(); ++r) {
        out << key.first << ',' << key.second << ',' << (r + 1) << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", t);
        out << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", mean[r]);
        out << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", std[r]);
        out << buf << '\n';
      }
    }
  }
  if (!out) throw sftl::IoError("failed while writing " + args.out);
  std::cout << "wrote " << selected.size() << " trajectories on "
            << grid.count << " grid points to " << args.out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming Bayesian temporal tensor decomposition"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* simulate =
      app.add_subcommand("simulate", "Sample the bundled 2x2 synthetic stream");
  simulate->add_option("--out", sim.out, "Output events file (.jsonl or .csv)")
      ->required();
  simulate->add_option("--seed", sim.seed, "RNG seed");
  simulate->add_option("--n-times", sim.n_times, "Number of timestamps");
  simulate->add_option("--per-time", sim.per_time, "Entries per timestamp");
  simulate->add_option("--noise", sim.noise, "Observation noise std");
  simulate->add_option("--truth-out", sim.truth_out,
                       "Optional CSV of true factor trajectories on a "
                       "1001-point grid");

  FitArgs fit;
  CLI::App* fit_cmd =
      app.add_subcommand("fit", "Stream events through the model");
  fit_cmd->add_option("--input", fit.input, "Events file (.jsonl or .csv)")
      ->required();
  fit_cmd->add_option("--dims", fit.dims, "Mode sizes, e.g. 20,30,5")
      ->required();
  fit_cmd->add_option("--form", fit.form, "Observation form: cp or tucker");
  fit_cmd->add_option("--rank", fit.rank, "Factor rank per mode");
  fit_cmd->add_option("--nu", fit.nu, "Matern smoothness: 0.5, 1.5 or 2.5");
  fit_cmd->add_option("--amplitude", fit.amplitude, "Kernel amplitude");
  fit_cmd->add_option("--lengthscale", fit.lengthscale, "Kernel lengthscale");
  fit_cmd->add_option("--noise-shape", fit.noise_shape,
                      "Gamma prior shape of the noise precision");
  fit_cmd->add_option("--noise-rate", fit.noise_rate,
                      "Gamma prior rate of the noise precision");
  fit_cmd->add_option("--fixed-tau", fit.fixed_tau,
                      "Treat the noise precision as known");
  fit_cmd->add_option("--max-iters", fit.max_iters,
                      "Max fixed-point sweeps per batch");
  fit_cmd->add_option("--tol", fit.tol, "Sweep convergence tolerance");
  fit_cmd->add_option("--damping", fit.damping, "Site update damping in (0,1]");
  fit_cmd->add_option("--init-scale", fit.init_scale,
                      "First-appearance mean randomization scale");
  fit_cmd->add_option("--split", fit.split,
                      "Train fraction in (0, 1]; 1 trains on everything");
  fit_cmd->add_option("--seed", fit.seed, "Split and initialization seed");
  fit_cmd->add_flag("--no-rescale", fit.no_rescale,
                    "Keep raw timestamps instead of mapping onto [0, 1]");
  fit_cmd->add_option("--eval-every", fit.eval_every,
                      "Record causal test error every k batches");
  fit_cmd->add_flag("--fix-core", fit.fix_core,
                    "Tucker only: freeze a superdiagonal core");
  fit_cmd->add_option("--checkpoint", fit.checkpoint,
                      "Write a binary checkpoint here");
  fit_cmd->add_option("--report", fit.report, "Write a JSON error report here");

  ExportArgs exp;
  CLI::App* export_cmd = app.add_subcommand(
      "export", "Evaluate smoothed factor trajectories on a time grid");
  export_cmd->add_option("--checkpoint", exp.checkpoint, "Checkpoint to load")
      ->required();
  export_cmd->add_option("--out", exp.out, "Output CSV path")->required();
  export_cmd->add_option("--grid", exp.grid, "Grid as lo:hi:count")->required();
  export_cmd->add_option("--mode", exp.mode, "Restrict to this mode (1-based)");
  export_cmd->add_option("--object", exp.object,
                         "Restrict to this object (1-based)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  fit.has_fixed_tau = fit_cmd->count("--fixed-tau") > 0;

  try {
    if (simulate->parsed()) return run_simulate(sim);
    if (fit_cmd->parsed()) return run_fit(fit);
    return run_export(exp);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const sftl::InvalidKernel& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const sftl::UnknownObject& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const sftl::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const sftl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
