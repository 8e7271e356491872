// adaptsense command line: gen-data, train, eval, ablate, report.
//
// Exit codes: 0 success, 2 malformed configuration, bad arguments, missing
// inputs or refused preconditions, 1 any other failure. Errors are one line
// on stderr starting with "ERROR:".

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "adaptsense/config.h"
#include "adaptsense/errors.h"
#include "adaptsense/pipeline.h"

namespace as = adaptsense;
namespace fs = std::filesystem;

namespace {

struct ConfigFlags {
  std::string file;
  std::string preset;
  std::vector<std::string> sets;

  void Add(CLI::App* app) {
    app->add_option("-c,--config", file, "JSON config file");
    app->add_option("--preset", preset,
                    "preset: modality, channel, frame, regression, noise");
    app->add_option("--set", sets, "override a config key, e.g. cost.gamma=5")
        ->take_all();
  }

  as::Config Resolve() const {
    as::ConfigSources src;
    src.file = file;
    if (!preset.empty()) src.preset = preset;
    src.overrides = sets;
    return as::ResolveConfig(src);
  }
};

double ParseSnr(const std::string& text) {
  if (text == "clean" || text == "inf") {
    return std::numeric_limits<double>::infinity();
  }
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || !std::isfinite(v)) {
    throw as::ConfigError(fmt::format("--snr '{}' is not a number or 'clean'", text));
  }
  return v;
}

std::string OneLine(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int Fail(const std::string& msg, int code) {
  std::cerr << "ERROR: " << OneLine(msg) << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive multimodal sensing: data, training, evaluation, reports"};
  app.require_subcommand(1);

  ConfigFlags gen_cfg;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen_cfg.Add(gen);
  gen->add_option("-o,--out", gen_out, "dataset directory")->required();

  ConfigFlags train_cfg;
  std::string train_out, train_data, train_stages = "1,2,3";
  bool train_resume = false, train_quiet = false;
  auto* train = app.add_subcommand("train", "run training stages into a run directory");
  train_cfg.Add(train);
  train->add_option("-o,--out", train_out, "run directory")->required();
  train->add_option("-d,--data", train_data,
                    "dataset directory (default: generate from the config)");
  train->add_option("--stages", train_stages, "comma list of stages, e.g. 1,2,3");
  train->add_flag("--resume", train_resume,
                  "continue from the previous stage's checkpoint in --out");
  train->add_flag("-q,--quiet", train_quiet, "no per-epoch progress");

  std::string eval_run, eval_policy = "learned", eval_snr = "clean", eval_data,
                        eval_out;
  auto* eval = app.add_subcommand("eval", "evaluate a policy on a trained run");
  eval->add_option("run", eval_run, "run directory")->required();
  eval->add_option("--policy", eval_policy,
                   "learned, oracle, all_on, random or heuristic");
  eval->add_option("--snr", eval_snr, "audio SNR in dB, or 'clean'");
  eval->add_option("-d,--data", eval_data, "dataset directory");
  eval->add_option("-o,--out", eval_out,
                   "output directory (default: <run>/eval/<policy>_<snr>)");

  std::string grid_file, ablate_out;
  auto* ablate = app.add_subcommand("ablate", "train one run per grid point");
  ablate->add_option("grid", grid_file, "grid spec JSON")->required();
  ablate->add_option("-o,--out", ablate_out, "output directory")->required();

  std::string report_in, report_out;
  bool report_plots = false;
  auto* report = app.add_subcommand("report", "markdown summary and figures");
  report->add_option("input", report_in, "run or ablation directory")->required();
  report->add_option("-o,--out", report_out,
                     "output directory (default: <input>_report)");
  report->add_flag("--plots", report_plots, "also write SVG figures");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return Fail(e.what(), 2);
  }

  try {
    if (gen->parsed()) {
      as::GenData(gen_cfg.Resolve(), gen_out);
      std::cout << fmt::format("wrote dataset to {}\n", gen_out);
    } else if (train->parsed()) {
      const as::Config cfg = train_cfg.Resolve();
      as::TrainRequest req;
      req.stages = as::ParseStages(train_stages);
      req.resume = train_resume;
      req.data_dir = train_data;
      req.quiet = train_quiet;
      const auto rep = as::RunTraining(cfg, train_out, req);
      const auto& f = rep.at("final");
      std::cout << fmt::format(
          "{}: {} {} {:.4f}, mean MACs {:.0f} ({:.1f}% of all-on)\n", train_out,
          f.at("policy").get<std::string>(), f.at("metric").get<std::string>(),
          f.at("score").get<double>(), f.at("mean_macs").get<double>(),
          100.0 * f.at("mean_macs").get<double>() /
              f.at("all_on_macs").get<double>());
    } else if (eval->parsed()) {
      as::EvalRequest req;
      req.policy = as::PolicyKindFromName(eval_policy);
      req.snr_db = ParseSnr(eval_snr);
      req.data_dir = eval_data;
      req.out_dir = eval_out;
      const auto rep = as::RunEval(eval_run, req).at("report");
      std::cout << fmt::format(
          "{} @ {}: {} {:.4f}, mean MACs {:.0f}\n", eval_policy,
          as::SnrTag(req.snr_db), rep.at("metric").get<std::string>(),
          rep.at("score").get<double>(), rep.at("mean_macs").get<double>());
    } else if (ablate->parsed()) {
      const auto spec = as::ReadJsonFile(grid_file);
      const auto grid = as::ParseGrid(
          spec, fs::absolute(grid_file).parent_path().string());
      const auto rows = as::RunAblation(grid, ablate_out);
      std::cout << fmt::format("{} grid points written to {}/ablation.csv\n",
                               rows.size(), ablate_out);
    } else if (report->parsed()) {
      if (report_out.empty()) {
        report_out = fs::path(report_in).lexically_normal().string();
        while (!report_out.empty() && report_out.back() == '/') report_out.pop_back();
        report_out += "_report";
      }
      as::WriteReport(report_in, report_out, report_plots);
      std::cout << fmt::format("wrote {}/summary.md\n", report_out);
    }
  } catch (const as::ConfigError& e) {
    return Fail(e.what(), 2);
  } catch (const as::IoError& e) {
    return Fail(e.what(), 2);
  } catch (const as::ContractError& e) {
    return Fail(e.what(), 2);
  } catch (const std::exception& e) {
    return Fail(e.what(), 1);
  }
  return 0;
}
