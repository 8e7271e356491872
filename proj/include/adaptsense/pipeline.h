#ifndef ADAPTSENSE_PIPELINE_H_
#define ADAPTSENSE_PIPELINE_H_

// File-level workflows behind the command line: dataset generation, staged
// training into a run directory, evaluation, ablation grids and reports.
//
// Run directory layout:
//   config.json        resolved configuration
//   metrics.csv        one row per epoch
//   losses.csv         one row per optimizer step
//   decisions.csv      test-split decisions of the final policy
//   checkpoints/       stageN_epochM.ckpt, stageN_final.ckpt
//   report.json        per-stage and baseline metrics (no timestamps)
//   run_manifest.json  content hashes, timestamps, artifact list

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptsense/config.h"
#include "adaptsense/synthetic.h"
#include "adaptsense/training.h"

namespace adaptsense {

inline constexpr const char* kReportFormat = "adaptsense.report.v1";
inline constexpr const char* kManifestFile = "run_manifest.json";

// Git blob hash (SHA-1 over "blob <size>\0" + content), lowercase hex.
std::string GitBlobHash(const std::string& content);
std::string GitBlobHashFile(const std::string& path);

// Writes run_manifest.json into `dir`, listing every regular file under it
// (except the manifest) with its blob hash. `inputs_hash` identifies what the
// directory was produced from.
void WriteManifest(const std::string& dir, const nlohmann::json& config,
                   const std::string& command, const std::string& inputs_hash);

// Hash over the sorted (relative path, blob hash) pairs of `dir`, ignoring
// run_manifest.json.
std::string ContentHash(const std::string& dir);

void GenData(const Config& cfg, const std::string& out_dir);

// Loads `data_dir`, or generates the data section in memory when empty. A
// loaded dataset must match cfg.data.
Dataset ObtainDataset(const Config& cfg, const std::string& data_dir);

struct TrainRequest {
  std::vector<int> stages{1, 2, 3};
  bool resume = false;
  std::string data_dir;  // empty: generate from the config
  bool quiet = true;
};

// Parses "1,2,3"; stages must be distinct, ascending and contiguous.
std::vector<int> ParseStages(const std::string& text);

// Runs the requested stages and writes the run directory. Returns the
// contents of report.json.
nlohmann::json RunTraining(const Config& cfg, const std::string& run_dir,
                           const TrainRequest& req);

struct EvalRequest {
  PolicyKind policy = PolicyKind::kLearned;
  double snr_db = std::numeric_limits<double>::infinity();
  std::string data_dir;
  std::string out_dir;  // empty: <run>/eval/<policy>_<snr>
};

// Evaluates the latest checkpoint of a run. Returns the report.
nlohmann::json RunEval(const std::string& run_dir, const EvalRequest& req);

// "clean" or e.g. "snr-10".
std::string SnrTag(double snr_db);

// Grid file: {"config": path?, "preset": name?, "base": {...}?,
//             "grid": {key: [values...]}}
// Keys are dotted config paths or the aliases lambda, gamma, alpha, beta,
// eta1, eta2, tau_kd, tau_gumbel.
struct AblationGrid {
  nlohmann::json base = nlohmann::json::object();
  std::string config_file;
  std::optional<std::string> preset;
  std::vector<std::string> keys;  // resolved dotted paths
  std::vector<std::vector<nlohmann::json>> values;

  size_t Points() const;
  // Values of grid point `i`, row-major over `keys`.
  std::vector<nlohmann::json> Point(size_t i) const;
};

AblationGrid ParseGrid(const nlohmann::json& spec, const std::string& base_dir);
std::string ResolveGridKey(const std::string& key);
// Fixed leading columns of ablation.csv, before one usage column per action.
std::vector<std::string> AblationColumns();

// One full three-stage run per grid point under out_dir/point_NNN, plus
// out_dir/ablation.csv. Returns the CSV rows as JSON objects.
nlohmann::json RunAblation(const AblationGrid& grid, const std::string& out_dir,
                           bool use_env = true);

// Markdown summary (always) and SVG figures (when `plots`) for a run or an
// ablation directory. Never writes inside `input_dir`.
void WriteReport(const std::string& input_dir, const std::string& out_dir,
                 bool plots);

}  // namespace adaptsense

#endif  // ADAPTSENSE_PIPELINE_H_
