#ifndef ADAPTSENSE_CONFIG_H_
#define ADAPTSENSE_CONFIG_H_

// Run configuration: one JSON document with every default filled in.
// Resolution order, later wins: built-in defaults, task preset, config file,
// ADAPTSENSE_SEED, command-line overrides.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptsense/decisions.h"
#include "adaptsense/distillation.h"
#include "adaptsense/efficiency.h"
#include "adaptsense/encoders.h"
#include "adaptsense/policy.h"
#include "adaptsense/synthetic.h"
#include "adaptsense/training.h"

namespace adaptsense {

inline constexpr const char* kConfigFormat = "adaptsense.config.v1";
inline constexpr const char* kSeedEnv = "ADAPTSENSE_SEED";

// Student architecture knobs; input shapes always come from the data section.
struct StudentArch {
  int d_f = 64;
  int width1 = 8;
  int width2 = 16;
  int visual_width2 = 32;
  int kernel = 3;
  int pool = 2;
  SpectrogramSpec spectro{32, 32};
};

void to_json(nlohmann::json& j, const StudentArch& a);
void from_json(const nlohmann::json& j, StudentArch& a);

struct EvalSettings {
  // SNRs swept after training for the usage-over-noise summary.
  std::vector<double> snr_sweep{0.0, -10.0};
};

struct Config {
  std::string preset = "modality";
  uint64_t seed = 1;
  TaskKind task = TaskKind::kModalitySelect;
  DatasetConfig data;
  StudentArch student;
  PolicyConfig policy;
  DistillConfig distill;
  TrainConfig train;
  std::vector<double> lambda{1.0, 0.05, 0.03};
  double gamma = 10.0;
  EnergyConfig energy;
  EvalSettings eval;

  // Throws ConfigError on inconsistent values.
  void Validate() const;

  StudentConfig Student() const;
  // Train section with task, seed and distillation settings folded in.
  TrainConfig Train() const;
  CostModel Cost() const;
  ActionSpace Actions() const { return ActionSpaceFor(task, data); }
  uint64_t StudentSeed() const;
  uint64_t PolicySeed() const;
};

void to_json(nlohmann::json& j, const Config& c);
// Missing keys keep their defaults. Unknown keys and wrong types raise
// ConfigError.
void from_json(const nlohmann::json& j, Config& c);

std::vector<std::string> PresetNames();
// Defaults for a named preset: modality, channel, frame, regression, noise.
Config PresetConfig(const std::string& name);

struct ConfigSources {
  std::string file;                    // empty: none
  std::optional<std::string> preset;   // overrides the file's "preset" key
  nlohmann::json patch;                // merged over the file (null: none)
  std::vector<std::string> overrides;  // "dotted.key=value", value as JSON
  bool use_env = true;
};

Config ResolveConfig(const ConfigSources& src);
// Applies one "dotted.key=value" override to a config document. Values that
// do not parse as JSON are taken as strings.
void ApplyOverride(nlohmann::json& doc, const std::string& assignment);
// Reads and parses a JSON file; ConfigError on failure.
nlohmann::json ReadJsonFile(const std::string& path);

}  // namespace adaptsense

#endif  // ADAPTSENSE_CONFIG_H_
