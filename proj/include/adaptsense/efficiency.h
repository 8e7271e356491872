#ifndef ADAPTSENSE_EFFICIENCY_H_
#define ADAPTSENSE_EFFICIENCY_H_

// Analytic cost accounting over layer-graph descriptions.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptsense/decisions.h"
#include "adaptsense/encoders.h"
#include "adaptsense/policy.h"

namespace adaptsense {

enum class LayerKind {
  kConv1d,
  kConv2d,
  kPool,
  kRectify,
  kLinear,
  kRecurrentCell,
  kAttention,
  kBatchNorm,
  kAdd,
  kWeightedSum,
};

const char* LayerKindName(LayerKind k);
LayerKind LayerKindFromName(const std::string& name);

struct Layer {
  std::string name;
  LayerKind kind = LayerKind::kLinear;
  // Producers of this layer's input. Unset: the previous layer. Empty: a
  // graph input.
  std::optional<std::vector<std::string>> inputs;
  std::vector<int64_t> in_shape;
  std::vector<int64_t> out_shape;
  std::vector<int64_t> kernel;
  // Actions enabling the layer (any of them); nullopt = always executed.
  std::optional<std::vector<int>> gate;
  int64_t repeat = 1;   // executions per segment
  int64_t hidden = 0;   // recurrent_cell
  int64_t heads = 0;    // attention
  int64_t weights = -1; // weighted_sum: learnable scalars (-1: one per input)
  bool bias = true;
  bool trainable = true;
  // Name of a layer whose parameters this one reuses.
  std::string share;
};

struct LayerGraph {
  std::string name;
  std::vector<Layer> layers;

  // Checks kinds, shape chaining and gate indices against K actions.
  void Validate(int K) const;
  bool Gated(const Layer& l, const std::vector<int>* row) const;
};

void to_json(nlohmann::json& j, const LayerGraph& g);
void from_json(const nlohmann::json& j, LayerGraph& g);
LayerGraph LoadGraph(const std::string& path);
void SaveGraph(const LayerGraph& g, const std::string& path);

int64_t LayerMacs(const Layer& l);
int64_t LayerParams(const Layer& l);
int64_t LayerOutputElements(const Layer& l);

// `row` is one decision row; nullptr means every action is on.
int64_t CountMacs(const LayerGraph& g, const std::vector<int>* row);
int64_t CountParams(const LayerGraph& g);
int64_t ActivationBytes(const LayerGraph& g, const std::vector<int>* row);

struct EnergyCoefficients {
  double joules_per_mac = 4.6e-12;
  double joules_per_byte = 2.5e-10;
  std::array<double, kNumModalities> joules_per_sensor_second{0.05, 0.05,
                                                              0.05};
  void Validate() const;
};

struct EnergyConfig {
  EnergyCoefficients coeffs;
  double segment_seconds = 0.5;
  double sensor_floor_seconds = 1.0;  // 0 disables the floor
};

void to_json(nlohmann::json& j, const EnergyConfig& c);
void from_json(const nlohmann::json& j, EnergyConfig& c);

// macs*c1 + bytes*c2 + sum_m seconds_m * c3_m.
double EstimateEnergy(double macs, double bytes,
                      const std::array<double, kNumModalities>& sensor_seconds,
                      const EnergyCoefficients& coeffs);

// Active seconds per sensor over one episode. Every contiguous run of
// segments using a sensor costs max(run * segment_seconds, floor).
std::array<double, kNumModalities> SensorSchedule(
    const DecisionTensor& U, const ActionSpace& space, const EnergyConfig& cfg,
    const std::array<bool, kNumModalities>& always_on = {});

struct UsageReport {
  std::vector<double> fractions;  // per action
  int64_t segments = 0;
  double mean_macs = 0.0;
  double mean_bytes = 0.0;
  double mean_energy = 0.0;  // joules per segment
  std::array<double, kNumModalities> sensor_seconds{};
};

// `overhead` (may be null) is executed once per segment regardless of the
// decisions, e.g. the policy network; `overhead_sensors` are the sensors it
// reads on every segment.
UsageReport MakeUsageReport(
    const std::vector<DecisionTensor>& traces, const LayerGraph& model,
    const LayerGraph* overhead,
    const std::array<bool, kNumModalities>& overhead_sensors,
    const ActionSpace& space, const EnergyConfig& cfg);

// Layer graphs mirroring the implemented networks.
LayerGraph StudentGraph(const StudentConfig& cfg);
LayerGraph PolicyGraph(const StudentConfig& student, const PolicyConfig& cfg);

}  // namespace adaptsense

#endif  // ADAPTSENSE_EFFICIENCY_H_
