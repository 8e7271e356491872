#ifndef ADAPTSENSE_POLICY_H_
#define ADAPTSENSE_POLICY_H_

#include <array>
#include <memory>
#include <vector>

#include <json.hpp>

#include "adaptsense/decisions.h"
#include "adaptsense/encoders.h"
#include "adaptsense/layers.h"
#include "adaptsense/preview.h"
#include "adaptsense/rng.h"

namespace adaptsense {

// i.i.d. standard Gumbel draws.
std::vector<double> GumbelNoise(int n, Rng& rng);

// One-hot at argmax(log_scores + g); index 0 wins ties.
std::array<int, 2> GumbelMaxSample(const std::array<double, 2>& log_scores,
                                   const std::array<double, 2>& g);

// softmax((log_scores + g) / tau).
std::array<double, 2> GumbelSoftmaxRelax(const std::array<double, 2>& log_scores,
                                         const std::array<double, 2>& g,
                                         double tau);
ag::Var GumbelSoftmaxRelax(const ag::Var& log_scores,
                           const std::array<double, 2>& g, double tau);

enum class PolicyMode {
  kTrain,    // Gumbel sample, hard forward, soft gradient
  kInfer,    // Gumbel sample from the seeded stream, no gradient path
  kGreedy,   // no noise, argmax of the head scores
  kRelaxed,  // soft forward, used for gradient checks
};

struct PolicyConfig {
  int d_h = 64;
  int width1 = 4;
  int width2 = 8;
  int d_p = 16;  // per-modality policy feature width
  int kernel = 3;
  int pool = 2;
  SpectrogramSpec coarse{32, 32};
  PreviewConfig preview;
};

void to_json(nlohmann::json& j, const PolicyConfig& c);
void from_json(const nlohmann::json& j, PolicyConfig& c);

// Cheap views of a segment for the controller: a pooled frame thumbnail, a
// coarse single-channel spectrogram and the behavior signal; or, for frame
// selection, the preview step features.
struct PolicyInputs {
  ag::Var thumb;     // [1, H/2, W/2]
  ag::Var coarse;    // [1, frames, bins]
  ag::Var behavior;  // [d_b, L_b]
  std::vector<ag::Var> preview;
};

PolicyInputs PreparePolicyInputs(const Segment& seg, const StudentConfig& s,
                                 const PolicyConfig& p);

class PolicyNet {
 public:
  PolicyNet(const StudentConfig& student, const PolicyConfig& cfg,
            uint64_t seed);

  const ActionSpace& space() const { return space_; }
  const PolicyConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  bool uses_preview() const { return preview_ != nullptr; }
  const PreviewNet& preview() const { return *preview_; }
  const LstmParams& lstm() const { return lstm_; }

  // f_t: the three policy encodings concatenated.
  ag::Var JointFeature(const PolicyInputs& in) const;
  // Per-action 2-way log-scores [select, skip] from the controller state.
  std::vector<ag::Var> HeadScores(const ag::Var& h) const;
  // Per-frame log-scores [log s, log(1 - s)] from the preview saliency.
  std::vector<ag::Var> PreviewScores(const PolicyInputs& in,
                                     std::vector<double>* saliency) const;

 private:
  StudentConfig student_;
  PolicyConfig cfg_;
  ActionSpace space_;
  ParamSet params_;
  ConvStackParams enc_[kNumModalities];
  LstmParams lstm_;
  std::vector<std::pair<ag::Var, ag::Var>> heads_;
  std::unique_ptr<PreviewNet> preview_;
};

struct PolicyStepResult {
  LstmState state;
  std::vector<uint8_t> hard;
  std::vector<double> p_select;
  // Gate per action: hard value forward; gradient path depends on the mode.
  std::vector<ag::Var> actions;
};

// Samples K decisions from 2-way log-scores. A row with nothing selected
// gets `fallback` forced on.
PolicyStepResult SampleActions(const std::vector<ag::Var>& scores, double tau,
                               Rng& rng, PolicyMode mode, int fallback);

// One controller step: LSTM update, K heads, sampling and fallback.
PolicyStepResult PolicyStep(const ag::Var& f_t, const LstmState& state,
                            const PolicyNet& net, double tau, Rng& rng,
                            PolicyMode mode, int fallback);

struct Rollout {
  DecisionTensor U;
  std::vector<std::vector<ag::Var>> actions;  // T x K
};

// Decisions for a whole episode. Frame selection in kInfer mode uses the
// salient-frame rule on the preview saliency instead of sampling.
Rollout RunPolicy(const PolicyNet& net, const std::vector<PolicyInputs>& seq,
                  PolicyMode mode, double tau, uint64_t seed,
                  const std::vector<double>& lambda);

// sum_k lambda_k (count_k / C)^2, rounded once from the exact rational value.
double UsageCost(const DecisionTensor& U, const CostModel& cm);
// Differentiable form over per-action (straight-through) counts.
ag::Var UsageCostVar(const std::vector<ag::Var>& counts, const CostModel& cm);

// task_loss + cost when correct, task_loss + gamma otherwise.
ag::Var PolicyLoss(const ag::Var& task_loss, const ag::Var& cost,
                   const CostModel& cm, bool correct);
double PolicyLoss(const std::vector<double>& logits, int label,
                  const DecisionTensor& U, const CostModel& cm, bool correct);

}  // namespace adaptsense

#endif  // ADAPTSENSE_POLICY_H_
