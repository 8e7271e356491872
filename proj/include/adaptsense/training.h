#ifndef ADAPTSENSE_TRAINING_H_
#define ADAPTSENSE_TRAINING_H_

// Three-stage schedule: distillation with every input on, policy training
// against the frozen student, then joint fine-tuning. Plus evaluation with
// learned or fixed policies and a finite-difference gradient checker.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptsense/decisions.h"
#include "adaptsense/distillation.h"
#include "adaptsense/efficiency.h"
#include "adaptsense/encoders.h"
#include "adaptsense/policy.h"
#include "adaptsense/synthetic.h"

namespace adaptsense {

// Random audio corruption applied to training episodes.
struct NoiseAugment {
  double prob = 0.0;
  std::vector<double> snr_db;
  int first_stage = 2;  // stages before this one train on clean audio
};

struct TrainConfig {
  TaskKind task = TaskKind::kModalitySelect;
  int epochs1 = 30;
  int epochs2 = 20;
  int epochs3 = 30;
  int batch_size = 4;  // episodes per step
  double lr = 0.02;
  double policy_lr = 0.05;
  double joint_lr = 0.002;  // student learning rate during stage 3
  double momentum = 0.9;
  double clip_norm = 5.0;  // global gradient norm; 0 disables
  double tau_init = 5.0;
  double tau_decay = 0.965;
  double tau_floor = 0.5;
  DistillConfig distill;
  double eta1 = 0.95;
  double eta2 = 1.2;
  int patience = 5;      // epochs without a validation improvement; 0 = off
  int alternations = 1;  // repeats of (stage 2, stage 3)
  uint64_t seed = 1;
  NoiseAugment noise;

  void Validate() const;
  // Gumbel temperature for the n-th policy epoch (0-based, counted across
  // stages 2 and 3).
  double TauAt(int policy_epoch) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Everything one episode needs during training, computed once.
struct EpisodeInputs {
  const Episode* episode = nullptr;
  std::vector<PreparedSegment> student;
  std::vector<PolicyInputs> policy;
  std::vector<TeacherOutput> teacher;
  std::vector<EncoderCache> cache;  // filled only while the student is frozen
};

EpisodeInputs PrepareEpisode(const Episode& ep, const StudentConfig& s,
                             const PolicyConfig& p,
                             const OracleTeacher& teacher);

// L_Phi of one segment under the given gates. Adds the components to `parts`.
ag::Var DistillLoss(const PreparedSegment& seg, const TeacherOutput& teacher,
                    const StudentGates& gates, const StudentModel& student,
                    const DistillConfig& cfg, LossBreakdown* parts,
                    const EncoderCache* cache = nullptr);

// Prediction check behind the gamma branch: top-1 for classification, an
// angular error below kRegressionHitDegrees for regression.
inline constexpr double kRegressionHitDegrees = 30.0;
bool PredictionCorrect(const std::vector<double>& output,
                       const PreparedSegment& seg, TaskKind task);
double AngularErrorDegrees(const std::vector<double>& output,
                           const std::vector<double>& target);

struct PolicyPass {
  ag::Var loss;  // L_Pi, averaged over segments
  ag::Var phi;   // L_Phi under detached hard gates (only if requested)
  DecisionTensor U;
  int correct = 0;
  double task = 0.0;  // summed task losses
  double cost = 0.0;  // usage cost of U
};

struct PolicyPassOptions {
  PolicyMode mode = PolicyMode::kTrain;
  double tau = 1.0;
  uint64_t seed = 0;
  bool use_cache = false;
  bool with_phi = false;
  // Fixed per-segment correctness flags (gradient checks); empty = measure.
  std::vector<int> correct_override;
};

// One policy rollout over an episode, the student run under its gates, and
// L_Pi = mean_t [task_t + (correct_t ? cost(U) : gamma)].
PolicyPass RunPolicyPass(const EpisodeInputs& ep, const StudentModel& student,
                         const PolicyNet& policy, const CostModel& cm,
                         const DistillConfig& distill,
                         const PolicyPassOptions& opt);

struct EpochRecord {
  int stage = 0;
  int epoch = 0;  // 1-based within the stage
  double tau = 0.0;
  LossBreakdown train;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> val_usage;
};

struct StepRecord {
  long step = 0;
  int stage = 0;
  LossBreakdown loss;
};

class Trainer {
 public:
  Trainer(const Dataset& data, const TrainConfig& cfg, const CostModel& cost,
          StudentModel& student, PolicyNet& policy);

  // Per-epoch checkpoints go to `dir`/stageN_epochM.ckpt; empty disables.
  void set_checkpoint_dir(std::string dir) { ckpt_dir_ = std::move(dir); }
  // Numbering of the next optimizer step in steps().
  void set_first_step(long step) { step_ = step; }
  // Called after every epoch.
  void set_epoch_callback(std::function<void(const EpochRecord&)> cb) {
    on_epoch_ = std::move(cb);
  }

  void Stage1();
  // `round` numbers the (stage 2, stage 3) alternation, starting at 0.
  void Stage2(int round = 0);
  void Stage3(int round = 0);

  const std::vector<EpochRecord>& history() const { return history_; }
  const std::vector<StepRecord>& steps() const { return steps_; }
  // Student and policy parameters under "student." and "policy.".
  ParamSet AllParams() const;

 private:
  const EpisodeInputs& Variant(int episode, int stage, int round, int epoch);
  std::vector<int> Shuffled(int stage, int epoch) const;
  void Step(ParamSet& params, SgdMomentum& opt);
  // Epoch loop shared by the stages: validation, checkpoints, early stopping
  // with restore of the best `watched` parameters.
  void RunStage(int stage, int round, int epochs, ParamSet watched,
                const std::function<EpochRecord(int epoch)>& train_epoch,
                const std::function<void(EpochRecord&)>& validate);
  void SaveAs(const std::string& name);
  void FillCaches();
  void ClearCaches();
  void ValidateStudent(EpochRecord& rec) const;
  void ValidatePolicy(EpochRecord& rec, bool joint, bool cached) const;

  const Dataset& data_;
  TrainConfig cfg_;
  CostModel cost_;
  StudentModel& student_;
  PolicyNet& policy_;
  OracleTeacher teacher_;
  std::vector<const Episode*> train_, val_;
  std::vector<EpisodeInputs> train_in_, val_in_;
  // Corrupted copies of the training episodes, one set per noise level.
  std::vector<Episode> noisy_eps_;
  std::vector<std::vector<EpisodeInputs>> noisy_in_;
  std::string ckpt_dir_;
  std::string last_ckpt_;
  std::function<void(const EpochRecord&)> on_epoch_;
  std::vector<EpochRecord> history_;
  std::vector<StepRecord> steps_;
  long step_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation.

enum class PolicyKind { kLearned, kOracle, kAllOn, kRandom, kHeuristic };
const char* PolicyKindName(PolicyKind k);
// Throws ConfigError on unknown names.
PolicyKind PolicyKindFromName(const std::string& name);

// Every action on.
DecisionTensor AllOnPolicy(int T, const ActionSpace& space);
// Each row uniform over the rows that are neither all-off nor all-on, so
// every action is selected with probability 1/2 (K >= 2).
DecisionTensor RandomPolicy(int T, const ActionSpace& space, uint64_t seed);
// Audio and behavior always, vision on every 4th segment. Frame selection:
// the middle frame.
DecisionTensor HeuristicPolicy(int T, const ActionSpace& space);

struct MetricsReport {
  std::string policy;
  std::string split;
  double snr_db = std::numeric_limits<double>::infinity();
  std::string metric;  // "accuracy" or "mae_deg"
  double score = 0.0;
  double accuracy = 0.0;
  int segments = 0;
  std::vector<std::string> actions;
  std::vector<double> usage;
  double mean_macs = 0.0;
  double mean_bytes = 0.0;
  double mean_energy = 0.0;
  double all_on_macs = 0.0;  // student graph, every action on
  double policy_macs = 0.0;  // controller overhead per segment
  long student_params = 0;
  long policy_params = 0;
  std::vector<EpochRecord> history;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void to_json(nlohmann::json& j, const MetricsReport& r);

struct EvalOptions {
  PolicyKind policy = PolicyKind::kLearned;
  Split split = Split::kTest;
  double snr_db = std::numeric_limits<double>::infinity();
  uint64_t seed = 0;
  EnergyConfig energy;
};

struct Evaluation {
  MetricsReport report;
  std::vector<DecisionTensor> traces;
  std::vector<int> episodes;  // dataset index per trace
};

// Hard-decision inference over one split. `policy` may be null unless the
// learned policy is requested.
Evaluation Evaluate(const Dataset& data, const StudentModel& student,
                    const PolicyNet* policy, const CostModel& cm,
                    const EvalOptions& opt);

// ---------------------------------------------------------------------------
// Gradient checking.

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coordinates = 0;
};

// Central differences on up to `max_coords` coordinates of `params` (chosen
// with a fixed seed) against the analytic gradient of `loss`. The relative
// error is |a - n| / max(|a|, |n|, 1e-6 * max(1, |loss|)).
GradCheckResult GradCheck(const std::function<ag::Var()>& loss,
                          ParamSet& params, double eps = 1e-5,
                          int max_coords = 512, uint64_t seed = 0);

}  // namespace adaptsense

#endif  // ADAPTSENSE_TRAINING_H_
