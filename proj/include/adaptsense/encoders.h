#ifndef ADAPTSENSE_ENCODERS_H_
#define ADAPTSENSE_ENCODERS_H_

#include <array>
#include <string>
#include <vector>

#include "adaptsense/decisions.h"
#include "adaptsense/params.h"
#include "adaptsense/synthetic.h"
#include "adaptsense/tensor.h"

namespace adaptsense {

enum class TaskKind {
  kModalitySelect,
  kChannelSelect,
  kFrameSelect,
  kRegression
};

const char* TaskKindName(TaskKind t);
TaskKind TaskKindFromName(const std::string& name);
ActionSpace ActionSpaceFor(TaskKind task, const DatasetConfig& data);

struct SpectrogramSpec {
  int window = 32;
  int hop = 16;
  int Frames(int L) const { return L < window ? 0 : (L - window) / hop + 1; }
  int Bins() const { return window / 2 + 1; }
};

// log1p(|DFT|^2 / window) of rectangular windows, [n_ch, frames, bins].
std::vector<double> Spectrogram(const float* audio, int n_ch, int L,
                                const SpectrogramSpec& spec);

struct StudentConfig {
  TaskKind task = TaskKind::kModalitySelect;
  int d_f = 64;
  int width1 = 8;
  int width2 = 16;
  // The visual trunk is the widest, so that vision dominates the compute.
  int visual_width2 = 32;
  int kernel = 3;
  int pool = 2;
  SpectrogramSpec spectro{32, 32};
  // Input shapes, copied from the dataset.
  int F = 4, H = 16, W = 16, ch = 1;
  int n_ch = 4, L = 256;
  int L_b = 32, d_b = 6;
  int C = 10;

  static StudentConfig For(TaskKind task, const DatasetConfig& data);
  // C logits, or d_b reals for the regression head.
  int OutDim() const { return task == TaskKind::kRegression ? d_b : C; }
  ag::Shape InputShape(Modality m) const;
  int Width2(Modality m) const {
    return m == Modality::kVisual ? visual_width2 : width2;
  }
  // Flattened size after two conv/pool stages.
  int TrunkSize(Modality m) const;
};

// One segment converted to encoder layouts.
struct PreparedSegment {
  std::vector<ag::Var> frames;  // F x [ch, H, W]
  ag::Var spectrogram;          // [n_ch, frames, bins]
  ag::Var behavior;             // [d_b, L_b]
  int label = 0;
  std::vector<double> target;  // regression target (unit behavior code)
};

PreparedSegment PrepareSegment(const Segment& seg, const StudentConfig& cfg);

struct EncoderParams {
  Modality modality = Modality::kVisual;
  ag::Var conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;
};

struct FusionParams {
  std::array<ag::Var, kNumModalities> proj_w, proj_b;
  ag::Var weights;  // [3], learnable w_k
  ag::Var mix_w, mix_b;
  ag::Var head_w, head_b;
};

struct Feature {
  ag::Var values;
  std::string source;
};

Feature Encode(const ag::Var& input, const EncoderParams& p,
               const StudentConfig& cfg);

// z = M (sum_k mask_k w_k (P_k z_k + b_k)) + b. Features with a zero hard mask
// may be left undefined. mask entries are single-element Vars so that a
// straight-through gate can carry gradient.
Feature Fuse(const std::array<Feature, kNumModalities>& features,
             const std::array<ag::Var, kNumModalities>& mask,
             const FusionParams& p);

ag::Var Classify(const Feature& z, const FusionParams& p);

// The two halves of Fuse(): the per-modality term w_k (P_k z_k + b_k), and
// the masked sum followed by the mixing layer. Exposed so that callers with a
// frozen trunk can cache terms.
ag::Var FusionTerm(const Feature& f, int k, const FusionParams& p);
Feature MixTerms(const std::array<ag::Var, kNumModalities>& terms,
                 const std::array<ag::Var, kNumModalities>& mask,
                 const FusionParams& p);

class StudentModel {
 public:
  StudentModel(const StudentConfig& cfg, uint64_t seed);

  const StudentConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  // The frame task only has the visual branch.
  bool HasModality(Modality m) const;
  EncoderParams encoder(Modality m) const;
  FusionParams fusion() const;

 private:
  StudentConfig cfg_;
  ParamSet params_;
};

// Per-call gates. Each entry is a single-element Var whose value is 0 or 1;
// undefined channel/frame masks mean all on.
struct StudentGates {
  std::array<ag::Var, kNumModalities> modality;
  ag::Var audio_channels;  // [n_ch]
  ag::Var frames;          // [F]
  // Evaluate encoders of gated-off inputs as well, so that straight-through
  // gates receive a gradient. Forward values are unchanged.
  bool evaluate_all = false;

  static StudentGates AllOn(const StudentConfig& cfg);
  // Hard gates from one decision row of the task's action space.
  static StudentGates FromRow(const std::vector<int>& row,
                              const StudentConfig& cfg);
  // Gates from per-action Vars (hard forward, possibly soft gradient).
  static StudentGates FromActions(const std::vector<ag::Var>& actions,
                                  const StudentConfig& cfg);
  bool On(Modality m) const;
};

struct ForwardStats {
  long visual_calls = 0;
  long audio_calls = 0;
  long behavior_calls = 0;
};

struct StudentOutput {
  Feature z;
  ag::Var logits;
  // Gated per-modality fusion terms, w_k (P_k z_k + b_k), before masking.
  std::array<ag::Var, kNumModalities> terms;
};

// Encoder outputs of one segment with every input on, detached from the
// graph. Valid only while the student's parameters do not change.
struct EncoderCache {
  std::vector<ag::Var> frames;  // per-frame visual features
  ag::Var audio;
  ag::Var behavior;
};

EncoderCache EncodeAll(const PreparedSegment& seg, const StudentModel& model);

// With a cache, encoder outputs are taken from it instead of recomputed. The
// audio encoder still runs when a channel mask is given.
StudentOutput StudentForward(const PreparedSegment& seg,
                             const StudentGates& gates,
                             const StudentModel& model,
                             ForwardStats* stats = nullptr,
                             const EncoderCache* cache = nullptr);

}  // namespace adaptsense

#endif  // ADAPTSENSE_ENCODERS_H_
