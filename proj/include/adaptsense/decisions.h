#ifndef ADAPTSENSE_DECISIONS_H_
#define ADAPTSENSE_DECISIONS_H_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace adaptsense {

enum class Modality : int { kVisual = 0, kAudio = 1, kBehavior = 2 };
inline constexpr int kNumModalities = 3;

const char* ModalityName(Modality m);
Modality ModalityFromName(const std::string& name);

enum class ActionKind { kModalitySelect, kChannelSelect, kFrameSelect };

const char* ActionKindName(ActionKind kind);

// The binary gates a policy controls for one task.
//   modality_select: [visual, audio, behavior]
//   channel_select:  [visual, audio_ch0 .. audio_ch{n-1}, behavior]
//   frame_select:    [frame0 .. frame{F-1}]
struct ActionSpace {
  ActionKind kind = ActionKind::kModalitySelect;
  int K = kNumModalities;
  std::vector<std::string> labels;

  static ActionSpace ModalitySelect();
  static ActionSpace ChannelSelect(int n_channels);
  static ActionSpace FrameSelect(int n_frames);

  // Sensor (modality) driven by each action.
  Modality SensorOf(int action) const;
  // Action forced on when a sampled row selects nothing: the cheapest action
  // (lowest index on ties), or the middle slot for frame selection.
  int FallbackAction(const std::vector<double>& lambda) const;
};

// U = {u_{t,k}}: T x K hard decisions plus the relaxed 2-way distributions
// they were sampled from. Index 0 of each pair is "select".
struct DecisionTensor {
  int T = 0;
  int K = 0;
  std::vector<uint8_t> hard;  // T*K
  std::vector<double> soft;   // T*K*2
  uint64_t gumbel_seed = 0;

  DecisionTensor() = default;
  DecisionTensor(int t, int k);

  uint8_t Hard(int t, int k) const { return hard[t * K + k]; }
  void SetHard(int t, int k, uint8_t v) { hard[t * K + k] = v; }
  double SoftSelect(int t, int k) const { return soft[(t * K + k) * 2]; }
  void SetSoft(int t, int k, double p_select);
  std::vector<int> HardRow(int t) const;
  int Count(int k) const;
};

// lambda_k per action, gamma for incorrect predictions, C = segment count.
struct CostModel {
  std::vector<double> lambda;
  double gamma = 0.0;
  int c_total = 0;

  void Validate() const;
};

}  // namespace adaptsense

#endif  // ADAPTSENSE_DECISIONS_H_
