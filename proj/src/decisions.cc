#include "adaptsense/decisions.h"

#include <fmt/format.h>

#include "adaptsense/errors.h"

namespace adaptsense {

const char* ModalityName(Modality m) {
  switch (m) {
    case Modality::kVisual:
      return "visual";
    case Modality::kAudio:
      return "audio";
    case Modality::kBehavior:
      return "behavior";
  }
  return "?";
}

Modality ModalityFromName(const std::string& name) {
  if (name == "visual") return Modality::kVisual;
  if (name == "audio") return Modality::kAudio;
  if (name == "behavior") return Modality::kBehavior;
  throw DataError("unknown modality '" + name + "'");
}

const char* ActionKindName(ActionKind kind) {
  switch (kind) {
    case ActionKind::kModalitySelect:
      return "modality_select";
    case ActionKind::kChannelSelect:
      return "channel_select";
    case ActionKind::kFrameSelect:
      return "frame_select";
  }
  return "?";
}

ActionSpace ActionSpace::ModalitySelect() {
  return {ActionKind::kModalitySelect,
          kNumModalities,
          {"visual", "audio", "behavior"}};
}

ActionSpace ActionSpace::ChannelSelect(int n_channels) {
  if (n_channels < 1) throw ConfigError("channel_select needs n_ch >= 1");
  ActionSpace s{ActionKind::kChannelSelect, n_channels + 2, {"visual"}};
  for (int c = 0; c < n_channels; ++c)
    s.labels.push_back(fmt::format("audio{}", c));
  s.labels.push_back("behavior");
  return s;
}

ActionSpace ActionSpace::FrameSelect(int n_frames) {
  if (n_frames < 1) throw ConfigError("frame_select needs F >= 1");
  ActionSpace s{ActionKind::kFrameSelect, n_frames, {}};
  for (int f = 0; f < n_frames; ++f)
    s.labels.push_back(fmt::format("frame{}", f));
  return s;
}

Modality ActionSpace::SensorOf(int action) const {
  switch (kind) {
    case ActionKind::kModalitySelect:
      return static_cast<Modality>(action);
    case ActionKind::kChannelSelect:
      if (action == 0) return Modality::kVisual;
      if (action == K - 1) return Modality::kBehavior;
      return Modality::kAudio;
    case ActionKind::kFrameSelect:
      return Modality::kVisual;
  }
  return Modality::kVisual;
}

int ActionSpace::FallbackAction(const std::vector<double>& lambda) const {
  if (kind == ActionKind::kFrameSelect) return K / 2;
  int best = 0;
  for (int k = 1; k < K && k < static_cast<int>(lambda.size()); ++k)
    if (lambda[k] < lambda[best]) best = k;
  return best;
}

DecisionTensor::DecisionTensor(int t, int k)
    : T(t),
      K(k),
      hard(static_cast<size_t>(t) * k, 0),
      soft(static_cast<size_t>(t) * k * 2, 0.0) {
  for (size_t i = 0; i < soft.size(); i += 2) {
    soft[i] = 0.5;
    soft[i + 1] = 0.5;
  }
}

void DecisionTensor::SetSoft(int t, int k, double p_select) {
  soft[(t * K + k) * 2] = p_select;
  soft[(t * K + k) * 2 + 1] = 1.0 - p_select;
}

std::vector<int> DecisionTensor::HardRow(int t) const {
  return std::vector<int>(hard.begin() + t * K, hard.begin() + (t + 1) * K);
}

int DecisionTensor::Count(int k) const {
  int n = 0;
  for (int t = 0; t < T; ++t) n += hard[t * K + k];
  return n;
}

void CostModel::Validate() const {
  for (double l : lambda)
    if (!(l >= 0.0)) throw ConfigError("lambda entries must be >= 0");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  if (c_total < 1) throw ConfigError("cost model needs C >= 1");
}

}  // namespace adaptsense
