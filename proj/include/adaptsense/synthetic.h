#ifndef ADAPTSENSE_SYNTHETIC_H_
#define ADAPTSENSE_SYNTHETIC_H_

// Planted multimodal episodes. Every segment carries its class in exactly one
// "sufficient" modality; the others hold class-free noise.

#include <array>
#include <cstdint>
#include <json.hpp>
#include <limits>
#include <string>
#include <vector>

#include "adaptsense/decisions.h"

namespace adaptsense {

struct SegmentSpec {
  int label = 0;
  Modality sufficient_modality = Modality::kVisual;
  bool audio_event = false;
  // Frame slot carrying the visual pattern and the audio burst, or -1.
  int event_frame = -1;
  // An audio-sufficient segment that also shows the visual pattern.
  bool visual_backup = false;
  double noise_snr_db = std::numeric_limits<double>::infinity();
};

// Arrays are stored as float32 in their on-disk layouts:
//   frames   F x H x W x ch
//   audio    n_ch x L
//   behavior L_b x d_b
struct Segment {
  std::vector<float> frames;
  std::vector<float> audio;
  std::vector<float> behavior;
  SegmentSpec spec;
};

enum class Split { kTrain, kVal, kTest };
const char* SplitName(Split s);

struct Episode {
  int index = 0;
  Split split = Split::kTrain;
  std::vector<Segment> segments;

  int T() const { return static_cast<int>(segments.size()); }
};

struct DatasetConfig {
  int n_episodes = 100;
  int T = 8;
  int F = 4;
  int H = 16;
  int W = 16;
  int ch = 1;
  int n_ch = 4;
  int L = 256;
  int L_b = 32;
  int d_b = 6;
  int C = 10;
  std::array<double, kNumModalities> modality_mix{0.34, 0.33, 0.33};
  double event_rate = 0.5;
  uint64_t seed = 7;
  // Probability that an audio-sufficient segment also carries the visual
  // pattern, so vision can stand in when the audio is corrupted.
  double visual_backup = 0.0;

  void Validate() const;
  int FrameSize() const { return H * W * ch; }
  int FramesSize() const { return F * H * W * ch; }
  int AudioSize() const { return n_ch * L; }
  int BehaviorSize() const { return L_b * d_b; }
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
// Missing keys keep their defaults; wrong types raise ConfigError.
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct Dataset {
  DatasetConfig config;
  std::vector<Episode> episodes;

  std::vector<const Episode*> Select(Split s) const;
};

Episode GenerateEpisode(const DatasetConfig& config, int index);
Dataset GenerateDataset(const DatasetConfig& config);

// Split of episode `index` under the fixed 70/15/15 partition.
Split SplitOf(int index, int n_episodes);

// Exactly the sufficient sensor's action per segment. For channel selection
// the audio choice is channel 0; for frame selection it is the event frame
// (middle slot when the segment has none).
DecisionTensor OraclePolicy(const Episode& episode);
DecisionTensor OraclePolicy(const Episode& episode, const ActionSpace& space);

// Adds white noise so that every segment's noise power is P_signal /
// 10^(snr_db/10), measured over the realized draw.
Episode CorruptAudio(const Episode& episode, double snr_db, uint64_t seed);

// Fixed class templates shared by every dataset seed.
namespace world {
// Grating cos(2*pi*(fy*y/H + fx*x/W)) for class c, H*W values.
std::vector<double> VisualTemplate(int c, int H, int W);
// Tone frequency in cycles per sample.
double AudioFrequency(int c);
// +-1 offset per behavior dimension.
std::vector<double> BehaviorCode(int c, int d_b);
// Largest C each modality can encode for the given shapes.
int MaxVisualClasses(int H, int W);
int MaxAudioClasses();
int MaxBehaviorClasses(int d_b);
}  // namespace world

// Matched-filter classifier reading one modality of a segment.
int TemplateClassify(const Segment& seg, Modality m, const DatasetConfig& c);

// Directory of per-episode .f32 blobs plus manifest.json
// ("adaptsense.episode.v1").
void SaveDataset(const Dataset& dataset, const std::string& dir);
Dataset LoadDataset(const std::string& dir);

}  // namespace adaptsense

#endif  // ADAPTSENSE_SYNTHETIC_H_
