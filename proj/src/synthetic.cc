#include "adaptsense/synthetic.h"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "adaptsense/errors.h"
#include "adaptsense/rng.h"

namespace adaptsense {

static_assert(std::endian::native == std::endian::little,
              "episode blobs are written in host byte order");

namespace {

constexpr double kPixelNoise = 0.5;
constexpr double kAudioNoise = 0.3;
constexpr double kBurstSigma = 1.5;
constexpr double kBehaviorNoise = 0.5;
constexpr int kToneWindow = 32;
constexpr int kFirstToneBin = 3;

// (fy, fx) frequency pairs, one per visual class, in a fixed order.
std::vector<std::pair<int, int>> GratingFrequencies(int H, int W) {
  std::vector<std::pair<int, int>> out;
  const int my = (H - 1) / 2;
  const int mx = (W - 1) / 2;
  for (int fy = 0; fy <= my; ++fy) {
    for (int fx = -mx; fx <= mx; ++fx) {
      if (fy == 0 && fx <= 0) continue;
      out.emplace_back(fy, fx);
    }
  }
  std::stable_sort(out.begin(), out.end(), [](auto a, auto b) {
    int ra = a.first * a.first + a.second * a.second;
    int rb = b.first * b.first + b.second * b.second;
    if (ra != rb) return ra < rb;
    return a < b;
  });
  return out;
}

Modality SampleModality(const std::array<double, kNumModalities>& mix,
                        double u) {
  double cum = 0.0;
  int last = 0;
  for (int k = 0; k < kNumModalities; ++k) {
    if (mix[k] > 0.0) last = k;
    cum += mix[k];
    if (mix[k] > 0.0 && u < cum) return static_cast<Modality>(k);
  }
  return static_cast<Modality>(last);
}

bool CarriesVisual(const SegmentSpec& s) {
  return s.sufficient_modality == Modality::kVisual || s.visual_backup;
}

template <typename T>
T ReadKey(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(fmt::format("data.{} has the wrong type", key));
  }
}

}  // namespace

const char* SplitName(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

namespace world {

std::vector<double> VisualTemplate(int c, int H, int W) {
  auto freqs = GratingFrequencies(H, W);
  if (c < 0 || c >= static_cast<int>(freqs.size())) {
    throw ConfigError(fmt::format("no visual template for class {}", c));
  }
  auto [fy, fx] = freqs[c];
  std::vector<double> t(static_cast<size_t>(H) * W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double phase =
          2.0 * std::numbers::pi *
          (static_cast<double>(fy) * y / H + static_cast<double>(fx) * x / W);
      t[y * W + x] = std::cos(phase);
    }
  }
  return t;
}

double AudioFrequency(int c) {
  return static_cast<double>(c + kFirstToneBin) / kToneWindow;
}

std::vector<double> BehaviorCode(int c, int d_b) {
  // An odd multiplier permutes residues mod 2^d, so codes stay distinct.
  const int bits = std::min(d_b, 20);
  const uint64_t code =
      (static_cast<uint64_t>(c) * 37u + 11u) & ((uint64_t{1} << bits) - 1);
  std::vector<double> v(d_b);
  for (int d = 0; d < d_b; ++d) {
    v[d] = (d < bits && ((code >> d) & 1u)) ? 1.0 : -1.0;
  }
  return v;
}

int MaxVisualClasses(int H, int W) {
  return static_cast<int>(GratingFrequencies(H, W).size());
}

int MaxAudioClasses() { return kToneWindow / 2 - kFirstToneBin; }

int MaxBehaviorClasses(int d_b) { return 1 << std::min(d_b, 20); }

}  // namespace world

void DatasetConfig::Validate() const {
  const std::pair<const char*, int> dims[] = {{"n_episodes", n_episodes},
                                              {"T", T},
                                              {"F", F},
                                              {"H", H},
                                              {"W", W},
                                              {"ch", ch},
                                              {"n_ch", n_ch},
                                              {"L", L},
                                              {"L_b", L_b},
                                              {"d_b", d_b},
                                              {"C", C}};
  for (auto [name, v] : dims) {
    if (v < 1) throw ConfigError(fmt::format("data.{} must be >= 1", name));
  }
  double sum = 0.0;
  for (double p : modality_mix) {
    if (!(p >= 0.0))
      throw ConfigError("data.modality_mix has a negative entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError(fmt::format("data.modality_mix sums to {}, not 1", sum));
  }
  if (!(visual_backup >= 0.0 && visual_backup <= 1.0)) {
    throw ConfigError("data.visual_backup must lie in [0, 1]");
  }
  if (!(event_rate >= 0.0 && event_rate <= 1.0)) {
    throw ConfigError("data.event_rate must lie in [0, 1]");
  }
  const int cap =
      std::min({world::MaxVisualClasses(H, W), world::MaxAudioClasses(),
                world::MaxBehaviorClasses(d_b)});
  if (C > cap) {
    throw ConfigError(fmt::format(
        "data.C = {} exceeds the {} classes these shapes can plant", C, cap));
  }
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"n_episodes", c.n_episodes},
                     {"T", c.T},
                     {"F", c.F},
                     {"H", c.H},
                     {"W", c.W},
                     {"ch", c.ch},
                     {"n_ch", c.n_ch},
                     {"L", c.L},
                     {"L_b", c.L_b},
                     {"d_b", c.d_b},
                     {"C", c.C},
                     {"modality_mix", c.modality_mix},
                     {"event_rate", c.event_rate},
                     {"seed", c.seed},
                     {"visual_backup", c.visual_backup}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  if (!j.is_object()) throw ConfigError("data section must be an object");
  c.n_episodes = ReadKey(j, "n_episodes", c.n_episodes);
  c.T = ReadKey(j, "T", c.T);
  c.F = ReadKey(j, "F", c.F);
  c.H = ReadKey(j, "H", c.H);
  c.W = ReadKey(j, "W", c.W);
  c.ch = ReadKey(j, "ch", c.ch);
  c.n_ch = ReadKey(j, "n_ch", c.n_ch);
  c.L = ReadKey(j, "L", c.L);
  c.L_b = ReadKey(j, "L_b", c.L_b);
  c.d_b = ReadKey(j, "d_b", c.d_b);
  c.C = ReadKey(j, "C", c.C);
  if (j.contains("modality_mix")) {
    auto v = ReadKey<std::vector<double>>(j, "modality_mix", {});
    if (v.size() != kNumModalities) {
      throw ConfigError("data.modality_mix needs 3 entries");
    }
    std::copy(v.begin(), v.end(), c.modality_mix.begin());
  }
  c.event_rate = ReadKey(j, "event_rate", c.event_rate);
  c.seed = ReadKey(j, "seed", c.seed);
  c.visual_backup = ReadKey(j, "visual_backup", c.visual_backup);
}

std::vector<const Episode*> Dataset::Select(Split s) const {
  std::vector<const Episode*> out;
  for (const auto& e : episodes)
    if (e.split == s) out.push_back(&e);
  return out;
}

Split SplitOf(int index, int n_episodes) {
  const int n_train = 70 * n_episodes / 100;
  const int n_val = 15 * n_episodes / 100;
  if (index < n_train) return Split::kTrain;
  if (index < n_train + n_val) return Split::kVal;
  return Split::kTest;
}

Episode GenerateEpisode(const DatasetConfig& config, int index) {
  config.Validate();
  if (index < 0) throw ConfigError("episode index must be >= 0");
  const auto& c = config;
  Rng rng(MixSeed(c.seed, static_cast<uint64_t>(index)));

  std::vector<std::vector<double>> vis(c.C), code(c.C);
  for (int k = 0; k < c.C; ++k) {
    vis[k] = world::VisualTemplate(k, c.H, c.W);
    code[k] = world::BehaviorCode(k, c.d_b);
  }

  Episode ep;
  ep.index = index;
  ep.split = SplitOf(index, c.n_episodes);
  ep.segments.resize(c.T);
  const int win = std::max(1, c.L / c.F);
  for (auto& seg : ep.segments) {
    SegmentSpec& s = seg.spec;
    s.label = rng.UniformInt(c.C);
    s.sufficient_modality = SampleModality(c.modality_mix, rng.Uniform());
    s.audio_event = rng.Uniform() < c.event_rate;
    s.event_frame = s.audio_event ? rng.UniformInt(c.F) : -1;
    // Drawn only when enabled so the default data stream is unchanged.
    if (c.visual_backup > 0.0 && s.sufficient_modality == Modality::kAudio) {
      s.visual_backup = rng.Uniform() < c.visual_backup;
    }

    seg.frames.resize(c.FramesSize());
    const bool show = CarriesVisual(s);
    for (int f = 0; f < c.F; ++f) {
      const bool on = show && (s.event_frame < 0 || s.event_frame == f);
      for (int p = 0; p < c.H * c.W; ++p) {
        for (int q = 0; q < c.ch; ++q) {
          double v = kPixelNoise * rng.Normal();
          if (on) v += vis[s.label][p];
          seg.frames[(static_cast<size_t>(f) * c.H * c.W + p) * c.ch + q] =
              static_cast<float>(v);
        }
      }
    }

    seg.audio.resize(c.AudioSize());
    const bool tone = s.sufficient_modality == Modality::kAudio;
    const double freq = world::AudioFrequency(s.label);
    for (int a = 0; a < c.n_ch; ++a) {
      const double phi = 2.0 * std::numbers::pi * rng.Uniform();
      for (int n = 0; n < c.L; ++n) {
        double v = kAudioNoise * rng.Normal();
        if (tone) v += std::cos(2.0 * std::numbers::pi * freq * n + phi);
        if (s.audio_event && n / win == s.event_frame) {
          v += kBurstSigma * rng.Normal();
        }
        seg.audio[static_cast<size_t>(a) * c.L + n] = static_cast<float>(v);
      }
    }

    seg.behavior.resize(c.BehaviorSize());
    const bool offset = s.sufficient_modality == Modality::kBehavior;
    for (int t = 0; t < c.L_b; ++t) {
      for (int d = 0; d < c.d_b; ++d) {
        double v = kBehaviorNoise * rng.Normal();
        if (offset) v += code[s.label][d];
        seg.behavior[static_cast<size_t>(t) * c.d_b + d] =
            static_cast<float>(v);
      }
    }
  }
  return ep;
}

Dataset GenerateDataset(const DatasetConfig& config) {
  config.Validate();
  Dataset ds;
  ds.config = config;
  ds.episodes.reserve(config.n_episodes);
  for (int i = 0; i < config.n_episodes; ++i) {
    ds.episodes.push_back(GenerateEpisode(config, i));
  }
  return ds;
}

DecisionTensor OraclePolicy(const Episode& episode) {
  return OraclePolicy(episode, ActionSpace::ModalitySelect());
}

DecisionTensor OraclePolicy(const Episode& episode, const ActionSpace& space) {
  DecisionTensor u(episode.T(), space.K);
  for (int t = 0; t < episode.T(); ++t) {
    const SegmentSpec& s = episode.segments[t].spec;
    const int m = static_cast<int>(s.sufficient_modality);
    if (s.label < 0 || m < 0 || m >= kNumModalities) {
      throw ContractError(fmt::format(
          "episode {} segment {} has no planted annotation", episode.index, t));
    }
    int action = 0;
    switch (space.kind) {
      case ActionKind::kModalitySelect:
        action = m;
        break;
      case ActionKind::kChannelSelect:
        action = s.sufficient_modality == Modality::kVisual  ? 0
                 : s.sufficient_modality == Modality::kAudio ? 1
                                                             : space.K - 1;
        break;
      case ActionKind::kFrameSelect:
        action = s.event_frame >= 0 && s.event_frame < space.K ? s.event_frame
                                                               : space.K / 2;
        break;
    }
    for (int k = 0; k < space.K; ++k) {
      u.SetHard(t, k, k == action);
      u.SetSoft(t, k, k == action ? 1.0 : 0.0);
    }
  }
  return u;
}

Episode CorruptAudio(const Episode& episode, double snr_db, uint64_t seed) {
  if (!std::isfinite(snr_db)) {
    throw ConfigError("corrupt_audio needs a finite snr_db");
  }
  Episode out = episode;
  Rng rng(MixSeed(seed, static_cast<uint64_t>(episode.index)));
  for (auto& seg : out.segments) {
    const size_t n = seg.audio.size();
    double p_signal = 0.0;
    for (float v : seg.audio) p_signal += static_cast<double>(v) * v;
    p_signal /= static_cast<double>(n);

    std::vector<double> noise(n);
    double p_noise = 0.0;
    for (auto& z : noise) {
      z = rng.Normal();
      p_noise += z * z;
    }
    p_noise /= static_cast<double>(n);
    const double target = p_signal / std::pow(10.0, snr_db / 10.0);
    const double gain = p_noise > 0.0 ? std::sqrt(target / p_noise) : 0.0;
    for (size_t i = 0; i < n; ++i) {
      seg.audio[i] = static_cast<float>(seg.audio[i] + gain * noise[i]);
    }
    seg.spec.noise_snr_db = snr_db;
  }
  return out;
}

int TemplateClassify(const Segment& seg, Modality m, const DatasetConfig& c) {
  std::vector<double> score(c.C, 0.0);
  switch (m) {
    case Modality::kVisual:
      for (int k = 0; k < c.C; ++k) {
        auto t = world::VisualTemplate(k, c.H, c.W);
        double best = -1e300;
        for (int f = 0; f < c.F; ++f) {
          double dot = 0.0;
          for (int p = 0; p < c.H * c.W; ++p) {
            double px = 0.0;
            for (int q = 0; q < c.ch; ++q)
              px += seg.frames[(static_cast<size_t>(f) * c.H * c.W + p) * c.ch +
                               q];
            dot += px * t[p];
          }
          best = std::max(best, dot);
        }
        score[k] = best;
      }
      break;
    case Modality::kAudio:
      for (int k = 0; k < c.C; ++k) {
        const double w = 2.0 * std::numbers::pi * world::AudioFrequency(k);
        for (int a = 0; a < c.n_ch; ++a) {
          std::complex<double> acc = 0.0;
          for (int n = 0; n < c.L; ++n) {
            acc += static_cast<double>(
                       seg.audio[static_cast<size_t>(a) * c.L + n]) *
                   std::polar(1.0, -w * n);
          }
          score[k] += std::norm(acc);
        }
      }
      break;
    case Modality::kBehavior: {
      std::vector<double> mean(c.d_b, 0.0);
      for (int t = 0; t < c.L_b; ++t)
        for (int d = 0; d < c.d_b; ++d)
          mean[d] += seg.behavior[static_cast<size_t>(t) * c.d_b + d];
      for (int k = 0; k < c.C; ++k) {
        auto code = world::BehaviorCode(k, c.d_b);
        for (int d = 0; d < c.d_b; ++d) score[k] += mean[d] * code[d];
      }
      break;
    }
  }
  return static_cast<int>(std::max_element(score.begin(), score.end()) -
                          score.begin());
}

void SaveDataset(const Dataset& dataset, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir, ec.message()));
  const auto& c = dataset.config;

  nlohmann::json eps = nlohmann::json::array();
  for (const auto& ep : dataset.episodes) {
    const std::string file = fmt::format("ep_{:05d}.f32", ep.index);
    std::ofstream out(fs::path(dir) / file, std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot write {}/{}", dir, file));
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& seg : ep.segments) {
      for (const auto* arr : {&seg.frames, &seg.audio, &seg.behavior}) {
        out.write(reinterpret_cast<const char*>(arr->data()),
                  static_cast<std::streamsize>(arr->size() * sizeof(float)));
      }
      const auto& s = seg.spec;
      segs.push_back(
          {{"label", s.label},
           {"sufficient_modality", ModalityName(s.sufficient_modality)},
           {"audio_event", s.audio_event},
           {"event_frame", s.event_frame},
           {"visual_backup", s.visual_backup},
           {"noise_snr_db", std::isfinite(s.noise_snr_db)
                                ? nlohmann::json(s.noise_snr_db)
                                : nlohmann::json(nullptr)}});
    }
    if (!out) throw IoError(fmt::format("short write to {}/{}", dir, file));
    eps.push_back({{"index", ep.index},
                   {"split", SplitName(ep.split)},
                   {"file", file},
                   {"segments", segs}});
  }

  nlohmann::json manifest = {
      {"format", "adaptsense.episode.v1"},
      {"dtype", "float32"},
      {"byte_order", "little"},
      {"config", c},
      {"shapes",
       {{"frames", {c.F, c.H, c.W, c.ch}},
        {"audio", {c.n_ch, c.L}},
        {"behavior", {c.L_b, c.d_b}}}},
      {"segment_layout", {"frames", "audio", "behavior"}},
      {"episodes", eps}};
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError(fmt::format("cannot write {}/manifest.json", dir));
  mf << manifest.dump(1) << "\n";
}

Dataset LoadDataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError(fmt::format("no dataset manifest in {}", dir));
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("bad dataset manifest: {}", e.what()));
  }
  if (m.value("format", "") != "adaptsense.episode.v1") {
    throw IoError("dataset manifest has an unknown format");
  }
  if (m.value("dtype", "") != "float32") {
    throw IoError("dataset manifest dtype must be float32");
  }
  Dataset ds;
  try {
    ds.config = m.at("config").get<DatasetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("bad dataset config: {}", e.what()));
  }
  ds.config.Validate();
  const auto& c = ds.config;

  try {
    for (const auto& je : m.at("episodes")) {
      Episode ep;
      ep.index = je.at("index").get<int>();
      ep.split = SplitOf(ep.index, c.n_episodes);
      if (je.at("split").get<std::string>() != SplitName(ep.split)) {
        throw IoError(
            fmt::format("episode {} has a foreign split tag", ep.index));
      }
      const auto path = fs::path(dir) / je.at("file").get<std::string>();
      std::ifstream in(path, std::ios::binary);
      if (!in) throw IoError(fmt::format("missing {}", path.string()));
      for (const auto& js : je.at("segments")) {
        Segment seg;
        seg.frames.resize(c.FramesSize());
        seg.audio.resize(c.AudioSize());
        seg.behavior.resize(c.BehaviorSize());
        for (auto* arr : {&seg.frames, &seg.audio, &seg.behavior}) {
          in.read(reinterpret_cast<char*>(arr->data()),
                  static_cast<std::streamsize>(arr->size() * sizeof(float)));
        }
        if (!in) throw IoError(fmt::format("truncated {}", path.string()));
        auto& s = seg.spec;
        s.label = js.at("label").get<int>();
        s.sufficient_modality =
            ModalityFromName(js.at("sufficient_modality").get<std::string>());
        s.audio_event = js.at("audio_event").get<bool>();
        s.event_frame = js.at("event_frame").get<int>();
        s.visual_backup = js.value("visual_backup", false);
        s.noise_snr_db = js.at("noise_snr_db").is_null()
                             ? std::numeric_limits<double>::infinity()
                             : js.at("noise_snr_db").get<double>();
        if (s.label < 0 || s.label >= c.C) {
          throw DataError(fmt::format("episode {} label {} out of range",
                                      ep.index, s.label));
        }
        ep.segments.push_back(std::move(seg));
      }
      if (in.peek() != std::char_traits<char>::eof()) {
        throw IoError(fmt::format("trailing bytes in {}", path.string()));
      }
      if (ep.T() != c.T) {
        throw IoError(fmt::format("episode {} has {} segments, expected {}",
                                  ep.index, ep.T(), c.T));
      }
      ds.episodes.push_back(std::move(ep));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("bad dataset manifest: {}", e.what()));
  }
  if (static_cast<int>(ds.episodes.size()) != c.n_episodes) {
    throw IoError("dataset manifest episode count disagrees with its config");
  }
  return ds;
}

}  // namespace adaptsense
