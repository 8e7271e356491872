#include "adaptsense/encoders.h"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "adaptsense/errors.h"

namespace adaptsense {

using ag::Var;

const char* TaskKindName(TaskKind t) {
  switch (t) {
    case TaskKind::kModalitySelect:
      return "modality_select";
    case TaskKind::kChannelSelect:
      return "channel_select";
    case TaskKind::kFrameSelect:
      return "frame_select";
    case TaskKind::kRegression:
      return "regression";
  }
  return "?";
}

TaskKind TaskKindFromName(const std::string& name) {
  if (name == "modality_select") return TaskKind::kModalitySelect;
  if (name == "channel_select") return TaskKind::kChannelSelect;
  if (name == "frame_select") return TaskKind::kFrameSelect;
  if (name == "regression") return TaskKind::kRegression;
  throw ConfigError(fmt::format("unknown task '{}'", name));
}

ActionSpace ActionSpaceFor(TaskKind task, const DatasetConfig& data) {
  switch (task) {
    case TaskKind::kChannelSelect:
      return ActionSpace::ChannelSelect(data.n_ch);
    case TaskKind::kFrameSelect:
      return ActionSpace::FrameSelect(data.F);
    default:
      return ActionSpace::ModalitySelect();
  }
}

std::vector<double> Spectrogram(const float* audio, int n_ch, int L,
                                const SpectrogramSpec& spec) {
  const int nf = spec.Frames(L);
  const int nb = spec.Bins();
  const int w = spec.window;
  if (nf < 1) {
    throw ShapeError(
        fmt::format("spectrogram needs at least {} samples, got {}", w, L));
  }
  std::vector<double> cs(static_cast<size_t>(nb) * w), sn(cs.size());
  for (int k = 0; k < nb; ++k) {
    for (int n = 0; n < w; ++n) {
      const double a = 2.0 * std::numbers::pi * k * n / w;
      cs[k * w + n] = std::cos(a);
      sn[k * w + n] = std::sin(a);
    }
  }
  std::vector<double> out(static_cast<size_t>(n_ch) * nf * nb);
  for (int c = 0; c < n_ch; ++c) {
    for (int f = 0; f < nf; ++f) {
      const float* x = audio + static_cast<size_t>(c) * L + f * spec.hop;
      for (int k = 0; k < nb; ++k) {
        double re = 0.0, im = 0.0;
        for (int n = 0; n < w; ++n) {
          re += x[n] * cs[k * w + n];
          im -= x[n] * sn[k * w + n];
        }
        out[(static_cast<size_t>(c) * nf + f) * nb + k] =
            std::log1p((re * re + im * im) / w);
      }
    }
  }
  return out;
}

StudentConfig StudentConfig::For(TaskKind task, const DatasetConfig& data) {
  StudentConfig c;
  c.task = task;
  c.F = data.F;
  c.H = data.H;
  c.W = data.W;
  c.ch = data.ch;
  c.n_ch = data.n_ch;
  c.L = data.L;
  c.L_b = data.L_b;
  c.d_b = data.d_b;
  c.C = data.C;
  for (Modality m :
       {Modality::kVisual, Modality::kAudio, Modality::kBehavior}) {
    if (c.TrunkSize(m) < 1) {
      throw ConfigError(
          fmt::format("{} input {} is too small for two pooling stages",
                      ModalityName(m), ag::ShapeString(c.InputShape(m))));
    }
  }
  return c;
}

ag::Shape StudentConfig::InputShape(Modality m) const {
  switch (m) {
    case Modality::kVisual:
      return {ch, H, W};
    case Modality::kAudio:
      return {n_ch, spectro.Frames(L), spectro.Bins()};
    case Modality::kBehavior:
      return {d_b, L_b};
  }
  return {};
}

int StudentConfig::TrunkSize(Modality m) const {
  auto s = InputShape(m);
  int n = Width2(m);
  for (size_t i = 1; i < s.size(); ++i) n *= (s[i] / pool) / pool;
  return n;
}

PreparedSegment PrepareSegment(const Segment& seg, const StudentConfig& cfg) {
  PreparedSegment p;
  const int hw = cfg.H * cfg.W;
  if (static_cast<int>(seg.frames.size()) != cfg.F * hw * cfg.ch ||
      static_cast<int>(seg.audio.size()) != cfg.n_ch * cfg.L ||
      static_cast<int>(seg.behavior.size()) != cfg.L_b * cfg.d_b) {
    throw ShapeError("segment arrays do not match the student configuration");
  }
  for (int f = 0; f < cfg.F; ++f) {
    std::vector<double> v(static_cast<size_t>(cfg.ch) * hw);
    for (int p_ = 0; p_ < hw; ++p_)
      for (int q = 0; q < cfg.ch; ++q)
        v[static_cast<size_t>(q) * hw + p_] =
            seg.frames[(static_cast<size_t>(f) * hw + p_) * cfg.ch + q];
    p.frames.push_back(Var::Constant(std::move(v), {cfg.ch, cfg.H, cfg.W}));
  }
  p.spectrogram =
      Var::Constant(Spectrogram(seg.audio.data(), cfg.n_ch, cfg.L, cfg.spectro),
                    cfg.InputShape(Modality::kAudio));
  std::vector<double> b(static_cast<size_t>(cfg.d_b) * cfg.L_b);
  for (int t = 0; t < cfg.L_b; ++t)
    for (int d = 0; d < cfg.d_b; ++d)
      b[static_cast<size_t>(d) * cfg.L_b + t] =
          seg.behavior[static_cast<size_t>(t) * cfg.d_b + d];
  p.behavior = Var::Constant(std::move(b), {cfg.d_b, cfg.L_b});
  p.label = seg.spec.label;
  p.target = world::BehaviorCode(seg.spec.label, cfg.d_b);
  const double norm = std::sqrt(static_cast<double>(cfg.d_b));
  for (auto& v : p.target) v /= norm;
  return p;
}

Feature Encode(const Var& input, const EncoderParams& p,
               const StudentConfig& cfg) {
  const auto expected = cfg.InputShape(p.modality);
  if (input.shape() != expected) {
    throw ShapeError(
        fmt::format("{} encoder expects {}, got {}", ModalityName(p.modality),
                    ag::ShapeString(expected), ag::ShapeString(input.shape())));
  }
  Var h;
  if (p.modality == Modality::kBehavior) {
    h = ag::Relu(
        ag::MaxPool1d(ag::Conv1d(input, p.conv1_w, p.conv1_b), cfg.pool));
    h = ag::Relu(ag::MaxPool1d(ag::Conv1d(h, p.conv2_w, p.conv2_b), cfg.pool));
  } else {
    h = ag::Relu(
        ag::MaxPool2d(ag::Conv2d(input, p.conv1_w, p.conv1_b), cfg.pool));
    h = ag::Relu(ag::MaxPool2d(ag::Conv2d(h, p.conv2_w, p.conv2_b), cfg.pool));
  }
  return {ag::Linear(h, p.proj_w, p.proj_b), ModalityName(p.modality)};
}

namespace {

double HardValue(const Var& v) { return v.defined() ? v.item() : 1.0; }

}  // namespace

Var FusionTerm(const Feature& f, int k, const FusionParams& p) {
  Var w = ag::Slice(p.weights, k, k + 1);
  return ag::MulScalar(ag::Linear(f.values, p.proj_w[k], p.proj_b[k]), w);
}

Feature MixTerms(const std::array<Var, kNumModalities>& terms,
                 const std::array<Var, kNumModalities>& mask,
                 const FusionParams& p) {
  Var acc;
  for (int k = 0; k < kNumModalities; ++k) {
    if (HardValue(mask[k]) == 0.0 && !terms[k].defined()) continue;
    if (!terms[k].defined()) {
      throw ContractError(
          fmt::format("{} is selected but its feature is missing",
                      ModalityName(static_cast<Modality>(k))));
    }
    Var t = ag::MulScalar(terms[k], mask[k]);
    acc = acc.defined() ? ag::Add(acc, t) : t;
  }
  return {ag::Linear(acc, p.mix_w, p.mix_b), "fused"};
}

Feature Fuse(const std::array<Feature, kNumModalities>& features,
             const std::array<Var, kNumModalities>& mask,
             const FusionParams& p) {
  bool any = false;
  for (const auto& m : mask) any = any || HardValue(m) != 0.0;
  if (!any) throw EmptySelectionError("fuse() got an all-masked row");
  std::array<Var, kNumModalities> terms;
  for (int k = 0; k < kNumModalities; ++k) {
    if (features[k].values.defined()) terms[k] = FusionTerm(features[k], k, p);
  }
  return MixTerms(terms, mask, p);
}

Var Classify(const Feature& z, const FusionParams& p) {
  return ag::Linear(z.values, p.head_w, p.head_b);
}

StudentModel::StudentModel(const StudentConfig& cfg, uint64_t seed)
    : cfg_(cfg) {
  Rng rng(seed);
  const int k = cfg.kernel;
  for (Modality m :
       {Modality::kVisual, Modality::kAudio, Modality::kBehavior}) {
    if (!HasModality(m)) continue;
    const std::string n = ModalityName(m);
    const int in_c = cfg.InputShape(m)[0];
    const bool is1d = m == Modality::kBehavior;
    ag::Shape w1 = is1d ? ag::Shape{cfg.width1, in_c, k}
                        : ag::Shape{cfg.width1, in_c, k, k};
    const int width2 = cfg.Width2(m);
    ag::Shape w2 = is1d ? ag::Shape{width2, cfg.width1, k}
                        : ag::Shape{width2, cfg.width1, k, k};
    const int taps = is1d ? k : k * k;
    params_.AddUniform(n + ".conv1.w", w1, in_c * taps, rng);
    params_.AddConstant(n + ".conv1.b", {cfg.width1}, 0.0);
    params_.AddUniform(n + ".conv2.w", w2, cfg.width1 * taps, rng);
    params_.AddConstant(n + ".conv2.b", {width2}, 0.0);
    params_.AddLecun(n + ".proj.w", {cfg.d_f, cfg.TrunkSize(m)},
                       cfg.TrunkSize(m), rng);
    params_.AddConstant(n + ".proj.b", {cfg.d_f}, 0.0);
  }
  for (Modality m :
       {Modality::kVisual, Modality::kAudio, Modality::kBehavior}) {
    if (!HasModality(m)) continue;
    const std::string n = std::string("fusion.") + ModalityName(m);
    params_.AddLecun(n + ".w", {cfg.d_f, cfg.d_f}, cfg.d_f, rng);
    params_.AddConstant(n + ".b", {cfg.d_f}, 0.0);
  }
  params_.AddConstant("fusion.weights", {kNumModalities}, 1.0);
  params_.AddLecun("fusion.mix.w", {cfg.d_f, cfg.d_f}, cfg.d_f, rng);
  params_.AddConstant("fusion.mix.b", {cfg.d_f}, 0.0);
  params_.AddLecun("head.w", {cfg.OutDim(), cfg.d_f}, cfg.d_f, rng);
  params_.AddConstant("head.b", {cfg.OutDim()}, 0.0);
}

bool StudentModel::HasModality(Modality m) const {
  return cfg_.task != TaskKind::kFrameSelect || m == Modality::kVisual;
}

EncoderParams StudentModel::encoder(Modality m) const {
  if (!HasModality(m)) {
    throw ContractError(fmt::format("{} task has no {} encoder",
                                    TaskKindName(cfg_.task), ModalityName(m)));
  }
  const std::string n = ModalityName(m);
  return {m,
          params_.Get(n + ".conv1.w"),
          params_.Get(n + ".conv1.b"),
          params_.Get(n + ".conv2.w"),
          params_.Get(n + ".conv2.b"),
          params_.Get(n + ".proj.w"),
          params_.Get(n + ".proj.b")};
}

FusionParams StudentModel::fusion() const {
  FusionParams f;
  for (int k = 0; k < kNumModalities; ++k) {
    const std::string n =
        std::string("fusion.") + ModalityName(static_cast<Modality>(k));
    if (!params_.Contains(n + ".w")) continue;
    f.proj_w[k] = params_.Get(n + ".w");
    f.proj_b[k] = params_.Get(n + ".b");
  }
  f.weights = params_.Get("fusion.weights");
  f.mix_w = params_.Get("fusion.mix.w");
  f.mix_b = params_.Get("fusion.mix.b");
  f.head_w = params_.Get("head.w");
  f.head_b = params_.Get("head.b");
  return f;
}

StudentGates StudentGates::AllOn(const StudentConfig& cfg) {
  StudentGates g;
  const bool frame_task = cfg.task == TaskKind::kFrameSelect;
  g.modality[0] = Var::Scalar(1.0);
  g.modality[1] = Var::Scalar(frame_task ? 0.0 : 1.0);
  g.modality[2] = Var::Scalar(frame_task ? 0.0 : 1.0);
  return g;
}

StudentGates StudentGates::FromRow(const std::vector<int>& row,
                                   const StudentConfig& cfg) {
  std::vector<Var> actions;
  for (int v : row) actions.push_back(Var::Scalar(v ? 1.0 : 0.0));
  return FromActions(actions, cfg);
}

StudentGates StudentGates::FromActions(const std::vector<Var>& a,
                                       const StudentConfig& cfg) {
  StudentGates g;
  auto any_of = [&](int begin, int end) {
    for (int i = begin; i < end; ++i)
      if (a[i].item() != 0.0) return Var::Scalar(1.0);
    return Var::Scalar(0.0);
  };
  switch (cfg.task) {
    case TaskKind::kModalitySelect:
    case TaskKind::kRegression:
      if (a.size() != kNumModalities) {
        throw ShapeError(
            fmt::format("modality row needs 3 actions, got {}", a.size()));
      }
      g.modality = {a[0], a[1], a[2]};
      break;
    case TaskKind::kChannelSelect: {
      if (static_cast<int>(a.size()) != cfg.n_ch + 2) {
        throw ShapeError(fmt::format("channel row needs {} actions, got {}",
                                     cfg.n_ch + 2, a.size()));
      }
      g.modality = {a[0], any_of(1, cfg.n_ch + 1), a[cfg.n_ch + 1]};
      std::vector<Var> ch(a.begin() + 1, a.begin() + 1 + cfg.n_ch);
      g.audio_channels = ag::Concat(ch);
      break;
    }
    case TaskKind::kFrameSelect:
      if (static_cast<int>(a.size()) != cfg.F) {
        throw ShapeError(
            fmt::format("frame row needs {} actions, got {}", cfg.F, a.size()));
      }
      g.modality = {any_of(0, cfg.F), Var::Scalar(0.0), Var::Scalar(0.0)};
      g.frames = ag::Concat(a);
      break;
  }
  return g;
}

bool StudentGates::On(Modality m) const {
  return HardValue(modality[static_cast<int>(m)]) != 0.0;
}

EncoderCache EncodeAll(const PreparedSegment& seg, const StudentModel& model) {
  const StudentConfig& cfg = model.config();
  EncoderCache c;
  const EncoderParams ev = model.encoder(Modality::kVisual);
  for (const auto& f : seg.frames)
    c.frames.push_back(ag::StopGradient(Encode(f, ev, cfg).values));
  if (model.HasModality(Modality::kAudio)) {
    c.audio = ag::StopGradient(
        Encode(seg.spectrogram, model.encoder(Modality::kAudio), cfg).values);
  }
  if (model.HasModality(Modality::kBehavior)) {
    c.behavior = ag::StopGradient(
        Encode(seg.behavior, model.encoder(Modality::kBehavior), cfg).values);
  }
  return c;
}

StudentOutput StudentForward(const PreparedSegment& seg,
                             const StudentGates& gates,
                             const StudentModel& model, ForwardStats* stats,
                             const EncoderCache* cache) {
  const StudentConfig& cfg = model.config();
  const FusionParams fp = model.fusion();
  bool any = false;
  for (const auto& m : gates.modality) any = any || HardValue(m) != 0.0;
  if (!any) throw EmptySelectionError("student_forward got an all-off row");

  StudentOutput out;
  std::array<Feature, kNumModalities> feats;

  if (gates.On(Modality::kVisual) || gates.evaluate_all) {
    const EncoderParams ep = model.encoder(Modality::kVisual);
    const int F = static_cast<int>(seg.frames.size());
    Var acc;
    double count = 0.0;
    for (int f = 0; f < F; ++f) {
      Var m = gates.frames.defined() ? ag::Slice(gates.frames, f, f + 1)
                                     : Var::Scalar(1.0);
      if (m.item() == 0.0 && !gates.evaluate_all) continue;
      if (stats) ++stats->visual_calls;
      Var z = cache ? cache->frames.at(f) : Encode(seg.frames[f], ep, cfg).values;
      if (gates.frames.defined()) z = ag::MulScalar(z, m);
      acc = acc.defined() ? ag::Add(acc, z) : z;
      count += m.item();
    }
    feats[0] = {ag::Scale(acc, 1.0 / std::max(count, 1.0)), "visual"};
  }
  if (model.HasModality(Modality::kAudio) &&
      (gates.On(Modality::kAudio) || gates.evaluate_all)) {
    if (stats) ++stats->audio_calls;
    if (cache && !gates.audio_channels.defined()) {
      feats[1] = {cache->audio, "audio"};
    } else {
      Var x = seg.spectrogram;
      if (gates.audio_channels.defined()) {
        x = ag::MulChannels(x, gates.audio_channels);
      }
      feats[1] = Encode(x, model.encoder(Modality::kAudio), cfg);
    }
  }
  if (model.HasModality(Modality::kBehavior) &&
      (gates.On(Modality::kBehavior) || gates.evaluate_all)) {
    if (stats) ++stats->behavior_calls;
    feats[2] = cache ? Feature{cache->behavior, "behavior"}
                     : Encode(seg.behavior, model.encoder(Modality::kBehavior),
                              cfg);
  }

  std::array<Var, kNumModalities> mask;
  for (int k = 0; k < kNumModalities; ++k) {
    mask[k] =
        gates.modality[k].defined() ? gates.modality[k] : Var::Scalar(1.0);
    if (feats[k].values.defined()) out.terms[k] = FusionTerm(feats[k], k, fp);
  }
  out.z = MixTerms(out.terms, mask, fp);
  out.logits = Classify(out.z, fp);
  return out;
}

}  // namespace adaptsense
