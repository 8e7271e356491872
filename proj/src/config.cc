#include "adaptsense/config.h"

#include <cerrno>
#include <cstdlib>
#include <fstream>

#include <fmt/format.h>

#include "adaptsense/errors.h"
#include "adaptsense/rng.h"

namespace adaptsense {

using nlohmann::json;

namespace {

// Every key of `given` must also appear in `known`, recursively through
// objects. Arrays and scalars are not descended into.
void CheckKnownKeys(const json& given, const json& known,
                    const std::string& where) {
  if (!given.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!known.is_object() || !known.contains(key)) {
      throw ConfigError(fmt::format("unknown key '{}'", path));
    }
    if (value.is_object()) CheckKnownKeys(value, known.at(key), path);
  }
}

template <typename T>
T Section(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  T out = fallback;
  from_json(j.at(key), out);
  return out;
}

}  // namespace

void to_json(json& j, const StudentArch& a) {
  j = {{"d_f", a.d_f},
       {"width1", a.width1},
       {"width2", a.width2},
       {"visual_width2", a.visual_width2},
       {"kernel", a.kernel},
       {"pool", a.pool},
       {"spectrogram", {{"window", a.spectro.window}, {"hop", a.spectro.hop}}}};
}

void from_json(const json& j, StudentArch& a) {
  try {
    a.d_f = j.value("d_f", a.d_f);
    a.width1 = j.value("width1", a.width1);
    a.width2 = j.value("width2", a.width2);
    a.visual_width2 = j.value("visual_width2", a.visual_width2);
    a.kernel = j.value("kernel", a.kernel);
    a.pool = j.value("pool", a.pool);
    if (j.contains("spectrogram")) {
      const auto& s = j.at("spectrogram");
      a.spectro.window = s.value("window", a.spectro.window);
      a.spectro.hop = s.value("hop", a.spectro.hop);
    }
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("student section: {}", e.what()));
  }
  if (a.d_f < 1 || a.width1 < 1 || a.width2 < 1 || a.visual_width2 < 1 ||
      a.kernel < 1 || a.kernel % 2 == 0 || a.pool < 1) {
    throw ConfigError(
        "student widths must be >= 1 and the kernel odd and positive");
  }
  if (a.spectro.window < 2 || a.spectro.hop < 1) {
    throw ConfigError("student.spectrogram needs window >= 2 and hop >= 1");
  }
}

void Config::Validate() const {
  data.Validate();
  distill.Validate();
  Train().Validate();
  energy.coeffs.Validate();
  if (!(energy.segment_seconds > 0.0) || !(energy.sensor_floor_seconds >= 0.0)) {
    throw ConfigError("energy timing values must be positive");
  }
  if (task == TaskKind::kFrameSelect) policy.preview.Validate();
  const ActionSpace space = Actions();
  if (static_cast<int>(lambda.size()) != space.K) {
    throw ConfigError(fmt::format(
        "cost.lambda has {} entries but the {} action space has {}",
        lambda.size(), ActionKindName(space.kind), space.K));
  }
  Cost().Validate();
  for (double s : eval.snr_sweep) {
    if (!std::isfinite(s)) throw ConfigError("eval.snr_sweep must be finite");
  }
  Student();
}

StudentConfig Config::Student() const {
  StudentConfig c = StudentConfig::For(task, data);
  c.d_f = student.d_f;
  c.width1 = student.width1;
  c.width2 = student.width2;
  c.visual_width2 = student.visual_width2;
  c.kernel = student.kernel;
  c.pool = student.pool;
  c.spectro = student.spectro;
  for (Modality m :
       {Modality::kVisual, Modality::kAudio, Modality::kBehavior}) {
    if (c.InputShape(m)[1] < 1 || c.TrunkSize(m) < 1) {
      throw ConfigError(fmt::format(
          "{} input {} is too small for the student trunk", ModalityName(m),
          ag::ShapeString(c.InputShape(m))));
    }
  }
  return c;
}

TrainConfig Config::Train() const {
  TrainConfig t = train;
  t.task = task;
  t.seed = seed;
  t.distill = distill;
  return t;
}

CostModel Config::Cost() const {
  CostModel cm;
  cm.lambda = lambda;
  cm.gamma = gamma;
  cm.c_total = data.T;
  return cm;
}

uint64_t Config::StudentSeed() const { return MixSeed(seed, 1); }
uint64_t Config::PolicySeed() const { return MixSeed(seed, 2); }

void to_json(json& j, const Config& c) {
  j = {{"format", kConfigFormat},
       {"preset", c.preset},
       {"seed", c.seed},
       {"task", TaskKindName(c.task)},
       {"data", c.data},
       {"student", c.student},
       {"policy", c.policy},
       {"distill", c.distill},
       {"train", c.train},
       {"cost", {{"lambda", c.lambda}, {"gamma", c.gamma}}},
       {"energy", c.energy},
       {"eval", {{"snr_sweep", c.eval.snr_sweep}}}};
}

void from_json(const json& j, Config& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  CheckKnownKeys(j, json(Config{}), "");
  try {
    if (j.contains("format") && j.at("format").get<std::string>() !=
                                    kConfigFormat) {
      throw ConfigError(fmt::format("unsupported config format '{}'",
                                    j.at("format").get<std::string>()));
    }
    c.preset = j.value("preset", c.preset);
    c.seed = j.value("seed", c.seed);
    if (j.contains("task")) {
      c.task = TaskKindFromName(j.at("task").get<std::string>());
    }
    if (j.contains("data")) c.data = j.at("data").get<DatasetConfig>();
    c.student = Section(j, "student", c.student);
    c.policy = Section(j, "policy", c.policy);
    c.distill = Section(j, "distill", c.distill);
    c.train = Section(j, "train", c.train);
    if (j.contains("cost")) {
      const auto& k = j.at("cost");
      c.lambda = k.value("lambda", c.lambda);
      c.gamma = k.value("gamma", c.gamma);
    }
    c.energy = Section(j, "energy", c.energy);
    if (j.contains("eval")) {
      c.eval.snr_sweep = j.at("eval").value("snr_sweep", c.eval.snr_sweep);
    }
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::string> PresetNames() {
  return {"modality", "channel", "frame", "regression", "noise"};
}

Config PresetConfig(const std::string& name) {
  Config c;
  c.preset = name;
  if (name == "modality") return c;
  if (name == "channel") {
    c.task = TaskKind::kChannelSelect;
    c.lambda = {1.0};
    for (int i = 0; i < c.data.n_ch; ++i) c.lambda.push_back(0.05);
    c.lambda.push_back(0.03);
    return c;
  }
  if (name == "frame") {
    c.task = TaskKind::kFrameSelect;
    c.data.modality_mix = {1.0, 0.0, 0.0};
    c.data.event_rate = 1.0;
    c.distill.tau_kd = 1.0;
    c.lambda.assign(c.data.F, 1.0);
    return c;
  }
  if (name == "regression") {
    c.task = TaskKind::kRegression;
    return c;
  }
  if (name == "noise") {
    c.data.n_episodes = 200;
    c.data.visual_backup = 0.9;
    c.train.epochs2 = 30;
    c.train.policy_lr = 0.1;
    c.train.noise.prob = 0.5;
    c.train.noise.snr_db = {-10.0, -5.0, 0.0};
    c.train.noise.first_stage = 2;
    c.eval.snr_sweep = {0.0, -10.0};
    return c;
  }
  throw ConfigError(fmt::format("unknown preset '{}'", name));
}

json ReadJsonFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read {}", path));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

void ApplyOverride(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(
        fmt::format("override '{}' is not key=value", assignment));
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  std::string pointer;
  size_t start = 0;
  while (start <= key.size()) {
    const size_t dot = std::min(key.find('.', start), key.size());
    pointer += "/" + key.substr(start, dot - start);
    start = dot + 1;
  }
  const json::json_pointer ptr(pointer);
  if (!doc.contains(ptr)) {
    throw ConfigError(fmt::format("unknown key '{}'", key));
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  doc[ptr] = value;
}

Config ResolveConfig(const ConfigSources& src) {
  json file = json::object();
  if (!src.file.empty()) {
    file = ReadJsonFile(src.file);
    if (!file.is_object()) {
      throw ConfigError(fmt::format("{}: expected a JSON object", src.file));
    }
  }
  std::string preset = "modality";
  if (src.preset) {
    preset = *src.preset;
  } else if (file.contains("preset")) {
    if (!file.at("preset").is_string()) {
      throw ConfigError("preset must be a string");
    }
    preset = file.at("preset").get<std::string>();
  }
  json doc = PresetConfig(preset);
  CheckKnownKeys(file, doc, "");
  doc.merge_patch(file);
  if (!src.patch.is_null()) {
    CheckKnownKeys(src.patch, doc, "");
    doc.merge_patch(src.patch);
  }
  doc["preset"] = preset;

  if (src.use_env) {
    if (const char* env = std::getenv(kSeedEnv); env != nullptr && *env) {
      errno = 0;
      char* end = nullptr;
      const unsigned long long v = std::strtoull(env, &end, 10);
      if (errno != 0 || *end != '\0' || env[0] == '-') {
        throw ConfigError(fmt::format("{}='{}' is not a seed", kSeedEnv, env));
      }
      doc["seed"] = static_cast<uint64_t>(v);
    }
  }
  for (const auto& o : src.overrides) ApplyOverride(doc, o);

  Config c = doc.get<Config>();
  c.Validate();
  return c;
}

}  // namespace adaptsense
