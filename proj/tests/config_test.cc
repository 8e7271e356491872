#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "adaptsense/config.h"
#include "adaptsense/errors.h"
#include "support/tiny.h"

namespace as = adaptsense;
using nlohmann::json;

namespace {

std::string WriteFile(const std::string& name, const std::string& text) {
  const std::string dir = as::testing::ScratchDir("config_" + name);
  const std::string path = dir + "/" + name;
  std::ofstream(path) << text;
  return path;
}

as::Config Resolve(const std::string& file, std::vector<std::string> sets = {},
                   bool env = false) {
  as::ConfigSources src;
  src.file = file;
  src.overrides = std::move(sets);
  src.use_env = env;
  return as::ResolveConfig(src);
}

}  // namespace

TEST(Config, DefaultsMatchTheDocumentedValues) {
  const as::Config c = Resolve("");
  EXPECT_EQ(c.preset, "modality");
  EXPECT_EQ(c.distill.alpha, 0.90);
  EXPECT_EQ(c.distill.beta, 0.85);
  EXPECT_EQ(c.distill.tau_kd, 10.0);
  EXPECT_EQ(c.lambda, (std::vector<double>{1.0, 0.05, 0.03}));
  EXPECT_EQ(c.gamma, 10.0);
  EXPECT_EQ(c.train.eta1, 0.95);
  EXPECT_EQ(c.train.eta2, 1.2);
  EXPECT_EQ(c.train.epochs1, 30);
  EXPECT_EQ(c.train.epochs2, 20);
  EXPECT_EQ(c.train.epochs3, 30);
  EXPECT_EQ(c.train.momentum, 0.9);
  EXPECT_EQ(c.train.tau_init, 5.0);
  EXPECT_EQ(c.train.tau_decay, 0.965);
  EXPECT_EQ(c.train.tau_floor, 0.5);
  EXPECT_EQ(c.train.patience, 5);
  EXPECT_EQ(c.train.alternations, 1);
  EXPECT_EQ(c.policy.d_h, 64);
  EXPECT_EQ(c.policy.preview.delta, 0.5);
  EXPECT_EQ(c.student.d_f, 64);
  EXPECT_EQ(c.data.n_episodes, 100);
}

TEST(Config, FlagBeatsFileBeatsDefault) {
  const std::string path =
      WriteFile("a.json", R"({"cost": {"gamma": 3.0}, "train": {"epochs1": 7}})");
  const as::Config file_only = Resolve(path);
  EXPECT_EQ(file_only.gamma, 3.0);
  EXPECT_EQ(file_only.train.epochs1, 7);
  EXPECT_EQ(file_only.train.epochs2, 20);  // default kept
  const as::Config flagged = Resolve(path, {"cost.gamma=5", "train.epochs2=4"});
  EXPECT_EQ(flagged.gamma, 5.0);
  EXPECT_EQ(flagged.train.epochs1, 7);
  EXPECT_EQ(flagged.train.epochs2, 4);
}

TEST(Config, PresetsSetTaskDefaultsUnderTheFile) {
  const as::Config frame = as::PresetConfig("frame");
  EXPECT_EQ(frame.task, as::TaskKind::kFrameSelect);
  EXPECT_EQ(frame.distill.tau_kd, 1.0);
  EXPECT_EQ(frame.lambda.size(), static_cast<size_t>(frame.data.F));
  const std::string path = WriteFile("p.json", R"({"preset": "channel", "seed": 4})");
  const as::Config c = Resolve(path);
  EXPECT_EQ(c.task, as::TaskKind::kChannelSelect);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.lambda.size(), static_cast<size_t>(c.data.n_ch + 2));
  as::ConfigSources src;
  src.file = path;
  src.preset = "modality";
  src.use_env = false;
  EXPECT_EQ(as::ResolveConfig(src).task, as::TaskKind::kModalitySelect);
  for (const auto& name : as::PresetNames()) EXPECT_NO_THROW(as::PresetConfig(name).Validate());
  EXPECT_THROW(as::PresetConfig("nope"), as::ConfigError);
}

TEST(Config, EnvironmentSeedSitsBetweenFileAndFlags) {
  const std::string path = WriteFile("s.json", R"({"seed": 3})");
  ::setenv(as::kSeedEnv, "41", 1);
  EXPECT_EQ(Resolve(path, {}, true).seed, 41u);
  EXPECT_EQ(Resolve(path, {}, false).seed, 3u);
  EXPECT_EQ(Resolve(path, {"seed=9"}, true).seed, 9u);
  ::setenv(as::kSeedEnv, "not-a-number", 1);
  EXPECT_THROW(Resolve(path, {}, true), as::ConfigError);
  ::unsetenv(as::kSeedEnv);
  EXPECT_EQ(Resolve(path, {}, true).seed, 3u);
}

TEST(Config, MalformedInputsAreConfigErrors) {
  EXPECT_THROW(Resolve(WriteFile("bad.json", "{ not json")), as::ConfigError);
  EXPECT_THROW(Resolve(WriteFile("u.json", R"({"trian": {}})")), as::ConfigError);
  EXPECT_THROW(Resolve(WriteFile("t.json", R"({"cost": {"gamma": "x"}})")),
               as::ConfigError);
  EXPECT_THROW(Resolve(WriteFile("l.json", R"({"cost": {"lambda": [1, 2]}})")),
               as::ConfigError);
  EXPECT_THROW(Resolve("", {"train.nope=1"}), as::ConfigError);
  EXPECT_THROW(Resolve("", {"no_equals_sign"}), as::ConfigError);
  EXPECT_THROW(Resolve("/nonexistent/config.json"), as::ConfigError);
  EXPECT_THROW(Resolve("", {"distill.alpha=2"}), as::ConfigError);
}

TEST(Config, JsonRoundTrip) {
  as::Config c = as::PresetConfig("noise");
  c.seed = 12;
  c.gamma = 2.5;
  const json j = c;
  as::Config back;
  from_json(j, back);
  EXPECT_EQ(json(back), j);
  EXPECT_EQ(j.at("format"), as::kConfigFormat);
}

TEST(Config, OverrideValuesParseAsJson) {
  json doc = json(as::PresetConfig("modality"));
  as::ApplyOverride(doc, "cost.lambda=[0,0,0]");
  as::ApplyOverride(doc, "preset=channel");
  EXPECT_EQ(doc["cost"]["lambda"], json::array({0, 0, 0}));
  EXPECT_EQ(doc["preset"], "channel");
}

TEST(Config, DerivedSeedsDiffer) {
  as::Config c;
  c.seed = 1;
  EXPECT_NE(c.StudentSeed(), c.PolicySeed());
  as::Config d = c;
  d.seed = 2;
  EXPECT_NE(c.StudentSeed(), d.StudentSeed());
  EXPECT_EQ(c.Train().seed, c.seed);
}
