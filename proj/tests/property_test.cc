// Trained-model properties on the default modality benchmark, 3 seeds. Stage 1
// is shared per seed; each cost model trains its own policy in stage 2.

#include <gtest/gtest.h>

#include <map>
#include <memory>

#include "adaptsense/config.h"
#include "adaptsense/training.h"

namespace as = adaptsense;

namespace {

constexpr int kSeeds = 3;
constexpr int kVisual = 0, kAudio = 1, kBehavior = 2;

struct CostCase {
  std::vector<double> lambda;
  double gamma;
};

const std::map<std::string, CostCase>& Cases() {
  static const std::map<std::string, CostCase> cases = {
      {"free", {{0, 0, 0}, 0}},
      {"visual_0.25", {{0.25, 0.05, 0.03}, 10}},
      {"visual_1", {{1.0, 0.05, 0.03}, 10}},
      {"visual_4", {{4.0, 0.05, 0.03}, 10}},
      {"audio_heavy", {{0.05, 0.5, 0.05}, 10}},
  };
  return cases;
}

struct SeedRuns {
  double stage1_accuracy = 0;
  std::map<std::string, std::vector<double>> usage;
};

class TrainedProperties : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    runs_ = new std::vector<SeedRuns>;
    for (int s = 1; s <= kSeeds; ++s) {
      as::Config cfg = as::PresetConfig("modality");
      cfg.seed = s;
      cfg.data.seed = s;
      cfg.eval.snr_sweep.clear();
      const as::Dataset data = as::GenerateDataset(cfg.data);
      as::StudentModel student(cfg.Student(), cfg.StudentSeed());
      SeedRuns r;
      {
        as::PolicyNet unused(cfg.Student(), cfg.policy, cfg.PolicySeed());
        as::Trainer tr(data, cfg.Train(), cfg.Cost(), student, unused);
        tr.Stage1();
        as::EvalOptions opt;
        opt.policy = as::PolicyKind::kAllOn;
        r.stage1_accuracy =
            as::Evaluate(data, student, nullptr, cfg.Cost(), opt).report.accuracy;
      }
      for (const auto& [name, c] : Cases()) {
        as::Config run = cfg;
        run.lambda = c.lambda;
        run.gamma = c.gamma;
        as::PolicyNet policy(run.Student(), run.policy, run.PolicySeed());
        as::Trainer tr(data, run.Train(), run.Cost(), student, policy);
        tr.Stage2();
        as::EvalOptions opt;
        r.usage[name] = as::Evaluate(data, student, &policy, run.Cost(), opt).report.usage;
      }
      runs_->push_back(std::move(r));
    }
  }
  static void TearDownTestSuite() {
    delete runs_;
    runs_ = nullptr;
  }

  // 3-seed mean usage of action `k` under cost case `name`.
  static double MeanUsage(const std::string& name, int k) {
    double sum = 0;
    for (const auto& r : *runs_) sum += r.usage.at(name)[k];
    return sum / runs_->size();
  }

  static std::vector<SeedRuns>* runs_;
};

std::vector<SeedRuns>* TrainedProperties::runs_ = nullptr;

}  // namespace

TEST_F(TrainedProperties, Stage1ReachesHighAccuracy) {
  for (const auto& r : *runs_) EXPECT_GE(r.stage1_accuracy, 0.95);
}

TEST_F(TrainedProperties, FreeSensingSelectsNearlyEverything) {
  for (int k = 0; k < 3; ++k) EXPECT_GE(MeanUsage("free", k), 0.9) << "action " << k;
}

TEST_F(TrainedProperties, RaisingLambdaNeverRaisesUsage) {
  const double lo = MeanUsage("visual_0.25", kVisual);
  const double mid = MeanUsage("visual_1", kVisual);
  const double hi = MeanUsage("visual_4", kVisual);
  EXPECT_LE(mid, lo);
  EXPECT_LE(hi, mid);
}

TEST_F(TrainedProperties, ExpensiveActionIsUsedLeast) {
  const double audio = MeanUsage("audio_heavy", kAudio);
  EXPECT_LT(audio, MeanUsage("audio_heavy", kVisual));
  EXPECT_LT(audio, MeanUsage("audio_heavy", kBehavior));
}
