#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "adaptsense/errors.h"
#include "adaptsense/policy.h"
#include "adaptsense/preview.h"
#include "adaptsense/training.h"
#include "support/tiny.h"

namespace as = adaptsense;
using as::ag::Var;

namespace {

void Jitter(as::ParamSet& ps, uint64_t seed) {
  as::Rng rng(seed);
  auto flat = ps.Flatten();
  for (double& v : flat) v += 0.1 * rng.Normal();
  ps.Assign(flat);
}

as::DecisionTensor FromCounts(int T, const std::vector<int>& counts) {
  as::DecisionTensor U(T, static_cast<int>(counts.size()));
  for (int k = 0; k < U.K; ++k)
    for (int t = 0; t < counts[k]; ++t) U.SetHard(t, k, 1);
  return U;
}

struct PreviewFixture {
  as::DatasetConfig dc = as::testing::TinyData();
  as::PreviewConfig cfg = as::testing::TinyPolicy().preview;
  as::ParamSet ps;
  as::Rng rng{41};
  std::unique_ptr<as::PreviewNet> net;

  PreviewFixture() { net = std::make_unique<as::PreviewNet>(cfg, dc.n_ch, ps, rng); }
  std::vector<Var> Windows(const std::vector<float>& audio) const {
    return as::PreviewFeatures(audio.data(), dc.n_ch, dc.L, dc.F, cfg);
  }
};

}  // namespace

TEST(Gumbel, FixedPointAndMoments) {
  const double u = std::exp(-1.0);
  EXPECT_EQ(-std::log(-std::log(u)), 0.0);

  as::Rng rng(12);
  const auto g = as::GumbelNoise(1000000, rng);
  double mean = 0.0;
  for (double v : g) mean += v;
  mean /= g.size();
  double var = 0.0;
  for (double v : g) var += (v - mean) * (v - mean);
  var /= g.size() - 1;
  EXPECT_NEAR(mean, std::numbers::egamma, 0.01);
  EXPECT_NEAR(var, std::numbers::pi * std::numbers::pi / 6.0, 0.02);

  as::Rng a(5), b(5);
  EXPECT_EQ(as::GumbelNoise(10, a), as::GumbelNoise(10, b));
}

TEST(Gumbel, MaxSampleRules) {
  EXPECT_EQ(as::GumbelMaxSample({10.0, 0.0}, {0.0, 0.0}), (std::array<int, 2>{1, 0}));
  EXPECT_EQ(as::GumbelMaxSample({0.0, 10.0}, {0.0, 0.0}), (std::array<int, 2>{0, 1}));
  EXPECT_EQ(as::GumbelMaxSample({0.3, 0.3}, {0.0, 0.0}), (std::array<int, 2>{1, 0}));
}

TEST(Gumbel, MaxSampleMatchesSoftmaxFrequencies) {
  const std::array<double, 2> s{std::log(0.7), std::log(0.3)};
  as::Rng rng(99);
  int first = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto g = as::GumbelNoise(2, rng);
    first += as::GumbelMaxSample(s, {g[0], g[1]})[0];
  }
  const double freq = double(first) / n;
  EXPECT_GE(freq, 0.69);
  EXPECT_LE(freq, 0.71);
}

TEST(Gumbel, RelaxationSymmetryAndLimit) {
  for (double tau : {0.1, 1.0, 7.0}) {
    const auto p = as::GumbelSoftmaxRelax({0.4, 0.4}, {0.0, 0.0}, tau);
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
  }
  const auto p = as::GumbelSoftmaxRelax({1.0, 0.0}, {0.0, 0.0}, 1e-3);
  EXPECT_GE(std::max(p[0], p[1]), 0.999);
  EXPECT_THROW(as::GumbelSoftmaxRelax({1.0, 0.0}, {0.0, 0.0}, 0.0), as::ConfigError);
  EXPECT_THROW(as::GumbelSoftmaxRelax({1.0, 0.0}, {0.0, 0.0}, -2.0), as::ConfigError);
}

TEST(Gumbel, RelaxationRowsSumToOne) {
  as::Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const std::array<double, 2> s{5 * rng.Normal(), 5 * rng.Normal()};
    const std::array<double, 2> g{rng.Gumbel(), rng.Gumbel()};
    const double tau = 0.05 + 10 * rng.Uniform();
    const auto p = as::GumbelSoftmaxRelax(s, g, tau);
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-9);
    // The Var form computes the same thing.
    const Var pv = as::GumbelSoftmaxRelax(Var::Constant({s[0], s[1]}), g, tau);
    if (i < 100) EXPECT_NEAR(pv[0], p[0], 1e-12);
  }
}

TEST(Gumbel, DiscretenessGrowsAsTemperatureFalls) {
  as::Rng rng(8);
  std::vector<std::array<double, 4>> draws(2000);
  for (auto& d : draws) d = {2 * rng.Normal(), 2 * rng.Normal(), rng.Gumbel(), rng.Gumbel()};
  double prev = 0.0;
  for (double tau : {10.0, 3.0, 1.0, 0.3, 0.1, 0.03}) {
    double m = 0.0;
    for (const auto& d : draws) {
      const auto p = as::GumbelSoftmaxRelax({d[0], d[1]}, {d[2], d[3]}, tau);
      m += std::max(p[0], p[1]);
    }
    m /= draws.size();
    EXPECT_GE(m, prev) << "tau " << tau;
    prev = m;
  }
}

TEST(Gumbel, RelaxationGradient) {
  as::ParamSet ps;
  const Var z = ps.Add("z", {2}, {0.3, -0.8});
  const Var probe = Var::Constant({1.7, -0.4});
  for (double tau : {0.5, 1.0, 4.0}) {
    const auto r = as::GradCheck(
        [&] {
          return as::ag::Sum(
              as::ag::Mul(as::GumbelSoftmaxRelax(z, {0.2, -0.1}, tau), probe));
        },
        ps);
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(Policy, ZeroWeightsSelectEverythingByTheTieRule) {
  as::DatasetConfig dc = as::testing::TinyData();
  const as::StudentConfig sc = as::testing::TinyStudent(dc);
  as::PolicyNet net(sc, as::testing::TinyPolicy(), 3);
  net.params().Assign(std::vector<double>(net.params().NumScalars(), 0.0));
  as::Rng rng(1);
  const Var f = Var::Zeros({3 * net.config().d_p});
  const auto r = as::PolicyStep(f, as::LstmZeroState(net.config().d_h), net, 1.0,
                                rng, as::PolicyMode::kGreedy, 2);
  EXPECT_EQ(r.hard, (std::vector<uint8_t>{1, 1, 1}));
}

TEST(Policy, RolloutIsDeterministicAndNeverAllOff) {
  as::DatasetConfig dc = as::testing::TinyData();
  dc.T = 40;
  const as::StudentConfig sc = as::testing::TinyStudent(dc);
  const as::PolicyConfig pc = as::testing::TinyPolicy();
  as::PolicyNet net(sc, pc, 4);
  // Push every head towards "skip" so that the fallback fires often.
  for (const auto& [name, v] : net.params().entries())
    if (name.find("head") != std::string::npos && name.ends_with(".b"))
      v.node()->value = {-3.0, 3.0};
  const as::Episode ep = as::GenerateEpisode(dc, 0);
  std::vector<as::PolicyInputs> seq;
  for (const auto& s : ep.segments) seq.push_back(as::PreparePolicyInputs(s, sc, pc));
  const std::vector<double> lambda = {1.0, 0.05, 0.03};
  const auto a = as::RunPolicy(net, seq, as::PolicyMode::kInfer, 1.0, 17, lambda);
  const auto b = as::RunPolicy(net, seq, as::PolicyMode::kInfer, 1.0, 17, lambda);
  EXPECT_EQ(a.U.hard, b.U.hard);
  int fallbacks = 0;
  for (int t = 0; t < a.U.T; ++t) {
    const auto row = a.U.HardRow(t);
    int on = 0;
    for (int v : row) on += v;
    EXPECT_GE(on, 1);
    if (on == 1 && row[2] == 1) ++fallbacks;
    for (int k = 0; k < a.U.K; ++k)
      EXPECT_NEAR(a.U.soft[(t * a.U.K + k) * 2] + a.U.soft[(t * a.U.K + k) * 2 + 1],
                  1.0, 1e-9);
  }
  EXPECT_GT(fallbacks, 0);
}

TEST(Policy, FallbackIsTheCheapestAction) {
  const auto space = as::ActionSpace::ModalitySelect();
  EXPECT_EQ(space.FallbackAction({1.0, 0.05, 0.03}), 2);
  EXPECT_EQ(space.FallbackAction({0.0, 0.0, 0.0}), 0);
  EXPECT_EQ(as::ActionSpace::FrameSelect(4).FallbackAction({1, 1, 1, 1}), 2);
}

TEST(Policy, StraightThroughGradientEqualsSoftGradient) {
  as::ParamSet ps;
  as::Rng init(5);
  std::vector<Var> scores;
  for (int k = 0; k < 3; ++k)
    scores.push_back(ps.Add("s" + std::to_string(k), {2},
                            {init.Normal(), init.Normal()}));
  const std::vector<double> c = {0.7, -1.3, 2.1};
  auto grads = [&](as::PolicyMode mode, double* value) {
    ps.ZeroGrad();
    as::Rng rng(11);
    const auto r = as::SampleActions(scores, 0.8, rng, mode, 2);
    Var loss = Var::Scalar(0.0);
    for (int k = 0; k < 3; ++k) loss = as::ag::Add(loss, as::ag::Scale(r.actions[k], c[k]));
    loss.Backward();
    *value = loss.item();
    std::vector<double> g;
    for (const auto& s : scores) g.insert(g.end(), s.grad().begin(), s.grad().end());
    return std::pair{g, r.hard};
  };
  double hard_value = 0.0, soft_value = 0.0;
  const auto [g_train, hard] = grads(as::PolicyMode::kTrain, &hard_value);
  const auto [g_soft, unused] = grads(as::PolicyMode::kRelaxed, &soft_value);
  double expect_hard = 0.0;
  for (int k = 0; k < 3; ++k) expect_hard += c[k] * hard[k];
  EXPECT_DOUBLE_EQ(hard_value, expect_hard);
  EXPECT_NE(hard_value, soft_value);
  ASSERT_EQ(g_train.size(), g_soft.size());
  for (size_t i = 0; i < g_train.size(); ++i) EXPECT_DOUBLE_EQ(g_train[i], g_soft[i]);
}

TEST(Policy, HeadWeightsReceiveGradient) {
  as::DatasetConfig dc = as::testing::TinyData();
  const as::StudentConfig sc = as::testing::TinyStudent(dc);
  const as::PolicyConfig pc = as::testing::TinyPolicy();
  as::StudentModel student(sc, 1);
  as::PolicyNet policy(sc, pc, 2);
  Jitter(policy.params(), 3);
  const as::OracleTeacher teacher(sc.C, sc.d_f);
  const as::Episode ep = as::GenerateEpisode(dc, 1);
  const auto in = as::PrepareEpisode(ep, sc, pc, teacher);
  as::PolicyPassOptions opt;
  opt.tau = 1.0;
  opt.seed = 4;
  const as::CostModel cm{{1.0, 0.05, 0.03}, 10.0, dc.T};
  policy.params().ZeroGrad();
  as::RunPolicyPass(in, student, policy, cm, as::DistillConfig{}, opt).loss.Backward();
  for (int k = 0; k < 3; ++k) {
    const Var w = policy.params().Get("policy.head" + std::to_string(k) + ".w");
    double norm = 0.0;
    for (double g : w.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << "head " << k;
  }
}

TEST(UsageCost, HandExamples) {
  const as::CostModel cm{{1.0, 0.05, 0.03}, 10.0, 10};
  EXPECT_NEAR(as::UsageCost(FromCounts(10, {3, 10, 0}), cm), 0.14, 1e-15);
  EXPECT_EQ(as::UsageCost(FromCounts(10, {0, 0, 0}), cm), 0.0);
  const as::CostModel one{{1.0, 0.0, 0.0}, 0.0, 10};
  EXPECT_DOUBLE_EQ(as::UsageCost(FromCounts(10, {4, 0, 0}), one),
                   4.0 * as::UsageCost(FromCounts(10, {2, 0, 0}), one));
  EXPECT_THROW(as::UsageCost(FromCounts(9, {1, 1, 1}), cm), as::ContractError);
  const as::CostModel two{{1.0, 0.5}, 0.0, 10};
  EXPECT_THROW(as::UsageCost(FromCounts(10, {1, 1, 1}), two), as::ContractError);
}

TEST(UsageCost, VarFormMatches) {
  const as::CostModel cm{{1.0, 0.05, 0.03}, 10.0, 10};
  const std::vector<Var> counts = {Var::Scalar(3), Var::Scalar(10), Var::Scalar(0)};
  EXPECT_NEAR(as::UsageCostVar(counts, cm).item(), 0.14, 1e-15);
}

TEST(PolicyLoss, CorrectAndIncorrectBranches) {
  const std::vector<double> logits = {2.0, 0.5, -1.0};
  const double ce = as::LossGT(0, Var::Constant(logits)).item();
  as::CostModel cm{{1.0, 0.05, 0.03}, 10.0, 10};
  const auto zero = FromCounts(10, {0, 0, 0});
  EXPECT_NEAR(as::PolicyLoss(logits, 0, zero, cm, true), ce, 1e-12);
  const auto U = FromCounts(10, {3, 10, 0});
  EXPECT_NEAR(as::PolicyLoss(logits, 0, U, cm, true), ce + 0.14, 1e-12);
  const double with_gamma = as::PolicyLoss(logits, 1, U, cm, false);
  cm.gamma = 0.0;
  EXPECT_NEAR(with_gamma - as::PolicyLoss(logits, 1, U, cm, false), 10.0, 1e-12);

  const as::CostModel free{{0.0, 0.0, 0.0}, 0.0, 10};
  const double ce1 = as::LossGT(1, Var::Constant(logits)).item();
  EXPECT_NEAR(as::PolicyLoss(logits, 1, U, free, true), ce1, 1e-12);
  EXPECT_NEAR(as::PolicyLoss(logits, 1, U, free, false), ce1, 1e-12);

  const Var task = Var::Scalar(1.5), cost = Var::Scalar(0.25);
  EXPECT_EQ(as::PolicyLoss(task, cost, cm, true).item(), 1.75);
  cm.gamma = 10.0;
  EXPECT_EQ(as::PolicyLoss(task, cost, cm, false).item(), 11.5);
}

TEST(Preview, ZeroHandshakeIgnoresTheAttentionStack) {
  PreviewFixture f;
  const as::Episode ep = as::GenerateEpisode(f.dc, 0);
  const auto windows = f.Windows(ep.segments[0].audio);
  f.net->rho().node()->value.assign(f.cfg.layers, 0.0);
  const auto before = f.net->Forward(windows).saliency.value();
  as::Rng rng(2);
  for (const auto& [name, v] : f.ps.entries())
    if (name.find("mha") != std::string::npos)
      for (double& x : v.node()->value) x += rng.Normal();
  EXPECT_EQ(f.net->Forward(windows).saliency.value(), before);
  // With the handshake on the attention stack matters.
  f.net->rho().node()->value.assign(f.cfg.layers, 0.5);
  EXPECT_NE(f.net->Forward(windows).saliency.value(), before);
}

TEST(Preview, SilenceGivesConstantSaliency) {
  PreviewFixture f;
  Jitter(f.ps, 3);
  const std::vector<float> silence(f.dc.n_ch * f.dc.L, 0.0f);
  const auto s = as::AudioPreviewSaliency(silence.data(), f.dc.n_ch, f.dc.L, f.dc.F,
                                          *f.net);
  ASSERT_EQ(s.size(), size_t(f.dc.F));
  for (double v : s) {
    EXPECT_EQ(v, s[0]);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Preview, ShortAudioIsRejected) {
  PreviewFixture f;
  const std::vector<float> audio(f.dc.n_ch * 8, 0.0f);
  EXPECT_THROW(as::AudioPreviewSaliency(audio.data(), f.dc.n_ch, 8, 4, *f.net),
               as::DataError);
}

TEST(Preview, GradientMatchesFiniteDifferences) {
  PreviewFixture f;
  Jitter(f.ps, 5);
  const as::Episode ep = as::GenerateEpisode(f.dc, 2);
  const auto windows = f.Windows(ep.segments[0].audio);
  const Var probe = Var::Constant({0.9, -1.4});
  const auto r = as::GradCheck(
      [&] { return as::ag::Sum(as::ag::Mul(f.net->Forward(windows).saliency, probe)); },
      f.ps);
  EXPECT_GT(r.coordinates, 0);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(SalientFrames, HandEnumeration) {
  const std::vector<double> s = {0.1, 0.9, 0.3, 0.2, 0.8, 0.4};
  EXPECT_EQ(as::SelectSalientFrames(s, 0.5, 1, 6), (std::vector<int>{1, 4}));
  EXPECT_EQ(as::SelectSalientFrames(s, 0.5, 1, 1), (std::vector<int>{1}));
  EXPECT_TRUE(as::SelectSalientFrames({0.1, 0.2, 0.3}, 0.5, 1, 3).empty());
  // Adjacent windows above the threshold merge; the region argmax is returned.
  EXPECT_EQ(as::SelectSalientFrames({0.6, 0.9, 0.7, 0.1}, 0.5, 1, 3),
            (std::vector<int>{1}));
  // Equal peaks: earliest index inside a region, earliest region across them.
  EXPECT_EQ(as::SelectSalientFrames({0.8, 0.8, 0.1, 0.8}, 0.5, 1, 1),
            (std::vector<int>{0}));
  // Windows of two frames.
  EXPECT_EQ(as::SelectSalientFrames({0.1, 0.6, 0.2, 0.1, 0.3, 0.9}, 0.5, 2, 2),
            (std::vector<int>{1, 5}));
  EXPECT_THROW(as::SelectSalientFrames(s, 0.5, 1, 0), as::ContractError);
}

TEST(SalientFrames, AssemblePartialClip) {
  EXPECT_EQ(as::AssemblePartialClip({}, 3), (std::vector<int>{3}));
  EXPECT_EQ(as::AssemblePartialClip({1}, 4), (std::vector<int>{1, 4}));
  std::vector<int> clip;
  for (int t = 0; t < 7; ++t) clip = as::AssemblePartialClip(clip, 2 * t);
  EXPECT_EQ(clip.size(), 7u);
  EXPECT_THROW(as::AssemblePartialClip({1, 4}, 4), as::ContractError);
  EXPECT_THROW(as::AssemblePartialClip({5}, 2), as::ContractError);
}

TEST(Policy, FrameSelectionInferenceUsesTheSalientFrame) {
  as::DatasetConfig dc = as::testing::TinyData();
  dc.F = 4;
  dc.T = 6;
  const as::StudentConfig sc = as::testing::TinyStudent(dc, as::TaskKind::kFrameSelect);
  const as::PolicyConfig pc = as::testing::TinyPolicy();
  as::PolicyNet net(sc, pc, 8);
  ASSERT_TRUE(net.uses_preview());
  const as::Episode ep = as::GenerateEpisode(dc, 0);
  std::vector<as::PolicyInputs> seq;
  for (const auto& s : ep.segments) seq.push_back(as::PreparePolicyInputs(s, sc, pc));
  const auto roll = as::RunPolicy(net, seq, as::PolicyMode::kInfer, 1.0, 3, {1, 1, 1, 1});
  for (int t = 0; t < dc.T; ++t) {
    std::vector<double> sal;
    net.PreviewScores(seq[t], &sal);
    const auto picked = as::SelectSalientFrames(sal, pc.preview.delta, 1, pc.preview.n_max);
    const int frame = picked.empty() ? dc.F / 2 : picked[0];
    std::vector<int> row(dc.F, 0);
    row[frame] = 1;
    EXPECT_EQ(roll.U.HardRow(t), row);
  }
}
