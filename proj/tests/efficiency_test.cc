#include <gtest/gtest.h>

#include "adaptsense/efficiency.h"
#include "adaptsense/errors.h"
#include "adaptsense/training.h"
#include "support/tiny.h"

namespace as = adaptsense;
using as::Layer;
using as::LayerKind;

namespace {

Layer Conv2d(int64_t ci, int64_t co, int64_t h, int64_t w, int64_t k) {
  Layer l;
  l.name = "conv";
  l.kind = LayerKind::kConv2d;
  l.in_shape = {ci, h, w};
  l.out_shape = {co, h, w};
  l.kernel = {k, k};
  return l;
}

Layer Linear(int64_t in, int64_t out) {
  Layer l;
  l.name = "fc";
  l.kind = LayerKind::kLinear;
  l.in_shape = {in};
  l.out_shape = {out};
  return l;
}

// Two gated branches feeding an ungated head.
as::LayerGraph Branches() {
  as::LayerGraph g;
  g.name = "branches";
  Layer a = Conv2d(1, 8, 16, 16, 3);
  a.name = "a";
  a.inputs = std::vector<std::string>{};
  a.gate = std::vector<int>{0};
  Layer b = Linear(32, 16);
  b.name = "b";
  b.inputs = std::vector<std::string>{};
  b.gate = std::vector<int>{1};
  Layer head = Linear(16, 4);
  head.name = "head";
  head.inputs = std::vector<std::string>{"b"};
  g.layers = {a, b, head};
  return g;
}

as::EnergyConfig NoFloor() {
  as::EnergyConfig c;
  c.sensor_floor_seconds = 0.0;
  return c;
}

}  // namespace

TEST(Efficiency, GoldenCounts) {
  const Layer conv = Conv2d(1, 8, 16, 16, 3);
  EXPECT_EQ(as::LayerMacs(conv), 16 * 16 * 8 * 1 * 9);
  EXPECT_EQ(as::LayerMacs(conv), 18432);
  EXPECT_EQ(as::LayerParams(conv), 80);
  EXPECT_EQ(as::LayerMacs(Linear(64, 10)), 640);
  EXPECT_EQ(as::LayerParams(Linear(64, 10)), 650);
  Layer no_bias = Linear(64, 10);
  no_bias.bias = false;
  EXPECT_EQ(as::LayerParams(no_bias), 640);

  Layer cell;
  cell.kind = LayerKind::kRecurrentCell;
  cell.in_shape = {5, 12};
  cell.out_shape = {5, 64};
  cell.hidden = 64;
  EXPECT_EQ(as::LayerMacs(cell), 5 * 4 * 64 * (12 + 64));

  Layer att;
  att.kind = LayerKind::kAttention;
  att.in_shape = {6, 16};
  att.out_shape = {6, 16};
  att.heads = 4;
  EXPECT_EQ(as::LayerMacs(att), 4 * 6 * 16 * 16 + 2 * 6 * 6 * 16);
  EXPECT_EQ(as::LayerParams(att), 4 * (16 * 16 + 16));

  as::LayerGraph empty;
  EXPECT_EQ(as::CountParams(empty), 0);
  EXPECT_EQ(as::CountMacs(empty, nullptr), 0);
}

TEST(Efficiency, ActivationBytes) {
  // 16 x 16 x 8 outputs are 2048 floats; 8192 floats make 32768 bytes.
  as::LayerGraph g;
  g.layers = {Conv2d(1, 8, 16, 16, 3)};
  EXPECT_EQ(as::LayerOutputElements(g.layers[0]), 16 * 16 * 8);
  EXPECT_EQ(as::ActivationBytes(g, nullptr), 16 * 16 * 8 * 4);
  g.layers = {Conv2d(1, 32, 16, 16, 3)};
  EXPECT_EQ(as::LayerOutputElements(g.layers[0]), 8192);
  EXPECT_EQ(as::ActivationBytes(g, nullptr), 32768);
}

TEST(Efficiency, GatingAndAdditivity) {
  const as::LayerGraph g = Branches();
  g.Validate(2);
  const std::vector<int> none = {0, 0}, only_a = {1, 0}, only_b = {0, 1}, all = {1, 1};
  const int64_t ungated = as::CountMacs(g, &none);
  EXPECT_EQ(ungated, 64);
  EXPECT_EQ(as::CountMacs(g, &all), as::CountMacs(g, nullptr));
  EXPECT_EQ(as::CountMacs(g, nullptr),
            (as::CountMacs(g, &only_a) - ungated) + (as::CountMacs(g, &only_b) - ungated) +
                ungated);
  EXPECT_EQ(as::ActivationBytes(g, &only_b), (16 + 4) * 4);
  EXPECT_LE(as::ActivationBytes(g, &only_a), as::ActivationBytes(g, &all));
  EXPECT_LE(as::ActivationBytes(g, &only_b), as::ActivationBytes(g, &all));
}

TEST(Efficiency, StudentGraphAdditivityOverSensors) {
  const as::DatasetConfig dc;
  for (as::TaskKind task : {as::TaskKind::kModalitySelect, as::TaskKind::kChannelSelect,
                            as::TaskKind::kFrameSelect}) {
    const as::StudentConfig sc = as::StudentConfig::For(task, dc);
    const as::LayerGraph g = as::StudentGraph(sc);
    const as::ActionSpace space = as::ActionSpaceFor(task, dc);
    g.Validate(space.K);
    EXPECT_GT(as::CountParams(g), 0);
    // Every action on equals all-on, and bytes grow with selections.
    std::vector<int> row(space.K, 1);
    EXPECT_EQ(as::CountMacs(g, &row), as::CountMacs(g, nullptr));
    for (int k = 0; k < space.K; ++k) {
      std::vector<int> fewer = row;
      fewer[k] = 0;
      EXPECT_LE(as::CountMacs(g, &fewer), as::CountMacs(g, &row));
      EXPECT_LE(as::ActivationBytes(g, &fewer), as::ActivationBytes(g, &row));
    }
  }
}

TEST(Efficiency, GraphValidation) {
  as::LayerGraph g = Branches();
  EXPECT_THROW(g.Validate(1), as::GraphError);  // gate index 1 with K = 1
  g.layers[2].in_shape = {17};
  EXPECT_THROW(g.Validate(2), as::GraphError);
  g = Branches();
  g.layers[2].inputs = std::vector<std::string>{"nope"};
  EXPECT_THROW(g.Validate(2), as::GraphError);
}

TEST(Efficiency, GraphJsonRoundTrip) {
  const as::LayerGraph g = Branches();
  const std::string dir = as::testing::ScratchDir("graph_json");
  as::SaveGraph(g, dir + "/g.json");
  const as::LayerGraph back = as::LoadGraph(dir + "/g.json");
  EXPECT_EQ(as::CountMacs(back, nullptr), as::CountMacs(g, nullptr));
  EXPECT_EQ(as::CountParams(back), as::CountParams(g));
  nlohmann::json a = g, b = back;
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.at("format"), "adaptsense.graph.v1");
}

TEST(Efficiency, EnergyModel) {
  const as::EnergyCoefficients c;
  EXPECT_EQ(as::EstimateEnergy(0, 0, {0, 0, 0}, c), 0.0);
  const double e1 = as::EstimateEnergy(1e6, 0, {0, 0, 0}, c);
  as::EnergyCoefficients c2 = c;
  c2.joules_per_mac *= 2;
  EXPECT_DOUBLE_EQ(as::EstimateEnergy(1e6, 0, {0, 0, 0}, c2), 2 * e1);
  EXPECT_DOUBLE_EQ(as::EstimateEnergy(1e6, 2e3, {1.0, 0.0, 2.0}, c),
                   1e6 * 4.6e-12 + 2e3 * 2.5e-10 + 3.0 * 0.05);
  EXPECT_THROW(as::EstimateEnergy(-1, 0, {0, 0, 0}, c), as::ContractError);
  EXPECT_THROW(as::EstimateEnergy(0, 0, {0, -1, 0}, c), as::ContractError);

  // Monotone in each argument.
  as::Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double m = rng.Uniform() * 1e7, b = rng.Uniform() * 1e5;
    const std::array<double, 3> s{rng.Uniform(), rng.Uniform(), rng.Uniform()};
    const double e = as::EstimateEnergy(m, b, s, c);
    EXPECT_LE(e, as::EstimateEnergy(m * 1.1, b, s, c));
    EXPECT_LE(e, as::EstimateEnergy(m, b * 1.1, s, c));
    EXPECT_LE(e, as::EstimateEnergy(m, b, {s[0] + 0.1, s[1], s[2]}, c));
  }
}

TEST(Efficiency, SensorScheduleFloorAndUnusedSensors) {
  const auto space = as::ActionSpace::ModalitySelect();
  as::DecisionTensor U(6, 3);
  // Audio on for t = 0..2 and t = 5; behavior never; visual at t = 4.
  for (int t : {0, 1, 2, 5}) U.SetHard(t, 1, 1);
  U.SetHard(4, 0, 1);
  as::EnergyConfig cfg;  // 0.5 s segments, 1 s floor
  const auto s = as::SensorSchedule(U, space, cfg);
  EXPECT_DOUBLE_EQ(s[1], 1.5 + 1.0);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_EQ(s[2], 0.0);
  const auto nf = as::SensorSchedule(U, space, NoFloor());
  EXPECT_DOUBLE_EQ(nf[1], 2.0);
  EXPECT_DOUBLE_EQ(nf[0], 0.5);
  const auto forced = as::SensorSchedule(U, space, cfg, {false, false, true});
  EXPECT_DOUBLE_EQ(forced[2], 3.0);
}

TEST(Efficiency, UsageReportFractions) {
  const as::DatasetConfig dc;
  const as::StudentConfig sc = as::StudentConfig::For(as::TaskKind::kModalitySelect, dc);
  const as::LayerGraph g = as::StudentGraph(sc);
  const auto space = as::ActionSpace::ModalitySelect();
  std::vector<as::DecisionTensor> all_on(3, as::AllOnPolicy(5, space));
  const auto r = as::MakeUsageReport(all_on, g, nullptr, {}, space, as::EnergyConfig{});
  EXPECT_EQ(r.fractions, (std::vector<double>{1.0, 1.0, 1.0}));
  EXPECT_EQ(r.segments, 15);
  EXPECT_EQ(r.mean_macs, static_cast<double>(as::CountMacs(g, nullptr)));
  EXPECT_THROW(as::MakeUsageReport({}, g, nullptr, {}, space, as::EnergyConfig{}),
               as::DataError);
}

TEST(Efficiency, OracleUsageFollowsTheMixture) {
  as::DatasetConfig dc;
  dc.modality_mix = {0.5, 0.3, 0.2};
  dc.T = 100;
  dc.H = dc.W = 8;
  const as::StudentConfig sc = as::StudentConfig::For(as::TaskKind::kModalitySelect, dc);
  const as::LayerGraph g = as::StudentGraph(sc);
  const auto space = as::ActionSpace::ModalitySelect();
  std::vector<as::DecisionTensor> oracle, all_on;
  for (int i = 0; i < 100; ++i) {  // 10^4 segments
    oracle.push_back(as::OraclePolicy(as::GenerateEpisode(dc, i)));
    all_on.push_back(as::AllOnPolicy(dc.T, space));
  }
  const auto r = as::MakeUsageReport(oracle, g, nullptr, {}, space, as::EnergyConfig{});
  EXPECT_EQ(r.segments, 10000);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.fractions[k], dc.modality_mix[k], 0.02);
  const auto a = as::MakeUsageReport(all_on, g, nullptr, {}, space, as::EnergyConfig{});
  EXPECT_GE(a.mean_macs, r.mean_macs);
  EXPECT_GE(a.mean_energy, r.mean_energy);
  // Accounting depends on the decisions only.
  const auto again = as::MakeUsageReport(oracle, g, nullptr, {}, space, as::EnergyConfig{});
  EXPECT_EQ(again.mean_macs, r.mean_macs);
  EXPECT_EQ(again.mean_energy, r.mean_energy);
}

TEST(Efficiency, PolicyOverheadIsAddedPerSegment) {
  const as::DatasetConfig dc = as::testing::TinyData();
  const as::StudentConfig sc = as::testing::TinyStudent(dc);
  const as::LayerGraph g = as::StudentGraph(sc);
  const as::LayerGraph pg = as::PolicyGraph(sc, as::testing::TinyPolicy());
  const auto space = as::ActionSpace::ModalitySelect();
  std::vector<as::DecisionTensor> tr(2, as::AllOnPolicy(4, space));
  const auto base = as::MakeUsageReport(tr, g, nullptr, {}, space, as::EnergyConfig{});
  const auto with = as::MakeUsageReport(tr, g, &pg, {true, true, true}, space,
                                        as::EnergyConfig{});
  EXPECT_EQ(with.mean_macs - base.mean_macs,
            static_cast<double>(as::CountMacs(pg, nullptr)));
}

TEST(Efficiency, PolicyGraphMatchesImplementedParameters) {
  const as::DatasetConfig dc = as::testing::TinyData();
  for (as::TaskKind task : {as::TaskKind::kModalitySelect, as::TaskKind::kFrameSelect}) {
    const as::StudentConfig sc = as::testing::TinyStudent(dc, task);
    const as::PolicyConfig pc = as::testing::TinyPolicy();
    as::PolicyNet net(sc, pc, 1);
    as::StudentModel student(sc, 1);
    EXPECT_EQ(as::CountParams(as::PolicyGraph(sc, pc)),
              static_cast<int64_t>(net.params().NumScalars()))
        << as::TaskKindName(task);
    EXPECT_EQ(as::CountParams(as::StudentGraph(sc)),
              static_cast<int64_t>(student.params().NumScalars()))
        << as::TaskKindName(task);
  }
}
