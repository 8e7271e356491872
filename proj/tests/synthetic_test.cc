#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "adaptsense/errors.h"
#include "adaptsense/policy.h"
#include "adaptsense/synthetic.h"
#include "support/tiny.h"

namespace as = adaptsense;

namespace {

as::DatasetConfig Small() {
  as::DatasetConfig c;
  c.n_episodes = 20;
  c.T = 6;
  return c;
}

int CountAudioEvents(const as::Episode& ep) {
  int n = 0;
  for (const auto& s : ep.segments) n += s.spec.audio_event;
  return n;
}

}  // namespace

TEST(Synthetic, EpisodeIsDeterministic) {
  as::DatasetConfig c = Small();
  c.seed = 7;
  const as::Episode a = as::GenerateEpisode(c, 0);
  const as::Episode b = as::GenerateEpisode(c, 0);
  ASSERT_EQ(a.T(), b.T());
  for (int t = 0; t < a.T(); ++t) {
    EXPECT_EQ(a.segments[t].frames, b.segments[t].frames);
    EXPECT_EQ(a.segments[t].audio, b.segments[t].audio);
    EXPECT_EQ(a.segments[t].behavior, b.segments[t].behavior);
    EXPECT_EQ(a.segments[t].spec.label, b.segments[t].spec.label);
  }
}

TEST(Synthetic, DifferentIndicesDiffer) {
  const as::DatasetConfig c = Small();
  EXPECT_NE(as::GenerateEpisode(c, 0).segments[0].audio,
            as::GenerateEpisode(c, 1).segments[0].audio);
}

TEST(Synthetic, DegenerateMixtureIsAllVisual) {
  as::DatasetConfig c = Small();
  c.modality_mix = {1.0, 0.0, 0.0};
  for (int i = 0; i < 5; ++i)
    for (const auto& s : as::GenerateEpisode(c, i).segments)
      EXPECT_EQ(s.spec.sufficient_modality, as::Modality::kVisual);
}

TEST(Synthetic, EventRateWithinBinomialInterval) {
  as::DatasetConfig c = Small();
  c.T = 1000;
  c.H = c.W = 8;
  c.event_rate = 0.5;
  const int events = CountAudioEvents(as::GenerateEpisode(c, 0));
  // 99% normal interval for Binomial(1000, 0.5).
  const double half = 2.5758 * std::sqrt(0.25 / 1000.0);
  const double frac = events / 1000.0;
  EXPECT_GE(frac, 0.5 - half);
  EXPECT_LE(frac, 0.5 + half);
  EXPECT_GE(frac, 0.46);
  EXPECT_LE(frac, 0.54);
}

TEST(Synthetic, EventFrameMarksTheAudioBurst) {
  as::DatasetConfig c = Small();
  c.event_rate = 1.0;
  for (const auto& s : as::GenerateEpisode(c, 3).segments) {
    ASSERT_TRUE(s.spec.audio_event);
    ASSERT_GE(s.spec.event_frame, 0);
    ASSERT_LT(s.spec.event_frame, c.F);
    // Energy of channel 0 per frame-aligned window peaks at the event frame.
    const int w = c.L / c.F;
    int best = -1;
    double best_e = -1.0;
    for (int f = 0; f < c.F; ++f) {
      double e = 0.0;
      for (int i = f * w; i < (f + 1) * w; ++i) e += s.audio[i] * s.audio[i];
      if (e > best_e) best_e = e, best = f;
    }
    EXPECT_EQ(best, s.spec.event_frame);
  }
}

TEST(Synthetic, SplitsAre70_15_15AndDisjoint) {
  as::DatasetConfig c = Small();
  c.n_episodes = 100;
  c.T = 1;
  c.H = c.W = 8;
  const as::Dataset d = as::GenerateDataset(c);
  EXPECT_EQ(d.Select(as::Split::kTrain).size(), 70u);
  EXPECT_EQ(d.Select(as::Split::kVal).size(), 15u);
  EXPECT_EQ(d.Select(as::Split::kTest).size(), 15u);
  std::set<int> seen;
  for (as::Split s : {as::Split::kTrain, as::Split::kVal, as::Split::kTest})
    for (const auto* ep : d.Select(s)) EXPECT_TRUE(seen.insert(ep->index).second);
  EXPECT_EQ(seen.size(), 100u);
  const as::Dataset again = as::GenerateDataset(c);
  for (int i = 0; i < 100; ++i)
    EXPECT_EQ(d.episodes[i].split, again.episodes[i].split);
}

TEST(Synthetic, InvalidConfigsAreRejected) {
  as::DatasetConfig c = Small();
  c.modality_mix = {0.5, 0.5, 0.5};
  EXPECT_THROW(as::GenerateEpisode(c, 0), as::ConfigError);
  c = Small();
  c.T = 0;
  EXPECT_THROW(as::GenerateEpisode(c, 0), as::ConfigError);
  c = Small();
  c.n_ch = 0;
  EXPECT_THROW(c.Validate(), as::ConfigError);
}

TEST(Synthetic, OracleSelectsExactlyTheSufficientModality) {
  const as::DatasetConfig c = Small();
  const as::Episode ep = as::GenerateEpisode(c, 2);
  const as::DecisionTensor U = as::OraclePolicy(ep);
  for (int t = 0; t < ep.T(); ++t) {
    const int m = static_cast<int>(ep.segments[t].spec.sufficient_modality);
    for (int k = 0; k < as::kNumModalities; ++k) EXPECT_EQ(U.Hard(t, k), k == m);
  }
}

TEST(Synthetic, OracleAudioRowAndColumnSums) {
  as::DatasetConfig c = Small();
  c.modality_mix = {0.0, 1.0, 0.0};
  const auto U_audio = as::OraclePolicy(as::GenerateEpisode(c, 0));
  EXPECT_EQ(U_audio.HardRow(0), (std::vector<int>{0, 1, 0}));

  c.modality_mix = {0.0, 0.0, 1.0};
  c.T = 10;
  const auto U = as::OraclePolicy(as::GenerateEpisode(c, 0));
  EXPECT_EQ(U.Count(0), 0);
  EXPECT_EQ(U.Count(1), 0);
  EXPECT_EQ(U.Count(2), 10);
  const as::CostModel cm{{1.0, 0.05, 0.03}, 10.0, 10};
  EXPECT_NEAR(as::UsageCost(U, cm), 0.03 * (10.0 / 10.0) * (10.0 / 10.0), 1e-15);
}

TEST(Synthetic, OracleForChannelAndFrameTasks) {
  as::DatasetConfig c = Small();
  c.event_rate = 0.5;
  const as::Episode ep = as::GenerateEpisode(c, 4);
  const auto ch = as::OraclePolicy(ep, as::ActionSpace::ChannelSelect(c.n_ch));
  const auto fr = as::OraclePolicy(ep, as::ActionSpace::FrameSelect(c.F));
  for (int t = 0; t < ep.T(); ++t) {
    const auto& s = ep.segments[t].spec;
    int on = 0;
    for (int k = 0; k < ch.K; ++k) on += ch.Hard(t, k);
    EXPECT_EQ(on, 1);
    if (s.sufficient_modality == as::Modality::kAudio) EXPECT_EQ(ch.Hard(t, 1), 1);
    const int frame = s.event_frame >= 0 ? s.event_frame : c.F / 2;
    EXPECT_EQ(fr.HardRow(t), [&] {
      std::vector<int> r(c.F, 0);
      r[frame] = 1;
      return r;
    }());
  }
}

TEST(Synthetic, CorruptAudioHitsTheRequestedSnr) {
  const as::DatasetConfig c = Small();
  const as::Episode ep = as::GenerateEpisode(c, 1);
  EXPECT_THROW(as::CorruptAudio(ep, std::numeric_limits<double>::infinity(), 1),
               as::ConfigError);
  const as::Episode noisy = as::CorruptAudio(ep, 0.0, 5);
  for (int t = 0; t < ep.T(); ++t) {
    const auto& a = ep.segments[t].audio;
    const auto& b = noisy.segments[t].audio;
    double ps = 0.0, pn = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      ps += double(a[i]) * a[i];
      const double n = double(b[i]) - double(a[i]);
      pn += n * n;
    }
    EXPECT_NEAR(pn / ps, 1.0, 0.01) << "segment " << t;
    EXPECT_EQ(ep.segments[t].frames, noisy.segments[t].frames);
    EXPECT_EQ(ep.segments[t].behavior, noisy.segments[t].behavior);
  }
}

TEST(Synthetic, SufficientModalityIsDecodable) {
  as::DatasetConfig c = Small();
  c.n_episodes = 25;
  c.T = 8;  // 200 segments
  int total = 0, right = 0;
  for (int i = 0; i < c.n_episodes; ++i) {
    for (const auto& s : as::GenerateEpisode(c, i).segments) {
      right += as::TemplateClassify(s, s.spec.sufficient_modality, c) == s.spec.label;
      ++total;
    }
  }
  EXPECT_EQ(total, 200);
  EXPECT_EQ(right, total);
}

TEST(Synthetic, OtherModalitiesAreNearChance) {
  as::DatasetConfig c = Small();
  c.T = 50;
  c.H = c.W = 8;
  c.visual_backup = 0.0;
  int total = 0, right = 0;
  for (int i = 0; i < 30; ++i) {
    for (const auto& s : as::GenerateEpisode(c, i).segments) {
      for (int m = 0; m < as::kNumModalities; ++m) {
        if (m == static_cast<int>(s.spec.sufficient_modality)) continue;
        right += as::TemplateClassify(s, as::Modality(m), c) == s.spec.label;
        ++total;
      }
    }
  }
  ASSERT_GE(total, 1000);
  EXPECT_NEAR(double(right) / total, 1.0 / c.C, 0.05);
}

TEST(Synthetic, OracleRowIsTheCheapestZeroErrorRow) {
  as::DatasetConfig c = Small();
  c.T = 60;
  c.H = c.W = 8;
  const std::vector<double> lambda = {1.0, 0.05, 0.03};
  const as::Episode ep = as::GenerateEpisode(c, 0);
  for (int m = 0; m < as::kNumModalities; ++m) {
    // A row has zero error on a segment type when one of its modalities
    // decodes every segment of that type.
    double best = std::numeric_limits<double>::infinity();
    int best_row = -1;
    for (int row = 1; row < 8; ++row) {
      bool zero_error = false;
      for (int k = 0; k < as::kNumModalities; ++k) {
        if (!(row >> k & 1)) continue;
        bool all = true;
        for (const auto& s : ep.segments)
          if (static_cast<int>(s.spec.sufficient_modality) == m)
            all = all && as::TemplateClassify(s, as::Modality(k), c) == s.spec.label;
        zero_error = zero_error || all;
      }
      double cost = 0.0;
      for (int k = 0; k < 3; ++k) cost += (row >> k & 1) * lambda[k];
      if (zero_error && cost < best) best = cost, best_row = row;
    }
    EXPECT_EQ(best_row, 1 << m);
  }
}

TEST(Synthetic, SaveLoadRoundTrip) {
  const std::string dir = as::testing::ScratchDir("dataset_roundtrip");
  as::DatasetConfig c = Small();
  c.n_episodes = 4;
  const as::Dataset d = as::GenerateDataset(c);
  as::SaveDataset(d, dir);
  const as::Dataset back = as::LoadDataset(dir);
  ASSERT_EQ(back.episodes.size(), d.episodes.size());
  for (size_t i = 0; i < d.episodes.size(); ++i) {
    EXPECT_EQ(back.episodes[i].split, d.episodes[i].split);
    for (int t = 0; t < d.episodes[i].T(); ++t) {
      const auto& a = d.episodes[i].segments[t];
      const auto& b = back.episodes[i].segments[t];
      EXPECT_EQ(a.frames, b.frames);
      EXPECT_EQ(a.audio, b.audio);
      EXPECT_EQ(a.behavior, b.behavior);
      EXPECT_EQ(a.spec.label, b.spec.label);
      EXPECT_EQ(a.spec.event_frame, b.spec.event_frame);
    }
  }
  EXPECT_THROW(as::LoadDataset(dir + "/missing"), as::Error);
}
