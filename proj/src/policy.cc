#include "adaptsense/policy.h"

#include <fmt/format.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>

#include "adaptsense/errors.h"

namespace adaptsense {

using ag::Var;

std::vector<double> GumbelNoise(int n, Rng& rng) {
  std::vector<double> g(n);
  for (auto& v : g) v = rng.Gumbel();
  return g;
}

std::array<int, 2> GumbelMaxSample(const std::array<double, 2>& log_scores,
                                   const std::array<double, 2>& g) {
  const bool first = log_scores[0] + g[0] >= log_scores[1] + g[1];
  return {first ? 1 : 0, first ? 0 : 1};
}

std::array<double, 2> GumbelSoftmaxRelax(const std::array<double, 2>& s,
                                         const std::array<double, 2>& g,
                                         double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau_gumbel must be > 0");
  const double a = (s[0] + g[0]) / tau, b = (s[1] + g[1]) / tau;
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}

Var GumbelSoftmaxRelax(const Var& log_scores, const std::array<double, 2>& g,
                       double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau_gumbel must be > 0");
  if (log_scores.size() != 2) {
    throw ShapeError(fmt::format("relaxation expects 2 log-scores, got {}",
                                 log_scores.size()));
  }
  Var noisy = ag::Add(log_scores, Var::Constant({g[0], g[1]}));
  return ag::Softmax(ag::Scale(noisy, 1.0 / tau));
}

void to_json(nlohmann::json& j, const PolicyConfig& c) {
  j = {{"d_h", c.d_h},       {"width1", c.width1},
       {"width2", c.width2}, {"d_p", c.d_p},
       {"preview", c.preview}};
}

void from_json(const nlohmann::json& j, PolicyConfig& c) {
  try {
    c.d_h = j.value("d_h", c.d_h);
    c.width1 = j.value("width1", c.width1);
    c.width2 = j.value("width2", c.width2);
    c.d_p = j.value("d_p", c.d_p);
    if (j.contains("preview")) c.preview = j.at("preview").get<PreviewConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("policy section: {}", e.what()));
  }
  if (c.d_h < 1 || c.width1 < 1 || c.width2 < 1 || c.d_p < 1) {
    throw ConfigError("policy widths must be >= 1");
  }
}

namespace {

ag::Shape ThumbShape(const StudentConfig& s) { return {1, s.H / 2, s.W / 2}; }

ag::Shape CoarseShape(const StudentConfig& s, const PolicyConfig& p) {
  return {1, p.coarse.Frames(s.L), p.coarse.Bins()};
}

ActionSpace SpaceOf(const StudentConfig& s) {
  switch (s.task) {
    case TaskKind::kChannelSelect:
      return ActionSpace::ChannelSelect(s.n_ch);
    case TaskKind::kFrameSelect:
      return ActionSpace::FrameSelect(s.F);
    default:
      return ActionSpace::ModalitySelect();
  }
}

}  // namespace

PolicyInputs PreparePolicyInputs(const Segment& seg, const StudentConfig& s,
                                 const PolicyConfig& p) {
  PolicyInputs in;
  if (s.task == TaskKind::kFrameSelect) {
    in.preview = PreviewFeatures(seg.audio.data(), s.n_ch, s.L, s.F, p.preview);
    return in;
  }
  const int h2 = s.H / 2, w2 = s.W / 2;
  std::vector<double> thumb(static_cast<size_t>(h2) * w2, 0.0);
  const double scale = 1.0 / (4.0 * s.F * s.ch);
  for (int f = 0; f < s.F; ++f)
    for (int y = 0; y < 2 * h2; ++y)
      for (int x = 0; x < 2 * w2; ++x)
        for (int q = 0; q < s.ch; ++q)
          thumb[(y / 2) * w2 + x / 2] +=
              scale *
              seg.frames[((static_cast<size_t>(f) * s.H + y) * s.W + x) * s.ch +
                         q];
  in.thumb = Var::Constant(std::move(thumb), ThumbShape(s));
  in.coarse = Var::Constant(Spectrogram(seg.audio.data(), 1, s.L, p.coarse),
                            CoarseShape(s, p));
  std::vector<double> b(static_cast<size_t>(s.d_b) * s.L_b);
  for (int t = 0; t < s.L_b; ++t)
    for (int d = 0; d < s.d_b; ++d)
      b[static_cast<size_t>(d) * s.L_b + t] =
          seg.behavior[static_cast<size_t>(t) * s.d_b + d];
  in.behavior = Var::Constant(std::move(b), {s.d_b, s.L_b});
  return in;
}

PolicyNet::PolicyNet(const StudentConfig& student, const PolicyConfig& cfg,
                     uint64_t seed)
    : student_(student), cfg_(cfg), space_(SpaceOf(student)) {
  Rng rng(seed);
  if (student.task == TaskKind::kFrameSelect) {
    preview_ = std::make_unique<PreviewNet>(cfg.preview, student.n_ch,
                                            params_, rng);
    return;
  }
  const ag::Shape shapes[kNumModalities] = {
      ThumbShape(student), CoarseShape(student, cfg),
      ag::Shape{student.d_b, student.L_b}};
  for (int k = 0; k < kNumModalities; ++k) {
    enc_[k] = AddConvStack(
        params_,
        std::string("policy.") + ModalityName(static_cast<Modality>(k)),
        shapes[k], cfg.width1, cfg.width2, cfg.kernel, cfg.pool, cfg.d_p, rng);
  }
  lstm_ = AddLstm(params_, "policy.lstm", kNumModalities * cfg.d_p, cfg.d_h,
                  rng);
  for (int k = 0; k < space_.K; ++k) {
    const std::string n = fmt::format("policy.head{}", k);
    heads_.emplace_back(params_.AddLecun(n + ".w", {2, cfg.d_h}, cfg.d_h, rng),
                        params_.AddConstant(n + ".b", {2}, 0.0));
  }
}

Var PolicyNet::JointFeature(const PolicyInputs& in) const {
  if (uses_preview()) {
    throw ContractError("frame selection has no controller feature");
  }
  Var parts[] = {ConvStack(in.thumb, enc_[0], cfg_.pool),
                 ConvStack(in.coarse, enc_[1], cfg_.pool),
                 ConvStack(in.behavior, enc_[2], cfg_.pool)};
  return ag::Concat(parts);
}

std::vector<Var> PolicyNet::HeadScores(const Var& h) const {
  std::vector<Var> out;
  for (const auto& [w, b] : heads_) out.push_back(ag::Linear(h, w, b));
  return out;
}

std::vector<Var> PolicyNet::PreviewScores(const PolicyInputs& in,
                                          std::vector<double>* saliency) const {
  PreviewOutput po = preview_->Forward(in.preview);
  if (saliency) *saliency = po.saliency.value();
  std::vector<Var> out;
  for (int f = 0; f < po.logit.size(); ++f) {
    Var a = ag::Slice(po.logit, f, f + 1);
    Var parts[] = {ag::Log(ag::Sigmoid(a)), ag::Log(ag::Sigmoid(ag::Neg(a)))};
    out.push_back(ag::Concat(parts));
  }
  return out;
}

PolicyStepResult SampleActions(const std::vector<Var>& scores, double tau,
                               Rng& rng, PolicyMode mode, int fallback) {
  const int K = static_cast<int>(scores.size());
  PolicyStepResult r;
  r.hard.resize(K);
  r.p_select.resize(K);
  r.actions.resize(K);
  std::vector<Var> soft(K);
  bool any = false;
  for (int k = 0; k < K; ++k) {
    std::array<double, 2> g{0.0, 0.0};
    if (mode != PolicyMode::kGreedy) g = {rng.Gumbel(), rng.Gumbel()};
    const Var& z = scores[k];
    Var p = GumbelSoftmaxRelax(z, g, tau);
    soft[k] = ag::Slice(p, 0, 1);
    r.hard[k] = static_cast<uint8_t>(GumbelMaxSample({z[0], z[1]}, g)[0]);
    r.p_select[k] = p[0];
    any = any || r.hard[k];
  }
  if (!any) r.hard[fallback] = 1;
  for (int k = 0; k < K; ++k) {
    switch (mode) {
      case PolicyMode::kTrain:
        r.actions[k] = ag::StraightThrough({double(r.hard[k])}, soft[k]);
        break;
      case PolicyMode::kRelaxed:
        r.actions[k] = soft[k];
        break;
      default:
        r.actions[k] = Var::Scalar(r.hard[k]);
    }
  }
  return r;
}

PolicyStepResult PolicyStep(const Var& f_t, const LstmState& state,
                            const PolicyNet& net, double tau, Rng& rng,
                            PolicyMode mode, int fallback) {
  LstmState next = LstmCell(f_t, state, net.lstm());
  PolicyStepResult r =
      SampleActions(net.HeadScores(next.h), tau, rng, mode, fallback);
  r.state = next;
  return r;
}

Rollout RunPolicy(const PolicyNet& net, const std::vector<PolicyInputs>& seq,
                  PolicyMode mode, double tau, uint64_t seed,
                  const std::vector<double>& lambda) {
  const ActionSpace& space = net.space();
  const int T = static_cast<int>(seq.size());
  Rollout out;
  out.U = DecisionTensor(T, space.K);
  out.U.gumbel_seed = seed;
  Rng rng(seed);
  const int fallback = space.FallbackAction(lambda);
  LstmState state;
  if (!net.uses_preview()) state = LstmZeroState(net.config().d_h);
  for (int t = 0; t < T; ++t) {
    PolicyStepResult r;
    if (net.uses_preview()) {
      std::vector<double> sal;
      auto scores = net.PreviewScores(seq[t], &sal);
      if (mode == PolicyMode::kInfer) {
        const auto& pc = net.preview().config();
        auto frames = SelectSalientFrames(sal, pc.delta, 1, pc.n_max);
        if (frames.empty()) frames.push_back(space.FallbackAction(lambda));
        r.hard.assign(space.K, 0);
        for (int f : frames) r.hard[f] = 1;
        r.p_select = sal;
        for (int k = 0; k < space.K; ++k)
          r.actions.push_back(Var::Scalar(r.hard[k]));
      } else {
        r = SampleActions(scores, tau, rng, mode, fallback);
      }
    } else {
      r = PolicyStep(net.JointFeature(seq[t]), state, net, tau, rng, mode,
                     fallback);
      state = r.state;
    }
    for (int k = 0; k < space.K; ++k) {
      out.U.SetHard(t, k, r.hard[k]);
      out.U.SetSoft(t, k, r.p_select[k]);
    }
    out.actions.push_back(std::move(r.actions));
  }
  return out;
}

double UsageCost(const DecisionTensor& U, const CostModel& cm) {
  using boost::multiprecision::cpp_rational;
  if (cm.c_total != U.T) {
    throw ContractError(fmt::format(
        "usage_cost: cost model counts C = {} segments, U has T = {}",
        cm.c_total, U.T));
  }
  if (static_cast<int>(cm.lambda.size()) != U.K) {
    throw ContractError(fmt::format("usage_cost: {} lambdas for K = {}",
                                    cm.lambda.size(), U.K));
  }
  cpp_rational num = 0;
  for (int k = 0; k < U.K; ++k) {
    const long long c = U.Count(k);
    num += cpp_rational(cm.lambda[k]) * (c * c);
  }
  const long long C = cm.c_total;
  cpp_rational q = num / cpp_rational(C * C);
  return q.convert_to<double>();
}

Var UsageCostVar(const std::vector<Var>& counts, const CostModel& cm) {
  if (counts.size() != cm.lambda.size()) {
    throw ContractError(fmt::format("usage_cost: {} counts for {} lambdas",
                                    counts.size(), cm.lambda.size()));
  }
  const double inv = 1.0 / (static_cast<double>(cm.c_total) * cm.c_total);
  Var acc = Var::Scalar(0.0);
  for (size_t k = 0; k < counts.size(); ++k) {
    if (cm.lambda[k] == 0.0) continue;
    acc = ag::Add(acc, ag::Scale(ag::Square(counts[k]), cm.lambda[k] * inv));
  }
  return acc;
}

Var PolicyLoss(const Var& task_loss, const Var& cost, const CostModel& cm,
               bool correct) {
  return correct ? ag::Add(task_loss, cost) : ag::AddScalar(task_loss, cm.gamma);
}

double PolicyLoss(const std::vector<double>& logits, int label,
                  const DecisionTensor& U, const CostModel& cm, bool correct) {
  if (label < 0 || label >= static_cast<int>(logits.size())) {
    throw DataError(fmt::format("label {} outside [0,{})", label, logits.size()));
  }
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  const double ce = m + std::log(s) - logits[label];
  return ce + (correct ? UsageCost(U, cm) : cm.gamma);
}

}  // namespace adaptsense
