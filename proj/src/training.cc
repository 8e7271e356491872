#include "adaptsense/training.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>

#include "adaptsense/errors.h"

namespace adaptsense {

using ag::Var;

namespace {

// Stream tags, so that no two random streams of a run share a seed.
constexpr uint64_t kShuffleTag = 0x5348;
constexpr uint64_t kNoiseTag = 0x4e53;
constexpr uint64_t kGumbelTag = 0x4742;
constexpr uint64_t kValTag = 0x5641;
constexpr uint64_t kEvalNoiseTag = 0x454e;

uint64_t Seed(uint64_t base, uint64_t tag, uint64_t a, uint64_t b = 0,
              uint64_t c = 0) {
  return MixSeed(MixSeed(MixSeed(MixSeed(base, tag), a), b), c);
}

int ArgMax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

void Accumulate(LossBreakdown& a, const LossBreakdown& b, double w = 1.0) {
  a.l1 += w * b.l1;
  a.kd += w * b.kd;
  a.gt += w * b.gt;
  a.phi += w * b.phi;
  a.policy += w * b.policy;
  a.theta += w * b.theta;
}

void CheckFinite(double v, const std::string& where,
                 const std::string& last_ckpt) {
  if (!std::isfinite(v)) {
    throw DivergenceError(fmt::format(
        "non-finite loss in {}; last good checkpoint: {}", where,
        last_ckpt.empty() ? "none" : last_ckpt));
  }
}

}  // namespace

void TrainConfig::Validate() const {
  if (epochs1 < 0 || epochs2 < 0 || epochs3 < 0) {
    throw ConfigError("train: epoch budgets must be >= 0");
  }
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr > 0.0) || !(policy_lr > 0.0) || !(joint_lr > 0.0)) {
    throw ConfigError("train: learning rates must be > 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("train.momentum must lie in [0, 1)");
  }
  if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
  if (!(tau_init > 0.0) || !(tau_floor > 0.0)) {
    throw ConfigError("train: Gumbel temperatures must be > 0");
  }
  if (!(tau_decay > 0.0 && tau_decay <= 1.0)) {
    throw ConfigError("train.tau_gumbel.decay must lie in (0, 1]");
  }
  if (!(eta1 >= 0.0) || !(eta2 >= 0.0)) {
    throw ConfigError("train: eta1 and eta2 must be >= 0");
  }
  if (patience < 0) throw ConfigError("train.patience must be >= 0");
  if (alternations < 1) throw ConfigError("train.alternations must be >= 1");
  if (!(noise.prob >= 0.0 && noise.prob <= 1.0)) {
    throw ConfigError("train.noise.prob must lie in [0, 1]");
  }
  if (noise.prob > 0.0 && noise.snr_db.empty()) {
    throw ConfigError("train.noise.snr_db is empty but prob > 0");
  }
  if (noise.first_stage < 1 || noise.first_stage > 3) {
    throw ConfigError("train.noise.first_stage must lie in [1, 3]");
  }
  for (double s : noise.snr_db)
    if (!std::isfinite(s)) throw ConfigError("train.noise.snr_db must be finite");
  distill.Validate();
}

double TrainConfig::TauAt(int n) const {
  return std::max(tau_floor, tau_init * std::pow(tau_decay, n));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs1", c.epochs1},
       {"epochs2", c.epochs2},
       {"epochs3", c.epochs3},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"policy_lr", c.policy_lr},
       {"joint_lr", c.joint_lr},
       {"momentum", c.momentum},
       {"clip_norm", c.clip_norm},
       {"tau_gumbel",
        {{"init", c.tau_init}, {"decay", c.tau_decay}, {"floor", c.tau_floor}}},
       {"eta1", c.eta1},
       {"eta2", c.eta2},
       {"patience", c.patience},
       {"alternations", c.alternations},
       {"noise",
        {{"prob", c.noise.prob},
         {"snr_db", c.noise.snr_db},
         {"first_stage", c.noise.first_stage}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    c.epochs1 = j.value("epochs1", c.epochs1);
    c.epochs2 = j.value("epochs2", c.epochs2);
    c.epochs3 = j.value("epochs3", c.epochs3);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.policy_lr = j.value("policy_lr", c.policy_lr);
    c.joint_lr = j.value("joint_lr", c.joint_lr);
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    if (j.contains("tau_gumbel")) {
      const auto& t = j.at("tau_gumbel");
      c.tau_init = t.value("init", c.tau_init);
      c.tau_decay = t.value("decay", c.tau_decay);
      c.tau_floor = t.value("floor", c.tau_floor);
    }
    c.eta1 = j.value("eta1", c.eta1);
    c.eta2 = j.value("eta2", c.eta2);
    c.patience = j.value("patience", c.patience);
    c.alternations = j.value("alternations", c.alternations);
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      c.noise.prob = n.value("prob", c.noise.prob);
      c.noise.snr_db = n.value("snr_db", c.noise.snr_db);
      c.noise.first_stage = n.value("first_stage", c.noise.first_stage);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("train section: {}", e.what()));
  }
}

EpisodeInputs PrepareEpisode(const Episode& ep, const StudentConfig& s,
                             const PolicyConfig& p,
                             const OracleTeacher& teacher) {
  EpisodeInputs in;
  in.episode = &ep;
  for (const auto& seg : ep.segments) {
    in.student.push_back(PrepareSegment(seg, s));
    in.policy.push_back(PreparePolicyInputs(seg, s, p));
    in.teacher.push_back(s.task == TaskKind::kRegression
                             ? teacher.Regression(seg.spec, s.d_b)
                             : teacher(seg.spec));
  }
  return in;
}

Var DistillLoss(const PreparedSegment& seg, const TeacherOutput& teacher,
                const StudentGates& gates, const StudentModel& student,
                const DistillConfig& cfg, LossBreakdown* parts,
                const EncoderCache* cache) {
  StudentOutput out = StudentForward(seg, gates, student, nullptr, cache);
  Var kd, gt;
  if (student.config().task == TaskKind::kRegression) {
    kd = LossMSE(teacher.logits, out.logits);
    gt = LossMSE(seg.target, out.logits);
  } else {
    kd = LossKD(teacher.logits, out.logits, cfg.tau_kd);
    gt = LossGT(seg.label, out.logits);
  }
  Var l1 = LossL1(teacher.feature, out.z.values);
  Var phi = LossCFD(kd, gt, l1, cfg);
  if (parts) {
    parts->l1 += l1.item();
    parts->kd += kd.item();
    parts->gt += gt.item();
    parts->phi += phi.item();
  }
  return phi;
}

double AngularErrorDegrees(const std::vector<double>& a,
                           const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("angular error: vector lengths differ");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 90.0;
  const double c = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

bool PredictionCorrect(const std::vector<double>& output,
                       const PreparedSegment& seg, TaskKind task) {
  if (task == TaskKind::kRegression) {
    return AngularErrorDegrees(output, seg.target) < kRegressionHitDegrees;
  }
  return ArgMax(output) == seg.label;
}

PolicyPass RunPolicyPass(const EpisodeInputs& ep, const StudentModel& student,
                         const PolicyNet& policy, const CostModel& cm,
                         const DistillConfig& distill,
                         const PolicyPassOptions& opt) {
  const StudentConfig& sc = student.config();
  const int T = static_cast<int>(ep.student.size());
  if (!opt.correct_override.empty() &&
      static_cast<int>(opt.correct_override.size()) != T) {
    throw ContractError("correct_override needs one flag per segment");
  }
  Rollout r = RunPolicy(policy, ep.policy, opt.mode, opt.tau, opt.seed,
                        cm.lambda);
  PolicyPass pass;
  pass.cost = UsageCost(r.U, cm);
  const int K = r.U.K;
  std::vector<Var> counts(K);
  for (int k = 0; k < K; ++k) {
    for (int t = 0; t < T; ++t) {
      counts[k] = counts[k].defined() ? ag::Add(counts[k], r.actions[t][k])
                                      : r.actions[t][k];
    }
  }
  Var cost = UsageCostVar(counts, cm);
  const bool differentiable =
      opt.mode == PolicyMode::kTrain || opt.mode == PolicyMode::kRelaxed;
  std::vector<Var> terms, phis;
  for (int t = 0; t < T; ++t) {
    StudentGates g = StudentGates::FromActions(r.actions[t], sc);
    g.evaluate_all = differentiable;
    const EncoderCache* cache = opt.use_cache ? &ep.cache.at(t) : nullptr;
    StudentOutput out = StudentForward(ep.student[t], g, student, nullptr, cache);
    Var task = sc.task == TaskKind::kRegression
                   ? LossMSE(ep.student[t].target, out.logits)
                   : LossGT(ep.student[t].label, out.logits);
    const bool correct =
        opt.correct_override.empty()
            ? PredictionCorrect(out.logits.value(), ep.student[t], sc.task)
            : opt.correct_override[t] != 0;
    pass.correct += correct;
    pass.task += task.item();
    terms.push_back(PolicyLoss(task, cost, cm, correct));
    if (opt.with_phi) {
      StudentGates hard = StudentGates::FromRow(r.U.HardRow(t), sc);
      phis.push_back(DistillLoss(ep.student[t], ep.teacher[t], hard, student,
                                 distill, nullptr, cache));
    }
  }
  pass.loss = BatchMean(terms);
  if (opt.with_phi) pass.phi = BatchMean(phis);
  pass.U = std::move(r.U);
  return pass;
}

// ---------------------------------------------------------------------------
// Trainer.

Trainer::Trainer(const Dataset& data, const TrainConfig& cfg,
                 const CostModel& cost, StudentModel& student,
                 PolicyNet& policy)
    : data_(data),
      cfg_(cfg),
      cost_(cost),
      student_(student),
      policy_(policy),
      teacher_(student.config().task == TaskKind::kRegression
                   ? data.config.C
                   : student.config().C,
               student.config().d_f) {
  cfg_.Validate();
  cost_.c_total = data.config.T;
  cost_.Validate();
  if (static_cast<int>(cost_.lambda.size()) != policy.space().K) {
    throw ConfigError(fmt::format("cost.lambda has {} entries, the {} task has "
                                  "{} actions",
                                  cost_.lambda.size(),
                                  TaskKindName(cfg_.task), policy.space().K));
  }
  train_ = data.Select(Split::kTrain);
  val_ = data.Select(Split::kVal);
  if (train_.empty()) throw DataError("training split is empty");
  const StudentConfig& sc = student.config();
  const PolicyConfig& pc = policy.config();
  for (const Episode* e : train_)
    train_in_.push_back(PrepareEpisode(*e, sc, pc, teacher_));
  for (const Episode* e : val_)
    val_in_.push_back(PrepareEpisode(*e, sc, pc, teacher_));
  if (cfg_.noise.prob > 0.0) {
    const auto& levels = cfg_.noise.snr_db;
    noisy_eps_.reserve(levels.size() * train_.size());
    for (size_t l = 0; l < levels.size(); ++l) {
      for (const Episode* e : train_) {
        noisy_eps_.push_back(CorruptAudio(
            *e, levels[l], Seed(cfg_.seed, kNoiseTag, e->index, l)));
      }
    }
    noisy_in_.resize(levels.size());
    for (size_t l = 0; l < levels.size(); ++l) {
      for (size_t i = 0; i < train_.size(); ++i) {
        noisy_in_[l].push_back(PrepareEpisode(
            noisy_eps_[l * train_.size() + i], sc, pc, teacher_));
      }
    }
  }
}

ParamSet Trainer::AllParams() const {
  ParamSet ps;
  ps.Merge("student.", student_.params());
  ps.Merge("policy.", policy_.params());
  return ps;
}

const EpisodeInputs& Trainer::Variant(int i, int stage, int round, int epoch) {
  if (cfg_.noise.prob <= 0.0 || stage < cfg_.noise.first_stage) {
    return train_in_[i];
  }
  Rng rng(Seed(cfg_.seed, kNoiseTag, 100 + stage + 16 * round, epoch, i));
  if (rng.Uniform() >= cfg_.noise.prob) return train_in_[i];
  const int level = rng.UniformInt(static_cast<int>(noisy_in_.size()));
  return noisy_in_[level][i];
}

std::vector<int> Trainer::Shuffled(int stage, int epoch) const {
  std::vector<int> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Seed(cfg_.seed, kShuffleTag, stage, epoch));
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
    std::swap(order[i], order[rng.UniformInt(i + 1)]);
  }
  return order;
}

void Trainer::Step(ParamSet& params, SgdMomentum& opt) {
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, v] : params.entries()) {
      if (!v.requires_grad()) continue;
      for (double g : v.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) {
      const double s = cfg_.clip_norm / norm;
      for (const auto& [name, v] : params.entries()) {
        if (!v.requires_grad()) continue;
        Var h = v;
        for (double& g : h.mutable_grad()) g *= s;
      }
    }
  }
  opt.Step(params);
}

void Trainer::SaveAs(const std::string& name) {
  if (ckpt_dir_.empty()) return;
  std::filesystem::create_directories(ckpt_dir_);
  const std::string path = (std::filesystem::path(ckpt_dir_) / name).string();
  SaveCheckpoint(path, AllParams());
  last_ckpt_ = path;
}

void Trainer::FillCaches() {
  auto fill = [&](std::vector<EpisodeInputs>& v) {
    for (auto& ep : v) {
      ep.cache.clear();
      for (const auto& seg : ep.student)
        ep.cache.push_back(EncodeAll(seg, student_));
    }
  };
  fill(train_in_);
  fill(val_in_);
  for (auto& level : noisy_in_) fill(level);
}

void Trainer::ClearCaches() {
  for (auto& ep : train_in_) ep.cache.clear();
  for (auto& ep : val_in_) ep.cache.clear();
  for (auto& level : noisy_in_)
    for (auto& ep : level) ep.cache.clear();
}

void Trainer::ValidateStudent(EpochRecord& rec) const {
  const StudentConfig& sc = student_.config();
  double loss = 0.0;
  int hits = 0, n = 0;
  for (const auto& ep : val_in_) {
    for (size_t t = 0; t < ep.student.size(); ++t) {
      StudentGates g = StudentGates::AllOn(sc);
      StudentOutput out = StudentForward(ep.student[t], g, student_);
      LossBreakdown parts;
      DistillLoss(ep.student[t], ep.teacher[t], g, student_, cfg_.distill,
                  &parts);
      loss += parts.phi;
      hits += PredictionCorrect(out.logits.value(), ep.student[t], sc.task);
      ++n;
    }
  }
  if (n == 0) {
    rec.val_loss = rec.train.phi;
    return;
  }
  rec.val_loss = loss / n;
  rec.val_accuracy = static_cast<double>(hits) / n;
  rec.val_usage.assign(policy_.space().K, 1.0);
}

void Trainer::ValidatePolicy(EpochRecord& rec, bool joint, bool cached) const {
  double loss = 0.0;
  int hits = 0, n = 0;
  std::vector<double> usage(policy_.space().K, 0.0);
  for (const auto& ep : val_in_) {
    PolicyPassOptions opt;
    opt.mode = PolicyMode::kInfer;
    opt.tau = rec.tau;
    opt.seed = Seed(cfg_.seed, kValTag, ep.episode->index);
    opt.use_cache = cached;
    opt.with_phi = joint;
    PolicyPass p =
        RunPolicyPass(ep, student_, policy_, cost_, cfg_.distill, opt);
    const int T = p.U.T;
    double l = p.loss.item();
    if (joint) l = cfg_.eta1 * l + cfg_.eta2 * p.phi.item();
    loss += l * T;
    hits += p.correct;
    n += T;
    for (int k = 0; k < p.U.K; ++k) usage[k] += p.U.Count(k);
  }
  if (n == 0) {
    rec.val_loss = joint ? rec.train.theta : rec.train.policy;
    return;
  }
  rec.val_loss = loss / n;
  rec.val_accuracy = static_cast<double>(hits) / n;
  for (auto& u : usage) u /= n;
  rec.val_usage = usage;
}

void Trainer::RunStage(int stage, int round, int epochs, ParamSet watched,
                       const std::function<EpochRecord(int)>& train_epoch,
                       const std::function<void(EpochRecord&)>& validate) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_params = watched.Flatten();
  int since_best = 0;
  const std::string prefix =
      round == 0 ? fmt::format("stage{}", stage)
                 : fmt::format("stage{}_round{}", stage, round);
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    EpochRecord rec = train_epoch(epoch);
    rec.stage = stage;
    rec.epoch = epoch;
    validate(rec);
    CheckFinite(rec.val_loss, fmt::format("{} epoch {} validation", prefix, epoch),
                last_ckpt_);
    history_.push_back(rec);
    SaveAs(fmt::format("{}_epoch{}.ckpt", prefix, epoch));
    if (on_epoch_) on_epoch_(rec);
    if (rec.val_loss < best) {
      best = rec.val_loss;
      best_params = watched.Flatten();
      since_best = 0;
    } else if (cfg_.patience > 0 && ++since_best >= cfg_.patience) {
      break;
    }
  }
  watched.Assign(best_params);
  SaveAs(prefix + "_final.ckpt");
}

void Trainer::Stage1() {
  if (cfg_.epochs1 == 0) return;
  const StudentConfig& sc = student_.config();
  student_.params().SetRequiresGrad(true);
  policy_.params().SetRequiresGrad(false);
  SgdMomentum opt(cfg_.lr, cfg_.momentum);
  auto train_epoch = [&](int epoch) {
    EpochRecord rec;
    const auto order = Shuffled(1, epoch);
    int n_total = 0;
    for (size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      const size_t e = std::min(order.size(), b + cfg_.batch_size);
      int n = 0;
      for (size_t i = b; i < e; ++i)
        n += static_cast<int>(train_in_[order[i]].student.size());
      student_.params().ZeroGrad();
      LossBreakdown parts;
      for (size_t i = b; i < e; ++i) {
        const EpisodeInputs& ep = Variant(order[i], 1, 0, epoch);
        std::vector<Var> losses;
        for (size_t t = 0; t < ep.student.size(); ++t) {
          losses.push_back(DistillLoss(ep.student[t], ep.teacher[t],
                                       StudentGates::AllOn(sc), student_,
                                       cfg_.distill, &parts));
        }
        Var sum = ag::Sum(ag::Concat(losses));
        CheckFinite(sum.item(), fmt::format("stage 1 epoch {}", epoch),
                    last_ckpt_);
        ag::Scale(sum, 1.0 / n).Backward();
      }
      Step(student_.params(), opt);
      LossBreakdown mean;
      Accumulate(mean, parts, 1.0 / n);
      steps_.push_back({step_++, 1, mean});
      Accumulate(rec.train, parts);
      n_total += n;
    }
    LossBreakdown mean;
    Accumulate(mean, rec.train, 1.0 / n_total);
    rec.train = mean;
    return rec;
  };
  RunStage(1, 0, cfg_.epochs1, student_.params(), train_epoch,
           [&](EpochRecord& r) { ValidateStudent(r); });
  policy_.params().SetRequiresGrad(true);
}

void Trainer::Stage2(int round) {
  if (cfg_.epochs2 == 0) return;
  student_.params().SetRequiresGrad(false);
  policy_.params().SetRequiresGrad(true);
  FillCaches();
  SgdMomentum opt(cfg_.policy_lr, cfg_.momentum);
  const int offset = round * (cfg_.epochs2 + cfg_.epochs3);
  auto train_epoch = [&](int epoch) {
    EpochRecord rec;
    rec.tau = cfg_.TauAt(offset + epoch - 1);
    const auto order = Shuffled(2 + 16 * round, epoch);
    int n_total = 0;
    for (size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      const size_t e = std::min(order.size(), b + cfg_.batch_size);
      const double w = 1.0 / static_cast<double>(e - b);
      policy_.params().ZeroGrad();
      LossBreakdown parts;
      for (size_t i = b; i < e; ++i) {
        const EpisodeInputs& ep = Variant(order[i], 2, round, epoch);
        PolicyPassOptions o;
        o.mode = PolicyMode::kTrain;
        o.tau = rec.tau;
        o.seed = Seed(cfg_.seed, kGumbelTag, 2 + 16 * round, epoch,
                      ep.episode->index);
        o.use_cache = true;
        PolicyPass p = RunPolicyPass(ep, student_, policy_, cost_,
                                     cfg_.distill, o);
        CheckFinite(p.loss.item(), fmt::format("stage 2 epoch {}", epoch),
                    last_ckpt_);
        ag::Scale(p.loss, w).Backward();
        parts.policy += p.loss.item() * w;
        parts.theta += p.loss.item() * w;
      }
      Step(policy_.params(), opt);
      steps_.push_back({step_++, 2, parts});
      Accumulate(rec.train, parts);
      ++n_total;
    }
    LossBreakdown mean;
    Accumulate(mean, rec.train, 1.0 / n_total);
    rec.train = mean;
    return rec;
  };
  RunStage(2, round, cfg_.epochs2, policy_.params(), train_epoch,
           [&](EpochRecord& r) { ValidatePolicy(r, false, true); });
  ClearCaches();
  student_.params().SetRequiresGrad(true);
}

void Trainer::Stage3(int round) {
  if (cfg_.epochs3 == 0) return;
  student_.params().SetRequiresGrad(true);
  policy_.params().SetRequiresGrad(true);
  SgdMomentum opt_s(cfg_.joint_lr, cfg_.momentum);
  SgdMomentum opt_p(cfg_.policy_lr, cfg_.momentum);
  const int offset = round * (cfg_.epochs2 + cfg_.epochs3) + cfg_.epochs2;
  auto train_epoch = [&](int epoch) {
    EpochRecord rec;
    rec.tau = cfg_.TauAt(offset + epoch - 1);
    const auto order = Shuffled(3 + 16 * round, epoch);
    int n_total = 0;
    for (size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      const size_t e = std::min(order.size(), b + cfg_.batch_size);
      const double w = 1.0 / static_cast<double>(e - b);
      student_.params().ZeroGrad();
      policy_.params().ZeroGrad();
      LossBreakdown parts;
      for (size_t i = b; i < e; ++i) {
        const EpisodeInputs& ep = Variant(order[i], 3, round, epoch);
        PolicyPassOptions o;
        o.mode = PolicyMode::kTrain;
        o.tau = rec.tau;
        o.seed = Seed(cfg_.seed, kGumbelTag, 3 + 16 * round, epoch,
                      ep.episode->index);
        o.with_phi = true;
        PolicyPass p = RunPolicyPass(ep, student_, policy_, cost_,
                                     cfg_.distill, o);
        Var theta = ag::Add(ag::Scale(p.loss, cfg_.eta1),
                            ag::Scale(p.phi, cfg_.eta2));
        CheckFinite(theta.item(), fmt::format("stage 3 epoch {}", epoch),
                    last_ckpt_);
        ag::Scale(theta, w).Backward();
        parts.policy += p.loss.item() * w;
        parts.phi += p.phi.item() * w;
        parts.theta += theta.item() * w;
      }
      Step(student_.params(), opt_s);
      Step(policy_.params(), opt_p);
      steps_.push_back({step_++, 3, parts});
      Accumulate(rec.train, parts);
      ++n_total;
    }
    LossBreakdown mean;
    Accumulate(mean, rec.train, 1.0 / n_total);
    rec.train = mean;
    return rec;
  };
  RunStage(3, round, cfg_.epochs3, AllParams(), train_epoch,
           [&](EpochRecord& r) { ValidatePolicy(r, true, false); });
}

// ---------------------------------------------------------------------------
// Evaluation.

const char* PolicyKindName(PolicyKind k) {
  switch (k) {
    case PolicyKind::kLearned:
      return "learned";
    case PolicyKind::kOracle:
      return "oracle";
    case PolicyKind::kAllOn:
      return "all_on";
    case PolicyKind::kRandom:
      return "random";
    case PolicyKind::kHeuristic:
      return "heuristic";
  }
  return "?";
}

PolicyKind PolicyKindFromName(const std::string& name) {
  for (PolicyKind k : {PolicyKind::kLearned, PolicyKind::kOracle,
                       PolicyKind::kAllOn, PolicyKind::kRandom,
                       PolicyKind::kHeuristic}) {
    if (name == PolicyKindName(k)) return k;
  }
  throw ConfigError(fmt::format(
      "unknown policy '{}' (learned, oracle, all_on, random, heuristic)", name));
}

DecisionTensor AllOnPolicy(int T, const ActionSpace& space) {
  DecisionTensor U(T, space.K);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < space.K; ++k) {
      U.SetHard(t, k, 1);
      U.SetSoft(t, k, 1.0);
    }
  return U;
}

DecisionTensor RandomPolicy(int T, const ActionSpace& space, uint64_t seed) {
  DecisionTensor U(T, space.K);
  U.gumbel_seed = seed;
  Rng rng(seed);
  for (int t = 0; t < T; ++t) {
    std::vector<uint8_t> row(space.K, 1);
    if (space.K >= 2) {
      // Rejection keeps the remaining rows equally likely.
      while (true) {
        int on = 0;
        for (auto& v : row) {
          v = static_cast<uint8_t>(rng.NextU64() >> 63);
          on += v;
        }
        if (on != 0 && on != space.K) break;
      }
    }
    for (int k = 0; k < space.K; ++k) {
      U.SetHard(t, k, row[k]);
      U.SetSoft(t, k, space.K >= 2 ? 0.5 : 1.0);
    }
  }
  return U;
}

DecisionTensor HeuristicPolicy(int T, const ActionSpace& space) {
  DecisionTensor U(T, space.K);
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < space.K; ++k) {
      bool on;
      if (space.kind == ActionKind::kFrameSelect) {
        on = k == space.K / 2;
      } else if (space.SensorOf(k) == Modality::kVisual) {
        on = t % 4 == 0;
      } else {
        on = true;
      }
      U.SetHard(t, k, on);
      U.SetSoft(t, k, on ? 1.0 : 0.0);
    }
  }
  return U;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"stage", r.stage},
       {"epoch", r.epoch},
       {"tau", r.tau},
       {"train",
        {{"l1", r.train.l1},
         {"kd", r.train.kd},
         {"gt", r.train.gt},
         {"phi", r.train.phi},
         {"policy", r.train.policy},
         {"theta", r.train.theta}}},
       {"val_loss", r.val_loss},
       {"val_accuracy", r.val_accuracy},
       {"val_usage", r.val_usage}};
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = {{"policy", r.policy},
       {"split", r.split},
       {"snr_db", std::isfinite(r.snr_db) ? nlohmann::json(r.snr_db)
                                          : nlohmann::json(nullptr)},
       {"metric", r.metric},
       {"score", r.score},
       {"accuracy", r.accuracy},
       {"segments", r.segments},
       {"actions", r.actions},
       {"usage", r.usage},
       {"mean_macs", r.mean_macs},
       {"mean_bytes", r.mean_bytes},
       {"mean_energy_j", r.mean_energy},
       {"all_on_macs", r.all_on_macs},
       {"policy_macs", r.policy_macs},
       {"student_params", r.student_params},
       {"policy_params", r.policy_params},
       {"history", r.history}};
}

Evaluation Evaluate(const Dataset& data, const StudentModel& student,
                    const PolicyNet* policy, const CostModel& cm,
                    const EvalOptions& opt) {
  const StudentConfig& sc = student.config();
  const ActionSpace space = ActionSpaceFor(sc.task, data.config);
  if (opt.policy == PolicyKind::kLearned && policy == nullptr) {
    throw ContractError("the learned policy needs a policy network");
  }
  const auto eps = data.Select(opt.split);
  if (eps.empty()) {
    throw DataError(fmt::format("{} split is empty", SplitName(opt.split)));
  }
  CostModel local = cm;
  local.c_total = data.config.T;
  if (static_cast<int>(local.lambda.size()) != space.K) {
    throw ConfigError(fmt::format("cost.lambda has {} entries for {} actions",
                                  local.lambda.size(), space.K));
  }
  const bool noisy = std::isfinite(opt.snr_db);

  Evaluation ev;
  double score = 0.0;
  int hits = 0, n = 0;
  for (const Episode* src : eps) {
    Episode corrupted;
    if (noisy) {
      corrupted =
          CorruptAudio(*src, opt.snr_db, Seed(opt.seed, kEvalNoiseTag, src->index));
    }
    const Episode& ep = noisy ? corrupted : *src;
    const int T = ep.T();
    DecisionTensor U;
    switch (opt.policy) {
      case PolicyKind::kLearned: {
        std::vector<PolicyInputs> in;
        for (const auto& seg : ep.segments)
          in.push_back(PreparePolicyInputs(seg, sc, policy->config()));
        U = RunPolicy(*policy, in, PolicyMode::kInfer, 1.0,
                      MixSeed(opt.seed, ep.index), local.lambda)
                .U;
        break;
      }
      case PolicyKind::kOracle:
        U = OraclePolicy(ep, space);
        break;
      case PolicyKind::kAllOn:
        U = AllOnPolicy(T, space);
        break;
      case PolicyKind::kRandom:
        U = RandomPolicy(T, space, MixSeed(opt.seed, ep.index));
        break;
      case PolicyKind::kHeuristic:
        U = HeuristicPolicy(T, space);
        break;
    }
    for (int t = 0; t < T; ++t) {
      PreparedSegment seg = PrepareSegment(ep.segments[t], sc);
      StudentGates g = StudentGates::FromRow(U.HardRow(t), sc);
      StudentOutput out = StudentForward(seg, g, student);
      hits += PredictionCorrect(out.logits.value(), seg, sc.task);
      if (sc.task == TaskKind::kRegression) {
        score += AngularErrorDegrees(out.logits.value(), seg.target);
      }
      ++n;
    }
    ev.traces.push_back(std::move(U));
    ev.episodes.push_back(src->index);
  }

  MetricsReport& r = ev.report;
  r.policy = PolicyKindName(opt.policy);
  r.split = SplitName(opt.split);
  r.snr_db = opt.snr_db;
  r.segments = n;
  r.accuracy = static_cast<double>(hits) / n;
  if (sc.task == TaskKind::kRegression) {
    r.metric = "mae_deg";
    r.score = score / n;
  } else {
    r.metric = "accuracy";
    r.score = r.accuracy;
  }
  r.actions = space.labels;
  const LayerGraph sg = StudentGraph(sc);
  r.all_on_macs = static_cast<double>(CountMacs(sg, nullptr));
  r.student_params = static_cast<long>(student.params().NumScalars());
  LayerGraph pg;
  std::array<bool, kNumModalities> sensors{};
  const bool learned = opt.policy == PolicyKind::kLearned;
  if (learned) {
    pg = PolicyGraph(sc, policy->config());
    r.policy_macs = static_cast<double>(CountMacs(pg, nullptr));
    r.policy_params = static_cast<long>(policy->params().NumScalars());
    // The controller reads its own cheap views of these sensors every segment.
    if (policy->uses_preview()) {
      sensors[static_cast<int>(Modality::kAudio)] = true;
    } else {
      sensors.fill(true);
    }
  }
  UsageReport u = MakeUsageReport(ev.traces, sg, learned ? &pg : nullptr,
                                  sensors, space, opt.energy);
  r.usage = u.fractions;
  r.mean_macs = u.mean_macs;
  r.mean_bytes = u.mean_bytes;
  r.mean_energy = u.mean_energy;
  return ev;
}

// ---------------------------------------------------------------------------
// Gradient checking.

GradCheckResult GradCheck(const std::function<Var()>& loss, ParamSet& params,
                          double eps, int max_coords, uint64_t seed) {
  std::vector<std::pair<int, int>> coords;
  const auto& entries = params.entries();
  for (int e = 0; e < static_cast<int>(entries.size()); ++e) {
    if (!entries[e].second.requires_grad()) continue;
    for (int i = 0; i < entries[e].second.size(); ++i) coords.emplace_back(e, i);
  }
  if (static_cast<int>(coords.size()) > max_coords) {
    Rng rng(seed);
    for (int i = 0; i < max_coords; ++i) {
      const int j = i + rng.UniformInt(static_cast<int>(coords.size()) - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }
  params.ZeroGrad();
  const Var base = loss();
  base.Backward();
  // Central differences carry roundoff of order eps_mach * |L| / eps, so
  // derivatives far below the loss scale cannot be resolved.
  const double floor = 1e-6 * std::max(1.0, std::abs(base.item()));
  GradCheckResult res;
  for (auto [e, i] : coords) {
    Var v = entries[e].second;
    const double analytic = v.grad()[i];
    const double x = v.value()[i];
    v.mutable_value()[i] = x + eps;
    const double up = loss().item();
    v.mutable_value()[i] = x - eps;
    const double down = loss().item();
    v.mutable_value()[i] = x;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), floor});
    res.max_rel_error =
        std::max(res.max_rel_error, std::abs(analytic - numeric) / denom);
    ++res.coordinates;
  }
  return res;
}

}  // namespace adaptsense
