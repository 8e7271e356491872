#include "adaptsense/distillation.h"

#include <fmt/format.h>

#include <cmath>

#include "adaptsense/errors.h"
#include "adaptsense/rng.h"

namespace adaptsense {

using ag::Var;

namespace {

constexpr uint64_t kTeacherSeed = 0x7e4c11e5ull;

void CheckLength(size_t a, const Var& b, const char* what) {
  if (static_cast<int>(a) != b.size()) {
    throw ShapeError(fmt::format("{}: teacher has {} values, student {}", what,
                                 a, b.size()));
  }
}

}  // namespace

OracleTeacher::OracleTeacher(int C, int d_f, double margin)
    : C_(C), d_f_(d_f), margin_(margin) {
  if (C < 1 || d_f < 1) throw ConfigError("teacher needs C >= 1 and d_f >= 1");
  for (int c = 0; c < C; ++c) {
    Rng rng(MixSeed(kTeacherSeed, static_cast<uint64_t>(c)));
    std::vector<double> t(d_f);
    for (auto& v : t) v = 0.5 * rng.Normal();
    templates_.push_back(std::move(t));
  }
}

TeacherOutput OracleTeacher::operator()(const SegmentSpec& spec) const {
  if (spec.label < 0 || spec.label >= C_) {
    throw DataError(
        fmt::format("teacher got label {} outside [0,{})", spec.label, C_));
  }
  TeacherOutput out;
  const double shift = C_ > 1 ? 0.1 * (2.0 * spec.label / (C_ - 1) - 1.0) : 0.0;
  out.feature = templates_[spec.label];
  for (auto& v : out.feature) v += shift;
  out.logits.assign(C_, 0.0);
  out.logits[spec.label] = margin_;
  return out;
}

TeacherOutput OracleTeacher::Regression(const SegmentSpec& spec,
                                        int d_b) const {
  TeacherOutput out = (*this)(spec);
  out.logits = world::BehaviorCode(spec.label, d_b);
  const double norm = std::sqrt(static_cast<double>(d_b));
  for (auto& v : out.logits) v /= norm;
  return out;
}

void DistillConfig::Validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("distill.alpha must lie in [0, 1]");
  }
  if (!(beta >= 0.0)) throw ConfigError("distill.beta must be >= 0");
  if (!(tau_kd > 0.0)) throw ConfigError("distill.tau_kd must be > 0");
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"alpha", c.alpha}, {"beta", c.beta}, {"tau_kd", c.tau_kd}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.tau_kd = j.value("tau_kd", c.tau_kd);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("distill section: {}", e.what()));
  }
}

Var LossL1(const std::vector<double>& z_teacher, const Var& z_student) {
  CheckLength(z_teacher.size(), z_student, "loss_l1");
  return ag::Sum(ag::Abs(ag::Sub(z_student, Var::Constant(z_teacher))));
}

Var LossKD(const std::vector<double>& teacher_logits, const Var& student_logits,
           double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau_kd must be > 0");
  CheckLength(teacher_logits.size(), student_logits, "loss_kd");
  const int n = static_cast<int>(teacher_logits.size());
  // Teacher side is constant: tempered distribution and its log.
  double mx = teacher_logits[0];
  for (double v : teacher_logits) mx = std::max(mx, v);
  std::vector<double> p(n), logp(n);
  double z = 0.0;
  for (int i = 0; i < n; ++i) z += std::exp((teacher_logits[i] - mx) / tau);
  for (int i = 0; i < n; ++i) {
    logp[i] = (teacher_logits[i] - mx) / tau - std::log(z);
    p[i] = std::exp(logp[i]);
  }
  Var logq = ag::LogSoftmax(ag::Scale(student_logits, 1.0 / tau));
  Var diff = ag::Sub(Var::Constant(logp), logq);
  return ag::Scale(ag::Sum(ag::Mul(Var::Constant(p), diff)), tau * tau);
}

Var LossGT(int label, const Var& student_logits) {
  if (label < 0 || label >= student_logits.size()) {
    throw DataError(
        fmt::format("label {} outside [0,{})", label, student_logits.size()));
  }
  Var ls = ag::LogSoftmax(student_logits);
  return ag::Neg(ag::Slice(ls, label, label + 1));
}

Var LossMSE(const std::vector<double>& target, const Var& output) {
  CheckLength(target.size(), output, "loss_mse");
  return ag::Mean(ag::Square(ag::Sub(output, Var::Constant(target))));
}

Var LossCFD(const Var& kd, const Var& gt, const Var& l1,
            const DistillConfig& cfg) {
  return ag::Add(
      ag::Add(ag::Scale(kd, cfg.alpha), ag::Scale(gt, 1.0 - cfg.alpha)),
      ag::Scale(l1, cfg.beta));
}

double LossCFD(double kd, double gt, double l1, const DistillConfig& cfg) {
  return cfg.alpha * kd + (1.0 - cfg.alpha) * gt + cfg.beta * l1;
}

Var BatchMean(std::span<const Var> losses) {
  if (losses.empty()) throw DataError("batch is empty");
  return ag::Scale(ag::Sum(ag::Concat(losses)), 1.0 / losses.size());
}

}  // namespace adaptsense
