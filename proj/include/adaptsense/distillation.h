#ifndef ADAPTSENSE_DISTILLATION_H_
#define ADAPTSENSE_DISTILLATION_H_

#include <json.hpp>
#include <span>
#include <vector>

#include "adaptsense/synthetic.h"
#include "adaptsense/tensor.h"

namespace adaptsense {

struct TeacherOutput {
  std::vector<double> feature;  // z_Omega, length d_f
  std::vector<double> logits;   // length C (or d_b for regression)
};

// Stand-in for a heavy video model: a fixed per-class feature template plus a
// small label-dependent shift, and one-hot logits scaled by `margin`.
class OracleTeacher {
 public:
  OracleTeacher(int C, int d_f, double margin = 5.0);

  TeacherOutput operator()(const SegmentSpec& spec) const;
  // Regression variant: the output is the unit behavior code of the label.
  TeacherOutput Regression(const SegmentSpec& spec, int d_b) const;

  int C() const { return C_; }
  int d_f() const { return d_f_; }

 private:
  int C_;
  int d_f_;
  double margin_;
  std::vector<std::vector<double>> templates_;
};

struct DistillConfig {
  double alpha = 0.90;
  double beta = 0.85;
  double tau_kd = 10.0;

  void Validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

// Per-sample losses. Batch reduction is the mean, see BatchMean().
ag::Var LossL1(const std::vector<double>& z_teacher, const ag::Var& z_student);
ag::Var LossKD(const std::vector<double>& teacher_logits,
               const ag::Var& student_logits, double tau);
ag::Var LossGT(int label, const ag::Var& student_logits);
// Mean squared error over the output dimensions (regression head).
ag::Var LossMSE(const std::vector<double>& target, const ag::Var& output);
ag::Var LossCFD(const ag::Var& kd, const ag::Var& gt, const ag::Var& l1,
                const DistillConfig& cfg);

double LossCFD(double kd, double gt, double l1, const DistillConfig& cfg);

ag::Var BatchMean(std::span<const ag::Var> losses);

// Named scalar components of one step or epoch.
struct LossBreakdown {
  double l1 = 0.0;
  double kd = 0.0;
  double gt = 0.0;
  double phi = 0.0;
  double policy = 0.0;
  double theta = 0.0;
};

}  // namespace adaptsense

#endif  // ADAPTSENSE_DISTILLATION_H_
