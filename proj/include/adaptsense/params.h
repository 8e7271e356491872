#ifndef ADAPTSENSE_PARAMS_H_
#define ADAPTSENSE_PARAMS_H_

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adaptsense/rng.h"
#include "adaptsense/tensor.h"

namespace adaptsense {

// Ordered, named collection of trainable leaves. Vars are handles: copies
// returned by Get() alias the stored tensor.
class ParamSet {
 public:
  ag::Var Add(const std::string& name, ag::Shape shape,
              std::vector<double> init);
  // He-uniform initialization with the given fan-in.
  ag::Var AddUniform(const std::string& name, ag::Shape shape, int fan_in,
                     Rng& rng);
  // Variance-preserving uniform initialization, bound sqrt(3 / fan_in), for
  // layers not followed by a rectifier.
  ag::Var AddLecun(const std::string& name, ag::Shape shape, int fan_in,
                   Rng& rng);
  ag::Var AddConstant(const std::string& name, ag::Shape shape, double value);

  ag::Var Get(const std::string& name) const;
  bool Contains(const std::string& name) const;

  const std::vector<std::pair<std::string, ag::Var>>& entries() const {
    return entries_;
  }
  size_t NumScalars() const;

  void ZeroGrad();
  void SetRequiresGrad(bool on);

  std::vector<double> Flatten() const;
  void Assign(std::span<const double> flat);
  // Deep copy with fresh nodes.
  ParamSet Clone() const;
  // Appends every entry of `other` under `prefix`, aliasing its tensors.
  void Merge(const std::string& prefix, const ParamSet& other);

  // FNV-1a over the raw bytes of every value, in entry order.
  uint64_t Checksum() const;

 private:
  std::vector<std::pair<std::string, ag::Var>> entries_;
};

// Plain SGD with heavy-ball momentum.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void Step(ParamSet& params);
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

// Checkpoints: a blob of concatenated little-endian float64 values plus a
// JSON manifest ("adaptsense.ckpt.v1") at `path + ".json"`.
void SaveCheckpoint(const std::string& path, const ParamSet& params);
void LoadCheckpoint(const std::string& path, ParamSet& params);

}  // namespace adaptsense

#endif  // ADAPTSENSE_PARAMS_H_
