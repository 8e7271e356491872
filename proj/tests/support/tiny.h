#ifndef ADAPTSENSE_TESTS_TINY_H_
#define ADAPTSENSE_TESTS_TINY_H_

// Tiny models and data for gradient checks and fast unit tests.

#include <filesystem>
#include <string>

#include "adaptsense/distillation.h"
#include "adaptsense/encoders.h"
#include "adaptsense/policy.h"
#include "adaptsense/synthetic.h"
#include "adaptsense/training.h"

namespace adaptsense::testing {

inline DatasetConfig TinyData(int n_episodes = 10) {
  DatasetConfig c;
  c.n_episodes = n_episodes;
  c.T = 2;
  c.F = 2;
  c.H = 8;
  c.W = 8;
  c.n_ch = 2;
  c.L = 128;
  c.L_b = 8;
  c.d_b = 3;
  c.C = 4;
  c.seed = 11;
  return c;
}

inline StudentConfig TinyStudent(const DatasetConfig& data,
                                 TaskKind task = TaskKind::kModalitySelect) {
  StudentConfig s = StudentConfig::For(task, data);
  s.d_f = 6;
  s.width1 = 2;
  s.width2 = 2;
  s.visual_width2 = 3;
  s.spectro = {16, 8};
  return s;
}

inline PolicyConfig TinyPolicy() {
  PolicyConfig p;
  p.d_h = 5;
  p.width1 = 2;
  p.width2 = 2;
  p.d_p = 3;
  p.coarse = {16, 16};
  p.preview.step = 8;
  p.preview.d_model = 4;
  p.preview.heads = 2;
  p.preview.layers = 2;
  p.preview.conv_filters = 2;
  p.preview.bilstm_hidden = 2;
  p.preview.final_hidden = 3;
  return p;
}

// A fresh scratch directory under the system temp dir.
inline std::string ScratchDir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / ("adaptsense_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace adaptsense::testing

#endif  // ADAPTSENSE_TESTS_TINY_H_
