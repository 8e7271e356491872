#ifndef ADAPTSENSE_PREVIEW_H_
#define ADAPTSENSE_PREVIEW_H_

// Audio previewing for frame selection: a saliency score per frame-aligned
// audio window, from parallel attention and recurrent-convolution stacks
// coupled by learnable handshake scalars.

#include <vector>

#include <json.hpp>

#include "adaptsense/layers.h"
#include "adaptsense/params.h"
#include "adaptsense/tensor.h"

namespace adaptsense {

struct PreviewConfig {
  int step = 16;  // samples per analysis step (a 16-point DFT)
  int d_model = 16;
  int heads = 8;
  int layers = 3;
  int conv_filters = 4;
  int bilstm_hidden = 8;
  int final_hidden = 16;
  double rho_init = 0.5;
  double delta = 0.5;
  int n_max = 1;

  // Widths used by the full-size model.
  static PreviewConfig PaperScale();
  void Validate() const;
  int StepFeatures(int n_ch) const { return n_ch * (step / 2 + 1); }
};

void to_json(nlohmann::json& j, const PreviewConfig& c);
void from_json(const nlohmann::json& j, PreviewConfig& c);

// Per-window step features, n_windows x [steps, n_ch * (step/2 + 1)]:
// log1p(|DFT|^2 / step) of every channel for each step. Windows are L /
// n_windows samples long.
std::vector<ag::Var> PreviewFeatures(const float* audio, int n_ch, int L,
                                     int n_windows, const PreviewConfig& cfg);

struct RcnnParams {
  ag::Var conv_w, conv_b, bn_gamma, bn_beta;
  LstmParams fwd, bwd;
  ag::Var out_w, out_b;
};

struct PreviewOutput {
  ag::Var logit;     // [n_windows], pre-sigmoid
  ag::Var saliency;  // [n_windows], in [0, 1]
};

class PreviewNet {
 public:
  PreviewNet(const PreviewConfig& cfg, int n_ch, ParamSet& ps, Rng& rng);

  PreviewOutput Forward(const std::vector<ag::Var>& windows) const;
  // One recurrent-convolution layer, [S, D] -> [S, D].
  ag::Var Rcnn(const ag::Var& x, int layer) const;
  ag::Var Embed(const ag::Var& steps) const;
  const PreviewConfig& config() const { return cfg_; }
  ag::Var rho() const { return rho_; }

 private:
  ag::Var Window(const ag::Var& steps) const;

  PreviewConfig cfg_;
  ag::Var embed_w_, embed_b_;
  std::vector<MhaParams> mha_;
  std::vector<RcnnParams> rcnn_;
  ag::Var rho_;
  LstmParams final_;
  ag::Var out_w_, out_b_;
};

// Saliency of each of `n_windows` frame-aligned windows of raw audio.
// Throws DataError when a window is shorter than one analysis step.
std::vector<double> AudioPreviewSaliency(const float* audio, int n_ch, int L,
                                         int n_windows, const PreviewNet& net);

// Windows of `w` consecutive saliency values whose peak exceeds delta are
// event windows; adjacent event windows merge into one region. Returns the
// argmax index of each region (earliest on ties), keeping the n_max regions
// with the highest peaks (earliest region on ties), in ascending order.
std::vector<int> SelectSalientFrames(const std::vector<double>& saliency,
                                     double delta, int w, int n_max);

// history followed by `frame`; frame must exceed every index in history.
std::vector<int> AssemblePartialClip(const std::vector<int>& history,
                                     int frame);

}  // namespace adaptsense

#endif  // ADAPTSENSE_PREVIEW_H_
