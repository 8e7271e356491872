#include "adaptsense/preview.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "adaptsense/errors.h"

namespace adaptsense {

using ag::Var;

PreviewConfig PreviewConfig::PaperScale() {
  PreviewConfig c;
  c.d_model = 128;
  c.conv_filters = 64;
  c.bilstm_hidden = 128;
  c.final_hidden = 256;
  return c;
}

void PreviewConfig::Validate() const {
  if (step < 2) throw ConfigError("preview.step must be >= 2");
  if (layers < 1) throw ConfigError("preview.layers must be >= 1");
  if (heads < 1 || d_model % heads != 0) {
    throw ConfigError("preview.d_model must be a multiple of preview.heads");
  }
  if (conv_filters < 1 || bilstm_hidden < 1 || final_hidden < 1) {
    throw ConfigError("preview widths must be >= 1");
  }
  if (!std::isfinite(rho_init)) throw ConfigError("preview.rho_init");
  if (!(delta >= 0.0)) throw ConfigError("preview.delta must be >= 0");
  if (n_max < 1) throw ConfigError("preview.n_max must be >= 1");
}

void to_json(nlohmann::json& j, const PreviewConfig& c) {
  j = {{"step", c.step},
       {"d_model", c.d_model},
       {"heads", c.heads},
       {"layers", c.layers},
       {"conv_filters", c.conv_filters},
       {"bilstm_hidden", c.bilstm_hidden},
       {"final_hidden", c.final_hidden},
       {"rho_init", c.rho_init},
       {"delta", c.delta},
       {"n_max", c.n_max}};
}

void from_json(const nlohmann::json& j, PreviewConfig& c) {
  try {
    c.step = j.value("step", c.step);
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.conv_filters = j.value("conv_filters", c.conv_filters);
    c.bilstm_hidden = j.value("bilstm_hidden", c.bilstm_hidden);
    c.final_hidden = j.value("final_hidden", c.final_hidden);
    c.rho_init = j.value("rho_init", c.rho_init);
    c.delta = j.value("delta", c.delta);
    c.n_max = j.value("n_max", c.n_max);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("preview section: {}", e.what()));
  }
}

std::vector<Var> PreviewFeatures(const float* audio, int n_ch, int L,
                                 int n_windows, const PreviewConfig& cfg) {
  const int win = n_windows > 0 ? L / n_windows : 0;
  const int steps = win / cfg.step;
  if (steps < 1) {
    throw DataError(fmt::format(
        "audio of {} samples cannot fill {} windows of one {}-sample step", L,
        n_windows, cfg.step));
  }
  const int nb = cfg.step / 2 + 1;
  const int n = cfg.step;
  std::vector<double> cs(static_cast<size_t>(nb) * n), sn(cs.size());
  for (int k = 0; k < nb; ++k)
    for (int i = 0; i < n; ++i) {
      const double a = 2.0 * std::numbers::pi * k * i / n;
      cs[k * n + i] = std::cos(a);
      sn[k * n + i] = std::sin(a);
    }
  std::vector<Var> out;
  for (int w = 0; w < n_windows; ++w) {
    std::vector<double> f(static_cast<size_t>(steps) * n_ch * nb);
    for (int s = 0; s < steps; ++s)
      for (int c = 0; c < n_ch; ++c) {
        const float* x =
            audio + static_cast<size_t>(c) * L + w * win + s * cfg.step;
        for (int k = 0; k < nb; ++k) {
          double re = 0.0, im = 0.0;
          for (int i = 0; i < n; ++i) {
            re += x[i] * cs[k * n + i];
            im -= x[i] * sn[k * n + i];
          }
          f[(static_cast<size_t>(s) * n_ch + c) * nb + k] =
              std::log1p((re * re + im * im) / n);
        }
      }
    out.push_back(Var::Constant(std::move(f), {steps, n_ch * nb}));
  }
  return out;
}

PreviewNet::PreviewNet(const PreviewConfig& cfg, int n_ch, ParamSet& ps,
                       Rng& rng)
    : cfg_(cfg) {
  cfg.Validate();
  const int D = cfg.d_model;
  const int in = cfg.StepFeatures(n_ch);
  embed_w_ = ps.AddLecun("preview.embed.w", {D, in}, in, rng);
  embed_b_ = ps.AddConstant("preview.embed.b", {D}, 0.0);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string n = fmt::format("preview.rcnn{}", l);
    mha_.push_back(AddMha(ps, fmt::format("preview.mha{}", l), D, cfg.heads, rng));
    RcnnParams r;
    r.conv_w = ps.AddUniform(n + ".conv.w", {cfg.conv_filters, 1, 3, 3}, 9, rng);
    r.conv_b = ps.AddConstant(n + ".conv.b", {cfg.conv_filters}, 0.0);
    r.bn_gamma = ps.AddConstant(n + ".bn.gamma", {cfg.conv_filters}, 1.0);
    r.bn_beta = ps.AddConstant(n + ".bn.beta", {cfg.conv_filters}, 0.0);
    r.fwd = AddLstm(ps, n + ".fwd", cfg.conv_filters, cfg.bilstm_hidden, rng);
    r.bwd = AddLstm(ps, n + ".bwd", cfg.conv_filters, cfg.bilstm_hidden, rng);
    r.out_w = ps.AddLecun(n + ".out.w", {D, 2 * cfg.bilstm_hidden},
                            2 * cfg.bilstm_hidden, rng);
    r.out_b = ps.AddConstant(n + ".out.b", {D}, 0.0);
    rcnn_.push_back(r);
  }
  rho_ = ps.AddConstant("preview.rho", {cfg.layers}, cfg.rho_init);
  final_ = AddLstm(ps, "preview.final", D, cfg.final_hidden, rng);
  out_w_ = ps.AddLecun("preview.out.w", {1, cfg.final_hidden},
                         cfg.final_hidden, rng);
  out_b_ = ps.AddConstant("preview.out.b", {1}, 0.0);
}

Var PreviewNet::Embed(const Var& steps) const {
  return Dense(steps, embed_w_, embed_b_);
}

Var PreviewNet::Rcnn(const Var& x, int layer) const {
  const RcnnParams& r = rcnn_.at(layer);
  const int S = x.dim(0), D = x.dim(1);
  Var c = ag::Conv2d(ag::Reshape(x, {1, S, D}), r.conv_w, r.conv_b);
  c = ag::Relu(ag::BatchNorm(c, r.bn_gamma, r.bn_beta));
  Var seq = ag::Transpose(ag::MeanLastAxis(c));  // [S, filters]
  return Dense(BiLstm(seq, r.fwd, r.bwd), r.out_w, r.out_b);
}

Var PreviewNet::Window(const Var& steps) const {
  Var e = Embed(steps);
  Var mh = e, rc = e;
  for (int l = 0; l < cfg_.layers; ++l) {
    mh = ag::Add(mh, MultiHeadAttention(mh, mha_[l]));
    Var rho = ag::Slice(rho_, l, l + 1);
    rc = Rcnn(ag::Add(rc, ag::MulScalar(mh, rho)), l);
  }
  Var h = LstmSequence(rc, final_, false);
  Var last = ag::Row(h, h.dim(0) - 1);
  return ag::Linear(last, out_w_, out_b_);
}

PreviewOutput PreviewNet::Forward(const std::vector<Var>& windows) const {
  std::vector<Var> logits;
  for (const Var& w : windows) logits.push_back(Window(w));
  Var logit = ag::Concat(logits);
  return {logit, ag::Sigmoid(logit)};
}

std::vector<double> AudioPreviewSaliency(const float* audio, int n_ch, int L,
                                         int n_windows, const PreviewNet& net) {
  return net.Forward(PreviewFeatures(audio, n_ch, L, n_windows, net.config()))
      .saliency.value();
}

std::vector<int> SelectSalientFrames(const std::vector<double>& saliency,
                                     double delta, int w, int n_max) {
  if (n_max < 1) throw ContractError("select_salient_frames needs n_max >= 1");
  if (w < 1) throw ContractError("select_salient_frames needs w >= 1");
  const int n = static_cast<int>(saliency.size());
  const int n_win = (n + w - 1) / w;
  struct Region {
    int start;
    int arg;
    double peak;
  };
  std::vector<Region> regions;
  for (int i = 0; i < n_win;) {
    auto peak_of = [&](int win) {
      double p = saliency[win * w];
      for (int s = win * w; s < std::min(n, (win + 1) * w); ++s)
        p = std::max(p, saliency[s]);
      return p;
    };
    if (!(peak_of(i) > delta)) {
      ++i;
      continue;
    }
    int j = i;
    while (j + 1 < n_win && peak_of(j + 1) > delta) ++j;
    Region r{i * w, i * w, saliency[i * w]};
    for (int s = i * w; s < std::min(n, (j + 1) * w); ++s) {
      if (saliency[s] > r.peak) {
        r.peak = saliency[s];
        r.arg = s;
      }
    }
    regions.push_back(r);
    i = j + 1;
  }
  std::stable_sort(regions.begin(), regions.end(),
                   [](const Region& a, const Region& b) {
                     return a.peak > b.peak;
                   });
  if (static_cast<int>(regions.size()) > n_max) regions.resize(n_max);
  std::vector<int> out;
  for (const auto& r : regions) out.push_back(r.arg);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> AssemblePartialClip(const std::vector<int>& history,
                                     int frame) {
  if (!history.empty() && frame <= history.back()) {
    throw ContractError(fmt::format(
        "frame {} does not follow the clip's last frame {}", frame,
        history.back()));
  }
  std::vector<int> out = history;
  out.push_back(frame);
  return out;
}

}  // namespace adaptsense
