#include "adaptsense/efficiency.h"

#include <fmt/format.h>

#include <fstream>
#include <map>
#include <numeric>

#include "adaptsense/errors.h"

namespace adaptsense {

namespace {

constexpr std::pair<LayerKind, const char*> kKindNames[] = {
    {LayerKind::kConv1d, "conv1d"},
    {LayerKind::kConv2d, "conv2d"},
    {LayerKind::kPool, "pool"},
    {LayerKind::kRectify, "rectify"},
    {LayerKind::kLinear, "linear"},
    {LayerKind::kRecurrentCell, "recurrent_cell"},
    {LayerKind::kAttention, "attention"},
    {LayerKind::kBatchNorm, "batchnorm"},
    {LayerKind::kAdd, "add"},
    {LayerKind::kWeightedSum, "weighted_sum"},
};

int64_t Product(const std::vector<int64_t>& s, size_t from = 0,
                size_t to = std::string::npos) {
  int64_t n = 1;
  for (size_t i = from; i < std::min(to, s.size()); ++i) n *= s[i];
  return n;
}

std::string Str(const std::vector<int64_t>& s) {
  return fmt::format("[{}]", fmt::join(s, ","));
}

[[noreturn]] void Bad(const Layer& l, const std::string& why) {
  throw GraphError(fmt::format("layer '{}' ({}): {}", l.name,
                               LayerKindName(l.kind), why));
}

void Need(bool ok, const Layer& l, const std::string& why) {
  if (!ok) Bad(l, why);
}

int64_t NumInputs(const Layer& l) {
  return l.inputs ? static_cast<int64_t>(l.inputs->size()) : 1;
}

void CheckKind(const Layer& l) {
  const auto& in = l.in_shape;
  const auto& out = l.out_shape;
  Need(!in.empty() && !out.empty(), l, "in_shape and out_shape are required");
  for (auto d : in) Need(d >= 1, l, "in_shape dims must be >= 1");
  for (auto d : out) Need(d >= 1, l, "out_shape dims must be >= 1");
  Need(l.repeat >= 1, l, "repeat must be >= 1");
  switch (l.kind) {
    case LayerKind::kConv2d:
      Need(in.size() == 3 && out.size() == 3, l, "needs [C,H,W] shapes");
      Need(l.kernel.size() == 2, l, "needs a 2-entry kernel");
      Need(in[1] == out[1] && in[2] == out[2], l,
           fmt::format("same-padded output must keep {}x{}, got {}", in[1],
                       in[2], Str(out)));
      break;
    case LayerKind::kConv1d:
      Need(in.size() == 2 && out.size() == 2, l, "needs [C,L] shapes");
      Need(l.kernel.size() == 1, l, "needs a 1-entry kernel");
      Need(in[1] == out[1], l, "same-padded output must keep its length");
      break;
    case LayerKind::kPool: {
      Need(in.size() == out.size() && in.size() >= 2, l,
           "needs matching ranks >= 2");
      Need(out[0] == in[0], l, "pooling keeps the channel count");
      for (size_t i = 1; i < in.size(); ++i) {
        const int64_t k =
            l.kernel.size() == 1 ? l.kernel[0] : l.kernel.at(i - 1);
        Need(k >= 1 && out[i] == in[i] / k, l,
             fmt::format("{} pooled by {} is not {}", Str(in),
                         Str(l.kernel), Str(out)));
      }
      Need(l.kernel.size() == 1 || l.kernel.size() == in.size() - 1, l,
           "kernel needs 1 or rank-1 entries");
      break;
    }
    case LayerKind::kRectify:
    case LayerKind::kBatchNorm:
    case LayerKind::kAdd:
    case LayerKind::kWeightedSum:
      Need(in == out, l, fmt::format("{} must equal {}", Str(out), Str(in)));
      break;
    case LayerKind::kLinear:
      Need(in.size() == out.size(), l, "in and out ranks differ");
      Need(Product(in, 0, in.size() - 1) == Product(out, 0, out.size() - 1),
           l, "leading dimensions differ");
      break;
    case LayerKind::kRecurrentCell:
      Need(in.size() == 2 && out.size() == 2, l, "needs [S,D] shapes");
      Need(l.hidden >= 1 && out[1] == l.hidden && out[0] == in[0], l,
           fmt::format("output must be [{},{}]", in[0], l.hidden));
      break;
    case LayerKind::kAttention:
      Need(in.size() == 2 && in == out, l, "needs equal [S,D] shapes");
      Need(l.heads >= 1 && in[1] % l.heads == 0, l,
           "width must be divisible by heads");
      break;
  }
}

}  // namespace

const char* LayerKindName(LayerKind k) {
  for (auto [kind, name] : kKindNames)
    if (kind == k) return name;
  return "?";
}

LayerKind LayerKindFromName(const std::string& name) {
  for (auto [kind, n] : kKindNames)
    if (name == n) return kind;
  throw GraphError(fmt::format("unknown layer kind '{}'", name));
}

int64_t LayerOutputElements(const Layer& l) { return Product(l.out_shape); }

int64_t LayerMacs(const Layer& l) {
  const auto& in = l.in_shape;
  const auto& out = l.out_shape;
  int64_t m = 0;
  switch (l.kind) {
    case LayerKind::kConv2d:
      m = out[1] * out[2] * out[0] * in[0] * l.kernel[0] * l.kernel[1];
      break;
    case LayerKind::kConv1d:
      m = out[1] * out[0] * in[0] * l.kernel[0];
      break;
    case LayerKind::kLinear:
      m = Product(in, 0, in.size() - 1) * in.back() * out.back();
      break;
    case LayerKind::kRecurrentCell:
      m = 4 * l.hidden * (in[1] + l.hidden) * in[0];
      break;
    case LayerKind::kAttention:
      m = 4 * in[0] * in[1] * in[1] + 2 * in[0] * in[0] * in[1];
      break;
    case LayerKind::kBatchNorm:
      m = Product(out);
      break;
    case LayerKind::kWeightedSum:
      m = Product(out) * (l.weights >= 0 ? l.weights : NumInputs(l));
      break;
    case LayerKind::kPool:
    case LayerKind::kRectify:
    case LayerKind::kAdd:
      m = 0;
      break;
  }
  return m * l.repeat;
}

int64_t LayerParams(const Layer& l) {
  if (!l.trainable || !l.share.empty()) return 0;
  const auto& in = l.in_shape;
  const auto& out = l.out_shape;
  switch (l.kind) {
    case LayerKind::kConv2d:
      return out[0] * in[0] * l.kernel[0] * l.kernel[1] + (l.bias ? out[0] : 0);
    case LayerKind::kConv1d:
      return out[0] * in[0] * l.kernel[0] + (l.bias ? out[0] : 0);
    case LayerKind::kLinear:
      return in.back() * out.back() + (l.bias ? out.back() : 0);
    case LayerKind::kRecurrentCell:
      return 4 * l.hidden * (in[1] + l.hidden) + (l.bias ? 4 * l.hidden : 0);
    case LayerKind::kAttention:
      return 4 * in[1] * in[1] + (l.bias ? 4 * in[1] : 0);
    case LayerKind::kBatchNorm:
      return 2 * in[0];
    case LayerKind::kAdd:
      return l.bias ? out[0] : 0;
    case LayerKind::kWeightedSum:
      return l.weights >= 0 ? l.weights : NumInputs(l);
    case LayerKind::kPool:
    case LayerKind::kRectify:
      return 0;
  }
  return 0;
}

void LayerGraph::Validate(int K) const {
  std::map<std::string, const Layer*> seen;
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    Need(!l.name.empty(), l, "layer name is empty");
    Need(!seen.count(l.name), l, "duplicate layer name");
    CheckKind(l);
    if (l.gate) {
      Need(!l.gate->empty(), l, "gate list is empty (use null)");
      for (int a : *l.gate) {
        Need(a >= 0 && a < K, l,
             fmt::format("gate {} is not an action index below {}", a, K));
      }
    }
    std::vector<const Layer*> producers;
    if (!l.inputs) {
      if (i > 0) producers.push_back(&layers[i - 1]);
    } else {
      for (const auto& n : *l.inputs) {
        auto it = seen.find(n);
        Need(it != seen.end(), l, fmt::format("unknown input '{}'", n));
        producers.push_back(it->second);
      }
    }
    const int64_t need = Product(l.in_shape);
    if (producers.size() == 1 || l.kind == LayerKind::kAdd ||
        l.kind == LayerKind::kWeightedSum) {
      for (const Layer* p : producers) {
        Need(LayerOutputElements(*p) == need, l,
             fmt::format("input '{}' emits {} values, {} expected", p->name,
                         LayerOutputElements(*p), Str(l.in_shape)));
      }
    } else if (!producers.empty()) {
      int64_t total = 0;
      for (const Layer* p : producers) total += LayerOutputElements(*p);
      Need(total == need, l,
           fmt::format("concatenated inputs emit {} values, {} expected",
                       total, Str(l.in_shape)));
    }
    if (!l.share.empty()) {
      auto it = seen.find(l.share);
      Need(it != seen.end(), l, fmt::format("shares unknown '{}'", l.share));
      Need(it->second->kind == l.kind && it->second->in_shape == l.in_shape &&
               it->second->out_shape == l.out_shape,
           l, fmt::format("cannot share parameters of '{}'", l.share));
    }
    seen[l.name] = &l;
  }
}

bool LayerGraph::Gated(const Layer& l, const std::vector<int>* row) const {
  if (!l.gate || row == nullptr) return true;
  for (int a : *l.gate)
    if (a < static_cast<int>(row->size()) && (*row)[a] != 0) return true;
  return false;
}

int64_t CountMacs(const LayerGraph& g, const std::vector<int>* row) {
  int64_t n = 0;
  for (const auto& l : g.layers)
    if (g.Gated(l, row)) n += LayerMacs(l);
  return n;
}

int64_t CountParams(const LayerGraph& g) {
  int64_t n = 0;
  for (const auto& l : g.layers) n += LayerParams(l);
  return n;
}

int64_t ActivationBytes(const LayerGraph& g, const std::vector<int>* row) {
  int64_t n = 0;
  for (const auto& l : g.layers)
    if (g.Gated(l, row)) n += LayerOutputElements(l) * l.repeat * 4;
  return n;
}

void to_json(nlohmann::json& j, const LayerGraph& g) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : g.layers) {
    nlohmann::json o = {{"name", l.name},
                        {"kind", LayerKindName(l.kind)},
                        {"in_shape", l.in_shape},
                        {"out_shape", l.out_shape}};
    if (l.inputs) o["inputs"] = *l.inputs;
    if (!l.kernel.empty()) o["kernel"] = l.kernel;
    o["gate"] = l.gate ? nlohmann::json(*l.gate) : nlohmann::json(nullptr);
    if (l.repeat != 1) o["repeat"] = l.repeat;
    if (l.hidden) o["hidden"] = l.hidden;
    if (l.heads) o["heads"] = l.heads;
    if (l.weights >= 0) o["weights"] = l.weights;
    o["bias"] = l.bias;
    if (!l.trainable) o["trainable"] = false;
    if (!l.share.empty()) o["share"] = l.share;
    layers.push_back(std::move(o));
  }
  j = {{"format", "adaptsense.graph.v1"}, {"name", g.name}, {"layers", layers}};
}

void from_json(const nlohmann::json& j, LayerGraph& g) {
  try {
    if (j.value("format", "") != "adaptsense.graph.v1") {
      throw GraphError("graph description lacks format adaptsense.graph.v1");
    }
    g.name = j.value("name", "");
    g.layers.clear();
    for (const auto& o : j.at("layers")) {
      Layer l;
      l.name = o.at("name").get<std::string>();
      l.kind = LayerKindFromName(o.at("kind").get<std::string>());
      if (o.contains("inputs"))
        l.inputs = o.at("inputs").get<std::vector<std::string>>();
      l.in_shape = o.at("in_shape").get<std::vector<int64_t>>();
      l.out_shape = o.at("out_shape").get<std::vector<int64_t>>();
      l.kernel = o.value("kernel", std::vector<int64_t>{});
      if (o.contains("gate") && !o.at("gate").is_null()) {
        l.gate = o.at("gate").is_array() ? o.at("gate").get<std::vector<int>>()
                                         : std::vector<int>{o.at("gate").get<int>()};
      }
      l.repeat = o.value("repeat", int64_t{1});
      l.hidden = o.value("hidden", int64_t{0});
      l.heads = o.value("heads", int64_t{0});
      l.weights = o.value("weights", int64_t{-1});
      l.bias = o.value("bias", l.kind != LayerKind::kAdd);
      l.trainable = o.value("trainable", true);
      l.share = o.value("share", "");
      g.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw GraphError(fmt::format("malformed graph description: {}", e.what()));
  }
}

LayerGraph LoadGraph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read graph {}", path));
  try {
    return nlohmann::json::parse(in).get<LayerGraph>();
  } catch (const nlohmann::json::parse_error& e) {
    throw GraphError(fmt::format("{}: {}", path, e.what()));
  }
}

void SaveGraph(const LayerGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write graph {}", path));
  out << nlohmann::json(g).dump(1) << "\n";
}

void EnergyCoefficients::Validate() const {
  if (!(joules_per_mac >= 0.0) || !(joules_per_byte >= 0.0)) {
    throw ConfigError("energy coefficients must be >= 0");
  }
  for (double c : joules_per_sensor_second)
    if (!(c >= 0.0)) throw ConfigError("energy coefficients must be >= 0");
}

void to_json(nlohmann::json& j, const EnergyConfig& c) {
  j = {{"joules_per_mac", c.coeffs.joules_per_mac},
       {"joules_per_byte", c.coeffs.joules_per_byte},
       {"joules_per_sensor_second", c.coeffs.joules_per_sensor_second},
       {"segment_seconds", c.segment_seconds},
       {"sensor_floor_seconds", c.sensor_floor_seconds}};
}

void from_json(const nlohmann::json& j, EnergyConfig& c) {
  try {
    c.coeffs.joules_per_mac = j.value("joules_per_mac", c.coeffs.joules_per_mac);
    c.coeffs.joules_per_byte =
        j.value("joules_per_byte", c.coeffs.joules_per_byte);
    if (j.contains("joules_per_sensor_second")) {
      c.coeffs.joules_per_sensor_second =
          j.at("joules_per_sensor_second")
              .get<std::array<double, kNumModalities>>();
    }
    c.segment_seconds = j.value("segment_seconds", c.segment_seconds);
    c.sensor_floor_seconds =
        j.value("sensor_floor_seconds", c.sensor_floor_seconds);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("energy section: {}", e.what()));
  }
  c.coeffs.Validate();
  if (!(c.segment_seconds > 0.0) || !(c.sensor_floor_seconds >= 0.0)) {
    throw ConfigError("energy timing values must be positive");
  }
}

double EstimateEnergy(double macs, double bytes,
                      const std::array<double, kNumModalities>& seconds,
                      const EnergyCoefficients& c) {
  if (!(macs >= 0.0) || !(bytes >= 0.0)) {
    throw ContractError("estimate_energy: negative MACs or bytes");
  }
  c.Validate();
  double e = macs * c.joules_per_mac + bytes * c.joules_per_byte;
  for (int m = 0; m < kNumModalities; ++m) {
    if (!(seconds[m] >= 0.0)) {
      throw ContractError("estimate_energy: negative sensor time");
    }
    e += seconds[m] * c.joules_per_sensor_second[m];
  }
  return e;
}

std::array<double, kNumModalities> SensorSchedule(
    const DecisionTensor& U, const ActionSpace& space, const EnergyConfig& cfg,
    const std::array<bool, kNumModalities>& always_on) {
  std::array<double, kNumModalities> out{};
  for (int m = 0; m < kNumModalities; ++m) {
    int run = 0;
    auto flush = [&] {
      if (run > 0) {
        out[m] += std::max(run * cfg.segment_seconds, cfg.sensor_floor_seconds);
      }
      run = 0;
    };
    for (int t = 0; t < U.T; ++t) {
      bool active = always_on[m];
      for (int k = 0; k < U.K && !active; ++k)
        active = U.Hard(t, k) && static_cast<int>(space.SensorOf(k)) == m;
      if (active) {
        ++run;
      } else {
        flush();
      }
    }
    flush();
  }
  return out;
}

UsageReport MakeUsageReport(
    const std::vector<DecisionTensor>& traces, const LayerGraph& model,
    const LayerGraph* overhead,
    const std::array<bool, kNumModalities>& overhead_sensors,
    const ActionSpace& space, const EnergyConfig& cfg) {
  if (traces.empty()) throw DataError("usage_report: no decision traces");
  UsageReport r;
  r.fractions.assign(space.K, 0.0);
  std::vector<int64_t> counts(space.K, 0);
  const int64_t over_macs = overhead ? CountMacs(*overhead, nullptr) : 0;
  const int64_t over_bytes = overhead ? ActivationBytes(*overhead, nullptr) : 0;
  double energy = 0.0, macs = 0.0, bytes = 0.0;
  for (const auto& U : traces) {
    if (U.K != space.K) throw DataError("usage_report: trace width mismatch");
    int64_t ep_macs = 0, ep_bytes = 0;
    for (int t = 0; t < U.T; ++t) {
      const std::vector<int> row = U.HardRow(t);
      ep_macs += CountMacs(model, &row) + over_macs;
      ep_bytes += ActivationBytes(model, &row) + over_bytes;
      for (int k = 0; k < U.K; ++k) counts[k] += row[k];
    }
    auto sched = SensorSchedule(U, space, cfg, overhead_sensors);
    for (int m = 0; m < kNumModalities; ++m) r.sensor_seconds[m] += sched[m];
    energy += EstimateEnergy(static_cast<double>(ep_macs),
                             static_cast<double>(ep_bytes), sched, cfg.coeffs);
    macs += static_cast<double>(ep_macs);
    bytes += static_cast<double>(ep_bytes);
    r.segments += U.T;
  }
  if (r.segments == 0) throw DataError("usage_report: traces hold no segments");
  const double n = static_cast<double>(r.segments);
  for (int k = 0; k < space.K; ++k) r.fractions[k] = counts[k] / n;
  r.mean_macs = macs / n;
  r.mean_bytes = bytes / n;
  r.mean_energy = energy / n;
  return r;
}

// ---------------------------------------------------------------------------
// Graph builders.

namespace {

using Shape64 = std::vector<int64_t>;
using Gate = std::optional<std::vector<int>>;

class Builder {
 public:
  explicit Builder(std::string name) { g_.name = std::move(name); }

  Layer& Add(Layer l) {
    g_.layers.push_back(std::move(l));
    return g_.layers.back();
  }
  const Shape64& Last() const { return g_.layers.back().out_shape; }

  // Two (conv, pool, rectify) stages plus a projection, as in ConvStack.
  void ConvStack(const std::string& n, const Shape64& in, int w1, int w2,
                 int k, int pool, int out, const Gate& gate, int64_t repeat,
                 std::optional<std::vector<std::string>> inputs,
                 const std::string& share_prefix = "") {
    const bool is1d = in.size() == 2;
    const LayerKind conv = is1d ? LayerKind::kConv1d : LayerKind::kConv2d;
    const Shape64 kern = is1d ? Shape64{k} : Shape64{k, k};
    auto pooled = [&](Shape64 s) {
      for (size_t i = 1; i < s.size(); ++i) s[i] /= pool;
      return s;
    };
    auto share = [&](const char* tag) {
      return share_prefix.empty() ? std::string() : share_prefix + tag;
    };
    Shape64 s1 = in;
    s1[0] = w1;
    Layer c1{n + ".conv1", conv, std::move(inputs), in, s1, kern, gate, repeat};
    c1.share = share(".conv1");
    Add(c1);
    Add({n + ".pool1", LayerKind::kPool, std::nullopt, s1, pooled(s1),
         {pool}, gate, repeat});
    Add({n + ".relu1", LayerKind::kRectify, std::nullopt, Last(), Last(), {},
         gate, repeat});
    Shape64 s2 = Last();
    s2[0] = w2;
    Layer c2{n + ".conv2", conv, std::nullopt, Last(), s2, kern, gate, repeat};
    c2.share = share(".conv2");
    Add(c2);
    Add({n + ".pool2", LayerKind::kPool, std::nullopt, s2, pooled(s2),
         {pool}, gate, repeat});
    Add({n + ".relu2", LayerKind::kRectify, std::nullopt, Last(), Last(), {},
         gate, repeat});
    Layer p{n + ".proj", LayerKind::kLinear, std::nullopt,
            {Product(Last())}, {out}, {}, gate, repeat};
    p.share = share(".proj");
    Add(p);
  }

  // A fixed DFT written as a linear map from `window` samples to `window + 2`
  // reals (real and imaginary parts of window/2 + 1 bins) per row.
  void Frontend(const std::string& n, int64_t rows, int64_t window,
                const Gate& gate) {
    Layer l{n, LayerKind::kLinear, std::vector<std::string>{}, {rows, window},
            {rows, window + 2}, {}, gate};
    l.bias = false;
    l.trainable = false;
    Add(l);
  }

  LayerGraph Take() { return std::move(g_); }

 private:
  LayerGraph g_;
};

std::vector<int> Range(int a, int b) {
  std::vector<int> v(b - a);
  std::iota(v.begin(), v.end(), a);
  return v;
}

}  // namespace

LayerGraph StudentGraph(const StudentConfig& c) {
  Builder b(fmt::format("student.{}", TaskKindName(c.task)));
  const int64_t d = c.d_f;
  const int nf = c.spectro.Frames(c.L), nb = c.spectro.Bins();
  Gate gv, ga, gb;
  std::vector<std::string> fused;

  if (c.task == TaskKind::kFrameSelect) {
    for (int f = 0; f < c.F; ++f) {
      const std::string n = fmt::format("visual.f{}", f);
      b.ConvStack(n, {c.ch, c.H, c.W}, c.width1, c.visual_width2, c.kernel,
                  c.pool,
                  c.d_f, std::vector<int>{f}, 1, std::vector<std::string>{},
                  f == 0 ? "" : "visual.f0");
    }
    b.Add({"fusion.visual", LayerKind::kLinear,
           std::vector<std::string>{"visual.f0.proj"}, {d}, {d}, {},
           Range(0, c.F)});
    fused.push_back("fusion.visual");
  } else {
    if (c.task == TaskKind::kChannelSelect) {
      gv = std::vector<int>{0};
      ga = Range(1, c.n_ch + 1);
      gb = std::vector<int>{c.n_ch + 1};
    } else {
      gv = std::vector<int>{0};
      ga = std::vector<int>{1};
      gb = std::vector<int>{2};
    }
    b.ConvStack("visual", {c.ch, c.H, c.W}, c.width1, c.visual_width2, c.kernel,
                c.pool, c.d_f, gv, c.F, std::vector<std::string>{});
    b.Add({"fusion.visual", LayerKind::kLinear, std::nullopt, {d}, {d}, {},
           gv});
    fused.push_back("fusion.visual");

    std::optional<std::vector<std::string>> audio_in = std::vector<std::string>{};
    if (c.task == TaskKind::kChannelSelect) {
      std::vector<std::string> sums;
      for (int a = 0; a < c.n_ch; ++a) {
        const std::string n = fmt::format("audio.ch{}", a);
        b.Frontend(n + ".frontend", nf, c.spectro.window, std::vector<int>{1 + a});
        Layer l{n + ".conv1", LayerKind::kConv2d, std::vector<std::string>{},
                {1, nf, nb}, {c.width1, nf, nb}, {c.kernel, c.kernel},
                std::vector<int>{1 + a}};
        l.bias = false;
        b.Add(l);
        sums.push_back(l.name);
      }
      Layer s{"audio.conv1.sum", LayerKind::kAdd, sums, {c.width1, nf, nb},
              {c.width1, nf, nb}, {}, ga};
      s.bias = true;
      b.Add(s);
      // Continue the stack after the first convolution.
      const Shape64 s1 = {c.width1, nf / c.pool, nb / c.pool};
      b.Add({"audio.pool1", LayerKind::kPool, std::nullopt, {c.width1, nf, nb},
             s1, {c.pool}, ga});
      b.Add({"audio.relu1", LayerKind::kRectify, std::nullopt, s1, s1, {}, ga});
      const Shape64 s2 = {c.width2, s1[1], s1[2]};
      b.Add({"audio.conv2", LayerKind::kConv2d, std::nullopt, s1, s2,
             {c.kernel, c.kernel}, ga});
      const Shape64 s3 = {c.width2, s2[1] / c.pool, s2[2] / c.pool};
      b.Add({"audio.pool2", LayerKind::kPool, std::nullopt, s2, s3, {c.pool},
             ga});
      b.Add({"audio.relu2", LayerKind::kRectify, std::nullopt, s3, s3, {}, ga});
      b.Add({"audio.proj", LayerKind::kLinear, std::nullopt, {Product(s3)},
             {d}, {}, ga});
    } else {
      b.Frontend("audio.frontend", static_cast<int64_t>(c.n_ch) * nf,
                 c.spectro.window, ga);
      b.ConvStack("audio", {c.n_ch, nf, nb}, c.width1, c.width2, c.kernel,
                  c.pool, c.d_f, ga, 1, audio_in);
    }
    b.Add({"fusion.audio", LayerKind::kLinear, std::nullopt, {d}, {d}, {}, ga});
    fused.push_back("fusion.audio");

    b.ConvStack("behavior", {c.d_b, c.L_b}, c.width1, c.width2, c.kernel,
                c.pool, c.d_f, gb, 1, std::vector<std::string>{});
    b.Add({"fusion.behavior", LayerKind::kLinear, std::nullopt, {d}, {d}, {},
           gb});
    fused.push_back("fusion.behavior");
  }
  Layer sum{"fusion.sum", LayerKind::kWeightedSum, fused, {d}, {d}};
  sum.weights = kNumModalities;
  b.Add(sum);
  b.Add({"fusion.mix", LayerKind::kLinear, std::nullopt, {d}, {d}});
  b.Add({"head", LayerKind::kLinear, std::nullopt, {d}, {c.OutDim()}});
  return b.Take();
}

LayerGraph PolicyGraph(const StudentConfig& s, const PolicyConfig& p) {
  Builder b(fmt::format("policy.{}", TaskKindName(s.task)));
  if (s.task == TaskKind::kFrameSelect) {
    const PreviewConfig& v = p.preview;
    const int64_t win = s.L / s.F;
    const int64_t S = win / v.step;
    const int64_t D = v.d_model;
    const int64_t R = s.F;  // one pass per window
    b.Frontend("preview.frontend", R * S * s.n_ch, v.step, std::nullopt);
    auto add = [&](Layer l) {
      l.repeat = R;
      b.Add(std::move(l));
    };
    add({"preview.embed", LayerKind::kLinear, std::vector<std::string>{},
         {S, v.StepFeatures(s.n_ch)}, {S, D}});
    std::string mh = "preview.embed", rc = "preview.embed";
    for (int l = 0; l < v.layers; ++l) {
      const std::string n = fmt::format("preview.mha{}", l);
      Layer att{n, LayerKind::kAttention, std::vector<std::string>{mh},
                {S, D}, {S, D}};
      att.heads = v.heads;
      add(att);
      Layer res{n + ".res", LayerKind::kAdd,
                std::vector<std::string>{n, mh}, {S, D}, {S, D}};
      res.bias = false;
      add(res);
      mh = n + ".res";
      const std::string r = fmt::format("preview.rcnn{}", l);
      Layer hs{r + ".handshake", LayerKind::kWeightedSum,
               std::vector<std::string>{rc, mh}, {S, D}, {S, D}};
      hs.weights = 1;
      add(hs);
      add({r + ".conv", LayerKind::kConv2d, std::nullopt, {1, S, D},
           {v.conv_filters, S, D}, {3, 3}});
      add({r + ".bn", LayerKind::kBatchNorm, std::nullopt,
           {v.conv_filters, S, D}, {v.conv_filters, S, D}});
      add({r + ".relu", LayerKind::kRectify, std::nullopt,
           {v.conv_filters, S, D}, {v.conv_filters, S, D}});
      add({r + ".mean", LayerKind::kPool, std::nullopt, {v.conv_filters, S, D},
           {v.conv_filters, S, 1}, {1, D}});
      for (const char* dir : {".fwd", ".bwd"}) {
        Layer cell{r + dir, LayerKind::kRecurrentCell,
                   std::vector<std::string>{r + ".mean"}, {S, v.conv_filters},
                   {S, v.bilstm_hidden}};
        cell.hidden = v.bilstm_hidden;
        add(cell);
      }
      add({r + ".out", LayerKind::kLinear,
           std::vector<std::string>{r + ".fwd", r + ".bwd"},
           {S, 2 * v.bilstm_hidden}, {S, D}});
      rc = r + ".out";
    }
    Layer fin{"preview.final", LayerKind::kRecurrentCell,
              std::vector<std::string>{rc}, {S, D}, {S, v.final_hidden}};
    fin.hidden = v.final_hidden;
    add(fin);
    // Only the last step feeds the saliency output.
    add({"preview.out", LayerKind::kLinear, std::vector<std::string>{},
         {v.final_hidden}, {1}});
    return b.Take();
  }

  const int64_t h2 = s.H / 2, w2 = s.W / 2;
  b.Add({"policy.thumb", LayerKind::kPool, std::vector<std::string>{},
         {1, 2 * h2, 2 * w2}, {1, h2, w2}, {2}});
  b.ConvStack("policy.visual", {1, h2, w2}, p.width1, p.width2, p.kernel,
              p.pool, p.d_p, std::nullopt, 1, std::nullopt);
  const int nf = p.coarse.Frames(s.L), nb = p.coarse.Bins();
  b.Frontend("policy.audio.frontend", nf, p.coarse.window, std::nullopt);
  b.ConvStack("policy.audio", {1, nf, nb}, p.width1, p.width2, p.kernel,
              p.pool, p.d_p, std::nullopt, 1, std::vector<std::string>{});
  b.ConvStack("policy.behavior", {s.d_b, s.L_b}, p.width1, p.width2, p.kernel,
              p.pool, p.d_p, std::nullopt, 1, std::vector<std::string>{});
  Layer cell{"policy.lstm", LayerKind::kRecurrentCell,
             std::vector<std::string>{"policy.visual.proj", "policy.audio.proj",
                                      "policy.behavior.proj"},
             {1, 3 * p.d_p}, {1, p.d_h}};
  cell.hidden = p.d_h;
  b.Add(cell);
  int K = s.task == TaskKind::kChannelSelect ? s.n_ch + 2 : kNumModalities;
  for (int k = 0; k < K; ++k) {
    b.Add({fmt::format("policy.head{}", k), LayerKind::kLinear,
           std::vector<std::string>{"policy.lstm"}, {p.d_h}, {2}});
  }
  return b.Take();
}

}  // namespace adaptsense
