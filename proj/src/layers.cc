#include "adaptsense/layers.h"

#include <fmt/format.h>

#include <cmath>

#include "adaptsense/errors.h"

namespace adaptsense {

using ag::Var;

Var Dense(const Var& x, const Var& w, const Var& b) {
  return ag::AddRowBias(ag::MatMul(x, ag::Transpose(w)), b);
}

LstmParams AddLstm(ParamSet& ps, const std::string& name, int in, int hidden,
                   Rng& rng) {
  LstmParams p;
  p.in = in;
  p.hidden = hidden;
  p.w = ps.AddLecun(name + ".w", {4 * hidden, in + hidden}, in + hidden,
                      rng);
  // A unit forget bias keeps early gradients alive.
  std::vector<double> b(4 * hidden, 0.0);
  for (int i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;
  p.b = ps.Add(name + ".b", {4 * hidden}, std::move(b));
  return p;
}

LstmState LstmZeroState(int hidden) {
  return {Var::Zeros({hidden}), Var::Zeros({hidden})};
}

LstmState LstmCell(const Var& x, const LstmState& s, const LstmParams& p) {
  if (x.size() != p.in || s.h.size() != p.hidden) {
    throw ShapeError(fmt::format("lstm cell expects input {} and state {}, "
                                 "got {} and {}",
                                 p.in, p.hidden, x.size(), s.h.size()));
  }
  const int h = p.hidden;
  Var xh[] = {x, s.h};
  Var z = ag::Linear(ag::Concat(xh), p.w, p.b);
  Var i = ag::Sigmoid(ag::Slice(z, 0, h));
  Var f = ag::Sigmoid(ag::Slice(z, h, 2 * h));
  Var g = ag::Tanh(ag::Slice(z, 2 * h, 3 * h));
  Var o = ag::Sigmoid(ag::Slice(z, 3 * h, 4 * h));
  Var c = ag::Add(ag::Mul(f, s.c), ag::Mul(i, g));
  return {ag::Mul(o, ag::Tanh(c)), c};
}

Var LstmSequence(const Var& x, const LstmParams& p, bool reverse) {
  const int S = x.dim(0);
  std::vector<Var> out(S);
  LstmState st = LstmZeroState(p.hidden);
  for (int k = 0; k < S; ++k) {
    const int t = reverse ? S - 1 - k : k;
    st = LstmCell(ag::Row(x, t), st, p);
    out[t] = st.h;
  }
  return ag::StackRows(out);
}

Var BiLstm(const Var& x, const LstmParams& fwd, const LstmParams& bwd) {
  Var parts[] = {LstmSequence(x, fwd, false), LstmSequence(x, bwd, true)};
  return ag::ConcatCols(parts);
}

MhaParams AddMha(ParamSet& ps, const std::string& name, int d_model,
                 int heads, Rng& rng) {
  if (heads < 1 || d_model % heads != 0) {
    throw ConfigError(fmt::format(
        "attention width {} is not divisible by {} heads", d_model, heads));
  }
  MhaParams p;
  p.heads = heads;
  auto lin = [&](const char* tag, Var& w, Var& b) {
    w = ps.AddLecun(name + "." + tag + ".w", {d_model, d_model}, d_model,
                      rng);
    b = ps.AddConstant(name + "." + tag + ".b", {d_model}, 0.0);
  };
  lin("q", p.wq, p.bq);
  lin("k", p.wk, p.bk);
  lin("v", p.wv, p.bv);
  lin("o", p.wo, p.bo);
  return p;
}

Var MultiHeadAttention(const Var& x, const MhaParams& p) {
  const int D = x.dim(1);
  const int dh = D / p.heads;
  Var q = Dense(x, p.wq, p.bq);
  Var k = Dense(x, p.wk, p.bk);
  Var v = Dense(x, p.wv, p.bv);
  std::vector<Var> ctx;
  for (int h = 0; h < p.heads; ++h) {
    Var qh = ag::ColSlice(q, h * dh, (h + 1) * dh);
    Var kh = ag::ColSlice(k, h * dh, (h + 1) * dh);
    Var vh = ag::ColSlice(v, h * dh, (h + 1) * dh);
    Var a = ag::SoftmaxRows(
        ag::Scale(ag::MatMul(qh, ag::Transpose(kh)), 1.0 / std::sqrt(dh)));
    ctx.push_back(ag::MatMul(a, vh));
  }
  return Dense(ag::ConcatCols(ctx), p.wo, p.bo);
}

int ConvStackTrunk(const ag::Shape& input, int width2, int pool) {
  int n = width2;
  for (size_t i = 1; i < input.size(); ++i) n *= (input[i] / pool) / pool;
  return n;
}

ConvStackParams AddConvStack(ParamSet& ps, const std::string& name,
                             const ag::Shape& input, int width1, int width2,
                             int kernel, int pool, int out, Rng& rng) {
  const bool is1d = input.size() == 2;
  const int in_c = input[0];
  const int taps = is1d ? kernel : kernel * kernel;
  const int trunk = ConvStackTrunk(input, width2, pool);
  if (trunk < 1) {
    throw ConfigError(fmt::format("{}: input {} too small to pool twice", name,
                                  ag::ShapeString(input)));
  }
  ag::Shape w1 = is1d ? ag::Shape{width1, in_c, kernel}
                      : ag::Shape{width1, in_c, kernel, kernel};
  ag::Shape w2 = is1d ? ag::Shape{width2, width1, kernel}
                      : ag::Shape{width2, width1, kernel, kernel};
  ConvStackParams p;
  p.conv1_w = ps.AddUniform(name + ".conv1.w", w1, in_c * taps, rng);
  p.conv1_b = ps.AddConstant(name + ".conv1.b", {width1}, 0.0);
  p.conv2_w = ps.AddUniform(name + ".conv2.w", w2, width1 * taps, rng);
  p.conv2_b = ps.AddConstant(name + ".conv2.b", {width2}, 0.0);
  p.proj_w = ps.AddLecun(name + ".proj.w", {out, trunk}, trunk, rng);
  p.proj_b = ps.AddConstant(name + ".proj.b", {out}, 0.0);
  return p;
}

Var ConvStack(const Var& x, const ConvStackParams& p, int pool) {
  Var h;
  if (x.rank() == 2) {
    h = ag::Relu(ag::MaxPool1d(ag::Conv1d(x, p.conv1_w, p.conv1_b), pool));
    h = ag::Relu(ag::MaxPool1d(ag::Conv1d(h, p.conv2_w, p.conv2_b), pool));
  } else {
    h = ag::Relu(ag::MaxPool2d(ag::Conv2d(x, p.conv1_w, p.conv1_b), pool));
    h = ag::Relu(ag::MaxPool2d(ag::Conv2d(h, p.conv2_w, p.conv2_b), pool));
  }
  return ag::Linear(h, p.proj_w, p.proj_b);
}

}  // namespace adaptsense
