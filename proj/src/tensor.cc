#include "adaptsense/tensor.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "adaptsense/errors.h"

namespace adaptsense::ag {

int NumElements(const Shape& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string ShapeString(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

namespace {

using BackwardFn = std::function<void(Node&)>;

Var MakeResult(std::vector<double> value, Shape shape,
               std::vector<std::shared_ptr<Node>> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->shape = std::move(shape);
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  node->requires_grad = any;
  if (any) {
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

// Gradient buffer of a parent, or nullptr if it does not want one.
double* GradOf(const std::shared_ptr<Node>& p) {
  return p->requires_grad ? p->grad.data() : nullptr;
}

void CheckSameSize(const Var& a, const Var& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(fmt::format("{}: operand sizes differ, {} vs {}", op,
                                 ShapeString(a.shape()),
                                 ShapeString(b.shape())));
  }
}

void CheckRank(const Var& x, int rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(fmt::format("{}: expected rank {}, got {}", op, rank,
                                 ShapeString(x.shape())));
  }
}

template <typename F, typename D>
Var Unary(const Var& x, F f, D df) {
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto xp = x.node_ptr();
  return MakeResult(out, x.shape(), {xp}, [xp, df](Node& self) {
    double* g = GradOf(xp);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * df(xp->value[i], self.value[i]);
    }
  });
}

}  // namespace

Var Var::Constant(std::vector<double> values, Shape shape) {
  if (NumElements(shape) != static_cast<int>(values.size())) {
    throw ShapeError(fmt::format("constant of {} values cannot take shape {}",
                                 values.size(), ShapeString(shape)));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(values);
  node->shape = std::move(shape);
  return Var(std::move(node));
}

Var Var::Constant(std::vector<double> values) {
  Shape s{static_cast<int>(values.size())};
  return Constant(std::move(values), std::move(s));
}

Var Var::Scalar(double value) { return Constant({value}, {1}); }

Var Var::Zeros(Shape shape) {
  std::vector<double> zeros(NumElements(shape), 0.0);
  return Constant(std::move(zeros), std::move(shape));
}

Var Var::Leaf(std::vector<double> values, Shape shape, bool requires_grad) {
  Var v = Constant(std::move(values), std::move(shape));
  v.set_requires_grad(requires_grad);
  return v;
}

double Var::item() const {
  if (size() != 1) {
    throw ShapeError(
        fmt::format("item() on non-scalar {}", ShapeString(shape())));
  }
  return node_->value[0];
}

void Var::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on) {
    node_->grad.assign(node_->value.size(), 0.0);
  } else {
    node_->grad.clear();
  }
}

void Var::ZeroGrad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

void Var::Backward() const {
  if (size() != 1) {
    throw ShapeError("Backward() requires a scalar output");
  }
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    // Leaves keep accumulating; interior nodes start from zero.
    if (n->backward || n->grad.size() != n->value.size()) {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

Var Add(const Var& a, const Var& b) {
  CheckSameSize(a, b, "Add");
  std::vector<double> out(a.size());
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  auto ap = a.node_ptr(), bp = b.node_ptr();
  return MakeResult(out, a.shape(), {ap, bp}, [ap, bp](Node& self) {
    if (double* g = GradOf(ap))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = GradOf(bp))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Var Sub(const Var& a, const Var& b) {
  CheckSameSize(a, b, "Sub");
  std::vector<double> out(a.size());
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  auto ap = a.node_ptr(), bp = b.node_ptr();
  return MakeResult(out, a.shape(), {ap, bp}, [ap, bp](Node& self) {
    if (double* g = GradOf(ap))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = GradOf(bp))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Var Mul(const Var& a, const Var& b) {
  CheckSameSize(a, b, "Mul");
  std::vector<double> out(a.size());
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  auto ap = a.node_ptr(), bp = b.node_ptr();
  return MakeResult(out, a.shape(), {ap, bp}, [ap, bp](Node& self) {
    if (double* g = GradOf(ap))
      for (size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * bp->value[i];
    if (double* g = GradOf(bp))
      for (size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * ap->value[i];
  });
}

Var Scale(const Var& x, double c) {
  return Unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var AddScalar(const Var& x, double c) {
  return Unary(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var MulScalar(const Var& x, const Var& s) {
  if (s.size() != 1) throw ShapeError("MulScalar: scale must be a scalar");
  const double sv = s[0];
  std::vector<double> out(x.size());
  for (int i = 0; i < x.size(); ++i) out[i] = x[i] * sv;
  auto xp = x.node_ptr(), sp = s.node_ptr();
  return MakeResult(out, x.shape(), {xp, sp}, [xp, sp](Node& self) {
    const double svv = sp->value[0];
    if (double* g = GradOf(xp))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * svv;
    if (double* g = GradOf(sp)) {
      double acc = 0.0;
      for (size_t i = 0; i < self.grad.size(); ++i)
        acc += self.grad[i] * xp->value[i];
      g[0] += acc;
    }
  });
}

Var Neg(const Var& x) { return Scale(x, -1.0); }

Var Relu(const Var& x) {
  return Unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var Sigmoid(const Var& x) {
  return Unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var Tanh(const Var& x) {
  return Unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var Exp(const Var& x) {
  return Unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Var Log(const Var& x) {
  return Unary(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Var Abs(const Var& x) {
  return Unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var Square(const Var& x) {
  return Unary(
      x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Var Sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value()) s += v;
  auto xp = x.node_ptr();
  return MakeResult({s}, {1}, {xp}, [xp](Node& self) {
    double* g = GradOf(xp);
    for (size_t i = 0; i < xp->value.size(); ++i) g[i] += self.grad[0];
  });
}

Var Mean(const Var& x) { return Scale(Sum(x), 1.0 / x.size()); }

Var Linear(const Var& x, const Var& weight, const Var& bias) {
  CheckRank(weight, 2, "Linear");
  const int out = weight.dim(0), in = weight.dim(1);
  if (x.size() != in || bias.size() != out) {
    throw ShapeError(fmt::format(
        "Linear: weight {} expects input {} and bias {}, got input {} bias {}",
        ShapeString(weight.shape()), in, out, ShapeString(x.shape()),
        ShapeString(bias.shape())));
  }
  std::vector<double> y(out);
  const double* w = weight.value().data();
  const double* xv = x.value().data();
  for (int o = 0; o < out; ++o) {
    double acc = bias[o];
    const double* row = w + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += row[i] * xv[i];
    y[o] = acc;
  }
  auto xp = x.node_ptr(), wp = weight.node_ptr(), bp = bias.node_ptr();
  return MakeResult(y, {out}, {xp, wp, bp}, [xp, wp, bp, out, in](Node& self) {
    const double* gy = self.grad.data();
    if (double* gx = GradOf(xp)) {
      for (int o = 0; o < out; ++o) {
        const double* row = wp->value.data() + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) gx[i] += gy[o] * row[i];
      }
    }
    if (double* gw = GradOf(wp)) {
      for (int o = 0; o < out; ++o) {
        double* row = gw + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) row[i] += gy[o] * xp->value[i];
      }
    }
    if (double* gb = GradOf(bp))
      for (int o = 0; o < out; ++o) gb[o] += gy[o];
  });
}

Var MatMul(const Var& a, const Var& b) {
  CheckRank(a, 2, "MatMul");
  CheckRank(b, 2, "MatMul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError(fmt::format("MatMul: {} x {}", ShapeString(a.shape()),
                                 ShapeString(b.shape())));
  }
  std::vector<double> y(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b.value().data() + static_cast<size_t>(p) * n;
      double* yrow = y.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  auto ap = a.node_ptr(), bp = b.node_ptr();
  return MakeResult(y, {m, n}, {ap, bp}, [ap, bp, m, k, n](Node& self) {
    const double* gy = self.grad.data();
    if (double* ga = GradOf(ap)) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j)
            acc += gy[i * n + j] * bp->value[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (double* gb = GradOf(bp)) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const double av = ap->value[i * k + p];
          for (int j = 0; j < n; ++j) gb[p * n + j] += av * gy[i * n + j];
        }
    }
  });
}

Var Transpose(const Var& a) {
  CheckRank(a, 2, "Transpose");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> y(a.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y[j * m + i] = a[i * n + j];
  auto ap = a.node_ptr();
  return MakeResult(y, {n, m}, {ap}, [ap, m, n](Node& self) {
    double* g = GradOf(ap);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Var AddRowBias(const Var& a, const Var& bias) {
  CheckRank(a, 2, "AddRowBias");
  const int m = a.dim(0), n = a.dim(1);
  if (bias.size() != n) throw ShapeError("AddRowBias: bias length mismatch");
  std::vector<double> y(a.value());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y[i * n + j] += bias[j];
  auto ap = a.node_ptr(), bp = bias.node_ptr();
  return MakeResult(y, {m, n}, {ap, bp}, [ap, bp, m, n](Node& self) {
    if (double* g = GradOf(ap))
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = GradOf(bp))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  });
}

namespace {

void SoftmaxInPlace(const double* x, double* y, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    s += y[i];
  }
  for (int i = 0; i < n; ++i) y[i] /= s;
}

}  // namespace

Var Softmax(const Var& x) {
  std::vector<double> y(x.size());
  SoftmaxInPlace(x.value().data(), y.data(), x.size());
  auto xp = x.node_ptr();
  return MakeResult(y, x.shape(), {xp}, [xp](Node& self) {
    double dot = 0.0;
    for (size_t i = 0; i < self.grad.size(); ++i)
      dot += self.grad[i] * self.value[i];
    double* g = GradOf(xp);
    for (size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.value[i] * (self.grad[i] - dot);
  });
}

Var LogSoftmax(const Var& x) {
  const int n = x.size();
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  const double lse = mx + std::log(s);
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) y[i] = x[i] - lse;
  auto xp = x.node_ptr();
  return MakeResult(y, x.shape(), {xp}, [xp](Node& self) {
    double gs = 0.0;
    for (double g : self.grad) gs += g;
    double* g = GradOf(xp);
    for (size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.grad[i] - std::exp(self.value[i]) * gs;
  });
}

Var SoftmaxRows(const Var& a) {
  CheckRank(a, 2, "SoftmaxRows");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> y(a.size());
  for (int i = 0; i < m; ++i)
    SoftmaxInPlace(a.value().data() + i * n, y.data() + i * n, n);
  auto ap = a.node_ptr();
  return MakeResult(y, {m, n}, {ap}, [ap, m, n](Node& self) {
    double* g = GradOf(ap);
    for (int i = 0; i < m; ++i) {
      const double* yr = self.value.data() + i * n;
      const double* gr = self.grad.data() + i * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (int j = 0; j < n; ++j) g[i * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var Reshape(const Var& x, Shape shape) {
  if (NumElements(shape) != x.size()) {
    throw ShapeError(fmt::format("Reshape {} -> {}", ShapeString(x.shape()),
                                 ShapeString(shape)));
  }
  auto xp = x.node_ptr();
  return MakeResult(x.value(), std::move(shape), {xp}, [xp](Node& self) {
    double* g = GradOf(xp);
    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Var Concat(std::span<const Var> parts) {
  std::vector<double> y;
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    offsets.push_back(static_cast<int>(y.size()));
    y.insert(y.end(), p.value().begin(), p.value().end());
    parents.push_back(p.node_ptr());
  }
  const int n = static_cast<int>(y.size());
  auto ps = parents;
  return MakeResult(std::move(y), {n}, std::move(parents),
                    [ps, offsets](Node& self) {
                      for (size_t k = 0; k < ps.size(); ++k) {
                        double* g = GradOf(ps[k]);
                        if (!g) continue;
                        for (size_t i = 0; i < ps[k]->value.size(); ++i)
                          g[i] += self.grad[offsets[k] + i];
                      }
                    });
}

Var Slice(const Var& x, int begin, int end) {
  if (begin < 0 || end > x.size() || begin > end) {
    throw ShapeError(fmt::format("Slice [{}, {}) out of range for size {}",
                                 begin, end, x.size()));
  }
  std::vector<double> y(x.value().begin() + begin, x.value().begin() + end);
  auto xp = x.node_ptr();
  return MakeResult(std::move(y), {end - begin}, {xp}, [xp, begin](Node& self) {
    double* g = GradOf(xp);
    for (size_t i = 0; i < self.grad.size(); ++i) g[begin + i] += self.grad[i];
  });
}

Var ColSlice(const Var& a, int begin, int end) {
  CheckRank(a, 2, "ColSlice");
  const int m = a.dim(0), n = a.dim(1), w = end - begin;
  if (begin < 0 || end > n || w < 0) throw ShapeError("ColSlice range");
  std::vector<double> y(static_cast<size_t>(m) * w);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) y[i * w + j] = a[i * n + begin + j];
  auto ap = a.node_ptr();
  return MakeResult(std::move(y), {m, w}, {ap},
                    [ap, m, n, w, begin](Node& self) {
                      double* g = GradOf(ap);
                      for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                          g[i * n + begin + j] += self.grad[i * w + j];
                    });
}

Var ConcatCols(std::span<const Var> parts) {
  const int m = parts[0].dim(0);
  int n = 0;
  std::vector<int> offsets, widths;
  std::vector<std::shared_ptr<Node>> parents;
  for (const Var& p : parts) {
    CheckRank(p, 2, "ConcatCols");
    if (p.dim(0) != m) throw ShapeError("ConcatCols: row count mismatch");
    offsets.push_back(n);
    widths.push_back(p.dim(1));
    n += p.dim(1);
    parents.push_back(p.node_ptr());
  }
  std::vector<double> y(static_cast<size_t>(m) * n);
  for (size_t k = 0; k < parts.size(); ++k)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < widths[k]; ++j)
        y[i * n + offsets[k] + j] = parts[k][i * widths[k] + j];
  auto ps = parents;
  return MakeResult(std::move(y), {m, n}, std::move(parents),
                    [ps, offsets, widths, m, n](Node& self) {
                      for (size_t k = 0; k < ps.size(); ++k) {
                        double* g = GradOf(ps[k]);
                        if (!g) continue;
                        for (int i = 0; i < m; ++i)
                          for (int j = 0; j < widths[k]; ++j)
                            g[i * widths[k] + j] +=
                                self.grad[i * n + offsets[k] + j];
                      }
                    });
}

Var Row(const Var& a, int i) {
  CheckRank(a, 2, "Row");
  const int n = a.dim(1);
  Var flat = Slice(Reshape(a, {a.size()}), i * n, (i + 1) * n);
  return flat;
}

Var StackRows(std::span<const Var> rows) {
  const int n = rows[0].size();
  for (const Var& r : rows)
    if (r.size() != n) throw ShapeError("StackRows: ragged rows");
  Var flat = Concat(rows);
  return Reshape(flat, {static_cast<int>(rows.size()), n});
}

Var Conv2d(const Var& x, const Var& weight, const Var& bias) {
  CheckRank(x, 3, "Conv2d");
  CheckRank(weight, 4, "Conv2d");
  const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int c_out = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c_in || bias.size() != c_out) {
    throw ShapeError(fmt::format(
        "Conv2d: input {} weight {} bias {}", ShapeString(x.shape()),
        ShapeString(weight.shape()), ShapeString(bias.shape())));
  }
  const int ph = kh / 2, pw = kw / 2;
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<double> y(static_cast<size_t>(c_out) * plane);
  const double* xv = x.value().data();
  const double* wv = weight.value().data();
  for (int o = 0; o < c_out; ++o) {
    double* yo = y.data() + o * plane;
    std::fill(yo, yo + plane, bias[o]);
    for (int c = 0; c < c_in; ++c) {
      const double* xc = xv + c * plane;
      for (int ky = 0; ky < kh; ++ky) {
        const int dy = ky - ph;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int kx = 0; kx < kw; ++kx) {
          const int dx = kx - pw;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          const double wt = wv[((o * c_in + c) * kh + ky) * kw + kx];
          for (int r = y0; r < y1; ++r) {
            double* yr = yo + r * w;
            const double* xr = xc + (r + dy) * w + dx;
            for (int col = x0; col < x1; ++col) yr[col] += wt * xr[col];
          }
        }
      }
    }
  }
  auto xp = x.node_ptr(), wp = weight.node_ptr(), bp = bias.node_ptr();
  return MakeResult(
      std::move(y), {c_out, h, w}, {xp, wp, bp},
      [xp, wp, bp, c_in, c_out, h, w, kh, kw, ph, pw, plane](Node& self) {
        const double* gy = self.grad.data();
        double* gx = GradOf(xp);
        double* gw = GradOf(wp);
        double* gb = GradOf(bp);
        const double* xv = xp->value.data();
        const double* wv = wp->value.data();
        for (int o = 0; o < c_out; ++o) {
          const double* go = gy + o * plane;
          if (gb) {
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) acc += go[i];
            gb[o] += acc;
          }
          for (int c = 0; c < c_in; ++c) {
            const double* xc = xv + c * plane;
            for (int ky = 0; ky < kh; ++ky) {
              const int dy = ky - ph;
              const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
              for (int kx = 0; kx < kw; ++kx) {
                const int dx = kx - pw;
                const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                const size_t widx = ((o * c_in + c) * kh + ky) * kw + kx;
                const double wt = wv[widx];
                double acc = 0.0;
                for (int r = y0; r < y1; ++r) {
                  const double* gr = go + r * w;
                  const double* xr = xc + (r + dy) * w + dx;
                  if (gx) {
                    double* gxr = gx + c * plane + (r + dy) * w + dx;
                    for (int col = x0; col < x1; ++col) {
                      acc += gr[col] * xr[col];
                      gxr[col] += wt * gr[col];
                    }
                  } else {
                    for (int col = x0; col < x1; ++col)
                      acc += gr[col] * xr[col];
                  }
                }
                if (gw) gw[widx] += acc;
              }
            }
          }
        }
      });
}

Var Conv1d(const Var& x, const Var& weight, const Var& bias) {
  CheckRank(x, 2, "Conv1d");
  CheckRank(weight, 3, "Conv1d");
  const int c_in = x.dim(0), len = x.dim(1);
  const int c_out = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c_in || bias.size() != c_out) {
    throw ShapeError(fmt::format(
        "Conv1d: input {} weight {} bias {}", ShapeString(x.shape()),
        ShapeString(weight.shape()), ShapeString(bias.shape())));
  }
  const int pad = k / 2;
  std::vector<double> y(static_cast<size_t>(c_out) * len);
  for (int o = 0; o < c_out; ++o) {
    double* yo = y.data() + o * len;
    std::fill(yo, yo + len, bias[o]);
    for (int c = 0; c < c_in; ++c) {
      const double* xc = x.value().data() + c * len;
      for (int t = 0; t < k; ++t) {
        const int d = t - pad;
        const int i0 = std::max(0, -d), i1 = std::min(len, len - d);
        const double wt = weight[(o * c_in + c) * k + t];
        for (int i = i0; i < i1; ++i) yo[i] += wt * xc[i + d];
      }
    }
  }
  auto xp = x.node_ptr(), wp = weight.node_ptr(), bp = bias.node_ptr();
  return MakeResult(std::move(y), {c_out, len}, {xp, wp, bp},
                    [xp, wp, bp, c_in, c_out, len, k, pad](Node& self) {
                      double* gx = GradOf(xp);
                      double* gw = GradOf(wp);
                      double* gb = GradOf(bp);
                      for (int o = 0; o < c_out; ++o) {
                        const double* go = self.grad.data() + o * len;
                        if (gb)
                          for (int i = 0; i < len; ++i) gb[o] += go[i];
                        for (int c = 0; c < c_in; ++c) {
                          const double* xc = xp->value.data() + c * len;
                          for (int t = 0; t < k; ++t) {
                            const int d = t - pad;
                            const int i0 = std::max(0, -d),
                                      i1 = std::min(len, len - d);
                            const size_t widx = (o * c_in + c) * k + t;
                            const double wt = wp->value[widx];
                            double acc = 0.0;
                            for (int i = i0; i < i1; ++i) {
                              acc += go[i] * xc[i + d];
                              if (gx) gx[c * len + i + d] += wt * go[i];
                            }
                            if (gw) gw[widx] += acc;
                          }
                        }
                      }
                    });
}

Var MaxPool2d(const Var& x, int k) {
  CheckRank(x, 3, "MaxPool2d");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = h / k, ow = w / k;
  if (oh < 1 || ow < 1) {
    throw ShapeError(fmt::format("MaxPool2d: input {} too small for k={}",
                                 ShapeString(x.shape()), k));
  }
  std::vector<double> y(static_cast<size_t>(c) * oh * ow);
  std::vector<int> arg(y.size());
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int col = 0; col < ow; ++col) {
        int best = (ch * h + r * k) * w + col * k;
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b) {
            const int idx = (ch * h + r * k + a) * w + col * k + b;
            if (x[idx] > x[best]) best = idx;
          }
        const size_t o = (static_cast<size_t>(ch) * oh + r) * ow + col;
        y[o] = x[best];
        arg[o] = best;
      }
  auto xp = x.node_ptr();
  return MakeResult(std::move(y), {c, oh, ow}, {xp},
                    [xp, arg = std::move(arg)](Node& self) {
                      double* g = GradOf(xp);
                      for (size_t i = 0; i < arg.size(); ++i)
                        g[arg[i]] += self.grad[i];
                    });
}

Var MaxPool1d(const Var& x, int k) {
  CheckRank(x, 2, "MaxPool1d");
  const int c = x.dim(0), len = x.dim(1), ol = len / k;
  if (ol < 1) throw ShapeError("MaxPool1d: input too short");
  std::vector<double> y(static_cast<size_t>(c) * ol);
  std::vector<int> arg(y.size());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < ol; ++i) {
      int best = ch * len + i * k;
      for (int a = 1; a < k; ++a) {
        const int idx = ch * len + i * k + a;
        if (x[idx] > x[best]) best = idx;
      }
      y[ch * ol + i] = x[best];
      arg[ch * ol + i] = best;
    }
  auto xp = x.node_ptr();
  return MakeResult(std::move(y), {c, ol}, {xp},
                    [xp, arg = std::move(arg)](Node& self) {
                      double* g = GradOf(xp);
                      for (size_t i = 0; i < arg.size(); ++i)
                        g[arg[i]] += self.grad[i];
                    });
}

Var BatchNorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int c = x.dim(0);
  const int n = x.size() / c;
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("BatchNorm: gamma/beta length must equal channel count");
  }
  std::vector<double> y(x.size()), xhat(x.size()), inv_std(c);
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = x.value().data() + static_cast<size_t>(ch) * n;
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += xc[i];
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= n;
    inv_std[ch] = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i) {
      const size_t idx = static_cast<size_t>(ch) * n + i;
      xhat[idx] = (xc[i] - mean) * inv_std[ch];
      y[idx] = gamma[ch] * xhat[idx] + beta[ch];
    }
  }
  auto xp = x.node_ptr(), gp = gamma.node_ptr(), bp = beta.node_ptr();
  return MakeResult(std::move(y), x.shape(), {xp, gp, bp},
                    [xp, gp, bp, c, n, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Node& self) {
                      double* gx = GradOf(xp);
                      double* gg = GradOf(gp);
                      double* gb = GradOf(bp);
                      for (int ch = 0; ch < c; ++ch) {
                        const size_t base = static_cast<size_t>(ch) * n;
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (int i = 0; i < n; ++i) {
                          sum_g += self.grad[base + i];
                          sum_gx += self.grad[base + i] * xhat[base + i];
                        }
                        if (gg) gg[ch] += sum_gx;
                        if (gb) gb[ch] += sum_g;
                        if (gx) {
                          const double gam = gp->value[ch];
                          for (int i = 0; i < n; ++i) {
                            const double gxh = self.grad[base + i] * gam;
                            gx[base + i] += inv_std[ch] / n *
                                            (n * gxh - gam * sum_g -
                                             xhat[base + i] * gam * sum_gx);
                          }
                        }
                      }
                    });
}

Var MeanLastAxis(const Var& x) {
  if (x.rank() < 2) throw ShapeError("MeanLastAxis: rank must be >= 2");
  const int d = x.shape().back();
  const int rows = x.size() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> y(rows);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += x[r * d + j];
    y[r] = s / d;
  }
  auto xp = x.node_ptr();
  return MakeResult(std::move(y), out_shape, {xp}, [xp, rows, d](Node& self) {
    double* g = GradOf(xp);
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j) g[r * d + j] += self.grad[r] / d;
  });
}

Var MulChannels(const Var& x, const Var& m) {
  const int c = x.dim(0);
  if (m.size() != c) throw ShapeError("MulChannels: mask length mismatch");
  const int n = x.size() / c;
  std::vector<double> y(x.size());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < n; ++i) y[ch * n + i] = x[ch * n + i] * m[ch];
  auto xp = x.node_ptr(), mp = m.node_ptr();
  return MakeResult(std::move(y), x.shape(), {xp, mp},
                    [xp, mp, c, n](Node& self) {
                      double* gx = GradOf(xp);
                      double* gm = GradOf(mp);
                      for (int ch = 0; ch < c; ++ch)
                        for (int i = 0; i < n; ++i) {
                          const double g = self.grad[ch * n + i];
                          if (gx) gx[ch * n + i] += g * mp->value[ch];
                          if (gm) gm[ch] += g * xp->value[ch * n + i];
                        }
                    });
}

Var StraightThrough(std::vector<double> hard, const Var& soft) {
  if (static_cast<int>(hard.size()) != soft.size()) {
    throw ShapeError("StraightThrough: hard/soft size mismatch");
  }
  auto sp = soft.node_ptr();
  return MakeResult(std::move(hard), soft.shape(), {sp}, [sp](Node& self) {
    double* g = GradOf(sp);
    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Var StopGradient(const Var& x) { return Var::Constant(x.value(), x.shape()); }

}  // namespace adaptsense::ag
