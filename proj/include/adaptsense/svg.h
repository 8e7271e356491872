#ifndef ADAPTSENSE_SVG_H_
#define ADAPTSENSE_SVG_H_

// Minimal static SVG charts: scatter and line series on linear axes.

#include <string>
#include <vector>

namespace adaptsense::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  bool lines = true;               // connect points in order
  std::vector<std::string> labels;  // optional per-point annotations
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  int width = 640;
  int height = 420;
};

// Axis ticks: about `n` round values covering [lo, hi].
std::vector<double> NiceTicks(double lo, double hi, int n);

std::string Render(const Chart& chart);
void Write(const Chart& chart, const std::string& path);

}  // namespace adaptsense::svg

#endif  // ADAPTSENSE_SVG_H_
