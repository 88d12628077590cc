#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "d2v/errors.hpp"

namespace d2v {

struct ProbeOptions {
  std::size_t iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-4;
};

struct ProbeResult {
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  std::uint64_t seed = 0;
  std::string fingerprint;
};

using FeatureRows = std::vector<std::vector<double>>;

namespace detail {

inline void check_rows(const FeatureRows& x, const std::vector<int>& y, const char* what) {
  if (x.size() != y.size()) throw InputError(std::string("linear_probe: ") + what + " features and labels differ in count");
  if (x.empty()) throw InputError(std::string("linear_probe: empty ") + what + " set");
  for (const auto& row : x) {
    if (row.size() != x.front().size()) throw InputError("linear_probe: ragged feature rows");
    for (double v : row)
      if (!std::isfinite(v)) throw NumericError(std::string("linear_probe: non-finite ") + what + " feature");
  }
  for (int label : y)
    if (label < 0) throw InputError(std::string("linear_probe: negative label in ") + what + " set");
}

}  // namespace detail

/**
 * Multinomial logistic regression on standardized features (statistics from
 * the training split), full-batch gradient descent for a fixed budget.
 */
class LinearProbe {
 public:
  void fit(const FeatureRows& x, const std::vector<int>& y, const ProbeOptions& opt) {
    detail::check_rows(x, y, "train");
    if (std::set<int>(y.begin(), y.end()).size() < 2) throw InputError("linear_probe: need at least two classes");
    classes_ = static_cast<std::size_t>(*std::max_element(y.begin(), y.end())) + 1;
    dims_ = x.front().size();
    const double n = static_cast<double>(x.size());
    mean_.assign(dims_, 0.0);
    scale_.assign(dims_, 1.0);
    for (const auto& row : x)
      for (std::size_t d = 0; d < dims_; ++d) mean_[d] += row[d] / n;
    for (std::size_t d = 0; d < dims_; ++d) {
      double var = 0;
      for (const auto& row : x) var += (row[d] - mean_[d]) * (row[d] - mean_[d]);
      var /= n;
      scale_[d] = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
    }
    FeatureRows z;
    z.reserve(x.size());
    for (const auto& row : x) z.push_back(standardize(row));

    w_.assign(classes_, std::vector<double>(dims_ + 1, 0.0));
    std::vector<std::vector<double>> grad(classes_, std::vector<double>(dims_ + 1));
    std::vector<double> p(classes_);
    for (std::size_t it = 0; it < opt.iterations; ++it) {
      for (auto& g : grad) std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t i = 0; i < z.size(); ++i) {
        probabilities(z[i], p);
        for (std::size_t c = 0; c < classes_; ++c) {
          const double r = (p[c] - (static_cast<std::size_t>(y[i]) == c ? 1.0 : 0.0)) / n;
          for (std::size_t d = 0; d < dims_; ++d) grad[c][d] += r * z[i][d];
          grad[c][dims_] += r;
        }
      }
      for (std::size_t c = 0; c < classes_; ++c)
        for (std::size_t d = 0; d <= dims_; ++d) {
          const double decay = d < dims_ ? opt.l2 * w_[c][d] : 0.0;
          w_[c][d] -= opt.learning_rate * (grad[c][d] + decay);
        }
    }
  }

  int predict(const std::vector<double>& row) const {
    std::vector<double> p(classes_);
    probabilities(standardize(row), p);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }

  double accuracy(const FeatureRows& x, const std::vector<int>& y) const {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < x.size(); ++i) hits += predict(x[i]) == y[i];
    return x.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(x.size());
  }

 private:
  std::vector<double> standardize(const std::vector<double>& row) const {
    if (row.size() != dims_) throw InputError("linear_probe: feature width mismatch");
    std::vector<double> z(dims_);
    for (std::size_t d = 0; d < dims_; ++d) z[d] = (row[d] - mean_[d]) * scale_[d];
    return z;
  }

  void probabilities(const std::vector<double>& z, std::vector<double>& p) const {
    double top = -1e300;
    for (std::size_t c = 0; c < classes_; ++c) {
      double s = w_[c][dims_];
      for (std::size_t d = 0; d < dims_; ++d) s += w_[c][d] * z[d];
      p[c] = s;
      top = std::max(top, s);
    }
    double total = 0;
    for (auto& v : p) total += (v = std::exp(v - top));
    for (auto& v : p) v /= total;
  }

  std::size_t classes_ = 0, dims_ = 0;
  std::vector<double> mean_, scale_;
  std::vector<std::vector<double>> w_;
};

inline ProbeResult linear_probe(const FeatureRows& train_x, const std::vector<int>& train_y, const FeatureRows& test_x,
                                const std::vector<int>& test_y, const ProbeOptions& opt = {}) {
  detail::check_rows(test_x, test_y, "test");
  LinearProbe probe;
  probe.fit(train_x, train_y, opt);
  ProbeResult r;
  r.train_accuracy = probe.accuracy(train_x, train_y);
  r.accuracy = probe.accuracy(test_x, test_y);
  return r;
}

}  // namespace d2v
