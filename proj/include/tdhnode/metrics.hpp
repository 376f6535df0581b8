#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "tdhnode/errors.hpp"

namespace tdhnode {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  void add(bool predicted, bool actual) {
    if (predicted && actual) {
      ++tp;
    } else if (predicted) {
      ++fp;
    } else if (actual) {
      ++fn;
    } else {
      ++tn;
    }
  }
  std::size_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

/// Micro-averaged over every evaluated (encounter, marker) pair. A ratio
/// with a zero denominator is reported as 0.
struct MetricsReport {
  ConfusionCounts counts;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;

  static MetricsReport from_counts(const ConfusionCounts& c) {
    if (c.total() == 0) throw Error(ErrorCode::EmptyEvaluationSet, "no evaluated (encounter, marker) pairs");
    auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
    MetricsReport r;
    r.counts = c;
    r.precision = ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp));
    r.recall = ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
    r.f1 = ratio(2.0 * r.precision * r.recall, r.precision + r.recall);
    r.accuracy = ratio(static_cast<double>(c.tp + c.tn), static_cast<double>(c.total()));
    return r;
  }

  nlohmann::json to_json() const {
    return {{"precision", precision},
            {"recall", recall},
            {"f1", f1},
            {"accuracy", accuracy},
            {"tp", counts.tp},
            {"fp", counts.fp},
            {"fn", counts.fn},
            {"tn", counts.tn},
            {"evaluated", counts.total()}};
  }
};

}  // namespace tdhnode
