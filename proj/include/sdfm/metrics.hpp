#pragma once

#include <chrono>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace sdfm {

/// Long-format time series: one row per (step, metric) observation.
class RunMetrics {
 public:
  struct Row {
    std::size_t step;
    double wall_ms;
    std::string metric;
    double value;
  };

  RunMetrics();

  /// Appends a row stamped with the elapsed wall time. Steps must be
  /// non-decreasing per metric name.
  void record(std::size_t step, const std::string& metric, double value);

  const std::vector<Row>& rows() const { return rows_; }
  /// Values of one metric in recording order.
  std::vector<double> series(const std::string& metric) const;
  double elapsed_ms() const;

  /// CSV with header `step,wall_ms,metric,value`.
  std::string to_csv(bool include_wall = true) const;
  void write_csv(const std::string& path) const;

 private:
  std::chrono::steady_clock::time_point start_;
  std::vector<Row> rows_;
  std::map<std::string, std::size_t> last_step_;
};

}  // namespace sdfm
