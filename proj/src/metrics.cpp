#include "sdfm/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "sdfm/error.hpp"

namespace sdfm {

RunMetrics::RunMetrics() : start_(std::chrono::steady_clock::now()) {}

double RunMetrics::elapsed_ms() const {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
}

void RunMetrics::record(std::size_t step, const std::string& metric, double value) {
  auto it = last_step_.find(metric);
  if (it != last_step_.end() && step < it->second) {
    throw ConfigError("metric '" + metric + "' recorded out of step order");
  }
  last_step_[metric] = step;
  rows_.push_back({step, elapsed_ms(), metric, value});
}

std::vector<double> RunMetrics::series(const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : rows_) {
    if (r.metric == metric) out.push_back(r.value);
  }
  return out;
}

std::string RunMetrics::to_csv(bool include_wall) const {
  std::ostringstream os;
  os << "step,wall_ms,metric,value\n";
  char buf[64];
  for (const auto& r : rows_) {
    os << r.step << ',';
    if (include_wall) {
      std::snprintf(buf, sizeof buf, "%.3f", r.wall_ms);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << ',' << r.metric << ',' << buf << '\n';
  }
  return os.str();
}

void RunMetrics::write_csv(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open metrics file '" + path + "' for writing");
    out << to_csv();
    if (!out) throw FormatError("failed writing metrics file '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move metrics file into place: " + path);
}

}  // namespace sdfm
