#pragma once

#include <fstream>
#include <map>
#include <string>

namespace gridmind {

// JSON-lines metrics with sorted keys and no timestamps, so identical runs
// produce identical bytes
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void write(const std::map<std::string, double>& row);

 private:
  std::ofstream out_;
};

std::map<std::string, double> read_metrics_line(const std::string& line);

}  // namespace gridmind
