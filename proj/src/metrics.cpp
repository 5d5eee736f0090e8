#include <gridmind/metrics.hpp>

#include <json.hpp>

#include <stdexcept>

namespace gridmind {

MetricsWriter::MetricsWriter(const std::string& path) : out_(path) {
  if (!out_) throw std::invalid_argument("metrics: cannot write " + path);
}

void MetricsWriter::write(const std::map<std::string, double>& row) {
  nlohmann::json j = row;
  out_ << j.dump() << "\n";
  out_.flush();
}

std::map<std::string, double> read_metrics_line(const std::string& line) {
  return nlohmann::json::parse(line).get<std::map<std::string, double>>();
}

}  // namespace gridmind
