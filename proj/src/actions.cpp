#include "gridmind/actions.hpp"

#include <cmath>
#include <string>

namespace gridmind {

namespace {
void check_bins(int bins) {
  if (bins < 2) throw std::invalid_argument("action bins must be >= 2, got " + std::to_string(bins));
}
}  // namespace

int value_to_bin(double v, int bins) {
  check_bins(bins);
  if (!(v >= -1.0 && v <= 1.0))
    throw std::range_error("action value " + std::to_string(v) + " outside [-1, 1]");
  // ceil((v+1)/2 * B) - 1 puts edge values into the lower bin
  int b = int(std::ceil((v + 1.0) * 0.5 * bins)) - 1;
  if (b < 0) b = 0;
  if (b >= bins) b = bins - 1;
  return b;
}

double bin_center(int bin, int bins) {
  check_bins(bins);
  if (bin < 0 || bin >= bins)
    throw std::range_error("bin id " + std::to_string(bin) + " outside [0, " +
                           std::to_string(bins) + ")");
  return -1.0 + (2.0 * bin + 1.0) / bins;
}

std::vector<int> tokenize_actions(const std::vector<double>& values, int bins) {
  std::vector<int> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(value_to_bin(v, bins));
  return out;
}

std::vector<double> detokenize_actions(const std::vector<int>& bin_ids, int bins) {
  std::vector<double> out;
  out.reserve(bin_ids.size());
  for (int b : bin_ids) out.push_back(bin_center(b, bins));
  return out;
}

ActionChunk chunk_from_values(int h, int d, std::vector<double> values) {
  if (h < 1 || d < 1) throw std::invalid_argument("action chunk needs h >= 1 and d >= 1");
  if (values.size() != size_t(h) * size_t(d))
    throw std::invalid_argument("action chunk: " + std::to_string(values.size()) +
                                " values for h*d = " + std::to_string(h * d));
  ActionChunk c;
  c.h = h;
  c.d = d;
  c.values = std::move(values);
  return c;
}

ActionChunk chunk_from_values(int h, int d, std::vector<double> values, int bins) {
  if (h < 1 || d < 1) throw std::invalid_argument("action chunk needs h >= 1 and d >= 1");
  if (values.size() != size_t(h) * size_t(d))
    throw std::invalid_argument("action chunk: " + std::to_string(values.size()) +
                                " values for h*d = " + std::to_string(h * d));
  ActionChunk c;
  c.h = h;
  c.d = d;
  c.bins = tokenize_actions(values, bins);
  c.values = std::move(values);
  return c;
}

ActionChunk chunk_from_bins(int h, int d, std::vector<int> bin_ids, int bins) {
  if (h < 1 || d < 1) throw std::invalid_argument("action chunk needs h >= 1 and d >= 1");
  if (bin_ids.size() != size_t(h) * size_t(d))
    throw std::invalid_argument("action chunk: " + std::to_string(bin_ids.size()) +
                                " bins for h*d = " + std::to_string(h * d));
  ActionChunk c;
  c.h = h;
  c.d = d;
  c.values = detokenize_actions(bin_ids, bins);
  c.bins = std::move(bin_ids);
  return c;
}

}  // namespace gridmind
