#pragma once

#include <stdexcept>
#include <vector>

// Uniform action binning over [-1, 1]. Values exactly on a bin edge fall into
// the lower bin; detokenization returns bin centers, so a round trip moves a
// value by at most half a bin width.

namespace gridmind {

struct ActionChunk {
  int h = 0;
  int d = 0;
  std::vector<double> values;  // h*d row-major, in [-1, 1]
  std::vector<int> bins;       // h*d ids in [0, B)

  double value(int step, int dim) const { return values[size_t(step) * d + dim]; }
};

int value_to_bin(double v, int bins);
double bin_center(int bin, int bins);

std::vector<int> tokenize_actions(const std::vector<double>& values, int bins);
std::vector<double> detokenize_actions(const std::vector<int>& bin_ids, int bins);

// chunk from raw values (bins derived when a bin count is given) or from bin ids (values = centers)
ActionChunk chunk_from_values(int h, int d, std::vector<double> values);
ActionChunk chunk_from_values(int h, int d, std::vector<double> values, int bins);
ActionChunk chunk_from_bins(int h, int d, std::vector<int> bin_ids, int bins);

}  // namespace gridmind
