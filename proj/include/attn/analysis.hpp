#pragma once

#include <string>
#include <vector>

#include "attn/common.hpp"

namespace attn {

struct CondensationMatrix {
  Mat C;
  std::vector<int> ordering;   // display permutation
  std::vector<int> zero_rows;  // rows with zero norm (similarity 0 by convention)
};

CondensationMatrix condensation(const Mat& W);
double min_abs_offdiag(const Mat& C);

struct PcaResult {
  Mat coords;       // (snapshots * rows) x 2, snapshot-major
  Mat directions;   // cols x 2
  Vec share;        // variance share of PC1, PC2
  int rows_per_snapshot = 0;
};
PcaResult pca_trajectory(const std::vector<Mat>& snapshots);

Vec attention_entropy(const Mat& A);
Vec orthogonal_components(const Mat& W0);

// Absolute cosine between the leading left singular vector of W0 and pi.
double condensation_cosine(const Mat& W0, const Vec& pi);

struct Series {
  std::string label;
  std::vector<double> x, y;
};
std::string svg_heatmap(const Mat& C, const std::vector<int>& ordering, const std::string& title);
std::string svg_scatter(const PcaResult& pca, const std::string& title);
std::string svg_lines(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                      const std::string& ylabel, bool logy = false);

}  // namespace attn
