#include "attn/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

namespace attn {

CondensationMatrix condensation(const Mat& W) {
  const Eigen::Index n = W.rows();
  CondensationMatrix out;
  out.C = Mat::Zero(n, n);
  Vec nr = W.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i)
    if (nr(i) == 0) out.zero_rows.push_back(static_cast<int>(i));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (nr(i) == 0 || nr(j) == 0) continue;
      out.C(i, j) = i == j ? 1.0 : std::clamp(W.row(i).dot(W.row(j)) / (nr(i) * nr(j)), -1.0, 1.0);
    }
  // Order by the sign of the first principal score, then by its magnitude.
  Vec score = Vec::Zero(n);
  if (n > 1 && W.squaredNorm() > 0) {
    Mat X = W.rowwise() - W.colwise().mean();
    Eigen::JacobiSVD<Mat> svd(X, Eigen::ComputeThinV);
    if (svd.singularValues().size() > 0 && svd.singularValues()(0) > 0) score = X * svd.matrixV().col(0);
    else score = W * W.colwise().sum().transpose();
  }
  out.ordering.resize(n);
  std::iota(out.ordering.begin(), out.ordering.end(), 0);
  std::stable_sort(out.ordering.begin(), out.ordering.end(), [&](int a, int b) {
    const bool pa = score(a) >= 0, pb = score(b) >= 0;
    if (pa != pb) return pa;
    return std::abs(score(a)) > std::abs(score(b));
  });
  return out;
}

double min_abs_offdiag(const Mat& C) {
  double mn = 1.0;
  for (Eigen::Index i = 0; i < C.rows(); ++i)
    for (Eigen::Index j = 0; j < C.cols(); ++j)
      if (i != j) mn = std::min(mn, std::abs(C(i, j)));
  return mn;
}

PcaResult pca_trajectory(const std::vector<Mat>& snapshots) {
  if (snapshots.size() < 2) throw ValidationError("pca_trajectory needs >= 2 snapshots");
  const Eigen::Index r = snapshots[0].rows(), c = snapshots[0].cols();
  Mat X(r * static_cast<Eigen::Index>(snapshots.size()), c);
  for (size_t k = 0; k < snapshots.size(); ++k) {
    if (snapshots[k].rows() != r || snapshots[k].cols() != c) throw ValidationError("snapshot shapes differ");
    X.middleRows(static_cast<Eigen::Index>(k) * r, r) = snapshots[k];
  }
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  const double total = X.squaredNorm();
  PcaResult out;
  out.rows_per_snapshot = static_cast<int>(r);
  out.directions = Mat::Zero(c, 2);
  out.share = Vec::Zero(2);
  if (total <= 0) throw ValidationError("zero-variance snapshot stack");
  Eigen::JacobiSVD<Mat> svd(X, Eigen::ComputeThinV);
  const Vec sv = svd.singularValues();
  const Eigen::Index k = std::min<Eigen::Index>(2, sv.size());
  out.directions.leftCols(k) = svd.matrixV().leftCols(k);
  for (Eigen::Index i = 0; i < k; ++i) out.share(i) = sv(i) * sv(i) / total;
  out.coords = X * out.directions;
  return out;
}

Vec attention_entropy(const Mat& A) {
  Vec h(A.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) h(i) = shannon_entropy(A.row(i).transpose());
  return h;
}

Vec orthogonal_components(const Mat& W0) {
  const double n1 = W0.row(0).norm();
  if (n1 == 0) throw ValidationError("orthogonal_components: first row is zero");
  const Eigen::RowVectorXd u = W0.row(0) / n1;
  Vec out(W0.rows() - 1);
  for (Eigen::Index i = 1; i < W0.rows(); ++i) out(i - 1) = (W0.row(i) - W0.row(i).dot(u) * u).norm();
  return out;
}

double condensation_cosine(const Mat& W0, const Vec& pi) {
  if (W0.squaredNorm() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(W0, Eigen::ComputeThinU);
  return std::abs(svd.matrixU().col(0).dot(pi)) / pi.norm();
}

namespace {
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

std::string header(int w, int h, const std::string& title) {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
      w, h, w, h, w / 2, title);
}

// Diverging blue-white-red map on [-1, 1].
std::string colour(double v) {
  v = std::clamp(v, -1.0, 1.0);
  int r, g, b;
  if (v >= 0) {
    r = 255;
    g = b = static_cast<int>(std::lround(255 * (1 - v)));
  } else {
    b = 255;
    r = g = static_cast<int>(std::lround(255 * (1 + v)));
  }
  return fmt::format("#{:02x}{:02x}{:02x}", r, g, b);
}
}  // namespace

std::string svg_heatmap(const Mat& C, const std::vector<int>& ordering, const std::string& title) {
  const int n = static_cast<int>(C.rows());
  const int cell = std::max(4, 320 / std::max(n, 1));
  const int w = n * cell + 80, h = n * cell + 80;
  std::string s = header(w, h, title);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n", 40 + j * cell,
                       40 + i * cell, cell, cell, colour(C(ordering[i], ordering[j])));
  s += "</svg>\n";
  return s;
}

std::string svg_scatter(const PcaResult& pca, const std::string& title) {
  const int w = 480, h = 480, pad = 40;
  std::string s = header(w, h, title);
  const Mat& X = pca.coords;
  double x0 = X.col(0).minCoeff(), x1 = X.col(0).maxCoeff(), y0 = X.col(1).minCoeff(), y1 = X.col(1).maxCoeff();
  if (x1 - x0 < 1e-300) x1 = x0 + 1;
  if (y1 - y0 < 1e-300) y1 = y0 + 1;
  const int r = std::max(pca.rows_per_snapshot, 1);
  for (Eigen::Index k = 0; k < X.rows(); ++k) {
    const double px = pad + (X(k, 0) - x0) / (x1 - x0) * (w - 2 * pad);
    const double py = h - pad - (X(k, 1) - y0) / (y1 - y0) * (h - 2 * pad);
    s += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2\" fill=\"{}\"/>\n", px, py, kPalette[(k % r) % 8]);
  }
  for (int t = 0; t < r; ++t)
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">token {}</text>\n",
                     w - 90, 40 + 14 * t, kPalette[t % 8], t + 1);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">PC1 {:.3f}, PC2 {:.3f}</text>\n",
                   pad, h - 10, pca.share(0), pca.share(1));
  s += "</svg>\n";
  return s;
}

std::string svg_lines(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                      const std::string& ylabel, bool logy) {
  const int w = 640, h = 400, pad = 50;
  std::string s = header(w, h, title);
  auto ty = [&](double y) { return logy ? std::log10(std::max(std::abs(y), 1e-300)) : y; };
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& sr : series)
    for (size_t i = 0; i < sr.x.size(); ++i) {
      x0 = std::min(x0, sr.x[i]);
      x1 = std::max(x1, sr.x[i]);
      y0 = std::min(y0, ty(sr.y[i]));
      y1 = std::max(y1, ty(sr.y[i]));
    }
  if (!(x1 > x0)) x1 = x0 + 1;
  if (!(y1 > y0)) y1 = y0 + 1;
  s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", pad, pad,
                   w - 2 * pad, h - 2 * pad);
  for (size_t k = 0; k < series.size(); ++k) {
    std::string pts;
    for (size_t i = 0; i < series[k].x.size(); ++i) {
      const double px = pad + (series[k].x[i] - x0) / (x1 - x0) * (w - 2 * pad);
      const double py = h - pad - (ty(series[k].y[i]) - y0) / (y1 - y0) * (h - 2 * pad);
      pts += fmt::format("{:.2f},{:.2f} ", px, py);
    }
    s += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n", pts,
                     kPalette[k % 8]);
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>\n",
                     w - pad - 100, pad + 14 * (k + 1), kPalette[k % 8], series[k].label);
  }
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                   w / 2, h - 12, xlabel);
  s += fmt::format(
      "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\" "
      "text-anchor=\"middle\">{}{}</text>\n",
      h / 2, h / 2, logy ? "log10 " : "", ylabel);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{:.4g}</text>\n", pad, h - pad + 14, x0);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.4g}</text>\n",
                   w - pad, h - pad + 14, x1);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.4g}</text>\n",
                   pad - 4, h - pad, y0);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.4g}</text>\n",
                   pad - 4, pad + 4, y1);
  s += "</svg>\n";
  return s;
}

}  // namespace attn
