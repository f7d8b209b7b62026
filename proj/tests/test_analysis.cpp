#include <gtest/gtest.h>

#include <cmath>

#include "attn/analysis.hpp"
#include "attn/flow.hpp"
#include "attn/population.hpp"
#include "attn/rng.hpp"

using namespace attn;

namespace {

Mat gaussian(int r, int c, std::uint64_t seed) {
  Rng rng(seed);
  Mat a(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) a(i, j) = rng.normal();
  return a;
}

struct Fig2Run {
  MarkovSpec spec;
  Trajectory traj;
  std::vector<Stage> stages;
};

// Synthetic four-stage run, every record kept as a snapshot.
const Fig2Run& fig2() {
  static const Fig2Run r = [] {
    Fig2Run f;
    Vec pi(4);
    pi << 0.75, 0.19, 0.05, 0.01;
    f.spec = build_transition(from_pi(pi), 0.8);
    FlowConfig cfg;
    cfg.step_size = 0.05;
    cfg.max_time = 400;
    cfg.record_every = 10;
    cfg.adaptive = true;
    cfg.snapshot_every = 1;
    f.traj = integrate_flow(init_params(4, 16, 1e-4, 1), f.spec, cfg);
    f.stages = stage_times(f.traj);
    return f;
  }();
  return r;
}

std::vector<Mat> w0_between(const Trajectory& tr, double t0, double t1) {
  std::vector<Mat> out;
  for (std::size_t k = 0; k < tr.snapshots.size(); ++k)
    if (tr.snapshot_times[k] >= t0 && tr.snapshot_times[k] <= t1) out.push_back(tr.snapshots[k].W0);
  return out;
}

const ModelParams& snapshot_at(const Trajectory& tr, double t) {
  std::size_t k = 0;
  while (k + 1 < tr.snapshots.size() && tr.snapshot_times[k + 1] <= t + 1e-9) ++k;
  return tr.snapshots[k];
}

int count(const std::string& s, const std::string& sub) {
  int n = 0;
  for (std::size_t p = s.find(sub); p != std::string::npos; p = s.find(sub, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Condensation, EqualRows) {
  Mat W(3, 4);
  W.rowwise() = Eigen::RowVector4d(1, -2, 0.5, 3);
  CondensationMatrix c = condensation(W);
  EXPECT_LT((c.C.array() - 1).abs().maxCoeff(), 1e-12);
}

TEST(Condensation, OrthogonalRows) {
  Mat W = Mat::Zero(3, 5);
  W(0, 0) = 2;
  W(1, 3) = -1;
  W(2, 4) = 0.3;
  EXPECT_LT((condensation(W).C - Mat::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Condensation, Properties) {
  Mat W = gaussian(5, 4, 3);
  CondensationMatrix c = condensation(W);
  EXPECT_LT((c.C - c.C.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE(c.C.cwiseAbs().maxCoeff(), 1.0);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(c.C(i, i), 1.0, 1e-12);
  std::vector<int> sorted = c.ordering;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2, 3, 4}));
  Vec scale(5);
  scale << 0.1, 3, 7, 1e-3, 2;
  EXPECT_LT((condensation(scale.asDiagonal() * W).C - c.C).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Condensation, ZeroRowsFlagged) {
  Mat W = gaussian(3, 3, 1);
  W.row(1).setZero();
  CondensationMatrix c = condensation(W);
  EXPECT_EQ(c.zero_rows, std::vector<int>{1});
  EXPECT_EQ(c.C.row(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Condensation, EndOfStageOne) {
  const Fig2Run& f = fig2();
  ASSERT_GE(f.stages.size(), 1u);
  const ModelParams& p = snapshot_at(f.traj, f.stages[0].t_end);
  EXPECT_GT(min_abs_offdiag(condensation(p.W0).C), 0.99);
}

TEST(Pca, IdenticalSnapshotsCoincide) {
  Mat W = gaussian(3, 4, 5);
  PcaResult r = pca_trajectory({W, W, W});
  for (int k = 1; k < 3; ++k) EXPECT_LT((r.coords.middleRows(3 * k, 3) - r.coords.topRows(3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pca, RotationInvariantGeometry) {
  std::vector<Mat> snaps = {gaussian(4, 5, 1), gaussian(4, 5, 2), gaussian(4, 5, 3)};
  Eigen::HouseholderQR<Mat> qr(gaussian(5, 5, 9));
  Mat R = qr.householderQ();
  std::vector<Mat> rotated;
  for (const Mat& s : snaps) rotated.push_back(s * R);
  PcaResult a = pca_trajectory(snaps), b = pca_trajectory(rotated);
  EXPECT_LT((a.share - b.share).cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index i = 0; i < a.coords.rows(); ++i)
    for (Eigen::Index j = 0; j < i; ++j)
      EXPECT_NEAR((a.coords.row(i) - a.coords.row(j)).norm(), (b.coords.row(i) - b.coords.row(j)).norm(), 1e-10);
}

TEST(Pca, Errors) {
  Mat W = Mat::Constant(2, 3, 0.5);
  EXPECT_THROW(pca_trajectory({W}), ValidationError);
  EXPECT_THROW(pca_trajectory({W, W}), ValidationError);
  EXPECT_THROW(pca_trajectory({W, Mat::Zero(3, 3)}), ValidationError);
}

TEST(Pca, StageShares) {
  const Fig2Run& f = fig2();
  ASSERT_EQ(f.stages.size(), 4u);
  PcaResult one = pca_trajectory(w0_between(f.traj, f.stages[0].t_start, f.stages[0].t_end));
  PcaResult four = pca_trajectory(w0_between(f.traj, f.stages[3].t_start, f.stages[3].t_end));
  EXPECT_LT(one.share(1), 0.05);
  EXPECT_GT(four.share(1), 0.10);
}

TEST(Entropy, Extremes) {
  Mat onehot = Mat::Identity(3, 3);
  EXPECT_EQ(attention_entropy(onehot), Vec::Zero(3));
  Mat uni = Mat::Constant(2, 5, 0.2);
  EXPECT_LT((attention_entropy(uni).array() - std::log(5.0)).abs().maxCoeff(), 1e-15);
}

TEST(Entropy, PermutationInvariant) {
  Mat A(1, 4);
  A << 0.1, 0.2, 0.3, 0.4;
  Mat B(1, 4);
  B << 0.3, 0.1, 0.4, 0.2;
  EXPECT_NEAR(attention_entropy(A)(0), attention_entropy(B)(0), 1e-15);
}

TEST(Entropy, RejectsNegative) {
  Mat A(1, 3);
  A << 0.6, 0.5, -0.1;
  EXPECT_THROW(attention_entropy(A), ValidationError);
}

TEST(Entropy, FocusThenDilution) {
  const Fig2Run& f = fig2();
  ASSERT_EQ(f.stages.size(), 4u);
  auto low_entropy = [&](double t) {
    Vec h = attention_entropy(proxy_attention(snapshot_at(f.traj, t), f.spec));
    return h.tail(3).mean();
  };
  double a = low_entropy(f.stages[1].t_start), b = low_entropy(f.stages[2].t_start), c = low_entropy(f.stages[2].t_end);
  EXPECT_LT(b, a - 1e-3);
  EXPECT_GT(c, b + 0.02);
}

TEST(Orthogonal, Examples) {
  Mat W = Vec::LinSpaced(4, 1, 4) * Eigen::RowVector3d(1, -1, 2);
  EXPECT_LT(orthogonal_components(W).cwiseAbs().maxCoeff(), 1e-12);
  Mat V = Mat::Zero(2, 3);
  V(0, 0) = 1;
  V(1, 2) = -2.5;
  EXPECT_NEAR(orthogonal_components(V)(0), 2.5, 1e-15);
  Mat Z = gaussian(3, 3, 2);
  Z.row(0).setZero();
  EXPECT_THROW(orthogonal_components(Z), ValidationError);
}

TEST(Orthogonal, RiseMarksStageFour) {
  const Fig2Run& f = fig2();
  ASSERT_EQ(f.stages.size(), 4u);
  const auto& tr = f.traj;
  const double interval = tr.times[1] - tr.times[0];
  std::vector<double> rel;
  for (const ModelParams& p : tr.snapshots) rel.push_back(orthogonal_components(p.W0).norm() / p.W0.norm());
  double onset = -1;
  for (std::size_t k = 0; k + 4 <= rel.size() && onset < 0; ++k) {
    if (tr.snapshot_times[k] <= f.stages[2].t_start) continue;
    bool sustained = true;
    for (std::size_t j = k; j < k + 4; ++j) sustained = sustained && rel[j] > 1e-2;
    if (sustained) onset = tr.snapshot_times[k];
  }
  EXPECT_NEAR(onset, f.stages[3].t_start, interval + 1e-9);
}

TEST(Svg, WellFormedAndDeterministic) {
  Mat W = gaussian(4, 3, 7);
  CondensationMatrix c = condensation(W);
  std::string h = svg_heatmap(c.C, c.ordering, "heat");
  EXPECT_EQ(h, svg_heatmap(c.C, c.ordering, "heat"));
  PcaResult p = pca_trajectory({W, gaussian(4, 3, 8)});
  std::string s = svg_scatter(p, "pca");
  EXPECT_EQ(s, svg_scatter(p, "pca"));
  std::string l = svg_lines({{"a", {0, 1, 2}, {1, 0.1, 0.01}}, {"b", {0, 1, 2}, {2, 2, 2}}}, "lines", "t", "y", true);
  for (const std::string& doc : {h, s, l}) {
    EXPECT_EQ(doc.rfind("<svg ", 0), 0u);
    EXPECT_EQ(count(doc, "<svg"), 1);
    EXPECT_EQ(doc.substr(doc.size() - 7), "</svg>\n");
    EXPECT_EQ(doc.find("nan"), std::string::npos);
    EXPECT_EQ(doc.find("inf"), std::string::npos);
  }
  EXPECT_EQ(count(h, "<rect x="), 16);
  EXPECT_EQ(count(s, "<circle"), 8);
}
