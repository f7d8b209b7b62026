#include <gtest/gtest.h>

#include <cmath>
#include <json.hpp>

#include "attn/critical.hpp"
#include "attn/flow.hpp"
#include "attn/population.hpp"

using namespace attn;

namespace {

MarkovSpec two_group_spec(int d, double pi1, double lambda) { return build_transition(two_group(d, pi1), lambda); }

struct Second {
  MarkovSpec spec;
  CriticalPoint cp;
  Linearization lin;
};

const Second& second3() {
  static const Second s = [] {
    Second r;
    r.spec = two_group_spec(3, 0.75, 0.8);
    r.cp = find_kappa1(r.spec, 4);
    r.lin = linearize(r.cp, r.spec);
    return r;
  }();
  return s;
}

}  // namespace

TEST(Origin, TopEigenvalueIsCouplingSingularValue) {
  Vec pi(2);
  pi << 0.75, 0.25;
  MarkovSpec sp = build_transition(from_pi(pi), 0.8);
  Linearization lin = linearize(origin_point(2, 2), sp);
  Vec u = (pi.array() - 0.5).matrix();
  double sv = Eigen::JacobiSVD<Mat>(pi * u.transpose()).singularValues()(0);
  EXPECT_NEAR(sv, pi.norm() * u.norm(), 1e-15);
  EXPECT_NEAR(lin.mu, sv, 1e-7);
}

TEST(Kappa1, TwoTokens) {
  Vec pi(2);
  pi << 0.75, 0.25;
  MarkovSpec sp = build_transition(from_pi(pi), 0.8);
  CriticalPoint cp = find_kappa1(sp, 3);
  EXPECT_LT(cp.grad_norm, 1e-9);
  PopulationState st = population_forward(cp.params, sp);
  for (int i = 0; i < 2; ++i) EXPECT_LT((st.Pm.row(i).transpose() - pi).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Kappa1, FourTokensRowsEqualPi) {
  MarkovSpec sp = two_group_spec(4, 0.75, 0.8);
  CriticalPoint cp = find_kappa1(sp, 5);
  PopulationState st = population_forward(cp.params, sp);
  for (int i = 0; i < 4; ++i) EXPECT_LT((st.Pm.row(i).transpose() - sp.pi()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(grad_norm(param_gradient_population(cp.params, sp)), 1e-9);
}

TEST(Kappa1, ClosedForm) {
  for (int d : {2, 3, 5})
    for (double pi1 : {0.6, 0.75, 0.9}) {
      MarkovSpec sp = two_group_spec(d, pi1, 0.7);
      CriticalPoint cp = find_kappa1(sp, 4);
      EXPECT_NEAR(cp.kappa1 * cp.kappa1 / kappa1_squared_closed_form(sp), 1.0, 1e-10) << d << " " << pi1;
    }
}

TEST(Kappa1, UniformHasNoSecondPoint) {
  MarkovSpec sp;
  sp.dist.d = 3;
  sp.dist.pi = Vec::Constant(3, 1.0 / 3);
  sp.lambda = 0.5;
  sp.P = 0.5 * Mat::Identity(3, 3) + 0.5 * Vec::Ones(3) * sp.dist.pi.transpose();
  EXPECT_THROW(find_kappa1(sp, 4), ValidationError);
}

TEST(Kappa1, CustomAlpha) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  Vec a(4);
  a << 1, 2, -1, 0.5;
  CriticalPoint cp = find_kappa1(sp, 4, a);
  EXPECT_NEAR(cp.alpha1.norm(), 1.0, 1e-15);
  EXPECT_LT(cp.grad_norm, 1e-9);
  EXPECT_NEAR(cp.kappa1, find_kappa1(sp, 4).kappa1, 1e-12);
}

TEST(Linearize, UnstableConstant) {
  const Second& s = second3();
  double c = unstable_constant(s.spec, s.cp.kappa1);
  EXPECT_GT(c, 0);
  EXPECT_NEAR(s.lin.mu / c, 1.0, 1e-4);
}

TEST(Linearize, BlockStructure) {
  const Second& s = second3();
  UnstableReport r = unstable_direction_check(s.cp, s.lin, s.spec);
  EXPECT_LE(r.out_block_max, 1e-8);
  EXPECT_LT(r.cross_block, 1e-7);
  EXPECT_NEAR(r.attn_block_max, s.lin.mu, 1e-9);
}

TEST(Linearize, UnstableDirectionIsRankOne) {
  const Second& s = second3();
  UnstableReport r = unstable_direction_check(s.cp, s.lin, s.spec);
  EXPECT_LT(r.rank_one_residual_Q, 1e-6);
  EXPECT_LT(r.rank_one_residual_K, 1e-6);
  EXPECT_LT(r.right_vector_angle, 1e-3);
  EXPECT_GT(r.left_alignment, 1 - 1e-6);
  EXPECT_GE(r.phi_cosine, 1 - 1e-6);
  EXPECT_GT(r.focus_min_first_entry, 0.99);
}

TEST(Linearize, ComplexStepAgreesWithDifferences) {
  const Second& s = second3();
  Linearization cs = linearize(s.cp, s.spec, JacobianMethod::complex_step);
  EXPECT_LT((cs.J - s.lin.J).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT(cs.asymmetry, 1e-10);
  EXPECT_LT(s.lin.asymmetry, 1e-6);
  EXPECT_NEAR(cs.mu, s.lin.mu, 1e-7);
}

TEST(Linearize, ThreadsGiveSameJacobian) {
  const Second& s = second3();
  EXPECT_EQ(linearize(s.cp, s.spec, JacobianMethod::central_fd, 0, 3).J, s.lin.J);
}

TEST(Degenerate, SoftmaxEquations) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  CriticalPoint dp = find_degenerate_point(sp, 4);
  EXPECT_EQ(dp.kind, CriticalKind::degenerate);
  EXPECT_LT(dp.grad_norm, 1e-9);
  EXPECT_GT(dp.gamma(0), 0);
  EXPECT_LT(dp.gamma(1), 0);
  EXPECT_GT(dp.beta(0), dp.beta(1));
  PopulationState st = population_forward(dp.params, sp);
  EXPECT_LT((st.Pm.row(0) - sp.P.row(0)).cwiseAbs().maxCoeff(), 1e-10);
  Vec low = 0.5 * (sp.P.row(1) + sp.P.row(2)).transpose();
  for (int i = 1; i < 3; ++i) EXPECT_LT((st.Pm.row(i).transpose() - low).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GT(st.A(0, 0), 1 - 1e-10);
  for (int i = 1; i < 3; ++i) {
    EXPECT_NEAR(st.A(i, 1), 0.5, 1e-10);
    EXPECT_NEAR(st.A(i, 2), 0.5, 1e-10);
  }
}

TEST(Degenerate, StationaryUnderFlow) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  CriticalPoint dp = find_degenerate_point(sp, 4);
  FlowConfig cfg;
  cfg.max_time = 100;
  cfg.record_every = 50;
  Trajectory tr = integrate_flow(dp.params, sp, cfg);
  EXPECT_LT((flatten<double>(tr.snapshots.back()) - flatten<double>(dp.params)).norm(), 1e-8);
}

TEST(Degenerate, HessianKernel) {
  for (auto [pi1, lambda] : {std::pair{0.75, 0.8}, std::pair{0.7, 0.6}}) {
    MarkovSpec sp = two_group_spec(3, pi1, lambda);
    CriticalPoint dp = find_degenerate_point(sp, 4);
    Linearization lin = linearize(dp, sp);
    EXPECT_LE(lin.mu, 1e-8);
    int zeros = 0;
    for (Eigen::Index i = 0; i < lin.eigenvalues.size(); ++i) zeros += std::abs(lin.eigenvalues(i)) <= 1e-8;
    EXPECT_GE(zeros, 3);
  }
}

TEST(Degenerate, RejectsWrongDimension) {
  EXPECT_THROW(find_degenerate_point(two_group_spec(4, 0.75, 0.8), 4), ValidationError);
}

TEST(Critical, Json) {
  const Second& s = second3();
  auto j = nlohmann::json::parse(critical_to_json(s.cp, s.spec));
  EXPECT_EQ(j["kind"], "second");
  EXPECT_EQ(j["d"], 3);
  EXPECT_DOUBLE_EQ(j["kappa1"].get<double>(), s.cp.kappa1);
  auto l = nlohmann::json::parse(linearization_to_json(s.lin, 2));
  EXPECT_EQ(l["eigenvalues"].size(), static_cast<std::size_t>(s.lin.eigenvalues.size()));
  EXPECT_EQ(l["top_eigenvectors"].size(), 2u);
  EXPECT_DOUBLE_EQ(l["mu"].get<double>(), s.lin.mu);
}
