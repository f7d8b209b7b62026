#include <gtest/gtest.h>

#include <cmath>

#include "attn/critical.hpp"
#include "attn/population.hpp"
#include "attn/reduced.hpp"
#include "attn/rng.hpp"

using namespace attn;

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(xs.size());
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

Vec unit(int n, std::uint64_t seed) {
  Rng rng(seed);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.normal();
  return v.normalized();
}

void expect_row_stochastic(const Mat& A) {
  EXPECT_GE(A.minCoeff(), 0.0);
  for (Eigen::Index i = 0; i < A.rows(); ++i) EXPECT_NEAR(A.row(i).sum(), 1.0, 1e-12);
}

}  // namespace

TEST(ProxyAttention, ZeroPhiGivesPi) {
  MarkovSpec sp = build_transition(two_group(4, 0.7), 0.5);
  Mat A = proxy_attention(zero_params(4, 3), sp);
  for (int i = 0; i < 4; ++i) EXPECT_LT((A.row(i).transpose() - sp.pi()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ProxyAttention, ScalarExample) {
  MarkovSpec sp = build_transition(from_pi(vec({0.75, 0.25})), 0.8);
  Mat Phi(2, 2);
  Phi << 1, 0, 0, 0;
  Mat A = proxy_attention_phi<double>(Phi, sp.pi());
  const double e = std::exp(1.0);
  EXPECT_NEAR(A(0, 0), 0.75 * e / (0.75 * e + 0.25), 1e-15);
  EXPECT_NEAR(A(0, 0), 0.8907, 1e-4);
  EXPECT_NEAR(A(0, 1), 0.1093, 1e-4);
  EXPECT_LT((A.row(1) - sp.pi().transpose()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ProxyAttention, FocusAlongRay) {
  MarkovSpec sp = build_transition(two_group(3, 0.75), 0.8);
  const Vec& pi = sp.pi();
  const double k2 = 40 / (pi.squaredNorm() * pi(0));
  Mat A = proxy_attention_phi<double>(Mat(k2 * pi * pi.transpose()), pi);
  EXPECT_GT(A.col(0).minCoeff(), 0.99);
}

TEST(PopulationForward, Origin) {
  MarkovSpec sp = build_transition(geometric_pi(4), 0.6);
  PopulationState st = population_forward(zero_params(4, 5), sp);
  Vec u = (sp.pi().array() - 0.25).matrix();
  EXPECT_LT((st.gM + sp.pi() * u.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(st.gPhi.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_NEAR(st.loss, std::log(4.0), 1e-14);
  EXPECT_EQ(flatten<double>(param_gradient_population(zero_params(4, 5), sp)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PopulationForward, SecondCriticalPoint) {
  for (int d : {2, 3, 4}) {
    MarkovSpec sp = build_transition(two_group(d, 0.75), 0.8);
    CriticalPoint cp = find_kappa1(sp, 4);
    PopulationState st = population_forward(cp.params, sp);
    EXPECT_LT(st.gM.norm(), 1e-10);
    const Vec& pi = sp.pi();
    Vec q = pi.normalized();
    Vec u = (pi.array() - 1.0 / d).matrix().normalized();
    Mat V = var_matrix<double>(pi);
    Mat expect = -sp.lambda * cp.kappa1 * cp.kappa1 * V * u * q.transpose() * V;
    EXPECT_LT((st.gPhi - expect).cwiseAbs().maxCoeff(), 1e-8) << "d=" << d;
  }
}

TEST(PopulationForward, RowStochastic) {
  MarkovSpec sp = build_transition(from_pi(vec({0.75, 0.19, 0.05, 0.01})), 0.8);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PopulationState st = population_forward(init_params(4, 6, 1.0, seed), sp);
    expect_row_stochastic(st.A);
    expect_row_stochastic(st.Pm);
  }
}

TEST(PopulationForward, MPhiDerivativesByFiniteDifference) {
  MarkovSpec sp = build_transition(two_group(3, 0.6), 0.7);
  ModelParams p = init_params(3, 4, 0.8, 21);
  Mat M = p.M(), Phi = p.Phi();
  PopulationState st = population_mphi<double>(M, Phi, sp);
  const double h = 1e-5;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      Mat a = M, b = M;
      a(i, j) += h;
      b(i, j) -= h;
      double fd = (population_mphi<double>(a, Phi, sp).loss - population_mphi<double>(b, Phi, sp).loss) / (2 * h);
      EXPECT_NEAR(st.gM(i, j), fd, 1e-6);
      a = Phi;
      b = Phi;
      a(i, j) += h;
      b(i, j) -= h;
      fd = (population_mphi<double>(M, a, sp).loss - population_mphi<double>(M, b, sp).loss) / (2 * h);
      EXPECT_NEAR(st.gPhi(i, j), fd, 1e-6);
    }
}

TEST(ParamGradient, FiniteDifference) {
  MarkovSpec sp = build_transition(two_group(3, 0.6), 0.7);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ModelParams p = init_params(3, 4, 0.5, seed);
    Vec x = flatten<double>(p), g = flatten<double>(param_gradient_population(p, sp));
    const double h = 1e-5;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      Vec a = x, b = x;
      a(k) += h;
      b(k) -= h;
      double fd = (population_loss(unflatten<double>(a, 3, 4), sp) - population_loss(unflatten<double>(b, 3, 4), sp)) / (2 * h);
      EXPECT_NEAR(g(k), fd, 1e-6);
    }
  }
}

TEST(ParamGradient, TangentToRankOneManifold) {
  MarkovSpec sp = build_transition(two_group(4, 0.7), 0.6);
  const int m = 5;
  Vec a = unit(m, 3), b = unit(m, 4);
  RankOneState s = make_rank_one(vec({0.9, -0.2, 0.1, 0.3}), vec({0.5, 0.1, -0.4, 0.2}), 0.7, m, a, b);
  ParamGradient g = param_gradient_population(lift(s, 4, m), sp);
  Mat Pa = Mat::Identity(m, m) - a * a.transpose(), Pb = Mat::Identity(m, m) - b * b.transpose();
  EXPECT_LT((g.W0 * Pa).norm(), 1e-10);
  EXPECT_LT((Pa * g.W1).norm(), 1e-10);
  EXPECT_LT((Pa * g.WQ).norm() + (g.WQ * Pb).norm(), 1e-10);
  EXPECT_LT((Pa * g.WK).norm() + (g.WK * Pb).norm(), 1e-10);
  EXPECT_GT(grad_norm(g), 1e-3);
}

TEST(Population, LossAboveEntropyFloor) {
  MarkovSpec sp = build_transition(from_pi(vec({0.75, 0.19, 0.05, 0.01})), 0.8);
  double floor = entropy_floor(sp);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) EXPECT_GE(population_loss(init_params(4, 6, 2.0, seed), sp), floor);
}

TEST(Population, PhiGradientVanishes) {
  MarkovSpec sp = build_transition(two_group(3, 0.6), 0.7);
  Mat Phi = init_params(3, 3, 1.0, 5).Phi();
  EXPECT_LT(population_mphi<double>(Mat::Zero(3, 3), Phi, sp).gPhi.cwiseAbs().maxCoeff(), 1e-12);
  // one-hot attention rows
  Mat focus = Mat::Zero(3, 3);
  focus.col(0).setConstant(800);
  Mat M = init_params(3, 3, 1.0, 6).M();
  PopulationState st = population_mphi<double>(M, focus, sp);
  EXPECT_EQ(st.A.col(0).minCoeff(), 1.0);
  EXPECT_LT(st.gPhi.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Population, PermutationInvariance) {
  MarkovSpec sp = build_transition(two_group(4, 0.7), 0.6);
  ModelParams p = init_params(4, 5, 0.9, 13);
  const std::vector<int> perm = {0, 2, 3, 1};
  ModelParams q = p;
  for (int i = 0; i < 4; ++i) {
    q.W0.row(perm[i]) = p.W0.row(i);
    q.W1.col(perm[i]) = p.W1.col(i);
  }
  EXPECT_NEAR(population_loss(q, sp), population_loss(p, sp), 1e-12);
}

TEST(MonteCarlo, ShortContextIsBiased) {
  MarkovSpec sp = build_transition(two_group(3, 0.6), 0.7);
  ModelParams p = init_params(3, 4, 0.3, 9);
  double e3 = monte_carlo_agreement(p, sp, 1000, 1, 3).rel_error;
  double e5 = monte_carlo_agreement(p, sp, 100000, 1, 3).rel_error;
  EXPECT_GT(e5, 0.3);
  EXPECT_GT(e5, 0.5 * e3);
}

TEST(MonteCarlo, ConvergesWithSamples) {
  MarkovSpec sp = build_transition(two_group(3, 0.6), 0.7);
  ModelParams p = init_params(3, 4, 0.3, 9);
  double small = monte_carlo_agreement(p, sp, 1000, 50, 3).rel_error;
  std::vector<double> Ns = {1e3, 1e4, 1e5}, errs;
  for (double N : Ns) errs.push_back(monte_carlo_agreement(p, sp, static_cast<std::size_t>(N), 200, 3).rel_error);
  EXPECT_LT(errs.back(), small);
  EXPECT_NEAR(fit_loglog(Ns, errs).slope, -0.5, 0.2);
  EXPECT_LT(monte_carlo_agreement(p, sp, 200000, 200, 3).rel_error, 0.05);
}
