#include <gtest/gtest.h>

#include <cmath>

#include "attn/critical.hpp"
#include "attn/flow.hpp"
#include "attn/reduced.hpp"
#include "attn/rng.hpp"

using namespace attn;

namespace {

MarkovSpec two_group_spec(int d, double pi1, double lambda) { return build_transition(two_group(d, pi1), lambda); }

Vec vec(std::initializer_list<double> xs) {
  Vec v(xs.size());
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

Vec gaussian(int n, Rng& rng) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

double spread(const Vec& v) { return v.tail(v.size() - 1).maxCoeff() - v.tail(v.size() - 1).minCoeff(); }

// gamma = kappa1 pi/|pi|, beta = kappa1 (pi - 1/d)/|pi - 1/d|
std::pair<Vec, Vec> second_point_profile(const MarkovSpec& sp, double kappa1) {
  const int d = sp.d();
  return {kappa1 * sp.pi().normalized(), kappa1 * (sp.pi().array() - 1.0 / d).matrix().normalized()};
}

}  // namespace

TEST(Lift, SecondCriticalPoint) {
  MarkovSpec sp = two_group_spec(4, 0.75, 0.8);
  CriticalPoint cp = find_kappa1(sp, 5);
  auto [g, b] = second_point_profile(sp, cp.kappa1);
  ModelParams p = lift(make_rank_one(g, b, 0, 5), 4, 5);
  EXPECT_LT((flatten<double>(p) - flatten<double>(cp.params)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Lift, ZeroGamma) {
  ModelParams p = lift(make_rank_one(Vec::Zero(3), vec({1, 2, 3}), 0.5, 4), 3, 4);
  EXPECT_EQ(p.W0.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lift, ProjectRoundTrip) {
  Rng rng(4);
  const int m = 6;
  Vec a = gaussian(m, rng).normalized(), at = gaussian(m, rng).normalized();
  RankOneState s = make_rank_one(gaussian(3, rng), gaussian(3, rng), 0.3, m, a, at);
  RankOneState r = project(lift(s, 3, m), a, at);
  EXPECT_LT((r.gamma - s.gamma).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((r.beta - s.beta).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(r.lamQ, s.lamQ, 1e-14);
  EXPECT_NEAR(r.lamK, s.lamK, 1e-14);
  EXPECT_NEAR(s.eta(), 0.3, 1e-15);
}

TEST(ReducedRhs, VanishesAtSecondPoint) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  CriticalPoint cp = find_kappa1(sp, 4);
  auto [g, b] = second_point_profile(sp, cp.kappa1);
  RankOneRate r = reduced_rhs(make_rank_one(g, b, 0, 4), sp);
  EXPECT_LT(r.dgamma.norm() + r.dbeta.norm(), 1e-10);
  EXPECT_EQ(r.deta, 0.0);
}

TEST(ReducedRhs, MatchesFullFlowProjection) {
  MarkovSpec sp = build_transition(geometric_pi(4), 0.6);
  Rng rng(11);
  const int m = 5;
  for (int trial = 0; trial < 4; ++trial) {
    Vec a = gaussian(m, rng).normalized(), at = gaussian(m, rng).normalized();
    RankOneState s = make_rank_one(0.7 * gaussian(4, rng), 0.7 * gaussian(4, rng), 0.4, m, a, at);
    RankOneRate r = reduced_rhs(s, sp);
    ParamGradient g = param_gradient_population(lift(s, 4, m), sp);
    EXPECT_LT((r.dgamma + g.W0 * a).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((r.dbeta + g.W1.transpose() * a).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(r.dlamQ, -a.dot(g.WQ * at), 1e-10);
    EXPECT_NEAR(r.dlamK, -a.dot(g.WK * at), 1e-10);
    EXPECT_NEAR(r.deta, r.dlamQ * s.lamK + s.lamQ * r.dlamK, 1e-12);
  }
}

TEST(ReducedRhs, PreservesSymmetry) {
  MarkovSpec sp = two_group_spec(4, 0.7, 0.6);
  RankOneRate r = reduced_rhs(make_rank_one(vec({0.8, -0.3, -0.3, -0.3}), vec({0.5, 0.2, 0.2, 0.2}), 0.9, 3), sp);
  EXPECT_LT(spread(r.dgamma), 1e-13);
  EXPECT_LT(spread(r.dbeta), 1e-13);
}

TEST(Conservation, VanishesAlongPi) {
  for (int d : {3, 4, 6}) {
    MarkovSpec sp = two_group_spec(d, 0.7, 0.5);
    EXPECT_LT(std::abs(conservation_quantity(Vec(sp.pi()), sp)), 1e-15);
  }
}

TEST(Conservation, IncreasesWithFirstCoordinate) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  Vec g = vec({0.4, -0.1, -0.1});
  double q0 = conservation_quantity(g, sp);
  g(0) += 0.2;
  EXPECT_NEAR(conservation_quantity(g, sp) - q0, 0.25 * 0.2, 1e-15);
}

TEST(Conservation, RateMatchesAttentionEigenvalue) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  CriticalPoint cp = find_kappa1(sp, 4);
  auto [g, b] = second_point_profile(sp, cp.kappa1);
  Linearization lin = linearize(cp, sp, JacobianMethod::complex_step);
  double rate = eta_rate(g, b, sp);
  // eta = lamQ lamK, each factor grows at the eigenvalue rate
  EXPECT_NEAR(rate / (2 * lin.mu), 1.0, 1e-6);
  ReducedTrajectory tr = integrate_reduced(make_rank_one(g, b, 1e-8, 4), sp, 0.01, 600, 10);
  std::vector<double> Q;
  for (const RankOneState& s : tr.states) Q.push_back(conservation_quantity(s, sp));
  RateFit rf = fit_conservation_rate(tr.times, Q, g.norm());
  EXPECT_GE(rf.points, 10);
  EXPECT_NEAR(rf.fit.slope / rate, 1.0, 0.05);
  EXPECT_GT(rf.fit.r2, 0.999);
}

TEST(TwoGroup, NoAttentionAtZeroEta) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  TwoGroupState s = two_group_state(0.5, -0.2, 0.3, -0.1, 0.0, sp);
  EXPECT_DOUBLE_EQ(s.xi1, 0.75);
  EXPECT_DOUBLE_EQ(s.xi2, 0.75);
  EXPECT_EQ(two_group_rhs(s, sp).deta, 0.0);
  EXPECT_NEAR(s.m1, s.g2 + 0.75 * s.dgamma, 1e-15);
}

TEST(TwoGroup, AgreesWithReducedRhs) {
  Rng rng(5);
  for (int d : {3, 4}) {
    MarkovSpec sp = two_group_spec(d, 0.7, 0.6);
    for (int trial = 0; trial < 5; ++trial) {
      TwoGroupState s = two_group_state(rng.normal(), rng.normal(), rng.normal(), rng.normal(), std::abs(rng.normal()), sp);
      TwoGroupRate t = two_group_rhs(s, sp);
      RankOneRate r = reduced_rhs(embed(s, d, 3), sp);
      EXPECT_NEAR(t.dg1, r.dgamma(0), 1e-10);
      EXPECT_NEAR(t.dg2, r.dgamma(1), 1e-10);
      EXPECT_NEAR(t.db1, r.dbeta(0), 1e-10);
      EXPECT_NEAR(t.db2, r.dbeta(1), 1e-10);
      EXPECT_NEAR(t.deta, r.deta, 1e-10);
    }
  }
}

TEST(TwoGroup, ResidualsVanishAtDegeneratePoint) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  CriticalPoint dp = find_degenerate_point(sp, 4);
  TwoGroupState s = two_group_state(dp.gamma(0), dp.gamma(1), dp.beta(0), dp.beta(1), dp.eta, sp);
  EXPECT_LT(std::abs(s.r1), 1e-10);
  EXPECT_LT(std::abs(s.r2), 1e-10);
}

TEST(TwoGroup, AgreesWithFullFlow) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  CriticalPoint cp = find_kappa1(sp, 4);
  auto [g, b] = second_point_profile(sp, cp.kappa1);
  TwoGroupState s0 = two_group_state(g(0), g(1), b(0), b(1), 1e-6, sp);
  TwoGroupTrajectory tg = integrate_two_group(s0, sp, 0.01, 300, 100);
  FlowConfig cfg;
  cfg.step_size = 0.01;
  cfg.max_time = 300;
  cfg.record_every = 100;
  cfg.snapshot_every = 1;
  Trajectory tr = integrate_flow(lift(embed(s0, 3, 4), 3, 4), sp, cfg);
  ASSERT_EQ(tr.snapshots.size(), tg.states.size());
  Vec e1 = Vec::Unit(4, 0);
  double worst = 0;
  for (std::size_t k = 0; k < tg.states.size(); ++k) {
    RankOneState p = project(tr.snapshots[k], e1, e1);
    const TwoGroupState& s = tg.states[k];
    worst = std::max({worst, std::abs(p.gamma(0) / s.g1 - 1), std::abs(p.gamma(1) / s.g2 - 1),
                      std::abs(p.eta() / s.eta - 1)});
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(TwoGroup, RedistributionSigns) {
  for (int d : {3, 4}) {
    MarkovSpec sp = two_group_spec(d, 0.75, 0.8);
    CriticalPoint cp = find_kappa1(sp, 4);
    auto [g, b] = second_point_profile(sp, cp.kappa1);
    TwoGroupTrajectory tg = integrate_two_group(two_group_state(g(0), g(1), b(0), b(1), 1e-8, sp), sp, 0.01, 600, 10);
    // the two-group start has Q exactly 0; use rounding scale as the floor
    const double floor = std::max(std::abs(tg.Q[0]), 1e-16 * g.norm());
    int checked = 0;
    for (std::size_t k = 0; k < tg.states.size(); ++k) {
      const double q = std::abs(tg.Q[k]);
      if (q <= 10 * floor || q >= 1e-2 * g.norm()) continue;
      TwoGroupRate r = two_group_rhs(tg.states[k], sp);
      EXPECT_LT(r.dg1 * r.dg2, 0) << "t=" << tg.times[k];
      ++checked;
    }
    EXPECT_GT(checked, 20);
  }
}

TEST(TwoGroup, Csv) {
  MarkovSpec sp = two_group_spec(3, 0.75, 0.8);
  TwoGroupTrajectory tg = integrate_two_group(two_group_state(0.5, -0.2, 0.3, -0.1, 0.1, sp), sp, 0.1, 1, 2);
  std::string csv = two_group_csv(tg);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "t,g1,g2,b1,b2,eta,xi1,xi2,r1,r2,Q");
}

TEST(Manifold, DistanceOfLiftIsZero) {
  Rng rng(8);
  const int m = 5;
  RankOneState s = make_rank_one(gaussian(4, rng), gaussian(4, rng), 0.6, m, gaussian(m, rng).normalized(),
                                 gaussian(m, rng).normalized());
  ModelParams p = lift(s, 4, m);
  EXPECT_LT(manifold_distance(p), 1e-14);
  Vec x = flatten<double>(p);
  x += 1e-6 * gaussian(static_cast<int>(x.size()), rng);
  double dist = manifold_distance(unflatten<double>(x, 4, m));
  EXPECT_GE(dist, 1e-7);
  EXPECT_LE(dist, 1e-5);
}

TEST(Manifold, FlowStaysOnManifold) {
  MarkovSpec sp = two_group_spec(4, 0.75, 0.8);
  Rng rng(2);
  const int m = 6;
  Vec a = gaussian(m, rng).normalized(), at = gaussian(m, rng).normalized();
  ModelParams p0 = lift(make_rank_one(vec({0.02, 0.01, 0.01, 0.01}), vec({0.01, -0.02, -0.02, -0.02}), 1e-4, m, a, at), 4, m);
  FlowConfig cfg;
  cfg.max_time = 200;
  cfg.record_every = 20;
  double dist = 0, spr = 0;
  integrate_flow(p0, sp, cfg, [&](const Metrics&, const ModelParams& p) {
    dist = std::max(dist, manifold_distance(p));
    spr = std::max(spr, low_token_spread(p, a));
    return false;
  });
  EXPECT_LT(dist, 1e-8);
  EXPECT_LT(spr, 1e-10);
}
