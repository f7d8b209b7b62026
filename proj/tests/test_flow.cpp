#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "attn/critical.hpp"
#include "attn/flow.hpp"
#include "attn/population.hpp"

using namespace attn;

namespace {

MarkovSpec fig2_spec() {
  Vec pi(4);
  pi << 0.75, 0.19, 0.05, 0.01;
  return build_transition(from_pi(pi), 0.8);
}

FlowConfig fig2_config(double T) {
  FlowConfig cfg;
  cfg.step_size = 0.05;
  cfg.max_time = T;
  cfg.record_every = 10;
  cfg.adaptive = true;
  cfg.snapshot_every = 0;
  return cfg;
}

double max_drift(const Trajectory& tr, const ModelParams& p0) {
  return (flatten<double>(tr.snapshots.back()) - flatten<double>(p0)).cwiseAbs().maxCoeff();
}

std::vector<std::string> labels(const std::vector<Stage>& st) {
  std::vector<std::string> out;
  for (const Stage& s : st) out.push_back(s.label);
  return out;
}

}  // namespace

TEST(Flow, OriginIsFixed) {
  ModelParams p0 = zero_params(4, 6);
  FlowConfig cfg;
  cfg.max_time = 20;
  Trajectory tr = integrate_flow(p0, fig2_spec(), cfg);
  EXPECT_EQ(max_drift(tr, p0), 0.0);
  for (const Metrics& m : tr.metrics) EXPECT_NEAR(m.loss, std::log(4.0), 1e-14);
}

TEST(Flow, SecondCriticalPointIsFixed) {
  MarkovSpec sp = build_transition(two_group(4, 0.75), 0.8);
  CriticalPoint cp = find_kappa1(sp, 4);
  FlowConfig cfg;
  cfg.max_time = 50;
  Trajectory tr = integrate_flow(cp.params, sp, cfg);
  EXPECT_LT(max_drift(tr, cp.params), 1e-8);
}

TEST(Flow, TimesIncreaseAndMatchMetrics) {
  FlowConfig cfg;
  cfg.max_time = 5;
  cfg.record_every = 3;
  Trajectory tr = integrate_flow(init_params(4, 4, 0.1, 1), fig2_spec(), cfg);
  ASSERT_EQ(tr.times.size(), tr.metrics.size());
  for (std::size_t k = 1; k < tr.times.size(); ++k) EXPECT_GT(tr.times[k], tr.times[k - 1]);
}

TEST(Flow, SyntheticRunHasFourStages) {
  MarkovSpec sp = fig2_spec();
  Trajectory tr = integrate_flow(init_params(4, 16, 1e-3, 1), sp, fig2_config(400));
  std::vector<Stage> st = stage_times(tr);
  EXPECT_EQ(labels(st), (std::vector<std::string>{"I", "II", "III", "IV"}));
  for (std::size_t k = 1; k < st.size(); ++k) EXPECT_EQ(st[k].t_start, st[k - 1].t_end);
  // plateau at log d, then two separate drops
  EXPECT_NEAR(tr.metrics[10].loss, std::log(4.0), 1e-3);
  auto loss_at = [&](double t) {
    for (const Metrics& m : tr.metrics)
      if (m.t >= t) return m.loss;
    return tr.metrics.back().loss;
  };
  ASSERT_EQ(st.size(), 4u);
  double early = loss_at(st[1].t_start), mid = loss_at(st[2].t_start), late = tr.metrics.back().loss;
  EXPECT_LT(early, std::log(4.0) - 0.5);
  EXPECT_LT(late, mid - 0.05);
  EXPECT_GT(late, entropy_floor(sp));
}

TEST(Stages, ConstantTrajectoryIsEmpty) {
  FlowConfig cfg;
  cfg.max_time = 10;
  cfg.record_every = 2;
  Trajectory tr = integrate_flow(zero_params(3, 3), build_transition(two_group(3, 0.6), 0.5), cfg);
  EXPECT_TRUE(stage_times(tr).empty());
}

TEST(Stages, TruncatedRunIsStageOne) {
  Trajectory tr = integrate_flow(init_params(4, 16, 1e-4, 1), fig2_spec(), fig2_config(30));
  EXPECT_EQ(labels(stage_times(tr)), std::vector<std::string>{"I"});
}

TEST(Stages, NeedsTenRecords) {
  FlowConfig cfg;
  cfg.max_time = 1;
  cfg.record_every = 4;
  Trajectory tr = integrate_flow(init_params(3, 3, 0.1, 1), build_transition(two_group(3, 0.6), 0.5), cfg);
  ASSERT_LT(tr.metrics.size(), 10u);
  EXPECT_THROW(stage_times(tr), ValidationError);
}

TEST(Flow, AdaptiveLossIsMonotone) {
  FlowConfig cfg = fig2_config(150);
  cfg.step_size = 0.2;
  cfg.record_every = 1;
  Trajectory tr = integrate_flow(init_params(4, 8, 1e-2, 3), fig2_spec(), cfg);
  for (std::size_t k = 1; k < tr.metrics.size(); ++k) EXPECT_LE(tr.metrics[k].loss, tr.metrics[k - 1].loss + 1e-12);
}

TEST(Flow, EulerConvergesAtFirstOrder) {
  MarkovSpec sp = build_transition(two_group(3, 0.75), 0.8);
  ModelParams p0 = init_params(3, 4, 0.3, 2);
  Vec ref = flatten<double>(flow_to(p0, sp, 5.0, 0.01, Integrator::rk4));
  std::vector<double> hs = {0.1, 0.01, 0.001}, errs;
  for (double h : hs) errs.push_back((flatten<double>(flow_to(p0, sp, 5.0, h, Integrator::euler)) - ref).norm());
  EXPECT_NEAR(fit_loglog(hs, errs).slope, 1.0, 0.1);
  double rk = (flatten<double>(flow_to(p0, sp, 5.0, 0.1, Integrator::rk4)) - ref).norm();
  EXPECT_LT(rk, 1e-3 * errs[0]);
}

TEST(Timing, ExitTimeLinearInLogEps) {
  MarkovSpec sp = build_transition(two_group(2, 0.75), 0.8);
  FlowConfig cfg;
  cfg.step_size = 0.05;
  cfg.max_time = 2000;
  cfg.record_every = 2;
  TimingTable tab = timing_scaling(sp, 4, {1e-2, 1e-3, 1e-4}, {1, 2, 3}, cfg);
  ASSERT_EQ(tab.rows.size(), 3u);
  EXPECT_GT(tab.fit.r2, 0.98);
  EXPECT_GT(tab.fit.slope, 0);
  EXPECT_LT(tab.rows.back().rel_spread, 0.1);
}

TEST(Timing, RejectsBadEpsList) {
  MarkovSpec sp = build_transition(two_group(2, 0.75), 0.8);
  FlowConfig cfg;
  EXPECT_THROW(timing_scaling(sp, 4, {1e-3}, {1}, cfg), ValidationError);
  EXPECT_THROW(timing_scaling(sp, 4, {1e-3, 2e-3, 5e-3}, {1}, cfg), ValidationError);
}

TEST(Linearization, QuadraticWindow) {
  MarkovSpec sp = build_transition(two_group(3, 0.75), 0.8);
  CriticalPoint cp = find_kappa1(sp, 4);
  Linearization lin = linearize(cp, sp, JacobianMethod::complex_step);
  std::vector<double> es = {1e-3, 1e-4, 1e-5}, errs;
  for (double e : es) errs.push_back(linearization_error(cp.params, lin, sp, e, 10.0, 7));
  EXPECT_NEAR(fit_loglog(es, errs).slope, 2.0, 0.2);
}

TEST(Linearization, AlignsWithTopEigenspace) {
  MarkovSpec sp = build_transition(two_group(3, 0.75), 0.8);
  CriticalPoint cp = find_kappa1(sp, 4);
  Linearization lin = linearize(cp, sp, JacobianMethod::complex_step);
  EXPECT_GT(alignment_cosine(cp.params, lin, sp, 1e-5, 1e-2, 3), 0.999);
}

TEST(FlowConfig, Validation) {
  FlowConfig cfg;
  cfg.step_size = 0;
  EXPECT_THROW(validate(cfg), ValidationError);
  cfg = FlowConfig();
  cfg.max_time = -1;
  EXPECT_THROW(validate(cfg), ValidationError);
  cfg = FlowConfig();
  cfg.record_every = 0;
  EXPECT_THROW(validate(cfg), ValidationError);
  EXPECT_NO_THROW(validate(FlowConfig()));
}

TEST(Flow, MetricsCsv) {
  FlowConfig cfg;
  cfg.max_time = 1;
  cfg.record_every = 5;
  Trajectory tr = integrate_flow(init_params(3, 3, 0.1, 1), build_transition(two_group(3, 0.6), 0.5), cfg);
  std::string csv = metrics_csv(tr);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "t,loss,norm_W0,norm_W1,norm_WQ,norm_WK,cond_cos,attn_entropy_min,attn_entropy_max,conservation_Q,orth_norm");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), tr.metrics.size() + 1);
}
