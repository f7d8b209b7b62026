#pragma once

#include <functional>
#include <string>
#include <vector>

#include "attn/common.hpp"
#include "attn/markov.hpp"
#include "attn/model.hpp"

namespace attn {

struct Metrics {
  double t = 0;
  double loss = 0;
  double norm_W0 = 0, norm_W1 = 0, norm_WQ = 0, norm_WK = 0;
  double cond_cos = 0;
  Vec entropy;  // proxy attention entropy per row
  double entropy_min = 0, entropy_max = 0, entropy_low_mean = 0;  // rows i >= 2
  double Q = 0;
  double orth_norm = 0;
  double low_norm = 0;  // mean |W0[i,:]| over i >= 2
  double min_pair_cos = 0;
};

// pi only enters through the proxy attention and Q.
Metrics compute_metrics(double t, double loss, const ModelParams& p, const Vec& pi);
// Q = (1 - pi_1) g_1 - pi_1 sum_{i>=2} g_i, with g = W0 v the rank-one profile.
double conservation_from_params(const ModelParams& p, const Vec& pi);

struct Trajectory {
  std::vector<double> times;
  std::vector<Metrics> metrics;
  std::vector<double> snapshot_times;
  std::vector<ModelParams> snapshots;
  long long accepted_steps = 0, halvings = 0;
  bool stopped_early = false;
};

enum class Integrator { euler, rk4 };

struct FlowConfig {
  double step_size = 0.05;
  double max_time = 10;
  Integrator integrator = Integrator::rk4;
  int record_every = 10;
  bool adaptive = false;
  int max_halvings = 40;
  int snapshot_every = 1;  // in records; 0 keeps only the final state
};
void validate(const FlowConfig& cfg);

// Called at every record; return true to stop the run there.
using RecordHook = std::function<bool(const Metrics&, const ModelParams&)>;

Trajectory integrate_flow(const ModelParams& init, const MarkovSpec& spec, const FlowConfig& cfg,
                          const RecordHook& hook = nullptr);
// Plain fixed-step integration to time T without recording.
ModelParams flow_to(const ModelParams& init, const MarkovSpec& spec, double T, double h, Integrator integ);

struct StageThresholds {
  double cond_cos = 0.99;
  double slope_frac = 0.5;
  double orth_frac = 1e-2;
  double entropy_rise = 0.02;
  double wq_growth = 3.0;
};

struct Stage {
  std::string label;
  double t_start = 0, t_end = 0;
};
std::vector<Stage> stage_times(const Trajectory& traj, const StageThresholds& th = {});

// First time the loss has fallen by frac of the gap between its start
// value and the entropy floor; linear interpolation between records.
double stage1_exit_time(const Trajectory& traj, double floor, double frac = 0.05);

struct TimingRow {
  double eps = 0;
  std::vector<double> exit_times;
  double mean = 0, rel_spread = 0;
};
struct TimingTable {
  std::vector<TimingRow> rows;
  LineFit fit;  // mean exit time vs log(1/eps)
};
TimingTable timing_scaling(const MarkovSpec& spec, int m, const std::vector<double>& eps_list,
                           const std::vector<std::uint64_t>& seeds, const FlowConfig& cfg, double exit_frac = 0.05,
                           int threads = 1);

std::string metrics_csv(const Trajectory& traj);

}  // namespace attn

#include "attn/critical.hpp"

namespace attn {

// Deviation |theta(t) - theta* - exp(J t) dtheta(0)| for a start at
// theta* + eps * (random unit direction).
double linearization_error(const ModelParams& center, const Linearization& lin, const MarkovSpec& spec, double eps,
                           double t, std::uint64_t seed, double h = 0.01);

// Share of the displacement lying in the top eigenspace once eps e^{mu t}
// reaches target.
double alignment_cosine(const ModelParams& center, const Linearization& lin, const MarkovSpec& spec, double eps,
                        double target, std::uint64_t seed, double h = 0.01);

}  // namespace attn
