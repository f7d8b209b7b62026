#include "attn/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>

#include "attn/analysis.hpp"
#include "attn/parallel.hpp"
#include "attn/population.hpp"
#include "attn/rng.hpp"

namespace attn {

double conservation_from_params(const ModelParams& p, const Vec& pi) {
  if (p.W0.squaredNorm() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(p.W0, Eigen::ComputeThinV);
  Vec g = p.W0 * svd.matrixV().col(0);
  if (g(0) < 0) g = -g;
  const double tail = g.sum() - g(0);
  return (1 - pi(0)) * g(0) - pi(0) * tail;
}

Metrics compute_metrics(double t, double loss, const ModelParams& p, const Vec& pi) {
  Metrics mt;
  mt.t = t;
  mt.loss = loss;
  mt.norm_W0 = p.W0.norm();
  mt.norm_W1 = p.W1.norm();
  mt.norm_WQ = p.WQ.norm();
  mt.norm_WK = p.WK.norm();
  mt.cond_cos = condensation_cosine(p.W0, pi);
  mt.entropy = attention_entropy(proxy_attention_phi<double>(p.Phi(), pi));
  const int d = p.d();
  if (d > 1) {
    const Vec low = mt.entropy.tail(d - 1);
    mt.entropy_min = low.minCoeff();
    mt.entropy_max = low.maxCoeff();
    mt.entropy_low_mean = low.mean();
    mt.low_norm = p.W0.bottomRows(d - 1).rowwise().norm().mean();
  }
  mt.Q = conservation_from_params(p, pi);
  mt.orth_norm = p.W0.row(0).squaredNorm() > 0 ? orthogonal_components(p.W0).norm() : 0.0;
  mt.min_pair_cos = min_abs_offdiag(condensation(p.W0).C);
  return mt;
}

void validate(const FlowConfig& cfg) {
  if (!(cfg.step_size > 0)) throw ValidationError("step_size must be > 0");
  if (!(cfg.max_time > 0)) throw ValidationError("max_time must be > 0");
  if (cfg.record_every < 1) throw ValidationError("record_every must be >= 1");
  if (cfg.max_halvings < 0) throw ValidationError("max_halvings must be >= 0");
  if (cfg.snapshot_every < 0) throw ValidationError("snapshot_every must be >= 0");
}

namespace {

struct Stepper {
  const MarkovSpec& spec;
  int d, m;
  Vec rhs(const Vec& x) const { return -flat_gradient<double>(x, d, m, spec); }
  Vec step(const Vec& x, double h, Integrator integ) const {
    if (integ == Integrator::euler) return x + h * rhs(x);
    const Vec k1 = rhs(x);
    const Vec k2 = rhs(x + 0.5 * h * k1);
    const Vec k3 = rhs(x + 0.5 * h * k2);
    const Vec k4 = rhs(x + h * k3);
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  double loss(const Vec& x) const { return population_loss(unflatten<double>(x, d, m), spec); }
};

}  // namespace

Trajectory integrate_flow(const ModelParams& init, const MarkovSpec& spec, const FlowConfig& cfg,
                          const RecordHook& hook) {
  validate(cfg);
  if (init.d() != spec.d()) throw ValidationError("parameter and data vocabulary sizes differ");
  const int d = init.d(), m = init.m();
  Stepper st{spec, d, m};
  Trajectory tr;
  Vec x = flatten<double>(init);
  double L = st.loss(x);
  const double tau = cfg.record_every * cfg.step_size;
  const long long nrec = static_cast<long long>(std::floor(cfg.max_time / tau + 1e-9));

  auto record = [&](long long k, bool last) {
    const double t = static_cast<double>(k) * tau;
    const ModelParams p = unflatten<double>(x, d, m);
    tr.times.push_back(t);
    tr.metrics.push_back(compute_metrics(t, L, p, spec.pi()));
    if (last || (cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0)) {
      if (tr.snapshot_times.empty() || tr.snapshot_times.back() != t) {
        tr.snapshot_times.push_back(t);
        tr.snapshots.push_back(p);
      }
    }
    return hook && hook(tr.metrics.back(), p);
  };

  if (record(0, nrec == 0)) {
    tr.stopped_early = true;
    return tr;
  }
  for (long long k = 1; k <= nrec; ++k) {
    double remaining = tau, hcur = cfg.step_size;
    while (remaining > 1e-12 * tau) {
      double h = std::min(hcur, remaining);
      if (remaining - h < 1e-12 * tau) h = remaining;
      int halvings = 0;
      for (;;) {
        const Vec xn = st.step(x, h, cfg.integrator);
        if (!cfg.adaptive) {
          if (!xn.allFinite()) throw CertificationError(fmt::format("flow diverged near t = {}", (k - 1) * tau));
          x = xn;
          L = std::numeric_limits<double>::quiet_NaN();
          break;
        }
        const double Ln = st.loss(xn);
        if (xn.allFinite() && Ln <= L + 1e-12) {
          x = xn;
          L = Ln;
          break;
        }
        if (++halvings > cfg.max_halvings)
          throw CertificationError(
              fmt::format("loss kept increasing after {} step halvings near t = {}", cfg.max_halvings, (k - 1) * tau));
        h *= 0.5;
        hcur = h;
        ++tr.halvings;
      }
      ++tr.accepted_steps;
      remaining -= h;
      hcur = std::min(cfg.step_size, 2 * hcur);
    }
    if (!cfg.adaptive) L = st.loss(x);
    if (record(k, k == nrec)) {
      tr.stopped_early = k < nrec;
      if (tr.snapshot_times.empty() || tr.snapshot_times.back() != tr.times.back()) {
        tr.snapshot_times.push_back(tr.times.back());
        tr.snapshots.push_back(unflatten<double>(x, d, m));
      }
      break;
    }
  }
  return tr;
}

ModelParams flow_to(const ModelParams& init, const MarkovSpec& spec, double T, double h, Integrator integ) {
  const int d = init.d(), m = init.m();
  Stepper st{spec, d, m};
  Vec x = flatten<double>(init);
  const long long n = std::max<long long>(1, std::llround(std::ceil(T / h - 1e-9)));
  const double hh = T / static_cast<double>(n);
  for (long long k = 0; k < n; ++k) x = st.step(x, hh, integ);
  return unflatten<double>(x, d, m);
}

std::vector<Stage> stage_times(const Trajectory& traj, const StageThresholds& th) {
  const auto& M = traj.metrics;
  const std::size_t n = M.size();
  if (n < 10) throw ValidationError("stage_times needs at least 10 records");
  const double t_end = M.back().t;

  std::size_t kc = n;
  for (std::size_t k = 0; k < n; ++k)
    if (M[k].cond_cos >= th.cond_cos) {
      kc = k;
      break;
    }
  if (kc == n) return {};

  std::vector<Stage> out;
  std::vector<double> slope(n, -std::numeric_limits<double>::infinity());
  double smax = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k + 1 < n; ++k) {
    if (M[k - 1].norm_WQ <= 0 || M[k + 1].norm_WQ <= 0) continue;
    slope[k] = (std::log(M[k + 1].norm_WQ) - std::log(M[k - 1].norm_WQ)) / (M[k + 1].t - M[k - 1].t);
    if (k >= kc) smax = std::max(smax, slope[k]);
  }
  std::size_t k2 = n;
  if (smax > 0) {
    for (std::size_t k = std::max<std::size_t>(kc, 1); k + 1 < n; ++k)
      if (slope[k] > th.slope_frac * smax) {
        k2 = k;
        break;
      }
  }
  if (k2 < n) {
    double peak = 0;
    for (std::size_t k = k2; k < n; ++k) peak = std::max(peak, M[k].norm_WQ);
    if (!(peak >= th.wq_growth * M[kc].norm_WQ)) k2 = n;
  }
  if (k2 == n) return {{"I", 0.0, t_end}};
  out.push_back({"I", 0.0, M[k2].t});

  std::size_t k3 = n, arg = k2;
  for (std::size_t k = k2 + 1; k < n; ++k) {
    if (M[k].entropy_low_mean < M[arg].entropy_low_mean) arg = k;
    if (M[k].entropy_low_mean - M[arg].entropy_low_mean >= th.entropy_rise) {
      k3 = arg;
      break;
    }
  }
  if (k3 == n || k3 == k2) {
    out.push_back({"II", M[k2].t, t_end});
    return out;
  }
  out.push_back({"II", M[k2].t, M[k3].t});

  std::size_t k4 = n;
  for (std::size_t k = k3 + 1; k < n && k4 == n; ++k) {
    bool sustained = true;
    for (std::size_t j = k; j < std::min(n, k + 4); ++j)
      sustained = sustained && M[j].orth_norm > th.orth_frac * M[j].norm_W0;
    if (sustained) k4 = k;
  }
  if (k4 == n) {
    out.push_back({"III", M[k3].t, t_end});
    return out;
  }
  out.push_back({"III", M[k3].t, M[k4].t});
  out.push_back({"IV", M[k4].t, t_end});
  return out;
}

double stage1_exit_time(const Trajectory& traj, double floor, double frac) {
  const auto& M = traj.metrics;
  if (M.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double thr = M[0].loss - frac * (M[0].loss - floor);
  for (std::size_t k = 1; k < M.size(); ++k)
    if (M[k].loss <= thr) {
      const double a = M[k - 1].loss, b = M[k].loss;
      const double w = a > b ? (a - thr) / (a - b) : 1.0;
      return M[k - 1].t + w * (M[k].t - M[k - 1].t);
    }
  return std::numeric_limits<double>::quiet_NaN();
}

TimingTable timing_scaling(const MarkovSpec& spec, int m, const std::vector<double>& eps_list,
                           const std::vector<std::uint64_t>& seeds, const FlowConfig& cfg, double exit_frac,
                           int threads) {
  if (eps_list.size() < 3) throw ValidationError("timing_scaling needs at least 3 values of eps");
  const auto [lo, hi] = std::minmax_element(eps_list.begin(), eps_list.end());
  if (!(*lo > 0) || *hi / *lo < 100 * (1 - 1e-12)) throw ValidationError("eps values must span at least two decades");
  if (seeds.empty()) throw ValidationError("timing_scaling needs at least one seed");
  const double floor = entropy_floor(spec);
  const std::size_t ns = seeds.size();
  std::vector<double> times(eps_list.size() * ns);
  FlowConfig c = cfg;
  c.snapshot_every = 0;
  parallel_for(times.size(), threads, [&](std::size_t idx) {
    const ModelParams p0 = init_params(spec.d(), m, eps_list[idx / ns], seeds[idx % ns]);
    const double L0 = population_loss(p0, spec);
    const double thr = L0 - exit_frac * (L0 - floor);
    const Trajectory tr = integrate_flow(p0, spec, c, [&](const Metrics& mt, const ModelParams&) { return mt.loss <= thr; });
    times[idx] = stage1_exit_time(tr, floor, exit_frac);
  });
  TimingTable tab;
  std::vector<double> x, y;
  for (std::size_t i = 0; i < eps_list.size(); ++i) {
    TimingRow row;
    row.eps = eps_list[i];
    row.exit_times.assign(times.begin() + static_cast<long>(i * ns), times.begin() + static_cast<long>((i + 1) * ns));
    double s = 0, s2 = 0;
    for (double v : row.exit_times) s += v;
    row.mean = s / static_cast<double>(ns);
    for (double v : row.exit_times) s2 += (v - row.mean) * (v - row.mean);
    row.rel_spread = ns > 1 ? std::sqrt(s2 / static_cast<double>(ns - 1)) / row.mean : 0.0;
    tab.rows.push_back(row);
    x.push_back(std::log(1 / row.eps));
    y.push_back(row.mean);
  }
  tab.fit = fit_line(x, y);
  return tab;
}

std::string metrics_csv(const Trajectory& traj) {
  std::string s = "t,loss,norm_W0,norm_W1,norm_WQ,norm_WK,cond_cos,attn_entropy_min,attn_entropy_max,conservation_Q,orth_norm\n";
  for (const Metrics& m : traj.metrics)
    s += fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", m.t,
                     m.loss, m.norm_W0, m.norm_W1, m.norm_WQ, m.norm_WK, m.cond_cos, m.entropy_min, m.entropy_max, m.Q,
                     m.orth_norm);
  return s;
}

namespace {

Vec unit_kick(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed, 0x11AE);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v.normalized();
}

}  // namespace

double linearization_error(const ModelParams& center, const Linearization& lin, const MarkovSpec& spec, double eps,
                           double t, std::uint64_t seed, double h) {
  const int d = center.d(), m = center.m();
  const Vec x0 = flatten<double>(center);
  const Vec dx = eps * unit_kick(x0.size(), seed);
  const ModelParams pt = flow_to(unflatten<double>(Vec(x0 + dx), d, m), spec, t, h, Integrator::rk4);
  const Mat& V = lin.eigenvectors;
  const Vec lin_dx = V * (lin.eigenvalues.array() * t).exp().matrix().cwiseProduct(V.transpose() * dx);
  return (flatten<double>(pt) - x0 - lin_dx).norm();
}

double alignment_cosine(const ModelParams& center, const Linearization& lin, const MarkovSpec& spec, double eps,
                        double target, std::uint64_t seed, double h) {
  if (!(lin.mu > 0)) throw ValidationError("alignment needs a positive top eigenvalue");
  const int d = center.d(), m = center.m();
  const Vec x0 = flatten<double>(center);
  const Vec dx = eps * unit_kick(x0.size(), seed);
  const double t = std::log(target / eps) / lin.mu;
  const ModelParams pt = flow_to(unflatten<double>(Vec(x0 + dx), d, m), spec, t, h, Integrator::rk4);
  const Vec dev = flatten<double>(pt) - x0;
  const Mat top = lin.eigenvectors.leftCols(lin.top_multiplicity);
  return (top.transpose() * dev).norm() / dev.norm();
}

}  // namespace attn
