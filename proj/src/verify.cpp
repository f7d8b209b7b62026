#include "attn/verify.hpp"

#include <fmt/format.h>

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>

#include "attn/cli.hpp"
#include "attn/critical.hpp"
#include "attn/flow.hpp"
#include "attn/io.hpp"
#include "attn/perturbation.hpp"
#include "attn/population.hpp"
#include "attn/reduced.hpp"
#include "attn/rng.hpp"

namespace fs = std::filesystem;

namespace attn {

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAIL ") + what;
  }
};

double max_abs(const Mat& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

Vec random_pi(int d, Rng& rng) {
  Vec pi(d);
  for (int i = 0; i < d; ++i) pi(i) = 0.05 + rng.uniform();
  std::sort(pi.data(), pi.data() + d, std::greater<double>());
  pi(0) += 0.2;  // keep a strict high-frequency token
  return pi / pi.sum();
}

MarkovSpec two_group_spec(int d, double pi1, double lambda) { return build_transition(two_group(d, pi1), lambda); }

ModelParams random_params(int d, int m, double sd, Rng& rng) {
  ModelParams p = zero_params(d, m);
  for (Mat* w : {&p.W0, &p.W1, &p.WQ, &p.WK})
    for (Eigen::Index k = 0; k < w->size(); ++k) w->data()[k] = sd * rng.normal();
  return p;
}

// Entrywise comparison of an analytic gradient with central differences of f.
double fd_violation(const ModelParams& p, const ParamGradient& g, const std::function<double(const ModelParams&)>& f,
                    double h) {
  const int d = p.d(), m = p.m();
  const Vec x = flatten(p), gx = flatten(g);
  double worst = 0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Vec xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    const double fd = (f(unflatten(xp, d, m)) - f(unflatten(xm, d, m))) / (2 * h);
    const double tol = std::max(1e-6, 1e-4 * std::abs(gx(k)));
    worst = std::max(worst, std::abs(fd - gx(k)) / tol);
  }
  return worst;  // <= 1 means within tolerance
}

Outcome c1_origin() {
  Outcome o;
  Rng rng(101);
  double worst_m = 0, worst_phi = 0;
  for (int k = 0; k < 10; ++k) {
    const int d = 2 + static_cast<int>(rng.below(5));
    const Vec pi = random_pi(d, rng);
    const double lambda = 0.05 + 0.9 * rng.uniform();
    const MarkovSpec spec = build_transition(from_pi(pi), lambda);
    const PopulationState st = population_forward(zero_params(d, 3), spec);
    const Mat expect = -pi * (pi.array() - 1.0 / d).matrix().transpose();
    worst_m = std::max(worst_m, max_abs(st.gM - expect));
    worst_phi = std::max(worst_phi, max_abs(st.gPhi));
  }
  o.check(worst_m <= 1e-12, fmt::format("max |dL/dM + pi(pi-1/d)^T| = {:.2e} (tol 1e-12)", worst_m));
  o.check(worst_phi == 0.0, fmt::format("max |dL/dPhi| = {:.2e} (must be 0)", worst_phi));
  return o;
}

Outcome c2_gradients() {
  Outcome o;
  Rng rng(202);
  double worst_pop = 0, worst_emp = 0;
  for (int k = 0; k < 5; ++k) {
    const int d = 2 + static_cast<int>(rng.below(3));
    const int m = 2 + static_cast<int>(rng.below(7));
    const MarkovSpec spec = build_transition(from_pi(random_pi(d, rng)), 0.2 + 0.6 * rng.uniform());
    const ModelParams p = random_params(d, m, 0.5, rng);
    worst_pop = std::max(worst_pop, fd_violation(p, param_gradient_population(p, spec),
                                                 [&](const ModelParams& q) { return population_loss(q, spec); }, 1e-5));
    const Dataset data = sample_dataset(spec, 40, 6, 300 + k);
    worst_emp = std::max(worst_emp, fd_violation(p, empirical_loss_grad(p, data).second,
                                                 [&](const ModelParams& q) { return empirical_loss(q, data); }, 1e-5));
  }
  o.check(worst_pop <= 1, fmt::format("population: worst |fd-g|/max(1e-6,1e-4|g|) = {:.2e}", worst_pop));
  o.check(worst_emp <= 1, fmt::format("empirical: worst ratio = {:.2e}", worst_emp));
  return o;
}

Outcome c3_monte_carlo(int threads) {
  Outcome o;
  const std::vector<double> Ns = {1e3, 1e4, 1e5};
  std::vector<double> mean_err(Ns.size(), 0.0);
  double worst_big = 0;
  Rng rng(303);
  const MarkovSpec spec = two_group_spec(3, 0.6, 0.7);
  for (int k = 0; k < 3; ++k) {
    const ModelParams p = random_params(3, 4, 0.3, rng);
    for (std::size_t n = 0; n < Ns.size(); ++n) {
      const double e = monte_carlo_agreement(p, spec, static_cast<std::size_t>(Ns[n]), 200, 1000 + 10 * k + n, threads).rel_error;
      mean_err[n] += e / 3;
      if (n + 1 == Ns.size()) worst_big = std::max(worst_big, e);
    }
  }
  const LineFit f = fit_loglog(Ns, mean_err);
  o.check(worst_big < 0.05, fmt::format("worst rel error at N=1e5: {:.4f} (< 0.05)", worst_big));
  o.check(std::abs(f.slope + 0.5) <= 0.2, fmt::format("error slope vs N = {:.3f} (-0.5 +- 0.2)", f.slope));
  return o;
}

Outcome c4_kappa1() {
  Outcome o;
  for (int d : {2, 3, 4}) {
    const MarkovSpec spec = two_group_spec(d, 0.75, 0.8);
    const CriticalPoint cp = find_kappa1(spec, 4);
    const PopulationState st = population_forward(cp.params, spec);
    double row_dev = 0;
    for (int i = 0; i < d; ++i) row_dev = std::max(row_dev, (st.Pm.row(i).transpose() - spec.pi()).cwiseAbs().maxCoeff());
    const double gn = grad_norm(param_gradient_population(cp.params, spec));
    const double closed = kappa1_squared_closed_form(spec);
    o.check(row_dev <= 1e-10 && gn < 1e-9 && std::abs(cp.kappa1 * cp.kappa1 / closed - 1) < 1e-8,
            fmt::format("d={}: row dev {:.1e}, grad {:.1e}, kappa1^2 {:.10f} vs closed form {:.10f}", d, row_dev, gn,
                        cp.kappa1 * cp.kappa1, closed));
  }
  return o;
}

struct SecondPoint {
  MarkovSpec spec;
  CriticalPoint cp;
  Linearization lin;
};

const std::vector<SecondPoint>& second_points(int threads) {
  static std::vector<SecondPoint> pts;
  if (pts.empty())
    for (int d : {2, 3, 4}) {
      SecondPoint s;
      s.spec = two_group_spec(d, 0.75, 0.8);
      s.cp = find_kappa1(s.spec, 4);
      s.lin = linearize(s.cp, s.spec, JacobianMethod::central_fd, 0, threads);
      pts.push_back(s);
    }
  return pts;
}

Outcome c5_unstable(int threads) {
  Outcome o;
  for (const auto& s : second_points(threads)) {
    const double c = unstable_constant(s.spec, s.cp.kappa1);
    const UnstableReport u = unstable_direction_check(s.cp, s.lin, s.spec);
    const double rel = std::abs(s.lin.mu / c - 1);
    o.check(rel < 1e-3 && u.cross_block < 1e-7,
            fmt::format("d={}: mu {:.6e} vs c {:.6e} (rel {:.1e}), cross-block {:.1e}", s.spec.d(), s.lin.mu, c, rel,
                        u.cross_block));
  }
  return o;
}

Outcome c6_focus(int threads) {
  Outcome o;
  for (const auto& s : second_points(threads)) {
    const UnstableReport u = unstable_direction_check(s.cp, s.lin, s.spec, 40);
    o.check(u.focus_min_first_entry > 0.99 && u.phi_cosine > 1 - 1e-6,
            fmt::format("d={}: min first entry {:.5f}, Phi cosine 1-{:.1e}", s.spec.d(), u.focus_min_first_entry,
                        1 - u.phi_cosine));
  }
  return o;
}

Outcome c7_manifold() {
  Outcome o;
  const MarkovSpec spec = two_group_spec(4, 0.75, 0.8);
  const int m = 8;
  for (int generic = 0; generic < 2; ++generic) {
    Vec a = Vec::Zero(m), b = Vec::Zero(m);
    a(0) = b(0) = 1;
    if (generic) {
      Rng r(3);
      for (int i = 0; i < m; ++i) {
        a(i) = r.normal();
        b(i) = r.normal();
      }
      a.normalize();
      b.normalize();
    }
    Vec g(4), be(4);
    g << 0.02, 0.01, 0.01, 0.01;
    be << 0.01, -0.02, -0.02, -0.02;
    FlowConfig cfg;
    cfg.step_size = 0.05;
    cfg.max_time = 400;
    cfg.record_every = 20;
    cfg.snapshot_every = 0;
    double dist = 0, spread = 0;
    const Trajectory tr = integrate_flow(lift(make_rank_one(g, be, 1e-4, m, a, b), 4, m), spec, cfg,
                                         [&](const Metrics&, const ModelParams& p) {
                                           dist = std::max(dist, manifold_distance(p));
                                           spread = std::max(spread, low_token_spread(p, a));
                                           return false;
                                         });
    o.check(dist < 1e-8 && spread < 1e-10,
            fmt::format("{} alpha1, T={}: max rank-one residual {:.1e}, max spread {:.1e}", generic ? "generic" : "e1",
                        tr.metrics.back().t, dist, spread));
  }
  return o;
}

Outcome c8_dilution() {
  Outcome o;
  for (int d : {3, 4}) {
    const MarkovSpec spec = two_group_spec(d, 0.75, 0.8);
    const CriticalPoint cp = find_kappa1(spec, 4);
    const Vec g = cp.kappa1 * spec.pi().normalized();
    const Vec b = cp.kappa1 * (spec.pi().array() - 1.0 / d).matrix().normalized();
    const double rate = eta_rate(g, b, spec);
    const ReducedTrajectory tr = integrate_reduced(make_rank_one(g, b, 1e-8, 4), spec, 0.01, 600, 10);
    std::vector<double> Q;
    for (const auto& s : tr.states) Q.push_back(conservation_quantity(s, spec));
    const RateFit rf = fit_conservation_rate(tr.times, Q, g.norm());
    const double rel = std::abs(rf.fit.slope / rate - 1);
    // gamma proportional to pi gives Q = 0 up to rounding of the sum
    const double q0_tol = 1e-14 * g.norm();
    o.check(std::abs(Q[0]) <= q0_tol, fmt::format("d={}: |Q(0)| = {:.1e}", d, std::abs(Q[0])));
    o.check(rel < 0.05 && rf.fit.r2 > 0.999,
            fmt::format("d={}: fitted rate {:.6f} vs eta-rate {:.6f} (rel {:.2e}, R^2 {:.6f}, {} pts)", d, rf.fit.slope,
                        rate, rel, rf.fit.r2, rf.points));
  }
  return o;
}

Outcome c9_degenerate(int threads) {
  Outcome o;
  const MarkovSpec spec = two_group_spec(3, 0.75, 0.8);
  const CriticalPoint dp = find_degenerate_point(spec, 4);
  const Linearization lin = linearize(dp, spec, JacobianMethod::central_fd, 0, threads);
  int zeros = 0;
  for (Eigen::Index i = 0; i < lin.eigenvalues.size(); ++i) zeros += std::abs(lin.eigenvalues(i)) <= 1e-8;
  const double gn = grad_norm(param_gradient_population(dp.params, spec));
  o.check(gn < 1e-9, fmt::format("grad norm {:.1e}", gn));
  o.check(lin.mu <= 1e-8, fmt::format("max eigenvalue {:.1e}", lin.mu));
  o.check(zeros >= 3, fmt::format("kernel dimension {}", zeros));
  return o;
}

Outcome c10_ls(int threads) {
  Outcome o;
  for (auto [pi1, lambda] : {std::pair{0.75, 0.8}, std::pair{0.7, 0.6}}) {
    const MarkovSpec spec = two_group_spec(3, pi1, lambda);
    const SweepReport r = ls_sweep(spec, 4, {1e-2, 1e-3, 1e-4}, threads);
    const std::string tag = fmt::format("pi1={} lambda={}", pi1, lambda);
    o.check(std::abs(r.condition) > 1e-6, fmt::format("{}: transverse condition {:.3f}", tag, r.condition));
    o.check(std::abs(r.grad_fit.slope - 3) <= 0.3, fmt::format("{}: gradient slope {:.3f}", tag, r.grad_fit.slope));
    o.check(std::abs(r.transverse_fit.slope - 1) <= 0.2,
            fmt::format("{}: transverse slope {:.3f}", tag, r.transverse_fit.slope));
    o.check(r.tangential_fit.slope >= 1.8, fmt::format("{}: tangential slope {:.3f}", tag, r.tangential_fit.slope));
    o.check(r.kernel.QK_H1_QK < 1e-6 * r.kernel.H1_norm,
            fmt::format("{}: |QK^T H1 QK| {:.1e} vs |H1| {:.3f}", tag, r.kernel.QK_H1_QK, r.kernel.H1_norm));
  }
  return o;
}

std::size_t record_at(const Trajectory& tr, double t) {
  std::size_t k = 0;
  while (k + 1 < tr.metrics.size() && tr.metrics[k + 1].t <= t + 1e-9) ++k;
  return k;
}

Outcome c11_four_stage() {
  Outcome o;
  const nlohmann::json cfg = resolve_config("flow", "synthetic-fig2", nlohmann::json(), {});
  const MarkovSpec spec = spec_from_config(cfg);
  const ModelParams init = init_params(spec.d(), cfg.at("m").get<int>(), cfg.at("eps").get<double>(),
                                       cfg.at("seed").get<std::uint64_t>());
  const Trajectory tr = integrate_flow(init, spec, flow_config_from(cfg));
  const auto st = stage_times(tr, thresholds_from(cfg));
  std::string labels;
  for (const auto& s : st) labels += fmt::format("{}[{:g},{:g}] ", s.label, s.t_start, s.t_end);
  const bool ordered = st.size() == 4 && st[0].label == "I" && st[1].label == "II" && st[2].label == "III" &&
                       st[3].label == "IV" && st[0].t_end < st[1].t_end && st[1].t_end < st[2].t_end &&
                       st[2].t_end < st[3].t_end;
  o.check(ordered, "stages " + labels);
  if (!ordered) return o;
  const auto& M = tr.metrics;
  const Metrics& m1 = M[record_at(tr, st[0].t_end)];
  o.check(m1.min_pair_cos > 0.99 && m1.norm_WQ <= 3 * M[0].norm_WQ && m1.norm_WK <= 3 * M[0].norm_WK,
          fmt::format("end of I: min |cos| {:.4f}, WQ x{:.2f}, WK x{:.2f} of init", m1.min_pair_cos,
                      m1.norm_WQ / M[0].norm_WQ, m1.norm_WK / M[0].norm_WK));

  std::vector<double> t2, lw;
  for (std::size_t k = record_at(tr, st[1].t_start); k <= record_at(tr, st[1].t_end); ++k) {
    t2.push_back(M[k].t);
    lw.push_back(std::log(M[k].norm_WQ));
  }
  const LineFit f2 = fit_line(t2, lw);
  const double growth = std::exp(lw.back() - lw.front());
  o.check(f2.slope > 0 && f2.r2 > 0.9 && growth >= 10,
          fmt::format("II: log|WQ| slope {:.4f}, R^2 {:.4f}, growth x{:.1f}", f2.slope, f2.r2, growth));

  // Low-token rows shrink through zero early in III and regrow with flipped sign.
  const std::size_t i3 = record_at(tr, st[2].t_start), j3 = record_at(tr, st[2].t_end);
  double low_min = M[i3].low_norm;
  for (std::size_t k = i3; k <= j3; ++k) low_min = std::min(low_min, M[k].low_norm);
  o.check(M[j3].entropy_low_mean - M[i3].entropy_low_mean >= 0.02 && low_min <= 0.5 * M[i3].low_norm,
          fmt::format("III: low-row entropy {:.4f} -> {:.4f}, low-token norm {:.4f} falls to {:.4f}",
                      M[i3].entropy_low_mean, M[j3].entropy_low_mean, M[i3].low_norm, low_min));

  const Metrics& a4 = M[record_at(tr, st[3].t_start)];
  const Metrics& b4 = M.back();
  const double r0 = a4.orth_norm / a4.norm_W0, r1 = b4.orth_norm / b4.norm_W0;
  o.check(r1 >= 10 * r0, fmt::format("IV: orth/|W0| {:.4f} -> {:.4f}", r0, r1));
  return o;
}

Outcome c12_timing(int threads) {
  Outcome o;
  const MarkovSpec spec = two_group_spec(2, 0.75, 0.8);
  FlowConfig cfg;
  cfg.step_size = 0.05;
  cfg.max_time = 2000;
  cfg.record_every = 2;
  const TimingTable tab = timing_scaling(spec, 4, {1e-2, 1e-3, 1e-4}, {1, 2, 3}, cfg, 0.05, threads);
  std::string means;
  for (const auto& r : tab.rows) means += fmt::format("{:.3f} ", r.mean);
  o.check(tab.fit.r2 > 0.98, fmt::format("exit times {}R^2 {:.6f}", means, tab.fit.r2));

  const MarkovSpec s3 = two_group_spec(3, 0.75, 0.8);
  const CriticalPoint cp = find_kappa1(s3, 4);
  const Linearization lin = linearize(cp, s3, JacobianMethod::complex_step, 0, threads);
  std::vector<double> es = {1e-3, 1e-4, 1e-5}, errs;
  for (double e : es) errs.push_back(linearization_error(cp.params, lin, s3, e, 10.0, 7));
  const LineFit lf = fit_loglog(es, errs);
  o.check(std::abs(lf.slope - 2) <= 0.2, fmt::format("linearization error slope {:.4f}", lf.slope));
  return o;
}

Outcome c13_reproducible(const std::string& scratch) {
  Outcome o;
  for (const auto& p : list_presets()) {
    const nlohmann::json cfg = resolve_config("", p.name, nlohmann::json(), {});
    const fs::path root = fs::path(scratch) / p.name;
    const RunResult a = run_experiment(cfg, (root / "a").string(), true, 1);
    const RunResult b = run_experiment(cfg, (root / "b").string(), true, 4);
    int csvs = 0;
    bool same = a.files == b.files;
    for (const auto& f : a.files)
      if (f.ends_with(".csv") || f == "manifest.json") {
        csvs += f.ends_with(".csv");
        same = same && read_file((root / "a" / f).string()) == read_file((root / "b" / f).string());
      }
    o.check(same && csvs > 0, fmt::format("{}: {} CSVs and manifest {}", p.name, csvs, same ? "identical" : "differ"));
  }
  return o;
}

struct Entry {
  const char* name;
  double max_seconds;
};
const std::map<int, Entry> kCriteria = {
    {1, {"origin gradient identity", 1}},    {2, {"gradient oracle", 10}},
    {3, {"Monte-Carlo bridge", 120}},        {4, {"kappa1 certification", 5}},
    {5, {"unstable-mode constant", 30}},     {6, {"focus limit", 1}},
    {7, {"manifold invariance", 60}},        {8, {"mass redistribution", 60}},
    {9, {"degenerate point", 30}},           {10, {"Lyapunov-Schmidt scales", 300}},
    {11, {"four-stage synthetic run", 600}}, {12, {"timing scaling", 600}},
    {13, {"reproducibility", 0}},
};

}  // namespace

std::vector<int> parse_suite(const std::string& suite) {
  std::vector<int> ids;
  if (suite == "all") {
    for (int i = 1; i <= kCriteriaCount; ++i) ids.push_back(i);
    return ids;
  }
  std::stringstream ss(suite);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t pos = 0;
    int id = 0;
    try {
      id = std::stoi(tok, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != tok.size() || id < 1 || id > kCriteriaCount)
      throw ValidationError(fmt::format("config field 'suite' must be 'all' or ids 1-{}, got '{}'", kCriteriaCount, tok));
    ids.push_back(id);
  }
  if (ids.empty()) throw ValidationError("config field 'suite' is empty");
  return ids;
}

CriterionResult run_criterion(int id, int threads, const std::string& scratch_dir) {
  const auto it = kCriteria.find(id);
  if (it == kCriteria.end()) throw ValidationError(fmt::format("no criterion {}", id));
  CriterionResult r;
  r.id = id;
  r.name = it->second.name;
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    switch (id) {
      case 1: o = c1_origin(); break;
      case 2: o = c2_gradients(); break;
      case 3: o = c3_monte_carlo(threads); break;
      case 4: o = c4_kappa1(); break;
      case 5: o = c5_unstable(threads); break;
      case 6: {
        second_points(threads);  // shared with criterion 5; not part of this budget
        const auto t1 = std::chrono::steady_clock::now();
        o = c6_focus(threads);
        r.seconds = -std::chrono::duration<double>(t1 - t0).count();
        break;
      }
      case 7: o = c7_manifold(); break;
      case 8: o = c8_dilution(); break;
      case 9: o = c9_degenerate(threads); break;
      case 10: o = c10_ls(threads); break;
      case 11: o = c11_four_stage(); break;
      case 12: o = c12_timing(threads); break;
      default: o = c13_reproducible(scratch_dir); break;
    }
  } catch (const std::exception& e) {
    o.check(false, std::string("exception: ") + e.what());
  }
  r.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double limit = it->second.max_seconds;
  if (limit > 0) o.check(r.seconds < limit, fmt::format("runtime {:.2f} s (< {:g} s)", r.seconds, limit));
  r.pass = o.pass;
  r.detail = o.detail;
  return r;
}

std::vector<CriterionResult> run_acceptance(const std::vector<int>& ids, int threads, const std::string& scratch_dir) {
  std::vector<CriterionResult> out;
  for (int id : ids) out.push_back(run_criterion(id, threads, scratch_dir));
  return out;
}

std::string format_result(const CriterionResult& r) {
  return fmt::format("{} criterion {:2d} ({}): {}", r.pass ? "PASS" : "FAIL", r.id, r.name, r.detail);
}

}  // namespace attn
