#include "attn/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>

#include "attn/analysis.hpp"
#include "attn/critical.hpp"
#include "attn/io.hpp"
#include "attn/perturbation.hpp"
#include "attn/population.hpp"
#include "attn/reduced.hpp"
#include "attn/train.hpp"
#include "attn/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace attn {

namespace {

const std::set<std::string> kIntegerKeys = {"d", "m", "seed", "N", "s", "record_every", "max_halvings", "snapshot_every",
                                            "steps"};

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw ValidationError(fmt::format("config field '{}' {}", key, what));
}

bool is_integral(const json& v) {
  if (v.is_number_integer()) return true;
  if (!v.is_number_float()) return false;
  double x = v.get<double>();
  return std::isfinite(x) && std::floor(x) == x;
}

void check_type(const std::string& key, const json& v, const json& ref) {
  if (ref.is_boolean() && !v.is_boolean()) bad(key, "must be a boolean");
  if (ref.is_string() && !v.is_string()) bad(key, "must be a string");
  if (ref.is_number()) {
    if (!v.is_number()) bad(key, "must be a number");
    if (kIntegerKeys.count(key) && !is_integral(v)) bad(key, "must be an integer");
  }
  if (ref.is_array()) {
    if (!v.is_array()) bad(key, "must be an array of numbers");
    for (const auto& e : v) {
      if (!e.is_number()) bad(key, "must be an array of numbers");
      if (key == "seeds" && !(is_integral(e) && e.get<double>() >= 0)) bad(key, "must hold nonnegative integers");
    }
  }
}

void merge_into(json& cfg, const json& src, const std::string& origin) {
  if (!src.is_object()) throw ValidationError(origin + " must be a JSON object");
  const json defaults = default_config();
  for (auto it = src.begin(); it != src.end(); ++it) {
    if (!defaults.contains(it.key())) throw ValidationError(fmt::format("unknown config key '{}' in {}", it.key(), origin));
    check_type(it.key(), it.value(), defaults.at(it.key()));
    cfg[it.key()] = it.value();
  }
}

std::vector<double> dvec(const json& j) { return j.get<std::vector<double>>(); }

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

std::string join_csv_row(double t, const Vec& v) {
  std::string s = fmt::format("{:.17g}", t);
  for (Eigen::Index i = 0; i < v.size(); ++i) s += fmt::format(",{:.17g}", v(i));
  return s + "\n";
}

std::string indexed_header(const std::string& first, const std::string& prefix, int from, int to) {
  std::string s = first;
  for (int i = from; i <= to; ++i) s += fmt::format(",{}{}", prefix, i);
  return s + "\n";
}

class RunDir {
 public:
  RunDir(std::string root, RunResult& res) : root_(std::move(root)), res_(res) {}
  void write(const std::string& rel, const std::string& content) {
    const fs::path p = fs::path(root_) / rel;
    fs::create_directories(p.parent_path());
    write_file(p.string(), content);
    res_.files.push_back(rel);
  }
  std::string path(const std::string& rel) const { return (fs::path(root_) / rel).string(); }
  void add(const std::string& rel) { res_.files.push_back(rel); }

 private:
  std::string root_;
  RunResult& res_;
};

json stages_json(const std::vector<Stage>& st) {
  json a = json::array();
  for (const auto& s : st) a.push_back({{"label", s.label}, {"t_start", s.t_start}, {"t_end", s.t_end}});
  return a;
}

// snap_{t:.6}.json with six significant digits, keeping a decimal point
std::string snapshot_name(double t) {
  std::string v = fmt::format("{:.6}", t);
  if (v.find_first_of(".en") == std::string::npos) v += ".0";
  return "snap_" + v + ".json";
}

std::string snapshot_json(const ModelParams& p, double t, long long index) {
  json j = json::parse(params_to_json(p, index));
  j["t"] = t;
  return j.dump();
}

// Shared artifacts for flow and training trajectories.
json write_trajectory(RunDir& dir, const Trajectory& tr, const StageThresholds& th, const std::string& time_label) {
  dir.write("metrics.csv", metrics_csv(tr));
  const int d = tr.metrics.empty() ? 0 : static_cast<int>(tr.metrics[0].entropy.size());
  std::string ent = indexed_header("t", "entropy_nat_row", 1, d);
  for (const auto& m : tr.metrics) ent += join_csv_row(m.t, m.entropy);
  dir.write("entropy.csv", ent);

  std::string tok = indexed_header("t", "norm_W0_row", 1, d);
  tok.pop_back();
  for (int i = 2; i <= d; ++i) tok += fmt::format(",orth_W0_row{}", i);
  tok += "\n";
  std::vector<Mat> w0s;
  std::set<std::string> names;
  for (std::size_t k = 0; k < tr.snapshots.size(); ++k) {
    const ModelParams& p = tr.snapshots[k];
    const std::string name = snapshot_name(tr.snapshot_times[k]);
    if (!names.insert(name).second)
      throw ValidationError("snapshot times collide at six significant digits; raise snapshot_every");
    dir.write("snapshots/" + name, snapshot_json(p, tr.snapshot_times[k], static_cast<long long>(k)));
    Vec row(2 * d - 1);
    row.head(d) = p.W0.rowwise().norm();
    row.tail(d - 1) = p.W0.row(0).norm() > 0 ? orthogonal_components(p.W0) : Vec::Zero(d - 1);
    tok += join_csv_row(tr.snapshot_times[k], row);
    w0s.push_back(p.W0);
  }
  dir.write("tokens.csv", tok);

  std::vector<Stage> st;
  if (tr.metrics.size() >= 10) st = stage_times(tr, th);
  json summary;
  summary["stages"] = stages_json(st);
  summary["records"] = tr.metrics.size();
  summary["final_loss"] = tr.metrics.empty() ? 0.0 : tr.metrics.back().loss;
  summary["accepted_steps"] = tr.accepted_steps;
  summary["halvings"] = tr.halvings;
  dir.write("stages.json", summary.dump(2));

  Series loss{"loss", {}, {}};
  std::vector<Series> norms = {{"W0", {}, {}}, {"W1", {}, {}}, {"WQ", {}, {}}, {"WK", {}, {}}};
  std::vector<Series> ents(std::max(0, d));
  std::vector<Series> orth = {{"orth_norm", {}, {}}, {"low_norm", {}, {}}};
  for (int i = 0; i < d; ++i) ents[i].label = fmt::format("row {}", i + 1);
  for (const auto& m : tr.metrics) {
    loss.x.push_back(m.t);
    loss.y.push_back(m.loss);
    const double nv[4] = {m.norm_W0, m.norm_W1, m.norm_WQ, m.norm_WK};
    for (int k = 0; k < 4; ++k) {
      norms[k].x.push_back(m.t);
      norms[k].y.push_back(std::max(nv[k], 1e-300));
    }
    for (int i = 0; i < d; ++i) {
      ents[i].x.push_back(m.t);
      ents[i].y.push_back(m.entropy(i));
    }
    orth[0].x.push_back(m.t);
    orth[0].y.push_back(std::max(m.orth_norm, 1e-300));
    orth[1].x.push_back(m.t);
    orth[1].y.push_back(std::max(m.low_norm, 1e-300));
  }
  dir.write("loss.svg", svg_lines({loss}, "loss", time_label, "loss"));
  dir.write("norms.svg", svg_lines(norms, "weight norms", time_label, "Frobenius norm", true));
  dir.write("entropy.svg", svg_lines(ents, "proxy attention entropy", time_label, "entropy (nats)"));
  dir.write("orth.svg", svg_lines(orth, "low-frequency embeddings", time_label, "norm", true));

  // condensation at the end of each stage, from the nearest earlier snapshot
  for (const auto& s : st) {
    std::size_t best = 0;
    for (std::size_t k = 0; k < tr.snapshot_times.size(); ++k)
      if (tr.snapshot_times[k] <= s.t_end + 1e-9) best = k;
    if (tr.snapshots.empty()) break;
    const CondensationMatrix cm = condensation(tr.snapshots[best].W0);
    dir.write(fmt::format("condensation_W0_stage{}.svg", s.label),
              svg_heatmap(cm.C, cm.ordering, fmt::format("W0 condensation, end of stage {}", s.label)));
  }
  if (w0s.size() >= 2) {
    try {
      dir.write("pca.svg", svg_scatter(pca_trajectory(w0s), "W0 row trajectories"));
    } catch (const ValidationError&) {
      // constant W0 (e.g. started at the origin): nothing to project
    }
  }
  return summary;
}

Dataset load_dataset(const std::string& path) {
  if (path.ends_with(".bin")) return load_dataset_binary(path);
  return load_dataset_json(path);
}

Optimizer optimizer_from(const json& cfg) {
  return cfg.at("optimizer").get<std::string>() == "gd" ? Optimizer::gd : Optimizer::adam;
}

JacobianMethod jacobian_from(const json& cfg) {
  return cfg.at("jacobian").get<std::string>() == "complex" ? JacobianMethod::complex_step : JacobianMethod::central_fd;
}

json run_gen_data(const json& cfg, RunDir& dir, int threads) {
  const MarkovSpec spec = spec_from_config(cfg);
  const Dataset data = sample_dataset(spec, cfg.at("N").get<std::size_t>(), cfg.at("s").get<int>(),
                                      cfg.at("seed").get<std::uint64_t>(), threads);
  const bool bin = cfg.at("data_format").get<std::string>() == "binary";
  const std::string name = bin ? "data.bin" : "data.json";
  if (bin)
    save_dataset_binary(data, dir.path(name));
  else
    save_dataset_json(data, dir.path(name));
  dir.add(name);
  const Vec emp = empirical_frequencies(data), last = last_token_frequencies(data);
  std::string csv = "token,pi,empirical,last_position\n";
  for (int i = 0; i < spec.d(); ++i) csv += fmt::format("{},{:.17g},{:.17g},{:.17g}\n", i + 1, spec.pi()(i), emp(i), last(i));
  dir.write("frequencies.csv", csv);
  return {{"N", data.N()}, {"s", data.s}, {"max_freq_error", (emp - spec.pi()).cwiseAbs().maxCoeff()}};
}

json run_train(const json& cfg, RunDir& dir, int threads, json& inputs) {
  Dataset data;
  Vec pi;
  const std::string path = cfg.at("data").get<std::string>();
  if (!path.empty()) {
    data = load_dataset(path);
    inputs[path] = git_blob_sha1(read_file(path));
  } else {
    const MarkovSpec spec = spec_from_config(cfg);
    data = sample_dataset(spec, cfg.at("N").get<std::size_t>(), cfg.at("s").get<int>(),
                          cfg.at("seed").get<std::uint64_t>(), threads);
    pi = spec.pi();
  }
  TrainConfig tc;
  tc.optimizer = optimizer_from(cfg);
  tc.lr = cfg.at("lr").get<double>();
  tc.steps = cfg.at("steps").get<long long>();
  tc.record_every = cfg.at("record_every").get<int>();
  tc.snapshot_every = cfg.at("snapshot_every").get<int>();
  tc.threads = threads;
  const ModelParams init = init_params(data.d, cfg.at("m").get<int>(), cfg.at("eps").get<double>(),
                                       cfg.at("seed").get<std::uint64_t>());
  const Trajectory tr = train(init, data, tc, pi);
  return write_trajectory(dir, tr, thresholds_from(cfg), "step");
}

json run_flow(const json& cfg, RunDir& dir, int threads) {
  const MarkovSpec spec = spec_from_config(cfg);
  const FlowConfig fc = flow_config_from(cfg);
  const int m = cfg.at("m").get<int>();
  if (cfg.at("flow_mode").get<std::string>() == "timing") {
    std::vector<std::uint64_t> seeds;
    for (const auto& s : cfg.at("seeds")) seeds.push_back(static_cast<std::uint64_t>(s.get<double>()));
    const TimingTable tab = timing_scaling(spec, m, dvec(cfg.at("eps_list")), seeds, fc, cfg.at("exit_frac").get<double>(),
                                           threads);
    std::string csv = "eps,seed,exit_time\n";
    json rows = json::array();
    Series mean{"mean exit time", {}, {}};
    for (const auto& r : tab.rows) {
      for (std::size_t k = 0; k < r.exit_times.size(); ++k) csv += fmt::format("{:.17g},{},{:.17g}\n", r.eps, seeds[k], r.exit_times[k]);
      rows.push_back({{"eps", r.eps}, {"mean", r.mean}, {"rel_spread", r.rel_spread}, {"exit_times", r.exit_times}});
      mean.x.push_back(std::log(1.0 / r.eps));
      mean.y.push_back(r.mean);
    }
    dir.write("timing.csv", csv);
    dir.write("timing.svg", svg_lines({mean}, "stage I exit time", "log(1/eps)", "time"));
    json s = {{"rows", rows},
              {"fit", {{"slope", tab.fit.slope}, {"intercept", tab.fit.intercept}, {"r2", tab.fit.r2}}}};
    dir.write("timing.json", s.dump(2));
    return s;
  }
  const ModelParams init = init_params(spec.d(), m, cfg.at("eps").get<double>(), cfg.at("seed").get<std::uint64_t>());
  const Trajectory tr = integrate_flow(init, spec, fc);
  json s = write_trajectory(dir, tr, thresholds_from(cfg), "t");
  s["entropy_floor"] = entropy_floor(spec);
  return s;
}

json run_critical(const json& cfg, RunDir& dir, int threads) {
  const MarkovSpec spec = spec_from_config(cfg);
  const int m = cfg.at("m").get<int>();
  const std::string kind = cfg.at("kind").get<std::string>();
  CriticalPoint cp = kind == "origin"   ? origin_point(spec.d(), m)
                     : kind == "second" ? find_kappa1(spec, m)
                                        : find_degenerate_point(spec, m, cfg.at("eta_large").get<double>());
  cp.grad_norm = grad_norm(param_gradient_population(cp.params, spec));
  const Linearization lin = linearize(cp, spec, jacobian_from(cfg), cfg.at("fd_step").get<double>(), threads);
  dir.write("critical.json", critical_to_json(cp, spec));
  dir.write("linearization.json", linearization_to_json(lin));
  std::string csv = "index,eigenvalue\n";
  for (Eigen::Index i = 0; i < lin.eigenvalues.size(); ++i) csv += fmt::format("{},{:.17g}\n", i + 1, lin.eigenvalues(i));
  dir.write("eigenvalues.csv", csv);

  json r = {{"kind", kind}, {"grad_norm", cp.grad_norm}, {"mu", lin.mu}, {"top_multiplicity", lin.top_multiplicity},
            {"gap", lin.gap}, {"asymmetry", lin.asymmetry}};
  if (kind == "second") {
    const double c = unstable_constant(spec, cp.kappa1);
    const UnstableReport u = unstable_direction_check(cp, lin, spec, cfg.at("focus_level").get<double>());
    r["kappa1"] = cp.kappa1;
    r["c"] = c;
    r["mu_rel_error"] = lin.mu / c - 1;
    r["cross_block"] = u.cross_block;
    r["out_block_max"] = u.out_block_max;
    r["attn_block_max"] = u.attn_block_max;
    r["rank_one_residual_Q"] = u.rank_one_residual_Q;
    r["rank_one_residual_K"] = u.rank_one_residual_K;
    r["right_vector_angle"] = u.right_vector_angle;
    r["left_alignment"] = u.left_alignment;
    r["phi_cosine"] = u.phi_cosine;
    r["focus_min_first_entry"] = u.focus_min_first_entry;
    r["focus_kappa_sq"] = u.focus_kappa_sq;
  } else if (kind == "degenerate") {
    int zeros = 0;
    for (Eigen::Index i = 0; i < lin.eigenvalues.size(); ++i) zeros += std::abs(lin.eigenvalues(i)) <= 1e-8;
    r["eta"] = cp.eta;
    r["kernel_dimension"] = zeros;
    r["max_eigenvalue"] = lin.eigenvalues(0);
  }
  dir.write("report.json", r.dump(2));
  return r;
}

json run_reduced(const json& cfg, RunDir& dir) {
  const MarkovSpec spec = spec_from_config(cfg);
  const int m = cfg.at("m").get<int>(), d = spec.d();
  const CriticalPoint cp = find_kappa1(spec, m);
  const Vec q = spec.pi().normalized();
  const Vec u = (spec.pi().array() - 1.0 / d).matrix().normalized();
  const Vec g = cp.kappa1 * q, b = cp.kappa1 * u;
  const double eta0 = cfg.at("eta0").get<double>(), h = cfg.at("step_size").get<double>(),
               T = cfg.at("max_time").get<double>();
  const int every = cfg.at("record_every").get<int>();

  const TwoGroupTrajectory tg = integrate_two_group(two_group_state(g(0), g(1), b(0), b(1), eta0, spec), spec, h, T, every);
  dir.write("two_group.csv", two_group_csv(tg));

  const ReducedTrajectory tr = integrate_reduced(make_rank_one(g, b, eta0, m), spec, h, T, every);
  std::vector<double> Q;
  std::string csv = indexed_header("t,eta,Q", "gamma", 1, d);
  csv.pop_back();
  for (int i = 1; i <= d; ++i) csv += fmt::format(",beta{}", i);
  csv += "\n";
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    const RankOneState& s = tr.states[k];
    Q.push_back(conservation_quantity(s, spec));
    Vec row(2 * d + 2);
    row << s.eta(), Q.back(), s.gamma, s.beta;
    csv += join_csv_row(tr.times[k], row);
  }
  dir.write("reduced.csv", csv);

  const RateFit rf = fit_conservation_rate(tr.times, Q, g.norm());
  const double rate = eta_rate(g, b, spec), c = unstable_constant(spec, cp.kappa1);
  Series qs{"|Q|", {}, {}}, es{"eta", {}, {}};
  for (std::size_t k = 0; k < Q.size(); ++k) {
    qs.x.push_back(tr.times[k]);
    qs.y.push_back(std::max(std::abs(Q[k]), 1e-300));
    es.x.push_back(tr.times[k]);
    es.y.push_back(tr.states[k].eta());
  }
  dir.write("dilution.svg", svg_lines({qs, es}, "mass redistribution", "t", "value", true));
  json s = {{"Q0", Q.front()},
            {"fit_slope", rf.fit.slope},
            {"fit_r2", rf.fit.r2},
            {"fit_window", {rf.t_start, rf.t_end}},
            {"fit_points", rf.points},
            {"eta_rate", rate},
            {"two_c", 2 * c},
            {"rel_error", rf.fit.slope / rate - 1}};
  dir.write("rate.json", s.dump(2));
  return s;
}

json run_perturb(const json& cfg, RunDir& dir, int threads) {
  const MarkovSpec spec = spec_from_config(cfg);
  const int m = cfg.at("m").get<int>();
  const SweepReport rep = ls_sweep(spec, m, dvec(cfg.at("deltas")), threads);
  dir.write("sweep.json", sweep_to_json(rep));
  std::string csv =
      "delta,grad_norm,transverse_max_eig,tangential_max_eig,range_residual,kernel_residual,grad_norm_unperturbed\n";
  for (const auto& r : rep.rows)
    csv += fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.delta, r.grad_norm,
                       r.transverse_max_eig, r.tangential_max_eig, r.range_residual, r.kernel_residual,
                       r.grad_norm_unperturbed);
  dir.write("sweep.csv", csv);
  json s = json::parse(sweep_to_json(rep));
  if (cfg.at("escape").get<bool>()) {
    const double delta = cfg.at("escape_delta").get<double>();
    const CriticalPoint dp = find_degenerate_point(spec, m, cfg.at("eta_large").get<double>());
    const LSDecomposition ls = ls_decompose(dp, spec);
    const PerturbedPoint pp = build_perturbed_point(ls, spec, delta);
    const EscapeResult er = escape_experiment(pp, delta_spec(spec, delta), flow_config_from(cfg),
                                              cfg.at("kick").get<double>(), cfg.at("seed").get<std::uint64_t>());
    std::string e = "t,loss,manifold_distance,row_diff,orth\n";
    for (std::size_t k = 0; k < er.traj.metrics.size(); ++k)
      e += fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", er.traj.metrics[k].t, er.traj.metrics[k].loss,
                       er.distance[k], er.row_diff[k], er.orth[k]);
    dir.write("escape.csv", e);
    s["escape"] = {{"delta", delta},
                   {"rate", er.rate_fit.slope},
                   {"r2", er.rate_fit.r2},
                   {"fit_window", {er.fit_t0, er.fit_t1}}};
  }
  return s;
}

json run_analyze(const json& cfg, RunDir& dir, json& inputs) {
  const std::string in = cfg.at("input").get<std::string>();
  const fs::path snapdir = fs::path(in) / "snapshots";
  if (!fs::is_directory(snapdir)) throw ValidationError("config field 'input' must name a run directory with snapshots/");
  json src_cfg = cfg;
  const fs::path man = fs::path(in) / "manifest.json";
  if (fs::exists(man)) {
    const std::string text = read_file(man.string());
    inputs[man.string()] = git_blob_sha1(text);
    src_cfg = json::parse(text).at("config");
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(snapdir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  if (files.size() < 2) throw ValidationError("analyze needs at least 2 snapshots");
  std::vector<std::pair<double, std::string>> ordered;
  for (const auto& f : files) {
    const std::string text = read_file(f.string());
    const json j = json::parse(text);
    ordered.emplace_back(j.value("t", static_cast<double>(j.value("step", 0LL))), text);
    inputs[f.string()] = git_blob_sha1(text);
  }
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  // pi only shapes the proxy attention; fall back to the run's config
  MarkovSpec spec = spec_from_config(src_cfg);
  std::vector<Mat> w0s;
  std::vector<double> ts;
  std::string ent, orth;
  for (const auto& [t, text] : ordered) {
    const ModelParams p = params_from_json(text);
    if (p.d() != spec.d()) throw ValidationError("snapshot dimension does not match the run config");
    ts.push_back(t);
    w0s.push_back(p.W0);
    if (ent.empty()) {
      ent = indexed_header("t", "entropy_nat_row", 1, p.d());
      orth = indexed_header("t", "orth_W0_row", 2, p.d());
    }
    ent += join_csv_row(t, attention_entropy(proxy_attention(p, spec)));
    orth += join_csv_row(t, p.W0.row(0).norm() > 0 ? orthogonal_components(p.W0) : Vec::Zero(p.d() - 1));
  }
  dir.write("entropy.csv", ent);
  dir.write("orth.csv", orth);

  const PcaResult pca = pca_trajectory(w0s);
  std::string pc = "t,token,pc1,pc2\n";
  for (Eigen::Index r = 0; r < pca.coords.rows(); ++r)
    pc += fmt::format("{:.17g},{},{:.17g},{:.17g}\n", ts[r / pca.rows_per_snapshot], r % pca.rows_per_snapshot + 1,
                      pca.coords(r, 0), pca.coords(r, 1));
  dir.write("pca.csv", pc);
  dir.write("pca.svg", svg_scatter(pca, "W0 row trajectories"));

  const CondensationMatrix cm = condensation(w0s.back());
  std::string cc;
  for (Eigen::Index i = 0; i < cm.C.rows(); ++i) {
    for (Eigen::Index k = 0; k < cm.C.cols(); ++k) cc += fmt::format("{}{:.17g}", k ? "," : "", cm.C(i, k));
    cc += "\n";
  }
  dir.write("condensation_final.csv", cc);
  dir.write("condensation_final.svg", svg_heatmap(cm.C, cm.ordering, "W0 condensation, final snapshot"));
  return {{"snapshots", files.size()},
          {"pca_share", vec_std(pca.share)},
          {"final_min_abs_cos", min_abs_offdiag(cm.C)}};
}

json run_verify(const json& cfg, RunDir& dir, int threads, bool& ok) {
  const auto res = run_acceptance(parse_suite(cfg.at("suite").get<std::string>()), threads, dir.path("scratch"));
  json arr = json::array();
  std::string txt;
  ok = true;
  for (const auto& r : res) {
    ok = ok && r.pass;
    arr.push_back({{"id", r.id}, {"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    txt += format_result(r) + "\n";
    std::cout << format_result(r) << std::endl;
  }
  dir.write("verify.json", arr.dump(2));
  dir.write("verify.txt", txt);
  return {{"all_pass", ok}, {"criteria", arr}};
}

}  // namespace

json default_config() {
  return {
      {"experiment", "flow"},
      {"pi_mode", "two_group"},
      {"d", 4},
      {"pi1", 0.75},
      {"c", json::array()},
      {"delta", 0.0},
      {"pi", json::array()},
      {"lambda", 0.8},
      {"m", 8},
      {"eps", 1e-3},
      {"seed", 1},
      {"N", 1000},
      {"s", 20},
      {"data", ""},
      {"data_format", "json"},
      {"integrator", "rk4"},
      {"step_size", 0.05},
      {"max_time", 100.0},
      {"record_every", 10},
      {"adaptive", false},
      {"max_halvings", 40},
      {"snapshot_every", 10},
      {"flow_mode", "trajectory"},
      {"eps_list", {1e-2, 1e-3, 1e-4}},
      {"seeds", {1, 2, 3}},
      {"exit_frac", 0.05},
      {"stage_cond_cos", 0.99},
      {"stage_slope_frac", 0.5},
      {"stage_orth_frac", 1e-2},
      {"stage_entropy_rise", 0.02},
      {"stage_wq_growth", 3.0},
      {"optimizer", "adam"},
      {"lr", 1.5e-4},
      {"steps", 1000},
      {"kind", "second"},
      {"jacobian", "fd"},
      {"fd_step", 0.0},
      {"eta_large", 0.0},
      {"focus_level", 40.0},
      {"eta0", 1e-8},
      {"deltas", {1e-2, 1e-3, 1e-4}},
      {"escape", false},
      {"escape_delta", 1e-2},
      {"kick", 1e-8},
      {"input", ""},
      {"suite", "all"},
  };
}

std::vector<PresetInfo> list_presets() {
  return {
      {"synthetic-fig2", "four-stage flow on pi=(0.75,0.19,0.05,0.01), lambda=0.8, eps=1e-4"},
      {"kappa1-demo", "second critical point on d=3 two-group data with its unstable mode"},
      {"dilution-demo", "rank-one flow from the second critical point; Q growth vs eta-rate"},
      {"ls-sweep", "perturbed degenerate points over delta in {1e-2,1e-3,1e-4}"},
      {"timing-scaling", "stage I exit time against log(1/eps) over three seeds"},
  };
}

json preset_config(const std::string& name) {
  if (name == "synthetic-fig2")
    return {{"experiment", "flow"}, {"pi_mode", "explicit"}, {"d", 4},          {"pi", {0.75, 0.19, 0.05, 0.01}},
            {"lambda", 0.8},        {"m", 16},               {"eps", 1e-4},     {"seed", 1},
            {"integrator", "rk4"},  {"step_size", 0.05},     {"max_time", 400.0}, {"record_every", 10},
            {"adaptive", true},     {"snapshot_every", 20}};
  if (name == "kappa1-demo")
    return {{"experiment", "critical"}, {"kind", "second"}, {"pi_mode", "two_group"}, {"d", 3},
            {"pi1", 0.75},              {"lambda", 0.8},    {"m", 4},                 {"jacobian", "fd"}};
  if (name == "dilution-demo")
    return {{"experiment", "reduced"}, {"pi_mode", "two_group"}, {"d", 4},          {"pi1", 0.75},
            {"lambda", 0.8},           {"m", 4},                 {"step_size", 0.01},
            {"max_time", 600.0},       {"record_every", 10}};
  if (name == "ls-sweep")
    return {{"experiment", "perturb"}, {"pi_mode", "two_group"}, {"d", 3},
            {"pi1", 0.75},             {"lambda", 0.8},          {"m", 4},
            {"deltas", {1e-2, 1e-3, 1e-4}}};
  if (name == "timing-scaling")
    return {{"experiment", "flow"},  {"flow_mode", "timing"}, {"pi_mode", "two_group"}, {"d", 2},
            {"pi1", 0.75},           {"lambda", 0.8},         {"m", 4},                 {"eps_list", {1e-2, 1e-3, 1e-4}},
            {"seeds", {1, 2, 3}},    {"step_size", 0.05},     {"max_time", 2000.0},     {"record_every", 2},
            {"exit_frac", 0.05}};
  throw ValidationError(fmt::format("unknown preset '{}'", name));
}

json resolve_config(const std::string& experiment, const std::string& preset, const json& file,
                    const std::vector<std::string>& sets) {
  json cfg = default_config();
  std::string fixed;  // experiment named by preset or file
  if (!preset.empty()) {
    const json p = preset_config(preset);
    merge_into(cfg, p, "preset " + preset);
    fixed = p.at("experiment").get<std::string>();
  }
  if (!file.is_null()) {
    merge_into(cfg, file, "config file");
    if (file.contains("experiment")) fixed = file.at("experiment").get<std::string>();
  }
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError(fmt::format("override '{}' is not key=value", kv));
    std::string key = kv.substr(0, eq);
    std::replace(key.begin(), key.end(), '-', '_');
    const std::string raw = kv.substr(eq + 1);
    // string-typed keys take the text verbatim ("--suite 1", "--input 2024")
    const json& def = cfg.contains(key) ? cfg.at(key) : json();
    json v = def.is_string() ? json(raw) : json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    merge_into(cfg, json{{key, v}}, "overrides");
  }
  if (!experiment.empty()) {
    if (!fixed.empty() && fixed != experiment)
      throw ValidationError(fmt::format("configuration is for experiment '{}', not '{}'", fixed, experiment));
    cfg["experiment"] = experiment;
  }
  validate_config(cfg);
  return cfg;
}

void validate_config(const json& cfg) {
  if (!cfg.is_object()) throw ValidationError("config must be a JSON object");
  const json defaults = default_config();
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    if (!defaults.contains(it.key())) throw ValidationError(fmt::format("unknown config key '{}'", it.key()));
    check_type(it.key(), it.value(), defaults.at(it.key()));
  }
  for (auto it = defaults.begin(); it != defaults.end(); ++it)
    if (!cfg.contains(it.key())) bad(it.key(), "is missing");

  auto one_of = [&](const std::string& key, std::initializer_list<const char*> opts) {
    const std::string v = cfg.at(key).get<std::string>();
    std::string list;
    for (const char* o : opts) {
      if (v == o) return;
      list += std::string(list.empty() ? "" : ", ") + o;
    }
    bad(key, fmt::format("must be one of {{{}}}, got '{}'", list, v));
  };
  auto num = [&](const std::string& key) { return cfg.at(key).get<double>(); };
  auto positive = [&](const std::string& key) {
    if (!(num(key) > 0)) bad(key, fmt::format("must be positive, got {}", num(key)));
  };
  auto open_unit = [&](const std::string& key) {
    if (!(num(key) > 0 && num(key) < 1)) bad(key, fmt::format("must lie in (0,1), got {}", num(key)));
  };

  const std::string exp = cfg.at("experiment").get<std::string>();
  if (std::find(kExperiments.begin(), kExperiments.end(), exp) == kExperiments.end())
    bad("experiment", fmt::format("names an unknown experiment '{}'", exp));
  one_of("pi_mode", {"two_group", "explicit", "geometric"});
  one_of("data_format", {"json", "binary"});
  one_of("integrator", {"euler", "rk4"});
  one_of("flow_mode", {"trajectory", "timing"});
  one_of("optimizer", {"gd", "adam"});
  one_of("kind", {"origin", "second", "degenerate"});
  one_of("jacobian", {"fd", "complex"});

  if (num("d") < 2) bad("d", "must be >= 2");
  open_unit("pi1");
  open_unit("lambda");
  if (num("delta") < 0) bad("delta", "must be >= 0");
  if (num("m") < 1) bad("m", "must be >= 1");
  positive("eps");
  if (num("seed") < 0) bad("seed", "must be >= 0");
  if (num("N") < 1) bad("N", "must be >= 1");
  if (num("s") < 1) bad("s", "must be >= 1");
  positive("step_size");
  positive("max_time");
  if (num("record_every") < 1) bad("record_every", "must be >= 1");
  if (num("max_halvings") < 0) bad("max_halvings", "must be >= 0");
  if (num("snapshot_every") < 0) bad("snapshot_every", "must be >= 0");
  open_unit("exit_frac");
  positive("lr");
  if (num("steps") < 1) bad("steps", "must be >= 1");
  if (num("fd_step") < 0) bad("fd_step", "must be >= 0");
  if (num("eta_large") < 0) bad("eta_large", "must be >= 0");
  positive("focus_level");
  positive("eta0");
  if (num("kick") < 0) bad("kick", "must be >= 0");
  open_unit("stage_cond_cos");
  open_unit("stage_slope_frac");
  positive("stage_orth_frac");
  positive("stage_entropy_rise");
  positive("stage_wq_growth");
  for (double e : dvec(cfg.at("eps_list")))
    if (!(e > 0)) bad("eps_list", "must hold positive values");
  for (double e : dvec(cfg.at("deltas")))
    if (!(e > 0)) bad("deltas", "must hold positive values");
  if (cfg.at("seeds").empty()) bad("seeds", "must not be empty");

  const int d = cfg.at("d").get<int>();
  const std::string mode = cfg.at("pi_mode").get<std::string>();
  if (mode == "explicit" && static_cast<int>(cfg.at("pi").size()) != d)
    bad("pi", fmt::format("must have length d = {}", d));
  if (mode == "two_group" && !cfg.at("c").empty() && static_cast<int>(cfg.at("c").size()) != d - 1)
    bad("c", fmt::format("must have length d-1 = {}", d - 1));
  if (exp == "analyze" && cfg.at("input").get<std::string>().empty()) bad("input", "must name a run directory");
  if (exp == "verify") parse_suite(cfg.at("suite").get<std::string>());
  if (exp == "perturb" && (d != 3 || mode != "two_group")) bad("d", "must be 3 with pi_mode two_group for perturb");
  if (exp == "reduced" && mode != "two_group") bad("pi_mode", "must be two_group for reduced");
}

MarkovSpec spec_from_config(const json& cfg) {
  const int d = cfg.at("d").get<int>();
  const std::string mode = cfg.at("pi_mode").get<std::string>();
  StationaryDistribution dist;
  if (mode == "explicit") {
    dist = from_pi(to_vec(dvec(cfg.at("pi"))));
  } else if (mode == "geometric") {
    dist = geometric_pi(d);
  } else {
    const std::vector<double> c = dvec(cfg.at("c"));
    dist = build_stationary(d, cfg.at("pi1").get<double>(), c.empty() ? Vec::Zero(d - 1) : to_vec(c),
                            cfg.at("delta").get<double>());
  }
  return build_transition(dist, cfg.at("lambda").get<double>());
}

FlowConfig flow_config_from(const json& cfg) {
  FlowConfig f;
  f.step_size = cfg.at("step_size").get<double>();
  f.max_time = cfg.at("max_time").get<double>();
  f.integrator = cfg.at("integrator").get<std::string>() == "euler" ? Integrator::euler : Integrator::rk4;
  f.record_every = cfg.at("record_every").get<int>();
  f.adaptive = cfg.at("adaptive").get<bool>();
  f.max_halvings = cfg.at("max_halvings").get<int>();
  f.snapshot_every = cfg.at("snapshot_every").get<int>();
  validate(f);
  return f;
}

StageThresholds thresholds_from(const json& cfg) {
  StageThresholds th;
  th.cond_cos = cfg.at("stage_cond_cos").get<double>();
  th.slope_frac = cfg.at("stage_slope_frac").get<double>();
  th.orth_frac = cfg.at("stage_orth_frac").get<double>();
  th.entropy_rise = cfg.at("stage_entropy_rise").get<double>();
  th.wq_growth = cfg.at("stage_wq_growth").get<double>();
  return th;
}

RunResult run_experiment(const json& cfg, const std::string& out_dir, bool force, int threads) {
  validate_config(cfg);
  if (fs::exists(out_dir)) {
    if (!force) throw ValidationError(fmt::format("run directory '{}' already exists; pass --force to replace it", out_dir));
    fs::remove_all(out_dir);
  }
  fs::create_directories(out_dir);

  RunResult res;
  res.out_dir = out_dir;
  RunDir dir(out_dir, res);
  json inputs = json::object();
  const std::string exp = cfg.at("experiment").get<std::string>();
  if (exp == "gen-data")
    res.summary = run_gen_data(cfg, dir, threads);
  else if (exp == "train")
    res.summary = run_train(cfg, dir, threads, inputs);
  else if (exp == "flow")
    res.summary = run_flow(cfg, dir, threads);
  else if (exp == "critical")
    res.summary = run_critical(cfg, dir, threads);
  else if (exp == "reduced")
    res.summary = run_reduced(cfg, dir);
  else if (exp == "perturb")
    res.summary = run_perturb(cfg, dir, threads);
  else if (exp == "analyze")
    res.summary = run_analyze(cfg, dir, inputs);
  else
    res.summary = run_verify(cfg, dir, threads, res.ok);
  dir.write("summary.json", res.summary.dump(2));

  // No timestamps or thread counts: identical manifests mean identical runs.
  std::sort(res.files.begin(), res.files.end());
  json outputs = json::object();
  for (const auto& f : res.files)
    if (!f.starts_with("scratch/")) outputs[f] = git_blob_sha1(read_file(dir.path(f)));
  const json manifest = {{"tool", "attnstages"},
                         {"experiment", exp},
                         {"config", cfg},
                         {"config_sha1", git_blob_sha1(cfg.dump())},
                         {"inputs", inputs},
                         {"outputs", outputs}};
  write_file(dir.path("manifest.json"), manifest.dump(2) + "\n");
  res.files.push_back("manifest.json");
  return res;
}

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("ATTNSTAGES_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 4096) throw ValidationError(fmt::format("ATTNSTAGES_THREADS must be a positive integer, got '{}'", env));
    return static_cast<int>(v);
  }
  return 1;
}

namespace {

// Turns leftover "--key value" / "--key=value" tokens into key=value overrides.
std::vector<std::string> extras_to_sets(const std::vector<std::string>& extra) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extra.size(); ++i) {
    const std::string& a = extra[i];
    if (!a.starts_with("--") || a.size() < 3) throw ValidationError(fmt::format("unexpected argument '{}'", a));
    std::string body = a.substr(2);
    if (body.find('=') == std::string::npos) {
      if (i + 1 >= extra.size()) throw ValidationError(fmt::format("option '{}' needs a value", a));
      body += "=" + extra[++i];
    }
    out.push_back(body);
  }
  return out;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Training-dynamics experiments for a one-layer attention model on Markov data"};
  app.require_subcommand(1);

  struct Opts {
    std::string config, preset, out;
    std::vector<std::string> sets;
    long long seed = -1;
    int threads = 0;
    bool force = false;
  };
  Opts o;
  bool presets_json = false;
  for (const auto& e : kExperiments) {
    auto* sub = app.add_subcommand(e, "run the " + e + " experiment");
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--preset", o.preset, "built-in preset");
    sub->add_option("--set", o.sets, "override key=value (repeatable)");
    sub->add_option("--out", o.out, "run directory");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--threads", o.threads, "worker threads (default: ATTNSTAGES_THREADS or 1)");
    sub->add_flag("--force", o.force, "replace an existing run directory");
    sub->allow_extras();
    sub->footer("Any config key may also be given as --key value.");
  }
  auto* pre = app.add_subcommand("presets", "list built-in presets");
  pre->add_flag("--json", presets_json, "print full resolved configs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (pre->parsed()) {
      for (const auto& p : list_presets()) {
        if (presets_json)
          std::cout << p.name << " " << resolve_config("", p.name, json(), {}).dump() << "\n";
        else
          std::cout << fmt::format("{:<16} {}\n", p.name, p.description);
      }
      return 0;
    }
    CLI::App* sub = app.get_subcommands().front();
    const std::string exp = sub->get_name();
    std::vector<std::string> sets = o.sets;
    for (auto& s : extras_to_sets(sub->remaining())) sets.push_back(s);
    if (o.seed >= 0) sets.push_back(fmt::format("seed={}", o.seed));
    json file;
    if (!o.config.empty()) {
      file = json::parse(read_file(o.config), nullptr, false);
      if (file.is_discarded()) throw ValidationError(fmt::format("config file '{}' is not valid JSON", o.config));
    }
    const json cfg = resolve_config(exp, o.preset, file, sets);
    const int threads = resolve_threads(o.threads);
    std::string out = o.out;
    if (out.empty()) out = fmt::format("runs/{}-{}-seed{}", exp, o.preset.empty() ? "custom" : o.preset, cfg.at("seed").get<long long>());
    const RunResult r = run_experiment(cfg, out, o.force, threads);
    std::cout << fmt::format("{}: wrote {} files to {}\n", exp, r.files.size(), r.out_dir);
    return r.ok ? 0 : 2;
  } catch (const CertificationError& e) {
    std::cerr << "certification failed: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace attn
