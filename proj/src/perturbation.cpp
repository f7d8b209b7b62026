#include "attn/perturbation.hpp"

#include <cmath>
#include <json.hpp>

#include "attn/analysis.hpp"
#include "attn/population.hpp"
#include "attn/reduced.hpp"
#include "attn/rng.hpp"

namespace attn {

namespace {

Vec chart_grad(const Vec& z, double eta, const MarkovSpec& spec) { return chart_gradient<double>(z, eta, spec); }

// Complex-step Hessian of the loss in the chart, symmetrised.
Mat chart_hessian(const Vec& z, double eta, const MarkovSpec& spec) {
  const Eigen::Index n = z.size();
  const double h = 1e-30;
  Mat H(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    VecT<cplx> zc = z.cast<cplx>();
    zc(j) += cplx(0, h);
    H.col(j) = chart_gradient<cplx>(zc, eta, spec).imag() / h;
  }
  return 0.5 * (H + H.transpose());
}

ModelParams lift_chart(const Vec& z, double eta, const Vec& alpha1) {
  ModelParams p;
  const Eigen::Index d = z.size() / 2;
  p.W0 = z.head(d) * alpha1.transpose();
  p.W1 = alpha1 * z.tail(d).transpose();
  p.WQ = std::sqrt(eta) * alpha1 * alpha1.transpose();
  p.WK = p.WQ;
  return p;
}

Vec solve_range(const LSDecomposition& ls, const MarkovSpec& spec, const Vec& guess) {
  Vec zeta = guess;
  for (int it = 0; it < 40; ++it) {
    const Vec z = ls.z0 + ls.QR * zeta;
    const Vec F = ls.QR.transpose() * chart_grad(z, ls.eta, spec);
    if (F.norm() < 1e-17) break;
    const Mat Jr = ls.QR.transpose() * chart_hessian(z, ls.eta, spec) * ls.QR;
    const Vec step = Jr.fullPivLu().solve(F);
    zeta -= step;
    if (step.norm() < 1e-18) break;
  }
  return zeta;
}

std::vector<double> col(const std::vector<SweepRow>& rows, double SweepRow::*f) {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(std::abs(r.*f));
  return v;
}

}  // namespace

MarkovSpec delta_spec(const MarkovSpec& base, double delta) {
  if (base.d() != 3) throw ValidationError("delta perturbation is defined for d = 3");
  const Vec c = (Vec(2) << (delta >= 0 ? 1.0 : -1.0), (delta >= 0 ? -1.0 : 1.0)).finished();
  return perturbed_spec(base, c, std::abs(delta));
}

LSDecomposition ls_decompose(const CriticalPoint& point, const MarkovSpec& spec) {
  if (point.kind != CriticalKind::degenerate) throw ValidationError("ls_decompose needs the degenerate point");
  const Vec& g = point.gamma;
  const Vec& b = point.beta;
  if (std::abs(g.norm() - b.norm()) > 1e-10 * g.norm()) throw ValidationError("gauge: |gamma| != |beta|");
  if (std::abs(b.sum()) > 1e-12 * std::max(1.0, b.norm())) throw ValidationError("gauge: beta^T 1 != 0");
  LSDecomposition ls;
  ls.eta = point.eta;
  ls.m = point.params.m();
  ls.alpha1 = point.alpha1;
  ls.z0.resize(6);
  ls.z0 << g, b;
  const Vec& pi = spec.pi();
  const PopulationState st =
      population_mphi<double>(Mat(g * b.transpose()), Mat(ls.eta * g * g.transpose()), spec);
  const Mat V1 = var_matrix<double>(Vec(st.Pm.row(0).transpose()));
  const Mat V2 = var_matrix<double>(Vec(st.Pm.row(1).transpose()));
  const double c1 = pi(0) * b.dot(V1 * b);
  const double c2 = 0.25 * (1 - pi(0)) * b.dot(V2 * b);
  const Vec v1 = pi(0) * g(0) * V1 * b;
  const Vec v2 = 0.5 * (1 - pi(0)) * g(1) * V2 * b;
  const Mat C = pi(0) * g(0) * g(0) * V1 + (1 - pi(0)) * g(1) * g(1) * V2;
  Mat J = Mat::Zero(6, 6);
  J(0, 0) = c1;
  J.block(1, 1, 2, 2).setConstant(c2);
  J.block(0, 3, 1, 3) = v1.transpose();
  J.block(3, 0, 3, 1) = v1;
  for (int r = 1; r <= 2; ++r) {
    J.block(r, 3, 1, 3) = v2.transpose();
    J.block(3, r, 3, 1) = v2;
  }
  J.block(3, 3, 3, 3) = C;
  ls.J0 = -J;

  const double h = 1e-5;
  Mat H(6, 6);
  for (int j = 0; j < 6; ++j) {
    Vec zp = ls.z0, zm = ls.z0;
    zp(j) += h;
    zm(j) -= h;
    H.col(j) = (chart_grad(zp, ls.eta, spec) - chart_grad(zm, ls.eta, spec)) / (2 * h);
  }
  ls.J0_fd = -0.5 * (H + H.transpose());
  ls.j0_fd_diff = (ls.J0 - ls.J0_fd).cwiseAbs().maxCoeff();

  Vec k1(6), k2(6), k3(6), q1(6), q2(6), q3(6);
  k1 << 0, 1, -1, 0, 0, 0;
  k2 << 0, 0, 0, 1, 1, 1;
  k3 << -g, b;
  q1 << -2 * g(1), g(0), g(0), 0, 0, 0;
  q2 << 0, 0, 0, 0, 1, -1;
  q3 << g, b;
  ls.QK.resize(6, 3);
  ls.QR.resize(6, 3);
  ls.QK << k1.normalized(), k2.normalized(), k3.normalized();
  ls.QR << q1.normalized(), q2.normalized(), q3.normalized();
  const Mat I3 = Mat::Identity(3, 3);
  ls.orth_error = std::max({(ls.QK.transpose() * ls.QK - I3).cwiseAbs().maxCoeff(),
                            (ls.QR.transpose() * ls.QR - I3).cwiseAbs().maxCoeff(),
                            (ls.QK.transpose() * ls.QR).cwiseAbs().maxCoeff()});
  ls.kernel_residual = (ls.J0 * ls.QK).colwise().norm().transpose();
  ls.LambdaR = ls.QR.transpose() * ls.J0 * ls.QR;
  ls.c1 = pi(0) * g(0) * g(0) * st.Pm(0, 1) + (1 - pi(0)) * g(1) * g(1) * st.Pm(1, 1);
  if (std::abs(ls.LambdaR.determinant()) < 1e-14) throw CertificationError("range block of J0 is singular");
  return ls;
}

double forcing_scalar(const CriticalPoint& point, const MarkovSpec& spec) {
  const double lam = spec.lambda, p1 = spec.pi()(0);
  const double g1 = point.gamma(0), g2 = point.gamma(1);
  return lam * g2 + (1 - lam) * (p1 * g1 + (1 - p1) * g2);
}

Vec compute_f1(const CriticalPoint& point, const MarkovSpec& spec) {
  Vec f = Vec::Zero(6);
  const double S = forcing_scalar(point, spec);
  f(4) = S;
  f(5) = -S;
  return f;
}

Vec f1_finite_difference(const CriticalPoint& point, const MarkovSpec& spec, double h) {
  Vec z(6);
  z << point.gamma, point.beta;
  return -(chart_grad(z, point.eta, delta_spec(spec, h)) - chart_grad(z, point.eta, delta_spec(spec, -h))) / (2 * h);
}

double c_zeta(const LSDecomposition& ls, const CriticalPoint& point, const MarkovSpec& spec) {
  return forcing_scalar(point, spec) / ls.c1;
}

double transverse_condition(const LSDecomposition& ls, const CriticalPoint& point, const MarkovSpec& spec) {
  const double p1 = spec.pi()(0), lam = spec.lambda;
  const PopulationState st = population_mphi<double>(Mat(point.gamma * point.beta.transpose()),
                                                     Mat(point.eta * point.gamma * point.gamma.transpose()), spec);
  return c_zeta(ls, point, spec) * (1 - p1) * point.gamma(1) * st.Pm(1, 1) - (lam + (1 - p1) * (1 - lam));
}

PerturbedPoint build_perturbed_point(const LSDecomposition& ls, const MarkovSpec& spec, double delta, int order,
                                     double h2) {
  if (order != 1 && order != 2) throw ValidationError("order must be 1 or 2");
  const MarkovSpec sd = delta_spec(spec, delta);
  CriticalPoint dp;
  dp.kind = CriticalKind::degenerate;
  dp.gamma = ls.z0.head(3);
  dp.beta = ls.z0.tail(3);
  dp.eta = ls.eta;
  PerturbedPoint pp;
  pp.delta = delta;
  pp.zeta1 = -ls.LambdaR.fullPivLu().solve(ls.QR.transpose() * compute_f1(dp, spec));
  pp.zeta2 = delta * pp.zeta1(1);
  pp.zeta2_closed = std::sqrt(2.0) * forcing_scalar(dp, spec) / ls.c1 * delta;
  pp.zeta2nd = Vec::Zero(3);
  if (order == 2) {
    const Vec zp = solve_range(ls, delta_spec(spec, h2), h2 * pp.zeta1);
    const Vec zm = solve_range(ls, delta_spec(spec, -h2), -h2 * pp.zeta1);
    pp.zeta2nd = (zp + zm) / (h2 * h2);
  }
  auto evaluate = [&](const Vec& zeta, double& gn, double& rr, double& kr) {
    const Vec z = ls.z0 + ls.QR * zeta;
    const Vec cg = chart_grad(z, ls.eta, sd);
    rr = (ls.QR.transpose() * cg).norm();
    kr = (ls.QK.transpose() * cg).norm();
    const ModelParams th = lift_chart(z, ls.eta, ls.alpha1);
    gn = grad_norm(param_gradient_population(th, sd));
    return std::make_pair(z, th);
  };
  evaluate(delta * pp.zeta1, pp.grad_norm_first_order, pp.range_residual_first_order, pp.kernel_residual_first_order);
  pp.zeta = delta * pp.zeta1 + 0.5 * delta * delta * pp.zeta2nd;
  const auto [z, th] = evaluate(pp.zeta, pp.grad_norm, pp.range_residual, pp.kernel_residual);
  pp.z = z;
  pp.theta = th;
  pp.grad_norm_unperturbed = grad_norm(param_gradient_population(lift_chart(ls.z0, ls.eta, ls.alpha1), sd));
  return pp;
}

EigenSplit scale_split_eigen(const PerturbedPoint& pp, const LSDecomposition& ls, const MarkovSpec& spec_delta,
                             int threads) {
  const int d = 3, m = ls.m;
  const Mat J = flow_jacobian(pp.theta, spec_delta, JacobianMethod::complex_step, 0, threads);
  EigenSplit es;
  es.asymmetry = (J - J.transpose()).cwiseAbs().maxCoeff();
  const Mat Js = 0.5 * (J + J.transpose());
  // Lifted chart directions: gamma_k moves W0 along e_k alpha1^T, beta_k moves W1 along alpha1 e_k^T.
  Mat B(Js.rows(), 6);
  for (int k = 0; k < 3; ++k) {
    ModelParams dg = zero_params(d, m), db = zero_params(d, m);
    dg.W0.row(k) = ls.alpha1.transpose();
    db.W1.col(k) = ls.alpha1;
    B.col(k) = flatten<double>(dg);
    B.col(3 + k) = flatten<double>(db);
  }
  const Mat Bq = Eigen::HouseholderQR<Mat>(B).householderQ() * Mat::Identity(B.rows(), 6);
  Eigen::SelfAdjointEigenSolver<Mat> eig(Js);
  es.eigenvalues = eig.eigenvalues().reverse();
  es.transverse_max = -INFINITY;
  for (Eigen::Index i = 0; i < Js.rows(); ++i) {
    const double overlap = (Bq.transpose() * eig.eigenvectors().col(i)).squaredNorm();
    if (overlap <= 0.9) es.transverse_max = std::max(es.transverse_max, eig.eigenvalues()(i));
  }
  const Mat Jt = Bq.transpose() * Js * Bq;
  es.tangential_max = Eigen::SelfAdjointEigenSolver<Mat>(Jt, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  return es;
}

KernelProjection kernel_projection(const LSDecomposition& ls, const MarkovSpec& spec, double h) {
  CriticalPoint dp;
  dp.kind = CriticalKind::degenerate;
  dp.gamma = ls.z0.head(3);
  dp.beta = ls.z0.tail(3);
  dp.eta = ls.eta;
  const Vec zeta1 = -ls.LambdaR.fullPivLu().solve(ls.QR.transpose() * compute_f1(dp, spec));
  const MarkovSpec sp = delta_spec(spec, h), sm = delta_spec(spec, -h);
  const Mat H1 = (chart_hessian(ls.z0 + h * ls.QR * zeta1, ls.eta, sp) -
                  chart_hessian(ls.z0 - h * ls.QR * zeta1, ls.eta, sm)) / (2 * h);
  const Mat J1 = (chart_hessian(ls.z0, ls.eta, sp) - chart_hessian(ls.z0, ls.eta, sm)) / (2 * h);
  KernelProjection kp;
  kp.H1_norm = H1.norm();
  kp.QK_H1_QK = (ls.QK.transpose() * H1 * ls.QK).norm();
  kp.J1_norm = J1.norm();
  kp.QK_J1_QK = (ls.QK.transpose() * J1 * ls.QK).norm();
  return kp;
}

SweepReport ls_sweep(const MarkovSpec& spec, int m, const std::vector<double>& deltas, int threads) {
  if (deltas.size() < 3) throw ValidationError("ls_sweep needs at least 3 values of delta");
  const CriticalPoint dp = find_degenerate_point(spec, m);
  const LSDecomposition ls = ls_decompose(dp, spec);
  SweepReport rep;
  rep.condition = transverse_condition(ls, dp, spec);
  rep.kernel = kernel_projection(ls, spec);
  for (double delta : deltas) {
    const PerturbedPoint pp = build_perturbed_point(ls, spec, delta);
    const EigenSplit es = scale_split_eigen(pp, ls, delta_spec(spec, delta), threads);
    SweepRow r;
    r.delta = delta;
    r.grad_norm = pp.grad_norm;
    r.transverse_max_eig = es.transverse_max;
    r.tangential_max_eig = es.tangential_max;
    r.range_residual = pp.range_residual;
    r.kernel_residual = pp.kernel_residual;
    r.grad_norm_unperturbed = pp.grad_norm_unperturbed;
    r.grad_norm_first_order = pp.grad_norm_first_order;
    r.range_residual_first_order = pp.range_residual_first_order;
    rep.rows.push_back(r);
  }
  const std::vector<double> ds = col(rep.rows, &SweepRow::delta);
  rep.grad_fit = fit_loglog(ds, col(rep.rows, &SweepRow::grad_norm));
  rep.transverse_fit = fit_loglog(ds, col(rep.rows, &SweepRow::transverse_max_eig));
  rep.tangential_fit = fit_loglog(ds, col(rep.rows, &SweepRow::tangential_max_eig));
  rep.range_fit = fit_loglog(ds, col(rep.rows, &SweepRow::range_residual));
  rep.range_first_order_fit = fit_loglog(ds, col(rep.rows, &SweepRow::range_residual_first_order));
  return rep;
}

std::string sweep_to_json(const SweepReport& r) {
  nlohmann::json j;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& x : r.rows)
    rows.push_back({{"delta", x.delta},
                    {"grad_norm", x.grad_norm},
                    {"transverse_max_eig", x.transverse_max_eig},
                    {"tangential_max_eig", x.tangential_max_eig},
                    {"range_residual", x.range_residual},
                    {"kernel_residual", x.kernel_residual},
                    {"grad_norm_unperturbed", x.grad_norm_unperturbed},
                    {"grad_norm_first_order", x.grad_norm_first_order},
                    {"range_residual_first_order", x.range_residual_first_order}});
  j["points"] = rows;
  auto fit = [](const LineFit& f) { return nlohmann::json{{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}}; };
  j["slopes"] = {{"grad_norm", fit(r.grad_fit)},
                 {"transverse_max_eig", fit(r.transverse_fit)},
                 {"tangential_max_eig", fit(r.tangential_fit)},
                 {"range_residual", fit(r.range_fit)},
                 {"range_residual_first_order", fit(r.range_first_order_fit)}};
  j["kernel_projection"] = {{"QK_H1_QK", r.kernel.QK_H1_QK},
                            {"H1_norm", r.kernel.H1_norm},
                            {"QK_J1_QK", r.kernel.QK_J1_QK},
                            {"J1_norm", r.kernel.J1_norm}};
  j["transverse_condition"] = r.condition;
  return j.dump(2);
}

EscapeResult escape_experiment(const PerturbedPoint& pp, const MarkovSpec& spec_delta, const FlowConfig& cfg,
                               double kick, std::uint64_t seed, double fit_lo, double fit_hi) {
  EscapeResult res;
  const int d = pp.theta.d(), m = pp.theta.m();
  Vec x = flatten<double>(pp.theta);
  Rng rng(seed, 0xE5C);
  Vec v(x.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  x += kick * v.normalized();
  res.traj = integrate_flow(unflatten<double>(x, d, m), spec_delta, cfg, [&](const Metrics&, const ModelParams& p) {
    res.distance.push_back(manifold_distance(p));
    const Mat A = proxy_attention(p, spec_delta);
    res.row_diff.push_back((A.row(1) - A.row(2)).norm());
    res.orth.push_back(p.W0.row(0).squaredNorm() > 0 ? orthogonal_components(p.W0).norm() : 0.0);
    return false;
  });
  std::vector<double> t, y;
  for (std::size_t k = 0; k < res.distance.size(); ++k) {
    const double dist = res.distance[k];
    if (dist > fit_hi) break;
    if (dist >= fit_lo) {
      t.push_back(res.traj.times[k]);
      y.push_back(std::log(dist));
    }
  }
  if (t.size() >= 3) {
    res.rate_fit = fit_line(t, y);
    res.fit_t0 = t.front();
    res.fit_t1 = t.back();
  }
  return res;
}

}  // namespace attn
