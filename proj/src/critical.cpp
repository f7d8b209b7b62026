#include "attn/critical.hpp"

#include <algorithm>
#include <cmath>

#include "attn/io.hpp"
#include "attn/parallel.hpp"
#include "attn/population.hpp"

namespace attn {

std::string kind_name(CriticalKind k) {
  switch (k) {
    case CriticalKind::origin: return "origin";
    case CriticalKind::second: return "second";
    case CriticalKind::degenerate: return "degenerate";
  }
  return "?";
}

namespace {

Vec unit_alpha(const Vec& alpha1, int m) {
  if (alpha1.size() == 0) {
    Vec e = Vec::Zero(m);
    e(0) = 1;
    return e;
  }
  if (alpha1.size() != m) throw ValidationError("alpha1 must have length m");
  const double n = alpha1.norm();
  if (!(n > 0)) throw ValidationError("alpha1 must be nonzero");
  return alpha1 / n;
}

void require_two_group(const MarkovSpec& spec) {
  const Vec& pi = spec.pi();
  for (int j = 2; j < spec.d(); ++j)
    if (std::abs(pi(j) - pi(1)) > 1e-12) throw ValidationError("low-frequency tokens must share one probability");
}

}  // namespace

CriticalPoint origin_point(int d, int m) {
  CriticalPoint cp;
  cp.params = zero_params(d, m);
  cp.kind = CriticalKind::origin;
  cp.alpha1 = unit_alpha(Vec(), m);
  return cp;
}

double kappa1_squared_closed_form(const MarkovSpec& spec) {
  require_two_group(spec);
  const int d = spec.d();
  const Vec& pi = spec.pi();
  const Vec u = (pi.array() - 1.0 / d).matrix().normalized();
  const double cpi = pi.norm() * (u(0) - u(1));
  return std::log((d - 1) * pi(0) / (1 - pi(0))) / cpi;
}

CriticalPoint find_kappa1(const MarkovSpec& spec, int m, const Vec& alpha1) {
  const int d = spec.d();
  const Vec& pi = spec.pi();
  if (pi(0) <= 1.0 / d + 1e-15) throw ValidationError("pi_1 <= 1/d: no second critical point exists");
  require_two_group(spec);
  const Vec q = pi.normalized();
  const Vec u = (pi.array() - 1.0 / d).matrix().normalized();
  // Phi = 0 so every attention row is pi and every output row is the same.
  auto f = [&](double k) {
    const Vec z = k * k * pi.dot(q) * u;
    return softmax<double>(z)(0) - pi(0);
  };
  double lo = 1e-6, hi = 1.0;
  while (f(hi) < 0) {
    hi *= 2;
    if (hi > 1e8) throw CertificationError("kappa1 bracket not found");
  }
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0 ? lo : hi) = mid;
  }
  const double k = std::abs(f(lo)) < std::abs(f(hi)) ? lo : hi;
  if (std::abs(f(k)) >= 1e-12) throw CertificationError("kappa1 bisection did not reach 1e-12");

  CriticalPoint cp;
  cp.kind = CriticalKind::second;
  cp.kappa1 = k;
  cp.alpha1 = unit_alpha(alpha1, m);
  cp.params = zero_params(d, m);
  cp.params.W0 = k * q * cp.alpha1.transpose();
  cp.params.W1 = k * cp.alpha1 * u.transpose();
  cp.grad_norm = grad_norm(param_gradient_population(cp.params, spec));
  if (!(cp.grad_norm < kCertifyTol))
    throw CertificationError("second critical point gradient norm " + std::to_string(cp.grad_norm));
  return cp;
}

double unstable_constant(const MarkovSpec& spec, double kappa1) {
  const Vec& pi = spec.pi();
  const int d = spec.d();
  const double vn = pi.dot(var_matrix<double>(pi) * pi);
  return spec.lambda * std::pow(kappa1, 4) * vn * vn / ((pi.array() - 1.0 / d).matrix().norm() * std::pow(pi.norm(), 3));
}

Mat flow_jacobian(const ModelParams& p, const MarkovSpec& spec, JacobianMethod method, double fd_step, int threads) {
  const int d = p.d(), m = p.m();
  const Vec x = flatten<double>(p);
  const Eigen::Index n = x.size();
  Mat J(n, n);
  if (method == JacobianMethod::complex_step) {
    const double h = fd_step > 0 ? fd_step : 1e-30;
    const VecT<cplx> xc = x.cast<cplx>();
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t j) {
      VecT<cplx> xp = xc;
      xp(static_cast<Eigen::Index>(j)) += cplx(0, h);
      const VecT<cplx> g = flat_gradient<cplx>(xp, d, m, spec);
      J.col(static_cast<Eigen::Index>(j)) = -g.imag() / h;
    });
  } else {
    const double h = fd_step > 0 ? fd_step : 1e-5 * std::max(1.0, x.norm());
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t j) {
      Vec xp = x, xm = x;
      xp(static_cast<Eigen::Index>(j)) += h;
      xm(static_cast<Eigen::Index>(j)) -= h;
      J.col(static_cast<Eigen::Index>(j)) =
          -(flat_gradient<double>(xp, d, m, spec) - flat_gradient<double>(xm, d, m, spec)) / (2 * h);
    });
  }
  return J;
}

Linearization linearize(const ModelParams& p, const MarkovSpec& spec, JacobianMethod method, double fd_step,
                        int threads) {
  Linearization lin;
  const Mat J = flow_jacobian(p, spec, method, fd_step, threads);
  lin.asymmetry = (J - J.transpose()).cwiseAbs().maxCoeff();
  lin.J = 0.5 * (J + J.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(lin.J);
  const Eigen::Index n = lin.J.rows();
  lin.eigenvalues = es.eigenvalues().reverse();
  lin.eigenvectors = es.eigenvectors().rowwise().reverse();
  lin.mu = lin.eigenvalues(0);
  const double tol = 1e-6 * std::max(1.0, std::abs(lin.mu));
  Eigen::Index k = 1;
  while (k < n && lin.mu - lin.eigenvalues(k) < tol) ++k;
  lin.top_multiplicity = static_cast<int>(k);
  lin.gap = k < n ? lin.mu - lin.eigenvalues(k) : 0.0;
  return lin;
}

Linearization linearize(const CriticalPoint& point, const MarkovSpec& spec, JacobianMethod method, double fd_step,
                        int threads) {
  return linearize(point.params, spec, method, fd_step, threads);
}

UnstableReport unstable_direction_check(const CriticalPoint& point, const Linearization& lin, const MarkovSpec& spec,
                                        double focus_level) {
  if (point.kind != CriticalKind::second) throw ValidationError("unstable_direction_check needs the second critical point");
  const int d = point.params.d(), m = point.params.m();
  const Eigen::Index nout = 2 * static_cast<Eigen::Index>(d) * m;
  const Eigen::Index n = lin.J.rows();
  UnstableReport r;
  r.cross_block = lin.J.block(0, nout, nout, n - nout).cwiseAbs().maxCoeff();
  r.out_block_max = Eigen::SelfAdjointEigenSolver<Mat>(lin.J.topLeftCorner(nout, nout), Eigen::EigenvaluesOnly)
                        .eigenvalues()
                        .maxCoeff();
  r.attn_block_max =
      Eigen::SelfAdjointEigenSolver<Mat>(lin.J.bottomRightCorner(n - nout, n - nout), Eigen::EigenvaluesOnly)
          .eigenvalues()
          .maxCoeff();

  const ParamsT<double> v = unflatten<double>(Vec(lin.eigenvectors.col(0)), d, m);
  auto rank_one = [&](const Mat& B, Vec& left, Vec& right) {
    Eigen::JacobiSVD<Mat> svd(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vec s = svd.singularValues();
    left = svd.matrixU().col(0);
    right = svd.matrixV().col(0);
    return s(0) > 0 ? std::sqrt(std::max(0.0, s.squaredNorm() - s(0) * s(0))) / s.norm() : 1.0;
  };
  Vec lq, rq, lk, rk;
  r.rank_one_residual_Q = rank_one(v.WQ, lq, rq);
  r.rank_one_residual_K = rank_one(v.WK, lk, rk);
  r.right_vector_angle = std::acos(std::clamp(std::abs(rq.dot(rk)), 0.0, 1.0));
  r.left_alignment = std::min(std::abs(lq.dot(point.alpha1)), std::abs(lk.dot(point.alpha1)));

  ModelParams probe = point.params;
  probe.WQ = v.WQ;
  probe.WK = v.WK;
  const Mat Phi0 = probe.Phi();
  const Vec& pi = spec.pi();
  const Mat ppT = pi * pi.transpose();
  r.phi_cosine = Phi0.cwiseProduct(ppT).sum() / (Phi0.norm() * ppT.norm());

  // Scale along the ray so that Phi = K^2 pi pi^T with K^2 |pi|^2 pi_1 = focus_level.
  r.focus_kappa_sq = focus_level / (pi.squaredNorm() * pi(0));
  const double s = std::sqrt(r.focus_kappa_sq * pi(0) * pi(0) / Phi0(0, 0));
  probe.WQ *= s;
  probe.WK *= s;
  r.focus_min_first_entry = proxy_attention(probe, spec).col(0).minCoeff();
  return r;
}

namespace {

struct Chart {
  Vec gamma, beta;
  double eta;
};

PopulationState chart_state(const Chart& c, const MarkovSpec& spec) {
  return population_mphi<double>(c.gamma * c.beta.transpose(), c.eta * c.gamma * c.gamma.transpose(), spec);
}

}  // namespace

CriticalPoint find_degenerate_point(const MarkovSpec& spec, int m, double eta_large) {
  if (spec.d() != 3) throw ValidationError("degenerate point construction needs d = 3");
  require_two_group(spec);
  const Mat& P = spec.P;
  auto logit = [](double p) { return std::log(p / (1 - p)); };
  const double L1 = logit(P(0, 0)) + std::log(2.0);
  const double L2 = logit(P(1, 0)) + std::log(2.0);
  if (!(L1 > 0 && L2 < 0)) throw ValidationError("degenerate point needs P_11 > 1/3 > P_21");
  // Saturated attention: m_1 -> gamma_1, m_2 -> gamma_2, and Delta beta = b.
  const double b = std::pow(1.5 * (L1 * L1 + 2 * L2 * L2), 0.25);
  double g1 = L1 / b, g2 = L2 / b;
  const double eta = eta_large > 0 ? eta_large : 40.0 / (std::min(g1, -g2) * (g1 - g2));
  if (!std::isfinite(eta)) throw ValidationError("eta_large is not representable");

  const Vec beta0 = (Vec(3) << 2 * b / 3, -b / 3, -b / 3).finished();
  auto resid = [&](double a1, double a2) {
    Chart c{(Vec(3) << a1, a2, a2).finished(), beta0, eta};
    const PopulationState st = chart_state(c, spec);
    return Eigen::Vector2d(st.Pm(0, 0) - P(0, 0), st.Pm(1, 0) - P(1, 0));
  };
  for (int it = 0; it < 50; ++it) {
    const Eigen::Vector2d r = resid(g1, g2);
    if (r.cwiseAbs().maxCoeff() < 1e-15) break;
    const double h = 1e-7;
    Eigen::Matrix2d Jn;
    Jn.col(0) = (resid(g1 + h, g2) - resid(g1 - h, g2)) / (2 * h);
    Jn.col(1) = (resid(g1, g2 + h) - resid(g1, g2 - h)) / (2 * h);
    const Eigen::Vector2d step = Jn.fullPivLu().solve(r);
    g1 -= step(0);
    g2 -= step(1);
  }
  if (!(g1 > 0 && g2 < 0)) throw CertificationError("degenerate point lost the sign pattern gamma_1 > 0 > gamma_2");

  // Gauge: rescale (gamma, beta, eta) so |gamma| = |beta|.
  Chart c{(Vec(3) << g1, g2, g2).finished(), beta0, eta};
  const double s = std::sqrt(c.beta.norm() / c.gamma.norm());
  c.gamma *= s;
  c.beta /= s;
  c.eta /= s * s;

  CriticalPoint cp;
  cp.kind = CriticalKind::degenerate;
  cp.alpha1 = unit_alpha(Vec(), m);
  cp.gamma = c.gamma;
  cp.beta = c.beta;
  cp.eta = c.eta;
  cp.params = zero_params(3, m);
  cp.params.W0 = c.gamma * cp.alpha1.transpose();
  cp.params.W1 = cp.alpha1 * c.beta.transpose();
  cp.params.WQ = std::sqrt(c.eta) * cp.alpha1 * cp.alpha1.transpose();
  cp.params.WK = cp.params.WQ;
  cp.grad_norm = grad_norm(param_gradient_population(cp.params, spec));
  if (!(cp.grad_norm < kCertifyTol))
    throw CertificationError("degenerate point gradient norm " + std::to_string(cp.grad_norm));
  return cp;
}


std::string critical_to_json(const CriticalPoint& p, const MarkovSpec& spec) {
  nlohmann::json j;
  j["kind"] = kind_name(p.kind);
  j["d"] = p.params.d();
  j["m"] = p.params.m();
  j["kappa1"] = p.kappa1;
  j["grad_norm"] = p.grad_norm;
  j["alpha1"] = vec_std(p.alpha1);
  if (p.kind == CriticalKind::degenerate) {
    j["gamma"] = vec_std(p.gamma);
    j["beta"] = vec_std(p.beta);
    j["eta"] = p.eta;
  }
  const PopulationState st = population_forward(p.params, spec);
  j["A"] = mat_json(st.A);
  j["Pm"] = mat_json(st.Pm);
  j["loss"] = st.loss;
  j["W0"] = mat_json(p.params.W0);
  j["W1"] = mat_json(p.params.W1);
  j["WQ"] = mat_json(p.params.WQ);
  j["WK"] = mat_json(p.params.WK);
  return j.dump(2);
}

std::string linearization_to_json(const Linearization& lin, int top_k) {
  nlohmann::json j;
  j["eigenvalues"] = vec_std(lin.eigenvalues);
  j["mu"] = lin.mu;
  j["gap"] = lin.gap;
  j["top_multiplicity"] = lin.top_multiplicity;
  j["asymmetry"] = lin.asymmetry;
  nlohmann::json ev = nlohmann::json::array();
  for (int k = 0; k < std::min<int>(top_k, static_cast<int>(lin.eigenvectors.cols())); ++k)
    ev.push_back(vec_std(lin.eigenvectors.col(k)));
  j["top_eigenvectors"] = ev;
  return j.dump(2);
}

}  // namespace attn
