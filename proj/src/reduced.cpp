#include "attn/reduced.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

namespace attn {

namespace {

Vec e1(int m) {
  Vec e = Vec::Zero(m);
  e(0) = 1;
  return e;
}

Vec unit_or_e1(const Vec& v, int m) {
  if (v.size() == 0) return e1(m);
  if (v.size() != m || !(v.norm() > 0)) throw ValidationError("alpha vectors must be nonzero with length m");
  return v.normalized();
}

double sigmoid(double x) { return x >= 0 ? 1 / (1 + std::exp(-x)) : std::exp(x) / (1 + std::exp(x)); }

}  // namespace

RankOneState make_rank_one(const Vec& gamma, const Vec& beta, double eta, int m, const Vec& alpha1,
                           const Vec& alpha1_tilde) {
  if (gamma.size() != beta.size()) throw ValidationError("gamma and beta lengths differ");
  if (eta < 0) throw ValidationError("balanced state needs eta >= 0");
  RankOneState s;
  s.gamma = gamma;
  s.beta = beta;
  s.lamQ = s.lamK = std::sqrt(eta);
  s.alpha1 = unit_or_e1(alpha1, m);
  s.alpha1_tilde = unit_or_e1(alpha1_tilde, m);
  return s;
}

ModelParams lift(const RankOneState& s, int d, int m) {
  if (s.gamma.size() != d || s.alpha1.size() != m) throw ValidationError("lift: dimension mismatch");
  ModelParams p;
  p.W0 = s.gamma * s.alpha1.transpose();
  p.W1 = s.alpha1 * s.beta.transpose();
  p.WQ = s.lamQ * s.alpha1 * s.alpha1_tilde.transpose();
  p.WK = s.lamK * s.alpha1 * s.alpha1_tilde.transpose();
  return p;
}

RankOneState project(const ModelParams& p, const Vec& alpha1, const Vec& alpha1_tilde) {
  RankOneState s;
  s.alpha1 = alpha1;
  s.alpha1_tilde = alpha1_tilde;
  s.gamma = p.W0 * alpha1;
  s.beta = p.W1.transpose() * alpha1;
  s.lamQ = alpha1.dot(p.WQ * alpha1_tilde);
  s.lamK = alpha1.dot(p.WK * alpha1_tilde);
  return s;
}

RankOneRate reduced_rhs(const RankOneState& s, const MarkovSpec& spec) {
  const double eta = s.eta();
  const PopulationState st =
      population_mphi<double>(s.gamma * s.beta.transpose(), eta * s.gamma * s.gamma.transpose(), spec);
  RankOneRate r;
  r.dgamma = -st.gM * s.beta - eta * (st.gPhi + st.gPhi.transpose()) * s.gamma;
  r.dbeta = -st.gM.transpose() * s.gamma;
  const double q = s.gamma.dot(st.gPhi * s.gamma);
  r.dlamQ = -s.lamK * q;
  r.dlamK = -s.lamQ * q;
  r.deta = -(s.lamQ * s.lamQ + s.lamK * s.lamK) * q;
  return r;
}

double conservation_quantity(const Vec& gamma, const MarkovSpec& spec) {
  const double p1 = spec.pi()(0);
  return (1 - p1) * gamma(0) - p1 * (gamma.sum() - gamma(0));
}

double conservation_quantity(const RankOneState& s, const MarkovSpec& spec) {
  return conservation_quantity(s.gamma, spec);
}

TwoGroupState two_group_state(double g1, double g2, double b1, double b2, double eta, const MarkovSpec& spec) {
  const int d = spec.d();
  const double p1 = spec.pi()(0);
  TwoGroupState s{g1, g2, b1, b2, eta};
  s.dgamma = g1 - g2;
  s.dbeta = b1 - b2;
  // ratio form keeps large eta finite
  s.xi1 = 1 / (1 + (1 - p1) / p1 * std::exp(eta * g1 * g2 - eta * g1 * g1));
  s.xi2 = 1 / (1 + (1 - p1) / p1 * std::exp(eta * g2 * g2 - eta * g1 * g2));
  s.m1 = g2 + s.xi1 * s.dgamma;
  s.m2 = g2 + s.xi2 * s.dgamma;
  const double ld = std::log(static_cast<double>(d - 1));
  s.r1 = spec.P(0, 0) - sigmoid(s.m1 * s.dbeta - ld);
  s.r2 = spec.P(1, 0) - sigmoid(s.m2 * s.dbeta - ld);
  return s;
}

TwoGroupRate two_group_rhs(const TwoGroupState& s, const MarkovSpec& spec) {
  const double d1 = spec.d() - 1.0;
  const double p1 = spec.pi()(0), p2 = 1 - p1;
  const double a = s.g1, b = s.g2, Dg = s.dgamma, Db = s.dbeta;
  const double v1 = s.xi1 * (1 - s.xi1), v2 = s.xi2 * (1 - s.xi2);
  TwoGroupRate r;
  // M-driven
  r.dg1 = Db * (p1 * s.r1 * s.xi1 + p2 * s.r2 * s.xi2);
  r.dg2 = Db / d1 * (p1 * s.r1 * (1 - s.xi1) + p2 * s.r2 * (1 - s.xi2));
  // Phi-driven
  r.dg1 += s.eta * Db * (p1 * s.r1 * v1 * (Dg * Dg + a * Dg) + p2 * s.r2 * b * v2 * Dg);
  r.dg2 += s.eta * Db / d1 * (-p1 * s.r1 * a * v1 * Dg + p2 * s.r2 * v2 * (Dg * Dg - b * Dg));
  const double w = p1 * s.m1 * s.r1 + p2 * s.m2 * s.r2;
  r.db1 = w;
  r.db2 = -w / d1;
  r.deta = 2 * s.eta * Db * Dg * Dg * (p1 * s.r1 * a * v1 + p2 * s.r2 * b * v2);
  return r;
}

RankOneState embed(const TwoGroupState& s, int d, int m) {
  Vec g = Vec::Constant(d, s.g2), b = Vec::Constant(d, s.b2);
  g(0) = s.g1;
  b(0) = s.b1;
  return make_rank_one(g, b, s.eta, m);
}

double manifold_distance(const ModelParams& p) {
  const double total = p.W0.squaredNorm() + p.W1.squaredNorm() + p.WQ.squaredNorm() + p.WK.squaredNorm();
  if (total == 0) return 0.0;
  const Mat S = p.W0.transpose() * p.W0 + p.W1 * p.W1.transpose() + p.WQ * p.WQ.transpose() + p.WK * p.WK.transpose();
  Eigen::SelfAdjointEigenSolver<Mat> es(S);
  const Vec a = es.eigenvectors().col(S.rows() - 1);
  const Mat Pa = a * a.transpose();
  double res = (p.W0 - p.W0 * Pa).squaredNorm() + (p.W1 - Pa * p.W1).squaredNorm();
  const Mat T = p.WQ.transpose() * p.WQ + p.WK.transpose() * p.WK;
  if (T.squaredNorm() > 0) {
    Eigen::SelfAdjointEigenSolver<Mat> et(T);
    const Vec bt = et.eigenvectors().col(T.rows() - 1);
    const Mat Pb = bt * bt.transpose();
    res += (p.WQ - Pa * p.WQ * Pb).squaredNorm() + (p.WK - Pa * p.WK * Pb).squaredNorm();
  }
  return std::sqrt(res / total);
}

double low_token_spread(const ModelParams& p, const Vec& alpha1) {
  const Vec g = p.W0 * alpha1, b = p.W1.transpose() * alpha1;
  const Eigen::Index d = g.size();
  if (d < 3) return 0.0;
  const double sg = g.tail(d - 1).maxCoeff() - g.tail(d - 1).minCoeff();
  const double sb = b.tail(d - 1).maxCoeff() - b.tail(d - 1).minCoeff();
  return std::max(sg, sb);
}

namespace {

Vec pack(const RankOneState& s) {
  const Eigen::Index d = s.gamma.size();
  Vec y(2 * d + 2);
  y << s.gamma, s.beta, s.lamQ, s.lamK;
  return y;
}

RankOneState unpack(const Vec& y, const RankOneState& like) {
  const Eigen::Index d = (y.size() - 2) / 2;
  RankOneState s = like;
  s.gamma = y.head(d);
  s.beta = y.segment(d, d);
  s.lamQ = y(2 * d);
  s.lamK = y(2 * d + 1);
  return s;
}

Vec pack_rate(const RankOneRate& r) {
  const Eigen::Index d = r.dgamma.size();
  Vec y(2 * d + 2);
  y << r.dgamma, r.dbeta, r.dlamQ, r.dlamK;
  return y;
}

template <class F>
Vec rk4(const Vec& y, double h, F f) {
  const Vec k1 = f(y), k2 = f(y + 0.5 * h * k1), k3 = f(y + 0.5 * h * k2), k4 = f(y + h * k3);
  return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
}

}  // namespace

ReducedTrajectory integrate_reduced(const RankOneState& s0, const MarkovSpec& spec, double h, double T,
                                    int record_every) {
  if (!(h > 0) || !(T > 0) || record_every < 1) throw ValidationError("integrate_reduced: bad step settings");
  auto f = [&](const Vec& y) { return pack_rate(reduced_rhs(unpack(y, s0), spec)); };
  const long long n = std::llround(std::ceil(T / h - 1e-9));
  ReducedTrajectory tr;
  Vec y = pack(s0);
  tr.times.push_back(0);
  tr.states.push_back(s0);
  for (long long k = 1; k <= n; ++k) {
    y = rk4(y, h, f);
    if (!y.allFinite()) throw CertificationError("reduced flow diverged");
    if (k % record_every == 0 || k == n) {
      tr.times.push_back(static_cast<double>(k) * h);
      tr.states.push_back(unpack(y, s0));
    }
  }
  return tr;
}

TwoGroupTrajectory integrate_two_group(const TwoGroupState& s0, const MarkovSpec& spec, double h, double T,
                                       int record_every) {
  if (!(h > 0) || !(T > 0) || record_every < 1) throw ValidationError("integrate_two_group: bad step settings");
  auto f = [&](const Vec& y) {
    const TwoGroupRate r = two_group_rhs(two_group_state(y(0), y(1), y(2), y(3), y(4), spec), spec);
    return Vec((Vec(5) << r.dg1, r.dg2, r.db1, r.db2, r.deta).finished());
  };
  const int d = spec.d();
  auto Qof = [&](const TwoGroupState& s) { return (1 - spec.pi()(0)) * s.g1 - (d - 1) * spec.pi()(0) * s.g2; };
  const long long n = std::llround(std::ceil(T / h - 1e-9));
  TwoGroupTrajectory tr;
  Vec y(5);
  y << s0.g1, s0.g2, s0.b1, s0.b2, s0.eta;
  auto push = [&](double t) {
    const TwoGroupState s = two_group_state(y(0), y(1), y(2), y(3), y(4), spec);
    tr.times.push_back(t);
    tr.states.push_back(s);
    tr.Q.push_back(Qof(s));
  };
  push(0);
  for (long long k = 1; k <= n; ++k) {
    y = rk4(y, h, f);
    if (!y.allFinite()) throw CertificationError("two-group flow diverged");
    if (k % record_every == 0 || k == n) push(static_cast<double>(k) * h);
  }
  return tr;
}

std::string two_group_csv(const TwoGroupTrajectory& tr) {
  std::string s = "t,g1,g2,b1,b2,eta,xi1,xi2,r1,r2,Q\n";
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    const TwoGroupState& x = tr.states[k];
    s += fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n",
                     tr.times[k], x.g1, x.g2, x.b1, x.b2, x.eta, x.xi1, x.xi2, x.r1, x.r2, tr.Q[k]);
  }
  return s;
}

RateFit fit_conservation_rate(const std::vector<double>& t, const std::vector<double>& Q, double gamma_norm,
                              double cap_frac, double lower_frac) {
  const double cap = cap_frac * gamma_norm, lo = lower_frac * cap;
  std::vector<double> x, y;
  RateFit rf;
  double prev = 0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double q = std::abs(Q[k]);
    if (k > 0 && q < prev) break;  // monotone stretch only
    prev = q;
    if (q > cap) break;
    if (q >= lo) {
      if (x.empty()) rf.t_start = t[k];
      rf.t_end = t[k];
      x.push_back(t[k]);
      y.push_back(std::log(q));
    }
  }
  if (x.size() < 3) throw CertificationError("linear window for Q holds fewer than 3 points");
  rf.points = static_cast<int>(x.size());
  rf.fit = fit_line(x, y);
  return rf;
}

double eta_rate(const Vec& gamma, const Vec& beta, const MarkovSpec& spec) {
  const PopulationState st = population_mphi<double>(gamma * beta.transpose(), Mat::Zero(gamma.size(), gamma.size()), spec);
  return -2 * gamma.dot(st.gPhi * gamma);
}

}  // namespace attn
