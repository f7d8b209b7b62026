#pragma once

#include <string>
#include <vector>

#include "attn/common.hpp"
#include "attn/markov.hpp"
#include "attn/model.hpp"
#include "attn/population.hpp"

namespace attn {

// W0 = gamma a^T, W1 = a beta^T, WQ = lamQ a b^T, WK = lamK a b^T with a = alpha1, b = alpha1_tilde.
struct RankOneState {
  Vec gamma, beta;
  double lamQ = 0, lamK = 0;
  Vec alpha1, alpha1_tilde;
  double eta() const { return lamQ * lamK; }
};

struct RankOneRate {
  Vec dgamma, dbeta;
  double dlamQ = 0, dlamK = 0, deta = 0;
};

// Balanced state (lamQ = lamK = sqrt(eta)) with alpha vectors defaulting to e_1.
RankOneState make_rank_one(const Vec& gamma, const Vec& beta, double eta, int m, const Vec& alpha1 = Vec(),
                           const Vec& alpha1_tilde = Vec());
ModelParams lift(const RankOneState& s, int d, int m);
RankOneState project(const ModelParams& p, const Vec& alpha1, const Vec& alpha1_tilde);
RankOneRate reduced_rhs(const RankOneState& s, const MarkovSpec& spec);
double conservation_quantity(const RankOneState& s, const MarkovSpec& spec);
double conservation_quantity(const Vec& gamma, const MarkovSpec& spec);

struct TwoGroupState {
  double g1 = 0, g2 = 0, b1 = 0, b2 = 0, eta = 0;
  // derived
  double dgamma = 0, dbeta = 0, xi1 = 0, xi2 = 0, m1 = 0, m2 = 0, r1 = 0, r2 = 0;
};
struct TwoGroupRate {
  double dg1 = 0, dg2 = 0, db1 = 0, db2 = 0, deta = 0;
};
TwoGroupState two_group_state(double g1, double g2, double b1, double b2, double eta, const MarkovSpec& spec);
TwoGroupRate two_group_rhs(const TwoGroupState& s, const MarkovSpec& spec);
RankOneState embed(const TwoGroupState& s, int d, int m);

// Relative residual of the best rank-one fit with shared alpha1 (and shared
// alpha1_tilde for WQ, WK).
double manifold_distance(const ModelParams& p);
// max spread of gamma_i and beta_i over i >= 2 after projecting onto alpha1.
double low_token_spread(const ModelParams& p, const Vec& alpha1);

struct ReducedTrajectory {
  std::vector<double> times;
  std::vector<RankOneState> states;
};
ReducedTrajectory integrate_reduced(const RankOneState& s0, const MarkovSpec& spec, double h, double T,
                                    int record_every = 1);

struct TwoGroupTrajectory {
  std::vector<double> times;
  std::vector<TwoGroupState> states;
  std::vector<double> Q;
};
TwoGroupTrajectory integrate_two_group(const TwoGroupState& s0, const MarkovSpec& spec, double h, double T,
                                       int record_every = 1);
std::string two_group_csv(const TwoGroupTrajectory& tr);

struct RateFit {
  LineFit fit;
  double t_start = 0, t_end = 0;
  int points = 0;
};
// Fits log|Q| against t over the stretch where |Q| is still rising and lies
// in [lower_frac * cap, cap], cap = cap_frac * |gamma|.
RateFit fit_conservation_rate(const std::vector<double>& t, const std::vector<double>& Q, double gamma_norm,
                              double cap_frac = 1e-2, double lower_frac = 1e-4);

// eta-rate at a point with Phi-gradient gPhi: -2 gamma^T gPhi gamma.
double eta_rate(const Vec& gamma, const Vec& beta, const MarkovSpec& spec);

// Gradient of L(gamma beta^T, eta gamma gamma^T) in the chart z = (gamma, beta).
template <class T>
VecT<T> chart_gradient(const VecT<T>& z, double eta, const MarkovSpec& spec) {
  const Eigen::Index d = z.size() / 2;
  const VecT<T> g = z.head(d), b = z.tail(d);
  const PopulationStateT<T> st = population_mphi<T>(MatT<T>(g * b.transpose()), MatT<T>(T(eta) * g * g.transpose()), spec);
  VecT<T> out(2 * d);
  out.head(d) = st.gM * b + T(eta) * (st.gPhi + st.gPhi.transpose()) * g;
  out.tail(d) = st.gM.transpose() * g;
  return out;
}

}  // namespace attn
