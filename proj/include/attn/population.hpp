#pragma once

#include "attn/common.hpp"
#include "attn/markov.hpp"
#include "attn/model.hpp"

namespace attn {

template <class T>
struct PopulationStateT {
  MatT<T> A, Pm, gM, gPhi;
  T loss{};
};
using PopulationState = PopulationStateT<double>;

// Row i is the pi-weighted softmax of Phi row i.
template <class T>
MatT<T> proxy_attention_phi(const MatT<T>& Phi, const Vec& pi) {
  const Eigen::Index d = Phi.rows();
  MatT<T> A(d, d);
  VecT<T> row(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) row(j) = Phi(i, j) + std::log(pi(j));
    A.row(i) = softmax<T>(row).transpose();
  }
  return A;
}

// Population objects as functions of (M, Phi). Tokens with pi_j = 0 drop out
// of the attention softmax (log 0 = -inf gives weight 0).
template <class T>
PopulationStateT<T> population_mphi(const MatT<T>& M, const MatT<T>& Phi, const MarkovSpec& spec) {
  const Eigen::Index d = M.rows();
  const Vec& pi = spec.pi();
  PopulationStateT<T> st;
  st.A = proxy_attention_phi<T>(Phi, pi);
  st.Pm.resize(d, d);
  st.gM = MatT<T>::Zero(d, d);
  st.gPhi = MatT<T>::Zero(d, d);
  st.loss = T(0);
  for (Eigen::Index i = 0; i < d; ++i) {
    const VecT<T> a = st.A.row(i).transpose();
    const VecT<T> pr = softmax<T>(VecT<T>(M.transpose() * a));
    st.Pm.row(i) = pr.transpose();
    const VecT<T> r = spec.P.row(i).transpose().template cast<T>() - pr;
    st.gM -= pi(i) * a * r.transpose();
    st.gPhi.row(i) -= pi(i) * (var_matrix<T>(a) * (M * r)).transpose();
    for (Eigen::Index j = 0; j < d; ++j) {
      using std::log;
      if (spec.P(i, j) > 0) st.loss -= pi(i) * spec.P(i, j) * log(pr(j));
    }
  }
  return st;
}

template <class T>
PopulationStateT<T> population_forward_t(const ParamsT<T>& p, const MarkovSpec& spec) {
  return population_mphi<T>(p.M(), p.Phi(), spec);
}

template <class T>
ParamsT<T> param_gradient_t(const ParamsT<T>& p, const MarkovSpec& spec) {
  const PopulationStateT<T> st = population_forward_t<T>(p, spec);
  return chain_rule<T>(p, st.gM, st.gPhi);
}

// Flattened gradient, usable with complex scalars for complex-step Jacobians.
template <class T>
VecT<T> flat_gradient(const VecT<T>& x, int d, int m, const MarkovSpec& spec) {
  return flatten<T>(param_gradient_t<T>(unflatten<T>(x, d, m), spec));
}

Mat proxy_attention(const ModelParams& p, const MarkovSpec& spec);
PopulationState population_forward(const ModelParams& p, const MarkovSpec& spec);
ParamGradient param_gradient_population(const ModelParams& p, const MarkovSpec& spec);
double population_loss(const ModelParams& p, const MarkovSpec& spec);
double grad_norm(const ParamGradient& g);
// Sum of P-row entropies weighted by pi: the loss floor.
double entropy_floor(const MarkovSpec& spec);

struct MonteCarloResult {
  double rel_error = 0;
  ParamGradient empirical, population;
};
MonteCarloResult monte_carlo_agreement(const ModelParams& p, const MarkovSpec& spec, std::size_t N, int s,
                                       std::uint64_t seed, int threads = 1);

}  // namespace attn
