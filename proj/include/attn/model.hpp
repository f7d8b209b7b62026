#pragma once

#include <cstdint>
#include <string>

#include "attn/common.hpp"
#include "attn/markov.hpp"

namespace attn {

template <class T>
struct ParamsT {
  MatT<T> W0, W1, WQ, WK;  // d x m, m x d, m x m, m x m
  int d() const { return static_cast<int>(W0.rows()); }
  int m() const { return static_cast<int>(W0.cols()); }
  MatT<T> Phi() const { return W0 * WQ * WK.transpose() * W0.transpose(); }
  MatT<T> M() const { return W0 * W1; }
  MatT<T> WQK() const { return WQ * WK.transpose(); }
};
using ModelParams = ParamsT<double>;
using ParamGradient = ParamsT<double>;

ModelParams zero_params(int d, int m);
// Every entry i.i.d. N(0, eps^2), drawn in the order W0, W1, WQ, WK (row-major).
ModelParams init_params(int d, int m, double eps, std::uint64_t seed);
bool all_finite(const ModelParams& p);

// Flattened layout: W0, W1, WQ, WK, each column-major.
inline std::size_t param_count(int d, int m) { return 2 * static_cast<std::size_t>(d) * m + 2 * static_cast<std::size_t>(m) * m; }
template <class T>
VecT<T> flatten(const ParamsT<T>& p) {
  VecT<T> x(param_count(p.d(), p.m()));
  Eigen::Index k = 0;
  for (const MatT<T>* w : {&p.W0, &p.W1, &p.WQ, &p.WK}) {
    x.segment(k, w->size()) = Eigen::Map<const VecT<T>>(w->data(), w->size());
    k += w->size();
  }
  return x;
}
template <class T>
ParamsT<T> unflatten(const VecT<T>& x, int d, int m) {
  ParamsT<T> p;
  p.W0.resize(d, m);
  p.W1.resize(m, d);
  p.WQ.resize(m, m);
  p.WK.resize(m, m);
  Eigen::Index k = 0;
  for (MatT<T>* w : {&p.W0, &p.W1, &p.WQ, &p.WK}) {
    Eigen::Map<VecT<T>>(w->data(), w->size()) = x.segment(k, w->size());
    k += w->size();
  }
  return p;
}

// Chain rule from (dL/dM, dL/dPhi) to the four weight matrices; returns +grad.
template <class T>
ParamsT<T> chain_rule(const ParamsT<T>& p, const MatT<T>& gM, const MatT<T>& gPhi) {
  const MatT<T> QK = p.WQK();
  ParamsT<T> g;
  g.W0 = gM * p.W1.transpose() + gPhi * p.W0 * QK.transpose() + gPhi.transpose() * p.W0 * QK;
  g.W1 = p.W0.transpose() * gM;
  g.WQ = p.W0.transpose() * gPhi * p.W0 * p.WK;
  g.WK = p.W0.transpose() * gPhi.transpose() * p.W0 * p.WQ;
  return g;
}

struct ForwardTrace {
  Mat logits;  // s x d
  Mat attn;    // s x s
  Vec last_row_probs;
};

ForwardTrace forward(const ModelParams& p, const std::vector<int>& x);

struct EmpiricalDerivs {
  double loss = 0;
  Mat gM, gPhi;
};
// Mean last-position cross-entropy and its derivatives in (M, Phi).
EmpiricalDerivs empirical_derivs(const Mat& M, const Mat& Phi, const Dataset& data, int threads = 1);
double empirical_loss(const ModelParams& p, const Dataset& data, int threads = 1);
std::pair<double, ParamGradient> empirical_loss_grad(const ModelParams& p, const Dataset& data, int threads = 1);

std::string params_to_json(const ModelParams& p, long long step);
ModelParams params_from_json(const std::string& text);

}  // namespace attn
