#pragma once

#include <string>

#include "attn/common.hpp"
#include "attn/markov.hpp"
#include "attn/model.hpp"

namespace attn {

enum class CriticalKind { origin, second, degenerate };
std::string kind_name(CriticalKind k);

struct CriticalPoint {
  ModelParams params;
  CriticalKind kind = CriticalKind::origin;
  double kappa1 = 0;
  double grad_norm = 0;
  Vec alpha1;
  // Rank-one coordinates for the degenerate point (W0 = gamma alpha1^T,
  // W1 = alpha1 beta^T, WQ = WK = sqrt(eta) alpha1 alpha1^T).
  Vec gamma, beta;
  double eta = 0;
};

enum class JacobianMethod { central_fd, complex_step };

struct Linearization {
  Mat J;  // Jacobian of -grad L, symmetrised
  Vec eigenvalues;   // descending
  Mat eigenvectors;  // columns match eigenvalues
  double mu = 0;     // top eigenvalue
  double gap = 0;    // distance from the top cluster to the next eigenvalue
  int top_multiplicity = 0;
  double asymmetry = 0;  // max |J - J^T| before symmetrisation
};

constexpr double kCertifyTol = 1e-9;

CriticalPoint origin_point(int d, int m);

// Solves P_11(kappa) = pi_1 on the ray M = kappa^2 q u^T by bisection.
CriticalPoint find_kappa1(const MarkovSpec& spec, int m, const Vec& alpha1 = Vec());
// (1/c_pi) log((d-1) pi_1 / (1 - pi_1)) for two-group pi.
double kappa1_squared_closed_form(const MarkovSpec& spec);

Linearization linearize(const ModelParams& p, const MarkovSpec& spec, JacobianMethod method = JacobianMethod::central_fd,
                        double fd_step = 0, int threads = 1);
Linearization linearize(const CriticalPoint& point, const MarkovSpec& spec,
                        JacobianMethod method = JacobianMethod::central_fd, double fd_step = 0, int threads = 1);
// Jacobian of -grad L without symmetrisation.
Mat flow_jacobian(const ModelParams& p, const MarkovSpec& spec, JacobianMethod method, double fd_step, int threads);

// c = lambda kappa^4 (pi^T Var(pi) pi)^2 / (|pi - 1/d| |pi|^3)
double unstable_constant(const MarkovSpec& spec, double kappa1);

struct UnstableReport {
  double rank_one_residual_Q = 0, rank_one_residual_K = 0;
  double right_vector_angle = 0;  // principal angle between the WQ and WK right factors
  double left_alignment = 0;      // |<left factor, alpha1>|
  double phi_cosine = 0;          // cosine of the induced Phi direction with pi pi^T
  double focus_min_first_entry = 0;
  double focus_kappa_sq = 0;
  double cross_block = 0;  // max |J| between (W0,W1) and (WQ,WK) coordinates
  double out_block_max = 0;  // max eigenvalue of the (W0,W1) block
  double attn_block_max = 0;
};
// focus_level is the value of kappa^2 |pi|^2 pi_1 at which attention is probed.
UnstableReport unstable_direction_check(const CriticalPoint& point, const Linearization& lin, const MarkovSpec& spec,
                                        double focus_level = 40);

// d = 3 symmetric data. eta_large <= 0 selects it automatically.
CriticalPoint find_degenerate_point(const MarkovSpec& spec, int m, double eta_large = 0);

std::string critical_to_json(const CriticalPoint& p, const MarkovSpec& spec);
std::string linearization_to_json(const Linearization& lin, int top_k = 3);

}  // namespace attn
