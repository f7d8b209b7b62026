#pragma once

#include <string>
#include <vector>

#include "attn/critical.hpp"
#include "attn/flow.hpp"

namespace attn {

// Chart z = (gamma, beta) in R^6 with eta frozen at the degenerate point.
struct LSDecomposition {
  Mat QK, QR;      // 6 x 3
  Mat J0;          // analytic, 6 x 6
  Mat J0_fd;       // finite-difference chart Hessian (negated)
  Mat LambdaR;     // QR^T J0 QR
  double c1 = 0;
  Vec z0;          // chart point
  double eta = 0;
  int m = 0;
  Vec alpha1;
  double orth_error = 0;     // max of |QK^T QK - I|, |QR^T QR - I|, |QK^T QR|
  Vec kernel_residual;       // |J0 k_i|
  double j0_fd_diff = 0;     // max entrywise |J0 - J0_fd|
};

LSDecomposition ls_decompose(const CriticalPoint& point, const MarkovSpec& spec);

// S = lambda g2 + (1 - lambda)(pi1 g1 + (1 - pi1) g2)
double forcing_scalar(const CriticalPoint& point, const MarkovSpec& spec);
Vec compute_f1(const CriticalPoint& point, const MarkovSpec& spec);
// -(d/d delta) of the chart gradient at fixed chart point, central difference.
Vec f1_finite_difference(const CriticalPoint& point, const MarkovSpec& spec, double h = 1e-5);

// Ratio S / c1 of the appendix lemma; distinct from the growth rate c.
double c_zeta(const LSDecomposition& ls, const CriticalPoint& point, const MarkovSpec& spec);
// c_zeta (1 - pi1) g2 P_{2,2} - (lambda + (1 - pi1)(1 - lambda)); must be nonzero.
double transverse_condition(const LSDecomposition& ls, const CriticalPoint& point, const MarkovSpec& spec);

MarkovSpec delta_spec(const MarkovSpec& base, double delta);

struct PerturbedPoint {
  double delta = 0;
  ModelParams theta;
  Vec z;              // chart coordinates of theta
  Vec zeta;           // range coordinates used
  Vec zeta1, zeta2nd; // first and second delta-derivatives of zeta
  double zeta2 = 0;   // second range coordinate, first order
  double zeta2_closed = 0;
  double grad_norm = 0;
  double grad_norm_unperturbed = 0;   // degenerate point under the delta data
  double range_residual = 0;          // |QR^T chart grad|
  double kernel_residual = 0;
  double grad_norm_first_order = 0;   // same quantities at the first-order point
  double range_residual_first_order = 0;
  double kernel_residual_first_order = 0;
};

// order 1 uses zeta = delta zeta'; order 2 adds delta^2 zeta''/2 with zeta''
// taken from exact range solves at +-h2.
PerturbedPoint build_perturbed_point(const LSDecomposition& ls, const MarkovSpec& spec, double delta, int order = 2,
                                     double h2 = 1e-3);

struct EigenSplit {
  double transverse_max = 0;
  double tangential_max = 0;
  Vec eigenvalues;
  double asymmetry = 0;
};
EigenSplit scale_split_eigen(const PerturbedPoint& pp, const LSDecomposition& ls, const MarkovSpec& spec_delta,
                             int threads = 1);

struct KernelProjection {
  double QK_H1_QK = 0, H1_norm = 0;
  double QK_J1_QK = 0, J1_norm = 0;
};
// H1: delta-derivative of the chart Hessian along theta(delta); J1: the
// same at the fixed degenerate point.
KernelProjection kernel_projection(const LSDecomposition& ls, const MarkovSpec& spec, double h = 1e-4);

struct SweepRow {
  double delta = 0, grad_norm = 0, transverse_max_eig = 0, tangential_max_eig = 0;
  double range_residual = 0, kernel_residual = 0, grad_norm_unperturbed = 0;
  double grad_norm_first_order = 0, range_residual_first_order = 0;
};
struct SweepReport {
  std::vector<SweepRow> rows;
  LineFit grad_fit, transverse_fit, tangential_fit, range_fit, range_first_order_fit;
  KernelProjection kernel;
  double condition = 0;
};
SweepReport ls_sweep(const MarkovSpec& spec, int m, const std::vector<double>& deltas, int threads = 1);
std::string sweep_to_json(const SweepReport& r);

struct EscapeResult {
  Trajectory traj;
  std::vector<double> distance;  // manifold_distance per record
  std::vector<double> row_diff;  // |A_2 - A_3| per record
  std::vector<double> orth;      // orthogonal component norm per record
  LineFit rate_fit;
  double fit_t0 = 0, fit_t1 = 0;
};
EscapeResult escape_experiment(const PerturbedPoint& pp, const MarkovSpec& spec_delta, const FlowConfig& cfg,
                               double kick = 1e-8, std::uint64_t seed = 1, double fit_lo = 1e-6, double fit_hi = 1e-3);

}  // namespace attn
