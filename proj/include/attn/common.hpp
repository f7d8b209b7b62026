#pragma once

#include <Eigen/Dense>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace attn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
template <class T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;
using cplx = std::complex<double>;

// Thrown when inputs violate a precondition; the CLI maps it to exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a numerical certificate cannot be produced; exit code 2.
struct CertificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double re(double x) { return x; }
inline double re(const cplx& x) { return x.real(); }

// Least-squares line y = a + b x.
struct LineFit {
  double intercept = 0, slope = 0, r2 = 0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);
LineFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

// Var(a) = diag(a) - a a^T
template <class T>
MatT<T> var_matrix(const VecT<T>& a) {
  MatT<T> v = -a * a.transpose();
  v.diagonal() += a;
  return v;
}

template <class T>
VecT<T> softmax(const VecT<T>& z) {
  double mx = re(z(0));
  for (Eigen::Index i = 1; i < z.size(); ++i) mx = std::max(mx, re(z(i)));
  VecT<T> e(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    using std::exp;
    e(i) = exp(z(i) - mx);
  }
  return e / e.sum();
}

double shannon_entropy(const Vec& p);

}  // namespace attn
