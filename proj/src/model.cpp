#include "attn/model.hpp"

#include <cmath>
#include <json.hpp>

#include "attn/io.hpp"
#include "attn/parallel.hpp"
#include "attn/rng.hpp"

namespace attn {

ModelParams zero_params(int d, int m) {
  ModelParams p;
  p.W0 = Mat::Zero(d, m);
  p.W1 = Mat::Zero(m, d);
  p.WQ = Mat::Zero(m, m);
  p.WK = Mat::Zero(m, m);
  return p;
}

ModelParams init_params(int d, int m, double eps, std::uint64_t seed) {
  if (eps < 0) throw ValidationError("eps must be >= 0");
  ModelParams p = zero_params(d, m);
  Rng rng(seed, 0xA11CE);
  for (Mat* w : {&p.W0, &p.W1, &p.WQ, &p.WK})
    for (Eigen::Index i = 0; i < w->rows(); ++i)
      for (Eigen::Index j = 0; j < w->cols(); ++j) (*w)(i, j) = eps * rng.normal();
  return p;
}

bool all_finite(const ModelParams& p) {
  return p.W0.allFinite() && p.W1.allFinite() && p.WQ.allFinite() && p.WK.allFinite();
}

ForwardTrace forward(const ModelParams& p, const std::vector<int>& x) {
  const int s = static_cast<int>(x.size());
  const int d = p.d();
  if (s < 1) throw ValidationError("empty sequence");
  Mat Z(s, p.m());
  for (int j = 0; j < s; ++j) {
    if (x[j] < 0 || x[j] >= d) throw ValidationError("token index out of range");
    Z.row(j) = p.W0.row(x[j]);
  }
  const Mat scores = Z * p.WQK() * Z.transpose();
  ForwardTrace tr;
  tr.attn.resize(s, s);
  for (int j = 0; j < s; ++j) tr.attn.row(j) = softmax<double>(scores.row(j).transpose()).transpose();
  tr.logits = tr.attn * Z * p.W1;
  tr.last_row_probs = softmax<double>(tr.logits.row(s - 1).transpose());
  return tr;
}

namespace {
// Blocks fixed independent of thread count so the reduction order is stable.
constexpr std::size_t kBlocks = 64;
}

EmpiricalDerivs empirical_derivs(const Mat& M, const Mat& Phi, const Dataset& data, int threads) {
  const int d = static_cast<int>(M.rows());
  if (data.d != d) throw ValidationError("dataset vocabulary does not match parameters");
  if (data.N() == 0) throw ValidationError("empty dataset");
  const std::size_t N = data.N();
  const std::size_t B = std::min(kBlocks, N);
  std::vector<double> bl(B, 0.0);
  std::vector<Mat> bM(B, Mat::Zero(d, d)), bP(B, Mat::Zero(d, d));
  parallel_for(B, threads, [&](std::size_t b) {
    Vec cnt(d), a(d), r(d);
    for (std::size_t n = b * N / B; n < (b + 1) * N / B; ++n) {
      const auto& x = data.sequences[n];
      const int i = x.back();
      const int y = data.labels[n];
      cnt.setZero();
      for (int t : x) cnt(t) += 1;
      double mx = -INFINITY;
      for (int t = 0; t < d; ++t)
        if (cnt(t) > 0) mx = std::max(mx, Phi(i, t));
      for (int t = 0; t < d; ++t) a(t) = cnt(t) > 0 ? cnt(t) * std::exp(Phi(i, t) - mx) : 0.0;
      a /= a.sum();
      const Vec z = M.transpose() * a;
      const Vec pr = softmax<double>(z);
      bl[b] -= std::log(pr(y));
      r = pr;
      r(y) -= 1.0;
      bM[b] += a * r.transpose();
      const Vec v = M * r;
      bP[b].row(i) += (var_matrix<double>(a) * v).transpose();
    }
  });
  EmpiricalDerivs out;
  out.gM = Mat::Zero(d, d);
  out.gPhi = Mat::Zero(d, d);
  for (std::size_t b = 0; b < B; ++b) {
    out.loss += bl[b];
    out.gM += bM[b];
    out.gPhi += bP[b];
  }
  const double inv = 1.0 / static_cast<double>(N);
  out.loss *= inv;
  out.gM *= inv;
  out.gPhi *= inv;
  return out;
}

double empirical_loss(const ModelParams& p, const Dataset& data, int threads) {
  return empirical_derivs(p.M(), p.Phi(), data, threads).loss;
}

std::pair<double, ParamGradient> empirical_loss_grad(const ModelParams& p, const Dataset& data, int threads) {
  EmpiricalDerivs e = empirical_derivs(p.M(), p.Phi(), data, threads);
  return {e.loss, chain_rule<double>(p, e.gM, e.gPhi)};
}


std::string params_to_json(const ModelParams& p, long long step) {
  nlohmann::json j;
  j["d"] = p.d();
  j["m"] = p.m();
  j["step"] = step;
  j["W0"] = mat_json(p.W0);
  j["W1"] = mat_json(p.W1);
  j["WQ"] = mat_json(p.WQ);
  j["WK"] = mat_json(p.WK);
  return j.dump();
}

ModelParams params_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  const int d = j.at("d").get<int>(), m = j.at("m").get<int>();
  ModelParams p;
  p.W0 = json_mat(j.at("W0"), d, m);
  p.W1 = json_mat(j.at("W1"), m, d);
  p.WQ = json_mat(j.at("WQ"), m, m);
  p.WK = json_mat(j.at("WK"), m, m);
  return p;
}

}  // namespace attn
