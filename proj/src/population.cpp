#include "attn/population.hpp"

#include <cmath>

namespace attn {

Mat proxy_attention(const ModelParams& p, const MarkovSpec& spec) {
  if (p.d() != spec.d()) throw ValidationError("parameter and spec dimensions differ");
  return proxy_attention_phi<double>(p.Phi(), spec.pi());
}

PopulationState population_forward(const ModelParams& p, const MarkovSpec& spec) {
  if (p.d() != spec.d()) throw ValidationError("parameter and spec dimensions differ");
  return population_forward_t<double>(p, spec);
}

ParamGradient param_gradient_population(const ModelParams& p, const MarkovSpec& spec) {
  if (p.d() != spec.d()) throw ValidationError("parameter and spec dimensions differ");
  return param_gradient_t<double>(p, spec);
}

double population_loss(const ModelParams& p, const MarkovSpec& spec) { return population_forward(p, spec).loss; }

double grad_norm(const ParamGradient& g) {
  return std::sqrt(g.W0.squaredNorm() + g.W1.squaredNorm() + g.WQ.squaredNorm() + g.WK.squaredNorm());
}

double entropy_floor(const MarkovSpec& spec) {
  double h = 0;
  for (int i = 0; i < spec.d(); ++i) h += spec.pi()(i) * shannon_entropy(spec.P.row(i).transpose());
  return h;
}

MonteCarloResult monte_carlo_agreement(const ModelParams& p, const MarkovSpec& spec, std::size_t N, int s,
                                       std::uint64_t seed, int threads) {
  MonteCarloResult r;
  const Dataset data = sample_dataset(spec, N, s, seed, threads);
  r.empirical = empirical_loss_grad(p, data, threads).second;
  r.population = param_gradient_population(p, spec);
  const Vec e = flatten<double>(r.empirical), q = flatten<double>(r.population);
  r.rel_error = (e - q).norm() / q.norm();
  return r;
}

}  // namespace attn
