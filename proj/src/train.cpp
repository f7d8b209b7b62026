#include "attn/train.hpp"

#include <cmath>
#include <fmt/format.h>

namespace attn {

Trajectory train(const ModelParams& init, const Dataset& data, const TrainConfig& cfg, const Vec& pi_in) {
  if (!(cfg.lr > 0)) throw ValidationError("lr must be > 0");
  if (cfg.steps < 1) throw ValidationError("steps must be >= 1");
  if (cfg.record_every < 1) throw ValidationError("record_every must be >= 1");
  if (data.N() == 0) throw ValidationError("empty dataset");
  if (init.d() != data.d) throw ValidationError("parameter and data vocabulary sizes differ");
  const int d = init.d(), m = init.m();
  const Vec pi = pi_in.size() ? pi_in : empirical_frequencies(data);
  const double limit = 10 * std::log(static_cast<double>(d));

  Vec x = flatten<double>(init);
  Vec mom = Vec::Zero(x.size()), vel = Vec::Zero(x.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Trajectory tr;
  auto record = [&](long long step, double loss, bool last) {
    const ModelParams p = unflatten<double>(x, d, m);
    const double t = static_cast<double>(step);
    tr.times.push_back(t);
    tr.metrics.push_back(compute_metrics(t, loss, p, pi));
    const long long k = step / cfg.record_every;
    if (last || (cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0)) {
      tr.snapshot_times.push_back(t);
      tr.snapshots.push_back(p);
    }
  };

  for (long long step = 0;; ++step) {
    const auto [loss, g] = empirical_loss_grad(unflatten<double>(x, d, m), data, cfg.threads);
    if (!std::isfinite(loss) || loss > limit)
      throw CertificationError(fmt::format("training diverged at step {} (loss {})", step, loss));
    const bool last = step == cfg.steps;
    if (step % cfg.record_every == 0 || last) record(step, loss, last);
    if (last) break;
    const Vec gx = flatten<double>(g);
    if (cfg.optimizer == Optimizer::gd) {
      x -= cfg.lr * gx;
    } else {
      mom = b1 * mom + (1 - b1) * gx;
      vel = b2 * vel + (1 - b2) * gx.cwiseAbs2();
      const double c1 = 1 - std::pow(b1, static_cast<double>(step + 1));
      const double c2 = 1 - std::pow(b2, static_cast<double>(step + 1));
      x.array() -= cfg.lr * (mom.array() / c1) / ((vel.array() / c2).sqrt() + eps);
    }
    ++tr.accepted_steps;
  }
  return tr;
}

}  // namespace attn
