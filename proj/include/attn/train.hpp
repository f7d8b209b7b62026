#pragma once

#include "attn/flow.hpp"

namespace attn {

enum class Optimizer { gd, adam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::adam;
  double lr = 1.5e-4;
  long long steps = 1000;
  int record_every = 10;
  int snapshot_every = 1;  // in records; 0 keeps only the final state
  int threads = 1;
};

// Full-batch training on the empirical loss. Times in the returned
// trajectory are step counts. pi feeds the proxy-attention diagnostics and
// defaults to the empirical token frequencies.
Trajectory train(const ModelParams& init, const Dataset& data, const TrainConfig& cfg, const Vec& pi = Vec());

}  // namespace attn
