#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attn/common.hpp"

namespace attn {

struct StationaryDistribution {
  int d = 0;
  double pi1 = 0;
  Vec c;  // length d-1, sums to zero
  double delta = 0;
  Vec pi;
};

struct MarkovSpec {
  StationaryDistribution dist;
  double lambda = 0;
  Mat P;
  int d() const { return dist.d; }
  const Vec& pi() const { return dist.pi; }
};

// Tokens are stored 0-based; the JSON/binary forms use the same indices
// shifted by one.
struct Dataset {
  int d = 0;
  int s = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<int>> sequences;  // N x s
  std::vector<int> labels;                  // token s+1
  std::size_t N() const { return labels.size(); }
};

StationaryDistribution build_stationary(int d, double pi1, const Vec& c, double delta);
StationaryDistribution two_group(int d, double pi1);
// General distribution given explicitly; pi1 and c are recovered from it.
StationaryDistribution from_pi(const Vec& pi);
// (1/2, 1/4, ..., 1/2^d) normalised by its sum.
StationaryDistribution geometric_pi(int d);

MarkovSpec build_transition(const StationaryDistribution& dist, double lambda);
MarkovSpec perturbed_spec(const MarkovSpec& base, const Vec& c, double delta);

Dataset sample_dataset(const MarkovSpec& spec, std::size_t N, int s, std::uint64_t seed,
                       int threads = 1);
Vec empirical_frequencies(const Dataset& data);
// Frequencies of the token at the last context position only.
Vec last_token_frequencies(const Dataset& data);

void save_dataset_json(const Dataset& data, const std::string& path);
Dataset load_dataset_json(const std::string& path);
void save_dataset_binary(const Dataset& data, const std::string& path);
Dataset load_dataset_binary(const std::string& path);

}  // namespace attn
