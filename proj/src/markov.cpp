#include "attn/markov.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "attn/parallel.hpp"
#include "attn/rng.hpp"

namespace attn {

StationaryDistribution build_stationary(int d, double pi1, const Vec& c, double delta) {
  if (d < 2) throw ValidationError("d must be >= 2");
  if (c.size() != d - 1) throw ValidationError("c must have length d-1");
  const double base = (1.0 - pi1) / (d - 1);
  if (!(pi1 > base && pi1 < 1.0)) throw ValidationError("pi1 must satisfy (1-pi1)/(d-1) < pi1 < 1");
  if (std::abs(c.sum()) > 1e-12) throw ValidationError("perturbation coefficients c must sum to 0");
  if (delta < 0) throw ValidationError("delta must be >= 0");
  StationaryDistribution s;
  s.d = d;
  s.pi1 = pi1;
  s.c = c;
  s.delta = delta;
  s.pi.resize(d);
  s.pi(0) = pi1;
  for (int i = 1; i < d; ++i) {
    s.pi(i) = base + c(i - 1) * delta;
    if (s.pi(i) < 0) throw ValidationError("perturbation makes pi_" + std::to_string(i + 1) + " negative");
  }
  return s;
}

StationaryDistribution two_group(int d, double pi1) { return build_stationary(d, pi1, Vec::Zero(d - 1), 0.0); }

StationaryDistribution from_pi(const Vec& pi) {
  const int d = static_cast<int>(pi.size());
  if (d < 2) throw ValidationError("d must be >= 2");
  if (std::abs(pi.sum() - 1.0) > 1e-12) throw ValidationError("pi must sum to 1");
  if ((pi.array() < 0).any()) throw ValidationError("pi entries must be nonnegative");
  const double base = (1.0 - pi(0)) / (d - 1);
  if (!(pi(0) > base && pi(0) < 1.0)) throw ValidationError("pi1 must satisfy (1-pi1)/(d-1) < pi1 < 1");
  StationaryDistribution s;
  s.d = d;
  s.pi1 = pi(0);
  s.pi = pi;
  s.c = pi.tail(d - 1).array() - base;
  s.delta = 1.0;
  return s;
}

StationaryDistribution geometric_pi(int d) {
  Vec p(d);
  for (int i = 0; i < d; ++i) p(i) = std::ldexp(1.0, -(i + 1));
  p /= p.sum();
  return from_pi(p);
}

MarkovSpec build_transition(const StationaryDistribution& dist, double lambda) {
  if (!(lambda > 0 && lambda < 1)) throw ValidationError("lambda must lie in (0,1)");
  MarkovSpec m;
  m.dist = dist;
  m.lambda = lambda;
  const int d = dist.d;
  m.P = (1 - lambda) * Vec::Ones(d) * dist.pi.transpose();
  m.P.diagonal().array() += lambda;
  Vec drift = m.P.transpose() * dist.pi - dist.pi;
  if (drift.lpNorm<Eigen::Infinity>() > 1e-12) throw CertificationError("stationarity check failed");
  return m;
}

MarkovSpec perturbed_spec(const MarkovSpec& base, const Vec& c, double delta) {
  return build_transition(build_stationary(base.d(), base.dist.pi1, c, delta), base.lambda);
}

namespace {
int draw(Rng& rng, const Vec& cdf) {
  const double u = rng.uniform();
  const int d = static_cast<int>(cdf.size());
  for (int k = 0; k < d - 1; ++k)
    if (u < cdf(k)) return k;
  return d - 1;
}
}  // namespace

Dataset sample_dataset(const MarkovSpec& spec, std::size_t N, int s, std::uint64_t seed, int threads) {
  if (N < 1 || s < 1) throw ValidationError("sample_dataset needs N >= 1 and s >= 1");
  const int d = spec.d();
  std::vector<Vec> cdf(d);
  for (int i = 0; i < d; ++i) {
    cdf[i].resize(d);
    double acc = 0;
    for (int j = 0; j < d; ++j) cdf[i](j) = (acc += spec.P(i, j));
  }
  Dataset data;
  data.d = d;
  data.s = s;
  data.seed = seed;
  data.sequences.assign(N, std::vector<int>(s));
  data.labels.assign(N, 0);
  parallel_for(N, threads, [&](std::size_t n) {
    Rng rng(seed, n);
    auto& x = data.sequences[n];
    x[0] = static_cast<int>(rng.below(d));
    for (int j = 1; j < s; ++j) x[j] = draw(rng, cdf[x[j - 1]]);
    data.labels[n] = draw(rng, cdf[x[s - 1]]);
  });
  return data;
}

Vec empirical_frequencies(const Dataset& data) {
  if (data.N() == 0) throw ValidationError("empty dataset");
  Vec f = Vec::Zero(data.d);
  for (const auto& x : data.sequences)
    for (int t : x) f(t) += 1;
  return f / f.sum();
}

Vec last_token_frequencies(const Dataset& data) {
  if (data.N() == 0) throw ValidationError("empty dataset");
  Vec f = Vec::Zero(data.d);
  for (const auto& x : data.sequences) f(x.back()) += 1;
  return f / f.sum();
}

void save_dataset_json(const Dataset& data, const std::string& path) {
  nlohmann::json j;
  j["d"] = data.d;
  j["s"] = data.s;
  j["N"] = data.N();
  j["seed"] = data.seed;
  auto seqs = nlohmann::json::array();
  for (const auto& x : data.sequences) {
    auto row = nlohmann::json::array();
    for (int t : x) row.push_back(t + 1);
    seqs.push_back(row);
  }
  j["sequences"] = seqs;
  auto labels = nlohmann::json::array();
  for (int y : data.labels) labels.push_back(y + 1);
  j["labels"] = labels;
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << j.dump() << "\n";
}

Dataset load_dataset_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  Dataset data;
  data.d = j.at("d").get<int>();
  data.s = j.at("s").get<int>();
  data.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& row : j.at("sequences")) {
    std::vector<int> x;
    for (const auto& t : row) x.push_back(t.get<int>() - 1);
    data.sequences.push_back(std::move(x));
  }
  for (const auto& y : j.at("labels")) data.labels.push_back(y.get<int>() - 1);
  if (data.sequences.size() != j.at("N").get<std::size_t>() || data.labels.size() != data.sequences.size())
    throw ValidationError("dataset N does not match contents");
  for (const auto& x : data.sequences) {
    if (static_cast<int>(x.size()) != data.s) throw ValidationError("sequence length mismatch");
    for (int t : x)
      if (t < 0 || t >= data.d) throw ValidationError("token index out of range");
  }
  for (int y : data.labels)
    if (y < 0 || y >= data.d) throw ValidationError("label index out of range");
  return data;
}

namespace {
void put_u32(std::ostream& o, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ostream& o, std::uint64_t v) {
  put_u32(o, static_cast<std::uint32_t>(v));
  put_u32(o, static_cast<std::uint32_t>(v >> 32));
}
std::uint32_t get_u32(std::istream& i) {
  unsigned char b[4];
  if (!i.read(reinterpret_cast<char*>(b), 4)) throw ValidationError("truncated binary dataset");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
std::uint64_t get_u64(std::istream& i) {
  std::uint64_t lo = get_u32(i);
  return lo | (static_cast<std::uint64_t>(get_u32(i)) << 32);
}
}  // namespace

// Layout: "MKV1", u32 d, u64 N, u32 s, u64 seed, then N*(s+1) u32 tokens
// (context followed by label), all little-endian and 1-based.
void save_dataset_binary(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out.write("MKV1", 4);
  put_u32(out, static_cast<std::uint32_t>(data.d));
  put_u64(out, data.N());
  put_u32(out, static_cast<std::uint32_t>(data.s));
  put_u64(out, data.seed);
  for (std::size_t n = 0; n < data.N(); ++n) {
    for (int t : data.sequences[n]) put_u32(out, static_cast<std::uint32_t>(t + 1));
    put_u32(out, static_cast<std::uint32_t>(data.labels[n] + 1));
  }
}

Dataset load_dataset_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "MKV1") throw ValidationError("bad magic in " + path);
  Dataset data;
  data.d = static_cast<int>(get_u32(in));
  const std::uint64_t N = get_u64(in);
  data.s = static_cast<int>(get_u32(in));
  data.seed = get_u64(in);
  data.sequences.assign(N, std::vector<int>(data.s));
  data.labels.assign(N, 0);
  for (std::uint64_t n = 0; n < N; ++n) {
    for (int j = 0; j < data.s; ++j) data.sequences[n][j] = static_cast<int>(get_u32(in)) - 1;
    data.labels[n] = static_cast<int>(get_u32(in)) - 1;
  }
  return data;
}

}  // namespace attn
