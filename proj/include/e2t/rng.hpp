#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace e2t {

/// Seeded random stream. Independent sub-streams are derived with fork() so
/// that adding a consumer never perturbs the draws of another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  Rng fork(std::string_view tag) const;
  Rng fork(std::uint64_t index) const;

  double uniform();  // [0, 1)
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t below(std::size_t n);  // uniform in [0, n)
  void shuffle(std::vector<std::size_t>& v);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace e2t
