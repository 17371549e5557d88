#pragma once

// Reproducible random variates on keyed substreams.
//
// A substream is derived from (seed, hi, lo) -- in simulation use,
// (seed, supercluster index, cluster index) -- so clusters can be generated
// in parallel or in any order and still produce identical draws.
//
// The generator is pinned and must not change between versions:
//   stream state  three chained SplitMix64 finalizer steps over seed/hi/lo
//   core          SplitMix64 (Steele, Lea & Flood 2014)
//   uniform       53-bit mantissa in [0, 1)
//   normal        Box-Muller, pairs cached per stream
//   gamma         Marsaglia-Tsang squeeze; shape < 1 boosted via U^(1/a)
//   poisson       sequential inversion (mean < 10), Hormann PTRS otherwise

#include <cstdint>

namespace countvpc {

class Substream {
 public:
  Substream(uint64_t seed, uint64_t hi, uint64_t lo);

  uint64_t next_u64();
  double uniform();  // [0, 1)
  double normal();   // standard normal
  double gamma(double shape, double scale);
  long long poisson(double mean);

 private:
  double positive_uniform();  // (0, 1)

  uint64_t state_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace countvpc
