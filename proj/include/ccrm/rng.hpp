#pragma once

#include <cstdint>
#include <random>

namespace ccrm::rng {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Key for (seed, replication, stream). Distinct triples give unrelated
/// engines, so replication i draws the same numbers however many replications
/// run and in whatever order.
constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t replication, std::uint64_t stream) {
  return mix(mix(mix(seed) ^ replication) ^ (stream * 0xd1b54a32d192ed03ULL));
}

using Engine = std::mt19937_64;

inline Engine engine(std::uint64_t seed, std::uint64_t replication, std::uint64_t stream) {
  return Engine(derive_key(seed, replication, stream));
}

/// Replication index reserved for draws shared by every replication of a study.
inline constexpr std::uint64_t kSharedReplication = ~std::uint64_t{0};

}  // namespace ccrm::rng
