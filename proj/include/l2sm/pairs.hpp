#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "l2sm/error.hpp"

namespace l2sm {

struct PairRecord {
  std::size_t a;
  std::size_t b;
  bool is_same;

  bool operator==(const PairRecord&) const = default;
};

using PairList = std::vector<PairRecord>;

/// Indices in range and at least one genuine and one impostor pair.
inline void validate_pairs(const PairList& pairs, std::size_t num_samples) {
  std::size_t genuine = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.a >= num_samples || p.b >= num_samples) {
      throw InvalidArgument("pair " + std::to_string(i) + " references sample outside [0, " +
                            std::to_string(num_samples) + ")");
    }
    genuine += p.is_same;
  }
  if (genuine == 0 || genuine == pairs.size()) {
    throw InvalidArgument("pair list needs at least one genuine and one impostor pair (got " +
                          std::to_string(genuine) + " genuine of " + std::to_string(pairs.size()) + ")");
  }
}

}  // namespace l2sm
