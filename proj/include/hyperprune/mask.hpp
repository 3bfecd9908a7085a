#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hyperprune {

/// Binary keep/drop vector over the channels governed by one latent.
struct Mask {
  std::string latent_id;
  std::vector<std::uint8_t> bits;

  int popcount() const {
    int n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  int size() const { return static_cast<int>(bits.size()); }

  /// Indices of surviving channels, in order.
  std::vector<int> kept() const {
    std::vector<int> idx;
    for (int i = 0; i < size(); ++i)
      if (bits[static_cast<size_t>(i)]) idx.push_back(i);
    return idx;
  }

  static Mask all_ones(const std::string& id, int n) {
    return Mask{id, std::vector<std::uint8_t>(static_cast<size_t>(n), 1)};
  }
};

}  // namespace hyperprune
