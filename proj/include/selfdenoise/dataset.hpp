#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfdenoise/tensor.hpp"

namespace selfdenoise {

/// Equally shaped [C,S,S] patches with provenance.
template <typename T>
struct PatchDataset {
  std::vector<Tensor<T>> patches;
  std::string kind;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return patches.size(); }
  bool empty() const noexcept { return patches.empty(); }
  const Shape& patch_shape() const { return patches.at(0).shape(); }

  /// Throws unless all patches share one [C,S,S] shape with values in [0,1].
  void validate() const {
    if (patches.empty()) throw std::invalid_argument("dataset is empty");
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const auto& p = patches[i];
      if (p.rank() != 3 || p.dim(1) != p.dim(2) || p.shape() != patch_shape())
        throw DimensionError("patch " + std::to_string(i) + " has shape " + shape_str(p.shape()) +
                             ", expected square " + shape_str(patch_shape()));
      for (T v : p.data())
        if (!(v >= T{0} && v <= T{1}))
          throw std::invalid_argument("patch " + std::to_string(i) + " has a value outside [0,1]");
    }
  }

  /// [B,C,S,S] batch of the patches at `indices`.
  Tensor<T> batch(std::span<const std::size_t> indices) const {
    std::vector<Tensor<T>> items;
    items.reserve(indices.size());
    for (auto i : indices) items.push_back(patches.at(i));
    return stack<T>(items);
  }

  Tensor<T> all() const {
    std::vector<std::size_t> idx(patches.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return batch(idx);
  }

  template <typename U>
  PatchDataset<U> cast() const {
    PatchDataset<U> out{{}, kind, seed};
    for (const auto& p : patches) out.patches.push_back(p.template cast<U>());
    return out;
  }
};

}  // namespace selfdenoise
