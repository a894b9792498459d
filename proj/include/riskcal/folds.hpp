#pragma once

// Bookkeeping for cross-fitting: K-fold partitions of the labeled data and
// the pairing of contiguous unlabeled blocks with the labeled samples of a
// fold.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "riskcal/error.hpp"
#include "riskcal/rng.hpp"

namespace riskcal {

// Fold indices are 0-based: assignments[i] in [0, K).
class FoldPlan {
 public:
  FoldPlan(std::size_t folds, std::vector<std::size_t> assignments, std::uint64_t seed)
      : folds_(folds), assignments_(std::move(assignments)), seed_(seed) {
    detail::require(folds_ >= 1, "fold plan needs K >= 1");
    std::vector<std::size_t> sizes(folds_, 0);
    for (std::size_t a : assignments_) {
      detail::require(a < folds_, "fold assignment out of range");
      ++sizes[a];
    }
    for (std::size_t s : sizes) detail::require(s >= 1, "every fold must be nonempty");
  }

  std::size_t folds() const noexcept { return folds_; }
  std::size_t size() const noexcept { return assignments_.size(); }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<std::size_t>& assignments() const noexcept { return assignments_; }

  // Samples held out in fold k (in ascending sample order).
  std::vector<std::size_t> held_out(std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments_.size(); ++i) {
      if (assignments_[i] == k) out.push_back(i);
    }
    return out;
  }

  // Samples of every other fold: the training set of fold k's predictor.
  std::vector<std::size_t> training(std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments_.size(); ++i) {
      if (assignments_[i] != k) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> fold_sizes() const {
    std::vector<std::size_t> sizes(folds_, 0);
    for (std::size_t a : assignments_) ++sizes[a];
    return sizes;
  }

  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;

 private:
  std::size_t folds_;
  std::vector<std::size_t> assignments_;
  std::uint64_t seed_;
};

// Seeded shuffle followed by round-robin assignment, so fold sizes are
// floor(n/K) or ceil(n/K).
inline FoldPlan partition_folds(std::size_t n, std::size_t folds, std::uint64_t seed) {
  detail::require(n >= 1 && folds >= 1, "partition_folds: need n >= 1 and K >= 1");
  if (folds > n) {
    throw InvalidInput("partition_folds: K = " + std::to_string(folds) + " exceeds n = " + std::to_string(n));
  }
  const auto order = random_permutation(n, seed);
  std::vector<std::size_t> assignments(n);
  for (std::size_t p = 0; p < n; ++p) assignments[order[p]] = p % folds;
  return FoldPlan(folds, std::move(assignments), seed);
}

// Labeled sample i of a fold is paired with unlabeled rows
// [i * block_size, (i + 1) * block_size). Rows at or beyond truncated_size()
// are unused.
class BlockPairing {
 public:
  BlockPairing(std::size_t block_size, std::size_t blocks) : block_size_(block_size), blocks_(blocks) {
    detail::require(block_size_ >= 1 && blocks_ >= 1, "block pairing needs positive block size and count");
  }

  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t blocks() const noexcept { return blocks_; }
  std::size_t truncated_size() const noexcept { return block_size_ * blocks_; }
  std::size_t block_begin(std::size_t i) const noexcept { return i * block_size_; }
  std::size_t block_end(std::size_t i) const noexcept { return (i + 1) * block_size_; }

  friend bool operator==(const BlockPairing&, const BlockPairing&) = default;

 private:
  std::size_t block_size_;
  std::size_t blocks_;
};

inline BlockPairing pair_blocks(std::size_t unlabeled, std::size_t fold_size) {
  detail::require(fold_size >= 1, "pair_blocks: fold size must be positive");
  if (unlabeled < fold_size) {
    throw InvalidInput("pair_blocks: N = " + std::to_string(unlabeled) + " is smaller than the fold size " +
                       std::to_string(fold_size));
  }
  return BlockPairing(unlabeled / fold_size, fold_size);
}

}  // namespace riskcal
