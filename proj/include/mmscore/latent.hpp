#pragma once

#include "mmscore/common.hpp"

#include <vector>

namespace mmscore {

/// Per-modality (offset, length) slices tiling [0, total) of a stacked latent vector.
class LatentLayout {
 public:
  LatentLayout() = default;
  explicit LatentLayout(const std::vector<int>& dims);

  std::size_t num_modalities() const { return lengths_.size(); }
  int total() const { return total_; }
  int offset(std::size_t k) const { return offsets_.at(k); }
  int length(std::size_t k) const { return lengths_.at(k); }
  const std::vector<int>& lengths() const { return lengths_; }

  bool operator==(const LatentLayout&) const = default;

 private:
  std::vector<int> offsets_;
  std::vector<int> lengths_;
  int total_ = 0;
};

/// One stacked latent z = (z_1..z_M) at diffusion time t (0 = data, 1 = noise).
struct LatentBlock {
  Vector values;
  LatentLayout layout;
  double time = 0.0;

  auto slice(std::size_t k) { return values.segment(layout.offset(k), layout.length(k)); }
  auto slice(std::size_t k) const { return values.segment(layout.offset(k), layout.length(k)); }
};

/// Observed/unobserved partition of the modalities; true marks an observed modality.
class ModalityMask {
 public:
  ModalityMask() = default;
  explicit ModalityMask(std::vector<bool> observed) : observed_(std::move(observed)) {}
  static ModalityMask none(std::size_t m) { return ModalityMask(std::vector<bool>(m, false)); }
  static ModalityMask all(std::size_t m) { return ModalityMask(std::vector<bool>(m, true)); }
  /// First `count` modalities observed.
  static ModalityMask first(std::size_t m, std::size_t count);

  std::size_t size() const { return observed_.size(); }
  bool observed(std::size_t k) const { return observed_.at(k); }
  const std::vector<bool>& flags() const { return observed_; }
  std::vector<std::size_t> observed_indices() const;
  std::vector<std::size_t> unobserved_indices() const;
  bool any_observed() const;
  bool all_observed() const;

  /// Length-D 0/1 vector marking coordinates that belong to observed modalities.
  RowVector coordinate_mask(const LatentLayout& layout) const;

  bool operator==(const ModalityMask&) const = default;

 private:
  std::vector<bool> observed_;
};

/// Concatenates per-modality latent batches (each n x d_k) into n x D.
Matrix stack_latents(const std::vector<Matrix>& per_modality);
/// Inverse of stack_latents.
std::vector<Matrix> split_latents(const Matrix& stacked, const LatentLayout& layout);

}  // namespace mmscore
