#include "mmscore/latent.hpp"

#include <algorithm>

namespace mmscore {

LatentLayout::LatentLayout(const std::vector<int>& dims) : lengths_(dims) {
  for (int d : dims) {
    if (d < 1) throw ConfigError("latent slice length must be positive");
    offsets_.push_back(total_);
    total_ += d;
  }
}

ModalityMask ModalityMask::first(std::size_t m, std::size_t count) {
  std::vector<bool> obs(m, false);
  for (std::size_t k = 0; k < std::min(m, count); ++k) obs[k] = true;
  return ModalityMask(std::move(obs));
}

std::vector<std::size_t> ModalityMask::observed_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < observed_.size(); ++k)
    if (observed_[k]) out.push_back(k);
  return out;
}

std::vector<std::size_t> ModalityMask::unobserved_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < observed_.size(); ++k)
    if (!observed_[k]) out.push_back(k);
  return out;
}

bool ModalityMask::any_observed() const { return std::find(observed_.begin(), observed_.end(), true) != observed_.end(); }

bool ModalityMask::all_observed() const {
  return !observed_.empty() && std::find(observed_.begin(), observed_.end(), false) == observed_.end();
}

RowVector ModalityMask::coordinate_mask(const LatentLayout& layout) const {
  if (layout.num_modalities() != observed_.size()) throw ConfigError("mask size does not match latent layout");
  RowVector m = RowVector::Zero(layout.total());
  for (std::size_t k = 0; k < observed_.size(); ++k)
    if (observed_[k]) m.segment(layout.offset(k), layout.length(k)).setOnes();
  return m;
}

Matrix stack_latents(const std::vector<Matrix>& per_modality) {
  if (per_modality.empty()) return Matrix();
  const auto n = per_modality.front().rows();
  Eigen::Index total = 0;
  for (const auto& m : per_modality) {
    if (m.rows() != n) throw ShapeError("latent batches have different row counts");
    total += m.cols();
  }
  Matrix out(n, total);
  Eigen::Index off = 0;
  for (const auto& m : per_modality) {
    out.middleCols(off, m.cols()) = m;
    off += m.cols();
  }
  return out;
}

std::vector<Matrix> split_latents(const Matrix& stacked, const LatentLayout& layout) {
  if (stacked.cols() != layout.total()) throw ShapeError("stacked latent width does not match layout");
  std::vector<Matrix> out;
  for (std::size_t k = 0; k < layout.num_modalities(); ++k) out.emplace_back(stacked.middleCols(layout.offset(k), layout.length(k)));
  return out;
}

}  // namespace mmscore
