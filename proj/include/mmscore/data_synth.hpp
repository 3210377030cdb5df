#pragma once

#include "mmscore/common.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mmscore {

/// One training example: M observation vectors sharing a concept label.
struct MultimodalSample {
  std::vector<Vector> modalities;
  std::uint32_t label = 0;
};

/// Columnar multimodal dataset. Modality k is an n x dims[k] matrix; every stored
/// value is exactly representable as a 32-bit float so the SBMD round trip is lossless.
struct Dataset {
  std::uint32_t num_classes = 1;
  std::vector<Matrix> modalities;
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t num_modalities() const { return modalities.size(); }
  int dim(std::size_t k) const { return static_cast<int>(modalities.at(k).cols()); }
  std::vector<int> dims() const;

  MultimodalSample sample(std::size_t i) const;
  /// Rows [begin, end) of every modality.
  Dataset slice(std::size_t begin, std::size_t end) const;
  /// Rows listed in `rows`, in that order.
  Dataset gather(const std::vector<std::size_t>& rows) const;
  void validate() const;
};

bool operator==(const Dataset& a, const Dataset& b);

/// Equicorrelated joint Gaussian over M blocks of dimension d.
struct GaussianJointSpec {
  int num_modalities = 2;
  int dim = 1;
  double correlation = 0.8;
  double observation_noise = 0.0;

  void validate() const;
  /// (M*d) x (M*d) covariance: identity blocks on the diagonal, rho*I off-diagonal.
  Matrix covariance() const;
};

/// Observations x_k = z_k + sigma_obs * noise with z ~ N(0, covariance()). Labels are 0.
Dataset gen_gaussian_joint(const GaussianJointSpec& spec, std::size_t n, std::uint64_t seed);

struct ToyDigitSpec {
  int num_modalities = 5;
  int side = 12;
  int num_classes = 10;
  std::size_t train = 5000;
  std::size_t val = 500;
  std::size_t test = 1000;

  void validate() const;
};

struct ToyDigitSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Procedural digit glyphs over per-modality backgrounds, each modality with its own glyph offset;
/// class-balanced labels.
ToyDigitSplits gen_toy_digits(const ToyDigitSpec& spec, std::uint64_t seed);

/// Renders the clean glyph of `digit` (no background, no jitter) on a side x side canvas, values in {0,1}.
Matrix render_glyph(int digit, int side);

/// Deterministic background pattern for modality k, values in [0, 0.45].
Matrix background_pattern(int modality, int side);

// SBMD container. All integers little-endian, payload f32.
std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace mmscore
