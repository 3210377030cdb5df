#include "mmscore/data_synth.hpp"

#include "mmscore/binary_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace mmscore {

namespace {

constexpr std::array<std::uint8_t, 4> kDatasetMagic = {'S', 'B', 'M', 'D'};
constexpr std::uint16_t kDatasetVersion = 1;

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// 5x7 bitmap font, one string per row.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
}};

constexpr int kGlyphWidth = 5;
constexpr int kGlyphHeight = 7;

int glyph_scale(int side) { return std::max(1, (side - 4) / kGlyphHeight); }

// Stamps the glyph with its top-left corner at (row0, col0); pixels outside the canvas are dropped.
void stamp_glyph(Eigen::Ref<Matrix> canvas, int digit, int row0, int col0, int scale, double intensity) {
  const auto& rows = kGlyphs.at(static_cast<std::size_t>(digit));
  const int side = static_cast<int>(canvas.rows());
  for (int gr = 0; gr < kGlyphHeight; ++gr)
    for (int gc = 0; gc < kGlyphWidth; ++gc) {
      if (rows[static_cast<std::size_t>(gr)][gc] != '1') continue;
      for (int sr = 0; sr < scale; ++sr)
        for (int sc = 0; sc < scale; ++sc) {
          const int r = row0 + gr * scale + sr;
          const int c = col0 + gc * scale + sc;
          if (r >= 0 && r < side && c >= 0 && c < side) canvas(r, c) = std::max(canvas(r, c), intensity);
        }
    }
}

}  // namespace

std::vector<int> Dataset::dims() const {
  std::vector<int> out;
  out.reserve(modalities.size());
  for (const auto& m : modalities) out.push_back(static_cast<int>(m.cols()));
  return out;
}

MultimodalSample Dataset::sample(std::size_t i) const {
  if (i >= size()) throw ShapeError("sample index out of range");
  MultimodalSample s;
  s.label = labels[i];
  for (const auto& m : modalities) s.modalities.emplace_back(m.row(static_cast<Eigen::Index>(i)).transpose());
  return s;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw ShapeError("dataset slice out of range");
  Dataset out;
  out.num_classes = num_classes;
  const auto n = static_cast<Eigen::Index>(end - begin);
  for (const auto& m : modalities) out.modalities.emplace_back(m.middleRows(static_cast<Eigen::Index>(begin), n));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

Dataset Dataset::gather(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.num_classes = num_classes;
  for (const auto& m : modalities) {
    Matrix g(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    out.modalities.push_back(std::move(g));
  }
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(labels.at(r));
  return out;
}

void Dataset::validate() const {
  if (num_classes == 0) throw ConfigError("dataset must declare at least one class");
  for (const auto& m : modalities)
    if (static_cast<std::size_t>(m.rows()) != labels.size()) throw ShapeError("modality row count differs from label count");
  for (auto l : labels)
    if (l >= num_classes) throw ShapeError("label " + std::to_string(l) + " outside [0, C)");
}

bool operator==(const Dataset& a, const Dataset& b) {
  if (a.num_classes != b.num_classes || a.labels != b.labels || a.modalities.size() != b.modalities.size()) return false;
  for (std::size_t k = 0; k < a.modalities.size(); ++k) {
    if (a.modalities[k].rows() != b.modalities[k].rows() || a.modalities[k].cols() != b.modalities[k].cols()) return false;
    if (a.modalities[k] != b.modalities[k]) return false;
  }
  return true;
}

void GaussianJointSpec::validate() const {
  if (num_modalities < 1 || dim < 1) throw ConfigError("GaussianJointSpec needs M >= 1 and d >= 1");
  if (!(correlation > -1.0 && correlation < 1.0)) throw ConfigError("correlation must lie in (-1, 1)");
  if (!(observation_noise >= 0.0) || !std::isfinite(observation_noise))
    throw ConfigError("observation noise must be finite and >= 0");
  Eigen::LLT<Eigen::MatrixXd> llt(covariance());
  if (llt.info() != Eigen::Success) throw ConfigError("equicorrelated covariance is not positive definite for this (M, rho)");
}

Matrix GaussianJointSpec::covariance() const {
  const int D = num_modalities * dim;
  Matrix cov = Matrix::Zero(D, D);
  for (int a = 0; a < num_modalities; ++a)
    for (int b = 0; b < num_modalities; ++b)
      for (int i = 0; i < dim; ++i) cov(a * dim + i, b * dim + i) = (a == b) ? 1.0 : correlation;
  return cov;
}

Dataset gen_gaussian_joint(const GaussianJointSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  const int D = spec.num_modalities * spec.dim;
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(spec.covariance()).matrixL();

  Dataset ds;
  ds.num_classes = 1;
  ds.labels.assign(n, 0);
  for (int k = 0; k < spec.num_modalities; ++k) ds.modalities.emplace_back(static_cast<Eigen::Index>(n), spec.dim);

  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd eps(D);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < D; ++j) eps(j) = normal(rng);
    Eigen::VectorXd z = chol * eps;
    for (int k = 0; k < spec.num_modalities; ++k)
      for (int j = 0; j < spec.dim; ++j) {
        double x = z(k * spec.dim + j);
        if (spec.observation_noise > 0.0) x += spec.observation_noise * normal(rng);
        ds.modalities[static_cast<std::size_t>(k)](static_cast<Eigen::Index>(i), j) = to_f32(x);
      }
  }
  return ds;
}

void ToyDigitSpec::validate() const {
  if (side < 8) throw ConfigError("toy digit side " + std::to_string(side) + " is too small to render glyphs (need >= 8)");
  if (num_classes < 1 || num_classes > 10) throw ConfigError("toy digits support 1..10 classes");
  if (num_modalities < 2) throw ConfigError("toy digits need at least two modalities");
}

Matrix render_glyph(int digit, int side) {
  if (digit < 0 || digit > 9) throw DomainError("digit must be in 0..9");
  Matrix canvas = Matrix::Zero(side, side);
  const int scale = glyph_scale(side);
  stamp_glyph(canvas, digit, (side - kGlyphHeight * scale) / 2, (side - kGlyphWidth * scale) / 2, scale, 1.0);
  return canvas;
}

Matrix background_pattern(int modality, int side) {
  const double fx = 0.35 + 0.3 * (modality % 3);
  const double fy = 0.25 * ((modality / 3) % 4) + 0.1 * (modality % 2);
  const double phase = 0.7 * modality;
  const double level = 0.05 + 0.04 * (modality % 4);
  Matrix bg(side, side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) bg(r, c) = level + 0.16 * (1.0 + std::sin(fx * c + fy * r + phase));
  return bg;
}

namespace {

Dataset render_split(const ToyDigitSpec& spec, std::size_t n, std::uint64_t seed, std::uint64_t split_id,
                     const std::vector<Matrix>& backgrounds) {
  const int side = spec.side;
  const int pixels = side * side;
  const int scale = glyph_scale(side);
  const int base_row = (side - kGlyphHeight * scale) / 2;
  const int base_col = (side - kGlyphWidth * scale) / 2;
  const int max_row = side - kGlyphHeight * scale;
  const int max_col = side - kGlyphWidth * scale;

  Dataset ds;
  ds.num_classes = static_cast<std::uint32_t>(spec.num_classes);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<std::uint32_t>(i % static_cast<std::size_t>(spec.num_classes));
  Rng shuffle_rng = make_rng(seed, split_id * 1000003ULL);
  std::shuffle(ds.labels.begin(), ds.labels.end(), shuffle_rng);

  for (int k = 0; k < spec.num_modalities; ++k) ds.modalities.emplace_back(static_cast<Eigen::Index>(n), pixels);

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, split_id * 1000003ULL + 1 + i);
    std::uniform_real_distribution<double> ink(0.75, 1.0);
    std::normal_distribution<double> pixel_noise(0.0, 0.04);
    const int digit = static_cast<int>(ds.labels[i]);
    for (int k = 0; k < spec.num_modalities; ++k) {
      Matrix canvas = backgrounds[static_cast<std::size_t>(k)];
      // Each modality places the glyph at its own fixed offset.
      const int row0 = std::clamp(base_row + (k % 3) - 1, 0, max_row);
      const int col0 = std::clamp(base_col + ((k / 3) % 3) - 1 + (k % 2), 0, max_col);
      stamp_glyph(canvas, digit, row0, col0, scale, ink(rng));
      auto out = ds.modalities[static_cast<std::size_t>(k)].row(static_cast<Eigen::Index>(i));
      for (int p = 0; p < pixels; ++p)
        out(p) = to_f32(std::clamp(canvas(p / side, p % side) + pixel_noise(rng), 0.0, 1.0));
    }
  }
  return ds;
}

}  // namespace

ToyDigitSplits gen_toy_digits(const ToyDigitSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<Matrix> backgrounds;
  for (int k = 0; k < spec.num_modalities; ++k) backgrounds.push_back(background_pattern(k, spec.side));
  return {render_split(spec, spec.train, seed, 1, backgrounds), render_split(spec, spec.val, seed, 2, backgrounds),
          render_split(spec, spec.test, seed, 3, backgrounds)};
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ds.validate();
  io::ByteWriter w;
  w.put_bytes(kDatasetMagic);
  w.put<std::uint16_t>(kDatasetVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.num_modalities()));
  w.put<std::uint32_t>(ds.num_classes);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.size()));
  for (const auto& m : ds.modalities) w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (const auto& m : ds.modalities)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.put<float>(static_cast<float>(m(static_cast<Eigen::Index>(i), j)));
  for (auto l : ds.labels) w.put<std::uint32_t>(l);
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < kDatasetMagic.size() || !std::equal(kDatasetMagic.begin(), kDatasetMagic.end(), bytes.begin()))
    throw FormatError("not an SBMD dataset: bad magic");
  r.get_bytes(kDatasetMagic.size());
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetVersion) throw FormatError("unsupported SBMD version " + std::to_string(version));
  const auto M = r.get<std::uint16_t>();
  Dataset ds;
  ds.num_classes = r.get<std::uint32_t>();
  const auto n = r.get<std::uint32_t>();
  std::vector<std::uint32_t> dims(M);
  for (auto& d : dims) d = r.get<std::uint32_t>();

  std::uint64_t per_sample = 0;
  for (auto d : dims) per_sample += d;
  const std::uint64_t expected = (per_sample + 1) * 4ULL * n;
  if (r.remaining() != expected)
    throw LengthError("SBMD payload length " + std::to_string(r.remaining()) + " does not match header (expected " +
                      std::to_string(expected) + ")");

  for (auto d : dims) ds.modalities.emplace_back(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < M; ++k)
      for (std::uint32_t j = 0; j < dims[k]; ++j) ds.modalities[k](i, j) = static_cast<double>(r.get<float>());
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = r.get<std::uint32_t>();
  ds.validate();
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) { io::write_file(path, encode_dataset(ds)); }

Dataset read_dataset(const std::string& path) {
  const auto bytes = io::read_file(path);
  return decode_dataset(bytes);
}

}  // namespace mmscore
