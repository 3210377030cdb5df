#include "mmscore/checkpoint.hpp"

#include "mmscore/binary_io.hpp"

#include <algorithm>
#include <array>

namespace mmscore {

namespace {
constexpr std::array<std::uint8_t, 4> kMagic = {'S', 'B', 'M', 'C'};
constexpr std::uint16_t kVersion = 1;

std::vector<std::uint8_t> f32_payload(std::span<const double> values) {
  io::ByteWriter w;
  for (double v : values) w.put<float>(static_cast<float>(v));
  return w.take();
}
}  // namespace

void Checkpoint::put_raw(const std::string& name, std::vector<std::uint8_t> payload) {
  if (name.size() > 0xffff) throw ConfigError("checkpoint section name too long");
  for (auto& s : sections_)
    if (s.name == name) {
      s.payload = std::move(payload);
      return;
    }
  sections_.push_back({name, std::move(payload)});
}

void Checkpoint::put_f32(const std::string& name, std::span<const double> values) { put_raw(name, f32_payload(values)); }

void Checkpoint::put_string(const std::string& name, const std::string& value) {
  put_raw(name, std::vector<std::uint8_t>(value.begin(), value.end()));
}

void Checkpoint::put_net(const std::string& name, const DenseNet& net) {
  std::vector<double> widths(net.widths().begin(), net.widths().end());
  put_f32(name + ".widths", widths);
  std::vector<std::uint8_t> acts;
  for (auto a : net.activations()) acts.push_back(static_cast<std::uint8_t>(a));
  put_raw(name + ".activations", std::move(acts));
  put_f32(name + ".params", net.parameters());
}

void Checkpoint::put_adam(const std::string& name, const AdamState& state) {
  put_f32(name + ".adam.m", state.first_moment);
  put_f32(name + ".adam.v", state.second_moment);
  io::ByteWriter w;
  w.put<std::uint64_t>(state.step);
  put_raw(name + ".adam.step", w.take());
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(sections_.begin(), sections_.end(), [&](const auto& s) { return s.name == name; });
}

const std::vector<std::uint8_t>& Checkpoint::raw(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return s.payload;
  throw FormatError("checkpoint has no section '" + name + "'");
}

std::vector<double> Checkpoint::get_f32(const std::string& name) const {
  const auto& p = raw(name);
  if (p.size() % 4 != 0) throw LengthError("section '" + name + "' is not a whole number of f32 values");
  io::ByteReader r(p);
  std::vector<double> out(p.size() / 4);
  for (auto& v : out) v = static_cast<double>(r.get<float>());
  return out;
}

std::string Checkpoint::get_string(const std::string& name) const {
  const auto& p = raw(name);
  return std::string(p.begin(), p.end());
}

DenseNet Checkpoint::get_net(const std::string& name) const {
  const auto widths_f = get_f32(name + ".widths");
  std::vector<int> widths;
  for (double w : widths_f) widths.push_back(static_cast<int>(w));
  std::vector<Activation> acts;
  for (auto code : raw(name + ".activations")) {
    if (code > static_cast<std::uint8_t>(Activation::tanh)) throw FormatError("unknown activation code in '" + name + "'");
    acts.push_back(static_cast<Activation>(code));
  }
  DenseNet net(widths, acts, 0);
  const auto params = get_f32(name + ".params");
  if (params.size() != net.parameter_count())
    throw LengthError("section '" + name + ".params' has " + std::to_string(params.size()) + " values, expected " +
                      std::to_string(net.parameter_count()));
  net.set_parameters(params);
  return net;
}

AdamState Checkpoint::get_adam(const std::string& name, AdamConfig config) const {
  AdamState s;
  s.config = config;
  s.first_moment = get_f32(name + ".adam.m");
  s.second_moment = get_f32(name + ".adam.v");
  io::ByteReader r(raw(name + ".adam.step"));
  s.step = r.get<std::uint64_t>();
  return s;
}

std::vector<std::uint8_t> Checkpoint::encode() const {
  io::ByteWriter w;
  w.put_bytes(kMagic);
  w.put<std::uint16_t>(kVersion);
  for (const auto& s : sections_) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(s.name.size()));
    w.put_string(s.name);
    w.put<std::uint64_t>(s.payload.size());
    w.put_bytes(s.payload);
  }
  return w.take();
}

Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw FormatError("not an SBMC checkpoint: bad magic");
  io::ByteReader r(bytes);
  r.get_bytes(kMagic.size());
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw FormatError("unsupported SBMC version " + std::to_string(version));
  Checkpoint ck;
  while (!r.at_end()) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name = r.get_string(name_len);
    const auto len = r.get<std::uint64_t>();
    if (len > r.remaining()) throw LengthError("section '" + name + "' payload runs past end of file");
    auto payload = r.get_bytes(static_cast<std::size_t>(len));
    ck.sections_.push_back({std::move(name), std::vector<std::uint8_t>(payload.begin(), payload.end())});
  }
  return ck;
}

void Checkpoint::save(const std::string& path) const { io::write_file(path, encode()); }

Checkpoint Checkpoint::load(const std::string& path) { return decode(io::read_file(path)); }

void round_to_f32(DenseNet& net) {
  for (double& p : net.parameters()) p = static_cast<double>(static_cast<float>(p));
}

}  // namespace mmscore
