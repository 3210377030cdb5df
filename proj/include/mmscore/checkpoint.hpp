#pragma once

#include "mmscore/nn.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mmscore {

// SBMC checkpoint container: magic "SBMC", u16 version, then a sequence of sections
// (u16 name length, name bytes, u64 payload length, payload) until end of file.
// Numeric payloads are little-endian f32 unless a section documents otherwise.

struct CheckpointSection {
  std::string name;
  std::vector<std::uint8_t> payload;
};

class Checkpoint {
 public:
  void put_raw(const std::string& name, std::vector<std::uint8_t> payload);
  void put_f32(const std::string& name, std::span<const double> values);
  void put_string(const std::string& name, const std::string& value);
  void put_net(const std::string& name, const DenseNet& net);
  void put_adam(const std::string& name, const AdamState& state);

  bool has(const std::string& name) const;
  const std::vector<std::uint8_t>& raw(const std::string& name) const;
  std::vector<double> get_f32(const std::string& name) const;
  std::string get_string(const std::string& name) const;
  DenseNet get_net(const std::string& name) const;
  AdamState get_adam(const std::string& name, AdamConfig config) const;

  const std::vector<CheckpointSection>& sections() const { return sections_; }

  std::vector<std::uint8_t> encode() const;
  static Checkpoint decode(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::vector<CheckpointSection> sections_;
};

/// Rounds every parameter to f32, matching what a checkpoint round trip produces.
void round_to_f32(DenseNet& net);

}  // namespace mmscore
