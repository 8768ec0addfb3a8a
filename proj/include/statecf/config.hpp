#pragma once

// Flat key=value run configuration shared by every command.
//
//   # comment
//   batch_size = 16
//   denominator_mode = negatives_only
//
// Unknown keys, duplicates, malformed values and out-of-range values raise
// ConfigError carrying the line number and field name.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "statecf/encoders.hpp"
#include "statecf/errors.hpp"
#include "statecf/objectives.hpp"
#include "statecf/world.hpp"

namespace statecf {

struct TrainConfig {
  std::size_t batch_size = 16;
  // Videos per parent step; 0 means batch_size.
  std::size_t parent_batch_size = 0;
  double lr = 1e-3;
  std::size_t schedule_ratio = 5;
  std::size_t child_steps_total = 2000;
  double grad_clip = 10.0;
  bool ablate_cf = false;

  std::size_t videos_per_parent_step() const { return parent_batch_size ? parent_batch_size : batch_size; }
  bool operator==(const TrainConfig&) const = default;
};

struct EvalConfig {
  double error_fraction = 0.2;
  std::size_t probe_steps = 500;
  double probe_lr = 0.1;
  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 7;
  world::DataConfig data;
  enc::EncoderDims model;
  obj::LossParams loss;
  TrainConfig train;
  EvalConfig eval;

  // Applies the root seed and shared dimensions to the nested sections.
  void sync();
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

// One entry per accepted key, in file order of to_text.
struct ConfigKey {
  std::string_view name;
  std::string_view description;
};
std::span<const ConfigKey> config_keys();

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);
// Every key with its current value; parse_config(to_text(c)) == c.
std::string to_text(const RunConfig& config);

}  // namespace statecf
