#pragma once

// Finite-difference audit of every training objective on small random
// instances: the frame-state terms, clip-narration alignment, the combined
// child loss, the video-summary loss and the aggregator alone.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "statecf/autodiff.hpp"
#include "statecf/objectives.hpp"

namespace statecf::gc {

struct Options {
  std::size_t seeds = 20;
  std::uint64_t root_seed = 7;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t probes_per_tensor = 6;
  // Deliberately wrong backward rule for one op (checker self-test).
  std::optional<ad::Op> corrupt_gradient;
};

struct ComponentResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::uint64_t worst_seed = 0;
  bool passed = true;
};

struct Report {
  std::vector<ComponentResult> components;
  // Ops whose isolated gradient check fails; filled only when a component fails.
  std::vector<std::string> suspect_ops;
  double seconds = 0.0;

  bool passed() const;
};

std::vector<std::string> component_names();

Report run(const obj::LossParams& loss, const Options& options);

// Human-readable summary, one line per component.
std::string to_text(const Report& report);

}  // namespace statecf::gc
