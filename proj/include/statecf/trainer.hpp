#pragma once

// Hierarchical training: child steps (clip-narration and frame-state
// alignment) interleaved with one parent step (video-summary alignment) after
// every schedule_ratio child steps. One Adam optimizer serves both levels.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "statecf/config.hpp"
#include "statecf/encoders.hpp"
#include "statecf/world.hpp"

namespace statecf::train {

class Model {
 public:
  Model() = default;
  Model(const enc::EncoderDims& dims, std::uint64_t seed);

  enc::FrameEncoder& frame() { return frame_; }
  const enc::FrameEncoder& frame() const { return frame_; }
  enc::Aggregator& aggregator() { return aggregator_; }
  const enc::Aggregator& aggregator() const { return aggregator_; }

  // Frame encoder tensors first, then the aggregator.
  std::vector<ad::Tensor*> parameters();
  std::vector<const ad::Tensor*> parameters() const;
  static std::vector<std::string> parameter_names();

  bool operator==(const Model& other) const;

 private:
  enc::FrameEncoder frame_;
  enc::Aggregator aggregator_;
};

// Every embedding of one video, computed without gradients.
struct VideoEmbeddings {
  std::vector<Embedding> frames;
  std::vector<Embedding> clips;
  Embedding video;
};
VideoEmbeddings embed_video(const Model& model, const world::VideoSample& video);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::vector<std::uint64_t> updates;  // per parameter, for bias correction
  std::uint64_t step = 0;              // optimizer updates of any kind

  bool operator==(const AdamState&) const = default;
};

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  Adam() = default;
  Adam(std::span<ad::Tensor* const> params, double lr);

  // Applies one update to every parameter that holds a gradient; parameters
  // without one (not on the tape this step) keep their value and moments.
  void step(std::span<ad::Tensor* const> params);
  const AdamState& state() const { return state_; }
  void set_state(AdamState s) { state_ = std::move(s); }

 private:
  double lr_ = 1e-3;
  AdamState state_;
};

// Scales every gradient so the global norm is at most max_norm. Returns the
// norm before scaling.
double clip_gradients(std::span<ad::Tensor* const> params, double max_norm);

// A batch of clips for one child step.
struct ChildBatch {
  struct Item {
    std::size_t video = 0;
    std::size_t clip = 0;
  };
  std::vector<Item> items;
};

// Videos for one parent step; repeats allowed.
struct ParentBatch {
  std::vector<std::size_t> videos;
};

struct StepRecord {
  std::uint64_t position = 0;  // 1-based index in the interleaved sequence
  std::uint64_t child_step = 0;
  std::uint64_t parent_step = 0;
  bool parent = false;
  double loss = 0.0;
  std::map<std::string, double> components;
  double grad_norm = 0.0;
  bool clipped = false;
  double wallclock = 0.0;
};

// One JSON object per line.
std::string to_json(const StepRecord& r);

class Trainer {
 public:
  Trainer(const world::World& world, const world::Dataset& train, const RunConfig& config);

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const RunConfig& config() const { return config_; }
  const AdamState& optimizer_state() const { return adam_.state(); }
  std::uint64_t child_steps() const { return child_steps_; }
  std::uint64_t parent_steps() const { return parent_steps_; }

  // Deterministic functions of the step counters.
  ChildBatch child_batch(std::uint64_t child_step) const;
  ParentBatch parent_batch(std::uint64_t parent_step) const;

  // Loss and gradients only; parameters untouched. component receives the
  // individual terms when non-null.
  double child_loss(const ChildBatch& batch, std::map<std::string, double>* components = nullptr);
  double parent_loss(const ParentBatch& batch, std::map<std::string, double>* components = nullptr);

  // One optimizer update each. Throw DivergenceError on a non-finite term.
  StepRecord child_step(const ChildBatch& batch);
  StepRecord parent_step(const ParentBatch& batch);

  // Continues until child_steps_total child steps are done, honoring the
  // schedule. sink sees every step; stop_after_child_steps pauses early.
  using Sink = std::function<void(const StepRecord&)>;
  void run(const Sink& sink = {}, std::uint64_t stop_after_child_steps = UINT64_MAX);

  void save(const std::string& path) const;
  void save(std::ostream& out) const;
  // Restores model, optimizer and counters; the config must match this
  // trainer's apart from child_steps_total.
  void load(const std::string& path);
  void load(std::istream& in);

 private:
  const world::World& world_;
  const world::Dataset& train_;
  RunConfig config_;
  Model model_;
  Adam adam_;
  std::uint64_t child_steps_ = 0;
  std::uint64_t parent_steps_ = 0;
  std::vector<ChildBatch::Item> clip_pool_;
  double elapsed_ = 0.0;

  StepRecord finish_step(double loss, std::map<std::string, double> components, bool parent);
};

// Checkpoint files: "SCFCKPT1" magic, u32 version, u64 checksum of the
// payload, u64 payload length, then length-prefixed blocks.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  Model model;
  AdamState optimizer;
  std::uint64_t child_steps = 0;
  std::uint64_t parent_steps = 0;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace statecf::train
