#pragma once

// Procedural activity world: actions move a scene between states, videos are
// rendered from state prototypes plus noise, and every activity comes with
// missing-step and misordered counterfactual summaries.
//
// Tokens share one vocabulary: actions occupy [0, num_actions), state s is
// token num_actions + s.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "statecf/encoders.hpp"
#include "statecf/errors.hpp"
#include "statecf/types.hpp"

namespace statecf::world {

struct WorldConfig {
  std::size_t num_actions = 20;
  std::size_t num_states = 40;
  std::size_t sc_cf_per_action = 2;
  std::size_t input_dim = 48;
  std::size_t text_dim = 32;
  // Order weight for summary composition, see TextTable::embed_sequence.
  double order_weight = 1.0;
  std::uint64_t seed = 7;

  bool operator==(const WorldConfig&) const = default;
};

struct StepSpec {
  Token action = 0;
  Token before_state = 0;
  Token after_state = 0;
  TokenSeq sc_cf_states;

  bool operator==(const StepSpec&) const = default;
};

struct ActivitySpec {
  std::uint64_t id = 0;
  std::vector<StepSpec> steps;
  TokenSeq summary_tokens;

  bool operator==(const ActivitySpec&) const = default;
};

// Each action always fires from one scene state and lands in one other scene
// state. Its wrong outcomes come from a pool of states that no action reaches.
struct ActionSpec {
  Token source = 0;
  Token target = 0;
  TokenSeq sc_cf_states;
};

class World {
 public:
  // Two actions leave every scene state, so there are num_actions / 2 scene
  // states; the remaining states form the wrong-outcome pool.
  explicit World(const WorldConfig& config);

  const WorldConfig& config() const { return config_; }
  std::size_t vocab_size() const { return config_.num_actions + config_.num_states; }
  std::size_t num_scene_states() const { return config_.num_actions / 2; }
  Token state_token(std::size_t state) const { return static_cast<Token>(config_.num_actions + state); }
  bool is_state(Token t) const { return t >= config_.num_actions && t < vocab_size(); }
  const ActionSpec& action(Token a) const;
  std::span<const ActionSpec> actions() const { return actions_; }
  StepSpec step_for(Token action) const;

  // Unit vector in input space for a state token.
  std::span<const double> prototype(Token state) const;
  const enc::TextTable& text() const { return text_; }

  // Texts the encoders are trained against.
  Embedding narration_text(Token action) const;
  Embedding state_text(Token action, Token state) const;
  Embedding summary_text(std::span<const Token> tokens) const;

 private:
  WorldConfig config_;
  std::vector<ActionSpec> actions_;
  std::vector<std::vector<double>> prototypes_;
  enc::TextTable text_;
};

// Random walk of n_steps actions through the scene graph.
ActivitySpec gen_activity(const World& world, std::uint64_t seed, std::size_t n_steps,
                          std::uint64_t id = 0);

struct VideoSample {
  std::size_t frames_per_clip = 0;
  std::size_t input_dim = 0;
  double noise_sigma = 0.0;
  // One row-major [frames_per_clip, input_dim] block per clip.
  std::vector<std::vector<double>> clips;
  std::vector<TokenSeq> narrations;
  // Per frame: the action of its step, and whether it shows a wrong outcome.
  std::vector<Token> labels;
  std::vector<std::uint8_t> error_flags;
  std::uint64_t seed = 0;

  std::size_t num_clips() const { return clips.size(); }
  std::size_t num_frames() const { return labels.size(); }
  std::span<const double> frame(std::size_t clip, std::size_t f) const;
  bool operator==(const VideoSample&) const = default;
};

VideoSample render_video(const World& world, const ActivitySpec& activity, std::uint64_t seed,
                         double noise_sigma, std::size_t frames_per_clip);

Token make_sc_cf(const StepSpec& step, std::uint64_t rng_seed);

enum class CfKind { kStateChange, kMissingStep, kMisordered };
std::string_view to_string(CfKind kind);
CfKind cf_kind_from_string(std::string_view name);

struct CounterfactualRecord {
  CfKind kind = CfKind::kMissingStep;
  TokenSeq tokens;
  std::uint64_t source_activity = 0;

  bool operator==(const CounterfactualRecord&) const = default;
};

CounterfactualRecord make_missing_cf(const ActivitySpec& activity, std::size_t drop_index);
CounterfactualRecord make_misordered_cf(const ActivitySpec& activity, std::size_t i, std::size_t j);

// count summaries alternating missing-step (random drop) and misordered
// (random adjacent swap), starting with missing-step.
std::vector<CounterfactualRecord> make_summary_cfs(const ActivitySpec& activity, std::size_t count,
                                                   std::uint64_t seed);

// Re-renders the late half of each chosen clip from a wrong outcome.
VideoSample inject_errors(const World& world, const VideoSample& sample, const ActivitySpec& activity,
                          std::span<const std::size_t> error_clips, std::uint64_t seed);

// Chooses round(fraction * clips) distinct clips.
std::vector<std::size_t> choose_error_clips(std::size_t num_clips, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Datasets

struct DataConfig {
  WorldConfig world;
  std::size_t num_train = 300;
  std::size_t num_val = 60;
  std::size_t num_test = 60;
  std::size_t min_steps = 5;
  std::size_t max_steps = 8;
  std::size_t frames_per_clip = 4;
  double noise_sigma = 0.25;
  std::size_t num_counterfactuals = 2;

  // Sub-seeds derive from world.seed.
  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

struct VideoRecord {
  ActivitySpec activity;
  VideoSample video;
  std::vector<CounterfactualRecord> cfs;

  bool operator==(const VideoRecord&) const = default;
};

using Dataset = std::vector<VideoRecord>;

inline constexpr std::string_view kSplits[] = {"train", "val", "test"};

// Video i of a split depends only on (config, split, i), never on threads.
Dataset generate_split(const World& world, const DataConfig& config, std::string_view split,
                       unsigned threads = 1);

// One JSON object per line: {activity, clips, narrations, cfs, labels, errors, seed}.
// Reals are written with 17 significant digits.
void write_record(std::ostream& out, const VideoRecord& record);
VideoRecord parse_record(std::string_view line);
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

std::string world_to_json(const WorldConfig& config);
WorldConfig world_from_json(std::string_view text);

}  // namespace statecf::world
