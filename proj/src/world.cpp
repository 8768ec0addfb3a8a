#include "statecf/world.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"
#include "statecf/rng.hpp"

namespace statecf::world {

using nlohmann::json;

namespace {

constexpr double kMaxPrototypeCosine = 0.2;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  for (double& x : v) x /= n;
}

std::vector<double> random_direction(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  return v;
}

// Gram-Schmidt on seeded Gaussian draws: an orthonormal set, so the cosine
// bound holds with room to spare.
std::vector<std::vector<double>> build_prototypes(std::size_t count, std::size_t dim, std::uint64_t seed) {
  if (count > dim) {
    throw VocabError(fmt::format("{} state prototypes do not fit orthogonally in {} dimensions", count, dim));
  }
  Rng rng(seed);
  std::vector<std::vector<double>> out;
  while (out.size() < count) {
    std::vector<double> v = random_direction(rng, dim);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : out) {
        const double c = dot(v, u);
        for (std::size_t i = 0; i < dim; ++i) v[i] -= c * u[i];
      }
    }
    normalize(v);
    out.push_back(std::move(v));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = i + 1; j < out.size(); ++j) {
      if (std::abs(dot(out[i], out[j])) >= kMaxPrototypeCosine) {
        throw VocabError(fmt::format("prototypes {} and {} are not near-orthogonal", i, j));
      }
    }
  }
  return out;
}

}  // namespace

World::World(const WorldConfig& config) : config_(config) {
  const std::size_t n = num_scene_states();
  if (config.num_actions % 2 != 0 || n < 3) {
    throw VocabError(fmt::format("num_actions must be even and at least 6, got {}", config.num_actions));
  }
  if (config.sc_cf_per_action == 0) throw VocabError("sc_cf_per_action must be at least 1");
  if (config.num_states < n + config.sc_cf_per_action) {
    throw VocabError(fmt::format("{} states leave too few wrong outcomes for {} scene states and {} per action",
                                 config.num_states, n, config.sc_cf_per_action));
  }
  if (config.input_dim == 0 || config.text_dim == 0) throw VocabError("dimensions must be positive");

  Rng rng(derive_seed(config.seed, "transitions"));
  std::vector<std::size_t> pool(config.num_states - n);
  std::iota(pool.begin(), pool.end(), n);
  for (std::size_t a = 0; a < config.num_actions; ++a) {
    const std::size_t src = a / 2;
    std::size_t dst = (src + 1) % n;
    if (a % 2 == 1) {
      do {
        dst = rng.below(n);
      } while (dst == src || dst == (src + 1) % n);
    }
    ActionSpec spec;
    spec.source = state_token(src);
    spec.target = state_token(dst);
    for (std::size_t c = 0; c < config.sc_cf_per_action; ++c) {
      std::swap(pool[c], pool[c + rng.below(pool.size() - c)]);
      spec.sc_cf_states.push_back(state_token(pool[c]));
    }
    actions_.push_back(std::move(spec));
  }
  prototypes_ = build_prototypes(config.num_states, config.input_dim, derive_seed(config.seed, "prototypes"));
  text_ = enc::TextTable(vocab_size(), config.text_dim, derive_seed(config.seed, "text"));
}

const ActionSpec& World::action(Token a) const {
  if (a >= actions_.size()) throw std::out_of_range(fmt::format("unknown action token {}", a));
  return actions_[a];
}

StepSpec World::step_for(Token a) const {
  const ActionSpec& spec = action(a);
  return StepSpec{a, spec.source, spec.target, spec.sc_cf_states};
}

std::span<const double> World::prototype(Token state) const {
  if (!is_state(state)) throw std::out_of_range(fmt::format("token {} is not a state", state));
  return prototypes_[state - config_.num_actions];
}

Embedding World::narration_text(Token a) const {
  const Token t[] = {a};
  return text_.embed(t);
}

Embedding World::state_text(Token a, Token state) const {
  const Token t[] = {a, state};
  return text_.embed(t);
}

Embedding World::summary_text(std::span<const Token> tokens) const {
  return text_.embed_sequence(tokens, config_.order_weight);
}

ActivitySpec gen_activity(const World& world, std::uint64_t seed, std::size_t n_steps, std::uint64_t id) {
  if (n_steps < 3 || n_steps > 10) {
    throw std::invalid_argument(fmt::format("activities have 3 to 10 steps, got {}", n_steps));
  }
  Rng rng(seed);
  ActivitySpec act;
  act.id = id;
  std::size_t state = rng.below(world.num_scene_states());
  for (std::size_t i = 0; i < n_steps; ++i) {
    const auto a = static_cast<Token>(2 * state + rng.below(2));
    act.steps.push_back(world.step_for(a));
    act.summary_tokens.push_back(a);
    state = world.action(a).target - world.config().num_actions;
  }
  return act;
}

std::span<const double> VideoSample::frame(std::size_t clip, std::size_t f) const {
  return std::span<const double>(clips.at(clip)).subspan(f * input_dim, input_dim);
}

namespace {

void render_frames(const World& world, Token state, double sigma, Rng& rng, std::span<double> out) {
  auto proto = world.prototype(state);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = proto[j] + sigma * rng.normal();
}

}  // namespace

VideoSample render_video(const World& world, const ActivitySpec& activity, std::uint64_t seed,
                         double noise_sigma, std::size_t frames_per_clip) {
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be non-negative");
  if (frames_per_clip < 2 || frames_per_clip % 2 != 0) {
    throw std::invalid_argument(fmt::format("frames per clip must be even, got {}", frames_per_clip));
  }
  const std::size_t dim = world.config().input_dim;
  const std::size_t half = frames_per_clip / 2;
  VideoSample v;
  v.frames_per_clip = frames_per_clip;
  v.input_dim = dim;
  v.noise_sigma = noise_sigma;
  v.seed = seed;
  Rng rng(seed);
  for (const StepSpec& step : activity.steps) {
    std::vector<double> clip(frames_per_clip * dim);
    for (std::size_t f = 0; f < frames_per_clip; ++f) {
      const Token state = f < half ? step.before_state : step.after_state;
      render_frames(world, state, noise_sigma, rng, std::span<double>(clip).subspan(f * dim, dim));
      v.labels.push_back(step.action);
      v.error_flags.push_back(0);
    }
    v.clips.push_back(std::move(clip));
    v.narrations.push_back({step.action});
  }
  return v;
}

Token make_sc_cf(const StepSpec& step, std::uint64_t rng_seed) {
  if (step.sc_cf_states.empty()) throw std::invalid_argument("step has no state-change counterfactuals");
  Rng rng(rng_seed);
  return step.sc_cf_states[rng.below(step.sc_cf_states.size())];
}

std::string_view to_string(CfKind kind) {
  switch (kind) {
    case CfKind::kStateChange: return "SC_CF";
    case CfKind::kMissingStep: return "K_CF";
    case CfKind::kMisordered: return "M_CF";
  }
  return "?";
}

CfKind cf_kind_from_string(std::string_view name) {
  if (name == "SC_CF") return CfKind::kStateChange;
  if (name == "K_CF") return CfKind::kMissingStep;
  if (name == "M_CF") return CfKind::kMisordered;
  throw FormatError(fmt::format("unknown counterfactual kind '{}'", name));
}

CounterfactualRecord make_missing_cf(const ActivitySpec& activity, std::size_t drop_index) {
  const auto& s = activity.summary_tokens;
  if (drop_index >= s.size()) {
    throw std::out_of_range(fmt::format("drop index {} outside summary of length {}", drop_index, s.size()));
  }
  CounterfactualRecord r{CfKind::kMissingStep, s, activity.id};
  r.tokens.erase(r.tokens.begin() + static_cast<std::ptrdiff_t>(drop_index));
  return r;
}

CounterfactualRecord make_misordered_cf(const ActivitySpec& activity, std::size_t i, std::size_t j) {
  const auto& s = activity.summary_tokens;
  if (i >= s.size() || j >= s.size()) {
    throw std::out_of_range(fmt::format("swap ({}, {}) outside summary of length {}", i, j, s.size()));
  }
  if (i == j) throw std::invalid_argument("misordering needs two distinct positions");
  if (s[i] == s[j]) throw std::invalid_argument("swapping equal tokens leaves the summary unchanged");
  CounterfactualRecord r{CfKind::kMisordered, s, activity.id};
  std::swap(r.tokens[i], r.tokens[j]);
  return r;
}

std::vector<CounterfactualRecord> make_summary_cfs(const ActivitySpec& activity, std::size_t count,
                                                   std::uint64_t seed) {
  const auto& s = activity.summary_tokens;
  std::vector<std::size_t> swappable;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    if (s[i] != s[i + 1]) swappable.push_back(i);
  }
  Rng rng(seed);
  std::vector<CounterfactualRecord> out;
  for (std::size_t w = 0; w < count; ++w) {
    if (w % 2 == 0) {
      out.push_back(make_missing_cf(activity, rng.below(s.size())));
    } else {
      if (swappable.empty()) throw std::invalid_argument("summary has no adjacent pair to misorder");
      const std::size_t i = swappable[rng.below(swappable.size())];
      out.push_back(make_misordered_cf(activity, i, i + 1));
    }
  }
  return out;
}

VideoSample inject_errors(const World& world, const VideoSample& sample, const ActivitySpec& activity,
                          std::span<const std::size_t> error_clips, std::uint64_t seed) {
  VideoSample out = sample;
  const std::size_t k = sample.frames_per_clip;
  const std::size_t dim = sample.input_dim;
  for (std::size_t c : error_clips) {
    if (c >= sample.num_clips() || c >= activity.steps.size()) {
      throw std::out_of_range(fmt::format("error clip {} outside video of {} clips", c, sample.num_clips()));
    }
    const Token wrong = make_sc_cf(activity.steps[c], derive_seed(derive_seed(seed, "outcome"), c));
    Rng rng(derive_seed(derive_seed(seed, "render"), c));
    for (std::size_t f = k / 2; f < k; ++f) {
      render_frames(world, wrong, sample.noise_sigma, rng, std::span<double>(out.clips[c]).subspan(f * dim, dim));
      out.error_flags[c * k + f] = 1;
    }
  }
  return out;
}

std::vector<std::size_t> choose_error_clips(std::size_t num_clips, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("error fraction must lie in [0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(num_clips)));
  std::vector<std::size_t> idx(num_clips);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(num_clips - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------------------------------------------------------------------

void DataConfig::validate() const {
  if (min_steps < 3 || max_steps > 10 || min_steps > max_steps) {
    throw ConfigError(fmt::format("step range [{}, {}] must lie within [3, 10]", min_steps, max_steps), 0, "min_steps");
  }
  if (frames_per_clip < 2 || frames_per_clip % 2 != 0) {
    throw ConfigError("frames_per_clip must be even and at least 2", 0, "frames_per_clip");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative", 0, "noise_sigma");
  if (num_counterfactuals == 0) throw ConfigError("num_counterfactuals must be at least 1", 0, "num_counterfactuals");
}

Dataset generate_split(const World& world, const DataConfig& config, std::string_view split, unsigned threads) {
  config.validate();
  std::size_t count = 0;
  std::uint64_t first_id = 0;
  if (split == "train") {
    count = config.num_train;
  } else if (split == "val") {
    count = config.num_val;
    first_id = config.num_train;
  } else if (split == "test") {
    count = config.num_test;
    first_id = config.num_train + config.num_val;
  } else {
    throw std::invalid_argument(fmt::format("unknown split '{}'", split));
  }
  const std::uint64_t split_seed = derive_seed(derive_seed(world.config().seed, "data"), split);

  Dataset out(count);
  auto make = [&](std::size_t i) {
    const std::uint64_t vseed = derive_seed(split_seed, static_cast<std::uint64_t>(i));
    Rng len_rng(derive_seed(vseed, "length"));
    const std::size_t n = config.min_steps + len_rng.below(config.max_steps - config.min_steps + 1);
    VideoRecord r;
    r.activity = gen_activity(world, derive_seed(vseed, "activity"), n, first_id + i);
    r.video = render_video(world, r.activity, derive_seed(vseed, "render"), config.noise_sigma, config.frames_per_clip);
    r.cfs = make_summary_cfs(r.activity, config.num_counterfactuals, derive_seed(vseed, "cf"));
    out[i] = std::move(r);
  };

  threads = std::max(1u, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) make(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) make(i);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

template <typename T>
void write_ints(std::string& s, const std::vector<T>& v) {
  s += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt::format("{}", static_cast<std::uint64_t>(v[i]));
  }
  s += ']';
}

void write_reals(std::string& s, const std::vector<double>& v) {
  s += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt::format("{:.17g}", v[i]);
  }
  s += ']';
}

template <typename T>
std::vector<T> read_ints(const json& j) {
  std::vector<T> out;
  for (const auto& x : j) out.push_back(x.get<T>());
  return out;
}

}  // namespace

void write_record(std::ostream& out, const VideoRecord& r) {
  std::string s = fmt::format(R"({{"activity":{{"id":{},"steps":[)", r.activity.id);
  for (std::size_t i = 0; i < r.activity.steps.size(); ++i) {
    const StepSpec& st = r.activity.steps[i];
    if (i) s += ',';
    s += fmt::format(R"({{"action":{},"before":{},"after":{},"sc_cf":)", st.action, st.before_state, st.after_state);
    write_ints(s, st.sc_cf_states);
    s += '}';
  }
  s += R"(],"summary":)";
  write_ints(s, r.activity.summary_tokens);
  s += fmt::format(R"(}},"frames_per_clip":{},"input_dim":{},"noise_sigma":{:.17g},"clips":[)",
                   r.video.frames_per_clip, r.video.input_dim, r.video.noise_sigma);
  for (std::size_t c = 0; c < r.video.clips.size(); ++c) {
    if (c) s += ',';
    write_reals(s, r.video.clips[c]);
  }
  s += R"(],"narrations":[)";
  for (std::size_t c = 0; c < r.video.narrations.size(); ++c) {
    if (c) s += ',';
    write_ints(s, r.video.narrations[c]);
  }
  s += R"(],"cfs":[)";
  for (std::size_t i = 0; i < r.cfs.size(); ++i) {
    if (i) s += ',';
    s += fmt::format(R"({{"kind":"{}","source":{},"tokens":)", to_string(r.cfs[i].kind), r.cfs[i].source_activity);
    write_ints(s, r.cfs[i].tokens);
    s += '}';
  }
  s += R"(],"labels":)";
  write_ints(s, r.video.labels);
  s += R"(,"errors":)";
  write_ints(s, r.video.error_flags);
  s += fmt::format(R"(,"seed":{}}})", r.video.seed);
  out << s << '\n';
}

VideoRecord parse_record(std::string_view line) {
  try {
    const json j = json::parse(line);
    VideoRecord r;
    const json& a = j.at("activity");
    r.activity.id = a.at("id").get<std::uint64_t>();
    for (const auto& st : a.at("steps")) {
      r.activity.steps.push_back(StepSpec{st.at("action").get<Token>(), st.at("before").get<Token>(),
                                          st.at("after").get<Token>(), read_ints<Token>(st.at("sc_cf"))});
    }
    r.activity.summary_tokens = read_ints<Token>(a.at("summary"));
    r.video.frames_per_clip = j.at("frames_per_clip").get<std::size_t>();
    r.video.input_dim = j.at("input_dim").get<std::size_t>();
    r.video.noise_sigma = j.at("noise_sigma").get<double>();
    for (const auto& c : j.at("clips")) {
      r.video.clips.push_back(c.get<std::vector<double>>());
      if (r.video.clips.back().size() != r.video.frames_per_clip * r.video.input_dim) {
        throw FormatError("clip has the wrong number of values");
      }
    }
    for (const auto& n : j.at("narrations")) r.video.narrations.push_back(read_ints<Token>(n));
    for (const auto& c : j.at("cfs")) {
      r.cfs.push_back(CounterfactualRecord{cf_kind_from_string(c.at("kind").get<std::string>()),
                                           read_ints<Token>(c.at("tokens")), c.at("source").get<std::uint64_t>()});
    }
    r.video.labels = read_ints<Token>(j.at("labels"));
    r.video.error_flags = read_ints<std::uint8_t>(j.at("errors"));
    r.video.seed = j.at("seed").get<std::uint64_t>();
    const std::size_t frames = r.video.clips.size() * r.video.frames_per_clip;
    if (r.video.labels.size() != frames || r.video.error_flags.size() != frames ||
        r.video.narrations.size() != r.video.clips.size() || r.activity.steps.size() != r.video.clips.size()) {
      throw FormatError("record fields disagree on the number of clips or frames");
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(e.what());
  }
}

void save_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path));
  for (const auto& r : data) write_record(out, r);
  if (!out) throw IoError(fmt::format("write to '{}' failed", path));
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read '{}'", path));
  Dataset out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(parse_record(line));
    } catch (const FormatError& e) {
      throw FormatError(fmt::format("{}:{}: {}", path, n, e.what()));
    }
  }
  return out;
}

std::string world_to_json(const WorldConfig& c) {
  json j;
  j["num_actions"] = c.num_actions;
  j["num_states"] = c.num_states;
  j["sc_cf_per_action"] = c.sc_cf_per_action;
  j["input_dim"] = c.input_dim;
  j["text_dim"] = c.text_dim;
  j["order_weight"] = c.order_weight;
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

WorldConfig world_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    WorldConfig c;
    c.num_actions = j.at("num_actions").get<std::size_t>();
    c.num_states = j.at("num_states").get<std::size_t>();
    c.sc_cf_per_action = j.at("sc_cf_per_action").get<std::size_t>();
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.text_dim = j.at("text_dim").get<std::size_t>();
    c.order_weight = j.at("order_weight").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("world description: {}", e.what()));
  }
}

}  // namespace statecf::world
