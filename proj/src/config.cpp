#include "statecf/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace statecf {

namespace {

struct Field {
  ConfigKey key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(std::string_view v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::invalid_argument(fmt::format("expected a non-negative integer, got '{}'", v));
  }
  return out;
}

double parse_real(std::string_view v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw std::invalid_argument(fmt::format("expected a finite real number, got '{}'", v));
  }
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(fmt::format("expected true or false, got '{}'", v));
}

template <typename T>
Field size_field(std::string_view name, std::string_view doc, T RunConfig::*section, std::size_t T::*member) {
  return {{name, doc},
          [=](RunConfig& c, std::string_view v) { (c.*section).*member = parse_integer<std::size_t>(v); },
          [=](const RunConfig& c) { return fmt::format("{}", (c.*section).*member); }};
}

template <typename T>
Field real_field(std::string_view name, std::string_view doc, T RunConfig::*section, double T::*member) {
  return {{name, doc},
          [=](RunConfig& c, std::string_view v) { (c.*section).*member = parse_real(v); },
          [=](const RunConfig& c) { return fmt::format("{}", (c.*section).*member); }};
}

const std::vector<Field>& fields() {
  using world::DataConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({{"seed", "root seed; data, init and batch order derive named sub-seeds from it"},
                 [](RunConfig& c, std::string_view v) { c.seed = parse_integer<std::uint64_t>(v); },
                 [](const RunConfig& c) { return fmt::format("{}", c.seed); }});
    // World.
    f.push_back({{"num_actions", "action tokens (even; two leave every scene state)"},
                 [](RunConfig& c, std::string_view v) { c.data.world.num_actions = parse_integer<std::size_t>(v); },
                 [](const RunConfig& c) { return fmt::format("{}", c.data.world.num_actions); }});
    f.push_back({{"num_states", "state tokens: scene states plus the wrong-outcome pool"},
                 [](RunConfig& c, std::string_view v) { c.data.world.num_states = parse_integer<std::size_t>(v); },
                 [](const RunConfig& c) { return fmt::format("{}", c.data.world.num_states); }});
    f.push_back({{"sc_cf_per_action", "wrong outcomes per action"},
                 [](RunConfig& c, std::string_view v) { c.data.world.sc_cf_per_action = parse_integer<std::size_t>(v); },
                 [](const RunConfig& c) { return fmt::format("{}", c.data.world.sc_cf_per_action); }});
    f.push_back({{"order_weight", "position weighting of summary text composition"},
                 [](RunConfig& c, std::string_view v) { c.data.world.order_weight = parse_real(v); },
                 [](const RunConfig& c) { return fmt::format("{}", c.data.world.order_weight); }});
    // Data.
    f.push_back(size_field("num_train", "training videos", &RunConfig::data, &DataConfig::num_train));
    f.push_back(size_field("num_val", "validation videos", &RunConfig::data, &DataConfig::num_val));
    f.push_back(size_field("num_test", "test videos", &RunConfig::data, &DataConfig::num_test));
    f.push_back(size_field("min_steps", "shortest activity", &RunConfig::data, &DataConfig::min_steps));
    f.push_back(size_field("max_steps", "longest activity", &RunConfig::data, &DataConfig::max_steps));
    f.push_back(size_field("frames_per_clip", "frames per clip K (even)", &RunConfig::data, &DataConfig::frames_per_clip));
    f.push_back(real_field("noise_sigma", "frame noise standard deviation", &RunConfig::data, &DataConfig::noise_sigma));
    f.push_back(size_field("num_counterfactuals", "summary counterfactuals per video W",
                           &RunConfig::data, &DataConfig::num_counterfactuals));
    // Model.
    using enc::EncoderDims;
    f.push_back(size_field("input_dim", "frame feature dimension", &RunConfig::model, &EncoderDims::input_dim));
    f.push_back(size_field("hidden_dim", "frame encoder hidden width", &RunConfig::model, &EncoderDims::hidden_dim));
    f.push_back(size_field("embed_dim", "embedding dimension (text table too)", &RunConfig::model, &EncoderDims::embed_dim));
    f.push_back(size_field("max_clips", "longest clip sequence the aggregator accepts",
                           &RunConfig::model, &EncoderDims::max_clips));
    // Loss.
    using obj::LossParams;
    f.push_back(real_field("temperature", "child-level temperature", &RunConfig::loss, &LossParams::temperature));
    f.push_back(real_field("lambda_state", "weight of the before/after terms", &RunConfig::loss, &LossParams::lambda_state));
    f.push_back({{"denominator_mode", "negatives_only | negatives_plus_positive"},
                 [](RunConfig& c, std::string_view v) { c.loss.denominator_mode = obj::denominator_mode_from_string(v); },
                 [](const RunConfig& c) { return std::string(obj::to_string(c.loss.denominator_mode)); }});
    f.push_back(real_field("parent_temperature", "video-level temperature", &RunConfig::loss,
                           &LossParams::parent_temperature));
    // Training.
    f.push_back(size_field("batch_size", "clips per child step", &RunConfig::train, &TrainConfig::batch_size));
    f.push_back(size_field("parent_batch_size", "videos per parent step (0: batch_size)",
                           &RunConfig::train, &TrainConfig::parent_batch_size));
    f.push_back(real_field("lr", "Adam learning rate", &RunConfig::train, &TrainConfig::lr));
    f.push_back(size_field("schedule_ratio", "child steps per parent step", &RunConfig::train,
                           &TrainConfig::schedule_ratio));
    f.push_back(size_field("child_steps_total", "child steps in a run", &RunConfig::train,
                           &TrainConfig::child_steps_total));
    f.push_back(real_field("grad_clip", "global gradient norm limit", &RunConfig::train, &TrainConfig::grad_clip));
    f.push_back({{"ablate_cf", "drop every counterfactual term"},
                 [](RunConfig& c, std::string_view v) { c.train.ablate_cf = parse_bool(v); },
                 [](const RunConfig& c) { return std::string(c.train.ablate_cf ? "true" : "false"); }});
    // Evaluation.
    f.push_back(real_field("error_fraction", "share of clips corrupted for error detection",
                           &RunConfig::eval, &EvalConfig::error_fraction));
    f.push_back(size_field("probe_steps", "phase probe gradient steps", &RunConfig::eval, &EvalConfig::probe_steps));
    f.push_back(real_field("probe_lr", "phase probe learning rate", &RunConfig::eval, &EvalConfig::probe_lr));
    return f;
  }();
  return table;
}

}  // namespace

std::span<const ConfigKey> config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void RunConfig::sync() {
  data.world.seed = seed;
  data.world.input_dim = model.input_dim;
  data.world.text_dim = model.embed_dim;
  loss.num_counterfactuals = data.num_counterfactuals;
}

void RunConfig::validate() const {
  auto require = [](bool ok, std::string_view field, std::string_view what) {
    if (!ok) throw ConfigError(fmt::format("{}: {}", field, what), 0, std::string(field));
  };
  data.validate();
  require(model.input_dim > 0, "input_dim", "must be positive");
  require(model.hidden_dim > 0, "hidden_dim", "must be positive");
  require(model.embed_dim > 0, "embed_dim", "must be positive");
  require(model.max_clips >= data.max_steps, "max_clips", "must cover max_steps");
  require(loss.temperature > 0.0, "temperature", "must be positive");
  require(loss.parent_temperature > 0.0, "parent_temperature", "must be positive");
  require(loss.lambda_state >= 0.0, "lambda_state", "must be non-negative");
  require(data.world.order_weight >= 0.0 && data.world.order_weight <= 1.0, "order_weight", "must lie in [0, 1]");
  require(train.batch_size >= 2, "batch_size", "must be at least 2");
  require(train.parent_batch_size != 1, "parent_batch_size", "must be 0 or at least 2");
  require(train.lr > 0.0, "lr", "must be positive");
  require(train.schedule_ratio >= 1, "schedule_ratio", "must be at least 1");
  require(train.grad_clip > 0.0, "grad_clip", "must be positive");
  require(eval.error_fraction > 0.0 && eval.error_fraction < 1.0, "error_fraction", "must lie in (0, 1)");
  require(eval.probe_steps >= 1, "probe_steps", "must be at least 1");
  require(eval.probe_lr > 0.0, "probe_lr", "must be positive");
}

RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(fmt::format("line {}: expected key = value", line_no), line_no);
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key.name == key; });
    if (it == table.end()) {
      throw ConfigError(fmt::format("line {}: unknown key '{}'", line_no, key), line_no, std::string(key));
    }
    if (!seen.insert(std::string(key)).second) {
      throw ConfigError(fmt::format("line {}: '{}' set twice", line_no, key), line_no, std::string(key));
    }
    if (value.empty()) {
      throw ConfigError(fmt::format("line {}: '{}' has no value", line_no, key), line_no, std::string(key));
    }
    try {
      it->set(c, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(fmt::format("line {}: {}: {}", line_no, key, e.what()), line_no, std::string(key));
    }
  }
  c.sync();
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read config '{}'", path));
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()), e.line(), e.field());
  }
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += fmt::format("{} = {}\n", f.key.name, f.get(config));
  return out;
}

}  // namespace statecf
