#include "statecf/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "statecf/objectives.hpp"
#include "statecf/rng.hpp"

namespace statecf::train {

Model::Model(const enc::EncoderDims& dims, std::uint64_t seed)
    : frame_(dims, derive_seed(seed, "frame")), aggregator_(dims, derive_seed(seed, "aggregator")) {}

std::vector<ad::Tensor*> Model::parameters() {
  auto p = frame_.parameters();
  auto a = aggregator_.parameters();
  p.insert(p.end(), a.begin(), a.end());
  return p;
}

std::vector<const ad::Tensor*> Model::parameters() const {
  auto p = frame_.parameters();
  auto a = aggregator_.parameters();
  p.insert(p.end(), a.begin(), a.end());
  return p;
}

std::vector<std::string> Model::parameter_names() {
  return {"frame.w1", "frame.b1", "frame.w2", "frame.b2", "aggregator.wq", "aggregator.bq",
          "aggregator.wk", "aggregator.bk", "aggregator.wv", "aggregator.bv", "aggregator.wo", "aggregator.bo"};
}

bool Model::operator==(const Model& other) const {
  const auto a = parameters();
  const auto b = other.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->shape() != b[i]->shape() || !std::ranges::equal(a[i]->values(), b[i]->values())) return false;
  }
  return aggregator_.positions() == other.aggregator_.positions();
}

namespace {

std::vector<Embedding> rows_of(ad::Var m) {
  const std::size_t n = m.shape()[0];
  const std::size_t d = m.shape()[1];
  std::vector<Embedding> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(m.value().begin() + i * d, m.value().begin() + (i + 1) * d);
  return out;
}

ad::Var frames_matrix(ad::Tape& tape, const world::VideoSample& v, std::size_t clip_begin, std::size_t clip_end) {
  std::vector<double> flat;
  for (std::size_t c = clip_begin; c < clip_end; ++c) flat.insert(flat.end(), v.clips[c].begin(), v.clips[c].end());
  return tape.constant({(clip_end - clip_begin) * v.frames_per_clip, v.input_dim}, std::move(flat));
}

ad::Var rows_constant(ad::Tape& tape, const std::vector<Embedding>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return tape.constant({rows.size(), rows.front().size()}, std::move(flat));
}

void require_finite(double value, std::string_view term) {
  if (!std::isfinite(value)) {
    throw DivergenceError(fmt::format("{} diverged (value {})", term, value), std::string(term));
  }
}

}  // namespace

VideoEmbeddings embed_video(const Model& model, const world::VideoSample& video) {
  ad::Tape tape;
  const auto fb = model.frame().bind_constant(tape);
  const auto ab = model.aggregator().bind_constant(tape);
  const bool normalize = model.frame().normalize();
  ad::Var f = enc::encode_frames(fb, frames_matrix(tape, video, 0, video.num_clips()), normalize);
  ad::Var c = enc::pool_clips(f, video.frames_per_clip, normalize);
  ad::Var v = enc::aggregate_video(ab, c);
  VideoEmbeddings out;
  out.frames = rows_of(f);
  out.clips = rows_of(c);
  out.video.assign(v.value().begin(), v.value().end());
  return out;
}

// ---------------------------------------------------------------------------

Adam::Adam(std::span<ad::Tensor* const> params, double lr) : lr_(lr) {
  for (const ad::Tensor* p : params) {
    state_.m.emplace_back(p->size(), 0.0);
    state_.v.emplace_back(p->size(), 0.0);
    state_.updates.push_back(0);
  }
}

void Adam::step(std::span<ad::Tensor* const> params) {
  if (params.size() != state_.m.size()) throw std::invalid_argument("optimizer: parameter list changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor& p = *params[i];
    if (!p.grad()) continue;
    const auto& g = *p.grad();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    if (m.size() != p.size()) throw std::invalid_argument("optimizer: moment shape mismatch");
    const double t = static_cast<double>(++state_.updates[i]);
    const double c1 = 1.0 - std::pow(kBeta1, t);
    const double c2 = 1.0 - std::pow(kBeta2, t);
    std::vector<double> next(p.values().begin(), p.values().end());
    for (std::size_t j = 0; j < next.size(); ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      next[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps);
    }
    p = ad::Tensor(p.shape(), std::move(next), true);
  }
  ++state_.step;
}

double clip_gradients(std::span<ad::Tensor* const> params, double max_norm) {
  double sq = 0.0;
  for (const ad::Tensor* p : params) {
    if (!p->grad()) continue;
    for (double g : *p->grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double scale = max_norm / norm;
    for (ad::Tensor* p : params) {
      if (!p->grad()) continue;
      std::vector<double> g = *p->grad();
      for (double& x : g) x *= scale;
      p->set_grad(std::move(g));
    }
  }
  return norm;
}

std::string to_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.position;
  j["phase"] = r.parent ? "parent" : "child";
  j["child_step"] = r.child_step;
  j["parent_step"] = r.parent_step;
  j["loss"] = r.loss;
  j["component_losses"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.components) j["component_losses"][k] = v;
  j["grad_norm"] = r.grad_norm;
  j["clipped"] = r.clipped;
  j["wallclock"] = r.wallclock;
  return j.dump();
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const world::World& world, const world::Dataset& train, const RunConfig& config)
    : world_(world), train_(train), config_(config), model_(config.model, derive_seed(config.seed, "init")) {
  config_.validate();
  for (std::size_t v = 0; v < train.size(); ++v) {
    if (train[v].video.frames_per_clip != config.data.frames_per_clip) {
      throw ConfigError(fmt::format("video {} has {} frames per clip, config says {}", v,
                                    train[v].video.frames_per_clip, config.data.frames_per_clip),
                        0, "frames_per_clip");
    }
    if (train[v].video.num_clips() > config.model.max_clips) {
      throw ConfigError(fmt::format("video {} has more clips than max_clips", v), 0, "max_clips");
    }
    for (std::size_t c = 0; c < train[v].video.num_clips(); ++c) clip_pool_.push_back({v, c});
  }
  if (clip_pool_.size() < config.train.batch_size) {
    throw std::invalid_argument(fmt::format("dataset has {} clips, fewer than one batch of {}", clip_pool_.size(),
                                            config.train.batch_size));
  }
  if (train.size() < 2) throw std::invalid_argument("parent steps need at least two training videos");
  auto params = model_.parameters();
  adam_ = Adam(params, config.train.lr);
}

ChildBatch Trainer::child_batch(std::uint64_t child_step) const {
  const std::size_t b = config_.train.batch_size;
  const std::size_t n = clip_pool_.size();
  const std::uint64_t shuffle_seed = derive_seed(config_.seed, "shuffle");
  ChildBatch batch;
  std::uint64_t epoch = UINT64_MAX;
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < b; ++k) {
    const std::uint64_t pos = child_step * b + k;
    if (pos / n != epoch) {
      epoch = pos / n;
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(shuffle_seed, epoch));
      rng.shuffle(std::span<std::size_t>(order));
    }
    batch.items.push_back(clip_pool_[order[pos % n]]);
  }
  return batch;
}

ParentBatch Trainer::parent_batch(std::uint64_t parent_step) const {
  Rng rng(derive_seed(derive_seed(config_.seed, "parent"), parent_step));
  ParentBatch batch;
  for (std::size_t i = 0; i < config_.train.videos_per_parent_step(); ++i) batch.videos.push_back(rng.below(train_.size()));
  return batch;
}

double Trainer::child_loss(const ChildBatch& batch, std::map<std::string, double>* components) {
  const std::size_t k = config_.data.frames_per_clip;
  const bool normalize = config_.model.normalize;
  for (ad::Tensor* p : model_.parameters()) p->clear_grad();

  ad::Tape tape;
  const auto fb = model_.frame().bind(tape);
  std::vector<double> flat;
  std::vector<Embedding> narrations;
  for (const auto& item : batch.items) {
    const auto& rec = train_.at(item.video);
    const auto& clip = rec.video.clips.at(item.clip);
    flat.insert(flat.end(), clip.begin(), clip.end());
    narrations.push_back(world_.narration_text(rec.video.narrations[item.clip].front()));
  }
  const std::size_t dim = train_.front().video.input_dim;
  ad::Var frames = enc::encode_frames(fb, tape.constant({batch.items.size() * k, dim}, std::move(flat)), normalize);
  ad::Var clips = enc::pool_clips(frames, k, normalize);
  ad::Var v2t = obj::clip_v2t_loss(clips, rows_constant(tape, narrations), config_.loss);

  std::vector<ad::Var> before_terms, after_terms;
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    const world::StepSpec& step = train_[batch.items[i].video].activity.steps.at(batch.items[i].clip);
    obj::StateTextBundle bundle;
    bundle.before_text = world_.state_text(step.action, step.before_state);
    bundle.after_text = world_.state_text(step.action, step.after_state);
    if (!config_.train.ablate_cf) {
      for (Token s : step.sc_cf_states) bundle.sc_cf_texts.push_back(world_.state_text(step.action, s));
    }
    ad::Var texts = obj::bundle_texts(tape, bundle);
    ad::Var fc = ad::slice_rows(frames, i * k, (i + 1) * k);
    const std::size_t ncf = bundle.sc_cf_texts.size();
    for (auto t : obj::frame_state_terms(fc, texts, obj::build_frame_sets(k, obj::FrameRole::kBefore, ncf),
                                         config_.loss)) {
      before_terms.push_back(t);
    }
    for (auto t : obj::frame_state_terms(fc, texts, obj::build_frame_sets(k, obj::FrameRole::kAfter, ncf),
                                         config_.loss)) {
      after_terms.push_back(t);
    }
  }
  ad::Var before = ad::mean(ad::concat(before_terms));
  ad::Var after = ad::mean(ad::concat(after_terms));
  ad::Var total = obj::child_loss(v2t, before, after, config_.loss);

  require_finite(v2t.item(), "L_v2t");
  require_finite(before.item(), "L_before");
  require_finite(after.item(), "L_after");
  require_finite(total.item(), "L_child");
  if (components) {
    (*components)["v2t"] = v2t.item();
    (*components)["before"] = before.item();
    (*components)["after"] = after.item();
  }
  tape.backward(total);
  return total.item();
}

double Trainer::parent_loss(const ParentBatch& batch, std::map<std::string, double>* components) {
  const std::size_t k = config_.data.frames_per_clip;
  const bool normalize = config_.model.normalize;
  const std::size_t b = batch.videos.size();
  for (ad::Tensor* p : model_.parameters()) p->clear_grad();

  ad::Tape tape;
  const auto fb = model_.frame().bind(tape);
  const auto ab = model_.aggregator().bind(tape);
  std::vector<double> flat;
  std::vector<std::size_t> clip_offsets{0};
  for (std::size_t v : batch.videos) {
    const auto& video = train_.at(v).video;
    for (const auto& clip : video.clips) flat.insert(flat.end(), clip.begin(), clip.end());
    clip_offsets.push_back(clip_offsets.back() + video.num_clips());
  }
  const std::size_t dim = train_.front().video.input_dim;
  ad::Var frames = enc::encode_frames(fb, tape.constant({clip_offsets.back() * k, dim}, std::move(flat)), normalize);
  ad::Var clips = enc::pool_clips(frames, k, normalize);
  std::vector<ad::Var> videos;
  for (std::size_t i = 0; i < b; ++i) {
    videos.push_back(enc::aggregate_video(ab, ad::slice_rows(clips, clip_offsets[i], clip_offsets[i + 1])));
  }
  ad::Var video_matrix = ad::stack_rows(videos);

  // Text rows: the b summaries, then each video's counterfactuals.
  std::vector<Embedding> texts;
  std::vector<const TokenSeq*> row_tokens;
  for (std::size_t v : batch.videos) {
    texts.push_back(world_.summary_text(train_[v].activity.summary_tokens));
    row_tokens.push_back(&train_[v].activity.summary_tokens);
  }
  std::vector<std::vector<std::size_t>> cf_rows(b);
  if (!config_.train.ablate_cf) {
    for (std::size_t i = 0; i < b; ++i) {
      for (const auto& cf : train_[batch.videos[i]].cfs) {
        cf_rows[i].push_back(texts.size());
        texts.push_back(world_.summary_text(cf.tokens));
        row_tokens.push_back(&cf.tokens);
      }
    }
  }

  std::vector<obj::ParentSets> sets(b);
  for (std::size_t i = 0; i < b; ++i) {
    const TokenSeq& own = *row_tokens[i];
    sets[i].positives = {i};
    sets[i].own_counterfactuals = cf_rows[i];
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i || *row_tokens[j] == own) continue;
      obj::ParentNegative neg{j, {}};
      for (std::size_t r : cf_rows[j]) {
        if (*row_tokens[r] != own) neg.counterfactuals.push_back(r);
      }
      sets[i].negatives.push_back(std::move(neg));
    }
  }
  ad::Var loss = obj::parent_loss(video_matrix, rows_constant(tape, texts), sets, config_.loss);
  require_finite(loss.item(), "L_parent");
  if (components) (*components)["parent"] = loss.item();
  tape.backward(loss);
  return loss.item();
}

StepRecord Trainer::finish_step(double loss, std::map<std::string, double> components, bool parent) {
  auto params = model_.parameters();
  StepRecord r;
  r.grad_norm = clip_gradients(params, config_.train.grad_clip);
  require_finite(r.grad_norm, parent ? "L_parent gradient" : "L_child gradient");
  r.clipped = r.grad_norm > config_.train.grad_clip;
  adam_.step(params);
  for (ad::Tensor* p : params) p->clear_grad();
  if (parent) {
    ++parent_steps_;
  } else {
    ++child_steps_;
  }
  r.parent = parent;
  r.loss = loss;
  r.components = std::move(components);
  r.child_step = child_steps_;
  r.parent_step = parent_steps_;
  r.position = child_steps_ + parent_steps_;
  return r;
}

StepRecord Trainer::child_step(const ChildBatch& batch) {
  std::map<std::string, double> comps;
  const double loss = child_loss(batch, &comps);
  return finish_step(loss, std::move(comps), false);
}

StepRecord Trainer::parent_step(const ParentBatch& batch) {
  std::map<std::string, double> comps;
  const double loss = parent_loss(batch, &comps);
  return finish_step(loss, std::move(comps), true);
}

void Trainer::run(const Sink& sink, std::uint64_t stop_after_child_steps) {
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t ratio = config_.train.schedule_ratio;
  auto emit = [&](StepRecord r) {
    r.wallclock = elapsed_ + std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (sink) sink(r);
  };
  const std::uint64_t target = std::min<std::uint64_t>(config_.train.child_steps_total, stop_after_child_steps);
  while (parent_steps_ < child_steps_ / ratio) emit(parent_step(parent_batch(parent_steps_)));
  while (child_steps_ < target) {
    emit(child_step(child_batch(child_steps_)));
    if (child_steps_ % ratio == 0) emit(parent_step(parent_batch(parent_steps_)));
  }
  elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'C', 'F', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void u32(std::uint32_t x) { raw(x); }
  void u64(std::uint64_t x) { raw(x); }
  void f64(double x) { raw(std::bit_cast<std::uint64_t>(x)); }
  void str(std::string_view s) {
    u64(s.size());
    buf_.append(s);
  }
  void reals(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  const std::string& data() const { return buf_; }

 private:
  template <typename T>
  void raw(T x) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  std::uint64_t u64() { return raw<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(raw<std::uint64_t>()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> reals() {
    const std::uint64_t n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw FormatError("checkpoint payload is truncated");
  }
  template <typename T>
  T raw() {
    need(sizeof(T));
    T x = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) x |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return x;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  Writer p;
  p.str(to_text(ckpt.config));
  const auto names = Model::parameter_names();
  const auto params = ckpt.model.parameters();
  p.u64(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    p.str(names[i]);
    p.u64(params[i]->shape().size());
    for (std::size_t d : params[i]->shape()) p.u64(d);
    p.reals(params[i]->values());
  }
  p.u64(ckpt.optimizer.step);
  p.u64(ckpt.optimizer.m.size());
  for (std::size_t i = 0; i < ckpt.optimizer.m.size(); ++i) {
    p.u64(ckpt.optimizer.updates[i]);
    p.reals(ckpt.optimizer.m[i]);
    p.reals(ckpt.optimizer.v[i]);
  }
  p.u64(ckpt.child_steps);
  p.u64(ckpt.parent_steps);

  Writer header;
  header.u32(kCheckpointVersion);
  header.u64(fnv1a(p.data()));
  header.u64(p.data().size());
  out.write(kMagic, sizeof(kMagic));
  out.write(header.data().data(), static_cast<std::streamsize>(header.data().size()));
  out.write(p.data().data(), static_cast<std::streamsize>(p.data().size()));
  if (!out) throw IoError("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (all.size() < sizeof(kMagic) + 20 || std::memcmp(all.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  Reader h(std::string_view(all).substr(sizeof(kMagic), 20));
  const std::uint32_t version = h.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(fmt::format("checkpoint version {} is not supported (expected {})", version, kCheckpointVersion));
  }
  const std::uint64_t checksum = h.u64();
  const std::uint64_t length = h.u64();
  const std::string_view payload = std::string_view(all).substr(sizeof(kMagic) + 20);
  if (payload.size() != length) throw ChecksumError("checkpoint length does not match its header");
  if (fnv1a(payload) != checksum) throw ChecksumError("checkpoint checksum mismatch");

  Reader p(payload);
  Checkpoint ckpt;
  ckpt.config = parse_config(p.str());
  ckpt.model = Model(ckpt.config.model, derive_seed(ckpt.config.seed, "init"));
  const auto names = Model::parameter_names();
  auto params = ckpt.model.parameters();
  if (p.u64() != params.size()) throw FormatError("checkpoint holds a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (p.str() != names[i]) throw FormatError(fmt::format("checkpoint parameter {} is misnamed", i));
    ad::Shape shape(p.u64());
    for (auto& d : shape) d = p.u64();
    if (shape != params[i]->shape()) throw FormatError(fmt::format("checkpoint parameter {} has the wrong shape", names[i]));
    *params[i] = ad::Tensor(shape, p.reals(), true);
  }
  ckpt.optimizer.step = p.u64();
  const std::uint64_t n = p.u64();
  if (n != params.size()) throw FormatError("checkpoint optimizer state does not match the model");
  for (std::uint64_t i = 0; i < n; ++i) {
    ckpt.optimizer.updates.push_back(p.u64());
    ckpt.optimizer.m.push_back(p.reals());
    ckpt.optimizer.v.push_back(p.reals());
    if (ckpt.optimizer.m.back().size() != params[i]->size() || ckpt.optimizer.v.back().size() != params[i]->size()) {
      throw FormatError("checkpoint moment has the wrong size");
    }
  }
  ckpt.child_steps = p.u64();
  ckpt.parent_steps = p.u64();
  if (!p.done()) throw FormatError("checkpoint has trailing bytes");
  return ckpt;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read checkpoint '{}'", path));
  return read_checkpoint(in);
}

void Trainer::save(std::ostream& out) const {
  write_checkpoint(out, Checkpoint{config_, model_, adam_.state(), child_steps_, parent_steps_});
}

void Trainer::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write checkpoint '{}'", path));
  save(out);
}

void Trainer::load(std::istream& in) {
  Checkpoint ckpt = read_checkpoint(in);
  RunConfig a = ckpt.config;
  RunConfig b = config_;
  a.train.child_steps_total = b.train.child_steps_total = 0;
  if (!(a == b)) throw ConfigError("checkpoint was written with a different configuration");
  model_ = std::move(ckpt.model);
  adam_.set_state(std::move(ckpt.optimizer));
  child_steps_ = ckpt.child_steps;
  parent_steps_ = ckpt.parent_steps;
}

void Trainer::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read checkpoint '{}'", path));
  load(in);
}

}  // namespace statecf::train
