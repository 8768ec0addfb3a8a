#include "statecf/encoders.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "statecf/rng.hpp"

namespace statecf::enc {
namespace {

ad::Tensor uniform_weights(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return ad::Tensor({fan_in, fan_out}, std::move(v), true);
}

ad::Tensor zero_bias(std::size_t n) { return ad::Tensor::zeros({n}, true); }

ad::Var bind_one(ad::Tape& tape, ad::Tensor& t, bool frozen) {
  return frozen ? tape.constant(t) : tape.leaf(t);
}

ad::Tensor identity(std::size_t d) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  return ad::Tensor({d, d}, std::move(v), true);
}

}  // namespace

// ---------------------------------------------------------------------------

FrameEncoder::FrameEncoder(const EncoderDims& dims, std::uint64_t seed)
    : w1_(uniform_weights(dims.input_dim, dims.hidden_dim, derive_seed(seed, "frame.w1"))),
      b1_(zero_bias(dims.hidden_dim)),
      w2_(uniform_weights(dims.hidden_dim, dims.embed_dim, derive_seed(seed, "frame.w2"))),
      b2_(zero_bias(dims.embed_dim)),
      normalize_(dims.normalize) {}

FrameEncoder::Bound FrameEncoder::bind(ad::Tape& tape, bool frozen) {
  return {bind_one(tape, w1_, frozen), bind_one(tape, b1_, frozen), bind_one(tape, w2_, frozen),
          bind_one(tape, b2_, frozen)};
}

std::size_t FrameEncoder::parameter_count() const {
  return w1_.size() + b1_.size() + w2_.size() + b2_.size();
}

// ---------------------------------------------------------------------------

ad::Tensor sinusoidal_positions(std::size_t max_clips, std::size_t dim) {
  std::vector<double> v(max_clips * dim);
  for (std::size_t pos = 0; pos < max_clips; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      v[pos * dim + i] = (i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return ad::Tensor({max_clips, dim}, std::move(v));
}

FrameEncoder::Bound FrameEncoder::bind_constant(ad::Tape& tape) const {
  return {tape.constant(w1_), tape.constant(b1_), tape.constant(w2_), tape.constant(b2_)};
}

Aggregator::Aggregator(const EncoderDims& dims, std::uint64_t seed)
    : wq_(uniform_weights(dims.embed_dim, dims.embed_dim, derive_seed(seed, "agg.wq"))),
      bq_(zero_bias(dims.embed_dim)),
      wk_(uniform_weights(dims.embed_dim, dims.embed_dim, derive_seed(seed, "agg.wk"))),
      bk_(zero_bias(dims.embed_dim)),
      wv_(uniform_weights(dims.embed_dim, dims.embed_dim, derive_seed(seed, "agg.wv"))),
      bv_(zero_bias(dims.embed_dim)),
      wo_(uniform_weights(dims.embed_dim, dims.embed_dim, derive_seed(seed, "agg.wo"))),
      bo_(zero_bias(dims.embed_dim)),
      positions_(sinusoidal_positions(dims.max_clips, dims.embed_dim)),
      normalize_(dims.normalize) {}

Aggregator::Bound Aggregator::bind(ad::Tape& tape, bool frozen) {
  Bound b;
  b.wq = bind_one(tape, wq_, frozen);
  b.bq = bind_one(tape, bq_, frozen);
  b.wk = bind_one(tape, wk_, frozen);
  b.bk = bind_one(tape, bk_, frozen);
  b.wv = bind_one(tape, wv_, frozen);
  b.bv = bind_one(tape, bv_, frozen);
  b.wo = bind_one(tape, wo_, frozen);
  b.bo = bind_one(tape, bo_, frozen);
  b.positions = &positions_;
  b.normalize = normalize_;
  return b;
}

Aggregator::Bound Aggregator::bind_constant(ad::Tape& tape) const {
  Bound b;
  b.wq = tape.constant(wq_);
  b.bq = tape.constant(bq_);
  b.wk = tape.constant(wk_);
  b.bk = tape.constant(bk_);
  b.wv = tape.constant(wv_);
  b.bv = tape.constant(bv_);
  b.wo = tape.constant(wo_);
  b.bo = tape.constant(bo_);
  b.positions = &positions_;
  b.normalize = normalize_;
  return b;
}

void Aggregator::zero_positional_encoding() { positions_ = ad::Tensor::zeros(positions_.shape()); }

void Aggregator::set_identity_projections() {
  const std::size_t d = dim();
  wq_ = identity(d);
  wk_ = identity(d);
  wv_ = identity(d);
  wo_ = identity(d);
  bq_ = zero_bias(d);
  bk_ = zero_bias(d);
  bv_ = zero_bias(d);
  bo_ = zero_bias(d);
}

// ---------------------------------------------------------------------------

TextTable::TextTable(std::size_t vocab_size, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(vocab_size * dim);
  for (std::size_t r = 0; r < vocab_size; ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      v[r * dim + c] = rng.normal();
      n += v[r * dim + c] * v[r * dim + c];
    }
    n = std::sqrt(n);
    for (std::size_t c = 0; c < dim; ++c) v[r * dim + c] /= n;
  }
  rows_ = ad::Tensor({vocab_size, dim}, std::move(v));
}

std::span<const double> TextTable::row(Token t) const {
  if (t >= vocab_size()) {
    throw std::out_of_range(fmt::format("token {} outside vocabulary of {}", t, vocab_size()));
  }
  return rows_.values().subspan(static_cast<std::size_t>(t) * dim(), dim());
}

namespace {

Embedding normalized(Embedding v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0)) throw ad::DomainError("text embedding collapsed to zero");
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

Embedding TextTable::embed(std::span<const Token> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("embed: empty token list");
  if (tokens.size() == 1) {
    auto r = row(tokens[0]);
    return {r.begin(), r.end()};
  }
  Embedding acc(dim(), 0.0);
  for (Token t : tokens) {
    auto r = row(t);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r[i];
  }
  for (double& x : acc) x /= static_cast<double>(tokens.size());
  return normalized(std::move(acc));
}

Embedding TextTable::embed_sequence(std::span<const Token> tokens, double order_weight) const {
  if (tokens.empty()) throw std::invalid_argument("embed_sequence: empty token list");
  const double len = static_cast<double>(tokens.size());
  Embedding acc(dim(), 0.0);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const double w = 1.0 - order_weight * static_cast<double>(t) / len;
    auto r = row(tokens[t]);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * r[i];
  }
  return normalized(std::move(acc));
}

// ---------------------------------------------------------------------------

ad::Var encode_frames(const FrameEncoder::Bound& enc, ad::Var frames, bool normalize) {
  ad::Var hidden = ad::tanh(ad::add_row(ad::matmul(frames, enc.w1), enc.b1));
  ad::Var out = ad::add_row(ad::matmul(hidden, enc.w2), enc.b2);
  return normalize ? ad::l2_normalize_rows(out) : out;
}

ad::Var pool_clips(ad::Var frame_embeddings, std::size_t frames_per_clip, bool normalize) {
  const std::size_t n = frame_embeddings.shape()[0];
  if (frames_per_clip < 2) throw std::invalid_argument("a clip needs at least 2 frames");
  if (n % frames_per_clip != 0) {
    throw ad::ShapeError(fmt::format("{} frames do not split into clips of {}", n, frames_per_clip));
  }
  std::vector<ad::Var> means;
  means.reserve(n / frames_per_clip);
  for (std::size_t begin = 0; begin < n; begin += frames_per_clip) {
    means.push_back(ad::mean_rows(ad::slice_rows(frame_embeddings, begin, begin + frames_per_clip)));
  }
  ad::Var stacked = ad::stack_rows(means);
  return normalize ? ad::l2_normalize_rows(stacked) : stacked;
}

ad::Var encode_clips(const FrameEncoder::Bound& enc, ad::Var frames, std::size_t frames_per_clip,
                     bool normalize) {
  return pool_clips(encode_frames(enc, frames, normalize), frames_per_clip, normalize);
}

ad::Var aggregate_video(const Aggregator::Bound& agg, ad::Var clips) {
  ad::Tape& tape = clips.tape();
  const std::size_t n = clips.shape()[0];
  const std::size_t d = clips.shape()[1];
  if (n == 0) throw std::invalid_argument("aggregate_video: no clips");
  if (n > agg.positions->shape()[0]) {
    throw std::invalid_argument(
        fmt::format("aggregate_video: {} clips exceed max_clips {}", n, agg.positions->shape()[0]));
  }
  auto pos = agg.positions->values().subspan(0, n * d);
  // Positions enter the queries and keys; values carry clip content only.
  ad::Var x = ad::add(clips, tape.constant({n, d}, {pos.begin(), pos.end()}));
  ad::Var q = ad::add_row(ad::matmul(x, agg.wq), agg.bq);
  ad::Var k = ad::add_row(ad::matmul(x, agg.wk), agg.bk);
  ad::Var v = ad::add_row(ad::matmul(clips, agg.wv), agg.bv);
  ad::Var scores = ad::mul_scalar(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  ad::Var attended = ad::matmul(ad::softmax_rows(scores), v);
  ad::Var out = ad::add_row(ad::matmul(attended, agg.wo), agg.bo);
  ad::Var pooled = ad::mean_rows(out);
  return agg.normalize ? ad::l2_normalize(pooled) : pooled;
}

// ---------------------------------------------------------------------------

Embedding encode_frame(const FrameEncoder& enc, std::span<const double> frame) {
  if (frame.size() != enc.input_dim()) {
    throw ad::ShapeError(fmt::format("frame has {} entries, encoder expects {}", frame.size(), enc.input_dim()));
  }
  ad::Tape tape;
  auto bound = enc.bind_constant(tape);
  ad::Var out = encode_frames(bound, tape.constant({1, frame.size()}, {frame.begin(), frame.end()}),
                              enc.normalize());
  return {out.value().begin(), out.value().end()};
}

Embedding encode_clip(const FrameEncoder& enc, std::span<const std::vector<double>> frames) {
  if (frames.size() < 2) throw std::invalid_argument("encode_clip: a clip needs at least 2 frames");
  std::vector<double> flat;
  for (const auto& f : frames) {
    if (f.size() != enc.input_dim()) throw ad::ShapeError("encode_clip: frame dimension mismatch");
    flat.insert(flat.end(), f.begin(), f.end());
  }
  ad::Tape tape;
  auto bound = enc.bind_constant(tape);
  ad::Var out = encode_clips(bound, tape.constant({frames.size(), enc.input_dim()}, std::move(flat)),
                             frames.size(), enc.normalize());
  return {out.value().begin(), out.value().end()};
}

Embedding aggregate_video(const Aggregator& agg, std::span<const Embedding> clips) {
  if (clips.empty()) throw std::invalid_argument("aggregate_video: no clips");
  std::vector<double> flat;
  for (const auto& c : clips) {
    if (c.size() != agg.dim()) throw ad::ShapeError("aggregate_video: clip dimension mismatch");
    flat.insert(flat.end(), c.begin(), c.end());
  }
  ad::Tape tape;
  auto bound = agg.bind_constant(tape);
  ad::Var out = aggregate_video(bound, tape.constant({clips.size(), agg.dim()}, std::move(flat)));
  return {out.value().begin(), out.value().end()};
}

}  // namespace statecf::enc
