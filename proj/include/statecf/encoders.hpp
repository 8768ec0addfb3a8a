#pragma once

// Visual encoders and the frozen text table.
//
// FrameEncoder: two affine maps with tanh between, rows L2-normalized.
// Clips are the normalized mean of their frame embeddings. The Aggregator is a
// single-head self-attention block over a clip sequence (sinusoidal positions
// on queries and keys, output projection, mean-pool, normalize). TextTable is a fixed random
// embedding table; nothing ever writes to it after construction.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "statecf/autodiff.hpp"
#include "statecf/types.hpp"

namespace statecf::enc {

struct EncoderDims {
  std::size_t input_dim = 48;
  std::size_t hidden_dim = 64;
  std::size_t embed_dim = 32;
  std::size_t max_clips = 16;
  // Cosine similarities everywhere when true. Off only for experiments.
  bool normalize = true;

  bool operator==(const EncoderDims&) const = default;
};

class FrameEncoder {
 public:
  FrameEncoder() = default;
  FrameEncoder(const EncoderDims& dims, std::uint64_t seed);

  // Handles for one tape. `frozen` binds the weights as constants.
  struct Bound {
    ad::Var w1, b1, w2, b2;
  };
  Bound bind(ad::Tape& tape, bool frozen = false);
  Bound bind_constant(ad::Tape& tape) const;

  std::size_t input_dim() const { return w1_.shape()[0]; }
  std::size_t hidden_dim() const { return w1_.shape()[1]; }
  std::size_t embed_dim() const { return w2_.shape()[1]; }
  std::size_t parameter_count() const;
  bool normalize() const { return normalize_; }

  std::vector<ad::Tensor*> parameters() { return {&w1_, &b1_, &w2_, &b2_}; }
  std::vector<const ad::Tensor*> parameters() const { return {&w1_, &b1_, &w2_, &b2_}; }

 private:
  ad::Tensor w1_, b1_, w2_, b2_;
  bool normalize_ = true;
};

class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(const EncoderDims& dims, std::uint64_t seed);

  struct Bound {
    ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
    const ad::Tensor* positions = nullptr;
    bool normalize = true;
  };
  Bound bind(ad::Tape& tape, bool frozen = false);
  Bound bind_constant(ad::Tape& tape) const;

  std::size_t dim() const { return wq_.shape()[0]; }
  std::size_t max_clips() const { return positions_.shape()[0]; }
  const ad::Tensor& positions() const { return positions_; }

  // Test configurations.
  void zero_positional_encoding();
  void set_identity_projections();

  std::vector<ad::Tensor*> parameters() { return {&wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_}; }
  std::vector<const ad::Tensor*> parameters() const {
    return {&wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_};
  }

 private:
  ad::Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  ad::Tensor positions_;
  bool normalize_ = true;
};

// Standard sinusoidal table [max_clips, dim]: sin on even, cos on odd columns.
ad::Tensor sinusoidal_positions(std::size_t max_clips, std::size_t dim);

class TextTable {
 public:
  TextTable() = default;
  TextTable(std::size_t vocab_size, std::size_t dim, std::uint64_t seed);

  std::size_t vocab_size() const { return rows_.shape()[0]; }
  std::size_t dim() const { return rows_.shape()[1]; }
  const ad::Tensor& rows() const { return rows_; }
  std::span<const double> row(Token t) const;

  // Normalized mean of the token rows. Used for narrations and state texts.
  Embedding embed(std::span<const Token> tokens) const;
  // Order-aware composition for step sequences (summaries and their
  // counterfactuals): position t of L gets weight 1 - order_weight * t / L
  // before normalizing, so swapping two steps changes the embedding.
  Embedding embed_sequence(std::span<const Token> tokens, double order_weight) const;

  bool operator==(const TextTable&) const = default;

 private:
  ad::Tensor rows_;
};

// Tape-level forward passes.
//
// frames [N, input_dim] -> [N, d]
ad::Var encode_frames(const FrameEncoder::Bound& enc, ad::Var frames, bool normalize = true);
// frames [C*K, input_dim], grouped by clip -> [C, d]
ad::Var encode_clips(const FrameEncoder::Bound& enc, ad::Var frames, std::size_t frames_per_clip,
                     bool normalize = true);
// Clip embeddings already on the tape [C, d] -> [C, d]
ad::Var pool_clips(ad::Var frame_embeddings, std::size_t frames_per_clip, bool normalize = true);
// clips [n, d] in temporal order -> [d]
ad::Var aggregate_video(const Aggregator::Bound& agg, ad::Var clips);

// Value-level conveniences (no gradient).
Embedding encode_frame(const FrameEncoder& enc, std::span<const double> frame);
Embedding encode_clip(const FrameEncoder& enc, std::span<const std::vector<double>> frames);
Embedding aggregate_video(const Aggregator& agg, std::span<const Embedding> clips);

struct ClipEmbedding {
  Embedding vector;
  std::size_t video_id = 0;
  std::size_t clip_index = 0;
};

struct VideoEmbedding {
  Embedding vector;
  std::size_t video_id = 0;
};

}  // namespace statecf::enc
