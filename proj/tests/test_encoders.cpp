#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "statecf/encoders.hpp"
#include "test_support.hpp"

using namespace statecf;
using namespace statecf::enc;
using statecf::testing::dot;
using statecf::testing::norm;
using statecf::testing::random_values;
using statecf::testing::unit_vector;

namespace {

EncoderDims small_dims() {
  EncoderDims d;
  d.input_dim = 6;
  d.hidden_dim = 5;
  d.embed_dim = 4;
  d.max_clips = 8;
  return d;
}

}  // namespace

TEST_CASE("frame encoder") {
  EncoderDims dims;
  FrameEncoder enc(dims, 3);
  CHECK(enc.parameter_count() == 48 * 64 + 64 + 64 * 32 + 32);

  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    auto frame = random_values(rng, 48, 3.0);
    Embedding e = encode_frame(enc, frame);
    CHECK(e.size() == 32);
    CHECK(std::abs(norm(e) - 1.0) < 1e-9);
    CHECK(encode_frame(enc, frame) == e);
  }
  CHECK_THROWS_AS(encode_frame(enc, random_values(rng, 47)), ad::ShapeError);

  SUBCASE("first-layer gradient matches finite differences") {
    FrameEncoder small(small_dims(), 5);
    Rng r(2);
    const auto frames = random_values(r, 3 * 6);
    const auto weights = random_values(r, 3 * 4);
    auto params = small.parameters();
    std::vector<ad::Tensor*> first{params[0], params[1]};
    const double err = ad::grad_check(
        [&](ad::Tape& t, std::span<const ad::Var> p) {
          FrameEncoder::Bound b = small.bind(t, true);
          b.w1 = p[0];
          b.b1 = p[1];
          ad::Var out = encode_frames(b, t.constant({3, 6}, frames));
          return ad::sum(ad::mul(out, t.constant({3, 4}, weights)));
        },
        first, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("clip pooling") {
  FrameEncoder enc(EncoderDims{}, 4);
  Rng rng(8);
  const auto frame = random_values(rng, 48);

  SUBCASE("identical frames give the frame embedding") {
    std::vector<std::vector<double>> frames(4, frame);
    Embedding clip = encode_clip(enc, frames);
    Embedding single = encode_frame(enc, frame);
    for (std::size_t i = 0; i < clip.size(); ++i) CHECK(std::abs(clip[i] - single[i]) < 1e-15);
  }
  SUBCASE("frame order does not matter, bit for bit") {
    std::vector<std::vector<double>> frames;
    for (int i = 0; i < 4; ++i) frames.push_back(random_values(rng, 48));
    Embedding base = encode_clip(enc, frames);
    CHECK(std::abs(norm(base) - 1.0) < 1e-9);
    std::vector<std::size_t> order{0, 1, 2, 3};
    while (std::next_permutation(order.begin(), order.end())) {
      std::vector<std::vector<double>> shuffled;
      for (auto i : order) shuffled.push_back(frames[i]);
      CHECK(encode_clip(enc, shuffled) == base);
    }
  }
  SUBCASE("orthogonal frame embeddings average to the diagonal") {
    ad::Tape tape;
    ad::Var frames = tape.constant({2, 2}, {1, 0, 0, 1});
    ad::Var clip = pool_clips(frames, 2);
    const double c = 1.0 / std::sqrt(2.0);
    CHECK(std::abs(clip.value()[0] - c) < 1e-15);
    CHECK(std::abs(clip.value()[1] - c) < 1e-15);
  }
  SUBCASE("a clip needs two frames") {
    std::vector<std::vector<double>> one(1, frame);
    CHECK_THROWS_AS(encode_clip(enc, one), std::invalid_argument);
  }
}

TEST_CASE("aggregator") {
  EncoderDims dims;
  Rng rng(12);

  SUBCASE("single clip through identity projections is returned unchanged") {
    Aggregator agg(dims, 1);
    agg.zero_positional_encoding();
    agg.set_identity_projections();
    std::vector<Embedding> clips{unit_vector(rng, 32)};
    Embedding v = aggregate_video(agg, clips);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(v[i] - clips[0][i]) < 1e-12);
  }

  SUBCASE("without positions the output ignores clip order") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Aggregator agg(dims, seed);
      agg.zero_positional_encoding();
      std::vector<Embedding> clips;
      for (int i = 0; i < 6; ++i) clips.push_back(unit_vector(rng, 32));
      Embedding base = aggregate_video(agg, clips);
      CHECK(std::abs(norm(base) - 1.0) < 1e-9);
      std::vector<Embedding> reversed(clips.rbegin(), clips.rend());
      std::vector<Embedding> rotated(clips.begin() + 2, clips.end());
      rotated.insert(rotated.end(), clips.begin(), clips.begin() + 2);
      for (const auto& perm : {reversed, rotated}) {
        Embedding other = aggregate_video(agg, perm);
        for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(other[i] - base[i]) < 1e-9);
      }
    }
  }

  SUBCASE("with positions, swapping two clips changes the output") {
    // At initialization attention is close to uniform, so the change is small;
    // the 1e-6 margin is asserted on a trained aggregator in test_trainer.
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Aggregator agg(dims, seed);
      std::vector<Embedding> clips;
      const std::size_t n = 5 + rng.below(4);
      for (std::size_t i = 0; i < n; ++i) clips.push_back(unit_vector(rng, 32));
      Embedding base = aggregate_video(agg, clips);
      const std::size_t i = rng.below(n);
      std::swap(clips[i], clips[(i + 1 + rng.below(n - 1)) % n]);
      Embedding swapped = aggregate_video(agg, clips);
      INFO("1 - cosine " << 1.0 - dot(base, swapped));
      CHECK(dot(base, swapped) < 1.0 - 1e-9);
    }
  }

  SUBCASE("gradient through every projection matches finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Aggregator agg(small_dims(), seed);
      Rng r(seed + 40);
      const auto clips = random_values(r, 5 * 4);
      const auto weights = random_values(r, 4);
      auto params = agg.parameters();
      const double err = ad::grad_check(
          [&](ad::Tape& t, std::span<const ad::Var> p) {
            Aggregator::Bound b = agg.bind(t, true);
            b.wq = p[0]; b.bq = p[1]; b.wk = p[2]; b.bk = p[3];
            b.wv = p[4]; b.bv = p[5]; b.wo = p[6]; b.bo = p[7];
            ad::Var v = aggregate_video(b, ad::l2_normalize_rows(t.constant({5, 4}, clips)));
            return ad::sum(ad::mul(v, t.constant({4}, weights)));
          },
          params, 1e-5);
      CHECK(err < 1e-4);
    }
  }

  SUBCASE("clip count bounds") {
    Aggregator agg(dims, 0);
    std::vector<Embedding> none;
    CHECK_THROWS_AS(aggregate_video(agg, none), std::invalid_argument);
    std::vector<Embedding> many(17, unit_vector(rng, 32));
    CHECK_THROWS_AS(aggregate_video(agg, many), std::invalid_argument);
  }
}

TEST_CASE("sinusoidal positions") {
  ad::Tensor pe = sinusoidal_positions(16, 32);
  for (std::size_t r = 0; r < 16; ++r) {
    CHECK(std::abs(norm(pe.values().subspan(r * 32, 32)) - 4.0) < 1e-12);
  }
  CHECK(pe.at(0, 0) == 0.0);
}

TEST_CASE("text table") {
  TextTable table(60, 32, 99);
  for (Token t : {Token{0}, Token{17}, Token{59}}) {
    auto r = table.row(t);
    const Token one[] = {t};
    Embedding e = table.embed(one);
    CHECK(std::equal(e.begin(), e.end(), r.begin()));
    const Token twice[] = {t, t};
    Embedding e2 = table.embed(twice);
    for (std::size_t i = 0; i < e2.size(); ++i) CHECK(std::abs(e2[i] - r[i]) < 1e-15);
  }
  const Token pair[] = {3, 40};
  CHECK(std::abs(norm(table.embed(pair)) - 1.0) < 1e-9);

  const Token unknown[] = {60};
  CHECK_THROWS_AS(table.embed(unknown), std::out_of_range);
  CHECK_THROWS_AS(table.embed(std::span<const Token>{}), std::invalid_argument);

  SUBCASE("sequence composition is order-aware") {
    const Token seq[] = {1, 2, 3, 4};
    const Token swapped[] = {2, 1, 3, 4};
    Embedding a = table.embed_sequence(seq, 1.0);
    Embedding b = table.embed_sequence(swapped, 1.0);
    CHECK(std::abs(norm(a) - 1.0) < 1e-9);
    CHECK(dot(a, b) < 1.0 - 1e-3);
    // With zero order weight it is a bag of tokens.
    Embedding c = table.embed_sequence(seq, 0.0);
    Embedding d = table.embed_sequence(swapped, 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - d[i]) < 1e-15);
    const Token single[] = {9};
    Embedding s = table.embed_sequence(single, 1.0);
    auto r = table.row(9);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(s[i] - r[i]) < 1e-15);
  }

  CHECK(TextTable(60, 32, 99) == table);
}
