#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "statecf/encoders.hpp"
#include "statecf/objectives.hpp"
#include "test_support.hpp"

using namespace statecf;
using namespace statecf::obj;
using statecf::testing::random_values;
using statecf::testing::unit_vector;
using Vec = std::vector<double>;

namespace {

ad::Var matrix(ad::Tape& tape, const std::vector<Vec>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return tape.constant({rows.size(), rows[0].size()}, std::move(flat));
}

std::vector<Vec> unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<Vec> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(unit_vector(rng, d));
  return out;
}

ContrastSets single_pair() {
  ContrastSets s;
  s.anchor = 0;
  s.positives = {EmbeddingRef::text(0)};
  s.negatives = {EmbeddingRef::text(1)};
  return s;
}

}  // namespace

TEST_CASE("build_frame_sets") {
  SUBCASE("K=4 before with one counterfactual") {
    auto sets = build_frame_sets(4, FrameRole::kBefore, 1);
    REQUIRE(sets.size() == 2);
    const auto& s = sets[0];
    CHECK(s.anchor == 0);
    CHECK(s.positives == std::vector<EmbeddingRef>{EmbeddingRef::visual(1), EmbeddingRef::text(kBeforeText)});
    CHECK(s.negatives == std::vector<EmbeddingRef>{EmbeddingRef::visual(2), EmbeddingRef::visual(3),
                                                   EmbeddingRef::text(kAfterText),
                                                   EmbeddingRef::text(kFirstCounterfactualText)});
    CHECK(sets[1].anchor == 1);
  }
  SUBCASE("K=2 after has only the after text as positive") {
    auto sets = build_frame_sets(2, FrameRole::kAfter, 0);
    REQUIRE(sets.size() == 1);
    CHECK(sets[0].anchor == 1);
    CHECK(sets[0].positives == std::vector<EmbeddingRef>{EmbeddingRef::text(kAfterText)});
    CHECK(sets[0].negatives == std::vector<EmbeddingRef>{EmbeddingRef::visual(0), EmbeddingRef::text(kBeforeText)});
  }
  SUBCASE("K=4 after anchors are the late half") {
    auto sets = build_frame_sets(4, FrameRole::kAfter, 2);
    REQUIRE(sets.size() == 2);
    CHECK(sets[0].anchor == 2);
    CHECK(sets[1].anchor == 3);
    for (const auto& s : sets) {
      s.validate();
      CHECK(s.negatives.size() == 2 + 1 + 2);
    }
  }
  SUBCASE("odd K is rejected") {
    CHECK_THROWS_AS(build_frame_sets(3, FrameRole::kBefore, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_frame_sets(0, FrameRole::kAfter, 1), std::invalid_argument);
  }
  SUBCASE("set validation") {
    ContrastSets s = single_pair();
    s.negatives.push_back(EmbeddingRef::text(0));
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    ContrastSets t = single_pair();
    t.positives.push_back(EmbeddingRef::visual(0));
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    ContrastSets u = single_pair();
    u.negatives.clear();
    CHECK_THROWS_AS(u.validate(), std::invalid_argument);
  }
}

TEST_CASE("frame_state_loss identities") {
  ad::Tape tape;
  ad::Var frames = tape.constant({1, 2}, {0.6, 0.8});
  ad::Var texts = tape.constant({2, 2}, {0.8, 0.6, 0.8, 0.6});  // equal similarity to both
  const std::vector<ContrastSets> sets{single_pair()};
  LossParams params;
  params.temperature = 0.07;

  params.denominator_mode = DenominatorMode::kNegativesOnly;
  CHECK(std::abs(frame_state_loss(frames, texts, sets, params).item()) < 1e-12);
  params.denominator_mode = DenominatorMode::kNegativesPlusPositive;
  CHECK(std::abs(frame_state_loss(frames, texts, sets, params).item() - std::numbers::ln2) < 1e-12);
}

TEST_CASE("frame_state_loss on the hand-built K=4 clip") {
  const std::vector<Vec> frames{{1, 0}, {1, 0}, {0, 1}, {0, 1}};
  const std::vector<Vec> texts{{1, 0}, {0, 1}, {-1, 0}};  // before, after, one SC-CF
  LossParams params;
  params.temperature = 1.0;

  for (auto mode : {DenominatorMode::kNegativesOnly, DenominatorMode::kNegativesPlusPositive}) {
    params.denominator_mode = mode;
    for (auto role : {FrameRole::kBefore, FrameRole::kAfter}) {
      auto sets = build_frame_sets(4, role, 1);
      ad::Tape tape;
      const double got = frame_state_loss(matrix(tape, frames), matrix(tape, texts), sets, params).item();
      const double want = oracle::frame_loss(frames, texts, sets, 1.0, mode);
      CHECK(std::abs(got - want) < 1e-10);
    }
  }
  // Closed forms for the printed denominator.
  params.denominator_mode = DenominatorMode::kNegativesOnly;
  ad::Tape tape;
  auto before = build_frame_sets(4, FrameRole::kBefore, 1);
  auto after = build_frame_sets(4, FrameRole::kAfter, 1);
  const double lb = frame_state_loss(matrix(tape, frames), matrix(tape, texts), before, params).item();
  const double la = frame_state_loss(matrix(tape, frames), matrix(tape, texts), after, params).item();
  CHECK(std::abs(lb - (std::log(3.0 + std::exp(-1.0)) - 1.0)) < 1e-12);
  CHECK(std::abs(la - (std::log(4.0) - 1.0)) < 1e-12);
}

TEST_CASE("frame_state_loss agrees with the oracle on random clips") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 * (1 + rng.below(3));
    const std::size_t ncf = rng.below(3);
    const auto frames = unit_rows(rng, k, 5);
    const auto texts = unit_rows(rng, 2 + ncf, 5);
    LossParams params;
    params.temperature = rng.uniform(0.05, 1.5);
    params.denominator_mode = trial % 2 ? DenominatorMode::kNegativesOnly : DenominatorMode::kNegativesPlusPositive;
    auto sets = build_frame_sets(k, trial % 3 ? FrameRole::kBefore : FrameRole::kAfter, ncf);
    ad::Tape tape;
    const double got = frame_state_loss(matrix(tape, frames), matrix(tape, texts), sets, params).item();
    const double want = oracle::frame_loss(frames, texts, sets, params.temperature, params.denominator_mode);
    CHECK(std::abs(got - want) < 1e-10 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("contrastive term properties") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec pos = random_values(rng, 1 + rng.below(3), 2.0);
    const Vec neg = random_values(rng, 1 + rng.below(4), 2.0);
    const double shift = rng.uniform(-50.0, 50.0);
    ad::Tape tape;
    auto term = [&](const Vec& p, const Vec& n, DenominatorMode mode) {
      return contrastive_term(tape.constant({p.size()}, p), tape.constant({n.size()}, n), mode).item();
    };

    SUBCASE("shift invariance of the printed form") {
      Vec p2 = pos, n2 = neg;
      for (double& x : p2) x += shift;
      for (double& x : n2) x += shift;
      CHECK(std::abs(term(pos, neg, DenominatorMode::kNegativesOnly) -
                     term(p2, n2, DenominatorMode::kNegativesOnly)) < 1e-9);
    }
    SUBCASE("monotone in positives and negatives") {
      for (auto mode : {DenominatorMode::kNegativesOnly, DenominatorMode::kNegativesPlusPositive}) {
        const double base = term(pos, neg, mode);
        Vec p2 = pos;
        p2[rng.below(p2.size())] += 0.5;
        CHECK(term(p2, neg, mode) < base);
        Vec n2 = neg;
        n2[rng.below(n2.size())] += 0.5;
        CHECK(term(pos, n2, mode) > base);
      }
    }
  }
}

TEST_CASE("clip_v2t_loss") {
  LossParams params;
  SUBCASE("uniform similarities give ln B") {
    ad::Tape tape;
    std::vector<Vec> rows(4, Vec{1.0, 0.0});
    const double l = clip_v2t_loss(matrix(tape, rows), matrix(tape, rows), params).item();
    CHECK(std::abs(l - std::log(4.0)) < 1e-12);
  }
  SUBCASE("saturated pairing drives the loss to zero") {
    ad::Tape tape;
    std::vector<Vec> clips{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    std::vector<Vec> texts{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    params.temperature = 0.01;
    CHECK(clip_v2t_loss(matrix(tape, clips), matrix(tape, texts), params).item() < 1e-40);
  }
  SUBCASE("random batch matches the oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
      const auto clips = unit_rows(rng, 3, 2);
      const auto texts = unit_rows(rng, 3, 2);
      params.temperature = rng.uniform(0.05, 1.0);
      ad::Tape tape;
      const double got = clip_v2t_loss(matrix(tape, clips), matrix(tape, texts), params).item();
      CHECK(std::abs(got - oracle::v2t_loss(clips, texts, params.temperature)) < 1e-10);
      CHECK(got >= 0.0);
    }
  }
  SUBCASE("needs two pairs") {
    ad::Tape tape;
    std::vector<Vec> one{{1, 0}};
    CHECK_THROWS_AS(clip_v2t_loss(matrix(tape, one), matrix(tape, one), params), std::invalid_argument);
  }
}

TEST_CASE("child_loss") {
  ad::Tape tape;
  auto s = [&](double x) { return tape.constant({}, {x}); };
  LossParams params;
  params.lambda_state = 0.5;
  CHECK(child_loss(s(1), s(2), s(3), params).item() == 3.5);
  params.lambda_state = 0.0;
  const double v2t = 1.2345678901234567;
  CHECK(child_loss(s(v2t), s(2.5), s(7.25), params).item() == v2t);
}

TEST_CASE("child gradient is linear in its terms") {
  enc::EncoderDims dims;
  dims.input_dim = 6;
  dims.hidden_dim = 5;
  dims.embed_dim = 4;
  enc::FrameEncoder encoder(dims, 2);
  Rng rng(3);
  const auto frames = random_values(rng, 2 * 4 * 6);  // two clips of four frames
  const auto narr = unit_rows(rng, 2, 4);
  const auto bundle_rows = unit_rows(rng, 3, 4);
  LossParams params;
  params.lambda_state = 0.7;

  // which: 0 = child, 1 = v2t, 2 = before, 3 = after
  auto grads = [&](int which) {
    ad::Tape tape;
    auto b = encoder.bind(tape);
    ad::Var f = enc::encode_frames(b, tape.constant({8, 6}, frames));
    ad::Var clips = enc::pool_clips(f, 4);
    ad::Var v2t = clip_v2t_loss(clips, matrix(tape, narr), params);
    ad::Var texts = matrix(tape, bundle_rows);
    auto bs = build_frame_sets(4, FrameRole::kBefore, 1);
    auto as = build_frame_sets(4, FrameRole::kAfter, 1);
    std::vector<ad::Var> bt, at;
    for (std::size_t c = 0; c < 2; ++c) {
      ad::Var fc = ad::slice_rows(f, 4 * c, 4 * c + 4);
      for (auto t : frame_state_terms(fc, texts, bs, params)) bt.push_back(t);
      for (auto t : frame_state_terms(fc, texts, as, params)) at.push_back(t);
    }
    ad::Var before = ad::mean(ad::concat(bt));
    ad::Var after = ad::mean(ad::concat(at));
    ad::Var chosen = which == 0 ? child_loss(v2t, before, after, params) : which == 1 ? v2t : which == 2 ? before : after;
    tape.backward(chosen);
    std::vector<double> out;
    for (auto* p : encoder.parameters()) out.insert(out.end(), p->grad()->begin(), p->grad()->end());
    return out;
  };
  const auto child = grads(0), v2t = grads(1), before = grads(2), after = grads(3);
  for (std::size_t i = 0; i < child.size(); ++i) {
    const double combined = v2t[i] + params.lambda_state * (before[i] + after[i]);
    CHECK(std::abs(child[i] - combined) < 1e-12 * std::max(1.0, std::abs(combined)));
  }
}

TEST_CASE("parent_loss") {
  LossParams params;
  SUBCASE("counting exponentials at equal logits") {
    ad::Tape tape;
    ad::Var video = tape.constant({1, 2}, {1, 0});
    ad::Var texts = tape.constant({3, 2}, {0, 1, 0, 1, 0, -1});  // all similarities zero
    ParentSets s;
    s.positives = {0};
    s.negatives = {ParentNegative{1, {}}};
    const std::vector<ParentSets> no_cf{s};
    CHECK(std::abs(parent_loss(video, texts, no_cf, params).item()) < 1e-12);
    s.negatives[0].counterfactuals = {2};
    const std::vector<ParentSets> one_cf{s};
    CHECK(std::abs(parent_loss(video, texts, one_cf, params).item() - std::numbers::ln2) < 1e-12);
    s.negatives[0].counterfactuals.clear();
    s.own_counterfactuals = {2};
    const std::vector<ParentSets> own_cf{s};
    CHECK(std::abs(parent_loss(video, texts, own_cf, params).item() - std::numbers::ln2) < 1e-12);
  }
  SUBCASE("a far-away counterfactual barely matters") {
    ad::Tape tape;
    ad::Var video = tape.constant({1, 2}, {1, 0});
    ad::Var texts = tape.constant({3, 2}, {0.5, 0, 0.2, 0, -1000, 0});
    ParentSets s;
    s.positives = {0};
    s.negatives = {ParentNegative{1, {}}};
    const std::vector<ParentSets> without{s};
    s.negatives[0].counterfactuals = {2};
    const std::vector<ParentSets> with{s};
    CHECK(std::abs(parent_loss(video, texts, with, params).item() -
                   parent_loss(video, texts, without, params).item()) < 1e-6);
  }
  SUBCASE("hand-specified B=2, W=2 batch matches the oracle") {
    const std::vector<Vec> videos{{0.6, 0.8}, {-0.8, 0.6}};
    // rows: S0, S1, cf(S0) x2, cf(S1) x2
    const std::vector<Vec> texts{{1, 0}, {0, 1}, {0.8, 0.6}, {0.6, -0.8}, {-0.6, 0.8}, {0, -1}};
    std::vector<ParentSets> sets(2);
    sets[0].positives = {0};
    sets[0].negatives = {ParentNegative{1, {4, 5}}};
    sets[0].own_counterfactuals = {2, 3};
    sets[1].positives = {1};
    sets[1].negatives = {ParentNegative{0, {2, 3}}};
    sets[1].own_counterfactuals = {4, 5};
    ad::Tape tape;
    const double got = parent_loss(matrix(tape, videos), matrix(tape, texts), sets, params).item();
    CHECK(std::abs(got - oracle::parent_loss(videos, texts, sets, 1.0)) < 1e-10);
  }
  SUBCASE("raising a counterfactual similarity raises the loss") {
    Rng rng(8);
    for (int trial = 0; trial < 30; ++trial) {
      const auto videos = unit_rows(rng, 1, 3);
      auto texts = unit_rows(rng, 4, 3);
      const std::vector<ParentSets> sets{{{0}, {ParentNegative{1, {3}}}, {2}}};
      for (std::size_t cf : {std::size_t{2}, std::size_t{3}}) {
        auto moved = texts;
        for (std::size_t j = 0; j < 3; ++j) moved[cf][j] += 0.3 * videos[0][j];
        ad::Tape tape;
        const double base = parent_loss(matrix(tape, videos), matrix(tape, texts), sets, params).item();
        const double raised = parent_loss(matrix(tape, videos), matrix(tape, moved), sets, params).item();
        CHECK(raised > base);
      }
    }
  }
  SUBCASE("empty sets are rejected") {
    ad::Tape tape;
    ad::Var video = tape.constant({1, 2}, {1, 0});
    ad::Var texts = tape.constant({1, 2}, {1, 0});
    const std::vector<ParentSets> no_pos{ParentSets{{}, {ParentNegative{0, {}}}, {}}};
    CHECK_THROWS_AS(parent_loss(video, texts, no_pos, params), std::invalid_argument);
    const std::vector<ParentSets> no_neg{ParentSets{{0}, {}, {}}};
    CHECK_THROWS_AS(parent_loss(video, texts, no_neg, params), std::invalid_argument);
  }
}

TEST_CASE("losses do not depend on batch order") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 4;
    auto clips = unit_rows(rng, b, 5);
    auto texts = unit_rows(rng, b, 5);
    LossParams params;
    ad::Tape tape;
    const double v2t = clip_v2t_loss(matrix(tape, clips), matrix(tape, texts), params).item();

    // Parent: video i owns summary i and cf rows b + i.
    auto cfs = unit_rows(rng, b, 5);
    std::vector<Vec> all = texts;
    all.insert(all.end(), cfs.begin(), cfs.end());
    auto make_sets = [&](std::size_t n) {
      std::vector<ParentSets> sets(n);
      for (std::size_t i = 0; i < n; ++i) {
        sets[i].positives = {i};
        sets[i].own_counterfactuals = {n + i};
        for (std::size_t j = 0; j < n; ++j) {
          if (j != i) sets[i].negatives.push_back(ParentNegative{j, {n + j}});
        }
      }
      return sets;
    };
    const double parent = parent_loss(matrix(tape, clips), matrix(tape, all), make_sets(b), params).item();

    std::vector<std::size_t> perm{0, 1, 2, 3};
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<Vec> pc, pt, pcf;
    for (auto i : perm) {
      pc.push_back(clips[i]);
      pt.push_back(texts[i]);
      pcf.push_back(cfs[i]);
    }
    std::vector<Vec> pall = pt;
    pall.insert(pall.end(), pcf.begin(), pcf.end());
    CHECK(std::abs(clip_v2t_loss(matrix(tape, pc), matrix(tape, pt), params).item() - v2t) < 1e-12);
    CHECK(std::abs(parent_loss(matrix(tape, pc), matrix(tape, pall), make_sets(b), params).item() - parent) < 1e-12);
  }
}
