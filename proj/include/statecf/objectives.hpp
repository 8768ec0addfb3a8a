#pragma once

// Contrastive objectives at frame, clip and video level.
//
// Every loss works on embeddings that already live on a tape, so gradients
// flow back into whichever encoder produced them. Similarities are plain dot
// products; with unit-norm inputs they are cosines.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "statecf/autodiff.hpp"
#include "statecf/types.hpp"

namespace statecf::obj {

enum class DenominatorMode {
  // log(exp(s_p) / sum_n exp(s_n)), the positive does not appear below the line.
  kNegativesOnly,
  // Supervised-contrastive form: the positive joins the denominator.
  kNegativesPlusPositive,
};

std::string_view to_string(DenominatorMode mode);
DenominatorMode denominator_mode_from_string(std::string_view name);

struct LossParams {
  double temperature = 0.07;
  double lambda_state = 0.5;
  std::size_t num_counterfactuals = 2;
  DenominatorMode denominator_mode = DenominatorMode::kNegativesOnly;
  // The video-level loss has no temperature unless this is changed.
  double parent_temperature = 1.0;

  void validate() const;
  bool operator==(const LossParams&) const = default;
};

// Points at a row of the visual block (frames of one clip) or the text block.
struct EmbeddingRef {
  enum class Block { kVisual, kText };
  Block block = Block::kVisual;
  std::size_t index = 0;

  static EmbeddingRef visual(std::size_t i) { return {Block::kVisual, i}; }
  static EmbeddingRef text(std::size_t i) { return {Block::kText, i}; }
  bool operator==(const EmbeddingRef&) const = default;
};

struct ContrastSets {
  std::size_t anchor = 0;  // visual row
  std::vector<EmbeddingRef> positives;
  std::vector<EmbeddingRef> negatives;

  // Throws std::invalid_argument unless both sets are non-empty, disjoint and
  // exclude the anchor.
  void validate() const;
};

struct StateTextBundle {
  Embedding before_text;
  Embedding after_text;
  std::vector<Embedding> sc_cf_texts;
};

// Text block layout used by the frame-level sets.
inline constexpr std::size_t kBeforeText = 0;
inline constexpr std::size_t kAfterText = 1;
inline constexpr std::size_t kFirstCounterfactualText = 2;

enum class FrameRole { kBefore, kAfter };

// Anchors and sets for one clip of K frames. The first K/2 frames are the
// early half, the rest the late half. Before: early anchors pull toward the
// other early frames and the before text, push from the late frames, the
// after text and every state-change counterfactual. After mirrors it.
std::vector<ContrastSets> build_frame_sets(std::size_t frames_per_clip, FrameRole role,
                                           std::size_t num_sc_cf);

// Stacks a bundle into the text block [2 + |sc_cf|, d] in the layout above.
ad::Var bundle_texts(ad::Tape& tape, const StateTextBundle& bundle);

// Per-anchor terms  -(1/|P|) sum_p log( e^{s_p} / D_p )  for already-scaled
// logits. D_p is the negatives' exp-sum, plus e^{s_p} in the SupCon mode.
ad::Var contrastive_term(ad::Var positive_logits, ad::Var negative_logits, DenominatorMode mode);

// One term per anchor; frame_state_loss averages them.
std::vector<ad::Var> frame_state_terms(ad::Var frames, ad::Var texts,
                                       std::span<const ContrastSets> sets, const LossParams& params);
ad::Var frame_state_loss(ad::Var frames, ad::Var texts, std::span<const ContrastSets> sets,
                         const LossParams& params);

// Video-to-text InfoNCE over index-aligned rows (clips[i] pairs with
// narrations[i]); the text-to-video direction is not used.
ad::Var clip_v2t_loss(ad::Var clips, ad::Var narrations, const LossParams& params);

// v2t + lambda * (before + after)
ad::Var child_loss(ad::Var v2t, ad::Var before, ad::Var after, const LossParams& params);

// Video-level sets. Indices address rows of the text block.
struct ParentNegative {
  std::size_t summary = 0;
  std::vector<std::size_t> counterfactuals;
};

struct ParentSets {
  std::vector<std::size_t> positives;
  std::vector<ParentNegative> negatives;
  // Misordered / missing-step versions of the video's own summary. They sit
  // in the denominator next to the negatives.
  std::vector<std::size_t> own_counterfactuals;
};

// sum_i -log( sum_p e^{V_i.S_p} /
//             ( sum_n [ e^{V_i.S_n} + sum_w e^{V_i.S^cf_{n,w}} ] + sum_w e^{V_i.S^cf_{i,w}} ) )
// with every similarity divided by params.parent_temperature.
ad::Var parent_loss(ad::Var videos, ad::Var texts, std::span<const ParentSets> sets,
                    const LossParams& params);

}  // namespace statecf::obj
