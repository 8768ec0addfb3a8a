#include "statecf/objectives.hpp"

#include <algorithm>
#include <stdexcept>

#include <fmt/format.h>

namespace statecf::obj {

std::string_view to_string(DenominatorMode mode) {
  return mode == DenominatorMode::kNegativesOnly ? "negatives_only" : "negatives_plus_positive";
}

DenominatorMode denominator_mode_from_string(std::string_view name) {
  if (name == "negatives_only") return DenominatorMode::kNegativesOnly;
  if (name == "negatives_plus_positive") return DenominatorMode::kNegativesPlusPositive;
  throw std::invalid_argument(fmt::format("unknown denominator mode '{}'", name));
}

void LossParams::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (!(parent_temperature > 0.0)) throw std::invalid_argument("parent_temperature must be positive");
  if (!(lambda_state >= 0.0)) throw std::invalid_argument("lambda_state must be non-negative");
  if (num_counterfactuals < 1) throw std::invalid_argument("num_counterfactuals must be at least 1");
}

void ContrastSets::validate() const {
  if (positives.empty()) throw std::invalid_argument(fmt::format("anchor {}: empty positive set", anchor));
  if (negatives.empty()) throw std::invalid_argument(fmt::format("anchor {}: empty negative set", anchor));
  const EmbeddingRef self = EmbeddingRef::visual(anchor);
  for (const auto& p : positives) {
    if (p == self) throw std::invalid_argument(fmt::format("anchor {} is its own positive", anchor));
    if (std::find(negatives.begin(), negatives.end(), p) != negatives.end()) {
      throw std::invalid_argument(fmt::format("anchor {}: positive also listed as negative", anchor));
    }
  }
  if (std::find(negatives.begin(), negatives.end(), self) != negatives.end()) {
    throw std::invalid_argument(fmt::format("anchor {} is its own negative", anchor));
  }
}

std::vector<ContrastSets> build_frame_sets(std::size_t frames_per_clip, FrameRole role,
                                           std::size_t num_sc_cf) {
  if (frames_per_clip < 2 || frames_per_clip % 2 != 0) {
    throw std::invalid_argument(
        fmt::format("frames per clip must be even and at least 2, got {}", frames_per_clip));
  }
  const std::size_t half = frames_per_clip / 2;
  const bool before = role == FrameRole::kBefore;
  const std::size_t own_begin = before ? 0 : half;
  const std::size_t other_begin = before ? half : 0;
  const std::size_t own_text = before ? kBeforeText : kAfterText;
  const std::size_t other_text = before ? kAfterText : kBeforeText;

  std::vector<ContrastSets> sets;
  for (std::size_t a = own_begin; a < own_begin + half; ++a) {
    ContrastSets s;
    s.anchor = a;
    for (std::size_t f = own_begin; f < own_begin + half; ++f) {
      if (f != a) s.positives.push_back(EmbeddingRef::visual(f));
    }
    s.positives.push_back(EmbeddingRef::text(own_text));
    for (std::size_t f = other_begin; f < other_begin + half; ++f) {
      s.negatives.push_back(EmbeddingRef::visual(f));
    }
    s.negatives.push_back(EmbeddingRef::text(other_text));
    for (std::size_t c = 0; c < num_sc_cf; ++c) {
      s.negatives.push_back(EmbeddingRef::text(kFirstCounterfactualText + c));
    }
    sets.push_back(std::move(s));
  }
  return sets;
}

ad::Var bundle_texts(ad::Tape& tape, const StateTextBundle& bundle) {
  const std::size_t d = bundle.before_text.size();
  if (bundle.after_text.size() != d) throw ad::ShapeError("bundle: before/after dimensions differ");
  std::vector<double> flat(bundle.before_text);
  flat.insert(flat.end(), bundle.after_text.begin(), bundle.after_text.end());
  for (const auto& cf : bundle.sc_cf_texts) {
    if (cf.size() != d) throw ad::ShapeError("bundle: counterfactual dimension differs");
    flat.insert(flat.end(), cf.begin(), cf.end());
  }
  return tape.constant({2 + bundle.sc_cf_texts.size(), d}, std::move(flat));
}

ad::Var contrastive_term(ad::Var positive_logits, ad::Var negative_logits, DenominatorMode mode) {
  if (positive_logits.size() == 0 || negative_logits.size() == 0) {
    throw std::invalid_argument("contrastive term needs positives and negatives");
  }
  if (mode == DenominatorMode::kNegativesOnly) {
    return ad::sub(ad::log_sum_exp(negative_logits), ad::mean(positive_logits));
  }
  std::vector<ad::Var> denominators;
  for (std::size_t p = 0; p < positive_logits.size(); ++p) {
    const std::size_t idx[] = {p};
    const ad::Var parts[] = {ad::gather(positive_logits, idx), negative_logits};
    denominators.push_back(ad::log_sum_exp(ad::concat(parts)));
  }
  return ad::sub(ad::mean(ad::concat(denominators)), ad::mean(positive_logits));
}

std::vector<ad::Var> frame_state_terms(ad::Var frames, ad::Var texts,
                                       std::span<const ContrastSets> sets, const LossParams& params) {
  params.validate();
  if (sets.empty()) throw std::invalid_argument("frame_state_loss: no anchors");
  const std::size_t k = frames.shape()[0];
  const std::size_t t = texts.shape()[0];
  const std::size_t d = frames.shape()[1];
  if (texts.shape()[1] != d) throw ad::ShapeError("frame_state_loss: frame/text dimensions differ");

  const ad::Var blocks[] = {ad::reshape(frames, {k * d}), ad::reshape(texts, {t * d})};
  ad::Var candidates = ad::reshape(ad::concat(blocks), {k + t, d});
  ad::Var logits = ad::mul_scalar(ad::matmul(frames, ad::transpose(candidates)), 1.0 / params.temperature);

  const std::size_t width = k + t;
  auto column = [&](const EmbeddingRef& r) {
    const std::size_t limit = r.block == EmbeddingRef::Block::kVisual ? k : t;
    if (r.index >= limit) throw std::out_of_range("contrast set references a missing embedding");
    return r.block == EmbeddingRef::Block::kVisual ? r.index : k + r.index;
  };

  std::vector<ad::Var> terms;
  terms.reserve(sets.size());
  for (const ContrastSets& s : sets) {
    s.validate();
    if (s.anchor >= k) throw std::out_of_range("contrast set anchor outside the frame block");
    std::vector<std::size_t> pos, neg;
    for (const auto& r : s.positives) pos.push_back(s.anchor * width + column(r));
    for (const auto& r : s.negatives) neg.push_back(s.anchor * width + column(r));
    terms.push_back(contrastive_term(ad::gather(logits, pos), ad::gather(logits, neg), params.denominator_mode));
  }
  return terms;
}

ad::Var frame_state_loss(ad::Var frames, ad::Var texts, std::span<const ContrastSets> sets,
                         const LossParams& params) {
  auto terms = frame_state_terms(frames, texts, sets, params);
  return ad::mean(ad::concat(terms));
}

ad::Var clip_v2t_loss(ad::Var clips, ad::Var narrations, const LossParams& params) {
  params.validate();
  const std::size_t b = clips.shape()[0];
  if (b < 2) throw std::invalid_argument(fmt::format("v2t loss needs a batch of at least 2, got {}", b));
  if (narrations.shape() != clips.shape()) throw ad::ShapeError("v2t loss: clip/narration shapes differ");

  ad::Var logits = ad::mul_scalar(ad::matmul(clips, ad::transpose(narrations)), 1.0 / params.temperature);
  std::vector<ad::Var> row_lse;
  std::vector<std::size_t> diagonal;
  for (std::size_t i = 0; i < b; ++i) {
    row_lse.push_back(ad::log_sum_exp(ad::row(logits, i)));
    diagonal.push_back(i * b + i);
  }
  return ad::sub(ad::mean(ad::concat(row_lse)), ad::mean(ad::gather(logits, diagonal)));
}

ad::Var child_loss(ad::Var v2t, ad::Var before, ad::Var after, const LossParams& params) {
  return ad::add(v2t, ad::mul_scalar(ad::add(before, after), params.lambda_state));
}

ad::Var parent_loss(ad::Var videos, ad::Var texts, std::span<const ParentSets> sets,
                    const LossParams& params) {
  params.validate();
  const std::size_t b = videos.shape()[0];
  const std::size_t t = texts.shape()[0];
  if (sets.size() != b) throw std::invalid_argument("parent_loss: one set per video required");
  if (texts.shape()[1] != videos.shape()[1]) throw ad::ShapeError("parent_loss: video/text dimensions differ");

  ad::Var logits = ad::mul_scalar(ad::matmul(videos, ad::transpose(texts)), 1.0 / params.parent_temperature);
  auto flat = [&](std::size_t i, std::size_t text) {
    if (text >= t) throw std::out_of_range("parent set references a missing text embedding");
    return i * t + text;
  };

  std::vector<ad::Var> terms;
  for (std::size_t i = 0; i < b; ++i) {
    const ParentSets& s = sets[i];
    if (s.positives.empty()) throw std::invalid_argument(fmt::format("video {}: empty positive set", i));
    std::vector<std::size_t> pos, den;
    for (std::size_t p : s.positives) pos.push_back(flat(i, p));
    for (const ParentNegative& n : s.negatives) {
      den.push_back(flat(i, n.summary));
      for (std::size_t cf : n.counterfactuals) den.push_back(flat(i, cf));
    }
    for (std::size_t cf : s.own_counterfactuals) den.push_back(flat(i, cf));
    if (den.empty()) throw std::invalid_argument(fmt::format("video {}: empty negative set", i));
    terms.push_back(ad::sub(ad::log_sum_exp(ad::gather(logits, den)), ad::log_sum_exp(ad::gather(logits, pos))));
  }
  return ad::sum(ad::concat(terms));
}

}  // namespace statecf::obj
