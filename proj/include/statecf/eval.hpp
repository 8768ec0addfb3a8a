#pragma once

// Segmentation, error-detection and representation metrics.
//
// Percentages are in [0, 100]; mAP is in [0, 1].

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "statecf/config.hpp"
#include "statecf/trainer.hpp"
#include "statecf/types.hpp"
#include "statecf/world.hpp"

namespace statecf::eval {

using Label = std::uint32_t;

struct Segment {
  Label label = 0;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive

  bool operator==(const Segment&) const = default;
};
using SegmentList = std::vector<Segment>;

// Maximal runs of equal labels.
SegmentList to_segments(std::span<const Label> labels);
std::vector<Label> expand(const SegmentList& segments);

double iou(const Segment& a, const Segment& b);

struct MatchCounts {
  std::size_t true_positives = 0;
  std::size_t predicted = 0;
  std::size_t ground_truth = 0;

  double f1() const;  // percentage
};

// Same-label pairs with IoU >= k are matched greedily, highest IoU first
// (ties: lower predicted index, then lower ground-truth index); every segment
// is matched at most once.
MatchCounts match_segments(const SegmentList& pred, const SegmentList& gt, double k);
double f1_at_k(const SegmentList& pred, const SegmentList& gt, double k);

double edit_score(const SegmentList& pred, const SegmentList& gt);
double frame_accuracy(std::span<const Label> pred, std::span<const Label> gt);

// Macro-balanced accuracy over {error, normal}.
double eda(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

struct ProbeOptions {
  std::size_t steps = 500;
  double lr = 0.1;
  std::uint64_t seed = 0;
};

// Multinomial linear classifier trained by full-batch gradient descent on the
// mean cross-entropy; returns macro F1 on the test rows. Classes are averaged
// over the union of test labels and predictions.
double phase_probe(const std::vector<Embedding>& train_x, std::span<const Label> train_y,
                   const std::vector<Embedding>& test_x, std::span<const Label> test_y,
                   const ProbeOptions& options = {});

// Macro F1 of predictions against labels, in percent.
double macro_f1(std::span<const Label> pred, std::span<const Label> gt);

// Precision averaged over the relevant ranks among the first k entries.
double average_precision_at(std::span<const std::uint8_t> ranked_relevance, std::size_t k = 10);

struct RetrievalResult {
  double map = 0.0;
  std::size_t queries_used = 0;
  std::size_t queries_excluded = 0;  // no relevant item anywhere in the gallery
};

// Gallery ranked by cosine similarity (ties: lower index first).
RetrievalResult map_at_10(const std::vector<Embedding>& queries, std::span<const Label> query_labels,
                          const std::vector<Embedding>& gallery, std::span<const Label> gallery_labels);

// Normalized mean embedding per label.
std::map<Label, Embedding> centroids(const std::vector<Embedding>& items, std::span<const Label> labels);

// Label of the most similar prototype (ties: smallest label).
Label nearest_prototype(const Embedding& x, const std::map<Label, Embedding>& prototypes);

// A frame is flagged when its clip's cosine to the prototype of the clip's
// predicted action falls below threshold. Returns one flag per frame.
std::vector<std::uint8_t> error_detect(const std::vector<Embedding>& clips, std::span<const Label> predicted_actions,
                                       const std::map<Label, Embedding>& prototypes, double threshold,
                                       std::size_t frames_per_clip);

// Threshold maximizing EDA over midpoints of the sorted scores (plus both
// ends). Lower frames-per-clip scores mean "more likely an error".
double choose_threshold(std::span<const double> clip_scores, std::span<const std::uint8_t> frame_truth,
                        std::size_t frames_per_clip);

// ---------------------------------------------------------------------------

struct MetricReport {
  std::map<std::string, double> values;
  std::map<std::string, std::string> metadata;

  bool operator==(const MetricReport&) const = default;
};

// Keys of every report, in output order.
std::span<const std::string_view> report_keys();

// "key=value" lines, values fixed with 6 decimals; metadata as "meta.key=value".
std::string to_text(const MetricReport& report);
MetricReport parse_report(std::string_view text);

struct Delta {
  std::string key;
  double a = 0.0;
  double b = 0.0;
};
// Throws ConfigError listing keys present in only one report.
std::vector<Delta> compare(const MetricReport& a, const MetricReport& b);

struct EvalData {
  const world::Dataset* train = nullptr;
  const world::Dataset* val = nullptr;
  const world::Dataset* test = nullptr;
};

// Full battery on the test split: phase probe, frame retrieval, segmentation,
// error detection (threshold from the validation split) and summary ranking.
MetricReport evaluate(const train::Model& model, const world::World& world, const EvalData& data,
                      const RunConfig& config);

// Share of videos whose embedding is closer to the true summary than to every
// stored counterfactual of it, in percent.
double ranking_accuracy(const train::Model& model, const world::World& world, const world::Dataset& videos);

// Per-action early/late probe on frame embeddings, macro F1 averaged over
// actions present in both splits.
double phase_f1(const train::Model& model, const world::Dataset& train, const world::Dataset& test,
                const ProbeOptions& options);

struct ErrorDetectionResult {
  double eda = 0.0;
  double threshold = 0.0;
};
ErrorDetectionResult error_detection(const train::Model& model, const world::World& world, const EvalData& data,
                                     double error_fraction, std::uint64_t seed);

}  // namespace statecf::eval
