#include "statecf/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "statecf/autodiff.hpp"
#include "statecf/rng.hpp"

namespace statecf::eval {

SegmentList to_segments(std::span<const Label> labels) {
  if (labels.empty()) throw std::invalid_argument("to_segments: empty labeling");
  SegmentList out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (out.empty() || out.back().label != labels[i]) {
      out.push_back({labels[i], i, i + 1});
    } else {
      out.back().end = i + 1;
    }
  }
  return out;
}

std::vector<Label> expand(const SegmentList& segments) {
  std::vector<Label> out;
  for (const auto& s : segments) out.insert(out.end(), s.end - s.start, s.label);
  return out;
}

double iou(const Segment& a, const Segment& b) {
  const std::size_t lo = std::max(a.start, b.start);
  const std::size_t hi = std::min(a.end, b.end);
  const double inter = hi > lo ? static_cast<double>(hi - lo) : 0.0;
  const double uni = static_cast<double>(std::max(a.end, b.end) - std::min(a.start, b.start));
  return inter / uni;
}

double MatchCounts::f1() const {
  if (true_positives == 0) return 0.0;
  const double p = static_cast<double>(true_positives) / static_cast<double>(predicted);
  const double r = static_cast<double>(true_positives) / static_cast<double>(ground_truth);
  return 100.0 * 2.0 * p * r / (p + r);
}

namespace {

std::size_t total_length(const SegmentList& s) { return s.empty() ? 0 : s.back().end; }

}  // namespace

MatchCounts match_segments(const SegmentList& pred, const SegmentList& gt, double k) {
  if (total_length(pred) != total_length(gt)) {
    throw std::invalid_argument(
        fmt::format("segment lists cover {} and {} frames", total_length(pred), total_length(gt)));
  }
  struct Pair {
    double iou;
    std::size_t p, g;
  };
  std::vector<Pair> pairs;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (pred[p].label != gt[g].label) continue;
      const double v = iou(pred[p], gt[g]);
      if (v >= k && v > 0.0) pairs.push_back({v, p, g});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  std::vector<bool> pred_used(pred.size()), gt_used(gt.size());
  MatchCounts c{0, pred.size(), gt.size()};
  for (const Pair& x : pairs) {
    if (pred_used[x.p] || gt_used[x.g]) continue;
    pred_used[x.p] = gt_used[x.g] = true;
    ++c.true_positives;
  }
  return c;
}

double f1_at_k(const SegmentList& pred, const SegmentList& gt, double k) { return match_segments(pred, gt, k).f1(); }

double edit_score(const SegmentList& pred, const SegmentList& gt) {
  if (pred.empty() || gt.empty()) throw std::invalid_argument("edit_score: empty segment list");
  std::vector<std::size_t> prev(gt.size() + 1), cur(gt.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= pred.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= gt.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (pred[i - 1].label == gt[j - 1].label ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  const double dist = static_cast<double>(prev[gt.size()]);
  return 100.0 * (1.0 - dist / static_cast<double>(std::max(pred.size(), gt.size())));
}

double frame_accuracy(std::span<const Label> pred, std::span<const Label> gt) {
  if (pred.size() != gt.size() || gt.empty()) {
    throw std::invalid_argument(fmt::format("frame_accuracy: lengths {} and {}", pred.size(), gt.size()));
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) same += pred[i] == gt[i];
  return 100.0 * static_cast<double>(same) / static_cast<double>(gt.size());
}

double eda(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("eda: length mismatch");
  std::size_t pos = 0, neg = 0, tp = 0, tn = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i]) {
      ++pos;
      tp += pred[i] != 0;
    } else {
      ++neg;
      tn += pred[i] == 0;
    }
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("eda: ground truth needs both error and normal frames");
  return 100.0 * (static_cast<double>(tp) / static_cast<double>(pos) + static_cast<double>(tn) / static_cast<double>(neg)) / 2.0;
}

double macro_f1(std::span<const Label> pred, std::span<const Label> gt) {
  if (pred.size() != gt.size() || gt.empty()) throw std::invalid_argument("macro_f1: length mismatch");
  std::set<Label> classes(gt.begin(), gt.end());
  classes.insert(pred.begin(), pred.end());
  double total = 0.0;
  for (Label c : classes) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (pred[i] == c && gt[i] == c) ++tp;
      else if (pred[i] == c) ++fp;
      else if (gt[i] == c) ++fn;
    }
    if (tp > 0) total += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  return 100.0 * total / static_cast<double>(classes.size());
}

double phase_probe(const std::vector<Embedding>& train_x, std::span<const Label> train_y,
                   const std::vector<Embedding>& test_x, std::span<const Label> test_y, const ProbeOptions& options) {
  if (train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
    throw std::invalid_argument("phase_probe: features and labels differ in count");
  }
  std::vector<Label> classes(train_y.begin(), train_y.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw std::invalid_argument("phase_probe: training labels hold a single class");
  if (test_x.empty()) throw std::invalid_argument("phase_probe: empty test set");

  const std::size_t n = train_x.size();
  const std::size_t d = train_x.front().size();
  const std::size_t c = classes.size();
  std::vector<double> flat;
  for (const auto& x : train_x) flat.insert(flat.end(), x.begin(), x.end());
  const ad::Tensor xs({n, d}, std::move(flat));
  std::vector<std::size_t> target;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cls = static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), train_y[i]) - classes.begin());
    target.push_back(i * c + cls);
  }

  Rng rng(options.seed);
  std::vector<double> w0(d * c);
  for (double& x : w0) x = rng.uniform(-0.01, 0.01);
  ad::Tensor w({d, c}, std::move(w0), true);
  ad::Tensor b = ad::Tensor::zeros({c}, true);
  for (std::size_t step = 0; step < options.steps; ++step) {
    ad::Tape tape;
    ad::Var wv = tape.leaf(w);
    ad::Var bv = tape.leaf(b);
    ad::Var logits = ad::add_row(ad::matmul(tape.constant(xs), wv), bv);
    std::vector<ad::Var> lse;
    for (std::size_t i = 0; i < n; ++i) lse.push_back(ad::log_sum_exp(ad::row(logits, i)));
    ad::Var loss = ad::sub(ad::mean(ad::concat(lse)), ad::mean(ad::gather(logits, target)));
    tape.backward(loss);
    auto update = [&](ad::Tensor& t) {
      std::vector<double> v(t.values().begin(), t.values().end());
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= options.lr * (*t.grad())[j];
      t = ad::Tensor(t.shape(), std::move(v), true);
    };
    update(w);
    update(b);
  }

  std::vector<Label> pred;
  for (const auto& x : test_x) {
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < d; ++j) s += x[j] * w.at(j, k);
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    pred.push_back(classes[best]);
  }
  return macro_f1(pred, test_y);
}

double average_precision_at(std::span<const std::uint8_t> ranked_relevance, std::size_t k) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < std::min(k, ranked_relevance.size()); ++r) {
    if (!ranked_relevance[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return hits ? sum / static_cast<double>(hits) : 0.0;
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

RetrievalResult map_at_10(const std::vector<Embedding>& queries, std::span<const Label> query_labels,
                          const std::vector<Embedding>& gallery, std::span<const Label> gallery_labels) {
  constexpr std::size_t k = 10;
  if (gallery.size() < k) throw std::invalid_argument(fmt::format("map_at_10: gallery has {} items", gallery.size()));
  if (queries.size() != query_labels.size() || gallery.size() != gallery_labels.size()) {
    throw std::invalid_argument("map_at_10: features and labels differ in count");
  }
  const std::set<Label> present(gallery_labels.begin(), gallery_labels.end());
  RetrievalResult out;
  double sum = 0.0;
  std::vector<std::size_t> order(gallery.size());
  std::vector<double> sims(gallery.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (!present.count(query_labels[q])) {
      ++out.queries_excluded;
      continue;
    }
    for (std::size_t g = 0; g < gallery.size(); ++g) sims[g] = cosine(queries[q], gallery[g]);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](std::size_t a, std::size_t b) {
      return sims[a] != sims[b] ? sims[a] > sims[b] : a < b;
    });
    std::uint8_t rel[k];
    for (std::size_t r = 0; r < k; ++r) rel[r] = gallery_labels[order[r]] == query_labels[q];
    sum += average_precision_at(rel, k);
    ++out.queries_used;
  }
  out.map = out.queries_used ? sum / static_cast<double>(out.queries_used) : 0.0;
  return out;
}

std::map<Label, Embedding> centroids(const std::vector<Embedding>& items, std::span<const Label> labels) {
  if (items.size() != labels.size()) throw std::invalid_argument("centroids: count mismatch");
  std::map<Label, Embedding> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& acc = out[labels[i]];
    if (acc.empty()) acc.assign(items[i].size(), 0.0);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += items[i][j];
  }
  for (auto& [label, v] : out) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) throw std::domain_error(fmt::format("centroid of label {} is zero", label));
    for (double& x : v) x /= n;
  }
  return out;
}

Label nearest_prototype(const Embedding& x, const std::map<Label, Embedding>& prototypes) {
  if (prototypes.empty()) throw std::invalid_argument("nearest_prototype: no prototypes");
  Label best = prototypes.begin()->first;
  double best_sim = -INFINITY;
  for (const auto& [label, p] : prototypes) {
    const double s = cosine(x, p);
    if (s > best_sim) {
      best_sim = s;
      best = label;
    }
  }
  return best;
}

std::vector<std::uint8_t> error_detect(const std::vector<Embedding>& clips, std::span<const Label> predicted_actions,
                                       const std::map<Label, Embedding>& prototypes, double threshold,
                                       std::size_t frames_per_clip) {
  if (clips.size() != predicted_actions.size()) throw std::invalid_argument("error_detect: count mismatch");
  std::vector<std::uint8_t> flags;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    auto it = prototypes.find(predicted_actions[c]);
    if (it == prototypes.end()) {
      throw std::out_of_range(fmt::format("error_detect: no prototype for action {}", predicted_actions[c]));
    }
    const std::uint8_t flag = cosine(clips[c], it->second) < threshold;
    flags.insert(flags.end(), frames_per_clip, flag);
  }
  return flags;
}

double choose_threshold(std::span<const double> clip_scores, std::span<const std::uint8_t> frame_truth,
                        std::size_t frames_per_clip) {
  if (clip_scores.size() * frames_per_clip != frame_truth.size()) {
    throw std::invalid_argument("choose_threshold: scores and frames disagree");
  }
  std::vector<double> sorted(clip_scores.begin(), clip_scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> candidates{sorted.front() - 1e-9};
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
  candidates.push_back(sorted.back() + 1e-9);

  double best_t = candidates.front();
  double best = -1.0;
  std::vector<std::uint8_t> pred(frame_truth.size());
  for (double t : candidates) {
    for (std::size_t c = 0; c < clip_scores.size(); ++c) {
      std::fill_n(pred.begin() + static_cast<std::ptrdiff_t>(c * frames_per_clip), frames_per_clip,
                  static_cast<std::uint8_t>(clip_scores[c] < t));
    }
    const double score = eda(pred, frame_truth);
    if (score > best) {
      best = score;
      best_t = t;
    }
  }
  return best_t;
}

// ---------------------------------------------------------------------------

std::span<const std::string_view> report_keys() {
  static constexpr std::string_view keys[] = {
      "phase_f1", "map_at_10", "seg_f1_10", "seg_f1_25", "seg_f1_50", "seg_edit",
      "seg_acc",  "eda",       "eda_threshold", "ranking_accuracy"};
  return keys;
}

std::string to_text(const MetricReport& report) {
  std::string out;
  std::set<std::string> done;
  for (std::string_view k : report_keys()) {
    auto it = report.values.find(std::string(k));
    if (it == report.values.end()) continue;
    out += fmt::format("{}={:.6f}\n", k, it->second);
    done.insert(it->first);
  }
  for (const auto& [k, v] : report.values) {
    if (!done.count(k)) out += fmt::format("{}={:.6f}\n", k, v);
  }
  for (const auto& [k, v] : report.metadata) out += fmt::format("meta.{}={}\n", k, v);
  return out;
}

MetricReport parse_report(std::string_view text) {
  MetricReport r;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw ConfigError(fmt::format("report line {}: expected key=value", line_no), line_no);
    }
    const std::string key(line.substr(0, eq));
    const std::string_view value = line.substr(eq + 1);
    if (key.starts_with("meta.")) {
      r.metadata[key.substr(5)] = std::string(value);
      continue;
    }
    double v = 0.0;
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) {
      throw ConfigError(fmt::format("report line {}: '{}' is not a number", line_no, key), line_no, key);
    }
    if (!r.values.emplace(key, v).second) {
      throw ConfigError(fmt::format("report line {}: duplicate key '{}'", line_no, key), line_no, key);
    }
  }
  return r;
}

std::vector<Delta> compare(const MetricReport& a, const MetricReport& b) {
  std::vector<std::string> missing;
  for (const auto& [k, v] : a.values) {
    if (!b.values.count(k)) missing.push_back(k + " (only in first)");
  }
  for (const auto& [k, v] : b.values) {
    if (!a.values.count(k)) missing.push_back(k + " (only in second)");
  }
  if (!missing.empty()) throw ConfigError(fmt::format("report keys differ: {}", fmt::join(missing, ", ")));
  // Report order first, then any extra keys alphabetically.
  std::vector<Delta> out;
  for (std::string_view key : report_keys()) {
    const auto it = a.values.find(std::string(key));
    if (it != a.values.end()) out.push_back({it->first, it->second, b.values.at(it->first)});
  }
  for (const auto& [k, v] : a.values) {
    if (std::find(report_keys().begin(), report_keys().end(), k) == report_keys().end()) {
      out.push_back({k, v, b.values.at(k)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Embedded {
  std::vector<train::VideoEmbeddings> videos;
};

Embedded embed_all(const train::Model& model, const world::Dataset& data) {
  Embedded e;
  for (const auto& r : data) e.videos.push_back(train::embed_video(model, r.video));
  return e;
}

std::map<Label, Embedding> action_prototypes(const world::Dataset& data, const Embedded& emb) {
  std::vector<Embedding> clips;
  std::vector<Label> labels;
  for (std::size_t v = 0; v < data.size(); ++v) {
    for (std::size_t c = 0; c < data[v].activity.steps.size(); ++c) {
      clips.push_back(emb.videos[v].clips[c]);
      labels.push_back(data[v].activity.steps[c].action);
    }
  }
  return centroids(clips, labels);
}

// Clip scores and frame truth of a split after corrupting a share of its clips.
void corrupted_scores(const train::Model& model, const world::World& world, const world::Dataset& data,
                      const std::map<Label, Embedding>& protos, double fraction, std::uint64_t seed,
                      std::vector<Embedding>& clips, std::vector<Label>& predicted, std::vector<double>& scores,
                      std::vector<std::uint8_t>& truth) {
  for (const auto& r : data) {
    const std::uint64_t vseed = derive_seed(seed, r.activity.id);
    const auto chosen = world::choose_error_clips(r.video.num_clips(), fraction, derive_seed(vseed, "clips"));
    const world::VideoSample bad = world::inject_errors(world, r.video, r.activity, chosen, derive_seed(vseed, "render"));
    const auto emb = train::embed_video(model, bad);
    for (const auto& c : emb.clips) {
      const Label a = nearest_prototype(c, protos);
      clips.push_back(c);
      predicted.push_back(a);
      scores.push_back(cosine(c, protos.at(a)));
    }
    truth.insert(truth.end(), bad.error_flags.begin(), bad.error_flags.end());
  }
}

}  // namespace

double ranking_accuracy(const train::Model& model, const world::World& world, const world::Dataset& videos) {
  if (videos.empty()) throw std::invalid_argument("ranking_accuracy: no videos");
  std::size_t wins = 0;
  for (const auto& r : videos) {
    const Embedding v = train::embed_video(model, r.video).video;
    const double pos = cosine(v, world.summary_text(r.activity.summary_tokens));
    bool win = true;
    for (const auto& cf : r.cfs) win = win && pos > cosine(v, world.summary_text(cf.tokens));
    wins += win;
  }
  return 100.0 * static_cast<double>(wins) / static_cast<double>(videos.size());
}

double phase_f1(const train::Model& model, const world::Dataset& train, const world::Dataset& test,
                const ProbeOptions& options) {
  struct Split {
    std::map<Label, std::vector<Embedding>> x;
    std::map<Label, std::vector<Label>> y;
  };
  auto collect = [&](const world::Dataset& data) {
    Split s;
    for (const auto& r : data) {
      const auto emb = train::embed_video(model, r.video);
      const std::size_t k = r.video.frames_per_clip;
      for (std::size_t c = 0; c < r.video.num_clips(); ++c) {
        const Label a = r.activity.steps[c].action;
        for (std::size_t f = 0; f < k; ++f) {
          s.x[a].push_back(emb.frames[c * k + f]);
          s.y[a].push_back(f < k / 2 ? 0 : 1);
        }
      }
    }
    return s;
  };
  const Split tr = collect(train);
  const Split te = collect(test);
  double total = 0.0;
  std::size_t used = 0;
  for (const auto& [a, xs] : te.x) {
    auto it = tr.x.find(a);
    if (it == tr.x.end()) continue;
    ProbeOptions o = options;
    o.seed = derive_seed(options.seed, a);
    total += phase_probe(it->second, tr.y.at(a), xs, te.y.at(a), o);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("phase_f1: no action appears in both splits");
  return total / static_cast<double>(used);
}

ErrorDetectionResult error_detection(const train::Model& model, const world::World& world, const EvalData& data,
                                     double error_fraction, std::uint64_t seed) {
  const auto protos = action_prototypes(*data.train, embed_all(model, *data.train));
  std::vector<Embedding> clips;
  std::vector<Label> predicted;
  std::vector<double> scores;
  std::vector<std::uint8_t> truth;
  const std::size_t k = data.train->front().video.frames_per_clip;
  corrupted_scores(model, world, *data.val, protos, error_fraction, seed, clips, predicted, scores, truth);
  ErrorDetectionResult out;
  out.threshold = choose_threshold(scores, truth, k);

  clips.clear();
  predicted.clear();
  scores.clear();
  truth.clear();
  corrupted_scores(model, world, *data.test, protos, error_fraction, seed, clips, predicted, scores, truth);
  out.eda = eda(error_detect(clips, predicted, protos, out.threshold, k), truth);
  return out;
}

MetricReport evaluate(const train::Model& model, const world::World& world, const EvalData& data,
                      const RunConfig& config) {
  if (!data.train || !data.val || !data.test) throw std::invalid_argument("evaluate: missing split");
  MetricReport report;
  const Embedded train_emb = embed_all(model, *data.train);
  const Embedded test_emb = embed_all(model, *data.test);

  ProbeOptions probe{config.eval.probe_steps, config.eval.probe_lr, derive_seed(config.seed, "probe")};
  report.values["phase_f1"] = phase_f1(model, *data.train, *data.test, probe);

  // Frame retrieval: test frames against training frames, same visible state.
  std::vector<Embedding> gallery, queries;
  std::vector<Label> gallery_labels, query_labels;
  auto frames_of = [](const world::Dataset& d, const Embedded& e, std::vector<Embedding>& x, std::vector<Label>& y) {
    for (std::size_t v = 0; v < d.size(); ++v) {
      const std::size_t k = d[v].video.frames_per_clip;
      for (std::size_t c = 0; c < d[v].video.num_clips(); ++c) {
        const auto& step = d[v].activity.steps[c];
        for (std::size_t f = 0; f < k; ++f) {
          x.push_back(e.videos[v].frames[c * k + f]);
          y.push_back(f < k / 2 ? step.before_state : step.after_state);
        }
      }
    }
  };
  frames_of(*data.train, train_emb, gallery, gallery_labels);
  frames_of(*data.test, test_emb, queries, query_labels);
  const RetrievalResult ret = map_at_10(queries, query_labels, gallery, gallery_labels);
  report.values["map_at_10"] = ret.map;

  // Segmentation by nearest action prototype of each clip.
  const auto protos = action_prototypes(*data.train, train_emb);
  MatchCounts counts[3];
  const double ks[3] = {0.10, 0.25, 0.50};
  double edit_sum = 0.0;
  std::size_t correct = 0, frames = 0;
  for (std::size_t v = 0; v < data.test->size(); ++v) {
    const auto& rec = (*data.test)[v];
    std::vector<Label> pred;
    for (const auto& c : test_emb.videos[v].clips) pred.insert(pred.end(), rec.video.frames_per_clip, nearest_prototype(c, protos));
    const std::vector<Label> gt(rec.video.labels.begin(), rec.video.labels.end());
    const SegmentList ps = to_segments(pred), gs = to_segments(gt);
    for (int i = 0; i < 3; ++i) {
      const MatchCounts m = match_segments(ps, gs, ks[i]);
      counts[i].true_positives += m.true_positives;
      counts[i].predicted += m.predicted;
      counts[i].ground_truth += m.ground_truth;
    }
    edit_sum += edit_score(ps, gs);
    for (std::size_t f = 0; f < gt.size(); ++f) correct += pred[f] == gt[f];
    frames += gt.size();
  }
  report.values["seg_f1_10"] = counts[0].f1();
  report.values["seg_f1_25"] = counts[1].f1();
  report.values["seg_f1_50"] = counts[2].f1();
  report.values["seg_edit"] = edit_sum / static_cast<double>(data.test->size());
  report.values["seg_acc"] = 100.0 * static_cast<double>(correct) / static_cast<double>(frames);

  const ErrorDetectionResult ed =
      error_detection(model, world, data, config.eval.error_fraction, derive_seed(config.seed, "errors"));
  report.values["eda"] = ed.eda;
  report.values["eda_threshold"] = ed.threshold;
  report.values["ranking_accuracy"] = ranking_accuracy(model, world, *data.test);

  report.metadata["seed"] = fmt::format("{}", config.seed);
  report.metadata["map_queries_excluded"] = fmt::format("{}", ret.queries_excluded);
  return report;
}

}  // namespace statecf::eval
