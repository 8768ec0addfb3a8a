#include "statecf/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>

#include <fmt/format.h>

#include "statecf/encoders.hpp"
#include "statecf/rng.hpp"

namespace statecf::gc {

namespace {

constexpr std::size_t kInput = 6;
constexpr std::size_t kHidden = 5;
constexpr std::size_t kEmbed = 4;
constexpr std::size_t kFrames = 4;
constexpr std::size_t kCounterfactuals = 2;

using ad::Var;

std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

std::vector<double> unit_rows(Rng& rng, std::size_t rows, std::size_t d) {
  std::vector<double> v = normals(rng, rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < d; ++c) n += v[r * d + c] * v[r * d + c];
    n = std::sqrt(n);
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] /= n;
  }
  return v;
}

enc::FrameEncoder::Bound frame_bound(std::span<const Var> leaves) {
  return {leaves[0], leaves[1], leaves[2], leaves[3]};
}

enc::Aggregator::Bound aggregator_bound(std::span<const Var> leaves, const ad::Tensor& positions) {
  enc::Aggregator::Bound b{leaves[0], leaves[1], leaves[2], leaves[3], leaves[4], leaves[5], leaves[6], leaves[7]};
  b.positions = &positions;
  return b;
}

// One random problem per seed; every builder reads from it.
struct Instance {
  enc::FrameEncoder frame;
  enc::Aggregator aggregator;
  std::vector<double> clip_frames;    // kFrames x kInput
  std::vector<double> state_texts;    // (2 + W) x kEmbed
  std::vector<double> batch_frames;   // 3 clips
  std::vector<double> narrations;     // 3 x kEmbed
  std::vector<double> video_frames;   // 3 videos x 3 clips
  std::vector<double> summaries;      // 3 summaries then 3 x W counterfactuals
  std::vector<double> agg_clips;      // 4 x kEmbed
  std::vector<double> agg_probe;      // kEmbed

  explicit Instance(std::uint64_t seed) {
    enc::EncoderDims dims{kInput, kHidden, kEmbed, 8, true};
    frame = enc::FrameEncoder(dims, derive_seed(seed, "frame"));
    aggregator = enc::Aggregator(dims, derive_seed(seed, "aggregator"));
    Rng rng(derive_seed(seed, "inputs"));
    clip_frames = normals(rng, kFrames * kInput);
    state_texts = unit_rows(rng, 2 + kCounterfactuals, kEmbed);
    batch_frames = normals(rng, 3 * kFrames * kInput);
    narrations = unit_rows(rng, 3, kEmbed);
    video_frames = normals(rng, 9 * kFrames * kInput);
    summaries = unit_rows(rng, 3 + 3 * kCounterfactuals, kEmbed);
    agg_clips = unit_rows(rng, 4, kEmbed);
    agg_probe = normals(rng, kEmbed);
  }
};

Var frame_term(const Instance& in, const obj::LossParams& loss, ad::Tape& tape, std::span<const Var> leaves,
               obj::FrameRole role) {
  Var frames = enc::encode_frames(frame_bound(leaves), tape.constant({kFrames, kInput}, in.clip_frames));
  Var texts = tape.constant({2 + kCounterfactuals, kEmbed}, in.state_texts);
  return obj::frame_state_loss(frames, texts, obj::build_frame_sets(kFrames, role, kCounterfactuals), loss);
}

Var v2t_term(const Instance& in, const obj::LossParams& loss, ad::Tape& tape, std::span<const Var> leaves) {
  Var frames = enc::encode_frames(frame_bound(leaves), tape.constant({3 * kFrames, kInput}, in.batch_frames));
  Var clips = enc::pool_clips(frames, kFrames);
  return obj::clip_v2t_loss(clips, tape.constant({3, kEmbed}, in.narrations), loss);
}

Var parent_term(const Instance& in, const obj::LossParams& loss, ad::Tape& tape, std::span<const Var> leaves) {
  Var frames = enc::encode_frames(frame_bound(leaves.subspan(0, 4)), tape.constant({9 * kFrames, kInput}, in.video_frames));
  Var clips = enc::pool_clips(frames, kFrames);
  const auto agg = aggregator_bound(leaves.subspan(4), in.aggregator.positions());
  std::vector<Var> videos;
  for (std::size_t v = 0; v < 3; ++v) videos.push_back(enc::aggregate_video(agg, ad::slice_rows(clips, 3 * v, 3 * v + 3)));
  std::vector<obj::ParentSets> sets(3);
  auto cf_rows = [](std::size_t v) {
    std::vector<std::size_t> r;
    for (std::size_t w = 0; w < kCounterfactuals; ++w) r.push_back(3 + v * kCounterfactuals + w);
    return r;
  };
  for (std::size_t i = 0; i < 3; ++i) {
    sets[i].positives = {i};
    sets[i].own_counterfactuals = cf_rows(i);
    for (std::size_t j = 0; j < 3; ++j) {
      if (j != i) sets[i].negatives.push_back({j, cf_rows(j)});
    }
  }
  return obj::parent_loss(ad::stack_rows(videos), tape.constant({3 + 3 * kCounterfactuals, kEmbed}, in.summaries),
                          sets, loss);
}

struct Component {
  std::string name;
  bool frame = false;
  bool aggregator = false;
  std::function<Var(const Instance&, ad::Tape&, std::span<const Var>)> build;
};

std::vector<Component> components(const obj::LossParams& loss) {
  using R = obj::FrameRole;
  return {
      {"before", true, false,
       [loss](const Instance& in, ad::Tape& t, std::span<const Var> l) { return frame_term(in, loss, t, l, R::kBefore); }},
      {"after", true, false,
       [loss](const Instance& in, ad::Tape& t, std::span<const Var> l) { return frame_term(in, loss, t, l, R::kAfter); }},
      {"v2t", true, false,
       [loss](const Instance& in, ad::Tape& t, std::span<const Var> l) { return v2t_term(in, loss, t, l); }},
      {"child", true, false,
       [loss](const Instance& in, ad::Tape& t, std::span<const Var> l) {
         return obj::child_loss(v2t_term(in, loss, t, l), frame_term(in, loss, t, l, R::kBefore),
                                frame_term(in, loss, t, l, R::kAfter), loss);
       }},
      {"parent", true, true,
       [loss](const Instance& in, ad::Tape& t, std::span<const Var> l) { return parent_term(in, loss, t, l); }},
      {"aggregator", false, true,
       [](const Instance& in, ad::Tape& t, std::span<const Var> l) {
         Var v = enc::aggregate_video(aggregator_bound(l, in.aggregator.positions()),
                                      t.constant({4, kEmbed}, in.agg_clips));
         return ad::sum(ad::mul(v, t.constant({kEmbed}, in.agg_probe)));
       }},
  };
}

// ---------------------------------------------------------------------------
// Single-op checks used to name the op behind a failing component.

struct OpCheck {
  ad::Op op;
  std::vector<ad::Shape> shapes;
  bool positive = false;
  std::function<Var(ad::Tape&, std::span<const Var>)> build;
};

Var weighted(ad::Tape& t, Var x) {
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i % 7) - 0.05 * static_cast<double>(i);
  return ad::sum(ad::mul(x, t.constant(x.shape(), w)));
}

std::vector<OpCheck> op_checks() {
  using ad::Op;
  using S = std::vector<ad::Shape>;
  using L = std::span<const Var>;
  return {
      {Op::kSum, S{{3}}, false, [](ad::Tape&, L l) { return ad::sum(l[0]); }},
      {Op::kMul, S{{3}, {3}}, false, [](ad::Tape&, L l) { return ad::sum(ad::mul(l[0], l[1])); }},
      {Op::kMatMul, S{{2, 3}, {3, 2}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::matmul(l[0], l[1])); }},
      {Op::kTranspose, S{{2, 3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::transpose(l[0])); }},
      {Op::kAdd, S{{3}, {3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::add(l[0], l[1])); }},
      {Op::kSub, S{{3}, {3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::sub(l[0], l[1])); }},
      {Op::kMulScalar, S{{3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::mul_scalar(l[0], 1.7)); }},
      {Op::kAddScalar, S{{3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::add_scalar(l[0], 0.4)); }},
      {Op::kExp, S{{3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::exp(l[0])); }},
      {Op::kLog, S{{3}}, true, [](ad::Tape& t, L l) { return weighted(t, ad::log(l[0])); }},
      {Op::kTanh, S{{3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::tanh(l[0])); }},
      {Op::kMean, S{{4}}, false, [](ad::Tape&, L l) { return ad::mean(l[0]); }},
      {Op::kLogSumExp, S{{4}}, false, [](ad::Tape&, L l) { return ad::log_sum_exp(l[0]); }},
      {Op::kSoftmax, S{{4}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::softmax(l[0])); }},
      {Op::kSoftmaxRows, S{{2, 3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::softmax_rows(l[0])); }},
      {Op::kL2Normalize, S{{4}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::l2_normalize(l[0])); }},
      {Op::kL2NormalizeRows, S{{2, 3}}, false,
       [](ad::Tape& t, L l) { return weighted(t, ad::l2_normalize_rows(l[0])); }},
      {Op::kAddRow, S{{2, 3}, {3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::add_row(l[0], l[1])); }},
      {Op::kMeanRows, S{{3, 2}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::mean_rows(l[0])); }},
      {Op::kGather, S{{5}}, false,
       [](ad::Tape& t, L l) {
         const std::size_t idx[] = {4, 0, 4, 2};
         return weighted(t, ad::gather(l[0], idx));
       }},
      {Op::kConcat, S{{2}, {3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::concat(l)); }},
      {Op::kStackRows, S{{3}, {3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::stack_rows(l)); }},
      {Op::kSliceRows, S{{4, 2}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::slice_rows(l[0], 1, 3)); }},
      {Op::kReshape, S{{2, 3}}, false, [](ad::Tape& t, L l) { return weighted(t, ad::reshape(l[0], {3, 2})); }},
  };
}

bool op_check_passes(const OpCheck& check, const Options& options) {
  Rng rng(derive_seed(options.root_seed, ad::op_name(check.op)));
  std::vector<ad::Tensor> tensors;
  for (const auto& shape : check.shapes) {
    std::vector<double> v = normals(rng, ad::shape_size(shape));
    if (check.positive) {
      for (double& x : v) x = 0.5 + std::abs(x);
    }
    tensors.emplace_back(shape, std::move(v), true);
  }
  std::vector<ad::Tensor*> params;
  for (auto& t : tensors) params.push_back(&t);
  ad::GradCheckOptions o;
  o.step = options.step;
  o.tape.corrupt_gradient = options.corrupt_gradient;
  return ad::grad_check(check.build, params, o).max_rel_error < options.tolerance;
}

std::vector<std::string> localize(const Options& options) {
  std::vector<std::string> failing;
  const auto checks = op_checks();
  // Every other check reduces through sum and mul; those come first.
  for (std::size_t i = 0; i < checks.size(); ++i) {
    if (!op_check_passes(checks[i], options)) failing.emplace_back(ad::op_name(checks[i].op));
    if (i == 1 && !failing.empty()) return failing;
  }
  return failing;
}

}  // namespace

bool Report::passed() const {
  for (const auto& c : components) {
    if (!c.passed) return false;
  }
  return true;
}

std::vector<std::string> component_names() {
  std::vector<std::string> names;
  for (const auto& c : components({})) names.push_back(c.name);
  return names;
}

Report run(const obj::LossParams& loss, const Options& options) {
  const auto start = std::chrono::steady_clock::now();
  Report report;
  for (const Component& comp : components(loss)) {
    ComponentResult res;
    res.name = comp.name;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      const std::uint64_t seed = derive_seed(options.root_seed, s);
      Instance in(seed);
      std::vector<ad::Tensor*> params;
      if (comp.frame) {
        for (ad::Tensor* p : in.frame.parameters()) params.push_back(p);
      }
      if (comp.aggregator) {
        for (ad::Tensor* p : in.aggregator.parameters()) params.push_back(p);
      }
      ad::GradCheckOptions o;
      o.step = options.step;
      o.max_probes_per_tensor = options.probes_per_tensor;
      o.probe_seed = derive_seed(seed, comp.name);
      o.tape.corrupt_gradient = options.corrupt_gradient;
      auto builder = [&](ad::Tape& t, std::span<const Var> leaves) { return comp.build(in, t, leaves); };
      const ad::GradCheckResult r = ad::grad_check(builder, params, o);
      res.probes += r.probes;
      if (r.max_rel_error >= res.max_rel_error) {
        res.max_rel_error = r.max_rel_error;
        res.worst_seed = s;
      }
    }
    res.passed = res.max_rel_error < options.tolerance;
    report.components.push_back(res);
  }
  if (!report.passed()) report.suspect_ops = localize(options);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string to_text(const Report& report) {
  std::string out;
  for (const auto& c : report.components) {
    out += fmt::format("{:<11} {}  max_rel_error={:.3e}  probes={}  worst_seed={}\n", c.name,
                       c.passed ? "ok  " : "FAIL", c.max_rel_error, c.probes, c.worst_seed);
  }
  if (!report.suspect_ops.empty()) out += fmt::format("suspect ops: {}\n", fmt::join(report.suspect_ops, ", "));
  out += fmt::format("{} in {:.2f} s\n", report.passed() ? "passed" : "FAILED", report.seconds);
  return out;
}

}  // namespace statecf::gc
