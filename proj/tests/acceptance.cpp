// Acceptance run: one PASS/FAIL line per criterion C1..C7, then the measured
// numbers. Exit status is 0 only when every criterion passes.
//
//   acceptance [config]   (default: configs/acceptance.cfg)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "oracles.hpp"
#include "statecf/config.hpp"
#include "statecf/eval.hpp"
#include "statecf/gradcheck.hpp"
#include "statecf/rng.hpp"
#include "statecf/trainer.hpp"

using namespace statecf;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
  std::string id;
  std::string title;
  bool passed = true;
  std::vector<std::string> notes;

  void check(bool ok, std::string note) {
    passed = passed && ok;
    notes.push_back(fmt::format("{} {}", ok ? "  ok " : "  BAD", note));
  }
};

double vec_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::string checkpoint_bytes(const train::Trainer& t) {
  std::ostringstream out;
  t.save(out);
  return out.str();
}

// ---------------------------------------------------------------------------

Verdict c1(const RunConfig& config) {
  Verdict v{"C1", "gradient correctness"};
  gc::Options o;
  o.seeds = 20;
  const gc::Report r = gc::run(config.loss, o);
  for (const auto& c : r.components) {
    v.check(c.max_rel_error < 1e-4, fmt::format("{:<10} max rel error {:.3e} over {} probes", c.name,
                                                c.max_rel_error, c.probes));
  }
  v.check(r.seconds < 30.0, fmt::format("runtime {:.2f} s (< 30 s)", r.seconds));
  return v;
}

Verdict c2() {
  Verdict v{"C2", "loss identities"};
  obj::LossParams params;
  {
    ad::Tape tape;
    ad::Var frames = tape.constant({1, 2}, {0.6, 0.8});
    ad::Var texts = tape.constant({2, 2}, {0.8, 0.6, 0.8, 0.6});
    obj::ContrastSets s;
    s.anchor = 0;
    s.positives = {obj::EmbeddingRef::text(0)};
    s.negatives = {obj::EmbeddingRef::text(1)};
    const std::vector<obj::ContrastSets> sets{s};
    params.denominator_mode = obj::DenominatorMode::kNegativesOnly;
    const double a = obj::frame_state_loss(frames, texts, sets, params).item();
    v.check(std::abs(a) < 1e-12, fmt::format("frame loss, equal logits, negatives_only = {:.3e}", a));
    params.denominator_mode = obj::DenominatorMode::kNegativesPlusPositive;
    const double b = obj::frame_state_loss(frames, texts, sets, params).item();
    v.check(std::abs(b - std::numbers::ln2) < 1e-12,
            fmt::format("frame loss, equal logits, negatives_plus_positive - ln 2 = {:.3e}", b - std::numbers::ln2));
  }
  {
    params = {};
    ad::Tape tape;
    const std::size_t batch = 5;
    std::vector<double> rows;
    for (std::size_t i = 0; i < batch; ++i) rows.insert(rows.end(), {0.0, 1.0, 0.0});
    ad::Var m = tape.constant({batch, 3}, rows);
    const double l = obj::clip_v2t_loss(m, m, params).item();
    v.check(std::abs(l - std::log(5.0)) < 1e-12, fmt::format("v2t loss, uniform similarity - ln 5 = {:.3e}",
                                                             l - std::log(5.0)));
  }
  {
    ad::Tape tape;
    ad::Var video = tape.constant({1, 2}, {1, 0});
    ad::Var texts = tape.constant({3, 2}, {0, 1, 0, 1, 0, -1});
    obj::ParentSets s;
    s.positives = {0};
    s.negatives = {obj::ParentNegative{1, {}}};
    s.own_counterfactuals = {2};
    const std::vector<obj::ParentSets> sets{s};
    const double l = obj::parent_loss(video, texts, sets, params).item();
    v.check(std::abs(l - std::numbers::ln2) < 1e-12,
            fmt::format("parent loss, 1 pos / 1 neg / 1 cf - ln 2 = {:.3e}", l - std::numbers::ln2));
  }
  {
    // With lambda zero the child loss and its gradients are the v2t ones, bit for bit.
    RunConfig c;
    c.seed = 3;
    c.data.num_train = 8;
    c.loss.lambda_state = 0.0;
    c.sync();
    const world::World w(c.data.world);
    const world::Dataset train = world::generate_split(w, c.data, "train", 1);
    train::Trainer t(w, train, c);
    const train::ChildBatch cb = t.child_batch(1);
    std::map<std::string, double> comps;
    const double total = t.child_loss(cb, &comps);
    std::vector<std::vector<double>> grads;
    for (const ad::Tensor* p : t.model().frame().parameters()) grads.push_back(*p->grad());

    train::Model copy = t.model();
    ad::Tape tape;
    const auto fb = copy.frame().bind(tape);
    std::vector<double> flat, text;
    for (const auto& it : cb.items) {
      const auto& clip = train[it.video].video.clips[it.clip];
      flat.insert(flat.end(), clip.begin(), clip.end());
      const auto n = w.narration_text(train[it.video].activity.steps[it.clip].action);
      text.insert(text.end(), n.begin(), n.end());
    }
    const std::size_t k = c.data.frames_per_clip;
    ad::Var clips = enc::pool_clips(
        enc::encode_frames(fb, tape.constant({cb.items.size() * k, c.data.world.input_dim}, flat)), k);
    ad::Var loss = obj::clip_v2t_loss(clips, tape.constant({cb.items.size(), c.model.embed_dim}, text), c.loss);
    for (ad::Tensor* p : copy.parameters()) p->clear_grad();
    tape.backward(loss);
    bool same = loss.item() == total;
    const auto ref = copy.frame().parameters();
    for (std::size_t i = 0; i < ref.size(); ++i) same = same && *ref[i]->grad() == grads[i];
    v.check(same, "lambda = 0: child loss and gradients equal the v2t ones bitwise");
  }
  return v;
}

Verdict c5() {
  Verdict v{"C5", "metric oracle equivalence"};
  Rng rng(2024);
  const double ks[3] = {0.10, 0.25, 0.50};
  std::size_t f1_mismatch = 0, edit_mismatch = 0, chain_broken = 0;
  auto random_labels = [&](std::size_t t, std::size_t alphabet) {
    const std::size_t runs = 1 + rng.below(std::min<std::size_t>(6, t));
    std::vector<std::size_t> cuts(t - 1);
    std::iota(cuts.begin(), cuts.end(), std::size_t{1});
    rng.shuffle(std::span<std::size_t>(cuts));
    cuts.resize(runs - 1);
    std::sort(cuts.begin(), cuts.end());
    cuts.push_back(t);
    std::vector<eval::Label> out;
    eval::Label prev = static_cast<eval::Label>(alphabet);
    std::size_t start = 0;
    for (std::size_t end : cuts) {
      eval::Label l;
      do {
        l = static_cast<eval::Label>(rng.below(alphabet));
      } while (l == prev);
      out.insert(out.end(), end - start, l);
      prev = l;
      start = end;
    }
    return out;
  };
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = 2 + rng.below(24);
    const std::size_t alphabet = 2 + rng.below(3);
    const auto pred = random_labels(t, alphabet);
    const auto gt = random_labels(t, alphabet);
    const auto ps = eval::to_segments(pred), gs = eval::to_segments(gt);
    double f[3];
    for (int i = 0; i < 3; ++i) {
      f[i] = eval::f1_at_k(ps, gs, ks[i]);
      if (f[i] != oracle::segment_f1(pred, gt, ks[i])) ++f1_mismatch;
    }
    if (!(f[2] <= f[1] && f[1] <= f[0])) ++chain_broken;
    if (eval::edit_score(ps, gs) != oracle::segment_edit(pred, gt)) ++edit_mismatch;
  }
  v.check(f1_mismatch == 0, fmt::format("F1@{{10,25,50}} vs exhaustive oracle: {} mismatches in 3000", f1_mismatch));
  v.check(edit_mismatch == 0, fmt::format("edit score vs Levenshtein oracle: {} mismatches in 1000", edit_mismatch));
  v.check(chain_broken == 0, fmt::format("F1@50 <= F1@25 <= F1@10 broken on {} instances", chain_broken));

  const double ap1 = eval::average_precision_at(std::vector<std::uint8_t>{1, 0, 1}, 10);
  const double ap2 = eval::average_precision_at(std::vector<std::uint8_t>{0, 1, 1, 0, 1}, 10);
  v.check(std::abs(ap1 - (1.0 + 2.0 / 3.0) / 2.0) < 1e-9, fmt::format("AP of [1,0,1] = {:.12f}", ap1));
  v.check(std::abs(ap2 - (1.0 / 2.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0) < 1e-9,
          fmt::format("AP of [0,1,1,0,1] = {:.12f}", ap2));
  // Gallery at 0, 10, ..., 90 degrees; queries at 0 and 90 degrees.
  std::vector<Embedding> gallery;
  for (int i = 0; i < 10; ++i) {
    const double a = i * std::numbers::pi / 18.0;
    gallery.push_back({std::cos(a), std::sin(a)});
  }
  const std::vector<eval::Label> gl{0, 1, 0, 1, 1, 1, 1, 1, 1, 1};
  const std::vector<Embedding> queries{{1, 0}, {0, 1}};
  const std::vector<eval::Label> ql{0, 1};
  const double m = eval::map_at_10(queries, ql, gallery, gl).map;
  // Relevance by rank: [1,0,1,0,...] and [1,1,1,1,1,1,1,0,1,0].
  const double want = ((1.0 + 2.0 / 3.0) / 2.0 + (7.0 + 8.0 / 9.0) / 8.0) / 2.0;
  v.check(std::abs(m - want) < 1e-9, fmt::format("mAP@10 hand example {:.12f} vs {:.12f}", m, want));
  return v;
}

Verdict c6() {
  Verdict v{"C6", "schedule and determinism"};
  RunConfig c;
  c.seed = 5;
  c.data.num_train = 30;
  c.train.child_steps_total = 10;
  c.train.schedule_ratio = 5;
  c.sync();
  const world::World w(c.data.world);
  const world::Dataset train = world::generate_split(w, c.data, "train", 1);

  train::Trainer t(w, train, c);
  std::vector<std::uint64_t> parent_positions;
  t.run([&](const train::StepRecord& r) {
    if (r.parent) parent_positions.push_back(r.position);
  });
  v.check(parent_positions == std::vector<std::uint64_t>{6, 12},
          fmt::format("10 child steps at ratio 5: parent steps at positions [{}]", fmt::join(parent_positions, ", ")));

  c.train.child_steps_total = 60;
  train::Trainer a(w, train, c), b(w, train, c);
  a.run();
  b.run();
  const std::string full = checkpoint_bytes(a);
  v.check(full == checkpoint_bytes(b), fmt::format("two runs give identical checkpoints ({} bytes)", full.size()));

  train::Trainer first(w, train, c);
  first.run({}, 25);
  std::stringstream saved;
  first.save(saved);
  train::Trainer resumed(w, train, c);
  resumed.load(saved);
  resumed.run();
  v.check(checkpoint_bytes(resumed) == full, "resume after 25 child steps equals the uninterrupted run");
  return v;
}

// ---------------------------------------------------------------------------
// The experiment behind C3, C4 and C7.

struct Experiment {
  eval::MetricReport trained, untrained;
  double ablated_ranking = 0.0;
  double seconds = 0.0;
  bool text_unchanged = false;
  double worst_norm_error = 0.0;
  std::size_t embeddings_checked = 0;
  bool repeat_identical = false;
};

Experiment run_experiment(const RunConfig& config) {
  Experiment e;
  const auto start = Clock::now();
  const world::World w(config.data.world);
  const world::Dataset train = world::generate_split(w, config.data, "train", 1);
  const world::Dataset val = world::generate_split(w, config.data, "val", 1);
  const world::Dataset test = world::generate_split(w, config.data, "test", 1);
  const eval::EvalData data{&train, &val, &test};
  const ad::Tensor text_before = w.text().rows();

  std::cerr << "training...\n";
  train::Trainer trained(w, train, config);
  trained.run();
  e.trained = eval::evaluate(trained.model(), w, data, config);

  std::cerr << "training without counterfactuals...\n";
  RunConfig ablated_config = config;
  ablated_config.train.ablate_cf = true;
  train::Trainer ablated(w, train, ablated_config);
  ablated.run();
  e.ablated_ranking = eval::ranking_accuracy(ablated.model(), w, test);

  std::cerr << "evaluating the untrained model...\n";
  const train::Model fresh(config.model, derive_seed(config.seed, "init"));
  e.untrained = eval::evaluate(fresh, w, data, config);
  e.seconds = seconds_since(start);

  std::cerr << "repeating the training run...\n";
  train::Trainer again(w, train, config);
  again.run();
  e.repeat_identical = checkpoint_bytes(again) == checkpoint_bytes(trained);

  e.text_unchanged = w.text().rows() == text_before;
  auto note = [&](std::span<const double> x) {
    e.worst_norm_error = std::max(e.worst_norm_error, std::abs(vec_norm(x) - 1.0));
    ++e.embeddings_checked;
  };
  for (const world::Dataset* split : {&train, &val, &test}) {
    for (const auto& rec : *split) {
      const auto emb = train::embed_video(trained.model(), rec.video);
      for (const auto& x : emb.frames) note(x);
      for (const auto& x : emb.clips) note(x);
      note(emb.video);
      note(w.summary_text(rec.activity.summary_tokens));
      for (const auto& cf : rec.cfs) note(w.summary_text(cf.tokens));
      for (const auto& step : rec.activity.steps) {
        note(w.narration_text(step.action));
        note(w.state_text(step.action, step.before_state));
        note(w.state_text(step.action, step.after_state));
        for (Token s : step.sc_cf_states) note(w.state_text(step.action, s));
      }
    }
  }
  return e;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string path = argc > 1 ? argv[1] : STATECF_ACCEPTANCE_CONFIG;
  RunConfig config;
  try {
    config = load_config(path);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  std::vector<Verdict> verdicts;
  verdicts.push_back(c1(config));
  verdicts.push_back(c2());

  const Experiment e = run_experiment(config);
  const double trained = e.trained.values.at("ranking_accuracy");
  const double untrained = e.untrained.values.at("ranking_accuracy");

  Verdict v3{"C3", "counterfactual ranking"};
  v3.check(trained >= 85.0, fmt::format("trained ranking accuracy {:.2f}% (>= 85)", trained));
  v3.check(e.ablated_ranking <= trained - 10.0,
           fmt::format("ablated {:.2f}%, {:.2f} points below trained (>= 10)", e.ablated_ranking,
                       trained - e.ablated_ranking));
  v3.check(std::abs(untrained - 50.0) <= 10.0, fmt::format("untrained {:.2f}% (50 +/- 10)", untrained));
  v3.check(e.seconds < 600.0, fmt::format("train + eval runtime {:.1f} s (< 600)", e.seconds));

  Verdict v4{"C4", "state-change separation and error detection"};
  const double phase = e.trained.values.at("phase_f1");
  const double eda = e.trained.values.at("eda");
  const double eda0 = e.untrained.values.at("eda");
  v4.check(phase >= 90.0, fmt::format("phase probe macro F1 {:.2f} (>= 90)", phase));
  v4.check(eda >= 80.0, fmt::format("EDA {:.2f} (>= 80)", eda));
  v4.check(std::abs(eda0 - 50.0) <= 5.0, fmt::format("untrained EDA {:.2f} (50 +/- 5)", eda0));

  verdicts.push_back(v3);
  verdicts.push_back(v4);
  verdicts.push_back(c5());

  Verdict v6 = c6();
  v6.check(e.repeat_identical, "full acceptance training run repeated: identical checkpoint");
  verdicts.push_back(v6);

  Verdict v7{"C7", "frozen text and unit norms"};
  v7.check(e.text_unchanged, "text table bitwise unchanged after training");
  v7.check(e.worst_norm_error <= 1e-9, fmt::format("{} embeddings, worst | |x| - 1 | = {:.2e}",
                                                   e.embeddings_checked, e.worst_norm_error));
  verdicts.push_back(v7);

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  bool all = true;
  for (const auto& v : verdicts) {
    std::cout << fmt::format("{} {}: {}\n", v.id, v.passed ? "PASS" : "FAIL", v.title);
    all = all && v.passed;
  }
  std::cout << "\n";
  for (const auto& v : verdicts) {
    std::cout << v.id << "\n";
    for (const auto& n : v.notes) std::cout << n << "\n";
  }
  std::cout << "\ntrained report\n" << eval::to_text(e.trained);
  std::cout << "\nuntrained report\n" << eval::to_text(e.untrained);
  return all ? 0 : 1;
}
