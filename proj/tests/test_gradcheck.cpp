#include <algorithm>

#include "doctest.h"
#include "statecf/gradcheck.hpp"

using namespace statecf;

namespace {

bool names(const gc::Report& r, std::string_view op) {
  return std::find(r.suspect_ops.begin(), r.suspect_ops.end(), op) != r.suspect_ops.end();
}

}  // namespace

TEST_CASE("every objective passes on twenty seeds") {
  for (auto mode : {obj::DenominatorMode::kNegativesOnly, obj::DenominatorMode::kNegativesPlusPositive}) {
    obj::LossParams loss;
    loss.denominator_mode = mode;
    loss.parent_temperature = 0.5;
    const gc::Report r = gc::run(loss, {});
    INFO(gc::to_text(r));
    CHECK(r.passed());
    CHECK(r.components.size() == gc::component_names().size());
    for (const auto& c : r.components) {
      CHECK(c.max_rel_error < 1e-4);
      CHECK(c.probes > 0);
    }
    CHECK(r.suspect_ops.empty());
    CHECK(r.seconds < 30.0);
  }
}

TEST_CASE("a corrupted backward rule is caught and named") {
  gc::Options o;
  o.seeds = 3;
  o.corrupt_gradient = ad::Op::kTanh;
  const gc::Report r = gc::run({}, o);
  INFO(gc::to_text(r));
  CHECK_FALSE(r.passed());
  CHECK(r.suspect_ops == std::vector<std::string>{"tanh"});
  // The aggregator has no tanh.
  for (const auto& c : r.components) CHECK(c.passed == (c.name == "aggregator"));
}

TEST_CASE("corruption in other ops") {
  for (auto op : {ad::Op::kSoftmaxRows, ad::Op::kLogSumExp, ad::Op::kMatMul, ad::Op::kSum}) {
    gc::Options o;
    o.seeds = 2;
    o.corrupt_gradient = op;
    const gc::Report r = gc::run({}, o);
    INFO(ad::op_name(op), "\n", gc::to_text(r));
    CHECK_FALSE(r.passed());
    CHECK(names(r, ad::op_name(op)));
  }
}
