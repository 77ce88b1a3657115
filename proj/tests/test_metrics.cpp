#include <gtest/gtest.h>

#include "cmr/cmr.hpp"
#include "test_support.hpp"

using namespace cmr;
using cmr::testing::make_example;
using cmr::testing::random_batch;

namespace {

StepRecord rec(std::size_t t, double ukr_v, double okr_v, double csr_v, double kg_v) {
    StepRecord r;
    r.t = t;
    r.ukr = ukr_v;
    r.okr = okr_v;
    r.csr = csr_v;
    r.kg = kg_v;
    return r;
}

// Softmax over 2 classes on 1 feature: predicts class 1 iff x > 0.
LearnerState sign_model() {
    LearnerState s = init_learner(Arch::softmax(), 1, 2, 0);
    s.theta = {-1.0, 1.0, 0.0, 0.0};
    return s;
}

} // namespace

TEST(Metrics, CsrHandValue) {
    EXPECT_DOUBLE_EQ(*csr(10, 64), 0.84375);
    EXPECT_FALSE(csr(0, 0).has_value());
    EXPECT_DOUBLE_EQ(*csr(0, 5), 1.0);
}

TEST(Metrics, OecRendersMeanOfFourAtTwoDecimals) {
    EXPECT_EQ(percent(oec(0.8027, 0.3613, 0.3544, 0.3125)), "45.77");
    EXPECT_EQ(percent(oec(0.6621, 0.7773, 0.5348, 0.4891)), "61.58");
    EXPECT_EQ(percent(std::nullopt), "-");
    EXPECT_FALSE(oec(0.5, std::nullopt, 0.5, 0.5).has_value());
}

TEST(Metrics, EfrCountsFixedErrors) {
    const LearnerState s = sign_model();
    std::vector<Example> errs{make_example(0, {1.0}, 1), make_example(1, {2.0}, 1), make_example(2, {-1.0}, 0),
                              make_example(3, {3.0}, 0)};
    EXPECT_DOUBLE_EQ(*efr(s, errs), 0.75);
    EXPECT_FALSE(efr(s, {}).has_value());
}

TEST(Metrics, ConstantTraceAggregatesToItself) {
    MetricTrace trace;
    for (std::size_t t = 1; t <= 6; ++t) trace.steps.push_back(rec(t, 0.5, 0.25, 0.75, 1.0));
    const AggregateReport a = aggregate(trace);
    EXPECT_DOUBLE_EQ(*a.ukr.avg, 0.5);
    EXPECT_DOUBLE_EQ(*a.ukr.at_T, 0.5);
    EXPECT_DOUBLE_EQ(*a.oec.avg, 0.625);
    EXPECT_DOUBLE_EQ(*a.oec.at_T, 0.625);
    EXPECT_FALSE(a.efr.avg.has_value());
}

TEST(Metrics, AverageSkipsAbsentSteps) {
    MetricTrace trace;
    StepRecord a = rec(1, 1.0, 0.0, 0.0, 0.0);
    a.okr.reset();
    a.csr.reset();
    trace.steps.push_back(a);
    trace.steps.push_back(rec(2, 0.0, 0.5, 0.5, 0.5));
    const AggregateReport r = aggregate(trace);
    EXPECT_DOUBLE_EQ(*r.ukr.avg, 0.5);
    EXPECT_DOUBLE_EQ(*r.okr.avg, 0.5);
    EXPECT_DOUBLE_EQ(*r.okr.at_T, 0.5);
    EXPECT_DOUBLE_EQ(*r.oec.at_T, 0.375);
}

TEST(Recorder, CarriesValuesBetweenEvaluations) {
    const auto pool = random_batch(50, 1, 2, 1);
    const auto held = random_batch(10, 1, 2, 2, 100);
    MetricSettings ms;
    ms.eval_interval = 3;
    MetricRecorder rec(ms, pool, held, 7, 5);
    const LearnerState s = sign_model();
    for (std::size_t t = 1; t <= 7; ++t) {
        const auto q = random_batch(4, 1, 2, 10 + t, 1000 + 10 * t);
        rec.record(t, q, std::span<const Example>(q).first(t % 3), s);
    }
    const auto& steps = rec.trace().steps;
    ASSERT_EQ(steps.size(), 7u);
    const std::vector<bool> carried{false, true, false, true, true, false, false};
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(steps[i].carried, carried[i]) << i;
    EXPECT_EQ(steps[1].ukr, steps[0].ukr);
    EXPECT_FALSE(steps[0].okr.has_value());
    EXPECT_FALSE(steps[0].csr.has_value());
    // |E_<3| = 1 + 2, |Q_<3| = 8
    EXPECT_DOUBLE_EQ(*steps[2].csr, 1.0 - 3.0 / 8.0);
    EXPECT_EQ(rec.upstream_sample().size(), 50u);
}

TEST(Recorder, RejectsBadSettings) {
    const auto pool = random_batch(5, 1, 2, 1);
    MetricSettings ms;
    ms.eval_interval = 0;
    EXPECT_THROW(MetricRecorder(ms, pool, pool, 3, 0), ValidationError);
    EXPECT_THROW(MetricRecorder(MetricSettings{}, pool, {}, 3, 0), ValidationError);
}

TEST(Metrics, FixedSampleIsDeterministicSubset) {
    const auto pool = random_batch(30, 2, 2, 3);
    const auto a = fixed_sample(pool, 10, 4);
    EXPECT_EQ(a, fixed_sample(pool, 10, 4));
    EXPECT_EQ(a.size(), 10u);
    EXPECT_EQ(fixed_sample(pool, 100, 4).size(), 30u);
}

TEST(TraceCsv, RoundTripIsExact) {
    MetricTrace trace;
    StepRecord r = rec(1, 1.0 / 3.0, 0.1, 0.2, 0.7);
    r.efr = 0.123456789012345678;
    r.q_size = 64;
    r.e_size = 9;
    trace.steps.push_back(r);
    StepRecord c = rec(2, 0.5, 0.5, 0.5, 0.5);
    c.okr.reset();
    c.carried = true;
    trace.steps.push_back(c);
    EXPECT_EQ(parse_trace_csv(serialize_trace_csv(trace)), trace.steps);
    EXPECT_THROW(parse_trace_csv("header\n1,2,3\n"), ValidationError);
}

TEST(AggregateJson, RoundTrip) {
    MetricTrace trace;
    trace.steps.push_back(rec(1, 0.9, 0.8, 0.7, 0.6));
    const AggregateReport a = aggregate(trace);
    EXPECT_EQ(aggregate_from_json(nlohmann::json::parse(to_json(a).dump())), a);
}

TEST(Metrics, SimpleCases) {
    const LearnerState s = sign_model();
    const std::vector<Example> one{make_example(0, {2.0}, 1)};
    EXPECT_EQ(*okr(s, one), 1.0);
    EXPECT_EQ(kg(s, one), 1.0);
    EXPECT_EQ(*csr(7, 7), 0.0);
    EXPECT_FALSE(okr(s, {}).has_value());
}

TEST(Metrics, ConstantPredictorScoresBaseRate) {
    // Zero weights always predict class 0.
    const LearnerState zero = init_learner(Arch::softmax(), 2, 3, 0);
    const auto held = random_batch(40, 2, 3, 8);
    std::size_t zeros = 0;
    for (const auto& e : held) zeros += e.label == 0;
    EXPECT_DOUBLE_EQ(kg(zero, held), static_cast<double>(zeros) / 40.0);
}

TEST(Recorder, OkrUsesAllPastQueriesWhenFewerThanSampleSize) {
    const auto pool = random_batch(20, 1, 2, 1);
    const LearnerState s = sign_model();
    MetricRecorder rec(MetricSettings{}, pool, pool, 6, 2);
    std::vector<Example> past;
    for (std::size_t t = 1; t <= 6; ++t) {
        const auto q = random_batch(9, 1, 2, 30 + t, 100 * t);
        rec.record(t, q, {}, s);
        if (t > 1) {
            EXPECT_EQ(*rec.trace().steps.back().okr, accuracy(s, past)) << t;
        }
        past.insert(past.end(), q.begin(), q.end());
    }
}

TEST(Metrics, UpstreamModelKnowledgeBelowUkrOnDefaultBenchmark) {
    const ClusterSet set = generate_clusters(default_generator_spec());
    const LearnerState f0 = train_upstream(set.clusters[0], set.d, set.K, Arch::mlp(32), UpstreamOptions{}).model;
    StreamConfig c;
    c.seed = 100;
    const QueryStream s = sample_stream(set, c);
    const auto sample = fixed_sample(set.clusters[0], 512, 3);
    EXPECT_LT(kg(f0, s.heldout_set), ukr(f0, sample));
}
