#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cmr/cmr.hpp"
#include "test_support.hpp"

using namespace cmr;
using cmr::testing::random_batch;
using cmr::testing::random_state;

namespace {

BiMemory make_memory(std::size_t nu, std::size_t no, std::uint64_t seed = 1) {
    BiMemory mem(random_batch(nu, 3, 3, seed, 0));
    if (no > 0) mem.write(random_batch(no, 3, 3, seed + 1, 1000), 1);
    return mem;
}

std::size_t count_online(const std::vector<Example>& xs) {
    std::size_t n = 0;
    for (const auto& e : xs) n += e.id >= 1000;
    return n;
}

// Reference selection: an element is chosen iff fewer than r candidates beat it.
std::set<std::uint64_t> brute_top(const std::vector<Example>& cands, const std::vector<double>& scores,
                                  std::size_t r) {
    std::set<std::uint64_t> out;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        std::size_t better = 0;
        for (std::size_t j = 0; j < cands.size(); ++j)
            if (scores[j] > scores[i] || (scores[j] == scores[i] && cands[j].id < cands[i].id)) ++better;
        if (better < r) out.insert(cands[i].id);
    }
    return out;
}

} // namespace

TEST(BiMemory, RandomSelectionSplitsEvenlyWithOddToUpstream) {
    const BiMemory mem = make_memory(50, 50);
    Rng rng(3);
    for (std::size_t r : {1, 2, 5, 32}) {
        const auto sel = select_random(mem, r, rng);
        ASSERT_EQ(sel.chosen.size(), r);
        EXPECT_EQ(count_online(sel.chosen), r / 2);
        std::set<std::uint64_t> ids;
        for (const auto& e : sel.chosen) EXPECT_TRUE(ids.insert(e.id).second);
    }
}

TEST(BiMemory, ShortSideIsBackfilled) {
    Rng rng(4);
    const auto few_online = select_random(make_memory(50, 1), 8, rng);
    EXPECT_EQ(few_online.chosen.size(), 8u);
    EXPECT_EQ(count_online(few_online.chosen), 1u);
    const auto few_upstream = select_random(make_memory(2, 50), 8, rng);
    EXPECT_EQ(few_upstream.chosen.size(), 8u);
    EXPECT_EQ(count_online(few_upstream.chosen), 6u);
}

TEST(BiMemory, SaturationReturnsWholeMemory) {
    Rng rng(5);
    const BiMemory mem = make_memory(3, 4);
    const auto sel = select_random(mem, 100, rng);
    EXPECT_EQ(sel.chosen.size(), 7u);
    const auto only_upstream = select_random(make_memory(5, 0), 32, rng);
    EXPECT_EQ(only_upstream.chosen.size(), 5u);
}

TEST(BiMemory, WriteIsVisibleAndPure) {
    const BiMemory before = make_memory(4, 0);
    const auto errors = random_batch(3, 3, 3, 9, 500);
    const BiMemory after = memory_write(before, errors, 7);
    EXPECT_TRUE(before.online().empty());
    ASSERT_EQ(after.online().size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(after.online()[i].example, errors[i]);
        EXPECT_EQ(after.online()[i].t, 7u);
    }
    Rng rng(1);
    const auto sel = select_random(after, 7, rng);
    EXPECT_EQ(sel.chosen.size(), 7u);
}

TEST(BiMemory, CapacityEvictsOldestFirst) {
    BiMemory mem({}, 3);
    mem.write(random_batch(2, 3, 3, 1, 10), 1);
    mem.write(random_batch(2, 3, 3, 2, 20), 2);
    ASSERT_EQ(mem.online().size(), 3u);
    EXPECT_EQ(mem.online()[0].example.id, 11u);
    ASSERT_EQ(mem.evictions().size(), 1u);
    EXPECT_EQ(mem.evictions()[0].id, 10u);
    EXPECT_EQ(mem.evictions()[0].inserted_t, 1u);
    EXPECT_EQ(mem.evictions()[0].evicted_t, 2u);
}

TEST(TopByScore, MatchesBruteForceWithTies) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto cands = random_batch(20, 2, 2, 100 + trial, 0);
        rng.shuffle(cands);
        std::vector<double> scores;
        for (std::size_t i = 0; i < cands.size(); ++i) scores.push_back(static_cast<double>(rng.uniform_index(5)));
        for (std::size_t r : {1, 4, 10, 20, 30}) {
            std::set<std::uint64_t> got;
            for (std::size_t pos : top_by_score(cands, scores, r)) got.insert(cands[pos].id);
            EXPECT_EQ(got, brute_top(cands, scores, r));
        }
    }
}

TEST(Conditional, MirMatchesReferencePipeline) {
    const BiMemory mem = make_memory(40, 30);
    const LearnerState f = random_state(Arch::mlp(4), 3, 3, 2);
    const auto errors = random_batch(6, 3, 3, 77, 5000);
    ConditionalOptions o;
    o.r = 8;
    o.c = 24;
    o.virtual_training.epochs = 2;
    o.virtual_training.seed = 3;
    Rng rng(12), ref_rng(12);
    const auto sel = select_conditional(mem, f, errors, o, rng);

    const auto pool = select_random(mem, o.c, ref_rng);
    const LearnerState fv = fine_tune(f, errors, o.virtual_training);
    std::vector<double> scores;
    for (const auto& ex : pool.chosen) scores.push_back(detail::example_loss(fv, ex) - detail::example_loss(f, ex));
    std::set<std::uint64_t> got;
    for (const auto& e : sel.chosen) got.insert(e.id);
    EXPECT_EQ(got, brute_top(pool.chosen, scores, o.r));
    EXPECT_EQ(sel.candidate_pool_size, 24u);
    for (std::size_t i = 1; i < sel.scores.size(); ++i) EXPECT_GE(sel.scores[i - 1], sel.scores[i]);
}

TEST(Conditional, MaxLossEqualsMirWhenPreviousLossIsConstant) {
    const BiMemory mem = make_memory(40, 30);
    const LearnerState f = init_learner(Arch::softmax(), 3, 3, 0);
    const auto errors = random_batch(6, 3, 3, 77, 5000);
    ConditionalOptions o;
    o.r = 10;
    o.c = 40;
    o.virtual_training.seed = 8;
    Rng a(1), b(1);
    o.strategy = ReplayStrategy::Mir;
    const auto mir = select_conditional(mem, f, errors, o, a);
    o.strategy = ReplayStrategy::MaxLoss;
    const auto ml = select_conditional(mem, f, errors, o, b);
    ASSERT_EQ(mir.chosen.size(), ml.chosen.size());
    for (std::size_t i = 0; i < mir.chosen.size(); ++i) {
        EXPECT_EQ(mir.chosen[i].id, ml.chosen[i].id);
        EXPECT_NEAR(ml.scores[i] - mir.scores[i], std::log(3.0), 1e-10);
    }
}

TEST(Conditional, ZeroVirtualEpochsGivesZeroInterference) {
    const BiMemory mem = make_memory(10, 10);
    const LearnerState f = random_state(Arch::softmax(), 3, 3, 4);
    ConditionalOptions o;
    o.r = 4;
    o.c = 8;
    o.virtual_training.epochs = 0;
    Rng rng(2);
    const auto sel = select_conditional(mem, f, random_batch(3, 3, 3, 1, 900), o, rng);
    ASSERT_EQ(sel.scores.size(), 4u);
    for (double s : sel.scores) EXPECT_EQ(s, 0.0);
}

TEST(Conditional, EdgeCases) {
    const LearnerState f = random_state(Arch::softmax(), 3, 3, 4);
    ConditionalOptions o;
    o.r = 4;
    o.c = 2;
    Rng rng(2);
    EXPECT_THROW(select_conditional(make_memory(5, 5), f, {}, o, rng), ValidationError);
    o.c = 8;
    EXPECT_TRUE(select_conditional(BiMemory{}, f, {}, o, rng).chosen.empty());
    EXPECT_THROW(select_random(make_memory(5, 5), 0, rng), ValidationError);
}

TEST(BiMemory, WritesAreAdditiveAndEmptyWriteIsNoOp) {
    BiMemory mem = make_memory(4, 0);
    mem.write({}, 1);
    EXPECT_TRUE(mem.online().empty());
    mem.write(random_batch(3, 3, 3, 1, 100), 1);
    mem.write(random_batch(5, 3, 3, 2, 200), 2);
    EXPECT_EQ(mem.online().size(), 8u);
}

TEST(BiMemory, FixedSeedGivesSameSelection) {
    const BiMemory mem = make_memory(30, 30);
    Rng a(9), b(9);
    EXPECT_EQ(select_random(mem, 10, a).chosen, select_random(mem, 10, b).chosen);
}

TEST(Scores, HandValuesAndInvariances) {
    // Two-class softmax on one feature with bias margin m gives loss log(1 + e^-m) on label 1.
    auto model_with_loss = [](double target) {
        LearnerState s = init_learner(Arch::softmax(), 1, 2, 0);
        s.theta[3] = -std::log(std::exp(target) - 1.0);
        return s;
    };
    const std::vector<Example> one{cmr::testing::make_example(0, {0.0}, 1)};
    const auto sc = score_interference(model_with_loss(0.5), model_with_loss(2.0), one);
    EXPECT_NEAR(sc[0], 1.5, 1e-12);

    const LearnerState f = random_state(Arch::mlp(4), 3, 3, 5);
    const LearnerState g = random_state(Arch::mlp(4), 3, 3, 6);
    auto cands = random_batch(12, 3, 3, 7);
    EXPECT_EQ(score_interference(f, f, cands), std::vector<double>(12, 0.0));
    const auto s1 = score_interference(f, g, cands);
    auto rev = cands;
    std::reverse(rev.begin(), rev.end());
    const auto s2 = score_interference(f, g, rev);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(s1[i], s2[11 - i]);
    for (double v : score_maxloss(g, cands)) EXPECT_GE(v, 0.0);

    LearnerState sure = init_learner(Arch::softmax(), 1, 2, 0);
    sure.theta = {0.0, 0.0, 0.0, 60.0};
    EXPECT_LT(score_maxloss(sure, one)[0], 1e-20);
}

TEST(Conditional, DegenerateSelections) {
    const BiMemory mem = make_memory(6, 4);
    const LearnerState f = random_state(Arch::mlp(4), 3, 3, 4);
    const auto errors = random_batch(3, 3, 3, 1, 900);
    ConditionalOptions o;
    o.r = mem.size();
    o.c = mem.size();
    std::set<std::uint64_t> all;
    for (const auto& e : mem.upstream()) all.insert(e.id);
    for (const auto& e : mem.online()) all.insert(e.example.id);
    for (ReplayStrategy st : {ReplayStrategy::Random, ReplayStrategy::MaxLoss, ReplayStrategy::Mir}) {
        o.strategy = st;
        Rng rng(3);
        std::set<std::uint64_t> got;
        for (const auto& e : select_conditional(mem, f, errors, o, rng).chosen) got.insert(e.id);
        EXPECT_EQ(got, all) << to_string(st);
    }
    // No virtual training: all MIR scores are 0 and the smallest ids win.
    o.strategy = ReplayStrategy::Mir;
    o.r = 3;
    o.virtual_training.epochs = 0;
    Rng rng(3);
    const auto sel = select_conditional(mem, f, errors, o, rng);
    std::vector<std::uint64_t> ids;
    for (const auto& e : sel.chosen) ids.push_back(e.id);
    EXPECT_EQ(ids, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(Conditional, SmallInstanceMatchesExhaustiveOracle) {
    const BiMemory mem = make_memory(5, 5, 31);
    const LearnerState f = random_state(Arch::mlp(4), 3, 3, 32);
    const auto errors = random_batch(4, 3, 3, 33, 900);
    ConditionalOptions o;
    o.r = 3;
    o.c = 10;
    o.virtual_training.seed = 5;
    std::vector<Example> all = mem.upstream();
    for (const auto& e : mem.online()) all.push_back(e.example);
    const LearnerState fv = fine_tune(f, errors, o.virtual_training);
    for (ReplayStrategy st : {ReplayStrategy::Mir, ReplayStrategy::MaxLoss}) {
        o.strategy = st;
        std::vector<double> scores;
        for (const auto& ex : all)
            scores.push_back(st == ReplayStrategy::Mir ? detail::example_loss(fv, ex) - detail::example_loss(f, ex)
                                                       : detail::example_loss(fv, ex));
        Rng rng(1);
        std::set<std::uint64_t> got;
        for (const auto& e : select_conditional(mem, f, errors, o, rng).chosen) got.insert(e.id);
        EXPECT_EQ(got, brute_top(all, scores, 3));
    }
}
