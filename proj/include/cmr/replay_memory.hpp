#pragma once

// Bi-Memory replay store: a fixed upstream pool M_u and a growing pool M_o of
// past error examples, plus random / MaxLoss / MIR replay selection.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cmr/cluster_store.hpp"
#include "cmr/error.hpp"
#include "cmr/learner.hpp"
#include "cmr/rng.hpp"

namespace cmr {

enum class ReplayStrategy { Random, MaxLoss, Mir };

inline std::string to_string(ReplayStrategy s) {
    switch (s) {
        case ReplayStrategy::Random: return "random";
        case ReplayStrategy::MaxLoss: return "maxloss";
        case ReplayStrategy::Mir: return "mir";
    }
    return "?";
}

struct OnlineEntry {
    Example example;
    std::size_t t = 0;  // episode whose error stream contained it
};

struct Eviction {
    std::uint64_t id = 0;
    std::size_t inserted_t = 0;
    std::size_t evicted_t = 0;
};

class BiMemory {
public:
    BiMemory() = default;
    explicit BiMemory(std::vector<Example> upstream, std::optional<std::size_t> online_capacity = std::nullopt)
        : upstream_(std::move(upstream)), capacity_(online_capacity) {}

    const std::vector<Example>& upstream() const { return upstream_; }
    const std::vector<OnlineEntry>& online() const { return online_; }
    const std::vector<Eviction>& evictions() const { return evictions_; }
    std::optional<std::size_t> capacity() const { return capacity_; }
    std::size_t size() const { return upstream_.size() + online_.size(); }
    bool empty() const { return size() == 0; }

    // Appends E_t with timestep t; over capacity, the oldest entries go first.
    void write(Batch errors, std::size_t t) {
        for (const auto& ex : errors) online_.push_back({ex, t});
        if (capacity_ && online_.size() > *capacity_) {
            const std::size_t drop = online_.size() - *capacity_;
            for (std::size_t i = 0; i < drop; ++i) evictions_.push_back({online_[i].example.id, online_[i].t, t});
            online_.erase(online_.begin(), online_.begin() + static_cast<std::ptrdiff_t>(drop));
        }
    }

private:
    std::vector<Example> upstream_;
    std::vector<OnlineEntry> online_;
    std::optional<std::size_t> capacity_;
    std::vector<Eviction> evictions_;
};

inline BiMemory memory_write(BiMemory mem, Batch errors, std::size_t t) {
    mem.write(errors, t);
    return mem;
}

struct ReplaySelection {
    std::vector<Example> chosen;
    std::vector<double> scores;  // aligned with `chosen` for conditional strategies
    std::size_t candidate_pool_size = 0;
    ReplayStrategy strategy = ReplayStrategy::Random;
};

// r examples uniformly without replacement, half from M_u and half from M_o
// (the odd one from M_u); a short side is backfilled from the other.
inline ReplaySelection select_random(const BiMemory& mem, std::size_t r, Rng& rng) {
    if (r < 1) throw ValidationError("select_random: r must be >= 1");
    ReplaySelection sel;
    const std::size_t nu = mem.upstream().size(), no = mem.online().size();
    std::size_t want_o = r / 2;
    std::size_t want_u = r - want_o;
    if (want_o > no) {
        want_u += want_o - no;
        want_o = no;
    }
    if (want_u > nu) {
        want_o = std::min(no, want_o + (want_u - nu));
        want_u = nu;
    }
    for (std::size_t pos : rng.sample_without_replacement(nu, want_u)) sel.chosen.push_back(mem.upstream()[pos]);
    for (std::size_t pos : rng.sample_without_replacement(no, want_o)) sel.chosen.push_back(mem.online()[pos].example);
    sel.candidate_pool_size = sel.chosen.size();
    return sel;
}

// loss(f_virtual) - loss(f_prev), per candidate.
inline std::vector<double> score_interference(const LearnerState& f_prev, const LearnerState& f_virtual,
                                              Batch candidates) {
    if (candidates.empty()) throw ValidationError("score_interference: no candidates");
    const auto lv = example_losses(f_virtual, candidates);
    const auto lp = example_losses(f_prev, candidates);
    std::vector<double> out(lv.size());
    for (std::size_t i = 0; i < lv.size(); ++i) out[i] = lv[i] - lp[i];
    return out;
}

inline std::vector<double> score_maxloss(const LearnerState& f_virtual, Batch candidates) {
    if (candidates.empty()) throw ValidationError("score_maxloss: no candidates");
    return example_losses(f_virtual, candidates);
}

// Top r of `candidates` by score, descending; ties go to the smaller id.
inline std::vector<std::size_t> top_by_score(Batch candidates, const std::vector<double>& scores, std::size_t r) {
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return candidates[a].id < candidates[b].id;
    });
    order.resize(std::min(r, order.size()));
    return order;
}

struct ConditionalOptions {
    std::size_t r = 32;
    std::size_t c = 256;
    ReplayStrategy strategy = ReplayStrategy::Mir;
    TrainOptions virtual_training;  // lr, epochs (virt_epochs), batch size, seed
};

// Candidate pool C (bi-memory balanced, |C| = min(c, |memory|)), a virtual
// model fine-tuned on E_t, then the r highest-scoring candidates.
inline ReplaySelection select_conditional(const BiMemory& mem, const LearnerState& f_prev, Batch errors,
                                          const ConditionalOptions& opts, Rng& rng) {
    if (opts.strategy == ReplayStrategy::Random) return select_random(mem, opts.r, rng);
    if (opts.r > opts.c) throw ValidationError("select_conditional: r must be <= c");
    ReplaySelection sel;
    sel.strategy = opts.strategy;
    if (mem.empty()) return sel;
    ReplaySelection pool = select_random(mem, opts.c, rng);
    sel.candidate_pool_size = pool.chosen.size();
    const LearnerState f_virtual = (errors.empty() || opts.virtual_training.epochs == 0)
                                       ? f_prev
                                       : fine_tune(f_prev, errors, opts.virtual_training);
    const auto scores = opts.strategy == ReplayStrategy::Mir ? score_interference(f_prev, f_virtual, pool.chosen)
                                                             : score_maxloss(f_virtual, pool.chosen);
    for (std::size_t pos : top_by_score(pool.chosen, scores, opts.r)) {
        sel.chosen.push_back(pool.chosen[pos]);
        sel.scores.push_back(scores[pos]);
    }
    return sel;
}

} // namespace cmr
