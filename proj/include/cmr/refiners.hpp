#pragma once

// Refinement methods g: (f_{t-1}, E_t, memory) -> f_t.
//
//   cft       fine-tune on E_t
//   l2reg     + lambda * sum_i (theta_i - theta_prev_i)^2
//   ewc       + lambda * 1/2 sum_i F_i (theta_i - theta_prev_i)^2, F a decayed running Fisher sum
//   er        every k steps, fine-tune on R_t u E_t with R_t drawn at random from the bi-memory
//   maxloss   as er, R_t = the candidates with the largest loss under a virtual model
//   mir       as er, R_t = the candidates whose loss the virtual model increases most
//   mir_l2    mir replay plus the l2reg anchor
//   frozen    f_t = f_0
//   offline   one fine-tuning run of f_0 on D' u E_{<=T} (reference, see offline_refine)

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmr/cluster_store.hpp"
#include "cmr/error.hpp"
#include "cmr/learner.hpp"
#include "cmr/replay_memory.hpp"
#include "cmr/rng.hpp"

namespace cmr {

enum class Method { Frozen, Cft, L2Reg, Ewc, Er, MaxLoss, Mir, MirL2, Offline };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::Frozen: return "frozen";
        case Method::Cft: return "cft";
        case Method::L2Reg: return "l2reg";
        case Method::Ewc: return "ewc";
        case Method::Er: return "er";
        case Method::MaxLoss: return "maxloss";
        case Method::Mir: return "mir";
        case Method::MirL2: return "mir_l2";
        case Method::Offline: return "offline";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::Frozen, Method::Cft, Method::L2Reg, Method::Ewc, Method::Er, Method::MaxLoss, Method::Mir,
                     Method::MirL2, Method::Offline})
        if (to_string(m) == s) return m;
    throw ValidationError("unknown method '" + s + "'");
}

inline bool uses_replay(Method m) {
    return m == Method::Er || m == Method::MaxLoss || m == Method::Mir || m == Method::MirL2;
}

struct RefinerConfig {
    Method method = Method::Cft;
    double lr = 3e-2;
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    double lambda = 0.0;
    double ewc_gamma = 0.9;
    std::size_t replay_size = 32;     // r
    std::size_t replay_interval = 1;  // k
    std::size_t candidate_pool = 256; // c
    std::size_t virt_epochs = 1;
    bool two_stage = false;
    std::size_t offline_subset = 512;  // |D'|
    std::optional<std::size_t> online_capacity;

    bool operator==(const RefinerConfig&) const = default;
};

// Per-method defaults for the synthetic benchmark. The regularization weights
// are scaled to this model size: the hidden-layer net has ~300 parameters, so
// the sum-of-squares anchor is much stiffer per unit lambda than for a large LM.
inline RefinerConfig default_refiner_config(Method m) {
    RefinerConfig c;
    c.method = m;
    switch (m) {
        case Method::L2Reg:
        case Method::MirL2: c.lambda = 0.03; break;
        case Method::Ewc:
            c.lambda = 5.0;
            c.ewc_gamma = 0.9;
            break;
        default: break;
    }
    return c;
}

inline void validate(const RefinerConfig& c) {
    if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ValidationError("refiner: lambda must be >= 0");
    if (!(c.ewc_gamma > 0.0 && c.ewc_gamma <= 1.0)) throw ValidationError("refiner: ewc_gamma must be in (0, 1]");
    if (c.replay_interval < 1) throw ValidationError("refiner: replay interval k must be >= 1");
    if (c.batch_size < 1) throw ValidationError("refiner: batch_size must be >= 1");
    if (c.replay_size < 1) throw ValidationError("refiner: replay size must be >= 1");
    if ((c.method == Method::MaxLoss || c.method == Method::Mir || c.method == Method::MirL2) &&
        c.replay_size > c.candidate_pool)
        throw ValidationError("refiner: replay size r must be <= candidate pool c");
    if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ValidationError("refiner: lr must be >= 0");
}

// Per-step seeds, derived from the run seed so every method sees the same draws at step t.
struct StepSeeds {
    std::uint64_t finetune = 0;
    std::uint64_t replay = 0;
    std::uint64_t virtual_model = 0;

    static StepSeeds derive(std::uint64_t run_seed, std::size_t t) {
        return {derive_seed(run_seed, "finetune", t), derive_seed(run_seed, "replay", t),
                derive_seed(run_seed, "virtual", t)};
    }
};

struct RegAnchor {
    std::vector<double> theta_prev;
    std::vector<double> fisher_running;

    static RegAnchor at(const LearnerState& f) { return {f.theta, std::vector<double>(f.theta.size(), 0.0)}; }
};

inline double l2_penalty(std::span<const double> theta, std::span<const double> theta_prev) {
    if (theta.size() != theta_prev.size()) throw ValidationError("l2_penalty: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double dlt = theta[i] - theta_prev[i];
        acc += dlt * dlt;
    }
    return acc;
}

inline double ewc_penalty(std::span<const double> theta, const RegAnchor& anchor) {
    if (theta.size() != anchor.theta_prev.size() || theta.size() != anchor.fisher_running.size())
        throw ValidationError("ewc_penalty: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double dlt = theta[i] - anchor.theta_prev[i];
        acc += anchor.fisher_running[i] * dlt * dlt;
    }
    return 0.5 * acc;
}

inline std::vector<double> l2_penalty_grad(std::span<const double> theta, std::span<const double> theta_prev) {
    if (theta.size() != theta_prev.size()) throw ValidationError("l2_penalty_grad: length mismatch");
    std::vector<double> g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) g[i] = 2.0 * (theta[i] - theta_prev[i]);
    return g;
}

inline std::vector<double> ewc_penalty_grad(std::span<const double> theta, const RegAnchor& anchor) {
    if (theta.size() != anchor.theta_prev.size() || theta.size() != anchor.fisher_running.size())
        throw ValidationError("ewc_penalty_grad: length mismatch");
    std::vector<double> g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) g[i] = anchor.fisher_running[i] * (theta[i] - anchor.theta_prev[i]);
    return g;
}

enum class Penalty { L2, Ewc };

namespace detail {

inline TrainOptions train_options(const RefinerConfig& cfg, std::uint64_t seed) {
    return {cfg.lr, cfg.epochs, cfg.batch_size, seed};
}

// lambda * d(penalty)/d(theta), or nothing when lambda is zero.
inline GradientTerm anchor_term(Penalty kind, const RegAnchor& anchor, double lambda) {
    if (lambda == 0.0) return {};
    return [kind, &anchor, lambda](std::span<const double> theta, std::span<double> g) {
        if (kind == Penalty::L2) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += lambda * 2.0 * (theta[i] - anchor.theta_prev[i]);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += lambda * anchor.fisher_running[i] * (theta[i] - anchor.theta_prev[i]);
        }
    };
}

inline RegAnchor advance_anchor(Penalty kind, RegAnchor anchor, const LearnerState& f_t, Batch errors,
                                double ewc_gamma) {
    anchor.theta_prev = f_t.theta;
    if (kind == Penalty::Ewc) {
        const FisherDiag fd = fisher_diag(f_t, errors);
        for (std::size_t i = 0; i < anchor.fisher_running.size(); ++i)
            anchor.fisher_running[i] = ewc_gamma * anchor.fisher_running[i] + fd.values[i];
    }
    return anchor;
}

// Selects R_t if step t is a replay step, else returns an empty selection.
inline ReplaySelection select_replay(const LearnerState& f_prev, Batch errors, const BiMemory& mem, std::size_t t,
                                     const RefinerConfig& cfg, ReplayStrategy strategy, const StepSeeds& seeds) {
    if (t % cfg.replay_interval != 0 || mem.empty()) return {};
    Rng rng(seeds.replay);
    if (strategy == ReplayStrategy::Random) return select_random(mem, cfg.replay_size, rng);
    ConditionalOptions opts;
    opts.r = cfg.replay_size;
    opts.c = cfg.candidate_pool;
    opts.strategy = strategy;
    opts.virtual_training = {cfg.lr, cfg.virt_epochs, cfg.batch_size, seeds.virtual_model};
    return select_conditional(mem, f_prev, errors, opts, rng);
}

inline LearnerState tune_with_replay(const LearnerState& f_prev, Batch errors, const ReplaySelection& sel,
                                     const RefinerConfig& cfg, const StepSeeds& seeds, const GradientTerm& extra) {
    if (sel.chosen.empty()) return fine_tune(f_prev, errors, train_options(cfg, seeds.finetune), extra);
    if (cfg.two_stage) {
        const LearnerState mid =
            fine_tune(f_prev, sel.chosen, train_options(cfg, derive_seed(seeds.finetune, "stage1")), extra);
        return fine_tune(mid, errors, train_options(cfg, seeds.finetune), extra);
    }
    std::vector<Example> mixed = sel.chosen;
    mixed.insert(mixed.end(), errors.begin(), errors.end());
    return fine_tune(f_prev, mixed, train_options(cfg, seeds.finetune), extra);
}

inline ReplayStrategy strategy_for(Method m) {
    switch (m) {
        case Method::MaxLoss: return ReplayStrategy::MaxLoss;
        case Method::Mir:
        case Method::MirL2: return ReplayStrategy::Mir;
        default: return ReplayStrategy::Random;
    }
}

} // namespace detail

// All refine_* functions treat an empty E_t as "nothing to fix" and return f_prev.

inline LearnerState refine_cft(const LearnerState& f_prev, Batch errors, const RefinerConfig& cfg,
                               const StepSeeds& seeds) {
    if (errors.empty()) return f_prev;
    return fine_tune(f_prev, errors, detail::train_options(cfg, seeds.finetune));
}

inline std::pair<LearnerState, RegAnchor> refine_regularized(const LearnerState& f_prev, Batch errors,
                                                             const RegAnchor& anchor, Penalty kind,
                                                             const RefinerConfig& cfg, const StepSeeds& seeds) {
    if (errors.empty()) return {f_prev, anchor};
    LearnerState f_t = fine_tune(f_prev, errors, detail::train_options(cfg, seeds.finetune),
                                 detail::anchor_term(kind, anchor, cfg.lambda));
    RegAnchor next = detail::advance_anchor(kind, anchor, f_t, errors, cfg.ewc_gamma);
    return {std::move(f_t), std::move(next)};
}

// Replay refinement; E_t is written to `mem` after f_t is computed.
inline LearnerState refine_replay(const LearnerState& f_prev, Batch errors, BiMemory& mem, std::size_t t,
                                  const RefinerConfig& cfg, const StepSeeds& seeds) {
    if (errors.empty()) return f_prev;
    const ReplaySelection sel =
        detail::select_replay(f_prev, errors, mem, t, cfg, detail::strategy_for(cfg.method), seeds);
    LearnerState f_t = detail::tune_with_replay(f_prev, errors, sel, cfg, seeds, {});
    mem.write(errors, t);
    return f_t;
}

// MIR replay plus the L2 anchor.
inline std::pair<LearnerState, RegAnchor> refine_hybrid(const LearnerState& f_prev, Batch errors, BiMemory& mem,
                                                        const RegAnchor& anchor, std::size_t t,
                                                        const RefinerConfig& cfg, const StepSeeds& seeds) {
    if (errors.empty()) return {f_prev, anchor};
    const ReplaySelection sel = detail::select_replay(f_prev, errors, mem, t, cfg, ReplayStrategy::Mir, seeds);
    LearnerState f_t =
        detail::tune_with_replay(f_prev, errors, sel, cfg, seeds, detail::anchor_term(Penalty::L2, anchor, cfg.lambda));
    RegAnchor next = detail::advance_anchor(Penalty::L2, anchor, f_t, errors, cfg.ewc_gamma);
    mem.write(errors, t);
    return {std::move(f_t), std::move(next)};
}

// Offline reference: f_0 fine-tuned once on D' u E_{<=T}, where D' is a random
// subset of size cfg.offline_subset of the upstream pool.
inline LearnerState offline_refine(const LearnerState& f0, Batch upstream_pool, Batch all_errors,
                                   const RefinerConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "offline-subset"));
    std::vector<Example> data;
    for (std::size_t pos : rng.sample_without_replacement(upstream_pool.size(), cfg.offline_subset))
        data.push_back(upstream_pool[pos]);
    data.insert(data.end(), all_errors.begin(), all_errors.end());
    if (data.empty()) return f0;
    return fine_tune(f0, data, detail::train_options(cfg, derive_seed(seed, "offline-train")));
}

// Stateful wrapper binding one method to one run: owns the bi-memory and the
// regularization anchor.
class Refiner {
public:
    Refiner(RefinerConfig cfg, const LearnerState& f0, std::vector<Example> upstream_memory, std::uint64_t run_seed)
        : cfg_(std::move(cfg)), run_seed_(run_seed), anchor_(RegAnchor::at(f0)),
          memory_(std::move(upstream_memory), cfg_.online_capacity) {
        validate(cfg_);
        if (cfg_.method == Method::Offline) throw ValidationError("refiner: offline is not an online method");
    }

    const RefinerConfig& config() const { return cfg_; }
    const BiMemory& memory() const { return memory_; }
    const RegAnchor& anchor() const { return anchor_; }

    LearnerState refine(const LearnerState& f_prev, Batch errors, std::size_t t) {
        const StepSeeds seeds = StepSeeds::derive(run_seed_, t);
        switch (cfg_.method) {
            case Method::Frozen: return f_prev;
            case Method::Cft: return refine_cft(f_prev, errors, cfg_, seeds);
            case Method::L2Reg:
            case Method::Ewc: {
                const Penalty kind = cfg_.method == Method::L2Reg ? Penalty::L2 : Penalty::Ewc;
                auto [f_t, next] = refine_regularized(f_prev, errors, anchor_, kind, cfg_, seeds);
                anchor_ = std::move(next);
                return f_t;
            }
            case Method::Er:
            case Method::MaxLoss:
            case Method::Mir: return refine_replay(f_prev, errors, memory_, t, cfg_, seeds);
            case Method::MirL2: {
                auto [f_t, next] = refine_hybrid(f_prev, errors, memory_, anchor_, t, cfg_, seeds);
                anchor_ = std::move(next);
                return f_t;
            }
            case Method::Offline: break;
        }
        throw ValidationError("refiner: unsupported method");
    }

private:
    RefinerConfig cfg_;
    std::uint64_t run_seed_;
    RegAnchor anchor_;
    BiMemory memory_;
};

inline nlohmann::ordered_json to_json(const RefinerConfig& c) {
    nlohmann::ordered_json j;
    j["method"] = to_string(c.method);
    j["lr"] = c.lr;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lambda"] = c.lambda;
    j["ewc_gamma"] = c.ewc_gamma;
    j["replay_size"] = c.replay_size;
    j["replay_interval"] = c.replay_interval;
    j["candidate_pool"] = c.candidate_pool;
    j["virt_epochs"] = c.virt_epochs;
    j["two_stage"] = c.two_stage;
    j["offline_subset"] = c.offline_subset;
    if (c.online_capacity)
        j["online_capacity"] = *c.online_capacity;
    else
        j["online_capacity"] = nullptr;
    return j;
}

// Missing keys keep the values already in `base`.
template <typename Json>
RefinerConfig refiner_config_from_json(const Json& j, RefinerConfig base = {}) {
    try {
        if (j.contains("method")) base.method = method_from_string(j.at("method").template get<std::string>());
        base.lr = j.value("lr", base.lr);
        base.epochs = j.value("epochs", base.epochs);
        base.batch_size = j.value("batch_size", base.batch_size);
        base.lambda = j.value("lambda", base.lambda);
        base.ewc_gamma = j.value("ewc_gamma", base.ewc_gamma);
        base.replay_size = j.value("replay_size", base.replay_size);
        base.replay_interval = j.value("replay_interval", base.replay_interval);
        base.candidate_pool = j.value("candidate_pool", base.candidate_pool);
        base.virt_epochs = j.value("virt_epochs", base.virt_epochs);
        base.two_stage = j.value("two_stage", base.two_stage);
        base.offline_subset = j.value("offline_subset", base.offline_subset);
        if (j.contains("online_capacity")) {
            if (j.at("online_capacity").is_null())
                base.online_capacity.reset();
            else
                base.online_capacity = j.at("online_capacity").template get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("refiner config: ") + e.what());
    }
    validate(base);
    return base;
}

} // namespace cmr
