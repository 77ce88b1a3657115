#pragma once

// The refinable classifier: softmax regression or a one-hidden-layer tanh
// network, with analytic gradients, an empirical Fisher diagonal and an Adam
// optimizer. Every operation returns a new state and leaves its input alone.
//
// All batch means accumulate left to right in ascending example id, so the
// result of a batch reduction does not depend on how the batch was assembled.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmr/cluster_store.hpp"
#include "cmr/error.hpp"
#include "cmr/io.hpp"
#include "cmr/rng.hpp"

namespace cmr {

enum class ArchKind { Softmax, Mlp };

struct Arch {
    ArchKind kind = ArchKind::Softmax;
    std::size_t hidden = 0;  // Mlp only

    static Arch softmax() { return {ArchKind::Softmax, 0}; }
    static Arch mlp(std::size_t hidden) { return {ArchKind::Mlp, hidden}; }

    std::size_t param_count(std::size_t d, std::size_t K) const {
        if (kind == ArchKind::Softmax) return K * d + K;
        return hidden * d + hidden + K * hidden + K;
    }
    bool operator==(const Arch&) const = default;
};

inline std::string to_string(const Arch& a) {
    return a.kind == ArchKind::Softmax ? "softmax" : "mlp" + std::to_string(a.hidden);
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t steps = 0;

    bool operator==(const AdamState&) const = default;
};

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct LearnerState {
    Arch arch;
    std::size_t d = 0;
    std::size_t K = 0;
    std::vector<double> theta;
    AdamState optimizer;

    bool operator==(const LearnerState&) const = default;
};

struct FisherDiag {
    std::vector<double> values;
};

using Batch = std::span<const Example>;

inline AdamState fresh_adam(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }

// Softmax regression starts at zero; the hidden-layer net draws weights from
// N(0, 1/fan_in) with zero biases.
inline LearnerState init_learner(const Arch& arch, std::size_t d, std::size_t K, std::uint64_t seed) {
    if (d < 1 || K < 2) throw ValidationError("learner: need d >= 1 and K >= 2");
    if (arch.kind == ArchKind::Mlp && arch.hidden < 1) throw ValidationError("learner: hidden width must be >= 1");
    LearnerState s;
    s.arch = arch;
    s.d = d;
    s.K = K;
    const std::size_t n = arch.param_count(d, K);
    s.theta.assign(n, 0.0);
    s.optimizer = fresh_adam(n);
    if (arch.kind == ArchKind::Mlp) {
        Rng rng(derive_seed(seed, "learner-init"));
        const std::size_t h = arch.hidden;
        const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
        for (std::size_t i = 0; i < h * d; ++i) s.theta[i] = s1 * rng.normal();
        const std::size_t w2 = h * d + h;
        for (std::size_t i = 0; i < K * h; ++i) s.theta[w2 + i] = s2 * rng.normal();
    }
    return s;
}

namespace detail {

inline void check_features(const LearnerState& s, std::span<const double> x) {
    if (x.size() != s.d)
        throw ValidationError("learner: feature dimension " + std::to_string(x.size()) + " != d=" + std::to_string(s.d));
}

// Class scores. `hidden_out`, when given, receives the hidden activations.
inline void forward(const LearnerState& s, std::span<const double> x, std::vector<double>& logits,
                    std::vector<double>* hidden_out = nullptr) {
    const std::size_t d = s.d, K = s.K;
    const double* th = s.theta.data();
    logits.assign(K, 0.0);
    if (s.arch.kind == ArchKind::Softmax) {
        const double* b = th + K * d;
        for (std::size_t k = 0; k < K; ++k) {
            double z = b[k];
            const double* w = th + k * d;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
            logits[k] = z;
        }
        return;
    }
    const std::size_t h = s.arch.hidden;
    const double* b1 = th + h * d;
    const double* w2 = b1 + h;
    const double* b2 = w2 + K * h;
    std::vector<double> local;
    std::vector<double>& a = hidden_out ? *hidden_out : local;
    a.assign(h, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
        double z = b1[i];
        const double* w = th + i * d;
        for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
        a[i] = std::tanh(z);
    }
    for (std::size_t k = 0; k < K; ++k) {
        double z = b2[k];
        const double* w = w2 + k * h;
        for (std::size_t i = 0; i < h; ++i) z += w[i] * a[i];
        logits[k] = z;
    }
}

inline double log_sum_exp(const std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double acc = 0.0;
    for (double v : z) acc += std::exp(v - mx);
    return mx + std::log(acc);
}

inline double example_loss(const LearnerState& s, const Example& ex) {
    check_features(s, ex.features);
    std::vector<double> logits;
    forward(s, ex.features, logits);
    return log_sum_exp(logits) - logits[ex.label];
}

// Positions of `batch` sorted by ascending id (stable for repeated ids).
inline std::vector<std::size_t> id_order(Batch batch) {
    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return batch[a].id < batch[b].id; });
    return order;
}

} // namespace detail

inline std::size_t predict(const LearnerState& s, std::span<const double> features) {
    detail::check_features(s, features);
    std::vector<double> logits;
    detail::forward(s, features, logits);
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k)
        if (logits[k] > logits[best]) best = k;
    return best;
}

inline bool is_correct(const LearnerState& s, const Example& ex) { return predict(s, ex.features) == ex.label; }

inline double accuracy(const LearnerState& s, Batch batch) {
    if (batch.empty()) throw ValidationError("accuracy: empty batch");
    std::size_t hits = 0;
    for (const auto& ex : batch) hits += is_correct(s, ex) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(batch.size());
}

// Mean cross-entropy.
inline double loss(const LearnerState& s, Batch batch) {
    if (batch.empty()) throw ValidationError("loss: empty batch");
    double acc = 0.0;
    for (std::size_t pos : detail::id_order(batch)) acc += detail::example_loss(s, batch[pos]);
    return acc / static_cast<double>(batch.size());
}

inline std::vector<double> example_losses(const LearnerState& s, Batch batch) {
    std::vector<double> out;
    out.reserve(batch.size());
    for (const auto& ex : batch) out.push_back(detail::example_loss(s, ex));
    return out;
}

// Gradient of a single example's cross-entropy w.r.t. theta.
inline std::vector<double> example_grad(const LearnerState& s, const Example& ex) {
    detail::check_features(s, ex.features);
    const std::size_t d = s.d, K = s.K;
    std::vector<double> g(s.theta.size(), 0.0);
    std::vector<double> logits, hidden;
    detail::forward(s, ex.features, logits, &hidden);
    const double lse = detail::log_sum_exp(logits);
    std::vector<double> delta(K);
    for (std::size_t k = 0; k < K; ++k) delta[k] = std::exp(logits[k] - lse) - (k == ex.label ? 1.0 : 0.0);
    const auto& x = ex.features;
    if (s.arch.kind == ArchKind::Softmax) {
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t j = 0; j < d; ++j) g[k * d + j] = delta[k] * x[j];
            g[K * d + k] = delta[k];
        }
        return g;
    }
    const std::size_t h = s.arch.hidden;
    const std::size_t off_b1 = h * d, off_w2 = off_b1 + h, off_b2 = off_w2 + K * h;
    const double* w2 = s.theta.data() + off_w2;
    std::vector<double> dz(h, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < h; ++i) {
            g[off_w2 + k * h + i] = delta[k] * hidden[i];
            dz[i] += w2[k * h + i] * delta[k];
        }
        g[off_b2 + k] = delta[k];
    }
    for (std::size_t i = 0; i < h; ++i) {
        dz[i] *= 1.0 - hidden[i] * hidden[i];
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] = dz[i] * x[j];
        g[off_b1 + i] = dz[i];
    }
    return g;
}

inline std::vector<double> grad(const LearnerState& s, Batch batch) {
    if (batch.empty()) throw ValidationError("grad: empty batch");
    std::vector<double> acc(s.theta.size(), 0.0);
    for (std::size_t pos : detail::id_order(batch)) {
        const auto g = example_grad(s, batch[pos]);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
    const double n = static_cast<double>(batch.size());
    for (double& v : acc) v /= n;
    return acc;
}

// Empirical Fisher: mean of squared per-example gradients at the true label.
inline FisherDiag fisher_diag(const LearnerState& s, Batch batch) {
    if (batch.empty()) throw ValidationError("fisher_diag: empty batch");
    std::vector<double> acc(s.theta.size(), 0.0);
    for (std::size_t pos : detail::id_order(batch)) {
        const auto g = example_grad(s, batch[pos]);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * g[i];
    }
    const double n = static_cast<double>(batch.size());
    for (double& v : acc) v /= n;
    return {std::move(acc)};
}

// One bias-corrected Adam update, in place on raw vectors.
inline void adam_update(std::vector<double>& theta, AdamState& st, std::span<const double> g, double lr,
                        const AdamParams& p = {}) {
    if (g.size() != theta.size() || st.m.size() != theta.size() || st.v.size() != theta.size())
        throw ValidationError("adam: length mismatch");
    for (double v : g)
        if (!std::isfinite(v)) throw RuntimeError("adam: non-finite gradient entry");
    ++st.steps;
    const double t = static_cast<double>(st.steps);
    const double c1 = 1.0 - std::pow(p.beta1, t);
    const double c2 = 1.0 - std::pow(p.beta2, t);
    for (std::size_t i = 0; i < theta.size(); ++i) {
        st.m[i] = p.beta1 * st.m[i] + (1.0 - p.beta1) * g[i];
        st.v[i] = p.beta2 * st.v[i] + (1.0 - p.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / c1;
        const double vhat = st.v[i] / c2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + p.eps);
    }
}

inline LearnerState step(const LearnerState& s, std::span<const double> g, double lr) {
    LearnerState out = s;
    adam_update(out.theta, out.optimizer, g, lr);
    return out;
}

struct TrainOptions {
    double lr = 3e-2;
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
};

// Extra gradient added to every mini-batch gradient (regularizer anchors).
using GradientTerm = std::function<void(std::span<const double> theta, std::span<double> grad)>;

// The generic mini-batch loop shared by upstream training and refinement.
// Each epoch reshuffles the (id-ordered) data with an RNG seeded from opts.seed
// and takes one Adam step per chunk of batch_size examples.
inline LearnerState train_epochs(const LearnerState& s, Batch data, const TrainOptions& opts,
                                 const GradientTerm& extra = {}) {
    if (opts.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    LearnerState out = s;
    if (data.empty() || opts.epochs == 0) return out;
    std::vector<std::size_t> order = detail::id_order(data);
    Rng rng(derive_seed(opts.seed, "minibatch"));
    std::vector<Example> chunk;
    for (std::size_t e = 0; e < opts.epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
            const std::size_t end = std::min(order.size(), start + opts.batch_size);
            chunk.clear();
            for (std::size_t i = start; i < end; ++i) chunk.push_back(data[order[i]]);
            auto g = grad(out, chunk);
            if (extra) extra(out.theta, g);
            adam_update(out.theta, out.optimizer, g, opts.lr);
        }
    }
    return out;
}

// Refinement on a small batch: a fresh optimizer, then `epochs` passes.
inline LearnerState fine_tune(const LearnerState& s, Batch batch, const TrainOptions& opts,
                              const GradientTerm& extra = {}) {
    if (batch.empty()) throw ValidationError("fine_tune: empty batch");
    LearnerState start = s;
    start.optimizer = fresh_adam(s.theta.size());
    return train_epochs(start, batch, opts, extra);
}

struct UpstreamOptions {
    std::size_t epochs = 30;
    double lr = 1e-2;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    bool operator==(const UpstreamOptions&) const = default;
};

struct UpstreamResult {
    LearnerState model;
    double train_accuracy = 0.0;
    double final_loss = 0.0;
};

// f_0: mini-batch training from initialization on the upstream pool.
inline UpstreamResult train_upstream(Batch upstream, std::size_t d, std::size_t K, const Arch& arch,
                                     const UpstreamOptions& opts) {
    if (upstream.empty()) throw ValidationError("train_upstream: empty upstream pool");
    LearnerState s = init_learner(arch, d, K, opts.seed);
    TrainOptions epoch_opts{opts.lr, 1, opts.batch_size, 0};
    for (std::size_t e = 0; e < opts.epochs; ++e) {
        epoch_opts.seed = derive_seed(opts.seed, "upstream-epoch", e);
        auto diverged = [&](const std::string& detail) {
            return RuntimeError("train_upstream diverged at epoch " + std::to_string(e + 1) +
                                " (lr=" + format_double(opts.lr) + ", " + detail + ")");
        };
        try {
            s = train_epochs(s, upstream, epoch_opts);
        } catch (const RuntimeError& err) {
            throw diverged(err.what());
        }
        const double l = loss(s, upstream);
        if (!std::isfinite(l)) throw diverged("loss=" + format_double(l));
    }
    UpstreamResult r;
    r.train_accuracy = accuracy(s, upstream);
    r.final_loss = loss(s, upstream);
    s.optimizer = fresh_adam(s.theta.size());
    r.model = std::move(s);
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: a single JSON object with a format/version tag.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const Arch& a) {
    nlohmann::ordered_json j;
    j["kind"] = a.kind == ArchKind::Softmax ? "softmax" : "mlp";
    j["hidden"] = a.hidden;
    return j;
}

template <typename Json>
Arch arch_from_json(const Json& j) {
    const std::string kind = j.value("kind", std::string("softmax"));
    if (kind == "softmax") return Arch::softmax();
    if (kind == "mlp") return Arch::mlp(j.value("hidden", std::size_t{32}));
    throw ValidationError("unknown arch kind '" + kind + "'");
}

inline std::string serialize_checkpoint(const LearnerState& s) {
    nlohmann::ordered_json j;
    j["format"] = "cmr-checkpoint";
    j["version"] = 1;
    j["arch"] = to_json(s.arch);
    j["d"] = s.d;
    j["K"] = s.K;
    j["theta"] = s.theta;
    j["adam"] = {{"m", s.optimizer.m}, {"v", s.optimizer.v}, {"steps", s.optimizer.steps}};
    return j.dump() + "\n";
}

inline LearnerState parse_checkpoint(const std::string& text) {
    LearnerState s;
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.at("format") != "cmr-checkpoint" || j.at("version") != 1)
            throw ValidationError("checkpoint: unsupported format or version");
        s.arch = arch_from_json(j.at("arch"));
        s.d = j.at("d").get<std::size_t>();
        s.K = j.at("K").get<std::size_t>();
        s.theta = j.at("theta").get<std::vector<double>>();
        s.optimizer.m = j.at("adam").at("m").get<std::vector<double>>();
        s.optimizer.v = j.at("adam").at("v").get<std::vector<double>>();
        s.optimizer.steps = j.at("adam").at("steps").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("checkpoint: ") + e.what());
    }
    const std::size_t n = s.arch.param_count(s.d, s.K);
    if (s.theta.size() != n || s.optimizer.m.size() != n || s.optimizer.v.size() != n)
        throw ValidationError("checkpoint: parameter count does not match arch");
    return s;
}

inline void save_checkpoint(const LearnerState& s, const std::filesystem::path& p) {
    write_text_file(p, serialize_checkpoint(s));
}
inline LearnerState load_checkpoint(const std::filesystem::path& p) { return parse_checkpoint(read_text_file(p)); }

} // namespace cmr
