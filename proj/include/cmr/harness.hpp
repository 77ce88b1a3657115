#pragma once

// Episode loop, reference baselines, run I/O, hyperparameter sweep and the
// stream-dynamics gain grid.
//
// Seeds: a run's master seed feeds independent sub-streams through
// derive_seed(seed, key): "method" for refinement internals and "metrics" for
// the evaluation samples. Stream sampling and upstream training have their own
// seeds, so switching methods never changes the stream or f_0.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmr/cluster_store.hpp"
#include "cmr/error.hpp"
#include "cmr/io.hpp"
#include "cmr/learner.hpp"
#include "cmr/metrics.hpp"
#include "cmr/refiners.hpp"
#include "cmr/replay_memory.hpp"
#include "cmr/stream_sampler.hpp"

namespace cmr {

struct LearnerConfig {
    Arch arch = Arch::mlp(32);
    UpstreamOptions upstream;

    bool operator==(const LearnerConfig&) const = default;
};

struct RunConfig {
    std::string run_id = "run";
    std::string clusters;  // cluster file path (informational when inputs are in memory)
    std::string stream;    // stream file path; empty means sample from stream_config
    std::string upstream_checkpoint;  // optional f_0 checkpoint; empty means train it
    StreamConfig stream_config;
    RefinerConfig refiner;
    LearnerConfig learner;
    MetricSettings metrics;
    std::uint64_t seed = 0;

    bool operator==(const RunConfig&) const = default;
};

struct PredictionRecord {
    std::size_t t = 0;
    std::uint64_t id = 0;
    std::size_t cluster_id = 0;
    std::size_t label = 0;
    std::size_t predicted = 0;

    bool is_error() const { return predicted != label; }
    bool operator==(const PredictionRecord&) const = default;
};

struct RunResult {
    RunConfig config;
    MetricTrace trace;
    AggregateReport report;
    std::vector<PredictionRecord> predictions;  // f_{t-1} on Q_t, every episode
    LearnerState final_model;
    std::vector<OnlineEntry> memory;  // replay methods only
    double wall_seconds = 0.0;
};

struct RunInputs {
    const ClusterSet& clusters;
    const QueryStream& stream;
    const LearnerState& f0;
};

inline std::uint64_t method_seed(const RunConfig& c) { return derive_seed(c.seed, "method"); }
inline std::uint64_t metrics_seed(const RunConfig& c) { return derive_seed(c.seed, "metrics"); }

inline UpstreamResult train_f0(const ClusterSet& clusters, const LearnerConfig& cfg) {
    return train_upstream(clusters.clusters.at(0), clusters.d, clusters.K, cfg.arch, cfg.upstream);
}

// for t = 1..T: E_t = errors of f_{t-1} on Q_t; f_t = g(f_{t-1}, E_t); record metrics of f_t.
inline RunResult run_episode_loop(const LearnerState& f0, const QueryStream& stream, Refiner& refiner,
                                  MetricRecorder& recorder) {
    RunResult result;
    LearnerState f = f0;
    std::vector<Example> errors;
    for (const Episode& ep : stream.episodes) {
        try {
            errors.clear();
            for (const Example& ex : ep.examples) {
                const std::size_t p = predict(f, ex.features);
                result.predictions.push_back({ep.t, ex.id, ex.cluster_id, ex.label, p});
                if (p != ex.label) errors.push_back(ex);
            }
            LearnerState next = refiner.refine(f, errors, ep.t);
            for (double v : next.theta)
                if (!std::isfinite(v)) throw RuntimeError("non-finite parameters after refinement");
            recorder.record(ep.t, ep.examples, errors, next);
            f = std::move(next);
        } catch (const std::exception& e) {
            throw RuntimeError("run aborted at t=" + std::to_string(ep.t) + ": " + e.what());
        }
    }
    result.trace = recorder.trace();
    result.report = aggregate(result.trace);
    result.final_model = std::move(f);
    result.memory = refiner.memory().online();
    return result;
}

inline RunResult run_online(const RunInputs& in, const RunConfig& cfg) {
    const auto started = std::chrono::steady_clock::now();
    Refiner refiner(cfg.refiner, in.f0, in.clusters.clusters.at(0), method_seed(cfg));
    MetricRecorder recorder(cfg.metrics, in.clusters.clusters.at(0), in.stream.heldout_set, in.stream.episodes.size(),
                            metrics_seed(cfg));
    RunResult r = run_episode_loop(in.f0, in.stream, refiner, recorder);
    if (!uses_replay(cfg.refiner.method)) r.memory.clear();
    r.config = cfg;
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return r;
}

inline RunResult run_reference_frozen(const RunInputs& in, RunConfig cfg) {
    cfg.refiner.method = Method::Frozen;
    return run_online(in, cfg);
}

// Offline reference. A frozen pass collects E_{<=T} (the errors of f_0), then
// f_T = offline_refine(f_0, D', E_{<=T}). The trace holds one record at t = T,
// measured on f_T with the same samples the online runs use at t = T; CSR and
// EFR count f_T's own successes on Q_<T and on E_{<=T}.
inline RunResult run_offline(const RunInputs& in, RunConfig cfg) {
    const auto started = std::chrono::steady_clock::now();
    cfg.refiner.method = Method::Offline;
    RunResult r;
    r.config = cfg;
    std::vector<Example> all_errors, past;
    for (const Episode& ep : in.stream.episodes)
        for (const Example& ex : ep.examples) {
            const std::size_t p = predict(in.f0, ex.features);
            r.predictions.push_back({ep.t, ex.id, ex.cluster_id, ex.label, p});
            if (p != ex.label) all_errors.push_back(ex);
        }
    const LearnerState fT =
        offline_refine(in.f0, in.clusters.clusters.at(0), all_errors, cfg.refiner, method_seed(cfg));

    const std::size_t T = in.stream.episodes.size();
    for (std::size_t i = 0; i + 1 < T; ++i)
        past.insert(past.end(), in.stream.episodes[i].examples.begin(), in.stream.episodes[i].examples.end());
    const std::uint64_t mseed = metrics_seed(cfg);
    const auto upstream_sample =
        fixed_sample(in.clusters.clusters.at(0), cfg.metrics.ukr_sample, derive_seed(mseed, "ukr-sample"));
    const auto okr_sample = fixed_sample(past, cfg.metrics.okr_sample, derive_seed(mseed, "okr-sample", T));
    std::size_t past_errors = 0;
    for (const auto& ex : past) past_errors += is_correct(fT, ex) ? 0 : 1;

    StepRecord rec;
    rec.t = T;
    rec.q_size = in.stream.episodes.back().examples.size();
    rec.e_size = all_errors.size();
    rec.efr = efr(fT, all_errors);
    rec.ukr = ukr(fT, upstream_sample);
    rec.okr = okr(fT, okr_sample);
    rec.csr = csr(past_errors, past.size());
    rec.kg = kg(fT, in.stream.heldout_set);
    r.trace.settings = cfg.metrics;
    r.trace.sample_seed = mseed;
    r.trace.steps.push_back(rec);
    r.report = aggregate(r.trace);
    r.final_model = fT;
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return r;
}

inline RunResult run_method(const RunInputs& in, const RunConfig& cfg) {
    if (cfg.refiner.method == Method::Offline) return run_offline(in, cfg);
    return run_online(in, cfg);
}

// ---------------------------------------------------------------------------
// Config and result files
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["run_id"] = c.run_id;
    j["clusters"] = c.clusters;
    j["stream"] = c.stream;
    j["upstream_checkpoint"] = c.upstream_checkpoint;
    j["stream_config"] = to_json(c.stream_config);
    j["refiner"] = to_json(c.refiner);
    nlohmann::ordered_json l;
    l["arch"] = to_json(c.learner.arch);
    l["upstream_epochs"] = c.learner.upstream.epochs;
    l["upstream_lr"] = c.learner.upstream.lr;
    l["upstream_batch_size"] = c.learner.upstream.batch_size;
    l["upstream_seed"] = c.learner.upstream.seed;
    j["learner"] = l;
    nlohmann::ordered_json m;
    m["ukr_sample"] = c.metrics.ukr_sample;
    m["okr_sample"] = c.metrics.okr_sample;
    m["eval_interval"] = c.metrics.eval_interval;
    j["metrics"] = m;
    j["seed"] = c.seed;
    return j;
}

template <typename Json>
RunConfig run_config_from_json(const Json& j, RunConfig c = {}) {
    try {
        c.run_id = j.value("run_id", c.run_id);
        c.clusters = j.value("clusters", c.clusters);
        c.stream = j.value("stream", c.stream);
        c.upstream_checkpoint = j.value("upstream_checkpoint", c.upstream_checkpoint);
        if (j.contains("stream_config")) c.stream_config = stream_config_from_json(j.at("stream_config"));
        if (j.contains("refiner")) {
            const auto& rj = j.at("refiner");
            RefinerConfig base = c.refiner;
            if (rj.contains("method"))
                base = default_refiner_config(method_from_string(rj.at("method").template get<std::string>()));
            c.refiner = refiner_config_from_json(rj, base);
        }
        if (j.contains("learner")) {
            const auto& l = j.at("learner");
            if (l.contains("arch")) c.learner.arch = arch_from_json(l.at("arch"));
            c.learner.upstream.epochs = l.value("upstream_epochs", c.learner.upstream.epochs);
            c.learner.upstream.lr = l.value("upstream_lr", c.learner.upstream.lr);
            c.learner.upstream.batch_size = l.value("upstream_batch_size", c.learner.upstream.batch_size);
            c.learner.upstream.seed = l.value("upstream_seed", c.learner.upstream.seed);
        }
        if (j.contains("metrics")) {
            const auto& m = j.at("metrics");
            c.metrics.ukr_sample = m.value("ukr_sample", c.metrics.ukr_sample);
            c.metrics.okr_sample = m.value("okr_sample", c.metrics.okr_sample);
            c.metrics.eval_interval = m.value("eval_interval", c.metrics.eval_interval);
        }
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("run config: ") + e.what());
    }
    return c;
}

inline std::string serialize_predictions_csv(const std::vector<PredictionRecord>& preds) {
    std::string out = "t,id,cluster_id,label,predicted\n";
    for (const auto& p : preds)
        out += std::to_string(p.t) + "," + std::to_string(p.id) + "," + std::to_string(p.cluster_id) + "," +
               std::to_string(p.label) + "," + std::to_string(p.predicted) + "\n";
    return out;
}

inline std::vector<PredictionRecord> parse_predictions_csv(const std::string& text) {
    std::vector<PredictionRecord> out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        if (++line_no == 1 || line.empty()) continue;
        PredictionRecord p;
        unsigned long long v[5];
        if (std::sscanf(line.c_str(), "%llu,%llu,%llu,%llu,%llu", &v[0], &v[1], &v[2], &v[3], &v[4]) != 5)
            throw ValidationError("predictions csv line " + std::to_string(line_no) + ": malformed");
        p.t = v[0];
        p.id = v[1];
        p.cluster_id = v[2];
        p.label = v[3];
        p.predicted = v[4];
        out.push_back(p);
    }
    return out;
}

struct InputHashes {
    std::string clusters;
    std::string stream;
};

// Writes the deterministic run files (config.json, report.json, trace.csv,
// predictions.csv, model.json, memory.csv) plus timing.json, which holds the
// wall-clock and is the only file that varies between identical runs.
inline void write_run(const RunResult& r, const std::filesystem::path& dir, const InputHashes& hashes) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json cj = to_json(r.config);
    cj["inputs"] = {{"clusters_hash", hashes.clusters}, {"stream_hash", hashes.stream}};
    const std::string config_text = cj.dump(2) + "\n";
    write_text_file(dir / "config.json", config_text);
    nlohmann::ordered_json rep;
    rep["run_id"] = r.config.run_id;
    rep["method"] = to_string(r.config.refiner.method);
    rep["config_hash"] = content_hash(config_text);
    rep["report"] = to_json(r.report);
    write_text_file(dir / "report.json", rep.dump(2) + "\n");
    write_text_file(dir / "trace.csv", serialize_trace_csv(r.trace));
    write_text_file(dir / "predictions.csv", serialize_predictions_csv(r.predictions));
    write_text_file(dir / "model.json", serialize_checkpoint(r.final_model));
    std::string mem = "id,t\n";
    for (const auto& e : r.memory) mem += std::to_string(e.example.id) + "," + std::to_string(e.t) + "\n";
    write_text_file(dir / "memory.csv", mem);
    nlohmann::ordered_json timing;
    timing["wall_seconds"] = r.wall_seconds;
    write_text_file(dir / "timing.json", timing.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Parallel fan-out with a deterministic merge: results land at their job index.
// ---------------------------------------------------------------------------

template <typename R>
std::vector<R> run_parallel(std::size_t n_jobs, const std::function<R(std::size_t)>& job, std::size_t threads) {
    std::vector<std::optional<R>> slots(n_jobs);
    std::vector<std::exception_ptr> failures(n_jobs);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n_jobs; i = next++) {
            try {
                slots[i] = job(i);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, n_jobs));
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    for (auto& f : failures)
        if (f) std::rethrow_exception(f);
    std::vector<R> out;
    out.reserve(n_jobs);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

inline std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

// Every combination of the listed values, applied over `base`, sorted by the
// canonical JSON text of the resulting config. `grid` maps a RefinerConfig key
// to an array of values.
inline std::vector<RefinerConfig> expand_grid(const RefinerConfig& base, const nlohmann::json& grid) {
    std::vector<nlohmann::json> combos{nlohmann::json::object()};
    for (const auto& [key, values] : grid.items()) {
        if (!values.is_array() || values.empty())
            throw ValidationError("grid: '" + key + "' must be a non-empty array");
        std::vector<nlohmann::json> next;
        for (const auto& partial : combos)
            for (const auto& v : values) {
                auto c = partial;
                c[key] = v;
                next.push_back(std::move(c));
            }
        combos = std::move(next);
    }
    std::vector<std::pair<std::string, RefinerConfig>> keyed;
    for (const auto& c : combos) {
        RefinerConfig rc = refiner_config_from_json(c, base);
        keyed.emplace_back(to_json(rc).dump(), rc);
    }
    std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    keyed.erase(std::unique(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first == b.first; }),
                keyed.end());
    std::vector<RefinerConfig> out;
    for (auto& [k, rc] : keyed) out.push_back(std::move(rc));
    return out;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd m;
    if (xs.empty()) return m;
    for (double x : xs) m.mean += x;
    m.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return m;
}

// Validation criterion: (OEC@T + EFR@T) / 2, absent values counted as 0.
inline double selection_score(const AggregateReport& a) {
    return (a.oec.at_T.value_or(0.0) + a.efr.at_T.value_or(0.0)) / 2.0;
}

struct LeaderboardEntry {
    Method method = Method::Cft;
    RefinerConfig best;
    double validation_score = 0.0;
    std::vector<double> candidate_scores;  // per expanded grid point, canonical order
    std::vector<AggregateReport> test_reports;
    std::map<std::string, MeanStd> summary;  // "AVG(UKR)", "OEC@T", ...
};

using Leaderboard = std::vector<LeaderboardEntry>;

struct SweepSpec {
    std::vector<std::pair<Method, nlohmann::json>> grids;  // one grid per method
    RunConfig base;
    std::size_t n_seeds = 5;
    std::size_t threads = default_threads();
};

inline std::map<std::string, MeanStd> summarize_reports(const std::vector<AggregateReport>& reports) {
    std::map<std::string, MeanStd> out;
    auto add = [&](const std::string& name, auto get) {
        std::vector<double> xs;
        for (const auto& r : reports)
            if (auto v = get(r)) xs.push_back(*v);
        out[name] = mean_std(xs);
    };
    add("AVG(EFR)", [](const AggregateReport& a) { return a.efr.avg; });
    add("AVG(UKR)", [](const AggregateReport& a) { return a.ukr.avg; });
    add("AVG(OKR)", [](const AggregateReport& a) { return a.okr.avg; });
    add("AVG(CSR)", [](const AggregateReport& a) { return a.csr.avg; });
    add("AVG(KG)", [](const AggregateReport& a) { return a.kg.avg; });
    add("AVG(OEC)", [](const AggregateReport& a) { return a.oec.avg; });
    add("EFR@T", [](const AggregateReport& a) { return a.efr.at_T; });
    add("UKR@T", [](const AggregateReport& a) { return a.ukr.at_T; });
    add("OKR@T", [](const AggregateReport& a) { return a.okr.at_T; });
    add("CSR@T", [](const AggregateReport& a) { return a.csr.at_T; });
    add("KG@T", [](const AggregateReport& a) { return a.kg.at_T; });
    add("OEC@T", [](const AggregateReport& a) { return a.oec.at_T; });
    return out;
}

inline std::uint64_t sweep_seed(const RunConfig& base, std::size_t i) { return derive_seed(base.seed, "sweep-seed", i); }

// Grid search on validation streams (one run per stream at the base seed), then
// the winner on every test stream x n_seeds. Ties keep the earliest config in
// canonical order.
inline Leaderboard sweep(const SweepSpec& spec, const ClusterSet& clusters, const LearnerState& f0,
                         const std::vector<QueryStream>& validation, const std::vector<QueryStream>& test) {
    if (validation.empty() || test.empty()) throw ValidationError("sweep: need validation and test streams");
    Leaderboard board;
    for (const auto& [method, grid] : spec.grids) {
        // Shared training knobs come from the base config; method-specific
        // weights (lambda, ewc_gamma) from the method defaults unless gridded.
        RefinerConfig base = spec.base.refiner;
        const RefinerConfig md = default_refiner_config(method);
        base.method = method;
        base.lambda = md.lambda;
        base.ewc_gamma = md.ewc_gamma;
        const auto candidates = expand_grid(base, grid);
        if (candidates.empty()) throw ValidationError("sweep: empty grid for " + to_string(method));

        const std::size_t nv = validation.size();
        const auto val_scores = run_parallel<double>(
            candidates.size() * nv,
            [&](std::size_t job) {
                RunConfig cfg = spec.base;
                cfg.refiner = candidates[job / nv];
                const QueryStream& s = validation[job % nv];
                return selection_score(run_method({clusters, s, f0}, cfg).report);
            },
            spec.threads);

        LeaderboardEntry e;
        e.method = method;
        std::size_t best = 0;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            double acc = 0.0;
            for (std::size_t v = 0; v < nv; ++v) acc += val_scores[c * nv + v];
            e.candidate_scores.push_back(acc / static_cast<double>(nv));
            if (e.candidate_scores[c] > e.candidate_scores[best]) best = c;
        }
        e.best = candidates[best];
        e.validation_score = e.candidate_scores[best];

        const std::size_t nt = test.size() * spec.n_seeds;
        e.test_reports = run_parallel<AggregateReport>(
            nt,
            [&](std::size_t job) {
                RunConfig cfg = spec.base;
                cfg.refiner = e.best;
                cfg.seed = sweep_seed(spec.base, job % spec.n_seeds);
                return run_method({clusters, test[job / spec.n_seeds], f0}, cfg).report;
            },
            spec.threads);
        e.summary = summarize_reports(e.test_reports);
        board.push_back(std::move(e));
    }
    return board;
}

// ---------------------------------------------------------------------------
// Stream-dynamics grid: OEC@T gain over FrozenUpstream per (alpha, beta, gamma)
// ---------------------------------------------------------------------------

struct DynamicsVariant {
    double alpha = 0.9;
    double beta = 0.5;
    double gamma = 0.8;
};

struct GainRow {
    DynamicsVariant variant;
    double frozen_oec = 0.0;                  // mean OEC@T of FrozenUpstream
    std::vector<double> method_oec;           // mean OEC@T per method
    std::vector<double> gains;                // method_oec - frozen_oec
    std::vector<std::vector<double>> per_seed_gain;  // [method][seed]
};

inline std::uint64_t dynamics_stream_seed(const StreamConfig& base, std::size_t s) {
    return derive_seed(base.seed, "dynamics-stream", s);
}

// Methods keep their given (base-tuned) hyperparameters for every variant.
inline std::vector<GainRow> dynamics_grid(const ClusterSet& clusters, const LearnerState& f0, const RunConfig& base,
                                          const std::vector<DynamicsVariant>& variants,
                                          const std::vector<RefinerConfig>& methods, std::size_t n_seeds,
                                          std::size_t threads = default_threads()) {
    if (variants.empty()) throw ValidationError("dynamics grid: no variants");
    if (n_seeds < 1) throw ValidationError("dynamics grid: n_seeds must be >= 1");
    std::vector<GainRow> rows;
    for (const auto& v : variants) {
        std::vector<QueryStream> streams;
        for (std::size_t s = 0; s < n_seeds; ++s) {
            StreamConfig sc = base.stream_config;
            sc.alpha = v.alpha;
            sc.beta = v.beta;
            sc.gamma = v.gamma;
            sc.seed = dynamics_stream_seed(base.stream_config, s);
            streams.push_back(sample_stream(clusters, sc));
        }
        const std::size_t n_methods = methods.size() + 1;  // slot 0 = frozen
        const auto oecs = run_parallel<double>(
            n_methods * n_seeds,
            [&](std::size_t job) {
                RunConfig cfg = base;
                cfg.seed = derive_seed(base.seed, "dynamics-seed", job % n_seeds);
                const std::size_t m = job / n_seeds;
                if (m == 0)
                    cfg.refiner.method = Method::Frozen;
                else
                    cfg.refiner = methods[m - 1];
                return run_method({clusters, streams[job % n_seeds], f0}, cfg).report.oec.at_T.value_or(0.0);
            },
            threads);
        GainRow row;
        row.variant = v;
        auto mean_of = [&](std::size_t m) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n_seeds; ++s) acc += oecs[m * n_seeds + s];
            return acc / static_cast<double>(n_seeds);
        };
        row.frozen_oec = mean_of(0);
        for (std::size_t m = 1; m < n_methods; ++m) {
            row.method_oec.push_back(mean_of(m));
            row.gains.push_back(row.method_oec.back() - row.frozen_oec);
            std::vector<double> per;
            for (std::size_t s = 0; s < n_seeds; ++s) per.push_back(oecs[m * n_seeds + s] - oecs[s]);
            row.per_seed_gain.push_back(std::move(per));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

struct ReportRow {
    std::string name;
    AggregateReport report;
};

inline const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> cols{"AVG(EFR)", "AVG(UKR)", "AVG(OKR)", "AVG(CSR)", "AVG(KG)", "AVG(OEC)",
                                               "UKR@T",    "OKR@T",    "CSR@T",    "KG@T",    "OEC@T"};
    return cols;
}

inline std::vector<std::optional<double>> report_values(const AggregateReport& a) {
    return {a.efr.avg, a.ukr.avg, a.okr.avg, a.csr.avg, a.kg.avg, a.oec.avg,
            a.ukr.at_T, a.okr.at_T, a.csr.at_T, a.kg.at_T, a.oec.at_T};
}

inline std::string render_report(const std::vector<ReportRow>& rows, const std::string& format) {
    const auto& cols = report_columns();
    std::string out;
    if (format == "csv") {
        out = "run";
        for (const auto& c : cols) out += "," + c;
        out += "\n";
        for (const auto& r : rows) {
            out += r.name;
            for (const auto& v : report_values(r.report)) out += "," + percent(v);
            out += "\n";
        }
        return out;
    }
    if (format == "json") {
        nlohmann::ordered_json j = nlohmann::ordered_json::array();
        for (const auto& r : rows) {
            nlohmann::ordered_json e;
            e["run"] = r.name;
            const auto vals = report_values(r.report);
            for (std::size_t i = 0; i < cols.size(); ++i)
                e[cols[i]] = vals[i] ? nlohmann::ordered_json(*vals[i]) : nlohmann::ordered_json(nullptr);
            j.push_back(e);
        }
        return j.dump(2) + "\n";
    }
    if (format != "table") throw ValidationError("report: unknown format '" + format + "'");
    std::size_t w = 6;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    auto pad = [](std::string s, std::size_t n, bool left) {
        while (s.size() < n) s = left ? s + " " : " " + s;
        return s;
    };
    out += pad("Run", w, true);
    for (const auto& c : cols) out += " | " + pad(c, 8, false);
    out += "\n" + std::string(w, '-');
    for (std::size_t i = 0; i < cols.size(); ++i) out += "-+-" + std::string(8, '-');
    out += "\n";
    for (const auto& r : rows) {
        out += pad(r.name, w, true);
        for (const auto& v : report_values(r.report)) out += " | " + pad(percent(v), 8, false);
        out += "\n";
    }
    return out;
}

} // namespace cmr
