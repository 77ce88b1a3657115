#pragma once

// Per-step refinement metrics and their aggregates.
//   EFR(t) = Acc(f_t, E_t)                 error-fixing rate
//   UKR(t) = Acc(f_t, upstream sample)     upstream knowledge retention
//   OKR(t) = Acc(f_t, sample of Q_<t)      online knowledge retention
//   CSR(t) = 1 - |E_<t| / |Q_<t|           cumulative success rate
//   KG(t)  = Acc(f_t, H)                   knowledge generalization
//   OEC    = mean(UKR, OKR, CSR, KG)
// Values are fractions; absent values (E_t empty, t = 1) are std::nullopt.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmr/cluster_store.hpp"
#include "cmr/error.hpp"
#include "cmr/io.hpp"
#include "cmr/learner.hpp"
#include "cmr/rng.hpp"

namespace cmr {

struct StepRecord {
    std::size_t t = 0;
    std::size_t q_size = 0;
    std::size_t e_size = 0;
    std::optional<double> efr, ukr, okr, csr, kg;
    bool carried = false;  // ukr/okr/kg copied from the last evaluated step

    bool operator==(const StepRecord&) const = default;
};

struct MetricSettings {
    std::size_t ukr_sample = 512;
    std::size_t okr_sample = 1024;
    std::size_t eval_interval = 1;  // m

    bool operator==(const MetricSettings&) const = default;
};

struct MetricTrace {
    std::vector<StepRecord> steps;
    MetricSettings settings;
    std::uint64_t sample_seed = 0;

    bool operator==(const MetricTrace&) const = default;
};

inline std::optional<double> efr(const LearnerState& f_t, Batch errors) {
    if (errors.empty()) return std::nullopt;
    return accuracy(f_t, errors);
}

inline double ukr(const LearnerState& f_t, Batch upstream_sample) { return accuracy(f_t, upstream_sample); }

inline std::optional<double> okr(const LearnerState& f_t, Batch past_sample) {
    if (past_sample.empty()) return std::nullopt;
    return accuracy(f_t, past_sample);
}

inline std::optional<double> csr(std::size_t past_errors, std::size_t past_queries) {
    if (past_queries == 0) return std::nullopt;
    return 1.0 - static_cast<double>(past_errors) / static_cast<double>(past_queries);
}

inline double kg(const LearnerState& f_t, Batch heldout) { return accuracy(f_t, heldout); }

// A fixed uniform subset of min(n, |pool|) examples.
inline std::vector<Example> fixed_sample(Batch pool, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Example> out;
    for (std::size_t pos : rng.sample_without_replacement(pool.size(), n)) out.push_back(pool[pos]);
    return out;
}

// Appends one StepRecord per episode. Call record() after f_t is produced.
class MetricRecorder {
public:
    MetricRecorder(MetricSettings settings, Batch upstream_pool, std::vector<Example> heldout, std::size_t T,
                   std::uint64_t seed)
        : heldout_(std::move(heldout)), T_(T) {
        if (settings.eval_interval < 1) throw ValidationError("metrics: eval interval must be >= 1");
        if (heldout_.empty()) throw ValidationError("metrics: empty held-out set");
        trace_.settings = settings;
        trace_.sample_seed = seed;
        upstream_sample_ = fixed_sample(upstream_pool, settings.ukr_sample, derive_seed(seed, "ukr-sample"));
        if (upstream_sample_.empty()) throw ValidationError("metrics: empty upstream sample");
    }

    const std::vector<Example>& upstream_sample() const { return upstream_sample_; }
    const MetricTrace& trace() const { return trace_; }

    bool scheduled(std::size_t t) const { return t % trace_.settings.eval_interval == 0 || t == T_ || t == 1; }

    void record(std::size_t t, Batch queries, Batch errors, const LearnerState& f_t) {
        StepRecord r;
        r.t = t;
        r.q_size = queries.size();
        r.e_size = errors.size();
        r.efr = efr(f_t, errors);
        r.csr = csr(past_errors_, past_queries_.size());
        if (scheduled(t)) {
            r.ukr = ukr(f_t, upstream_sample_);
            const auto sample = fixed_sample(past_queries_, trace_.settings.okr_sample,
                                             derive_seed(trace_.sample_seed, "okr-sample", t));
            r.okr = okr(f_t, sample);
            r.kg = kg(f_t, heldout_);
            last_ = r;
        } else {
            r.ukr = last_.ukr;
            r.okr = last_.okr;
            r.kg = last_.kg;
            r.carried = true;
        }
        trace_.steps.push_back(r);
        past_errors_ += errors.size();
        past_queries_.insert(past_queries_.end(), queries.begin(), queries.end());
    }

private:
    std::vector<Example> heldout_;
    std::size_t T_;
    std::vector<Example> upstream_sample_;
    std::vector<Example> past_queries_;
    std::size_t past_errors_ = 0;
    StepRecord last_;
    MetricTrace trace_;
};

struct MetricSummary {
    std::optional<double> avg;
    std::optional<double> at_T;

    bool operator==(const MetricSummary&) const = default;
};

struct AggregateReport {
    MetricSummary efr, ukr, okr, csr, kg, oec;

    bool operator==(const AggregateReport&) const = default;
};

namespace detail {

template <typename Get>
MetricSummary summarize(const MetricTrace& trace, Get get) {
    MetricSummary s;
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& r : trace.steps) {
        const std::optional<double> v = get(r);
        if (!v) continue;
        acc += *v;
        ++n;
        s.at_T = v;
    }
    if (n > 0) s.avg = acc / static_cast<double>(n);
    return s;
}

inline std::optional<double> mean4(std::optional<double> a, std::optional<double> b, std::optional<double> c,
                                   std::optional<double> d) {
    if (!a || !b || !c || !d) return std::nullopt;
    return (*a + *b + *c + *d) / 4.0;
}

} // namespace detail

inline std::optional<double> oec(std::optional<double> ukr_v, std::optional<double> okr_v, std::optional<double> csr_v,
                                 std::optional<double> kg_v) {
    return detail::mean4(ukr_v, okr_v, csr_v, kg_v);
}

// AVG(X) is the mean over steps where X is recorded; X@T is the last recorded value.
inline AggregateReport aggregate(const MetricTrace& trace) {
    AggregateReport a;
    a.efr = detail::summarize(trace, [](const StepRecord& r) { return r.efr; });
    a.ukr = detail::summarize(trace, [](const StepRecord& r) { return r.ukr; });
    a.okr = detail::summarize(trace, [](const StepRecord& r) { return r.okr; });
    a.csr = detail::summarize(trace, [](const StepRecord& r) { return r.csr; });
    a.kg = detail::summarize(trace, [](const StepRecord& r) { return r.kg; });
    a.oec.avg = oec(a.ukr.avg, a.okr.avg, a.csr.avg, a.kg.avg);
    a.oec.at_T = oec(a.ukr.at_T, a.okr.at_T, a.csr.at_T, a.kg.at_T);
    return a;
}

// Percent with two decimals, "-" when absent.
inline std::string percent(std::optional<double> v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
    return buf;
}

// ---------------------------------------------------------------------------
// Trace CSV: t,q_size,e_size,efr,ukr,okr,csr,kg,carried  (empty cell = absent)
// ---------------------------------------------------------------------------

inline std::string serialize_trace_csv(const MetricTrace& trace) {
    std::string out = "t,q_size,e_size,efr,ukr,okr,csr,kg,carried\n";
    auto cell = [](std::optional<double> v) { return v ? format_double(*v) : std::string(); };
    for (const auto& r : trace.steps) {
        out += std::to_string(r.t) + "," + std::to_string(r.q_size) + "," + std::to_string(r.e_size) + "," +
               cell(r.efr) + "," + cell(r.ukr) + "," + cell(r.okr) + "," + cell(r.csr) + "," + cell(r.kg) + "," +
               (r.carried ? "1" : "0") + "\n";
    }
    return out;
}

inline std::vector<StepRecord> parse_trace_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<StepRecord> steps;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1 || line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (cells.size() != 9) throw ValidationError("trace csv line " + std::to_string(line_no) + ": expected 9 cells");
        auto opt = [](const std::string& c) -> std::optional<double> {
            if (c.empty()) return std::nullopt;
            return std::stod(c);
        };
        StepRecord r;
        r.t = std::stoul(cells[0]);
        r.q_size = std::stoul(cells[1]);
        r.e_size = std::stoul(cells[2]);
        r.efr = opt(cells[3]);
        r.ukr = opt(cells[4]);
        r.okr = opt(cells[5]);
        r.csr = opt(cells[6]);
        r.kg = opt(cells[7]);
        r.carried = cells[8] == "1";
        steps.push_back(r);
    }
    return steps;
}

inline nlohmann::ordered_json to_json(const MetricSummary& s) {
    nlohmann::ordered_json j;
    j["avg"] = s.avg ? nlohmann::ordered_json(*s.avg) : nlohmann::ordered_json(nullptr);
    j["at_T"] = s.at_T ? nlohmann::ordered_json(*s.at_T) : nlohmann::ordered_json(nullptr);
    return j;
}

inline nlohmann::ordered_json to_json(const AggregateReport& a) {
    nlohmann::ordered_json j;
    j["efr"] = to_json(a.efr);
    j["ukr"] = to_json(a.ukr);
    j["okr"] = to_json(a.okr);
    j["csr"] = to_json(a.csr);
    j["kg"] = to_json(a.kg);
    j["oec"] = to_json(a.oec);
    return j;
}

template <typename Json>
AggregateReport aggregate_from_json(const Json& j) {
    auto summary = [](const Json& s) {
        MetricSummary m;
        if (!s.at("avg").is_null()) m.avg = s.at("avg").template get<double>();
        if (!s.at("at_T").is_null()) m.at_T = s.at("at_T").template get<double>();
        return m;
    };
    AggregateReport a;
    try {
        a.efr = summary(j.at("efr"));
        a.ukr = summary(j.at("ukr"));
        a.okr = summary(j.at("okr"));
        a.csr = summary(j.at("csr"));
        a.kg = summary(j.at("kg"));
        a.oec = summary(j.at("oec"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("aggregate report: ") + e.what());
    }
    return a;
}

} // namespace cmr
