#pragma once

// Query streams with controllable non-stationarity. Episode t takes
//   b_u  = round(b * alpha^(t-1))        examples from the upstream pool V_0,
//   b_o' = round((b - b_u) * gamma)      from the major OOD cluster c_t,
//   b_o - b_o'                           from the union of the other OOD clusters,
// where c_t follows a Markov chain that stays put with probability beta.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmr/cluster_store.hpp"
#include "cmr/error.hpp"
#include "cmr/io.hpp"
#include "cmr/rng.hpp"

namespace cmr {

struct StreamConfig {
    std::size_t T = 100;
    std::size_t b = 64;
    double alpha = 0.9;
    double beta = 0.5;
    double gamma = 0.8;
    std::uint64_t seed = 0;
    std::size_t heldout_per_cluster = 100;
    // When set, an example is used at most once in the whole stream.
    bool global_without_replacement = false;

    bool operator==(const StreamConfig&) const = default;
};

struct EpisodeBudget {
    std::size_t upstream = 0;   // b_u
    std::size_t ood = 0;        // b_o
    std::size_t ood_major = 0;  // b_o'

    bool operator==(const EpisodeBudget&) const = default;
};

struct Episode {
    std::size_t t = 0;  // 1-based
    std::vector<Example> examples;
    std::size_t major_cluster = 0;
    EpisodeBudget budget;

    bool operator==(const Episode&) const = default;
};

struct QueryStream {
    StreamConfig config;
    std::vector<Episode> episodes;
    std::vector<Example> heldout_set;
    std::string split;  // "", "validation" or "test"
    std::size_t index = 0;

    bool operator==(const QueryStream&) const = default;
};

inline void validate(const StreamConfig& c) {
    if (c.T < 1) throw ValidationError("stream config: T must be >= 1");
    if (c.b < 1) throw ValidationError("stream config: b must be >= 1");
    if (!(c.alpha > 0.0 && c.alpha <= 1.0)) throw ValidationError("stream config: alpha must be in (0, 1]");
    if (!(c.beta >= 0.0 && c.beta <= 1.0)) throw ValidationError("stream config: beta must be in [0, 1]");
    if (!(c.gamma >= 0.0 && c.gamma <= 1.0)) throw ValidationError("stream config: gamma must be in [0, 1]");
}

// Half away from zero. Products like 50 * 0.9^2 are exact halves in decimal but
// land a few ulps either side in binary; the 1e-9 slack treats those as halves.
inline std::size_t round_half_away(long double x) {
    if (x <= 0) return 0;
    return static_cast<std::size_t>(std::floor(x + 0.5L + 1e-9L));
}

inline EpisodeBudget episode_budget(std::size_t t, const StreamConfig& c) {
    if (t < 1) throw ValidationError("episode_budget: t must be >= 1");
    EpisodeBudget bud;
    const long double share = std::pow(static_cast<long double>(c.alpha), static_cast<long double>(t - 1));
    bud.upstream = std::min(c.b, round_half_away(static_cast<long double>(c.b) * share));
    bud.ood = c.b - bud.upstream;
    bud.ood_major = std::min(bud.ood, round_half_away(static_cast<long double>(bud.ood) * c.gamma));
    return bud;
}

// c_prev with probability beta, otherwise uniform over the other N-1 clusters.
inline std::size_t next_major_cluster(std::size_t c_prev, std::size_t N, double beta, Rng& rng) {
    if (N <= 1) return c_prev;
    if (rng.uniform01() < beta) return c_prev;
    const std::size_t j = rng.uniform_index(N - 1) + 1;  // 1..N-1
    return j < c_prev ? j : j + 1;
}

// Checks the per-episode contract: |Q_t| = b, budget identity, and cluster counts.
inline void check_episode(const Episode& ep, const StreamConfig& c) {
    const std::string tag = "episode " + std::to_string(ep.t) + ": ";
    if (ep.examples.size() != c.b) throw RuntimeError(tag + "|Q_t| != b");
    if (ep.budget.upstream + ep.budget.ood != c.b || ep.budget.ood_major > ep.budget.ood)
        throw RuntimeError(tag + "inconsistent budget");
    std::size_t up = 0, major = 0, other = 0;
    for (const auto& ex : ep.examples) {
        if (ex.cluster_id == 0)
            ++up;
        else if (ex.cluster_id == ep.major_cluster)
            ++major;
        else
            ++other;
    }
    if (up != ep.budget.upstream || major != ep.budget.ood_major || other != ep.budget.ood - ep.budget.ood_major)
        throw RuntimeError(tag + "cluster counts do not match budget");
    for (std::size_t i = 0; i < ep.examples.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (ep.examples[i].id == ep.examples[j].id)
                throw RuntimeError(tag + "example id " + std::to_string(ep.examples[i].id) + " repeats");
}

inline QueryStream sample_stream(const ClusterSet& clusters, const StreamConfig& config) {
    validate(config);
    const std::size_t N = clusters.num_ood();
    QueryStream stream;
    stream.config = config;
    Rng rng(derive_seed(config.seed, "stream"));

    std::vector<std::vector<char>> used(clusters.clusters.size());
    for (std::size_t i = 0; i < used.size(); ++i) used[i].assign(clusters.clusters[i].size(), 0);

    // Draws k examples uniformly without replacement from the listed clusters.
    auto draw = [&](const std::vector<std::size_t>& from, std::size_t k, std::size_t t, const std::string& what,
                    std::vector<Example>& out) {
        if (k == 0) return;
        std::vector<std::pair<std::size_t, std::size_t>> candidates;
        for (std::size_t ci : from)
            for (std::size_t j = 0; j < clusters.clusters[ci].size(); ++j)
                if (!config.global_without_replacement || !used[ci][j]) candidates.emplace_back(ci, j);
        if (candidates.size() < k)
            throw RuntimeError("pool exhaustion in episode " + std::to_string(t) + ": " + what + " has " +
                               std::to_string(candidates.size()) + " examples available, need " + std::to_string(k));
        for (std::size_t pos : rng.sample_without_replacement(candidates.size(), k)) {
            const auto [ci, j] = candidates[pos];
            used[ci][j] = 1;
            out.push_back(clusters.clusters[ci][j]);
        }
    };

    std::size_t c_prev = 0;
    for (std::size_t t = 1; t <= config.T; ++t) {
        Episode ep;
        ep.t = t;
        ep.budget = episode_budget(t, config);
        if (N >= 1) {
            ep.major_cluster = (t == 1) ? rng.uniform_index(N) + 1 : next_major_cluster(c_prev, N, config.beta, rng);
        }
        c_prev = ep.major_cluster;
        if (N == 0 && ep.budget.ood > 0)
            throw RuntimeError("pool exhaustion in episode " + std::to_string(t) +
                               ": no OOD clusters available for b_o=" + std::to_string(ep.budget.ood));
        draw({0}, ep.budget.upstream, t, "cluster V_0", ep.examples);
        if (N >= 1) {
            draw({ep.major_cluster}, ep.budget.ood_major, t, "cluster V_" + std::to_string(ep.major_cluster),
                 ep.examples);
            std::vector<std::size_t> others;
            for (std::size_t k = 1; k <= N; ++k)
                if (k != ep.major_cluster) others.push_back(k);
            draw(others, ep.budget.ood - ep.budget.ood_major, t,
                 "clusters other than V_" + std::to_string(ep.major_cluster), ep.examples);
        }
        check_episode(ep, config);
        stream.episodes.push_back(std::move(ep));
    }

    // H: an equal number of held-out examples from every cluster seen in the stream.
    std::vector<char> seen(clusters.clusters.size(), 0);
    for (const auto& ep : stream.episodes)
        for (const auto& ex : ep.examples) seen[ex.cluster_id] = 1;
    Rng hrng(derive_seed(config.seed, "heldout"));
    for (std::size_t ci = 0; ci < seen.size(); ++ci) {
        if (!seen[ci]) continue;
        const auto& pool = clusters.heldout[ci];
        for (std::size_t pos : hrng.sample_without_replacement(pool.size(), config.heldout_per_cluster))
            stream.heldout_set.push_back(pool[pos]);
    }
    return stream;
}

// Stream i of a family uses seed derive_seed(base_seed, "stream-family", i);
// the first n_validation are validation streams, the rest test streams.
inline std::pair<std::vector<QueryStream>, std::vector<QueryStream>> sample_stream_family(
    const ClusterSet& clusters, const StreamConfig& config, std::size_t n_validation, std::size_t n_test,
    std::uint64_t base_seed) {
    if (n_validation < 1 || n_test < 1) throw ValidationError("stream family: need at least one stream per split");
    std::vector<QueryStream> validation, test;
    for (std::size_t i = 0; i < n_validation + n_test; ++i) {
        StreamConfig c = config;
        c.seed = derive_seed(base_seed, "stream-family", i);
        QueryStream s = sample_stream(clusters, c);
        if (i < n_validation) {
            s.split = "validation";
            s.index = i;
            validation.push_back(std::move(s));
        } else {
            s.split = "test";
            s.index = i - n_validation;
            test.push_back(std::move(s));
        }
    }
    return {std::move(validation), std::move(test)};
}

// ---------------------------------------------------------------------------
// Stream file format (JSON Lines):
//   {"type":"header","version":1,"clusters_hash":..,"split":..,"index":..,"config":{...}}
//   {"type":"episode","t":..,"major_cluster":..,"b_u":..,"b_o":..,"b_o_major":..,"ids":[..]}  x T
//   {"type":"heldout","ids":[..]}
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const StreamConfig& c) {
    nlohmann::ordered_json j;
    j["T"] = c.T;
    j["b"] = c.b;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["gamma"] = c.gamma;
    j["seed"] = c.seed;
    j["heldout_per_cluster"] = c.heldout_per_cluster;
    j["global_without_replacement"] = c.global_without_replacement;
    return j;
}

template <typename Json>
StreamConfig stream_config_from_json(const Json& j) {
    StreamConfig c;
    try {
        c.T = j.value("T", c.T);
        c.b = j.value("b", c.b);
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.gamma = j.value("gamma", c.gamma);
        c.seed = j.value("seed", c.seed);
        c.heldout_per_cluster = j.value("heldout_per_cluster", c.heldout_per_cluster);
        c.global_without_replacement = j.value("global_without_replacement", c.global_without_replacement);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("stream config: ") + e.what());
    }
    validate(c);
    return c;
}

inline std::string serialize_stream(const QueryStream& s, const std::string& clusters_hash) {
    std::string out;
    nlohmann::ordered_json h;
    h["type"] = "header";
    h["version"] = 1;
    h["clusters_hash"] = clusters_hash;
    h["split"] = s.split;
    h["index"] = s.index;
    h["config"] = to_json(s.config);
    out += h.dump() + "\n";
    for (const auto& ep : s.episodes) {
        nlohmann::ordered_json r;
        r["type"] = "episode";
        r["t"] = ep.t;
        r["major_cluster"] = ep.major_cluster;
        r["b_u"] = ep.budget.upstream;
        r["b_o"] = ep.budget.ood;
        r["b_o_major"] = ep.budget.ood_major;
        std::vector<std::uint64_t> ids;
        for (const auto& ex : ep.examples) ids.push_back(ex.id);
        r["ids"] = ids;
        out += r.dump() + "\n";
    }
    nlohmann::ordered_json hr;
    hr["type"] = "heldout";
    std::vector<std::uint64_t> ids;
    for (const auto& ex : s.heldout_set) ids.push_back(ex.id);
    hr["ids"] = ids;
    out += hr.dump() + "\n";
    return out;
}

// Resolves ids against `clusters`. When expected_hash is non-empty it must
// match the header's clusters_hash.
inline QueryStream parse_stream(const std::string& text, const ClusterSet& clusters,
                                const std::string& expected_hash = {}) {
    const auto index = index_by_id(clusters);
    auto resolve = [&](std::uint64_t id, std::size_t line_no) -> const Example& {
        if (id >= index.size() || index[id] == nullptr)
            throw ValidationError("stream file line " + std::to_string(line_no) + ": unknown example id " +
                                  std::to_string(id));
        return *index[id];
    };
    QueryStream s;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false, have_heldout = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = "stream file line " + std::to_string(line_no) + ": ";
        try {
            const auto rec = nlohmann::json::parse(line);
            const std::string type = rec.at("type").get<std::string>();
            if (type == "header") {
                const std::string hash = rec.at("clusters_hash").get<std::string>();
                if (!expected_hash.empty() && hash != expected_hash)
                    throw ValidationError(where + "clusters_hash " + hash + " does not match cluster file " +
                                          expected_hash);
                s.split = rec.value("split", "");
                s.index = rec.value("index", std::size_t{0});
                s.config = stream_config_from_json(rec.at("config"));
                have_header = true;
            } else if (type == "episode") {
                if (!have_header) throw ValidationError(where + "episode before header");
                Episode ep;
                ep.t = rec.at("t").get<std::size_t>();
                ep.major_cluster = rec.at("major_cluster").get<std::size_t>();
                ep.budget.upstream = rec.at("b_u").get<std::size_t>();
                ep.budget.ood = rec.at("b_o").get<std::size_t>();
                ep.budget.ood_major = rec.at("b_o_major").get<std::size_t>();
                for (auto id : rec.at("ids").get<std::vector<std::uint64_t>>()) ep.examples.push_back(resolve(id, line_no));
                if (ep.t != s.episodes.size() + 1) throw ValidationError(where + "episodes out of order");
                try {
                    check_episode(ep, s.config);
                } catch (const RuntimeError& e) {
                    throw ValidationError(where + e.what());
                }
                s.episodes.push_back(std::move(ep));
            } else if (type == "heldout") {
                for (auto id : rec.at("ids").get<std::vector<std::uint64_t>>()) {
                    const Example& ex = resolve(id, line_no);
                    s.heldout_set.push_back(ex);
                }
                have_heldout = true;
            } else {
                throw ValidationError(where + "unknown record type '" + type + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(where + e.what());
        }
    }
    if (!have_header || !have_heldout) throw ValidationError("stream file: missing header or heldout record");
    if (s.episodes.size() != s.config.T) throw ValidationError("stream file: episode count does not match T");
    return s;
}

inline void save_stream(const QueryStream& s, const std::string& clusters_hash, const std::filesystem::path& path) {
    write_text_file(path, serialize_stream(s, clusters_hash));
}

inline QueryStream load_stream(const std::filesystem::path& path, const ClusterSet& clusters,
                               const std::string& expected_hash = {}) {
    return parse_stream(read_text_file(path), clusters, expected_hash);
}

} // namespace cmr
