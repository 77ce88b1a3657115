#pragma once

// Labeled data pools V_0..V_N. V_0 is the upstream (in-distribution) pool; each
// V_i (i >= 1) is an out-of-distribution cluster whose K class means are the
// upstream means rotated in one coordinate plane and then translated.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmr/error.hpp"
#include "cmr/io.hpp"
#include "cmr/rng.hpp"

namespace cmr {

struct Example {
    std::uint64_t id = 0;
    std::vector<double> features;
    std::size_t label = 0;
    std::size_t cluster_id = 0;

    bool operator==(const Example&) const = default;
};

struct ClusterShift {
    double angle = 0.0;  // radians, rotation in the (plane_a, plane_b) coordinate plane
    std::size_t plane_a = 0;
    std::size_t plane_b = 1;
    std::vector<double> translation;  // empty means zero

    bool operator==(const ClusterShift&) const = default;
};

struct GeneratorSpec {
    std::size_t d = 0;
    std::size_t K = 0;
    std::size_t per_cluster_size = 0;
    std::size_t heldout_per_cluster = 200;
    std::vector<std::vector<double>> base_means;  // K rows of length d
    double noise_scale = 1.0;
    std::vector<ClusterShift> shifts;  // one per OOD cluster
    std::uint64_t seed = 0;

    std::size_t num_ood() const { return shifts.size(); }
    bool operator==(const GeneratorSpec&) const = default;
};

struct ClusterSet {
    std::vector<std::vector<Example>> clusters;  // V_0..V_N
    std::vector<std::vector<Example>> heldout;   // one held-out pool per cluster
    std::size_t d = 0;
    std::size_t K = 0;
    GeneratorSpec gen_spec;

    std::size_t num_ood() const { return clusters.empty() ? 0 : clusters.size() - 1; }
    bool operator==(const ClusterSet&) const = default;
};

inline void validate(const GeneratorSpec& spec) {
    if (spec.d < 1) throw ValidationError("generator: d must be >= 1");
    if (spec.K < 2) throw ValidationError("generator: K must be >= 2");
    if (spec.per_cluster_size == 0) throw ValidationError("generator: per_cluster_size must be > 0");
    if (spec.heldout_per_cluster == 0) throw ValidationError("generator: heldout_per_cluster must be > 0");
    if (!(spec.noise_scale > 0.0) || !std::isfinite(spec.noise_scale))
        throw ValidationError("generator: noise_scale must be positive and finite");
    if (spec.base_means.size() != spec.K)
        throw ValidationError("generator: expected " + std::to_string(spec.K) + " base means, got " +
                              std::to_string(spec.base_means.size()));
    for (std::size_t k = 0; k < spec.K; ++k) {
        if (spec.base_means[k].size() != spec.d)
            throw ValidationError("generator: base mean " + std::to_string(k) + " has wrong dimension");
        for (double v : spec.base_means[k])
            if (!std::isfinite(v)) throw ValidationError("generator: non-finite base mean entry");
        for (std::size_t j = 0; j < k; ++j)
            if (spec.base_means[j] == spec.base_means[k])
                throw ValidationError("generator: duplicate class means for classes " + std::to_string(j) +
                                      " and " + std::to_string(k));
    }
    for (std::size_t i = 0; i < spec.shifts.size(); ++i) {
        const auto& s = spec.shifts[i];
        const std::string tag = "generator: shift " + std::to_string(i + 1);
        if (!std::isfinite(s.angle)) throw ValidationError(tag + ": non-finite angle");
        if (s.angle != 0.0 && (s.plane_a >= spec.d || s.plane_b >= spec.d || s.plane_a == s.plane_b))
            throw ValidationError(tag + ": rotation plane must be two distinct axes < d");
        if (!s.translation.empty() && s.translation.size() != spec.d)
            throw ValidationError(tag + ": translation must have d entries");
    }
}

// Class means of cluster i (0 = upstream, identity transform).
inline std::vector<std::vector<double>> class_means(const GeneratorSpec& spec, std::size_t cluster) {
    auto means = spec.base_means;
    if (cluster == 0) return means;
    const ClusterShift& s = spec.shifts.at(cluster - 1);
    const double c = std::cos(s.angle), sn = std::sin(s.angle);
    for (auto& m : means) {
        if (s.angle != 0.0) {
            const double a = m[s.plane_a], b = m[s.plane_b];
            m[s.plane_a] = c * a - sn * b;
            m[s.plane_b] = sn * a + c * b;
        }
        for (std::size_t j = 0; j < s.translation.size(); ++j) m[j] += s.translation[j];
    }
    return means;
}

inline ClusterSet generate_clusters(const GeneratorSpec& spec) {
    validate(spec);
    ClusterSet set;
    set.d = spec.d;
    set.K = spec.K;
    set.gen_spec = spec;
    Rng rng(derive_seed(spec.seed, "clusters"));
    std::uint64_t next_id = 0;
    auto draw_pool = [&](const std::vector<std::vector<double>>& means, std::size_t cluster, std::size_t n) {
        std::vector<Example> pool;
        pool.reserve(n);
        for (std::size_t j = 0; j < n; ++j) {
            Example ex;
            ex.id = next_id++;
            ex.label = j % spec.K;
            ex.cluster_id = cluster;
            ex.features.resize(spec.d);
            for (std::size_t f = 0; f < spec.d; ++f)
                ex.features[f] = means[ex.label][f] + spec.noise_scale * rng.normal();
            pool.push_back(std::move(ex));
        }
        return pool;
    };
    for (std::size_t i = 0; i <= spec.num_ood(); ++i) {
        const auto means = class_means(spec, i);
        set.clusters.push_back(draw_pool(means, i, spec.per_cluster_size));
        set.heldout.push_back(draw_pool(means, i, spec.heldout_per_cluster));
    }
    return set;
}

// Index from example id to the example, over pools and held-out pools.
inline std::vector<const Example*> index_by_id(const ClusterSet& set) {
    std::vector<const Example*> index;
    auto add = [&](const std::vector<Example>& pool) {
        for (const auto& ex : pool) {
            if (ex.id >= index.size()) index.resize(ex.id + 1, nullptr);
            index[ex.id] = &ex;
        }
    };
    for (const auto& p : set.clusters) add(p);
    for (const auto& p : set.heldout) add(p);
    return index;
}

// ---------------------------------------------------------------------------
// Cluster file format (JSON Lines, one record per line, fixed key order):
//   line 1:  {"type":"header","version":1,"d":..,"K":..,"N":..,"gen_spec":{...}}
//   line 2+: {"id":..,"cluster_id":..,"split":"pool"|"heldout","label":..,"features":[..]}
// Examples are written cluster by cluster, pool before held-out, in id order.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const GeneratorSpec& spec) {
    nlohmann::ordered_json j;
    j["d"] = spec.d;
    j["K"] = spec.K;
    j["per_cluster_size"] = spec.per_cluster_size;
    j["heldout_per_cluster"] = spec.heldout_per_cluster;
    j["base_means"] = spec.base_means;
    j["noise_scale"] = spec.noise_scale;
    auto shifts = nlohmann::ordered_json::array();
    for (const auto& s : spec.shifts) {
        nlohmann::ordered_json js;
        js["angle"] = s.angle;
        js["plane"] = {s.plane_a, s.plane_b};
        js["translation"] = s.translation;
        shifts.push_back(js);
    }
    j["shifts"] = shifts;
    j["seed"] = spec.seed;
    return j;
}

template <typename Json>
GeneratorSpec generator_spec_from_json(const Json& j) {
    GeneratorSpec spec;
    try {
        spec.d = j.at("d").template get<std::size_t>();
        spec.K = j.at("K").template get<std::size_t>();
        spec.per_cluster_size = j.at("per_cluster_size").template get<std::size_t>();
        spec.heldout_per_cluster = j.value("heldout_per_cluster", std::size_t{200});
        spec.base_means = j.at("base_means").template get<std::vector<std::vector<double>>>();
        spec.noise_scale = j.at("noise_scale").template get<double>();
        for (const auto& js : j.at("shifts")) {
            ClusterShift s;
            s.angle = js.value("angle", 0.0);
            if (js.contains("plane")) {
                s.plane_a = js.at("plane").at(0).template get<std::size_t>();
                s.plane_b = js.at("plane").at(1).template get<std::size_t>();
            }
            if (js.contains("translation")) s.translation = js.at("translation").template get<std::vector<double>>();
            spec.shifts.push_back(std::move(s));
        }
        spec.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("generator spec: ") + e.what());
    }
    return spec;
}

inline std::string serialize_clusters(const ClusterSet& set) {
    std::string out;
    nlohmann::ordered_json header;
    header["type"] = "header";
    header["version"] = 1;
    header["d"] = set.d;
    header["K"] = set.K;
    header["N"] = set.num_ood();
    header["gen_spec"] = to_json(set.gen_spec);
    out += header.dump();
    out += '\n';
    auto emit = [&](const std::vector<Example>& pool, const char* split) {
        for (const auto& ex : pool) {
            nlohmann::ordered_json r;
            r["id"] = ex.id;
            r["cluster_id"] = ex.cluster_id;
            r["split"] = split;
            r["label"] = ex.label;
            r["features"] = ex.features;
            out += r.dump();
            out += '\n';
        }
    };
    for (std::size_t i = 0; i < set.clusters.size(); ++i) {
        emit(set.clusters[i], "pool");
        emit(set.heldout[i], "heldout");
    }
    return out;
}

inline ClusterSet parse_clusters(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    ClusterSet set;
    bool have_header = false;
    std::size_t n_ood = 0;
    std::set<std::uint64_t> seen;

    auto fail = [&](const std::string& msg) -> ValidationError {
        return ValidationError("cluster file line " + std::to_string(line_no) + ": " + msg);
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw fail(std::string("malformed record: ") + e.what());
        }
        if (!have_header) {
            if (rec.value("type", "") != "header") throw fail("expected header record");
            try {
                set.d = rec.at("d").get<std::size_t>();
                set.K = rec.at("K").get<std::size_t>();
                n_ood = rec.at("N").get<std::size_t>();
            } catch (const nlohmann::json::exception& e) {
                throw fail(std::string("header field: ") + e.what());
            }
            set.gen_spec = generator_spec_from_json(rec.at("gen_spec"));
            set.clusters.assign(n_ood + 1, {});
            set.heldout.assign(n_ood + 1, {});
            have_header = true;
            continue;
        }
        Example ex;
        std::string split;
        const char* field = "id";
        try {
            ex.id = rec.at("id").get<std::uint64_t>();
            field = "cluster_id";
            ex.cluster_id = rec.at("cluster_id").get<std::size_t>();
            field = "split";
            split = rec.at("split").get<std::string>();
            field = "label";
            ex.label = rec.at("label").get<std::size_t>();
            field = "features";
            ex.features = rec.at("features").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            throw fail(std::string("field '") + field + "': " + e.what());
        }
        if (ex.features.size() != set.d)
            throw fail("field 'features': expected " + std::to_string(set.d) + " values, got " +
                       std::to_string(ex.features.size()));
        for (double v : ex.features)
            if (!std::isfinite(v)) throw fail("field 'features': non-finite value");
        if (ex.label >= set.K)
            throw fail("example id " + std::to_string(ex.id) + ": label " + std::to_string(ex.label) +
                       " >= K=" + std::to_string(set.K));
        if (ex.cluster_id > n_ood)
            throw fail("example id " + std::to_string(ex.id) + ": cluster_id " + std::to_string(ex.cluster_id) +
                       " > N=" + std::to_string(n_ood));
        if (!seen.insert(ex.id).second) throw fail("duplicate example id " + std::to_string(ex.id));
        if (split == "pool")
            set.clusters[ex.cluster_id].push_back(std::move(ex));
        else if (split == "heldout")
            set.heldout[ex.cluster_id].push_back(std::move(ex));
        else
            throw fail("field 'split': unknown value '" + split + "'");
    }
    if (!have_header) throw ValidationError("cluster file: missing header");
    for (std::size_t i = 0; i <= n_ood; ++i)
        if (set.clusters[i].empty() || set.heldout[i].empty())
            throw ValidationError("cluster file: cluster " + std::to_string(i) + " has an empty pool");
    return set;
}

inline void save_clusters(const ClusterSet& set, const std::filesystem::path& path) {
    write_text_file(path, serialize_clusters(set));
}

inline ClusterSet load_clusters(const std::filesystem::path& path) { return parse_clusters(read_text_file(path)); }

// Default synthetic benchmark: K=4 classes on a circle in the (0,1) plane,
// five OOD clusters that rotate the class layout and move it along the
// remaining axes.
inline GeneratorSpec default_generator_spec(std::uint64_t seed = 7) {
    GeneratorSpec spec;
    spec.d = 4;
    spec.K = 4;
    spec.per_cluster_size = 1000;
    spec.heldout_per_cluster = 200;
    spec.noise_scale = 1.0;
    const double radius = 4.0;
    for (std::size_t k = 0; k < spec.K; ++k) {
        std::vector<double> m(spec.d, 0.0);
        const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(spec.K);
        m[0] = radius * std::cos(a);
        m[1] = radius * std::sin(a);
        spec.base_means.push_back(m);
    }
    const double deg = std::numbers::pi / 180.0;
    spec.shifts = {
        {45 * deg, 0, 1, {0, 0, 3, 0}},
        {90 * deg, 0, 1, {0, 0, 0, 3}},
        {135 * deg, 0, 1, {0, 0, -3, 0}},
        {180 * deg, 0, 1, {0, 0, 0, -3}},
        {270 * deg, 0, 1, {0, 0, 2.5, 2.5}},
    };
    spec.seed = seed;
    return spec;
}

} // namespace cmr
