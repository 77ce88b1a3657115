// Command-line front end: cluster generation, stream sampling, single runs,
// sweeps, the stream-dynamics grid and report rendering.
//
// Exit codes: 0 success, 2 validation failure (bad input), 3 runtime failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "cmr/cmr.hpp"

namespace fs = std::filesystem;
using namespace cmr;

namespace {

constexpr int kValidationExit = 2;
constexpr int kRuntimeExit = 3;

nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(read_text_file(p));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(p.string() + ": " + e.what());
    }
}

fs::path resolve(const fs::path& base_file, const std::string& p) {
    if (p.empty()) return {};
    fs::path path(p);
    if (path.is_absolute()) return path;
    return base_file.parent_path() / path;
}

void log(const std::string& msg) { std::cerr << "[cmr] " << msg << "\n"; }

int cmd_gen_clusters(const std::string& spec_file, const std::string& out) {
    GeneratorSpec spec = spec_file.empty() ? default_generator_spec() : generator_spec_from_json(read_json(spec_file));
    const ClusterSet set = generate_clusters(spec);
    save_clusters(set, out);
    log("wrote " + out + " (N=" + std::to_string(set.num_ood()) + ", hash " + file_hash(out) + ")");
    return 0;
}

// The config is a StreamConfig object; optional "n_validation"/"n_test"/"base_seed"
// keys switch to a validation/test family.
int cmd_sample_stream(const std::string& clusters_file, const std::string& config_file, const std::string& out) {
    const ClusterSet clusters = load_clusters(clusters_file);
    const std::string hash = file_hash(clusters_file);
    const auto j = read_json(config_file);
    const StreamConfig cfg = stream_config_from_json(j);
    fs::create_directories(out);
    if (j.contains("n_validation") || j.contains("n_test")) {
        const auto [val, test] = sample_stream_family(clusters, cfg, j.value("n_validation", std::size_t{32}),
                                                      j.value("n_test", std::size_t{8}),
                                                      j.value("base_seed", cfg.seed));
        char name[64];
        for (const auto& s : val) {
            std::snprintf(name, sizeof name, "validation_%03zu.jsonl", s.index);
            save_stream(s, hash, fs::path(out) / name);
        }
        for (const auto& s : test) {
            std::snprintf(name, sizeof name, "test_%03zu.jsonl", s.index);
            save_stream(s, hash, fs::path(out) / name);
        }
        log("wrote " + std::to_string(val.size()) + " validation and " + std::to_string(test.size()) +
            " test streams to " + out);
    } else {
        save_stream(sample_stream(clusters, cfg), hash, fs::path(out) / "stream.jsonl");
        log("wrote " + (fs::path(out) / "stream.jsonl").string());
    }
    return 0;
}

struct LoadedInputs {
    ClusterSet clusters;
    QueryStream stream;
    LearnerState f0;
    InputHashes hashes;
};

LoadedInputs load_inputs(RunConfig& cfg, const fs::path& config_file) {
    LoadedInputs in;
    const fs::path clusters_path = resolve(config_file, cfg.clusters);
    if (clusters_path.empty()) throw ValidationError("run config: 'clusters' is required");
    in.clusters = load_clusters(clusters_path);
    in.hashes.clusters = file_hash(clusters_path);
    if (!cfg.stream.empty()) {
        const fs::path sp = resolve(config_file, cfg.stream);
        in.stream = load_stream(sp, in.clusters, in.hashes.clusters);
        in.hashes.stream = file_hash(sp);
        cfg.stream_config = in.stream.config;
    } else {
        in.stream = sample_stream(in.clusters, cfg.stream_config);
        in.hashes.stream = content_hash(serialize_stream(in.stream, in.hashes.clusters));
    }
    if (!cfg.upstream_checkpoint.empty()) {
        in.f0 = load_checkpoint(resolve(config_file, cfg.upstream_checkpoint));
        if (in.f0.d != in.clusters.d || in.f0.K != in.clusters.K)
            throw ValidationError("upstream checkpoint does not match the cluster file's d/K");
    } else {
        const auto up = train_f0(in.clusters, cfg.learner);
        log("trained f_0: upstream train accuracy " + percent(up.train_accuracy) + "%");
        in.f0 = up.model;
    }
    return in;
}

int cmd_run(const std::string& config_file, const std::string& out) {
    RunConfig cfg = run_config_from_json(read_json(config_file));
    LoadedInputs in = load_inputs(cfg, config_file);
    const RunResult r = run_method({in.clusters, in.stream, in.f0}, cfg);
    write_run(r, out, in.hashes);
    std::cout << render_report({{cfg.run_id, r.report}}, "table");
    return 0;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// Grids file: {"base": {run config}, "n_seeds": 5, "grids": {"<method>": {"<key>": [values]}}}
int cmd_sweep(const std::string& methods_arg, const std::string& grids_file, const std::string& streams_dir,
              const std::string& clusters_file, const std::string& out, std::size_t threads) {
    const auto gj = read_json(grids_file);
    SweepSpec spec;
    if (gj.contains("base")) spec.base = run_config_from_json(gj.at("base"));
    spec.n_seeds = gj.value("n_seeds", spec.n_seeds);
    if (threads > 0) spec.threads = threads;
    const std::string cpath = !clusters_file.empty() ? clusters_file : resolve(grids_file, spec.base.clusters).string();
    if (cpath.empty()) throw ValidationError("sweep: no cluster file (use --clusters or base.clusters)");
    const ClusterSet clusters = load_clusters(cpath);
    const std::string hash = file_hash(cpath);
    spec.base.clusters = cpath;

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(streams_dir))
        if (e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<QueryStream> val, test;
    for (const auto& f : files) {
        QueryStream s = load_stream(f, clusters, hash);
        (s.split == "test" ? test : val).push_back(std::move(s));
    }
    log("loaded " + std::to_string(val.size()) + " validation / " + std::to_string(test.size()) + " test streams");

    const auto& grids = gj.contains("grids") ? gj.at("grids") : nlohmann::json::object();
    for (const auto& name : split_csv(methods_arg)) {
        const Method m = method_from_string(name);
        spec.grids.emplace_back(m, grids.contains(name) ? grids.at(name) : nlohmann::json::object());
    }
    if (spec.grids.empty()) throw ValidationError("sweep: no methods given");

    const LearnerState f0 = train_f0(clusters, spec.base.learner).model;
    const Leaderboard board = sweep(spec, clusters, f0, val, test);

    fs::create_directories(out);
    nlohmann::ordered_json lj = nlohmann::ordered_json::array();
    std::vector<ReportRow> rows;
    std::string csv = "method,metric,mean,std\n";
    for (const auto& e : board) {
        nlohmann::ordered_json ej;
        ej["method"] = to_string(e.method);
        ej["best_config"] = to_json(e.best);
        ej["validation_score"] = e.validation_score;
        ej["candidate_scores"] = e.candidate_scores;
        nlohmann::ordered_json sj;
        for (const auto& [k, v] : e.summary) {
            sj[k] = {{"mean", v.mean}, {"std", v.std}};
            csv += to_string(e.method) + "," + k + "," + format_double(v.mean) + "," + format_double(v.std) + "\n";
        }
        ej["test_summary"] = sj;
        lj.push_back(ej);
        AggregateReport mean_report;
        auto ms = [&](const char* k) { return std::optional<double>(e.summary.at(k).mean); };
        mean_report.efr = {ms("AVG(EFR)"), ms("EFR@T")};
        mean_report.ukr = {ms("AVG(UKR)"), ms("UKR@T")};
        mean_report.okr = {ms("AVG(OKR)"), ms("OKR@T")};
        mean_report.csr = {ms("AVG(CSR)"), ms("CSR@T")};
        mean_report.kg = {ms("AVG(KG)"), ms("KG@T")};
        mean_report.oec = {ms("AVG(OEC)"), ms("OEC@T")};
        rows.push_back({to_string(e.method), mean_report});
    }
    nlohmann::ordered_json inputs;
    inputs["clusters_hash"] = hash;
    inputs["grids_hash"] = file_hash(grids_file);
    write_text_file(fs::path(out) / "leaderboard.json", lj.dump(2) + "\n");
    write_text_file(fs::path(out) / "leaderboard.csv", csv);
    write_text_file(fs::path(out) / "inputs.json", inputs.dump(2) + "\n");
    std::cout << render_report(rows, "table");
    return 0;
}

// Grid file: {"variants": [{"alpha":..,"beta":..,"gamma":..}], "methods": [refiner configs], "n_seeds": 5}
int cmd_dynamics(const std::string& config_file, const std::string& grid_file, const std::string& out,
                 std::size_t threads) {
    RunConfig cfg = run_config_from_json(read_json(config_file));
    const fs::path cpath = resolve(config_file, cfg.clusters);
    const ClusterSet clusters = load_clusters(cpath);
    const LearnerState f0 = train_f0(clusters, cfg.learner).model;
    const auto gj = read_json(grid_file);
    std::vector<DynamicsVariant> variants;
    for (const auto& v : gj.at("variants"))
        variants.push_back({v.value("alpha", 0.9), v.value("beta", 0.5), v.value("gamma", 0.8)});
    std::vector<RefinerConfig> methods;
    for (const auto& m : gj.at("methods")) {
        const Method meth = method_from_string(m.at("method").get<std::string>());
        methods.push_back(refiner_config_from_json(m, default_refiner_config(meth)));
    }
    const auto rows = dynamics_grid(clusters, f0, cfg, variants, methods, gj.value("n_seeds", std::size_t{5}),
                                    threads > 0 ? threads : default_threads());
    std::string csv = "alpha,beta,gamma,frozen_oec";
    for (const auto& m : methods) csv += ",gain_" + to_string(m.method);
    csv += "\n";
    for (const auto& r : rows) {
        csv += format_double(r.variant.alpha) + "," + format_double(r.variant.beta) + "," +
               format_double(r.variant.gamma) + "," + format_double(r.frozen_oec);
        for (double g : r.gains) csv += "," + format_double(g);
        csv += "\n";
    }
    fs::create_directories(out);
    write_text_file(fs::path(out) / "gains.csv", csv);
    std::cout << csv;
    return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& format) {
    std::vector<fs::path> dirs;
    if (fs::exists(fs::path(runs_dir) / "report.json")) dirs.push_back(runs_dir);
    for (const auto& e : fs::directory_iterator(runs_dir))
        if (e.is_directory() && fs::exists(e.path() / "report.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw ValidationError("report: no run directories with report.json under " + runs_dir);
    std::vector<ReportRow> rows;
    for (const auto& d : dirs) {
        const auto j = read_json(d / "report.json");
        rows.push_back({j.value("run_id", d.filename().string()), aggregate_from_json(j.at("report"))});
    }
    std::cout << render_report(rows, format);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual model refinement simulator"};
    app.require_subcommand(1);

    std::string spec_file, out, clusters, config, methods, grids, streams, runs, format = "table", grid;
    std::size_t threads = 0;

    auto* gen = app.add_subcommand("gen-clusters", "Generate a cluster file");
    gen->add_option("--spec", spec_file, "Generator spec (JSON); omitted = built-in default");
    gen->add_option("--out", out, "Output cluster file")->required();

    auto* ss = app.add_subcommand("sample-stream", "Sample a query stream (or a validation/test family)");
    ss->add_option("--clusters", clusters, "Cluster file")->required();
    ss->add_option("--config", config, "Stream config (JSON)")->required();
    ss->add_option("--out", out, "Output directory")->required();

    auto* run = app.add_subcommand("run", "Run one method over one stream");
    run->add_option("--config", config, "Run config (JSON)")->required();
    run->add_option("--out", out, "Output directory")->required();

    auto* sw = app.add_subcommand("sweep", "Grid search on validation streams, evaluate on test streams");
    sw->add_option("--methods", methods, "Comma-separated methods")->required();
    sw->add_option("--grids", grids, "Grids file (JSON)")->required();
    sw->add_option("--streams", streams, "Directory of stream files")->required();
    sw->add_option("--clusters", clusters, "Cluster file (defaults to base.clusters in the grids file)");
    sw->add_option("--out", out, "Output directory")->required();
    sw->add_option("--threads", threads, "Worker threads (0 = hardware)");

    auto* dy = app.add_subcommand("dynamics", "OEC@T gain over FrozenUpstream across stream dynamics");
    dy->add_option("--config", config, "Base run config (JSON)")->required();
    dy->add_option("--grid", grid, "Variants and methods (JSON)")->required();
    dy->add_option("--out", out, "Output directory")->required();
    dy->add_option("--threads", threads, "Worker threads (0 = hardware)");

    auto* rep = app.add_subcommand("report", "Render run reports");
    rep->add_option("--runs", runs, "Run directory or directory of runs")->required();
    rep->add_option("--format", format, "csv | json | table")->check(CLI::IsMember({"csv", "json", "table"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_gen_clusters(spec_file, out);
        if (*ss) return cmd_sample_stream(clusters, config, out);
        if (*run) return cmd_run(config, out);
        if (*sw) return cmd_sweep(methods, grids, streams, clusters, out, threads);
        if (*dy) return cmd_dynamics(config, grid, out, threads);
        if (*rep) return cmd_report(runs, format);
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kValidationExit;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return kRuntimeExit;
    }
    return 0;
}
