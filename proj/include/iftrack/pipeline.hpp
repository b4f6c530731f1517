#pragma once

// Subcommand orchestration: run configuration, cohort filters, namespaced
// output directories with manifests, and the end-to-end `all` chain.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "baselines.hpp"
#include "common.hpp"
#include "encoder_gateway.hpp"
#include "flow_numerics.hpp"
#include "infodyn.hpp"
#include "svg.hpp"
#include "synth_corpus.hpp"
#include "trace_model.hpp"

namespace iftrack::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using analysis::Stage;

// ---------------------------------------------------------------------------
// Cohort filters

struct Filter {
    enum class Op { eq, ne, ge, le, gt, lt } op = Op::eq;
    std::string key;
    std::string value;

    std::string text() const {
        static const char* ops[] = {"=", "!=", ">=", "<=", ">", "<"};
        return key + ops[static_cast<int>(op)] + value;
    }
};

inline Filter parse_filter(std::string_view expr) {
    // Two-character operators first so "a>=1" is not read as "a>" "=1".
    static const std::pair<std::string_view, Filter::Op> ops[] = {{"!=", Filter::Op::ne}, {">=", Filter::Op::ge},
                                                                  {"<=", Filter::Op::le}, {"=", Filter::Op::eq},
                                                                  {">", Filter::Op::gt},  {"<", Filter::Op::lt}};
    std::size_t best = std::string_view::npos;
    Filter f;
    std::size_t len = 0;
    for (const auto& [tok, op] : ops) {
        auto pos = expr.find(tok);
        if (pos == std::string_view::npos) continue;
        if (pos < best || (pos == best && tok.size() > len)) {
            best = pos;
            f.op = op;
            len = tok.size();
        }
    }
    if (best == std::string_view::npos || best == 0 || best + len >= expr.size())
        throw Error("invalid filter '" + std::string(expr) + "' (expected key=value, key!=value, key>=x, key<=x, key>x or key<x)");
    f.key = std::string(expr.substr(0, best));
    f.value = std::string(expr.substr(best + len));
    if (f.op != Filter::Op::eq && f.op != Filter::Op::ne) parse_double(f.value);
    return f;
}

// Value of an annotation key: cohort attributes plus reasoning_type, source and question.
inline std::optional<trace::CohortValue> annotation_value(const trace::Trace& t, const std::string& key) {
    if (key == "reasoning_type") {
        if (t.meta.reasoning_type == trace::ReasoningType::none) return std::nullopt;
        return trace::to_string(t.meta.reasoning_type);
    }
    if (key == "source") return t.meta.source.empty() ? std::nullopt : std::optional<trace::CohortValue>(t.meta.source);
    if (key == "question") return t.question;
    auto it = t.meta.cohort.find(key);
    if (it == t.meta.cohort.end()) return std::nullopt;
    return it->second;
}

inline bool matches(const trace::Trace& t, const Filter& f) {
    auto v = annotation_value(t, f.key);
    if (!v) return false;
    if (f.op == Filter::Op::eq || f.op == Filter::Op::ne) {
        bool eq;
        if (const auto* d = std::get_if<double>(&*v)) {
            try {
                eq = *d == parse_double(f.value);
            } catch (const Error&) {
                eq = false;
            }
        } else {
            eq = std::get<std::string>(*v) == f.value;
        }
        return f.op == Filter::Op::eq ? eq : !eq;
    }
    double x;
    if (const auto* d = std::get_if<double>(&*v)) {
        x = *d;
    } else {
        try {
            x = parse_double(std::get<std::string>(*v));
        } catch (const Error&) {
            return false;
        }
    }
    double y = parse_double(f.value);
    switch (f.op) {
        case Filter::Op::ge: return x >= y;
        case Filter::Op::le: return x <= y;
        case Filter::Op::gt: return x > y;
        case Filter::Op::lt: return x < y;
        default: return false;
    }
}

inline bool matches_all(const trace::Trace& t, std::span<const Filter> filters) {
    return std::all_of(filters.begin(), filters.end(), [&](const Filter& f) { return matches(t, f); });
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
    fs::path base_dir = ".";  // relative paths resolve against the config file's directory
    std::string corpus;
    std::string embeddings;
    std::string scores;
    std::string output_dir = "out";
    trace::SchemaMode schema_mode = trace::SchemaMode::strict;
    int grid_nx = 20;
    int grid_ny = 20;
    infodyn::EntropyMode entropy_mode = infodyn::EntropyMode::realized;
    double theta = 0.3;
    double quantile = 0.75;
    std::pair<double, double> tau_window{0.5, 1.0};
    std::size_t bootstrap_n = 1000;
    std::size_t mean_points = 50;
    std::optional<std::uint64_t> seed;
    flow::CellEstimate divergence_estimate = flow::CellEstimate::centered;
    flow::CellEstimate classifier_estimate = flow::CellEstimate::mean;
    bool fallback = true;
    double fallback_tau_window = 0.1;
    std::map<Stage, analysis::Rect> gates;
    std::string cohort_key = "reasoning_type";
    analysis::TestFamily test_family = analysis::TestFamily::welch;
    double low_effort_quantile = 1.0 / 3.0;
    double liouville_tolerance = 1e-3;
    int potential_bins = 20;
    std::size_t potential_min_samples = 10;
    std::vector<std::string> filters;
    std::size_t mcq_k = 5;
    std::size_t max_questions = 3;
    double perplexity = 30.0;
    int tsne_iterations = 1000;
    int kde_grid = 100;
    svg::Palette divergence_palette = svg::Palette::rdbu;
    svg::Palette density_palette = svg::Palette::viridis;
    std::optional<json> scoring;
    std::optional<json> simulate;

    fs::path resolve(const std::string& p) const {
        fs::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    }
    fs::path out_root() const { return resolve(output_dir); }
    fs::path out(const std::string& sub) const { return out_root() / sub; }

    void validate() const {
        if (grid_nx < 3) throw Error("config: grid.nx must be >= 3");
        if (grid_ny < 3) throw Error("config: grid.ny must be >= 3");
        if (!(theta >= 0.0 && theta < 1.0)) throw Error("config: theta must lie in [0, 1)");
        if (!(quantile > 0.0 && quantile < 1.0)) throw Error("config: quantile must lie in (0, 1)");
        if (!(tau_window.first >= 0.0 && tau_window.second <= 1.0 && tau_window.first <= tau_window.second))
            throw Error("config: tau_window must satisfy 0 <= a <= b <= 1");
        if (mean_points < 2) throw Error("config: mean_points must be >= 2");
        if (!(low_effort_quantile > 0.0 && low_effort_quantile < 1.0))
            throw Error("config: low_effort_quantile must lie in (0, 1)");
        if (!(liouville_tolerance > 0.0)) throw Error("config: liouville_tolerance must be positive");
        if (potential_bins < 1) throw Error("config: potential.bins must be >= 1");
        if (mcq_k < 2) throw Error("config: baseline.k must be >= 2");
        if (max_questions < 1) throw Error("config: baseline.max_questions must be >= 1");
        if (!(perplexity > 0.0)) throw Error("config: baseline.perplexity must be positive");
        if (tsne_iterations < 1) throw Error("config: baseline.iterations must be >= 1");
        if (kde_grid < 2) throw Error("config: baseline.kde_grid must be >= 2");
        if (!(fallback_tau_window >= 0.0)) throw Error("config: fallback_tau_window must be >= 0");
        for (const auto& f : filters) parse_filter(f);
    }

    std::uint64_t require_seed(const std::string& sub) const {
        if (!seed) throw Error("config: seed is required for '" + sub + "'");
        return *seed;
    }

    std::vector<Filter> parsed_filters() const {
        std::vector<Filter> out;
        for (const auto& f : filters) out.push_back(parse_filter(f));
        return out;
    }

    json to_json() const {
        json gates_j = json::object();
        for (const auto& [stage, r] : gates) gates_j[analysis::to_string(stage)] = {r.u_lo, r.u_hi, r.e_lo, r.e_hi};
        json j{{"corpus", corpus},
               {"embeddings", embeddings},
               {"scores", scores},
               {"output_dir", output_dir},
               {"schema_mode", schema_mode == trace::SchemaMode::strict ? "strict" : "lenient"},
               {"grid", {{"nx", grid_nx}, {"ny", grid_ny}}},
               {"entropy_mode", infodyn::to_string(entropy_mode)},
               {"theta", theta},
               {"quantile", quantile},
               {"tau_window", {tau_window.first, tau_window.second}},
               {"bootstrap_n", bootstrap_n},
               {"mean_points", mean_points},
               {"seed", seed ? json(*seed) : json(nullptr)},
               {"divergence_estimate", flow::to_string(divergence_estimate)},
               {"classifier_estimate", flow::to_string(classifier_estimate)},
               {"fallback", fallback},
               {"fallback_tau_window", fallback_tau_window},
               {"gates", gates_j},
               {"cohort_key", cohort_key},
               {"test_family", test_family == analysis::TestFamily::welch ? "welch" : "mann_whitney"},
               {"low_effort_quantile", low_effort_quantile},
               {"liouville_tolerance", liouville_tolerance},
               {"potential", {{"bins", potential_bins}, {"min_samples", potential_min_samples}}},
               {"filters", filters},
               {"baseline",
                {{"k", mcq_k},
                 {"max_questions", max_questions},
                 {"perplexity", perplexity},
                 {"iterations", tsne_iterations},
                 {"kde_grid", kde_grid}}},
               {"render",
                {{"divergence_palette", svg::to_string(divergence_palette)},
                 {"density_palette", svg::to_string(density_palette)}}}};
        if (scoring) {
            json s = *scoring;
            s.erase("api_key");
            j["scoring"] = s;
        }
        if (simulate) j["simulate"] = *simulate;
        return j;
    }

    // The output location does not enter the hash: moving a run does not change it.
    std::string hash() const {
        auto j = to_json();
        j.erase("output_dir");
        return sha256_hex(j.dump());
    }
};

namespace detail {

template <class T>
void read_field(const json& j, const char* key, T& field) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return;
    try {
        field = it->get<T>();
    } catch (const json::exception&) {
        throw Error(std::string("config: field '") + key + "' has the wrong type");
    }
}

}  // namespace detail

inline RunConfig config_from_json(const json& j, fs::path base_dir) {
    if (!j.is_object()) throw Error("config: top level must be an object");
    static const std::set<std::string> known = {
        "corpus",           "embeddings",   "scores",       "output_dir",          "schema_mode",
        "grid",             "entropy_mode", "theta",        "quantile",            "tau_window",
        "bootstrap_n",      "mean_points",  "seed",         "divergence_estimate", "classifier_estimate",
        "fallback",         "fallback_tau_window",          "gates",               "cohort_key",
        "test_family",      "low_effort_quantile",          "liouville_tolerance", "potential",
        "filters",          "baseline",     "render",       "scoring",             "simulate"};
    for (const auto& [k, v] : j.items())
        if (!known.contains(k)) throw Error("config: unknown field '" + k + "'");

    RunConfig c;
    c.base_dir = std::move(base_dir);
    using detail::read_field;
    read_field(j, "corpus", c.corpus);
    read_field(j, "embeddings", c.embeddings);
    read_field(j, "scores", c.scores);
    read_field(j, "output_dir", c.output_dir);
    if (auto it = j.find("schema_mode"); it != j.end()) {
        auto s = it->get<std::string>();
        if (s == "strict")
            c.schema_mode = trace::SchemaMode::strict;
        else if (s == "lenient")
            c.schema_mode = trace::SchemaMode::lenient;
        else
            throw Error("config: schema_mode must be 'strict' or 'lenient'");
    }
    if (auto it = j.find("grid"); it != j.end()) {
        read_field(*it, "nx", c.grid_nx);
        read_field(*it, "ny", c.grid_ny);
    }
    if (auto it = j.find("entropy_mode"); it != j.end()) {
        try {
            c.entropy_mode = infodyn::parse_entropy_mode(it->get<std::string>());
        } catch (const Error& e) {
            throw Error(std::string("config: entropy_mode: ") + e.what());
        }
    }
    read_field(j, "theta", c.theta);
    read_field(j, "quantile", c.quantile);
    if (auto it = j.find("tau_window"); it != j.end()) {
        auto v = it->get<std::vector<double>>();
        if (v.size() != 2) throw Error("config: tau_window must have two entries");
        c.tau_window = {v[0], v[1]};
    }
    read_field(j, "bootstrap_n", c.bootstrap_n);
    read_field(j, "mean_points", c.mean_points);
    if (auto it = j.find("seed"); it != j.end() && !it->is_null()) c.seed = it->get<std::uint64_t>();
    if (auto it = j.find("divergence_estimate"); it != j.end())
        c.divergence_estimate = flow::parse_cell_estimate(it->get<std::string>());
    if (auto it = j.find("classifier_estimate"); it != j.end())
        c.classifier_estimate = flow::parse_cell_estimate(it->get<std::string>());
    read_field(j, "fallback", c.fallback);
    read_field(j, "fallback_tau_window", c.fallback_tau_window);
    if (auto it = j.find("gates"); it != j.end()) {
        for (const auto& [name, box] : it->items()) {
            auto stage = analysis::parse_stage(name);
            if (!stage) throw Error("config: gates: unknown stage '" + name + "'");
            auto v = box.get<std::vector<double>>();
            if (v.size() != 4) throw Error("config: gates." + name + " must be [u_lo, u_hi, e_lo, e_hi]");
            c.gates[*stage] = {v[0], v[1], v[2], v[3]};
        }
    }
    read_field(j, "cohort_key", c.cohort_key);
    if (auto it = j.find("test_family"); it != j.end()) {
        auto s = it->get<std::string>();
        if (s == "welch")
            c.test_family = analysis::TestFamily::welch;
        else if (s == "mann_whitney")
            c.test_family = analysis::TestFamily::mann_whitney;
        else
            throw Error("config: test_family must be 'welch' or 'mann_whitney'");
    }
    read_field(j, "low_effort_quantile", c.low_effort_quantile);
    read_field(j, "liouville_tolerance", c.liouville_tolerance);
    if (auto it = j.find("potential"); it != j.end()) {
        read_field(*it, "bins", c.potential_bins);
        read_field(*it, "min_samples", c.potential_min_samples);
    }
    read_field(j, "filters", c.filters);
    if (auto it = j.find("baseline"); it != j.end()) {
        read_field(*it, "k", c.mcq_k);
        read_field(*it, "max_questions", c.max_questions);
        read_field(*it, "perplexity", c.perplexity);
        read_field(*it, "iterations", c.tsne_iterations);
        read_field(*it, "kde_grid", c.kde_grid);
    }
    if (auto it = j.find("render"); it != j.end()) {
        if (auto p = it->find("divergence_palette"); p != it->end()) c.divergence_palette = svg::parse_palette(p->get<std::string>());
        if (auto p = it->find("density_palette"); p != it->end()) c.density_palette = svg::parse_palette(p->get<std::string>());
    }
    if (auto it = j.find("scoring"); it != j.end()) c.scoring = *it;
    if (auto it = j.find("simulate"); it != j.end()) c.simulate = *it;
    return c;
}

inline RunConfig load_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw Error("config " + path + ": " + e.what());
    }
    auto dir = fs::path(path).parent_path();
    return config_from_json(j, dir.empty() ? fs::path(".") : dir);
}

// ---------------------------------------------------------------------------
// Manifests

class OutputDir {
public:
    OutputDir(const RunConfig& cfg, std::string sub) : cfg_(cfg), sub_(std::move(sub)), dir_(cfg.out(sub_)) {
        fs::create_directories(dir_);
    }

    const fs::path& path() const { return dir_; }

    void input(const fs::path& p) {
        if (!fs::exists(p)) throw Error("missing " + p.filename().string());
        inputs_[display(p)] = sha256_hex(read_file(p.string()));
    }

    void write(const std::string& name, std::string_view content) {
        write_file((dir_ / name).string(), content);
        outputs_[name] = sha256_hex(content);
    }

    void warn(std::string w) { warnings_.push_back(std::move(w)); }
    void parameter(const std::string& key, json v) { parameters_[key] = std::move(v); }

    json manifest() const {
        json in = json::array(), out = json::array();
        for (const auto& [p, h] : inputs_) in.push_back({{"path", p}, {"sha256", h}});
        for (const auto& [p, h] : outputs_) out.push_back({{"path", p}, {"sha256", h}});
        return json{{"subcommand", sub_},
                    {"toolkit_version", std::string(kToolkitVersion)},
                    {"config_hash", cfg_.hash()},
                    {"inputs", in},
                    {"outputs", out},
                    {"warnings", warnings_},
                    {"parameters", parameters_}};
    }

    void finish() const { write_file((dir_ / "manifest.json").string(), manifest().dump(2) + "\n"); }

private:
    // Upstream artifacts relative to the output root, other inputs relative to
    // the config directory, so manifests do not depend on where a run lives.
    std::string display(const fs::path& p) const {
        auto norm = fs::weakly_canonical(p);
        auto rel = norm.lexically_relative(fs::weakly_canonical(cfg_.out_root()));
        if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
        rel = norm.lexically_relative(fs::weakly_canonical(cfg_.base_dir));
        return rel.empty() ? p.generic_string() : rel.generic_string();
    }

    const RunConfig& cfg_;
    std::string sub_;
    fs::path dir_;
    std::map<std::string, std::string> inputs_;
    std::map<std::string, std::string> outputs_;
    std::vector<std::string> warnings_;
    json parameters_ = json::object();
};

// Log sink for progress lines; the CLI points it at stderr.
using Log = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Upstream artifacts

inline fs::path require_artifact(const RunConfig& cfg, const std::string& sub, const std::string& name,
                                 const std::string& producer) {
    auto p = cfg.out(sub) / name;
    if (!fs::exists(p)) throw Error("missing " + name + " (run '" + producer + "' first)");
    return p;
}

// Corpus feeding downstream steps: the scored corpus when present, else the ingested one.
inline fs::path current_corpus(const RunConfig& cfg) {
    auto scored = cfg.out("score") / "corpus.jsonl";
    if (fs::exists(scored)) return scored;
    return require_artifact(cfg, "ingest", "corpus.jsonl", "ingest");
}

inline std::vector<trace::Trace> load_current_corpus(const RunConfig& cfg, OutputDir& od) {
    auto p = current_corpus(cfg);
    od.input(p);
    return trace::load_corpus(p.string(), trace::SchemaMode::strict).traces;
}

inline std::vector<infodyn::Trajectory> load_trajectories(const RunConfig& cfg, OutputDir& od) {
    auto p = require_artifact(cfg, "track", "trajectories.csv", "track");
    od.input(p);
    auto t = infodyn::read_trajectories_csv(p.string());
    if (t.empty()) throw Error("trajectories.csv holds no trajectories");
    return t;
}

inline std::string group_name(const trace::Trace& t, const std::string& key) {
    auto v = annotation_value(t, key);
    return v ? trace::to_string(*v) : std::string();
}

// ---------------------------------------------------------------------------
// Subcommands

inline void run_ingest(const RunConfig& cfg, const Log& log) {
    if (cfg.corpus.empty()) throw Error("config: corpus is required for 'ingest'");
    OutputDir od(cfg, "ingest");
    auto corpus_path = cfg.resolve(cfg.corpus);
    od.input(corpus_path);
    auto loaded = trace::load_corpus(corpus_path.string(), cfg.schema_mode);
    for (const auto& w : loaded.warnings) od.warn(w);
    std::string issues = "line,message\n";
    for (const auto& s : loaded.skipped) {
        issues += csv::join({std::to_string(s.line), s.message}) + "\n";
        od.warn("line " + std::to_string(s.line) + " skipped: " + s.message);
    }
    auto traces = std::move(loaded.traces);

    if (!cfg.scores.empty()) {
        auto sp = cfg.resolve(cfg.scores);
        od.input(sp);
        std::ifstream in(sp);
        auto spans = gateway::parse_offline_scores(in);
        std::size_t merged = 0;
        for (auto& t : traces) {
            auto it = spans.find(t.id);
            if (it == spans.end()) continue;
            t = gateway::merge_offline_scores(std::move(t), it->second);
            t.meta.extra["scoring"] = json{{"protocol", "offline"}};
            ++merged;
        }
        od.parameter("offline_scores_merged", merged);
    }

    auto filters = cfg.parsed_filters();
    std::vector<trace::Trace> kept;
    for (auto& t : traces)
        if (matches_all(t, filters)) kept.push_back(std::move(t));
    if (kept.empty()) throw Error("ingest: corpus is empty after filtering");
    od.parameter("filters", cfg.filters);
    od.parameter("accepted", loaded.line_count - loaded.skipped.size());
    od.parameter("kept_after_filters", kept.size());

    od.write("corpus.jsonl", trace::serialize_corpus(kept));
    od.write("summary.json", trace::summary_to_json(trace::corpus_summary(kept)).dump(2) + "\n");
    od.write("issues.csv", issues);
    od.finish();
    log("ingest: " + std::to_string(kept.size()) + " traces");
}

inline void run_score(const RunConfig& cfg, const Log& log, gateway::Transport transport = nullptr) {
    OutputDir od(cfg, "score");
    auto in = require_artifact(cfg, "ingest", "corpus.jsonl", "ingest");
    od.input(in);
    auto traces = trace::load_corpus(in.string()).traces;
    std::vector<trace::Trace> todo;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < traces.size(); ++i)
        if (!traces[i].scored()) {
            todo.push_back(traces[i]);
            where.push_back(i);
        }
    std::string failures = "trace_id,error\n";
    if (!todo.empty()) {
        if (!cfg.scoring) throw Error("config: scoring section is required to score " + std::to_string(todo.size()) + " unscored traces");
        auto sc = gateway::scoring_config_from_json(*cfg.scoring);
        if (!sc.cache_dir.empty()) sc.cache_dir = cfg.resolve(sc.cache_dir).string();
        if (!transport) {
            if (sc.endpoint_url.empty()) throw Error("config: scoring.endpoint_url is required");
            transport = gateway::http_transport(sc);
        }
        gateway::Scorer scorer(sc, transport);
        auto results = scorer.score_corpus(todo);
        std::size_t ok = 0;
        for (std::size_t k = 0; k < results.size(); ++k) {
            if (results[k].error) {
                failures += csv::join({todo[k].id, *results[k].error}) + "\n";
                od.warn(*results[k].error);
            } else {
                traces[where[k]] = std::move(results[k].trace);
                ++ok;
            }
        }
        od.parameter("scored", ok);
        od.parameter("failed", results.size() - ok);
        od.parameter("model", sc.model_name);
        od.parameter("separator", sc.separator);
        log("score: " + std::to_string(ok) + "/" + std::to_string(todo.size()) + " traces scored");
    } else {
        od.warn("all traces already scored; corpus passed through");
        log("score: nothing to score");
    }
    od.write("corpus.jsonl", trace::serialize_corpus(traces));
    od.write("failures.csv", failures);
    od.finish();
}

inline void run_track(const RunConfig& cfg, const Log& log) {
    OutputDir od(cfg, "track");
    auto traces = load_current_corpus(cfg, od);
    std::vector<infodyn::Trajectory> trajs;
    for (const auto& t : traces) {
        if (!t.scored()) {
            od.warn("trace '" + t.id + "' is unscored and was skipped");
            continue;
        }
        trajs.push_back(infodyn::build_trajectory(t, cfg.entropy_mode));
    }
    if (trajs.empty()) throw Error("track: no scored traces");
    auto stats = infodyn::normalize_corpus(trajs);
    od.parameter("entropy_mode", infodyn::to_string(cfg.entropy_mode));
    od.write("trajectories.csv", infodyn::trajectories_csv(trajs));
    od.write("normalization.json",
             json{{"u_min", stats.u_min}, {"u_max", stats.u_max}, {"e_min", stats.e_min}, {"e_max", stats.e_max}}.dump(2) +
                 "\n");
    od.finish();
    log("track: " + std::to_string(trajs.size()) + " trajectories");
}

inline std::vector<flow::VelocitySample> corpus_samples(std::span<const infodyn::Trajectory> trajs, OutputDir& od) {
    std::vector<flow::VelocitySample> samples;
    for (const auto& tr : trajs) {
        std::size_t usable = std::count_if(tr.points.begin(), tr.points.end(), [](const auto& p) { return !p.origin; });
        if (usable < 2) {
            od.warn("trajectory '" + tr.trace_id + "' has no segment away from the origin point");
            continue;
        }
        auto s = flow::segment_velocities(tr);
        samples.insert(samples.end(), s.begin(), s.end());
    }
    if (samples.empty()) throw Error("no velocity samples");
    return samples;
}

inline void run_flow(const RunConfig& cfg, const Log& log) {
    OutputDir od(cfg, "flow");
    auto trajs = load_trajectories(cfg, od);
    auto field = flow::accumulate_field(corpus_samples(trajs, od), flow::Grid(cfg.grid_nx, cfg.grid_ny));
    if (field.clipped()) od.warn(std::to_string(field.clipped()) + " samples outside [0,1]^2 clamped to the border cells");
    flow::DivergenceOptions opts;
    opts.estimate = cfg.divergence_estimate;
    auto div = flow::discrete_divergence(field, opts);
    auto rep = flow::liouville_report(div, cfg.liouville_tolerance);
    od.parameter("divergence_estimate", flow::to_string(cfg.divergence_estimate));
    od.write("flowfield.csv", flow::flowfield_csv(field));
    od.write("divergence.csv", flow::divergence_csv(div));
    od.write("liouville.json", json{{"mean_abs", rep.mean_abs},
                                    {"max_abs", rep.max_abs},
                                    {"fraction_below_tolerance", rep.fraction_below_tolerance},
                                    {"tolerance", rep.tolerance},
                                    {"defined_cells", rep.defined_cells},
                                    {"non_empty_cells", field.non_empty_cells()},
                                    {"mean_cell_speed", field.mean_cell_speed()},
                                    {"samples", field.total()}}
                                   .dump(2) +
                                   "\n");
    od.finish();
    log("flow: mean |div| " + format_double(rep.mean_abs) + " over " + std::to_string(rep.defined_cells) + " cells");
}

inline void run_hamiltonian(const RunConfig& cfg, const Log& log) {
    OutputDir od(cfg, "hamiltonian");
    auto trajs = load_trajectories(cfg, od);
    auto samples = corpus_samples(trajs, od);
    flow::PotentialBins bins;
    bins.count = cfg.potential_bins;
    bins.min_samples = cfg.potential_min_samples;
    auto prof = flow::reconstruct_potential(samples, bins);
    std::string energy = "trace_id,step_index,u,e,H\n";
    std::size_t outside = 0;
    std::vector<double> spreads;
    for (const auto& tr : trajs) {
        std::vector<double> hs;
        for (const auto& p : tr.points) {
            if (p.origin) continue;
            double h;
            try {
                h = flow::hamiltonian_energy(p.u, p.e, prof);
            } catch (const Error&) {
                ++outside;
                continue;
            }
            hs.push_back(h);
            energy += csv::join({tr.trace_id, std::to_string(p.step_index), format_double(p.u), format_double(p.e),
                                 format_double(h)}) +
                      "\n";
        }
        if (hs.size() >= 2) spreads.push_back(*std::max_element(hs.begin(), hs.end()) - *std::min_element(hs.begin(), hs.end()));
    }
    if (outside) od.warn(std::to_string(outside) + " points outside the reconstructed potential range have no energy");
    od.write("potential.csv", flow::potential_csv(prof));
    od.write("energy.csv", energy);
    json summary{{"retained_bins", prof.retained_bins().size()},
                 {"points_without_energy", outside},
                 {"median_energy_spread", spreads.empty() ? json(nullptr) : json(quantile(spreads, 0.5))}};
    od.write("hamiltonian.json", summary.dump(2) + "\n");
    od.finish();
    log("hamiltonian: " + std::to_string(prof.retained_bins().size()) + " potential bins");
}

inline void run_simulate(const RunConfig& cfg, const Log& log) {
    if (!cfg.simulate) throw Error("config: simulate section is required for 'simulate'");
    OutputDir od(cfg, "simulate");
    json spec_j = *cfg.simulate;
    if (!spec_j.contains("seed")) spec_j["seed"] = cfg.require_seed("simulate");
    auto spec = synth::spec_from_json(spec_j);
    auto corpus = synth::generate(spec);
    for (const auto& n : corpus.notes) od.warn(n);
    od.parameter("spec", synth::spec_to_json(spec));
    od.write("corpus.jsonl", trace::serialize_corpus(corpus.traces));
    od.write("truth.jsonl", synth::serialize_truth(corpus.truth));
    od.write("embeddings.jsonl", baselines::serialize_embeddings(corpus.embeddings));
    od.finish();
    log("simulate: " + std::to_string(corpus.traces.size()) + " synthetic traces");
}

inline void run_classify(const RunConfig& cfg, const Log& log) {
    OutputDir od(cfg, "classify");
    auto trajs = load_trajectories(cfg, od);
    auto traces = load_current_corpus(cfg, od);
    analysis::CorrectnessIndex correctness;
    analysis::ErrorIndex errors;
    for (const auto& t : traces) {
        if (t.meta.correctness) correctness[t.id] = *t.meta.correctness;
        for (const auto& s : t.steps) {
            bool wrong = t.meta.correctness && static_cast<std::size_t>(s.index) <= t.meta.correctness->size() &&
                         !(*t.meta.correctness)[static_cast<std::size_t>(s.index) - 1];
            if (!s.error_label && !wrong) continue;
            std::optional<Stage> annotated;
            if (s.error_label) annotated = analysis::parse_stage(*s.error_label);
            // Only explicitly labelled steps count as error steps; bare incorrect steps
            // merely leave the reference flow.
            if (s.error_label) errors[t.id].push_back({s.index, annotated});
        }
    }
    auto ref = analysis::reference_flow(trajs, correctness, flow::Grid(cfg.grid_nx, cfg.grid_ny));
    analysis::ClassifierConfig cc;
    cc.theta = cfg.theta;
    cc.gates = cfg.gates;
    cc.fallback = cfg.fallback;
    cc.fallback_tau_window = cfg.fallback_tau_window;
    cc.estimate = cfg.classifier_estimate;
    auto run = analysis::classify_corpus(trajs, errors, ref, cc);
    std::string stages = "trace_id,step_index,cosine,label,gate_conflict\n";
    std::size_t fallbacks = 0;
    for (const auto& r : run.records) {
        stages += csv::join({r.trace_id, std::to_string(r.step_index), format_double(r.label.cosine),
                             analysis::to_string(r.label.stage), r.label.gate_conflict ? "1" : "0"}) +
                  "\n";
        fallbacks += r.label.used_fallback;
    }
    for (const auto& s : run.skipped) od.warn("step " + std::to_string(s.step_index) + " of '" + s.trace_id + "' skipped: " + s.reason);
    json report{{"theta", cfg.theta}, {"classified", run.records.size()}, {"skipped", run.skipped.size()},
                {"fallback_used", fallbacks}, {"reference_segments", ref.samples.size()}};
    if (!run.records.empty()) {
        auto d = analysis::stage_distribution(run.records);
        json per = json::object();
        for (auto st : analysis::kStages) {
            auto k = static_cast<std::size_t>(st);
            per[analysis::to_string(st)] = {{"count", d.counts[k]},
                                            {"ratio", d.ratios[k]},
                                            {"annotated", d.annotated[k]},
                                            {"agreement", d.annotated[k] ? json(d.agreement[k]) : json(nullptr)}};
        }
        report["stages"] = per;
    }
    od.write("stages.csv", stages);
    od.write("stage_report.json", report.dump(2) + "\n");
    od.finish();
    log("classify: " + std::to_string(run.records.size()) + " error steps labelled");
}

inline std::string meants_rows(const std::string& cohort, const analysis::MeanTrajectory& mt) {
    std::string out;
    for (std::size_t k = 0; k < mt.tau.size(); ++k)
        out += csv::join({cohort, format_double(mt.tau[k]), format_double(mt.u_mean[k]), format_double(mt.e_mean[k]),
                          format_double(mt.u_lo[k]), format_double(mt.u_hi[k]), format_double(mt.e_lo[k]),
                          format_double(mt.e_hi[k])}) +
               "\n";
    return out;
}

inline std::vector<svg::MeanSeries> read_meants_csv(const std::string& path) {
    auto t = csv::read(path);
    const std::vector<std::string> cols = {"cohort", "tau", "u_mean", "e_mean", "u_lo", "u_hi", "e_lo", "e_hi"};
    if (t.header != cols) throw Error(path + ": unexpected meants.csv header");
    std::vector<svg::MeanSeries> out;
    for (const auto& r : t.rows) {
        if (out.empty() || out.back().label != r[0]) out.push_back({r[0], {}});
        auto& m = out.back().mean;
        m.tau.push_back(parse_double(r[1]));
        m.u_mean.push_back(parse_double(r[2]));
        m.e_mean.push_back(parse_double(r[3]));
        m.u_lo.push_back(parse_double(r[4]));
        m.u_hi.push_back(parse_double(r[5]));
        m.e_lo.push_back(parse_double(r[6]));
        m.e_hi.push_back(parse_double(r[7]));
    }
    return out;
}

inline void run_compare(const RunConfig& cfg, const Log& log) {
    OutputDir od(cfg, "compare");
    const auto seed = cfg.require_seed("compare");
    auto trajs = load_trajectories(cfg, od);
    auto traces = load_current_corpus(cfg, od);
    std::map<std::string, std::string> group_of;
    for (const auto& t : traces) group_of[t.id] = group_name(t, cfg.cohort_key);

    std::map<std::string, std::vector<infodyn::Trajectory>> groups;
    std::size_t ungrouped = 0;
    for (const auto& tr : trajs) {
        auto it = group_of.find(tr.trace_id);
        if (it == group_of.end() || it->second.empty()) {
            ++ungrouped;
            continue;
        }
        groups[it->second].push_back(tr);
    }
    if (ungrouped) od.warn(std::to_string(ungrouped) + " trajectories lack '" + cfg.cohort_key + "' and were left out of the cohorts");

    const auto thr = analysis::corpus_thresholds(trajs, cfg.quantile);
    std::vector<double> all_e;
    for (const auto& tr : trajs)
        for (const auto& p : tr.points) all_e.push_back(p.e);
    const double low_effort = quantile(all_e, cfg.low_effort_quantile);
    auto low_region = [low_effort](const infodyn::PhasePoint& p) { return p.e < low_effort; };

    std::string meants = "cohort,tau,u_mean,e_mean,u_lo,u_hi,e_lo,e_hi\n";
    meants += meants_rows("all", analysis::mean_trajectory(trajs, cfg.mean_points, cfg.bootstrap_n, seed));

    json report;
    report["cohort_key"] = cfg.cohort_key;
    report["test_family"] = cfg.test_family == analysis::TestFamily::welch ? "welch" : "mann_whitney";
    report["quantile"] = cfg.quantile;
    report["thresholds"] = {{"u", thr.u}, {"e", thr.e}};
    report["low_effort_threshold"] = low_effort;
    report["tau_window"] = {cfg.tau_window.first, cfg.tau_window.second};
    report["corpus_low_effort_occupancy"] = analysis::region_occupancy(trajs, low_region).fraction;

    std::map<std::string, std::vector<analysis::TrajectoryStats>> stats;
    json groups_j = json::object();
    for (const auto& [name, cohort] : groups) {
        stats[name] = analysis::descriptive_stats(cohort, thr);
        json metrics = json::object();
        for (const auto& m : analysis::kMetricNames) {
            std::vector<double> xs;
            for (const auto& s : stats[name]) xs.push_back(analysis::metric(s, m));
            double mean = stats::mean(xs);
            metrics[m] = {{"mean", mean},
                          {"sd", xs.size() > 1 ? json(std::sqrt(stats::sample_variance(xs))) : json(nullptr)},
                          {"min", *std::min_element(xs.begin(), xs.end())},
                          {"max", *std::max_element(xs.begin(), xs.end())}};
        }
        groups_j[name] = {{"n", cohort.size()},
                          {"metrics", metrics},
                          {"low_effort_occupancy", analysis::region_occupancy(cohort, low_region).fraction}};
        meants += meants_rows(name, analysis::mean_trajectory(cohort, cfg.mean_points, cfg.bootstrap_n, seed));
    }
    report["groups"] = groups_j;

    json tests = json::array(), cosines = json::array();
    for (auto a = groups.begin(); a != groups.end(); ++a) {
        for (auto b = std::next(a); b != groups.end(); ++b) {
            for (const auto& m : analysis::kMetricNames) {
                try {
                    auto r = analysis::compare_metric(stats[a->first], stats[b->first], m, cfg.test_family);
                    tests.push_back({{"a", a->first}, {"b", b->first}, {"metric", m}, {"test", r.test},
                                     {"statistic", std::isfinite(r.statistic) ? json(r.statistic) : json(format_double(r.statistic))},
                                     {"df", r.df}, {"p", r.p}});
                } catch (const Error& e) {
                    od.warn(a->first + " vs " + b->first + " on " + m + ": " + e.what());
                }
            }
            try {
                auto c = analysis::cohort_cosine(a->second, b->second, cfg.tau_window, cfg.mean_points);
                cosines.push_back({{"a", a->first}, {"b", b->first}, {"mean_cosine", c.mean}, {"points", c.points}});
            } catch (const Error& e) {
                od.warn(a->first + " vs " + b->first + " cosine: " + e.what());
            }
        }
    }
    report["tests"] = tests;
    report["cosines"] = cosines;
    od.write("report.json", report.dump(2) + "\n");
    od.write("meants.csv", meants);
    od.finish();
    log("compare: " + std::to_string(groups.size()) + " cohorts by " + cfg.cohort_key);
}

inline std::string landscape_csv(const baselines::LandscapeGrid& g) {
    std::string out = "i,j,x_center,y_center,density\n";
    for (int j = 0; j < g.ny; ++j)
        for (int i = 0; i < g.nx; ++i)
            out += csv::join({std::to_string(i), std::to_string(j), format_double(g.x_center(i)),
                              format_double(g.y_center(j)), format_double(g.at(i, j))}) +
                   "\n";
    return out;
}

inline baselines::LandscapeGrid read_landscape_csv(const std::string& path) {
    auto t = csv::read(path);
    const auto ci = t.column("i"), cj = t.column("j"), cx = t.column("x_center"), cy = t.column("y_center"),
               cd = t.column("density");
    baselines::LandscapeGrid g;
    for (const auto& r : t.rows) {
        g.nx = std::max(g.nx, static_cast<int>(parse_int(r[ci])) + 1);
        g.ny = std::max(g.ny, static_cast<int>(parse_int(r[cj])) + 1);
    }
    if (g.nx < 2 || g.ny < 2) throw Error(path + ": landscape grid needs at least 2x2 cells");
    g.density.assign(static_cast<std::size_t>(g.nx) * g.ny, 0.0);
    std::vector<double> xs(g.nx), ys(g.ny);
    for (const auto& r : t.rows) {
        int i = static_cast<int>(parse_int(r[ci])), j = static_cast<int>(parse_int(r[cj]));
        xs[i] = parse_double(r[cx]);
        ys[j] = parse_double(r[cy]);
        g.density[static_cast<std::size_t>(j) * g.nx + i] = parse_double(r[cd]);
    }
    double dx = (xs.back() - xs.front()) / (g.nx - 1), dy = (ys.back() - ys.front()) / (g.ny - 1);
    g.x0 = xs.front() - 0.5 * dx;
    g.x1 = xs.back() + 0.5 * dx;
    g.y0 = ys.front() - 0.5 * dy;
    g.y1 = ys.back() + 0.5 * dy;
    return g;
}

inline void run_baseline(const RunConfig& cfg, const Log& log) {
    if (cfg.embeddings.empty()) throw Error("config: embeddings is required for 'baseline'");
    OutputDir od(cfg, "baseline");
    const auto seed = cfg.require_seed("baseline");
    auto traces = load_current_corpus(cfg, od);
    auto emb_path = cfg.resolve(cfg.embeddings);
    od.input(emb_path);
    auto records = baselines::load_embeddings(emb_path.string());

    auto mcq = baselines::pseudo_mcq(traces, cfg.mcq_k, seed);
    if (mcq.sets.empty()) throw Error("baseline: no question has at least 2 answers");
    if (!mcq.skipped.empty()) od.warn(std::to_string(mcq.skipped.size()) + " questions with fewer than 2 answers skipped");
    if (mcq.sets.size() > cfg.max_questions) mcq.sets.resize(cfg.max_questions);
    std::set<std::string> chosen;
    json sets = json::array();
    for (const auto& s : mcq.sets) {
        chosen.insert(s.trace_ids.begin(), s.trace_ids.end());
        sets.push_back({{"question", s.question}, {"trace_ids", s.trace_ids}});
    }

    std::vector<const baselines::EmbeddingRecord*> picked;
    for (const auto& r : records)
        if (chosen.contains(r.trace_id)) picked.push_back(&r);
    std::sort(picked.begin(), picked.end(), [](const auto* a, const auto* b) {
        return std::tie(a->trace_id, a->step_index) < std::tie(b->trace_id, b->step_index);
    });
    if (picked.empty()) throw Error("baseline: no embeddings for the selected traces");
    std::vector<std::vector<double>> x;
    for (const auto* r : picked) x.push_back(r->vector);

    baselines::TsneConfig tc;
    tc.perplexity = cfg.perplexity;
    tc.iterations = cfg.tsne_iterations;
    tc.seed = seed;
    if (tc.perplexity >= (static_cast<double>(x.size()) - 1.0) / 3.0) {
        tc.perplexity = std::max(1.0, std::floor((static_cast<double>(x.size()) - 1.0) / 3.0) - 1.0);
        od.warn("perplexity lowered to " + format_double(tc.perplexity) + " for " + std::to_string(x.size()) + " points");
    }
    auto ts = baselines::tsne(x, tc);
    std::string tsne_csv = "trace_id,step_index,x,y\n";
    for (std::size_t k = 0; k < picked.size(); ++k)
        tsne_csv += csv::join({picked[k]->trace_id, std::to_string(picked[k]->step_index), format_double(ts.coords[k][0]),
                               format_double(ts.coords[k][1])}) +
                    "\n";
    baselines::KdeConfig kc;
    kc.nx = kc.ny = cfg.kde_grid;
    auto land = baselines::kde_landscape(ts.coords, kc);

    od.parameter("perplexity", tc.perplexity);
    od.write("tsne.csv", tsne_csv);
    od.write("landscape.csv", landscape_csv(land));
    od.write("baseline.json", json{{"sets", sets},
                                   {"points", x.size()},
                                   {"kl_after_exaggeration", ts.kl_after_exaggeration},
                                   {"kl_final", ts.kl_final},
                                   {"bandwidth", land.bandwidth}}
                                  .dump(2) +
                                  "\n");
    od.finish();
    log("baseline: t-SNE over " + std::to_string(x.size()) + " steps from " + std::to_string(mcq.sets.size()) + " questions");
}

inline void run_render(const RunConfig& cfg, const Log& log) {
    OutputDir od(cfg, "render");
    auto trajs = load_trajectories(cfg, od);
    auto ff_path = require_artifact(cfg, "flow", "flowfield.csv", "flow");
    auto dv_path = require_artifact(cfg, "flow", "divergence.csv", "flow");
    auto mt_path = require_artifact(cfg, "compare", "meants.csv", "compare");
    od.input(ff_path);
    od.input(dv_path);
    od.input(mt_path);
    auto field = flow::read_flowfield_csv(ff_path.string());
    auto div = flow::read_divergence_csv(dv_path.string());
    auto means = read_meants_csv(mt_path.string());

    auto note = [&](const std::string& fig, const svg::RenderResult& r) {
        if (r.clipped) od.warn(fig + ": " + std::to_string(r.clipped) + " elements clipped to the plot area");
        od.write(fig, r.svg);
    };
    note("quiver.svg", svg::render_quiver(field));

    svg::HeatmapStyle hs;
    hs.title = "divergence";
    hs.palette = cfg.divergence_palette;
    note("divergence.svg", svg::render_heatmap(svg::heatmap_from_divergence(div), hs));

    svg::HeatmapData dens;
    dens.nx = field.grid().nx();
    dens.ny = field.grid().ny();
    for (int j = 0; j < dens.ny; ++j)
        for (int i = 0; i < dens.nx; ++i) {
            dens.values.push_back(field.density(i, j));
            dens.defined.push_back(1);
        }
    dens.xlabel = "uncertainty u";
    dens.ylabel = "effort e";
    dens.legend = "density";
    svg::HeatmapStyle ds;
    ds.title = "phase-space density";
    ds.palette = cfg.density_palette;
    note("density.svg", svg::render_heatmap(dens, ds));

    svg::TrajectoryStyle ts;
    note("trajectories.svg", svg::render_trajectories(trajs, {}, ts));
    ts.title = "mean trajectories";
    note("meants.svg", svg::render_trajectories({}, means, ts));

    auto land_path = cfg.out("baseline") / "landscape.csv";
    auto tsne_path = cfg.out("baseline") / "tsne.csv";
    if (fs::exists(land_path) && fs::exists(tsne_path)) {
        od.input(land_path);
        od.input(tsne_path);
        auto land = read_landscape_csv(land_path.string());
        auto t = csv::read(tsne_path.string());
        svg::HeatmapStyle ls;
        ls.title = "landscape";
        ls.palette = cfg.density_palette;
        // One polyline per trace, in step order.
        for (std::size_t k = 0; k < t.rows.size(); ++k) {
            if (k == 0 || t.rows[k][0] != t.rows[k - 1][0]) ls.overlay.emplace_back();
            ls.overlay.back().emplace_back(parse_double(t.rows[k][2]), parse_double(t.rows[k][3]));
        }
        note("landscape.svg", svg::render_heatmap(svg::heatmap_from_landscape(land), ls));
    } else {
        od.warn("baseline outputs absent; landscape.svg not rendered");
    }
    od.finish();
    log("render: figures written");
}

inline const std::vector<std::string> kSubcommands = {"ingest", "score",    "track",    "flow",   "hamiltonian", "simulate",
                                                      "classify", "compare", "baseline", "render", "all"};

// Every input path named in the config must resolve before any step runs.
inline void check_paths(const RunConfig& cfg) {
    for (const auto& [field, p] : {std::pair<const char*, const std::string&>{"corpus", cfg.corpus},
                                   {"embeddings", cfg.embeddings},
                                   {"scores", cfg.scores}})
        if (!p.empty() && !fs::exists(cfg.resolve(p)))
            throw Error(std::string("config: ") + field + " path '" + p + "' does not exist");
}

inline void run(const std::string& sub, const RunConfig& cfg, const Log& log, gateway::Transport transport = nullptr) {
    cfg.validate();
    check_paths(cfg);
    if (sub == "ingest") return run_ingest(cfg, log);
    if (sub == "score") return run_score(cfg, log, std::move(transport));
    if (sub == "track") return run_track(cfg, log);
    if (sub == "flow") return run_flow(cfg, log);
    if (sub == "hamiltonian") return run_hamiltonian(cfg, log);
    if (sub == "simulate") return run_simulate(cfg, log);
    if (sub == "classify") return run_classify(cfg, log);
    if (sub == "compare") return run_compare(cfg, log);
    if (sub == "baseline") return run_baseline(cfg, log);
    if (sub == "render") return run_render(cfg, log);
    if (sub == "all") {
        run_ingest(cfg, log);
        // A stale scored corpus from an earlier run must not shadow this ingest.
        fs::remove_all(cfg.out("score"));
        bool unscored = false;
        for (const auto& t : trace::load_corpus((cfg.out("ingest") / "corpus.jsonl").string()).traces)
            unscored = unscored || !t.scored();
        if (unscored) run_score(cfg, log, std::move(transport));
        run_track(cfg, log);
        run_flow(cfg, log);
        run_hamiltonian(cfg, log);
        if (cfg.simulate) run_simulate(cfg, log);
        run_classify(cfg, log);
        run_compare(cfg, log);
        if (!cfg.embeddings.empty()) run_baseline(cfg, log);
        run_render(cfg, log);
        return;
    }
    throw Error("unknown subcommand '" + sub + "'");
}

}  // namespace iftrack::pipeline
