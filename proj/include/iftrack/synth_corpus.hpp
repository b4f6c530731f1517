#pragma once

// Synthetic validation corpus: scored traces whose realized-mode uncertainty
// follows simulated Hamiltonian trajectories, with planted error steps and
// cohort attributes, plus a ground-truth sidecar.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "baselines.hpp"
#include "common.hpp"
#include "flow_numerics.hpp"
#include "infodyn.hpp"
#include "trace_model.hpp"

namespace iftrack::synth {

using json = nlohmann::json;
using analysis::Stage;

inline constexpr double kMaxRealizedUncertainty = 1.0 / std::numbers::e;

// Log-probability x on the branch p = e^x in (0, 1/e] with -p ln p = u.
// u = 0 takes the p = 1 root.
inline double logprob_for_uncertainty(double u) {
    if (!(u >= 0.0) || u > kMaxRealizedUncertainty + 1e-15)
        throw Error("uncertainty " + format_double(u) + " unreachable in realized mode (must lie in [0, 1/e])");
    if (u == 0.0) return 0.0;
    if (u >= kMaxRealizedUncertainty) return -1.0;
    // g(x) = -x e^x is increasing on (-inf, -1].
    double lo = -800.0, hi = -1.0;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        if (-mid * std::exp(mid) < u)
            lo = mid;
        else
            hi = mid;
    }
    double a = -lo * std::exp(lo), b = -hi * std::exp(hi);
    return std::abs(a - u) <= std::abs(b - u) ? lo : hi;
}

struct Potential {
    enum class Kind { harmonic, flat } kind = Kind::harmonic;
    double k = 1.0;

    double force(double u) const { return kind == Kind::harmonic ? k * u : 0.0; }
    std::string describe() const {
        return kind == Kind::harmonic ? "harmonic k=" + format_double(k) : std::string("flat");
    }
};

struct SynthSpec {
    std::size_t n_traces = 200;
    int steps_min = 20;
    int steps_max = 40;
    Potential potential;
    double noise_level = 0.0;
    double error_fraction = 0.2;
    std::array<double, 3> stage_mix{1.0, 1.0, 1.0};  // intuition collapse, metacognition conflict, rationale error
    double error_magnitude = 1.0;
    int grid_nx = 20;  // grid of the reference flow used to place errors
    int grid_ny = 20;
    std::size_t n_questions = 20;
    double arc = 1.5;       // simulated time covered by one trace
    double dtau = 1e-3;     // integrator step
    double amplitude_min = 0.6;
    double amplitude_max = 1.0;
    double u_center = 0.18;  // raw uncertainty = u_center + u_scale * simulated u
    double u_scale = 0.15;
    bool rescale_out_of_range = false;
    std::size_t embedding_dim = 16;
    std::uint64_t seed = 42;
};

inline void validate(const SynthSpec& s) {
    if (s.n_traces == 0) throw Error("synth spec: n_traces must be positive");
    if (s.steps_min < 3 || s.steps_max < s.steps_min) throw Error("synth spec: need 3 <= steps_min <= steps_max");
    if (s.error_fraction < 0.0 || s.error_fraction > 1.0) throw Error("synth spec: error_fraction must lie in [0, 1]");
    for (double w : s.stage_mix)
        if (w < 0.0) throw Error("synth spec: stage_mix weights must be non-negative");
    if (s.error_fraction > 0.0 && s.stage_mix[0] + s.stage_mix[1] + s.stage_mix[2] <= 0.0)
        throw Error("synth spec: stage_mix must have positive total");
    if (!(s.arc > 0.0) || !(s.dtau > 0.0)) throw Error("synth spec: arc and dtau must be positive");
    if (s.amplitude_min < 0.0 || s.amplitude_max < s.amplitude_min) throw Error("synth spec: invalid amplitude range");
    if (s.n_questions == 0) throw Error("synth spec: n_questions must be positive");
}

inline SynthSpec spec_from_json(const json& j) {
    SynthSpec s;
    auto get = [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) field = it->get<std::decay_t<decltype(field)>>();
    };
    get("n_traces", s.n_traces);
    get("steps_min", s.steps_min);
    get("steps_max", s.steps_max);
    get("noise_level", s.noise_level);
    get("error_fraction", s.error_fraction);
    get("stage_mix", s.stage_mix);
    get("error_magnitude", s.error_magnitude);
    get("grid_nx", s.grid_nx);
    get("grid_ny", s.grid_ny);
    get("n_questions", s.n_questions);
    get("arc", s.arc);
    get("dtau", s.dtau);
    get("amplitude_min", s.amplitude_min);
    get("amplitude_max", s.amplitude_max);
    get("u_center", s.u_center);
    get("u_scale", s.u_scale);
    get("rescale_out_of_range", s.rescale_out_of_range);
    get("embedding_dim", s.embedding_dim);
    if (auto it = j.find("seed"); it != j.end())
        s.seed = it->get<std::uint64_t>();
    else
        throw Error("synth spec: seed is mandatory");
    if (auto it = j.find("potential"); it != j.end()) {
        auto kind = it->at("kind").get<std::string>();
        if (kind == "harmonic")
            s.potential.kind = Potential::Kind::harmonic;
        else if (kind == "flat")
            s.potential.kind = Potential::Kind::flat;
        else
            throw Error("synth spec: unknown potential '" + kind + "'");
        if (auto k = it->find("k"); k != it->end()) s.potential.k = k->get<double>();
    }
    validate(s);
    return s;
}

inline json spec_to_json(const SynthSpec& s) {
    return json{{"n_traces", s.n_traces},
                {"steps_min", s.steps_min},
                {"steps_max", s.steps_max},
                {"potential",
                 {{"kind", s.potential.kind == Potential::Kind::harmonic ? "harmonic" : "flat"}, {"k", s.potential.k}}},
                {"noise_level", s.noise_level},
                {"error_fraction", s.error_fraction},
                {"stage_mix", s.stage_mix},
                {"error_magnitude", s.error_magnitude},
                {"grid_nx", s.grid_nx},
                {"grid_ny", s.grid_ny},
                {"n_questions", s.n_questions},
                {"arc", s.arc},
                {"dtau", s.dtau},
                {"amplitude_min", s.amplitude_min},
                {"amplitude_max", s.amplitude_max},
                {"u_center", s.u_center},
                {"u_scale", s.u_scale},
                {"rescale_out_of_range", s.rescale_out_of_range},
                {"embedding_dim", s.embedding_dim},
                {"seed", s.seed}};
}

// ---------------------------------------------------------------------------
// Error planting

struct PlantedError {
    int step_index = 0;  // error step; the segment ending here carries the perturbation
    int moved_step = 0;  // the preceding step, also displaced
    Stage stage = Stage::metacognition_conflict;
    double cosine = 0.0;  // against the clean reference flow at the perturbed segment's midpoint
};

struct PlantResult {
    infodyn::Trajectory trajectory;
    PlantedError label;
};

// Cosine bands a planted error must land in, with margin from the default
// classifier dead band.
struct PlantBands {
    double collapse_max = -0.8;
    double conflict_abs = 0.1;
    double rationale_min = 0.8;
    double magnitude = 1.0;          // target |v_err| / |v_ref|; accepted within [magnitude/2, 2 magnitude]
    std::size_t min_reference = 10;  // samples required in the reference cell
    int search = 81;                 // candidate positions per moved point
};

inline bool in_band(Stage stage, double c, const PlantBands& b) {
    switch (stage) {
        case Stage::intuition_collapse: return c <= b.collapse_max;
        case Stage::metacognition_conflict: return std::abs(c) <= b.conflict_abs;
        case Stage::rationale_error: return c >= b.rationale_min;
    }
    return false;
}

// Moves steps k and k+1 of a trajectory so that the segment k -> k+1, seen at
// its new midpoint, has the requested cosine class against `reference`.
// Effort is the difference of consecutive uncertainties, so the segment's
// location and velocity are coupled; the two raw uncertainties are searched
// jointly and the smallest admissible displacement wins. Edits stay inside the
// ranges of `stats` and never touch a point attaining one of its extrema, so
// the corpus normalization is unchanged.
inline PlantResult plant_error(const infodyn::Trajectory& traj, Stage stage, const flow::FlowField& reference,
                               const infodyn::NormalizationStats& stats, std::uint64_t seed,
                               const PlantBands& bands = {}) {
    const std::size_t n = traj.points.size();
    if (n < 4) throw Error("plant_error: trajectory '" + traj.trace_id + "' has fewer than 4 points");
    const double su = stats.u_max - stats.u_min;
    const double se = stats.e_max - stats.e_min;
    if (!(su > 0.0) || !(se > 0.0)) throw Error("plant_error: degenerate normalization range");
    if (bands.search < 3) throw Error("plant_error: search resolution must be >= 3");

    std::vector<double> u(n);
    for (std::size_t t = 0; t < n; ++t) u[t] = traj.points[t].u_raw;
    auto e_of = [&](const std::vector<double>& seq, std::size_t t) { return t == 0 ? 0.0 : seq[t] - seq[t - 1]; };
    auto extremal = [&](std::size_t t) {
        double e = e_of(u, t);
        return u[t] == stats.u_min || u[t] == stats.u_max || (t > 0 && (e == stats.e_min || e == stats.e_max));
    };
    const double dtau = 1.0 / static_cast<double>(n - 1);
    const auto& g = reference.grid();

    // Moved point k ranges over 1 .. n-3 (0-based) so the error step is never
    // the origin's successor and the origin stays fixed.
    std::vector<std::size_t> candidates;
    for (std::size_t k = 2; k + 1 < n; ++k) candidates.push_back(k);
    std::mt19937_64 rng(seed);
    std::shuffle(candidates.begin(), candidates.end(), rng);

    const double umax_reach = kMaxRealizedUncertainty;
    for (std::size_t k : candidates) {
        bool frozen = false;
        for (std::size_t t = k; t <= std::min(k + 2, n - 1); ++t) frozen = frozen || extremal(t);
        if (frozen) continue;

        double best_cost = INFINITY;
        std::vector<double> best;
        double best_cos = 0.0;
        std::vector<double> v = u;
        for (int ia = 0; ia < bands.search; ++ia) {
            v[k] = stats.u_min + su * static_cast<double>(ia) / (bands.search - 1);
            for (int ib = 0; ib < bands.search; ++ib) {
                v[k + 1] = stats.u_min + su * static_cast<double>(ib) / (bands.search - 1);
                bool ok = true;
                for (std::size_t t : {k, k + 1})
                    if (v[t] <= stats.u_min || v[t] >= stats.u_max || v[t] <= 0.0 || v[t] > umax_reach) ok = false;
                for (std::size_t t = k; t <= std::min(k + 2, n - 1); ++t) {
                    double e = e_of(v, t);
                    if (e <= stats.e_min || e >= stats.e_max) ok = false;
                }
                if (!ok) continue;
                double ua = (v[k] - stats.u_min) / su, ub = (v[k + 1] - stats.u_min) / su;
                double ea = (e_of(v, k) - stats.e_min) / se, eb = (e_of(v, k + 1) - stats.e_min) / se;
                double v1 = (ub - ua) / dtau, v2 = (eb - ea) / dtau;
                int ci = g.cell_u(0.5 * (ua + ub)), cj = g.cell_e(0.5 * (ea + eb));
                if (reference.count(ci, cj) < bands.min_reference) continue;
                double r1 = reference.v1_mean(ci, cj), r2 = reference.v2_mean(ci, cj);
                double sr = std::hypot(r1, r2), sv = std::hypot(v1, v2);
                if (sr == 0.0 || sv == 0.0) continue;
                double ratio = sv / sr;
                if (ratio < 0.5 * bands.magnitude || ratio > 2.0 * bands.magnitude) continue;
                double c = analysis::cosine(v1, v2, r1, r2);
                if (!in_band(stage, c, bands)) continue;
                double cost = std::hypot((v[k] - u[k]) / su, (v[k + 1] - u[k + 1]) / su);
                if (cost < best_cost) {
                    best_cost = cost;
                    best = v;
                    best_cos = c;
                }
            }
        }
        if (best.empty()) continue;
        auto out = infodyn::trajectory_from_uncertainty(traj.trace_id, best, traj.entropy_mode);
        PlantedError label;
        label.step_index = static_cast<int>(k) + 2;
        label.moved_step = static_cast<int>(k) + 1;
        label.stage = stage;
        label.cosine = best_cos;
        return {std::move(out), label};
    }
    throw Error("plant_error: no segment of '" + traj.trace_id + "' admits an in-range " + analysis::to_string(stage) +
                " perturbation");
}

// ---------------------------------------------------------------------------
// Corpus generation

struct GroundTruth {
    std::string trace_id;
    std::optional<PlantedError> planted;
    std::string true_potential;
    json sim_params;
    std::vector<double> u_target;  // raw uncertainty per step (after planting)
};

struct SynthCorpus {
    std::vector<trace::Trace> traces;
    std::vector<GroundTruth> truth;
    std::vector<baselines::EmbeddingRecord> embeddings;
    std::vector<std::string> notes;
};

inline json truth_to_json(const GroundTruth& g) {
    json j;
    j["trace_id"] = g.trace_id;
    if (g.planted) {
        j["planted_stage"] = analysis::to_string(g.planted->stage);
        j["planted_step"] = g.planted->step_index;
        j["moved_step"] = g.planted->moved_step;
        j["planted_cosine"] = g.planted->cosine;
    }
    j["true_potential"] = g.true_potential;
    j["sim_params"] = g.sim_params;
    j["u_target"] = g.u_target;
    return j;
}

inline trace::Trace make_trace(const std::string& id, const std::string& question, std::span<const double> u_target) {
    trace::Trace t;
    t.id = id;
    t.question = question;
    for (std::size_t k = 0; k < u_target.size(); ++k) {
        trace::Step s;
        s.index = static_cast<int>(k) + 1;
        s.text = "step " + std::to_string(k + 1);
        s.set_logprobs({logprob_for_uncertainty(u_target[k])});
        t.steps.push_back(std::move(s));
    }
    return t;
}

namespace detail {

inline std::mt19937_64 trace_rng(std::uint64_t seed, std::size_t index, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), stream};
    return std::mt19937_64(seq);
}

}  // namespace detail

inline SynthCorpus generate(const SynthSpec& spec) {
    validate(spec);
    SynthCorpus out;
    const std::size_t n = spec.n_traces;

    struct Sim {
        flow::SimulatedPath path;  // subsampled, one state per step
        json params;
    };
    std::vector<Sim> sims(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = detail::trace_rng(spec.seed, i, 0);
        std::uniform_int_distribution<int> steps_dist(spec.steps_min, spec.steps_max);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const int T = steps_dist(rng);
        const double amp = spec.amplitude_min + (spec.amplitude_max - spec.amplitude_min) * unit(rng);
        const double phase = 2.0 * std::numbers::pi * unit(rng);
        std::pair<double, double> x0;
        if (spec.potential.kind == Potential::Kind::harmonic) {
            double omega = std::sqrt(spec.potential.k);
            x0 = {amp * std::cos(phase), -amp * omega * std::sin(phase)};
        } else {
            x0 = {amp * std::cos(phase) * 0.5, 0.3 * std::sin(phase)};
        }
        const auto stride =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.arc / ((T - 1) * spec.dtau))));
        auto pot = spec.potential;
        auto full = flow::simulate_trajectory([pot](double u) { return pot.force(u); }, x0, spec.dtau,
                                              static_cast<int>(stride) * (T - 1), spec.seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)),
                                              0.0);
        auto path = flow::subsample(full, stride);
        if (spec.noise_level > 0.0) {
            auto nrng = detail::trace_rng(spec.seed, i, 1);
            std::normal_distribution<double> noise(0.0, spec.noise_level);
            for (auto& v : path.u) v += noise(nrng);
        }
        sims[i].path = std::move(path);
        sims[i].params = json{{"x0", {x0.first, x0.second}}, {"dtau", spec.dtau}, {"stride", stride},
                              {"steps", T},                 {"amplitude", amp},  {"phase", phase}};
    }

    // Raw uncertainty targets.
    double u_scale = spec.u_scale, u_center = spec.u_center;
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& s : sims)
        for (double v : s.path.u) {
            lo = std::min(lo, u_center + u_scale * v);
            hi = std::max(hi, u_center + u_scale * v);
        }
    const double floor_u = 0.005, ceil_u = kMaxRealizedUncertainty - 0.005;
    if (lo < 0.0 || hi > kMaxRealizedUncertainty) {
        if (!spec.rescale_out_of_range)
            throw Error("synthetic uncertainty range [" + format_double(lo) + ", " + format_double(hi) +
                        "] exceeds [0, 1/e]; enable rescale_out_of_range or shrink u_scale");
        double a = (ceil_u - floor_u) / (hi - lo);
        u_center = floor_u + a * (u_center - lo);
        u_scale *= a;
        out.notes.push_back("uncertainty targets rescaled into [" + format_double(floor_u) + ", " + format_double(ceil_u) + "]");
    }

    std::vector<infodyn::Trajectory> clean(n);
    std::vector<std::vector<double>> targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (double v : sims[i].path.u) targets[i].push_back(u_center + u_scale * v);
        clean[i] = infodyn::trajectory_from_uncertainty("t" + std::to_string(i), targets[i]);
    }
    const auto stats = infodyn::fit_normalization(clean);
    std::vector<flow::VelocitySample> clean_samples;
    for (const auto& tr : clean) {
        auto s = flow::segment_velocities(infodyn::apply_normalization(tr, stats).trajectory);
        clean_samples.insert(clean_samples.end(), s.begin(), s.end());
    }
    const auto reference = flow::accumulate_field(std::move(clean_samples), flow::Grid(spec.grid_nx, spec.grid_ny));
    PlantBands bands;
    bands.magnitude = spec.error_magnitude;

    // Planted errors.
    std::vector<std::optional<PlantedError>> planted(n);
    const auto n_err = static_cast<std::size_t>(std::llround(spec.error_fraction * static_cast<double>(n)));
    if (n_err > 0) {
        auto rng = detail::trace_rng(spec.seed, n, 2);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const double total = spec.stage_mix[0] + spec.stage_mix[1] + spec.stage_mix[2];
        std::size_t placed = 0, unplaceable = 0;
        for (std::size_t r = 0; r < n && placed < n_err; ++r) {
            std::size_t i = order[r];
            // Stage quotas by cumulative share of the requested mix.
            double pos = (static_cast<double>(placed) + 0.5) / static_cast<double>(n_err) * total;
            Stage stage = pos < spec.stage_mix[0]                       ? Stage::intuition_collapse
                          : pos < spec.stage_mix[0] + spec.stage_mix[1] ? Stage::metacognition_conflict
                                                                        : Stage::rationale_error;
            try {
                auto res = plant_error(clean[i], stage, reference, stats, spec.seed ^ (i * 7919 + 17), bands);
                for (std::size_t t = 0; t < res.trajectory.points.size(); ++t) targets[i][t] = res.trajectory.points[t].u_raw;
                planted[i] = res.label;
                ++placed;
            } catch (const Error&) {
                ++unplaceable;
            }
        }
        if (unplaceable > 0)
            out.notes.push_back(std::to_string(unplaceable) + " traces admitted no in-band perturbation for their assigned stage");
        if (placed < n_err)
            out.notes.push_back("planted " + std::to_string(placed) + " of " + std::to_string(n_err) + " requested errors");
    }

    // Embedding projection shared by the corpus.
    auto erng = detail::trace_rng(spec.seed, n, 3);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t d = spec.embedding_dim;
    std::vector<std::array<double, 3>> proj(d);
    for (auto& row : proj)
        for (double& w : row) w = gauss(erng);
    std::vector<std::vector<double>> question_offset(spec.n_questions, std::vector<double>(d));
    for (auto& q : question_offset)
        for (double& v : q) v = 2.0 * gauss(erng);

    static const std::array<trace::ReasoningType, 3> kTypes = {
        trace::ReasoningType::deductive, trace::ReasoningType::inductive, trace::ReasoningType::abductive};
    static const std::array<const char*, 3> kPhases = {"pre_llm", "post_llm", "model"};
    static const std::array<const char*, 3> kEducation = {"undergrad", "master", "phd"};

    for (std::size_t i = 0; i < n; ++i) {
        const std::string id = "t" + std::to_string(i);
        char qbuf[32];
        std::snprintf(qbuf, sizeof qbuf, "q%03zu", i % spec.n_questions);
        auto tr = make_trace(id, qbuf, targets[i]);
        tr.answer = "answer " + std::to_string(i);
        const std::size_t T = targets[i].size();
        std::vector<bool> correct(T, true);
        if (planted[i]) {
            correct[static_cast<std::size_t>(planted[i]->moved_step) - 1] = false;
            correct[static_cast<std::size_t>(planted[i]->step_index) - 1] = false;
            // The following step's effort depends on the displaced uncertainty.
            if (static_cast<std::size_t>(planted[i]->step_index) < T)
                correct[static_cast<std::size_t>(planted[i]->step_index)] = false;
            tr.steps[static_cast<std::size_t>(planted[i]->step_index) - 1].error_label =
                analysis::to_string(planted[i]->stage);
        }
        auto arng = detail::trace_rng(spec.seed, i, 4);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        tr.meta.correctness = std::move(correct);
        tr.meta.reasoning_type = kTypes[i % 2 == 0 ? 0 : (unit(arng) < 0.8 ? 1 : 2)];
        tr.meta.cohort["phase"] = std::string(kPhases[static_cast<std::size_t>(unit(arng) * 3.0) % 3]);
        tr.meta.cohort["education"] = std::string(kEducation[static_cast<std::size_t>(unit(arng) * 3.0) % 3]);
        tr.meta.cohort["openness"] = std::round((1.0 + 6.0 * unit(arng)) * 100.0) / 100.0;
        tr.meta.source = "synthetic";

        std::normal_distribution<double> jitter(0.0, 0.05);
        const auto& path = sims[i].path;
        const auto tau = infodyn::local_tau(T);
        for (std::size_t t = 0; t < T; ++t) {
            baselines::EmbeddingRecord rec{id, static_cast<int>(t) + 1, std::vector<double>(d)};
            double feat[3] = {path.u[t], path.e[t], tau[t]};
            for (std::size_t r = 0; r < d; ++r)
                rec.vector[r] = proj[r][0] * feat[0] + proj[r][1] * feat[1] + proj[r][2] * feat[2] +
                                question_offset[i % spec.n_questions][r] + jitter(arng);
            out.embeddings.push_back(std::move(rec));
        }

        GroundTruth g;
        g.trace_id = id;
        g.planted = planted[i];
        g.true_potential = spec.potential.describe();
        g.sim_params = sims[i].params;
        g.sim_params["u_center"] = u_center;
        g.sim_params["u_scale"] = u_scale;
        g.u_target = targets[i];
        out.truth.push_back(std::move(g));
        out.traces.push_back(std::move(tr));
    }
    return out;
}

// Control corpus: each trace's per-step token values are permuted, destroying
// the temporal order of uncertainty while keeping its per-trace distribution.
inline std::vector<trace::Trace> shuffled_control(std::span<const trace::Trace> traces, std::uint64_t seed) {
    std::vector<trace::Trace> out(traces.begin(), traces.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto rng = detail::trace_rng(seed, i, 5);
        std::vector<std::optional<std::vector<double>>> values;
        for (const auto& s : out[i].steps) values.push_back(s.token_values);
        std::shuffle(values.begin(), values.end(), rng);
        for (std::size_t k = 0; k < values.size(); ++k) out[i].steps[k].token_values = values[k];
        for (auto& s : out[i].steps) s.error_label.reset();
        out[i].meta.correctness.reset();
        out[i].id += "_shuffled";
    }
    return out;
}

inline std::string serialize_truth(std::span<const GroundTruth> truth) {
    std::string out;
    for (const auto& g : truth) {
        out += truth_to_json(g).dump();
        out += '\n';
    }
    return out;
}

}  // namespace iftrack::synth
