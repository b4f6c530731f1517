#pragma once

// Per-step uncertainty and cognitive effort, normalization, and phase-space
// trajectories.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "trace_model.hpp"

namespace iftrack::infodyn {

// realized: mean of -p ln p over the realized tokens.
// surprisal: mean of -ln p.
// topk: mean entropy of each token's alternative distribution, residual mass lumped.
enum class EntropyMode { realized, surprisal, topk };

inline std::string to_string(EntropyMode m) {
    switch (m) {
        case EntropyMode::surprisal: return "surprisal";
        case EntropyMode::topk: return "topk";
        case EntropyMode::realized: break;
    }
    return "realized";
}

inline EntropyMode parse_entropy_mode(std::string_view s) {
    if (s == "realized") return EntropyMode::realized;
    if (s == "surprisal") return EntropyMode::surprisal;
    if (s == "topk") return EntropyMode::topk;
    throw Error("unknown entropy mode '" + std::string(s) + "'");
}

namespace detail {
inline double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }
}  // namespace detail

inline double step_uncertainty(std::span<const double> probs, EntropyMode mode = EntropyMode::realized) {
    if (probs.empty()) throw Error("step_uncertainty: empty probability list");
    if (mode == EntropyMode::topk) throw Error("step_uncertainty: topk mode needs alternative distributions");
    double acc = 0.0;
    for (double p : probs) {
        if (!(p > 0.0 && p <= 1.0)) throw Error("step_uncertainty: probability out of range");
        acc += mode == EntropyMode::realized ? -detail::plogp(p) : -std::log(p);
    }
    return std::max(0.0, acc / static_cast<double>(probs.size()));
}

// Entropy of one token's alternatives, with unlisted mass as a single outcome.
inline double alternatives_entropy(std::span<const trace::TopkAlternative> alts) {
    double h = 0.0;
    double mass = 0.0;
    for (const auto& a : alts) {
        double q = std::exp(a.logprob);
        if (!(q > 0.0 && q <= 1.0 + trace::kTopkSumSlack)) throw Error("alternatives_entropy: probability out of range");
        mass += q;
        h -= detail::plogp(std::min(q, 1.0));
    }
    double residual = 1.0 - mass;
    if (residual > 0.0) h -= detail::plogp(residual);
    return std::max(0.0, h);
}

inline double step_uncertainty(const trace::Step& step, EntropyMode mode) {
    if (mode == EntropyMode::topk) {
        if (!step.topk_logprobs || step.topk_logprobs->empty())
            throw Error("step " + std::to_string(step.index) + " has no topk_logprobs");
        double acc = 0.0;
        for (const auto& alts : *step.topk_logprobs) acc += alternatives_entropy(alts);
        return acc / static_cast<double>(step.topk_logprobs->size());
    }
    if (!step.scored()) throw Error("unscored step " + std::to_string(step.index));
    auto probs = step.token_probs();
    return step_uncertainty(probs, mode);
}

inline double cognitive_effort(double u_t, double u_prev) { return u_t - u_prev; }

inline std::vector<double> local_tau(std::size_t steps) {
    if (steps == 0) throw Error("local_tau: step count must be >= 1");
    if (steps == 1) return {0.0};
    std::vector<double> tau(steps);
    const double denom = static_cast<double>(steps - 1);
    for (std::size_t t = 0; t < steps; ++t) tau[t] = static_cast<double>(t) / denom;
    tau.back() = 1.0;
    return tau;
}

struct PhasePoint {
    int step_index = 0;
    double tau = 0.0;
    double u_raw = 0.0;
    double e_raw = 0.0;
    double u = 0.0;
    double e = 0.0;
    bool origin = false;  // first step: effort undefined, set to 0

    bool operator==(const PhasePoint&) const = default;
};

struct Trajectory {
    std::string trace_id;
    std::vector<PhasePoint> points;
    EntropyMode entropy_mode = EntropyMode::realized;

    bool operator==(const Trajectory&) const = default;
};

// Builds a trajectory from a raw uncertainty sequence.
inline Trajectory trajectory_from_uncertainty(std::string trace_id, std::span<const double> u_raw,
                                              EntropyMode mode = EntropyMode::realized) {
    if (u_raw.empty()) throw Error("trajectory needs at least one step");
    Trajectory traj{std::move(trace_id), {}, mode};
    auto tau = local_tau(u_raw.size());
    traj.points.reserve(u_raw.size());
    for (std::size_t t = 0; t < u_raw.size(); ++t) {
        PhasePoint p;
        p.step_index = static_cast<int>(t) + 1;
        p.tau = tau[t];
        p.u_raw = u_raw[t];
        p.e_raw = t == 0 ? 0.0 : cognitive_effort(u_raw[t], u_raw[t - 1]);
        p.origin = t == 0;
        traj.points.push_back(p);
    }
    return traj;
}

inline Trajectory build_trajectory(const trace::Trace& tr, EntropyMode mode = EntropyMode::realized) {
    std::vector<double> u;
    u.reserve(tr.steps.size());
    for (const auto& s : tr.steps) {
        if (mode != EntropyMode::topk && !s.scored())
            throw Error("trace '" + tr.id + "': unscored step " + std::to_string(s.index));
        u.push_back(step_uncertainty(s, mode));
    }
    return trajectory_from_uncertainty(tr.id, u, mode);
}

struct NormalizationStats {
    double u_min = 0.0;
    double u_max = 1.0;
    double e_min = 0.0;
    double e_max = 1.0;

    bool operator==(const NormalizationStats&) const = default;
};

inline NormalizationStats merge(const NormalizationStats& a, const NormalizationStats& b) {
    return {std::min(a.u_min, b.u_min), std::max(a.u_max, b.u_max), std::min(a.e_min, b.e_min),
            std::max(a.e_max, b.e_max)};
}

inline NormalizationStats fit_normalization(std::span<const Trajectory> corpus) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    NormalizationStats s{inf, -inf, inf, -inf};
    std::size_t n = 0;
    for (const auto& tr : corpus) {
        for (const auto& p : tr.points) {
            s.u_min = std::min(s.u_min, p.u_raw);
            s.u_max = std::max(s.u_max, p.u_raw);
            s.e_min = std::min(s.e_min, p.e_raw);
            s.e_max = std::max(s.e_max, p.e_raw);
            ++n;
        }
    }
    if (n == 0) throw Error("fit_normalization: empty corpus");
    return s;
}

// Maps x from [lo, hi] onto [0, 1]; a degenerate range maps to 0.5.
inline double normalize_value(double x, double lo, double hi, std::size_t& clipped) {
    if (!(hi > lo)) return 0.5;
    double y = (x - lo) / (hi - lo);
    if (y < 0.0) {
        ++clipped;
        return 0.0;
    }
    if (y > 1.0) {
        ++clipped;
        return 1.0;
    }
    return y;
}

struct Normalized {
    Trajectory trajectory;
    std::size_t clipped = 0;
};

inline Normalized apply_normalization(Trajectory traj, const NormalizationStats& stats) {
    std::size_t clipped = 0;
    for (auto& p : traj.points) {
        p.u = normalize_value(p.u_raw, stats.u_min, stats.u_max, clipped);
        p.e = normalize_value(p.e_raw, stats.e_min, stats.e_max, clipped);
    }
    return {std::move(traj), clipped};
}

// Fits stats on the corpus and normalizes every trajectory with them.
inline NormalizationStats normalize_corpus(std::vector<Trajectory>& corpus) {
    auto stats = fit_normalization(corpus);
    for (auto& tr : corpus) tr = apply_normalization(std::move(tr), stats).trajectory;
    return stats;
}

// ---------------------------------------------------------------------------
// trajectories.csv

inline const std::vector<std::string> kTrajectoryColumns = {"trace_id", "step_index", "tau", "u_raw", "e_raw",
                                                            "u",        "e",          "origin_flag", "entropy_mode"};

inline std::string trajectories_csv(std::span<const Trajectory> corpus) {
    std::string out = csv::join(kTrajectoryColumns) + "\n";
    for (const auto& tr : corpus) {
        for (const auto& p : tr.points) {
            out += csv::join({tr.trace_id, std::to_string(p.step_index), format_double(p.tau), format_double(p.u_raw),
                              format_double(p.e_raw), format_double(p.u), format_double(p.e), p.origin ? "1" : "0",
                              to_string(tr.entropy_mode)});
            out += '\n';
        }
    }
    return out;
}

inline std::vector<Trajectory> read_trajectories_csv(const std::string& path) {
    auto table = csv::read(path);
    if (table.header != kTrajectoryColumns) throw Error(path + ": unexpected trajectories.csv header");
    std::vector<Trajectory> out;
    for (const auto& row : table.rows) {
        if (out.empty() || out.back().trace_id != row[0]) out.push_back({row[0], {}, parse_entropy_mode(row[8])});
        PhasePoint p;
        p.step_index = static_cast<int>(parse_int(row[1]));
        p.tau = parse_double(row[2]);
        p.u_raw = parse_double(row[3]);
        p.e_raw = parse_double(row[4]);
        p.u = parse_double(row[5]);
        p.e = parse_double(row[6]);
        p.origin = row[7] == "1";
        out.back().points.push_back(p);
    }
    return out;
}

}  // namespace iftrack::infodyn
