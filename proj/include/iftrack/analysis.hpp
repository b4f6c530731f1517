#pragma once

// Cohort-level analysis: mean trajectories with bootstrap bands, error-stage
// classification by the cosine rule, dual-process metrics and descriptive
// statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "flow_numerics.hpp"
#include "infodyn.hpp"
#include "stats.hpp"

namespace iftrack::analysis {

using flow::FlowField;
using flow::Grid;
using flow::VelocitySample;
using infodyn::Trajectory;

// ---------------------------------------------------------------------------
// Mean trajectories

struct MeanTrajectory {
    std::vector<double> tau;
    std::vector<double> u_mean, e_mean;
    std::vector<double> u_lo, u_hi, e_lo, e_hi;
    std::size_t n = 0;
};

// Piecewise-linear resampling of the normalized (u, e) path onto `tau_grid`.
inline std::pair<std::vector<double>, std::vector<double>> resample(const Trajectory& traj,
                                                                    std::span<const double> tau_grid) {
    const auto& pts = traj.points;
    if (pts.size() < 2) throw Error("resample: trajectory '" + traj.trace_id + "' has fewer than 2 points");
    std::vector<double> u(tau_grid.size()), e(tau_grid.size());
    std::size_t seg = 0;
    for (std::size_t k = 0; k < tau_grid.size(); ++k) {
        double t = std::clamp(tau_grid[k], pts.front().tau, pts.back().tau);
        while (seg + 2 < pts.size() && t > pts[seg + 1].tau) ++seg;
        const auto& a = pts[seg];
        const auto& b = pts[seg + 1];
        double span = b.tau - a.tau;
        double w = span > 0.0 ? (t - a.tau) / span : 0.0;
        u[k] = (1.0 - w) * a.u + w * b.u;
        e[k] = (1.0 - w) * a.e + w * b.e;
    }
    return {std::move(u), std::move(e)};
}

inline std::vector<double> tau_grid(std::size_t m) {
    if (m < 2) throw Error("tau grid needs at least 2 points");
    return infodyn::local_tau(m);
}

// Pointwise mean on an M-point tau grid with a seeded percentile bootstrap
// band (2.5 / 97.5). The band is widened to contain the mean where the
// percentile interval would exclude it.
inline MeanTrajectory mean_trajectory(std::span<const Trajectory> cohort, std::size_t m = 50,
                                      std::size_t bootstrap_n = 1000, std::uint64_t seed = 42) {
    if (cohort.empty()) throw Error("mean_trajectory: empty cohort");
    MeanTrajectory mt;
    mt.tau = tau_grid(m);
    mt.n = cohort.size();
    std::vector<std::vector<double>> us, es;
    us.reserve(cohort.size());
    es.reserve(cohort.size());
    for (const auto& tr : cohort) {
        auto [u, e] = resample(tr, mt.tau);
        us.push_back(std::move(u));
        es.push_back(std::move(e));
    }
    auto pointwise_mean = [&](const std::vector<std::vector<double>>& rows, std::span<const std::size_t> pick) {
        std::vector<double> out(m, 0.0);
        for (std::size_t idx : pick)
            for (std::size_t k = 0; k < m; ++k) out[k] += rows[idx][k];
        for (double& v : out) v /= static_cast<double>(pick.size());
        return out;
    };
    std::vector<std::size_t> all(cohort.size());
    std::iota(all.begin(), all.end(), 0);
    mt.u_mean = pointwise_mean(us, all);
    mt.e_mean = pointwise_mean(es, all);

    mt.u_lo = mt.u_hi = mt.u_mean;
    mt.e_lo = mt.e_hi = mt.e_mean;
    if (cohort.size() > 1 && bootstrap_n > 0) {
        std::vector<std::vector<double>> boot_u(m, std::vector<double>(bootstrap_n));
        std::vector<std::vector<double>> boot_e(m, std::vector<double>(bootstrap_n));
        std::vector<std::size_t> pick(cohort.size());
        for (std::size_t b = 0; b < bootstrap_n; ++b) {
            // Per-resample seed so results do not depend on evaluation order.
            std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(b)};
            std::mt19937_64 rng(seq);
            std::uniform_int_distribution<std::size_t> draw(0, cohort.size() - 1);
            for (auto& p : pick) p = draw(rng);
            auto bu = pointwise_mean(us, pick);
            auto be = pointwise_mean(es, pick);
            for (std::size_t k = 0; k < m; ++k) {
                boot_u[k][b] = bu[k];
                boot_e[k][b] = be[k];
            }
        }
        for (std::size_t k = 0; k < m; ++k) {
            mt.u_lo[k] = std::min(quantile(boot_u[k], 0.025), mt.u_mean[k]);
            mt.u_hi[k] = std::max(quantile(boot_u[k], 0.975), mt.u_mean[k]);
            mt.e_lo[k] = std::min(quantile(boot_e[k], 0.025), mt.e_mean[k]);
            mt.e_hi[k] = std::max(quantile(boot_e[k], 0.975), mt.e_mean[k]);
        }
    }
    return mt;
}

// ---------------------------------------------------------------------------
// Error-stage classification

enum class Stage { intuition_collapse, metacognition_conflict, rationale_error };

inline constexpr std::array<Stage, 3> kStages = {Stage::intuition_collapse, Stage::metacognition_conflict,
                                                 Stage::rationale_error};

inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::intuition_collapse: return "intuition_collapse";
        case Stage::metacognition_conflict: return "metacognition_conflict";
        case Stage::rationale_error: return "rationale_error";
    }
    return "?";
}

inline std::optional<Stage> parse_stage(std::string_view s) {
    for (auto st : kStages)
        if (to_string(st) == s) return st;
    return std::nullopt;
}

struct Rect {
    double u_lo = 0.0, u_hi = 1.0, e_lo = 0.0, e_hi = 1.0;
    bool contains(double u, double e) const { return u >= u_lo && u <= u_hi && e >= e_lo && e <= e_hi; }
};

struct ClassifierConfig {
    double theta = 0.3;  // half-width of the "cosine ~ 0" band
    std::map<Stage, Rect> gates;
    bool fallback = true;
    double fallback_tau_window = 0.1;
    flow::CellEstimate estimate = flow::CellEstimate::mean;
};

struct StageLabel {
    Stage stage = Stage::metacognition_conflict;
    double cosine = 0.0;
    int cell_i = 0;
    int cell_j = 0;
    bool used_fallback = false;
    bool gate_conflict = false;
};

inline double cosine(double ax, double ay, double bx, double by) {
    double na = std::hypot(ax, ay);
    double nb = std::hypot(bx, by);
    if (na == 0.0 || nb == 0.0) throw Error("cosine: zero-norm vector");
    return std::clamp((ax * bx + ay * by) / (na * nb), -1.0, 1.0);
}

// c < -theta -> intuition collapse; |c| <= theta -> metacognition conflict;
// c > theta -> rationale error.
inline Stage stage_for_cosine(double c, double theta) {
    if (c < -theta) return Stage::intuition_collapse;
    if (c > theta) return Stage::rationale_error;
    return Stage::metacognition_conflict;
}

struct ReferenceFlow {
    FlowField field;
    std::vector<VelocitySample> samples;
};

using CorrectnessIndex = std::map<std::string, std::vector<bool>>;

// Flow of segments whose two endpoint steps are both marked correct.
inline ReferenceFlow reference_flow(std::span<const Trajectory> trajectories, const CorrectnessIndex& correctness,
                                    const Grid& grid) {
    std::vector<VelocitySample> keep;
    bool annotated = false;
    for (const auto& tr : trajectories) {
        auto it = correctness.find(tr.trace_id);
        if (it == correctness.end()) continue;
        annotated = true;
        const auto& ok = it->second;
        std::size_t usable = std::count_if(tr.points.begin(), tr.points.end(), [](const auto& p) { return !p.origin; });
        if (usable < 2) continue;
        for (const auto& s : flow::segment_velocities(tr)) {
            auto end = static_cast<std::size_t>(s.step_index);
            if (end < 2 || end > ok.size()) continue;
            if (ok[end - 1] && ok[end - 2]) keep.push_back(s);
        }
    }
    if (!annotated) throw Error("reference_flow: no correctness annotations");
    if (keep.empty()) throw Error("reference_flow: no segment with two correct endpoints");
    auto field = flow::accumulate_field(keep, grid);
    return {std::move(field), std::move(keep)};
}

inline StageLabel classify_error_step(std::pair<double, double> v_err, std::pair<double, double> location, double tau,
                                      const ReferenceFlow& ref, const ClassifierConfig& cfg = {}) {
    if (!(cfg.theta >= 0.0 && cfg.theta < 1.0)) throw Error("classify_error_step: theta must lie in [0, 1)");
    if (std::hypot(v_err.first, v_err.second) == 0.0) throw Error("classify_error_step: zero-norm error velocity");
    const auto& g = ref.field.grid();
    StageLabel label;
    label.cell_i = g.cell_u(location.first);
    label.cell_j = g.cell_e(location.second);
    std::pair<double, double> v_ref{0.0, 0.0};
    if (!ref.field.empty(label.cell_i, label.cell_j)) {
        v_ref = ref.field.velocity(label.cell_i, label.cell_j, cfg.estimate);
    }
    if (std::hypot(v_ref.first, v_ref.second) == 0.0) {
        if (!cfg.fallback) throw Error("classify_error_step: empty reference cell and fallback disabled");
        double sx = 0.0, sy = 0.0;
        std::size_t n = 0;
        for (const auto& s : ref.samples) {
            if (std::abs(s.tau - tau) <= cfg.fallback_tau_window) {
                sx += s.v1;
                sy += s.v2;
                ++n;
            }
        }
        if (n == 0 || std::hypot(sx, sy) == 0.0)
            throw Error("classify_error_step: no reference velocity near tau=" + format_double(tau));
        v_ref = {sx / static_cast<double>(n), sy / static_cast<double>(n)};
        label.used_fallback = true;
    }
    label.cosine = cosine(v_err.first, v_err.second, v_ref.first, v_ref.second);
    label.stage = stage_for_cosine(label.cosine, cfg.theta);
    if (auto it = cfg.gates.find(label.stage); it != cfg.gates.end())
        label.gate_conflict = !it->second.contains(location.first, location.second);
    return label;
}

struct StageRecord {
    std::string trace_id;
    int step_index = 0;
    StageLabel label;
    std::optional<Stage> annotated;
};

struct SkippedStep {
    std::string trace_id;
    int step_index = 0;
    std::string reason;
};

struct ClassificationRun {
    std::vector<StageRecord> records;
    std::vector<SkippedStep> skipped;
};

struct ErrorStep {
    int step_index = 0;
    std::optional<Stage> annotated;
};

using ErrorIndex = std::map<std::string, std::vector<ErrorStep>>;

// Classifies every annotated error step by the velocity of the segment that
// ends at it. Steps whose incoming segment touches the origin point are skipped.
inline ClassificationRun classify_corpus(std::span<const Trajectory> trajectories, const ErrorIndex& errors,
                                         const ReferenceFlow& ref, const ClassifierConfig& cfg = {}) {
    ClassificationRun run;
    for (const auto& tr : trajectories) {
        auto it = errors.find(tr.trace_id);
        if (it == errors.end()) continue;
        for (const auto& err : it->second) {
            auto k = static_cast<std::size_t>(err.step_index);
            if (k < 2 || k > tr.points.size()) {
                run.skipped.push_back({tr.trace_id, err.step_index, "no incoming segment"});
                continue;
            }
            const auto& a = tr.points[k - 2];
            const auto& b = tr.points[k - 1];
            if (a.origin) {
                run.skipped.push_back({tr.trace_id, err.step_index, "incoming segment starts at the origin point"});
                continue;
            }
            double dtau = b.tau - a.tau;
            std::pair<double, double> v{(b.u - a.u) / dtau, (b.e - a.e) / dtau};
            if (!(dtau > 0.0) || std::hypot(v.first, v.second) == 0.0) {
                run.skipped.push_back({tr.trace_id, err.step_index, "zero error velocity"});
                continue;
            }
            try {
                auto label = classify_error_step(v, {0.5 * (a.u + b.u), 0.5 * (a.e + b.e)}, 0.5 * (a.tau + b.tau),
                                                 ref, cfg);
                run.records.push_back({tr.trace_id, err.step_index, label, err.annotated});
            } catch (const Error& e) {
                run.skipped.push_back({tr.trace_id, err.step_index, e.what()});
            }
        }
    }
    return run;
}

struct StageDistribution {
    std::size_t total = 0;
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> ratios{};
    // Per annotated stage: fraction of those steps the classifier labelled the
    // same. NaN when no step carries that annotation.
    std::array<double, 3> agreement{};
    std::array<std::size_t, 3> annotated{};
};

inline StageDistribution stage_distribution(std::span<const StageRecord> records) {
    StageDistribution d;
    std::array<std::size_t, 3> agree{};
    for (const auto& r : records) {
        ++d.counts[static_cast<std::size_t>(r.label.stage)];
        ++d.total;
        if (r.annotated) {
            auto a = static_cast<std::size_t>(*r.annotated);
            ++d.annotated[a];
            if (*r.annotated == r.label.stage) ++agree[a];
        }
    }
    for (std::size_t k = 0; k < 3; ++k) {
        d.ratios[k] = d.total ? static_cast<double>(d.counts[k]) / static_cast<double>(d.total) : 0.0;
        d.agreement[k] =
            d.annotated[k] ? static_cast<double>(agree[k]) / static_cast<double>(d.annotated[k]) : std::nan("");
    }
    return d;
}

// ---------------------------------------------------------------------------
// Dual-process metrics

struct CosineResult {
    double mean = 0.0;
    std::size_t points = 0;  // grid points that entered the mean
};

// Velocity of a resampled mean path by finite differences along the grid.
inline std::vector<std::pair<double, double>> path_velocity(const MeanTrajectory& mt) {
    const std::size_t m = mt.tau.size();
    std::vector<std::pair<double, double>> v(m);
    for (std::size_t k = 0; k < m; ++k) {
        std::size_t a = k == 0 ? 0 : k - 1;
        std::size_t b = k + 1 == m ? m - 1 : k + 1;
        double dt = mt.tau[b] - mt.tau[a];
        v[k] = {(mt.u_mean[b] - mt.u_mean[a]) / dt, (mt.e_mean[b] - mt.e_mean[a]) / dt};
    }
    return v;
}

// Mean cosine between the two cohorts' mean-trajectory velocities over the
// grid points with tau in [window.first, window.second].
inline CosineResult cohort_cosine(std::span<const Trajectory> a, std::span<const Trajectory> b,
                                  std::pair<double, double> window = {0.5, 1.0}, std::size_t m = 50) {
    if (a.empty() || b.empty()) throw Error("cohort_cosine: empty cohort");
    if (window.first < 0.0 || window.second > 1.0 || window.first > window.second)
        throw Error("cohort_cosine: window must lie within [0, 1]");
    auto ma = mean_trajectory(a, m, 0);
    auto mb = mean_trajectory(b, m, 0);
    auto va = path_velocity(ma);
    auto vb = path_velocity(mb);
    CosineResult r;
    constexpr double eps = 1e-12;
    for (std::size_t k = 0; k < m; ++k) {
        if (ma.tau[k] < window.first - eps || ma.tau[k] > window.second + eps) continue;
        if (std::hypot(va[k].first, va[k].second) == 0.0 || std::hypot(vb[k].first, vb[k].second) == 0.0) continue;
        r.mean += cosine(va[k].first, va[k].second, vb[k].first, vb[k].second);
        ++r.points;
    }
    if (r.points == 0) throw Error("cohort_cosine: velocity is zero at every grid point in the window");
    r.mean /= static_cast<double>(r.points);
    return r;
}

using PointPredicate = std::function<bool(const infodyn::PhasePoint&)>;

struct Occupancy {
    double fraction = 0.0;
    std::size_t inside = 0;
    std::size_t total = 0;
    std::vector<std::pair<std::string, double>> per_trace;
};

inline Occupancy region_occupancy(std::span<const Trajectory> cohort, const PointPredicate& in_region) {
    if (cohort.empty()) throw Error("region_occupancy: empty cohort");
    Occupancy occ;
    for (const auto& tr : cohort) {
        std::size_t inside = 0;
        for (const auto& p : tr.points)
            if (in_region(p)) ++inside;
        occ.inside += inside;
        occ.total += tr.points.size();
        occ.per_trace.emplace_back(tr.trace_id, tr.points.empty() ? 0.0
                                                                  : static_cast<double>(inside) /
                                                                        static_cast<double>(tr.points.size()));
    }
    occ.fraction = occ.total ? static_cast<double>(occ.inside) / static_cast<double>(occ.total) : 0.0;
    return occ;
}

// ---------------------------------------------------------------------------
// Descriptive statistics

struct Thresholds {
    double u = 0.0;
    double e = 0.0;
};

inline Thresholds corpus_thresholds(std::span<const Trajectory> corpus, double q = 0.75) {
    std::vector<double> us, es;
    for (const auto& tr : corpus)
        for (const auto& p : tr.points) {
            us.push_back(p.u);
            es.push_back(p.e);
        }
    if (us.empty()) throw Error("corpus_thresholds: empty corpus");
    return {quantile(us, q), quantile(es, q)};
}

struct TrajectoryStats {
    std::string trace_id;
    double mean_u = 0, max_u = 0, min_u = 0, mean_e = 0, max_e = 0;
    double high_u_ratio = 0, high_e_ratio = 0;
};

inline const std::vector<std::string> kMetricNames = {"mean_u", "max_u",        "min_u",       "mean_e",
                                                      "max_e",  "high_u_ratio", "high_e_ratio"};

inline double metric(const TrajectoryStats& s, std::string_view name) {
    if (name == "mean_u") return s.mean_u;
    if (name == "max_u") return s.max_u;
    if (name == "min_u") return s.min_u;
    if (name == "mean_e") return s.mean_e;
    if (name == "max_e") return s.max_e;
    if (name == "high_u_ratio") return s.high_u_ratio;
    if (name == "high_e_ratio") return s.high_e_ratio;
    throw Error("unknown metric '" + std::string(name) + "'");
}

// High-state ratio: fraction of points strictly above the threshold.
inline std::vector<TrajectoryStats> descriptive_stats(std::span<const Trajectory> cohort, const Thresholds& thr) {
    if (cohort.empty()) throw Error("descriptive_stats: empty cohort");
    std::vector<TrajectoryStats> out;
    for (const auto& tr : cohort) {
        if (tr.points.empty()) throw Error("descriptive_stats: empty trajectory '" + tr.trace_id + "'");
        TrajectoryStats s;
        s.trace_id = tr.trace_id;
        s.max_u = s.min_u = tr.points.front().u;
        s.max_e = tr.points.front().e;
        std::size_t hu = 0, he = 0;
        for (const auto& p : tr.points) {
            s.mean_u += p.u;
            s.mean_e += p.e;
            s.max_u = std::max(s.max_u, p.u);
            s.min_u = std::min(s.min_u, p.u);
            s.max_e = std::max(s.max_e, p.e);
            if (p.u > thr.u) ++hu;
            if (p.e > thr.e) ++he;
        }
        const double n = static_cast<double>(tr.points.size());
        s.mean_u /= n;
        s.mean_e /= n;
        s.high_u_ratio = static_cast<double>(hu) / n;
        s.high_e_ratio = static_cast<double>(he) / n;
        out.push_back(s);
    }
    return out;
}

inline std::vector<TrajectoryStats> descriptive_stats(std::span<const Trajectory> cohort, double q = 0.75) {
    return descriptive_stats(cohort, corpus_thresholds(cohort, q));
}

enum class TestFamily { welch, mann_whitney };

inline stats::TestResult compare_metric(std::span<const TrajectoryStats> a, std::span<const TrajectoryStats> b,
                                        std::string_view metric_name, TestFamily family = TestFamily::welch) {
    std::vector<double> xa, xb;
    for (const auto& s : a) xa.push_back(metric(s, metric_name));
    for (const auto& s : b) xb.push_back(metric(s, metric_name));
    return family == TestFamily::welch ? stats::welch_test(xa, xb) : stats::mann_whitney_test(xa, xb);
}

}  // namespace iftrack::analysis
