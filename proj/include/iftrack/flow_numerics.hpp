#pragma once

// Empirical flow field on a uniform grid over [0,1]^2, its discrete
// divergence, potential reconstruction for the separable Hamiltonian
// H(u, e) = e^2/2 + U(u), and a velocity-Verlet trajectory simulator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "common.hpp"
#include "infodyn.hpp"

namespace iftrack::flow {

using infodyn::Trajectory;

class Grid {
public:
    Grid() = default;
    Grid(int nx, int ny) : nx_(nx), ny_(ny) {
        if (nx < 3 || ny < 3) throw Error("grid needs at least 3x3 cells, got " + std::to_string(nx) + "x" +
                                          std::to_string(ny));
    }

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    double du() const { return 1.0 / nx_; }
    double de() const { return 1.0 / ny_; }
    std::size_t size() const { return static_cast<std::size_t>(nx_) * static_cast<std::size_t>(ny_); }
    std::size_t index(int i, int j) const { return static_cast<std::size_t>(j) * nx_ + static_cast<std::size_t>(i); }
    double u_center(int i) const { return (i + 0.5) * du(); }
    double e_center(int j) const { return (j + 0.5) * de(); }

    int cell_u(double u) const { return std::clamp(static_cast<int>(std::floor(u * nx_)), 0, nx_ - 1); }
    int cell_e(double e) const { return std::clamp(static_cast<int>(std::floor(e * ny_)), 0, ny_ - 1); }

    bool operator==(const Grid&) const = default;

private:
    int nx_ = 20;
    int ny_ = 20;
};

// One finite-difference velocity located at a segment midpoint.
struct VelocitySample {
    double u = 0.0;
    double e = 0.0;
    double v1 = 0.0;  // du/dtau
    double v2 = 0.0;  // de/dtau
    double tau = 0.0;
    int step_index = 0;  // index of the segment's end point

    auto key() const { return std::tie(u, e, v1, v2, tau, step_index); }
};

// Velocities of consecutive normalized points; the origin-flagged first
// segment is skipped.
inline std::vector<VelocitySample> segment_velocities(const Trajectory& traj) {
    const auto& pts = traj.points;
    std::size_t usable = std::count_if(pts.begin(), pts.end(), [](const auto& p) { return !p.origin; });
    if (usable < 2) throw Error("segment_velocities: trajectory '" + traj.trace_id + "' has fewer than 2 usable points");
    std::vector<VelocitySample> out;
    out.reserve(pts.size());
    for (std::size_t t = 0; t + 1 < pts.size(); ++t) {
        const auto& a = pts[t];
        const auto& b = pts[t + 1];
        if (a.origin || b.origin) continue;
        double dtau = b.tau - a.tau;
        if (!(dtau > 0.0)) throw Error("segment_velocities: zero tau increment in '" + traj.trace_id + "'");
        out.push_back({0.5 * (a.u + b.u), 0.5 * (a.e + b.e), (b.u - a.u) / dtau, (b.e - a.e) / dtau,
                       0.5 * (a.tau + b.tau), b.step_index});
    }
    return out;
}

// Per-cell sufficient statistics. Positions are stored as offsets from the
// cell center so the second moments stay well conditioned.
struct CellStats {
    std::size_t count = 0;
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    double sv1 = 0, sv2 = 0, sxv1 = 0, syv1 = 0, sxv2 = 0, syv2 = 0;

    void add(double x, double y, double v1, double v2) {
        ++count;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sv1 += v1;
        sv2 += v2;
        sxv1 += x * v1;
        syv1 += y * v1;
        sxv2 += x * v2;
        syv2 += y * v2;
    }

    void merge(const CellStats& o) {
        count += o.count;
        sx += o.sx;
        sy += o.sy;
        sxx += o.sxx;
        sxy += o.sxy;
        syy += o.syy;
        sv1 += o.sv1;
        sv2 += o.sv2;
        sxv1 += o.sxv1;
        syv1 += o.syv1;
        sxv2 += o.sxv2;
        syv2 += o.syv2;
    }
};

// How a cell's velocity is represented when differencing.
//   mean:     arithmetic mean of the samples in the cell.
//   centered: local linear regression of velocity on position, evaluated at
//             the cell center. Equal to the mean when samples are centered.
enum class CellEstimate { mean, centered };

inline std::string to_string(CellEstimate e) { return e == CellEstimate::mean ? "mean" : "centered"; }

inline CellEstimate parse_cell_estimate(std::string_view s) {
    if (s == "mean") return CellEstimate::mean;
    if (s == "centered") return CellEstimate::centered;
    throw Error("unknown cell estimate '" + std::string(s) + "'");
}

class FlowField {
public:
    FlowField() = default;
    explicit FlowField(Grid grid) : grid_(grid), cells_(grid.size()) {}

    const Grid& grid() const { return grid_; }
    std::size_t total() const { return total_; }
    std::size_t clipped() const { return clipped_; }
    const CellStats& cell(int i, int j) const { return cells_[grid_.index(i, j)]; }

    std::size_t count(int i, int j) const { return cell(i, j).count; }
    bool empty(int i, int j) const { return count(i, j) == 0; }

    double v1_mean(int i, int j) const {
        const auto& c = cell(i, j);
        return c.count ? c.sv1 / static_cast<double>(c.count) : 0.0;
    }
    double v2_mean(int i, int j) const {
        const auto& c = cell(i, j);
        return c.count ? c.sv2 / static_cast<double>(c.count) : 0.0;
    }
    double density(int i, int j) const {
        return total_ ? static_cast<double>(count(i, j)) / static_cast<double>(total_) : 0.0;
    }

    // Velocity at the cell center according to the chosen estimate.
    std::pair<double, double> velocity(int i, int j, CellEstimate est) const;

    void add(const VelocitySample& s) {
        double u = s.u;
        double e = s.e;
        if (u < 0.0 || u > 1.0 || e < 0.0 || e > 1.0) ++clipped_;
        int i = grid_.cell_u(u);
        int j = grid_.cell_e(e);
        cells_[grid_.index(i, j)].add(std::clamp(u, 0.0, 1.0) - grid_.u_center(i),
                                      std::clamp(e, 0.0, 1.0) - grid_.e_center(j), s.v1, s.v2);
        ++total_;
    }

    // Places `weight` copies of a sample exactly at the cell center.
    void set_center_value(int i, int j, double v1, double v2, std::size_t weight = 1) {
        auto& c = cells_[grid_.index(i, j)];
        total_ -= c.count;
        c = CellStats{};
        for (std::size_t k = 0; k < weight; ++k) c.add(0.0, 0.0, v1, v2);
        total_ += c.count;
    }

    void merge(const FlowField& other) {
        if (!(other.grid_ == grid_)) throw Error("FlowField::merge: grid mismatch");
        for (std::size_t k = 0; k < cells_.size(); ++k) cells_[k].merge(other.cells_[k]);
        total_ += other.total_;
        clipped_ += other.clipped_;
    }

    std::size_t non_empty_cells() const {
        return std::count_if(cells_.begin(), cells_.end(), [](const auto& c) { return c.count > 0; });
    }

    // Mean of |v_mean| over non-empty cells.
    double mean_cell_speed() const {
        double acc = 0.0;
        std::size_t n = 0;
        for (int j = 0; j < grid_.ny(); ++j)
            for (int i = 0; i < grid_.nx(); ++i)
                if (!empty(i, j)) {
                    acc += std::hypot(v1_mean(i, j), v2_mean(i, j));
                    ++n;
                }
        return n ? acc / static_cast<double>(n) : 0.0;
    }

private:
    Grid grid_;
    std::vector<CellStats> cells_;
    std::size_t total_ = 0;
    std::size_t clipped_ = 0;
};

namespace detail {

// Pseudo-inverse of the symmetric 2x2 matrix [[a, b], [b, d]], dropping
// eigen-directions whose eigenvalue falls below rel_tol * largest.
inline std::array<double, 4> pinv_sym2(double a, double b, double d, double rel_tol) {
    double mean = 0.5 * (a + d);
    double rad = std::hypot(0.5 * (a - d), b);
    double l1 = mean + rad;
    double l2 = mean - rad;
    std::array<double, 4> out{0, 0, 0, 0};
    if (!(l1 > 0.0)) return out;
    double vx, vy;
    if (std::abs(b) > 1e-300) {
        vx = l1 - d;
        vy = b;
    } else if (a >= d) {
        vx = 1;
        vy = 0;
    } else {
        vx = 0;
        vy = 1;
    }
    double norm = std::hypot(vx, vy);
    vx /= norm;
    vy /= norm;
    auto add = [&](double lambda, double x, double y) {
        out[0] += x * x / lambda;
        out[1] += x * y / lambda;
        out[2] += y * x / lambda;
        out[3] += y * y / lambda;
    };
    add(l1, vx, vy);
    if (l2 > rel_tol * l1) add(l2, -vy, vx);
    return out;
}

}  // namespace detail

inline constexpr double kRegressionRelTol = 1e-6;

inline std::pair<double, double> FlowField::velocity(int i, int j, CellEstimate est) const {
    const auto& c = cell(i, j);
    if (c.count == 0) return {0.0, 0.0};
    const double n = static_cast<double>(c.count);
    const double m1 = c.sv1 / n;
    const double m2 = c.sv2 / n;
    if (est == CellEstimate::mean || c.count < 3) return {m1, m2};
    const double mx = c.sx / n;
    const double my = c.sy / n;
    const double cxx = c.sxx / n - mx * mx;
    const double cxy = c.sxy / n - mx * my;
    const double cyy = c.syy / n - my * my;
    auto p = detail::pinv_sym2(cxx, cxy, cyy, kRegressionRelTol);
    auto center = [&](double mv, double sxv, double syv) {
        double bx = sxv / n - mx * mv;
        double by = syv / n - my * mv;
        double gx = p[0] * bx + p[1] * by;
        double gy = p[2] * bx + p[3] * by;
        return mv - (gx * mx + gy * my);
    };
    return {center(m1, c.sxv1, c.syv1), center(m2, c.sxv2, c.syv2)};
}

// Cell means of the samples. The samples are sorted first so the result is
// bitwise independent of input order.
inline FlowField accumulate_field(std::vector<VelocitySample> samples, const Grid& grid) {
    if (samples.empty()) throw Error("accumulate_field: empty sample set");
    std::sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
    FlowField field(grid);
    for (const auto& s : samples) field.add(s);
    return field;
}

// Field with one sample of f at every cell center.
inline FlowField sample_field(const Grid& grid, const std::function<std::pair<double, double>(double, double)>& f,
                              std::size_t weight = 1) {
    FlowField field(grid);
    for (int j = 0; j < grid.ny(); ++j)
        for (int i = 0; i < grid.nx(); ++i) {
            auto [v1, v2] = f(grid.u_center(i), grid.e_center(j));
            field.set_center_value(i, j, v1, v2, weight);
        }
    return field;
}

// ---------------------------------------------------------------------------
// Divergence

struct DivergenceOptions {
    std::size_t min_count = 3;  // cells below this count are treated as empty
    CellEstimate estimate = CellEstimate::centered;
};

struct DivergenceMap {
    Grid grid;
    std::vector<double> values;
    std::vector<char> defined;

    bool is_defined(int i, int j) const { return defined[grid.index(i, j)] != 0; }
    double at(int i, int j) const { return values[grid.index(i, j)]; }
    std::size_t defined_count() const { return std::count(defined.begin(), defined.end(), 1); }
};

// Central differences of cell-centered velocities:
//   div_ij = (v1[i+1,j] - v1[i-1,j]) / (2 du) + (v2[i,j+1] - v2[i,j-1]) / (2 de)
// i.e. half-cell face fluxes interpolated from the two adjacent cells.
inline DivergenceMap discrete_divergence(const FlowField& field, const DivergenceOptions& opts = {}) {
    const Grid& g = field.grid();
    DivergenceMap map{g, std::vector<double>(g.size(), 0.0), std::vector<char>(g.size(), 0)};
    auto usable = [&](int i, int j) { return field.count(i, j) >= std::max<std::size_t>(opts.min_count, 1); };
    for (int j = 1; j + 1 < g.ny(); ++j) {
        for (int i = 1; i + 1 < g.nx(); ++i) {
            if (!usable(i - 1, j) || !usable(i + 1, j) || !usable(i, j - 1) || !usable(i, j + 1)) continue;
            double east = field.velocity(i + 1, j, opts.estimate).first;
            double west = field.velocity(i - 1, j, opts.estimate).first;
            double north = field.velocity(i, j + 1, opts.estimate).second;
            double south = field.velocity(i, j - 1, opts.estimate).second;
            map.values[g.index(i, j)] = (east - west) / (2.0 * g.du()) + (north - south) / (2.0 * g.de());
            map.defined[g.index(i, j)] = 1;
        }
    }
    if (map.defined_count() == 0) throw Error("discrete_divergence: no interior cell has four populated neighbours");
    return map;
}

struct LiouvilleSummary {
    double mean_abs = 0.0;
    double max_abs = 0.0;
    double fraction_below_tolerance = 0.0;
    double tolerance = 0.0;
    std::size_t defined_cells = 0;
};

inline LiouvilleSummary liouville_report(const DivergenceMap& map, double tolerance) {
    LiouvilleSummary s;
    s.tolerance = tolerance;
    std::size_t below = 0;
    for (std::size_t k = 0; k < map.values.size(); ++k) {
        if (!map.defined[k]) continue;
        double a = std::abs(map.values[k]);
        s.mean_abs += a;
        s.max_abs = std::max(s.max_abs, a);
        if (a < tolerance) ++below;
        ++s.defined_cells;
    }
    if (s.defined_cells == 0) throw Error("liouville_report: no defined cells");
    s.mean_abs /= static_cast<double>(s.defined_cells);
    s.fraction_below_tolerance = static_cast<double>(below) / static_cast<double>(s.defined_cells);
    return s;
}

// ---------------------------------------------------------------------------
// Potential and energy

struct PotentialBins {
    double lo = 0.0;
    double hi = 1.0;
    int count = 20;
    std::size_t min_samples = 10;
};

struct PotentialProfile {
    std::vector<double> centers;
    std::vector<double> U;        // NaN where the bin was not retained
    std::vector<double> U_prime;  // NaN where the bin was not retained
    std::vector<std::size_t> counts;
    std::vector<char> retained;

    std::vector<std::size_t> retained_bins() const {
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < retained.size(); ++k)
            if (retained[k]) idx.push_back(k);
        return idx;
    }
};

// U'(u_k) = -mean(de/dtau) per bin, U by cumulative trapezoid over retained
// bins with U = 0 at the first retained bin.
inline PotentialProfile reconstruct_potential(std::span<const VelocitySample> samples, const PotentialBins& bins = {}) {
    if (bins.count < 1 || !(bins.hi > bins.lo)) throw Error("reconstruct_potential: invalid bins");
    const double width = (bins.hi - bins.lo) / bins.count;
    const auto n = static_cast<std::size_t>(bins.count);
    PotentialProfile prof;
    prof.centers.resize(n);
    prof.U.assign(n, std::nan(""));
    prof.U_prime.assign(n, std::nan(""));
    prof.counts.assign(n, 0);
    prof.retained.assign(n, 0);
    std::vector<double> sums(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) prof.centers[k] = bins.lo + (static_cast<double>(k) + 0.5) * width;
    for (const auto& s : samples) {
        if (s.u < bins.lo || s.u > bins.hi) continue;
        auto k = std::min(n - 1, static_cast<std::size_t>((s.u - bins.lo) / width));
        sums[k] += s.v2;
        ++prof.counts[k];
    }
    std::optional<std::size_t> prev;
    for (std::size_t k = 0; k < n; ++k) {
        if (prof.counts[k] < std::max<std::size_t>(bins.min_samples, 1)) continue;
        prof.retained[k] = 1;
        prof.U_prime[k] = -sums[k] / static_cast<double>(prof.counts[k]);
        if (!prev) {
            prof.U[k] = 0.0;
        } else {
            double h = prof.centers[k] - prof.centers[*prev];
            prof.U[k] = prof.U[*prev] + 0.5 * h * (prof.U_prime[k] + prof.U_prime[*prev]);
        }
        prev = k;
    }
    if (!prev) throw Error("reconstruct_potential: no bin has enough samples");
    return prof;
}

// Linear interpolation of U over the retained bins.
inline double potential_at(const PotentialProfile& prof, double u) {
    auto idx = prof.retained_bins();
    if (idx.empty()) throw Error("potential_at: empty profile");
    constexpr double eps = 1e-12;
    double lo = prof.centers[idx.front()];
    double hi = prof.centers[idx.back()];
    if (u < lo - eps || u > hi + eps)
        throw Error("hamiltonian_energy: u=" + format_double(u) + " outside reconstructed range [" + format_double(lo) +
                    ", " + format_double(hi) + "]");
    if (idx.size() == 1) return prof.U[idx.front()];
    for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
        double a = prof.centers[idx[k]];
        double b = prof.centers[idx[k + 1]];
        if (u <= b + eps || k + 2 == idx.size()) {
            double w = std::clamp((u - a) / (b - a), 0.0, 1.0);
            return (1.0 - w) * prof.U[idx[k]] + w * prof.U[idx[k + 1]];
        }
    }
    return prof.U[idx.back()];
}

inline double hamiltonian_energy(double u, double e, const PotentialProfile& prof) {
    return 0.5 * e * e + potential_at(prof, u);
}

// ---------------------------------------------------------------------------
// Simulation

struct SimulatedPath {
    std::vector<double> tau;
    std::vector<double> u;
    std::vector<double> e;
};

// Velocity-Verlet integration of u' = e, e' = -U'(u). Returns steps + 1 states.
// Gaussian noise with standard deviation noise_level is added afterwards.
inline SimulatedPath simulate_trajectory(const std::function<double(double)>& dU, std::pair<double, double> x0,
                                         double dtau, int steps, std::uint64_t seed = 0, double noise_level = 0.0) {
    if (!(dtau > 0.0)) throw Error("simulate_trajectory: dtau must be positive");
    if (steps < 2) throw Error("simulate_trajectory: need at least 2 steps");
    SimulatedPath path;
    const auto n = static_cast<std::size_t>(steps) + 1;
    path.tau.resize(n);
    path.u.resize(n);
    path.e.resize(n);
    double u = x0.first;
    double e = x0.second;
    double force = dU(u);
    if (!std::isfinite(force)) throw Error("simulate_trajectory: non-finite U' at u=" + format_double(u));
    path.u[0] = u;
    path.e[0] = e;
    for (std::size_t k = 1; k < n; ++k) {
        double half = e - 0.5 * dtau * force;
        u += dtau * half;
        force = dU(u);
        if (!std::isfinite(force)) throw Error("simulate_trajectory: non-finite U' at u=" + format_double(u));
        e = half - 0.5 * dtau * force;
        path.tau[k] = static_cast<double>(k) * dtau;
        path.u[k] = u;
        path.e[k] = e;
    }
    if (noise_level > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, noise_level);
        for (std::size_t k = 0; k < n; ++k) {
            path.u[k] += noise(rng);
            path.e[k] += noise(rng);
        }
    }
    return path;
}

// Trajectory whose raw coordinates are the simulated (u, e); tau is rescaled
// to [0, 1]. No point carries the origin flag.
inline Trajectory to_trajectory(const SimulatedPath& path, std::string id) {
    Trajectory traj{std::move(id), {}, infodyn::EntropyMode::realized};
    auto tau = infodyn::local_tau(path.u.size());
    for (std::size_t k = 0; k < path.u.size(); ++k) {
        infodyn::PhasePoint p;
        p.step_index = static_cast<int>(k) + 1;
        p.tau = tau[k];
        p.u_raw = path.u[k];
        p.e_raw = path.e[k];
        traj.points.push_back(p);
    }
    return traj;
}

// Keeps every stride-th state (and the last).
inline SimulatedPath subsample(const SimulatedPath& path, std::size_t stride) {
    if (stride == 0) throw Error("subsample: stride must be positive");
    SimulatedPath out;
    for (std::size_t k = 0; k < path.u.size(); k += stride) {
        out.tau.push_back(path.tau[k]);
        out.u.push_back(path.u[k]);
        out.e.push_back(path.e[k]);
    }
    if ((path.u.size() - 1) % stride != 0) {
        out.tau.push_back(path.tau.back());
        out.u.push_back(path.u.back());
        out.e.push_back(path.e.back());
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV tables

inline std::string flowfield_csv(const FlowField& f) {
    std::string out = "i,j,u_center,e_center,count,v1_mean,v2_mean,density\n";
    const auto& g = f.grid();
    for (int j = 0; j < g.ny(); ++j)
        for (int i = 0; i < g.nx(); ++i) {
            out += csv::join({std::to_string(i), std::to_string(j), format_double(g.u_center(i)),
                              format_double(g.e_center(j)), std::to_string(f.count(i, j)), format_double(f.v1_mean(i, j)),
                              format_double(f.v2_mean(i, j)), format_double(f.density(i, j))});
            out += '\n';
        }
    return out;
}

inline std::string divergence_csv(const DivergenceMap& m) {
    std::string out = "i,j,div,defined_flag\n";
    for (int j = 0; j < m.grid.ny(); ++j)
        for (int i = 0; i < m.grid.nx(); ++i) {
            bool d = m.is_defined(i, j);
            out += csv::join({std::to_string(i), std::to_string(j), d ? format_double(m.at(i, j)) : "nan", d ? "1" : "0"});
            out += '\n';
        }
    return out;
}

inline std::string potential_csv(const PotentialProfile& p) {
    std::string out = "u_center,U,U_prime,count\n";
    for (std::size_t k = 0; k < p.centers.size(); ++k) {
        out += csv::join({format_double(p.centers[k]), format_double(p.U[k]), format_double(p.U_prime[k]),
                          std::to_string(p.counts[k])});
        out += '\n';
    }
    return out;
}

// Reads a flowfield.csv back into a field whose cells hold `count` samples at
// the cell center with the recorded mean velocity.
inline FlowField read_flowfield_csv(const std::string& path) {
    auto t = csv::read(path);
    const auto ci = t.column("i"), cj = t.column("j"), cc = t.column("count"), c1 = t.column("v1_mean"),
               c2 = t.column("v2_mean");
    int nx = 0, ny = 0;
    for (const auto& r : t.rows) {
        nx = std::max(nx, static_cast<int>(parse_int(r[ci])) + 1);
        ny = std::max(ny, static_cast<int>(parse_int(r[cj])) + 1);
    }
    FlowField f(Grid(nx, ny));
    for (const auto& r : t.rows) {
        auto n = static_cast<std::size_t>(parse_int(r[cc]));
        if (n == 0) continue;
        f.set_center_value(static_cast<int>(parse_int(r[ci])), static_cast<int>(parse_int(r[cj])), parse_double(r[c1]),
                           parse_double(r[c2]), n);
    }
    return f;
}

inline DivergenceMap read_divergence_csv(const std::string& path) {
    auto t = csv::read(path);
    const auto ci = t.column("i"), cj = t.column("j"), cd = t.column("div"), cf = t.column("defined_flag");
    int nx = 0, ny = 0;
    for (const auto& r : t.rows) {
        nx = std::max(nx, static_cast<int>(parse_int(r[ci])) + 1);
        ny = std::max(ny, static_cast<int>(parse_int(r[cj])) + 1);
    }
    Grid g(nx, ny);
    DivergenceMap m{g, std::vector<double>(g.size(), 0.0), std::vector<char>(g.size(), 0)};
    for (const auto& r : t.rows) {
        auto k = g.index(static_cast<int>(parse_int(r[ci])), static_cast<int>(parse_int(r[cj])));
        m.defined[k] = r[cf] == "1";
        if (m.defined[k]) m.values[k] = parse_double(r[cd]);
    }
    return m;
}

}  // namespace iftrack::flow
