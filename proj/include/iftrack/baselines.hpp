#pragma once

// Static comparison methods over step embeddings: exact t-SNE, a Gaussian KDE
// landscape, and pseudo multiple-choice sets for open-ended questions.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "common.hpp"
#include "trace_model.hpp"

namespace iftrack::baselines {

using json = nlohmann::json;

struct EmbeddingRecord {
    std::string trace_id;
    int step_index = 0;
    std::vector<double> vector;

    bool operator==(const EmbeddingRecord&) const = default;
};

inline std::vector<EmbeddingRecord> parse_embeddings(std::istream& in) {
    std::vector<EmbeddingRecord> out;
    std::string line;
    std::size_t lineno = 0;
    std::optional<std::size_t> dim;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        EmbeddingRecord r;
        try {
            auto j = json::parse(line);
            r.trace_id = j.at("trace_id").get<std::string>();
            r.step_index = j.at("step_index").get<int>();
            r.vector = j.at("vector").get<std::vector<double>>();
        } catch (const json::exception& e) {
            throw Error("embeddings line " + std::to_string(lineno) + ": " + e.what());
        }
        if (r.vector.empty()) throw Error("embeddings line " + std::to_string(lineno) + ": empty vector");
        if (!std::all_of(r.vector.begin(), r.vector.end(), [](double v) { return std::isfinite(v); }))
            throw Error("embeddings line " + std::to_string(lineno) + ": non-finite entry");
        if (dim && *dim != r.vector.size())
            throw Error("embeddings line " + std::to_string(lineno) + ": dimension " + std::to_string(r.vector.size()) +
                        " differs from " + std::to_string(*dim));
        dim = r.vector.size();
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<EmbeddingRecord> load_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read embeddings file " + path);
    return parse_embeddings(in);
}

inline std::string serialize_embeddings(std::span<const EmbeddingRecord> records) {
    std::string out;
    for (const auto& r : records) {
        json j;
        j["trace_id"] = r.trace_id;
        j["step_index"] = r.step_index;
        j["vector"] = r.vector;
        out += j.dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// t-SNE (exact)

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 1000;
    std::uint64_t seed = 42;
    double learning_rate = 200.0;
    double exaggeration = 12.0;
    int exaggeration_iters = 250;
    int momentum_switch = 250;
    double momentum_initial = 0.5;
    double momentum_final = 0.8;
    double entropy_tolerance = 1e-10;
};

struct TsneResult {
    std::vector<std::array<double, 2>> coords;
    std::vector<double> beta;           // precision 1 / (2 sigma^2) per point
    std::vector<double> row_entropy;    // achieved conditional entropy (nats)
    double target_entropy = 0.0;        // ln(perplexity)
    double kl_after_exaggeration = 0.0;
    double kl_final = 0.0;
};

namespace detail {

inline std::vector<double> squared_distances(std::span<const std::vector<double>> x) {
    const std::size_t n = x.size();
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < x[i].size(); ++k) {
                double diff = x[i][k] - x[j][k];
                acc += diff * diff;
            }
            d[i * n + j] = d[j * n + i] = acc;
        }
    return d;
}

// Row i of the conditional distribution for precision beta; returns its entropy.
inline double conditional_row(std::span<const double> dist_row, std::size_t self, double beta, std::span<double> p) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < dist_row.size(); ++j)
        if (j != self) dmin = std::min(dmin, dist_row[j]);
    double sum = 0.0;
    double weighted = 0.0;
    for (std::size_t j = 0; j < dist_row.size(); ++j) {
        if (j == self) {
            p[j] = 0.0;
            continue;
        }
        double shifted = dist_row[j] - dmin;
        p[j] = std::exp(-beta * shifted);
        sum += p[j];
        weighted += shifted * p[j];
    }
    for (double& v : p) v /= sum;
    return std::log(sum) + beta * weighted / sum;
}

inline double kl_divergence(std::span<const double> p, std::span<const std::array<double, 2>> y) {
    const std::size_t n = y.size();
    std::vector<double> num(n * n, 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
            double q = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = num[j * n + i] = q;
            z += 2.0 * q;
        }
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double pij = p[i * n + j];
            if (pij > 0.0) kl += pij * std::log(pij / std::max(num[i * n + j] / z, 1e-300));
        }
    return kl;
}

}  // namespace detail

inline TsneResult tsne(std::span<const std::vector<double>> x, const TsneConfig& cfg = {}) {
    const std::size_t n = x.size();
    if (n < 4) throw Error("tsne: need at least 4 points, got " + std::to_string(n));
    if (!(cfg.perplexity > 0.0) || cfg.perplexity >= static_cast<double>(n - 1) / 3.0)
        throw Error("tsne: perplexity " + format_double(cfg.perplexity) + " infeasible for " + std::to_string(n) +
                    " points (must be below (N-1)/3)");
    for (const auto& row : x)
        if (row.size() != x[0].size()) throw Error("tsne: inconsistent embedding dimension");

    TsneResult res;
    res.target_entropy = std::log(cfg.perplexity);
    res.beta.assign(n, 1.0);
    res.row_entropy.assign(n, 0.0);
    const auto dist = detail::squared_distances(x);

    // Conditional distributions with per-point precision from bisection.
    std::vector<double> cond(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::span<const double> drow(dist.data() + i * n, n);
        std::span<double> prow(cond.data() + i * n, n);
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double h = detail::conditional_row(drow, i, beta, prow);
        for (int it = 0; it < 200 && std::abs(h - res.target_entropy) > cfg.entropy_tolerance; ++it) {
            if (h > res.target_entropy) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = detail::conditional_row(drow, i, beta, prow);
        }
        res.beta[i] = beta;
        res.row_entropy[i] = h;
    }

    std::vector<double> p(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) p[i * n + j] = std::max((cond[i * n + j] + cond[j * n + i]) / (2.0 * static_cast<double>(n)), 1e-12);

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> init(0.0, 1e-2);
    std::vector<std::array<double, 2>> y(n);
    for (auto& pt : y) pt = {init(rng), init(rng)};
    std::vector<std::array<double, 2>> update(n, {0.0, 0.0}), gains(n, {1.0, 1.0}), grad(n);
    std::vector<double> num(n * n, 0.0);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const double exag = iter < cfg.exaggeration_iters ? cfg.exaggeration : 1.0;
        const double momentum = iter < cfg.momentum_switch ? cfg.momentum_initial : cfg.momentum_final;
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
                double q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = num[j * n + i] = q;
                z += 2.0 * q;
            }
        for (std::size_t i = 0; i < n; ++i) {
            double gx = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                double q = num[i * n + j];
                double mult = (exag * p[i * n + j] - q / z) * q;
                gx += mult * (y[i][0] - y[j][0]);
                gy += mult * (y[i][1] - y[j][1]);
            }
            grad[i] = {4.0 * gx, 4.0 * gy};
        }
        for (std::size_t i = 0; i < n; ++i)
            for (int d = 0; d < 2; ++d) {
                bool same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = same_sign ? std::max(gains[i][d] * 0.8, 0.01) : gains[i][d] + 0.2;
                update[i][d] = momentum * update[i][d] - cfg.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        std::array<double, 2> c{0.0, 0.0};
        for (const auto& pt : y) {
            c[0] += pt[0];
            c[1] += pt[1];
        }
        for (auto& pt : y) {
            pt[0] -= c[0] / static_cast<double>(n);
            pt[1] -= c[1] / static_cast<double>(n);
        }
        if (iter + 1 == cfg.exaggeration_iters) res.kl_after_exaggeration = detail::kl_divergence(p, y);
    }
    if (cfg.exaggeration_iters >= cfg.iterations) res.kl_after_exaggeration = detail::kl_divergence(p, y);
    res.kl_final = detail::kl_divergence(p, y);
    res.coords = std::move(y);
    return res;
}

// ---------------------------------------------------------------------------
// KDE landscape

struct KdeConfig {
    std::optional<double> bandwidth;  // Scott's rule when absent
    int nx = 100;
    int ny = 100;
    double padding = 6.0;  // grid extends this many bandwidths beyond the data
    std::optional<std::array<double, 4>> extent;  // x0, x1, y0, y1
};

struct LandscapeGrid {
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    int nx = 0, ny = 0;
    std::vector<double> density;  // row-major, j * nx + i
    double bandwidth = 0.0;
    std::size_t samples = 0;

    double dx() const { return (x1 - x0) / nx; }
    double dy() const { return (y1 - y0) / ny; }
    double x_center(int i) const { return x0 + (i + 0.5) * dx(); }
    double y_center(int j) const { return y0 + (j + 0.5) * dy(); }
    double at(int i, int j) const { return density[static_cast<std::size_t>(j) * nx + i]; }
    double mass() const { return std::accumulate(density.begin(), density.end(), 0.0) * dx() * dy(); }
    double max_density() const { return *std::max_element(density.begin(), density.end()); }
};

inline double scott_bandwidth(std::span<const std::array<double, 2>> pts) {
    const double n = static_cast<double>(pts.size());
    if (pts.size() < 2) throw Error("kde_landscape: Scott's rule needs at least 2 points; pass a bandwidth");
    double mx = 0, my = 0;
    for (const auto& p : pts) {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    double vx = 0, vy = 0;
    for (const auto& p : pts) {
        vx += (p[0] - mx) * (p[0] - mx);
        vy += (p[1] - my) * (p[1] - my);
    }
    double sigma = std::sqrt(0.5 * (vx + vy) / (n - 1.0));
    if (!(sigma > 0.0)) throw Error("kde_landscape: zero-variance point cloud; pass an explicit bandwidth");
    return sigma * std::pow(n, -1.0 / 6.0);
}

// Isotropic Gaussian KDE evaluated at cell centers.
inline LandscapeGrid kde_landscape(std::span<const std::array<double, 2>> pts, const KdeConfig& cfg = {}) {
    if (pts.empty()) throw Error("kde_landscape: no points");
    if (cfg.nx < 1 || cfg.ny < 1) throw Error("kde_landscape: invalid grid size");
    LandscapeGrid g;
    g.bandwidth = cfg.bandwidth ? *cfg.bandwidth : scott_bandwidth(pts);
    if (!(g.bandwidth > 0.0)) throw Error("kde_landscape: bandwidth must be positive");
    g.samples = pts.size();
    g.nx = cfg.nx;
    g.ny = cfg.ny;
    if (cfg.extent) {
        std::tie(g.x0, g.x1, g.y0, g.y1) = std::tuple((*cfg.extent)[0], (*cfg.extent)[1], (*cfg.extent)[2], (*cfg.extent)[3]);
    } else {
        auto [xmin, xmax] = std::minmax_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a[0] < b[0]; });
        auto [ymin, ymax] = std::minmax_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a[1] < b[1]; });
        double pad = cfg.padding * g.bandwidth;
        g.x0 = (*xmin)[0] - pad;
        g.x1 = (*xmax)[0] + pad;
        g.y0 = (*ymin)[1] - pad;
        g.y1 = (*ymax)[1] + pad;
    }
    if (!(g.x1 > g.x0) || !(g.y1 > g.y0)) throw Error("kde_landscape: empty extent");
    const double h2 = g.bandwidth * g.bandwidth;
    const double norm = 1.0 / (static_cast<double>(pts.size()) * 2.0 * std::numbers::pi * h2);
    g.density.assign(static_cast<std::size_t>(g.nx) * g.ny, 0.0);
    for (int j = 0; j < g.ny; ++j)
        for (int i = 0; i < g.nx; ++i) {
            double cx = g.x_center(i), cy = g.y_center(j);
            double acc = 0.0;
            for (const auto& p : pts) {
                double dx = cx - p[0], dy = cy - p[1];
                acc += std::exp(-(dx * dx + dy * dy) / (2.0 * h2));
            }
            g.density[static_cast<std::size_t>(j) * g.nx + i] = acc * norm;
        }
    return g;
}

// ---------------------------------------------------------------------------
// Pseudo multiple-choice sets

struct ChoiceSet {
    std::string question;
    std::vector<std::string> trace_ids;
};

struct PseudoMcq {
    std::vector<ChoiceSet> sets;
    std::vector<std::string> skipped;  // questions with fewer than 2 answers
};

// Groups traces by question and samples up to k answers per question. The
// sampling for the q-th question (in sorted question order) is seeded with
// (seed, q); chosen answers keep their corpus order.
inline PseudoMcq pseudo_mcq(std::span<const trace::Trace> traces, std::size_t k, std::uint64_t seed = 42) {
    if (k < 2) throw Error("pseudo_mcq: a choice set needs at least 2 answers");
    std::map<std::string, std::vector<std::string>> by_question;
    for (const auto& t : traces) by_question[t.question].push_back(t.id);
    PseudoMcq out;
    std::uint32_t q = 0;
    for (const auto& [question, ids] : by_question) {
        ++q;
        if (ids.size() < 2) {
            out.skipped.push_back(question);
            continue;
        }
        ChoiceSet set{question, {}};
        if (k >= ids.size()) {
            set.trace_ids = ids;
        } else {
            std::vector<std::size_t> order(ids.size());
            std::iota(order.begin(), order.end(), 0);
            std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), q};
            std::mt19937_64 rng(seq);
            std::shuffle(order.begin(), order.end(), rng);
            order.resize(k);
            std::sort(order.begin(), order.end());
            for (auto idx : order) set.trace_ids.push_back(ids[idx]);
        }
        out.sets.push_back(std::move(set));
    }
    return out;
}

}  // namespace iftrack::baselines
