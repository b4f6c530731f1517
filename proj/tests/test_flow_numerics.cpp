#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "iftrack/flow_numerics.hpp"
#include "test_util.hpp"

using namespace iftrack;
using namespace iftrack::flow;

namespace {

infodyn::Trajectory points(std::vector<std::array<double, 3>> tue) {
    infodyn::Trajectory t{"t", {}, infodyn::EntropyMode::realized};
    int k = 1;
    for (auto [tau, u, e] : tue) {
        infodyn::PhasePoint p;
        p.step_index = k++;
        p.tau = tau;
        p.u = u;
        p.e = e;
        t.points.push_back(p);
    }
    return t;
}

double max_interior_error(int n, const std::function<std::pair<double, double>(double, double)>& f,
                          const std::function<double(double, double)>& exact) {
    Grid g(n, n);
    auto d = discrete_divergence(sample_field(g, f, 3));
    double err = 0.0;
    for (int j = 1; j + 1 < n; ++j)
        for (int i = 1; i + 1 < n; ++i) err = std::max(err, std::abs(d.at(i, j) - exact(g.u_center(i), g.e_center(j))));
    return err;
}

}  // namespace

TEST(SegmentVelocities, FiniteDifference) {
    auto s = segment_velocities(points({{0, 0.8, 0.1}, {1, 0.2, 0.5}}));
    ASSERT_EQ(s.size(), 1u);
    EXPECT_NEAR(s[0].u, 0.5, 1e-15);
    EXPECT_NEAR(s[0].e, 0.3, 1e-15);
    EXPECT_NEAR(s[0].v1, -0.6, 1e-15);
    EXPECT_NEAR(s[0].v2, 0.4, 1e-15);
}

TEST(SegmentVelocities, CollinearPointsShareVelocity) {
    auto s = segment_velocities(points({{0, 0.1, 0.2}, {0.5, 0.3, 0.3}, {1, 0.5, 0.4}}));
    ASSERT_EQ(s.size(), 2u);
    EXPECT_NEAR(s[0].v1, s[1].v1, 1e-14);
    EXPECT_NEAR(s[0].v2, s[1].v2, 1e-14);
}

TEST(SegmentVelocities, ZeroTauIncrementAndTooShort) {
    try {
        segment_velocities(points({{0, 0.1, 0.2}, {0, 0.3, 0.3}}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("zero tau increment"), std::string::npos);
    }
    auto t = points({{0, 0.1, 0.2}, {1, 0.3, 0.3}});
    t.points[0].origin = true;
    EXPECT_THROW(segment_velocities(t), Error);
}

TEST(SegmentVelocities, OriginSegmentExcluded) {
    auto t = points({{0, 0.1, 0.0}, {0.5, 0.3, 0.3}, {1, 0.5, 0.4}});
    t.points[0].origin = true;
    auto s = segment_velocities(t);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].step_index, 3);
}

TEST(AccumulateField, CellMeanAndDensity) {
    Grid g(4, 4);
    auto f = accumulate_field({{0.1, 0.1, 1, 0, 0, 1}, {0.12, 0.15, 0, 1, 0, 2}}, g);
    EXPECT_EQ(f.count(0, 0), 2u);
    EXPECT_DOUBLE_EQ(f.v1_mean(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(f.v2_mean(0, 0), 0.5);

    auto h = accumulate_field({{0.1, 0.1, 1, 0, 0, 1}, {0.6, 0.6, 0, 1, 0, 2}, {0.9, 0.1, 0, 1, 0, 3}}, g);
    EXPECT_EQ(h.non_empty_cells(), 3u);
    EXPECT_DOUBLE_EQ(h.density(0, 0), 1.0 / 3.0);
    double sum = 0;
    for (int j = 0; j < 4; ++j)
        for (int i = 0; i < 4; ++i) sum += h.density(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-15);
    EXPECT_THROW(accumulate_field({}, g), Error);
}

TEST(AccumulateField, PermutationInvariantAndMergeable) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1), v(-3, 3);
    std::vector<VelocitySample> s(2000);
    for (auto& x : s) x = {u(rng), u(rng), v(rng), v(rng), u(rng), 1};
    Grid g(10, 10);
    auto a = accumulate_field(s, g);
    std::shuffle(s.begin(), s.end(), rng);
    auto b = accumulate_field(s, g);
    EXPECT_EQ(flowfield_csv(a), flowfield_csv(b));

    std::vector<VelocitySample> lo(s.begin(), s.begin() + 700), hi(s.begin() + 700, s.end());
    auto m = accumulate_field(lo, g);
    m.merge(accumulate_field(hi, g));
    for (int j = 0; j < 10; ++j)
        for (int i = 0; i < 10; ++i) {
            EXPECT_EQ(m.count(i, j), a.count(i, j));
            EXPECT_NEAR(m.v1_mean(i, j), a.v1_mean(i, j), 1e-12);
            EXPECT_NEAR(m.v2_mean(i, j), a.v2_mean(i, j), 1e-12);
        }
}

TEST(AccumulateField, OutOfRangeSamplesClippedAndFlagged) {
    auto f = accumulate_field({{1.2, 0.5, 1, 0, 0, 1}, {0.5, 0.5, 0, 1, 0, 2}}, Grid(4, 4));
    EXPECT_EQ(f.clipped(), 1u);
    EXPECT_EQ(f.count(3, 2), 1u);
}

TEST(Divergence, SolenoidalLinearFieldIsZero) {
    auto d = discrete_divergence(sample_field(Grid(20, 20), [](double u, double e) { return std::pair{e, -u}; }, 3));
    EXPECT_EQ(d.defined_count(), 18u * 18u);
    for (std::size_t k = 0; k < d.values.size(); ++k)
        if (d.defined[k]) {
            EXPECT_NEAR(d.values[k], 0.0, 1e-12);
        }
}

TEST(Divergence, IdentityFieldIsTwo) {
    auto d = discrete_divergence(sample_field(Grid(20, 20), [](double u, double e) { return std::pair{u, e}; }, 3));
    for (std::size_t k = 0; k < d.values.size(); ++k)
        if (d.defined[k]) {
            EXPECT_NEAR(d.values[k], 2.0, 1e-12);
        }
    auto r = liouville_report(d, 1e-3);
    EXPECT_EQ(r.fraction_below_tolerance, 0.0);
}

TEST(Divergence, QuadraticExact) {
    Grid g(20, 20);
    auto d = discrete_divergence(sample_field(g, [](double u, double) { return std::pair{u * u, 0.0}; }, 3));
    for (int j = 1; j < 19; ++j)
        for (int i = 1; i < 19; ++i) EXPECT_NEAR(d.at(i, j), 2.0 * g.u_center(i), 1e-12);
}

TEST(Divergence, Linearity) {
    Grid g(12, 12);
    auto F = [](double u, double e) { return std::pair{std::sin(3 * u) * e, u * u * e}; };
    auto G = [](double u, double e) { return std::pair{std::exp(e) - u, std::cos(u + e)}; };
    const double a = 2.5, b = -0.75;
    auto dF = discrete_divergence(sample_field(g, F, 3));
    auto dG = discrete_divergence(sample_field(g, G, 3));
    auto dH = discrete_divergence(sample_field(g, [&](double u, double e) {
        auto [f1, f2] = F(u, e);
        auto [g1, g2] = G(u, e);
        return std::pair{a * f1 + b * g1, a * f2 + b * g2};
    }, 3));
    for (std::size_t k = 0; k < dH.values.size(); ++k)
        if (dH.defined[k]) {
            EXPECT_NEAR(dH.values[k], a * dF.values[k] + b * dG.values[k], 1e-11);
        }
}

TEST(Divergence, SecondOrderConvergence) {
    auto f = [](double u, double e) { return std::pair{std::sin(u), std::cos(e)}; };
    auto exact = [](double u, double e) { return std::cos(u) - std::sin(e); };
    double ratio = max_interior_error(20, f, exact) / max_interior_error(40, f, exact);
    EXPECT_GE(ratio, 3.0);
    EXPECT_LE(ratio, 5.0);
}

TEST(Divergence, UndefinedWhereNeighboursSparse) {
    Grid g(5, 5);
    FlowField f(g);
    for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 5; ++i) f.set_center_value(i, j, 1.0, 0.0, 3);
    f.set_center_value(3, 2, 1.0, 0.0, 2);  // below the 3-sample floor
    auto d = discrete_divergence(f);
    EXPECT_FALSE(d.is_defined(2, 2));
    EXPECT_FALSE(d.is_defined(3, 1));
    EXPECT_FALSE(d.is_defined(3, 3));
    EXPECT_TRUE(d.is_defined(3, 2));  // its own count is not part of its stencil
    EXPECT_TRUE(d.is_defined(1, 1));
    EXPECT_EQ(d.defined_count(), 6u);

    FlowField sparse(g);
    sparse.set_center_value(2, 2, 1.0, 0.0, 5);
    EXPECT_THROW(discrete_divergence(sparse), Error);
    EXPECT_THROW(Grid(2, 5), Error);
}

TEST(Divergence, RemovingEmptyCellsDoesNotChangeDefinedValues) {
    Grid g(8, 8);
    auto full = sample_field(g, [](double u, double e) { return std::pair{u * e, -e * e}; }, 3);
    FlowField holes = full;
    holes.set_center_value(0, 0, 0, 0, 0);
    holes.set_center_value(7, 7, 0, 0, 0);
    auto a = discrete_divergence(full), b = discrete_divergence(holes);
    for (std::size_t k = 0; k < a.values.size(); ++k)
        if (b.defined[k]) {
            EXPECT_EQ(a.values[k], b.values[k]);
        }
}

TEST(Liouville, ZeroMap) {
    auto d = discrete_divergence(sample_field(Grid(6, 6), [](double, double) { return std::pair{0.3, -0.2}; }, 3));
    auto r = liouville_report(d, 1e-3);
    EXPECT_EQ(r.mean_abs, 0.0);
    EXPECT_EQ(r.fraction_below_tolerance, 1.0);
    EXPECT_EQ(r.defined_cells, 16u);
}

TEST(CenteredEstimate, ExactForLinearFieldOffCentreSamples) {
    // Samples away from the cell centres bias the plain mean but not the local regression.
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.0, 0.35);
    std::vector<VelocitySample> s;
    for (int k = 0; k < 4000; ++k) {
        double x = u(rng), y = u(rng) * 2.0;
        s.push_back({x, y, y, -x, 0.5, 2});
    }
    auto f = accumulate_field(s, Grid(20, 20));
    auto c = liouville_report(discrete_divergence(f, {3, CellEstimate::centered}), 1e-3);
    EXPECT_LT(c.max_abs, 1e-9);
}

TEST(Potential, HarmonicSamples) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> amp(0.2, 1.0), ph(0.0, 2.0 * std::numbers::pi);
    std::vector<VelocitySample> samples;
    for (int k = 0; k < 200; ++k) {
        double a = amp(rng), p = ph(rng);
        auto path = simulate_trajectory([](double x) { return x; }, {a * std::cos(p), -a * std::sin(p)}, 1e-3, 2000);
        auto tr = to_trajectory(subsample(path, 20), "h");
        for (std::size_t i = 0; i + 1 < tr.points.size(); ++i) {
            const auto &x0 = tr.points[i], &x1 = tr.points[i + 1];
            double dt = path.tau[std::min<std::size_t>((i + 1) * 20, path.tau.size() - 1)] - path.tau[i * 20];
            samples.push_back({0.5 * (x0.u_raw + x1.u_raw), 0.5 * (x0.e_raw + x1.e_raw), (x1.u_raw - x0.u_raw) / dt,
                               (x1.e_raw - x0.e_raw) / dt, 0, 1});
        }
    }
    auto prof = reconstruct_potential(samples, {-1.0, 1.0, 20, 10});
    for (auto k : prof.retained_bins()) EXPECT_NEAR(prof.U_prime[k], prof.centers[k], 0.03) << "bin " << k;
}

TEST(Potential, FlatAndSingleBin) {
    std::vector<VelocitySample> flat;
    for (int k = 0; k < 200; ++k) flat.push_back({k / 200.0, 0.5, 0.1, 0.0, 0, 1});
    auto p = reconstruct_potential(flat);
    for (auto k : p.retained_bins()) EXPECT_EQ(p.U[k], 0.0);

    std::vector<VelocitySample> one(12, VelocitySample{0.52, 0.5, 0.0, -0.3, 0, 1});
    auto q = reconstruct_potential(one);
    ASSERT_EQ(q.retained_bins().size(), 1u);
    EXPECT_EQ(q.U[q.retained_bins()[0]], 0.0);
    EXPECT_DOUBLE_EQ(q.U_prime[q.retained_bins()[0]], 0.3);

    std::vector<VelocitySample> few(5, VelocitySample{0.5, 0.5, 0, 0, 0, 1});
    EXPECT_THROW(reconstruct_potential(few), Error);
}

TEST(Hamiltonian, EnergyExamples) {
    PotentialProfile quad;
    for (int k = 0; k <= 100; ++k) {
        double u = k / 100.0;
        quad.centers.push_back(u);
        quad.U.push_back(0.5 * u * u);
        quad.U_prime.push_back(u);
        quad.counts.push_back(10);
        quad.retained.push_back(1);
    }
    EXPECT_EQ(hamiltonian_energy(0.0, 0.0, quad), 0.0);
    EXPECT_NEAR(hamiltonian_energy(0.6, 0.8, quad), 0.5, 1e-12);
    EXPECT_THROW(hamiltonian_energy(1.5, 0.0, quad), Error);
}

TEST(Simulate, HarmonicPeriodAndFreeMotion) {
    auto p = simulate_trajectory([](double u) { return u; }, {1.0, 0.0}, 1e-3, 6284);
    EXPECT_NEAR(p.u.back(), 1.0, 1e-3);
    EXPECT_NEAR(p.e.back(), 0.0, 1e-3);

    auto f = simulate_trajectory([](double) { return 0.0; }, {0.2, 0.1}, 1e-3, 1000);
    for (std::size_t k = 0; k < f.u.size(); ++k) {
        EXPECT_NEAR(f.u[k], 0.2 + 0.1 * f.tau[k], 1e-12);
        EXPECT_EQ(f.e[k], 0.1);
    }
}

TEST(Simulate, EnergyDriftAndDeterminism) {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> x(-1, 1);
    for (int k = 0; k < 50; ++k) {
        std::pair<double, double> x0{x(rng), x(rng)};
        auto p = simulate_trajectory([](double u) { return u; }, x0, 1e-3, 1000);
        double h0 = 0.5 * (x0.first * x0.first + x0.second * x0.second);
        for (std::size_t i = 0; i < p.u.size(); ++i)
            EXPECT_LT(std::abs(0.5 * (p.u[i] * p.u[i] + p.e[i] * p.e[i]) - h0) / h0, 1e-4);
    }
    auto a = simulate_trajectory([](double u) { return u; }, {0.3, 0.1}, 1e-3, 100, 5, 0.01);
    auto b = simulate_trajectory([](double u) { return u; }, {0.3, 0.1}, 1e-3, 100, 5, 0.01);
    EXPECT_EQ(a.u, b.u);
    EXPECT_EQ(a.e, b.e);
    EXPECT_THROW(simulate_trajectory([](double) { return NAN; }, {0.3, 0.1}, 1e-3, 10), Error);
    EXPECT_THROW(simulate_trajectory([](double u) { return u; }, {0.3, 0.1}, 0.0, 10), Error);
}

TEST(Csv, GoldenHeadersAndRoundTrip) {
    Grid g(4, 3);
    auto f = sample_field(g, [](double u, double e) { return std::pair{u - e, u * e}; }, 3);
    auto text = flowfield_csv(f);
    EXPECT_EQ(text.substr(0, text.find('\n')), "i,j,u_center,e_center,count,v1_mean,v2_mean,density");
    auto d = discrete_divergence(f);
    auto dtext = divergence_csv(d);
    EXPECT_EQ(dtext.substr(0, dtext.find('\n')), "i,j,div,defined_flag");
    std::vector<VelocitySample> s(20, VelocitySample{0.5, 0.5, 0, -0.2, 0, 1});
    auto ptext = potential_csv(reconstruct_potential(s));
    EXPECT_EQ(ptext.substr(0, ptext.find('\n')), "u_center,U,U_prime,count");

    testutil::TempDir dir("flowcsv");
    EXPECT_EQ(flowfield_csv(read_flowfield_csv(dir.file("f.csv", text))), text);
    EXPECT_EQ(divergence_csv(read_divergence_csv(dir.file("d.csv", dtext))), dtext);
}
