#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>

#include "iftrack/analysis.hpp"
#include "iftrack/synth_corpus.hpp"

using namespace iftrack;
using namespace iftrack::synth;

namespace {

SynthSpec small_spec(std::uint64_t seed = 5) {
    SynthSpec s;
    s.n_traces = 40;
    s.seed = seed;
    return s;
}

struct Recovery {
    std::size_t planted = 0;
    std::size_t recovered = 0;
};

// Runs the classifier on a generated corpus against its own correct segments.
Recovery recover(const SynthCorpus& c) {
    std::vector<infodyn::Trajectory> trajs;
    analysis::CorrectnessIndex ok;
    analysis::ErrorIndex errs;
    for (const auto& t : c.traces) {
        trajs.push_back(infodyn::build_trajectory(t));
        ok[t.id] = *t.meta.correctness;
        for (const auto& s : t.steps)
            if (s.error_label) errs[t.id].push_back({s.index, analysis::parse_stage(*s.error_label)});
    }
    infodyn::normalize_corpus(trajs);
    auto ref = analysis::reference_flow(trajs, ok, flow::Grid(20, 20));
    auto run = analysis::classify_corpus(trajs, errs, ref);
    Recovery r;
    for (const auto& g : c.truth)
        if (g.planted) ++r.planted;
    for (const auto& rec : run.records)
        if (rec.annotated && *rec.annotated == rec.label.stage) ++r.recovered;
    return r;
}

const SynthCorpus& default_corpus() {
    static const SynthCorpus c = generate(SynthSpec{});
    return c;
}

}  // namespace

TEST(LogprobForUncertainty, LimitAndMaximum) {
    EXPECT_EQ(logprob_for_uncertainty(0.0), 0.0);
    EXPECT_EQ(logprob_for_uncertainty(1.0 / std::numbers::e), -1.0);
    EXPECT_THROW(logprob_for_uncertainty(0.4), Error);
    EXPECT_THROW(logprob_for_uncertainty(-0.01), Error);
}

TEST(LogprobForUncertainty, MatchesBisectionOracle) {
    for (double u : {0.2, 1e-6, 0.01, 0.1, 0.3, 0.367}) {
        // Oracle: bisection directly on p over the monotone branch (0, 1/e].
        double lo = 0.0, hi = 1.0 / std::numbers::e;
        for (int it = 0; it < 2000 && hi - lo > 0.0; ++it) {
            double mid = 0.5 * (lo + hi);
            if (mid == lo || mid == hi) break;
            (-mid * std::log(mid) < u ? lo : hi) = mid;
        }
        double p = std::exp(logprob_for_uncertainty(u));
        EXPECT_LE(p, 1.0 / std::numbers::e);
        EXPECT_NEAR(-p * std::log(p), u, 1e-12) << u;
        EXPECT_NEAR(p, 0.5 * (lo + hi), 1e-9 * std::max(p, 1e-3)) << u;
    }
}

TEST(SynthSpec, SeedIsMandatory) {
    json j = spec_to_json(small_spec());
    EXPECT_EQ(spec_from_json(j).seed, 5u);
    j.erase("seed");
    EXPECT_THROW(spec_from_json(j), Error);
}

TEST(SynthSpec, JsonRoundTripAndValidation) {
    auto s = small_spec();
    s.potential.kind = Potential::Kind::flat;
    s.error_fraction = 0.5;
    EXPECT_EQ(spec_to_json(spec_from_json(spec_to_json(s))), spec_to_json(s));
    json bad = spec_to_json(s);
    bad["error_fraction"] = 1.5;
    EXPECT_THROW(spec_from_json(bad), Error);
    bad = spec_to_json(s);
    bad["potential"]["kind"] = "quartic";
    EXPECT_THROW(spec_from_json(bad), Error);
    bad = spec_to_json(s);
    bad["steps_min"] = 2;
    EXPECT_THROW(spec_from_json(bad), Error);
}

TEST(Generate, DeterministicBytes) {
    auto a = generate(small_spec()), b = generate(small_spec());
    EXPECT_EQ(trace::serialize_corpus(a.traces), trace::serialize_corpus(b.traces));
    EXPECT_EQ(serialize_truth(a.truth), serialize_truth(b.truth));
    EXPECT_EQ(baselines::serialize_embeddings(a.embeddings), baselines::serialize_embeddings(b.embeddings));
    auto c = generate(small_spec(6));
    EXPECT_NE(trace::serialize_corpus(a.traces), trace::serialize_corpus(c.traces));
}

TEST(Generate, TracesAreValidAndOneTokenPerStep) {
    const auto& c = default_corpus();
    ASSERT_EQ(c.traces.size(), 200u);
    for (const auto& t : c.traces) {
        EXPECT_TRUE(trace::validate_trace(t).empty()) << t.id;
        EXPECT_GE(t.length(), 20u);
        EXPECT_LE(t.length(), 40u);
        for (const auto& s : t.steps) EXPECT_EQ(s.token_logprobs().size(), 1u);
    }
}

TEST(Generate, UncertaintyRoundTrip) {
    const auto& c = default_corpus();
    for (std::size_t i = 0; i < c.traces.size(); ++i) {
        auto tr = infodyn::build_trajectory(c.traces[i]);
        const auto& target = c.truth[i].u_target;
        ASSERT_EQ(tr.points.size(), target.size());
        for (std::size_t t = 0; t < target.size(); ++t) {
            EXPECT_NEAR(tr.points[t].u_raw, target[t], 1e-10);
            if (t > 0) {
                EXPECT_NEAR(tr.points[t].e_raw, target[t] - target[t - 1], 1e-10);
            }
        }
    }
}

TEST(Generate, PlantedCosinesInStageSectors) {
    std::array<int, 3> per_stage{};
    for (const auto& g : default_corpus().truth) {
        if (!g.planted) continue;
        ++per_stage[static_cast<std::size_t>(g.planted->stage)];
        switch (g.planted->stage) {
            case Stage::intuition_collapse: EXPECT_LT(g.planted->cosine, -0.5); break;
            case Stage::metacognition_conflict: EXPECT_LT(std::abs(g.planted->cosine), 0.1); break;
            case Stage::rationale_error: EXPECT_GT(g.planted->cosine, 0.5); break;
        }
    }
    for (int n : per_stage) EXPECT_GT(n, 0);
}

TEST(Generate, ClassifierRecoversPlantedStages) {
    auto r = recover(default_corpus());
    ASSERT_GT(r.planted, 30u);
    EXPECT_GE(static_cast<double>(r.recovered), 0.95 * static_cast<double>(r.planted))
        << r.recovered << " of " << r.planted;
}

TEST(Generate, RecoveryDegradesGracefullyWithNoise) {
    for (double noise : {0.02, 0.1}) {
        SynthSpec s;
        s.noise_level = noise;
        s.rescale_out_of_range = true;
        auto r = recover(generate(s));
        ASSERT_GT(r.planted, 30u);
        EXPECT_GE(static_cast<double>(r.recovered), 0.85 * static_cast<double>(r.planted)) << noise;
    }
}

TEST(Generate, UnreachableUncertaintyNeedsRescale) {
    auto s = small_spec();
    s.u_scale = 0.5;
    EXPECT_THROW(generate(s), Error);
    s.rescale_out_of_range = true;
    auto c = generate(s);
    EXPECT_FALSE(c.notes.empty());
    for (const auto& g : c.truth)
        for (double u : g.u_target) EXPECT_LE(u, kMaxRealizedUncertainty);
}

TEST(PlantError, ShortTrajectoryRejected) {
    auto tr = infodyn::trajectory_from_uncertainty("a", std::vector<double>{0.1, 0.2, 0.15});
    flow::FlowField f(flow::Grid(5, 5));
    EXPECT_THROW(plant_error(tr, Stage::rationale_error, f, {0.1, 0.2, -0.1, 0.1}, 1), Error);
}

TEST(ShuffledControl, PermutesValuesWithinEachTrace) {
    auto c = generate(small_spec());
    auto s = shuffled_control(c.traces, 3);
    auto again = shuffled_control(c.traces, 3);
    EXPECT_EQ(trace::serialize_corpus(s), trace::serialize_corpus(again));
    ASSERT_EQ(s.size(), c.traces.size());
    std::size_t moved = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_EQ(s[i].id, c.traces[i].id + "_shuffled");
        EXPECT_FALSE(s[i].meta.correctness.has_value());
        std::vector<double> a, b;
        for (const auto& st : c.traces[i].steps) a.push_back(st.token_logprobs()[0]);
        for (const auto& st : s[i].steps) {
            b.push_back(st.token_logprobs()[0]);
            EXPECT_FALSE(st.error_label.has_value());
        }
        if (a != b) ++moved;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        EXPECT_EQ(a, b);
    }
    EXPECT_EQ(moved, s.size());
}
