#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "iftrack/baselines.hpp"
#include "test_util.hpp"

using namespace iftrack;
using namespace iftrack::baselines;

namespace {

struct Fixture {
    std::vector<int> cluster;
    std::vector<std::vector<double>> x;
};

const Fixture& gmm100() {
    static const Fixture f = [] {
        Fixture out;
        std::ifstream in(std::string(IFTRACK_DATA_DIR) + "/gmm100.csv");
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::istringstream row(line);
            std::string cell;
            std::getline(row, cell, ',');
            out.cluster.push_back(std::stoi(cell));
            std::vector<double> v;
            while (std::getline(row, cell, ',')) v.push_back(std::stod(cell));
            out.x.push_back(v);
        }
        return out;
    }();
    return f;
}

const TsneResult& gmm_embedding() {
    static const TsneResult r = tsne(gmm100().x, TsneConfig{});
    return r;
}

trace::Trace answer(const std::string& id, const std::string& question) {
    trace::Trace t;
    t.id = id;
    t.question = question;
    trace::Step s;
    s.index = 1;
    s.text = "s";
    t.steps.push_back(s);
    return t;
}

}  // namespace

TEST(Tsne, FixtureShape) {
    ASSERT_EQ(gmm100().x.size(), 100u);
    EXPECT_EQ(gmm100().x[0].size(), 10u);
}

TEST(Tsne, PerplexityCalibration) {
    const auto& r = gmm_embedding();
    EXPECT_DOUBLE_EQ(r.target_entropy, std::log(30.0));
    for (double h : r.row_entropy) EXPECT_NEAR(h, r.target_entropy, 1e-5);
}

TEST(Tsne, DeterministicForSeed) {
    auto again = tsne(gmm100().x, TsneConfig{});
    const auto& r = gmm_embedding();
    ASSERT_EQ(again.coords.size(), r.coords.size());
    for (std::size_t i = 0; i < r.coords.size(); ++i) {
        EXPECT_EQ(again.coords[i][0], r.coords[i][0]);
        EXPECT_EQ(again.coords[i][1], r.coords[i][1]);
    }
    TsneConfig other;
    other.seed = 7;
    other.iterations = 300;
    auto different = tsne(gmm100().x, other);
    EXPECT_NE(different.coords[0], r.coords[0]);
}

TEST(Tsne, KlDecreasesAfterExaggeration) {
    const auto& r = gmm_embedding();
    EXPECT_GT(r.kl_final, 0.0);
    EXPECT_LT(r.kl_final, r.kl_after_exaggeration);
    // Measured on the bundled fixture with the default configuration.
    EXPECT_NEAR(r.kl_after_exaggeration, 1.5769372, 1e-4);
    EXPECT_NEAR(r.kl_final, 0.0355126, 1e-5);
}

TEST(Tsne, OutputIsCentered) {
    const auto& r = gmm_embedding();
    double mx = 0, my = 0;
    for (const auto& c : r.coords) {
        mx += c[0];
        my += c[1];
    }
    EXPECT_NEAR(mx / 100.0, 0.0, 1e-9);
    EXPECT_NEAR(my / 100.0, 0.0, 1e-9);
}

TEST(Tsne, NeighboursShareClusters) {
    const auto& r = gmm_embedding();
    const auto& cl = gmm100().cluster;
    int same = 0;
    for (std::size_t i = 0; i < r.coords.size(); ++i) {
        std::size_t best = i;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < r.coords.size(); ++j) {
            if (j == i) continue;
            double d = std::hypot(r.coords[i][0] - r.coords[j][0], r.coords[i][1] - r.coords[j][1]);
            if (d < bd) {
                bd = d;
                best = j;
            }
        }
        if (cl[best] == cl[i]) ++same;
    }
    EXPECT_GE(same, 95);
}

TEST(Tsne, Errors) {
    std::vector<std::vector<double>> three = {{0.0}, {1.0}, {2.0}};
    EXPECT_THROW(tsne(three), Error);
    TsneConfig cfg;
    cfg.perplexity = 33.0;  // (100 - 1) / 3
    EXPECT_THROW(tsne(gmm100().x, cfg), Error);
    auto ragged = gmm100().x;
    ragged[3].pop_back();
    EXPECT_THROW(tsne(ragged, TsneConfig{}), Error);
}

TEST(Kde, UnitMassOnWideGrid) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::array<double, 2>> pts(200);
    for (auto& p : pts) p = {n(rng), 2.0 * n(rng)};
    auto g = kde_landscape(pts, KdeConfig{});
    EXPECT_NEAR(g.mass(), 1.0, 1e-6);
    for (double d : g.density) EXPECT_GE(d, 0.0);
    EXPECT_EQ(g.samples, 200u);
    EXPECT_DOUBLE_EQ(g.bandwidth, scott_bandwidth(pts));
}

TEST(Kde, SinglePointPeakInContainingCell) {
    std::vector<std::array<double, 2>> one = {{0.3, 0.7}};
    KdeConfig cfg;
    cfg.bandwidth = 0.1;
    cfg.nx = cfg.ny = 21;
    cfg.extent = std::array<double, 4>{0.0, 1.0, 0.0, 1.0};
    auto g = kde_landscape(one, cfg);
    int ci = static_cast<int>(0.3 / g.dx()), cj = static_cast<int>(0.7 / g.dy());
    for (int i = 0; i < g.nx; ++i)
        for (int j = 0; j < g.ny; ++j)
            if (i != ci || j != cj) {
                EXPECT_LT(g.at(i, j), g.at(ci, cj));
            }
}

TEST(Kde, SymmetricPairIsSymmetric) {
    std::vector<std::array<double, 2>> two = {{-1.0, 0.25}, {1.0, 0.25}};
    KdeConfig cfg;
    cfg.bandwidth = 0.5;
    cfg.nx = 40;
    cfg.ny = 10;
    cfg.extent = std::array<double, 4>{-4.0, 4.0, -2.0, 2.5};
    auto g = kde_landscape(two, cfg);
    for (int j = 0; j < g.ny; ++j)
        for (int i = 0; i < g.nx; ++i) EXPECT_NEAR(g.at(i, j), g.at(g.nx - 1 - i, j), 1e-15);
}

TEST(Kde, UnionIsWeightedMixture) {
    std::vector<std::array<double, 2>> a = {{0.0, 0.0}, {1.0, 0.5}, {0.2, -0.3}};
    std::vector<std::array<double, 2>> b = {{2.0, 1.0}, {-1.0, 0.0}};
    auto both = a;
    both.insert(both.end(), b.begin(), b.end());
    KdeConfig cfg;
    cfg.bandwidth = 0.4;
    cfg.nx = cfg.ny = 30;
    cfg.extent = std::array<double, 4>{-3.0, 4.0, -2.0, 3.0};
    auto ga = kde_landscape(a, cfg), gb = kde_landscape(b, cfg), gu = kde_landscape(both, cfg);
    for (std::size_t k = 0; k < gu.density.size(); ++k)
        EXPECT_NEAR(gu.density[k], (3.0 * ga.density[k] + 2.0 * gb.density[k]) / 5.0, 1e-14);
}

TEST(Kde, Errors) {
    EXPECT_THROW(kde_landscape({}), Error);
    std::vector<std::array<double, 2>> same = {{1.0, 1.0}, {1.0, 1.0}};
    EXPECT_THROW(kde_landscape(same), Error);
    KdeConfig cfg;
    cfg.bandwidth = 0.5;
    EXPECT_NO_THROW(kde_landscape(same, cfg));
}

TEST(PseudoMcq, SeededSubsetIsDeterministic) {
    std::vector<trace::Trace> c;
    for (int k = 0; k < 5; ++k) c.push_back(answer("a" + std::to_string(k), "q1"));
    auto first = pseudo_mcq(c, 4, 9);
    auto second = pseudo_mcq(c, 4, 9);
    ASSERT_EQ(first.sets.size(), 1u);
    EXPECT_EQ(first.sets[0].trace_ids.size(), 4u);
    EXPECT_EQ(first.sets[0].trace_ids, second.sets[0].trace_ids);
    std::set<std::string> unique(first.sets[0].trace_ids.begin(), first.sets[0].trace_ids.end());
    EXPECT_EQ(unique.size(), 4u);
}

TEST(PseudoMcq, FullSetAndSkippedQuestion) {
    std::vector<trace::Trace> c = {answer("a", "q1"), answer("b", "q1"), answer("c", "q1"), answer("d", "q2")};
    auto r = pseudo_mcq(c, 3);
    ASSERT_EQ(r.sets.size(), 1u);
    EXPECT_EQ(r.sets[0].trace_ids, (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(r.skipped, std::vector<std::string>{"q2"});
    EXPECT_THROW(pseudo_mcq(c, 1), Error);
}

TEST(PseudoMcq, NeverMixesQuestions) {
    std::mt19937_64 rng(4);
    std::vector<trace::Trace> c;
    std::map<std::string, std::string> question_of;
    for (int k = 0; k < 200; ++k) {
        auto q = "q" + std::to_string(rng() % 17);
        auto id = "t" + std::to_string(k);
        c.push_back(answer(id, q));
        question_of[id] = q;
    }
    for (const auto& set : pseudo_mcq(c, 5, 11).sets)
        for (const auto& id : set.trace_ids) EXPECT_EQ(question_of[id], set.question);
}

TEST(Embeddings, RoundTripAndValidation) {
    std::vector<EmbeddingRecord> recs = {{"a", 1, {0.5, -1.25, 3.0}}, {"a", 2, {1e-9, 0.0, 2.5}}, {"b", 1, {1, 2, 3}}};
    testutil::TempDir dir("emb");
    auto back = load_embeddings(dir.file("e.jsonl", serialize_embeddings(recs)));
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t k = 0; k < recs.size(); ++k) {
        EXPECT_EQ(back[k].trace_id, recs[k].trace_id);
        EXPECT_EQ(back[k].step_index, recs[k].step_index);
        EXPECT_EQ(back[k].vector, recs[k].vector);
    }
    std::istringstream ragged(R"({"trace_id":"a","step_index":1,"vector":[1,2]}
{"trace_id":"a","step_index":2,"vector":[1]}
)");
    EXPECT_THROW(parse_embeddings(ragged), Error);
    EXPECT_THROW(load_embeddings("/nonexistent/e.jsonl"), Error);
}
