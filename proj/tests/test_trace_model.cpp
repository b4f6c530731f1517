#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "iftrack/trace_model.hpp"
#include "test_util.hpp"

using namespace iftrack;
using namespace iftrack::trace;

namespace {

const std::string kMinimal = R"({"id":"a","question":"q","steps":[{"index":1,"text":"s","token_probs":[1.0]}]})";

LoadResult parse(const std::string& text, SchemaMode mode = SchemaMode::strict) {
    std::istringstream in(text);
    return parse_corpus(in, mode);
}

Trace make(const std::string& id, int steps, ReasoningType rt = ReasoningType::none) {
    Trace t;
    t.id = id;
    t.question = "q";
    for (int k = 1; k <= steps; ++k) {
        Step s;
        s.index = k;
        s.text = "s" + std::to_string(k);
        s.set_logprobs({-0.5, -0.1});
        t.steps.push_back(s);
    }
    t.meta.reasoning_type = rt;
    return t;
}

std::string expect_error(const std::string& text) {
    try {
        parse(text);
    } catch (const Error& e) {
        return e.what();
    }
    ADD_FAILURE() << "no error for: " << text;
    return {};
}

}  // namespace

TEST(LoadCorpus, MinimalRecord) {
    auto r = parse(kMinimal + "\n");
    ASSERT_EQ(r.traces.size(), 1u);
    EXPECT_EQ(r.traces[0].length(), 1u);
    EXPECT_EQ(r.traces[0].steps[0].token_probs(), std::vector<double>{1.0});
    EXPECT_TRUE(r.traces[0].scored());
}

TEST(LoadCorpus, ZeroProbabilityRejectedInStrictMode) {
    auto msg = expect_error(R"({"id":"a","question":"q","steps":[{"index":1,"text":"s","token_probs":[0.0]}]})");
    EXPECT_NE(msg.find("probability out of range"), std::string::npos) << msg;
}

TEST(LoadCorpus, DuplicateIdNamesLine2) {
    auto msg = expect_error(kMinimal + "\n" + kMinimal + "\n");
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("duplicate id"), std::string::npos) << msg;
}

TEST(LoadCorpus, MalformedJsonAndEmptyStepsAreErrors) {
    EXPECT_NE(expect_error("{not json}\n").find("malformed JSON"), std::string::npos);
    EXPECT_NE(expect_error(R"({"id":"a","question":"q","steps":[]})").find("empty steps array"), std::string::npos);
}

TEST(LoadCorpus, UnreadableFile) { EXPECT_THROW(load_corpus("/nonexistent/dir/corpus.jsonl"), Error); }

TEST(LoadCorpus, LenientModeSkipsAndCounts) {
    std::string text = kMinimal + "\n" + "garbage\n" + kMinimal + "\n" +
                       R"({"id":"b","question":"q","steps":[{"index":2,"text":"s"}]})" + "\n" +
                       R"({"id":"c","question":"q","steps":[{"index":1,"text":"s","token_logprobs":[-0.2]}]})" + "\n";
    auto r = parse(text, SchemaMode::lenient);
    EXPECT_EQ(r.traces.size(), 2u);
    ASSERT_EQ(r.skipped.size(), 3u);
    EXPECT_EQ(r.skipped[0].line, 2u);
    EXPECT_EQ(r.skipped[1].line, 3u);
    EXPECT_EQ(r.skipped[2].line, 4u);
    EXPECT_EQ(r.skipped.size() + r.traces.size(), r.line_count);
}

TEST(LoadCorpus, TinyProbabilitiesClampedWithWarning) {
    auto r = parse(R"({"id":"a","question":"q","steps":[{"index":1,"text":"s","token_logprobs":[-800.0, -0.1]}]})");
    ASSERT_EQ(r.warnings.size(), 1u);
    EXPECT_DOUBLE_EQ(r.traces[0].steps[0].token_logprobs()[0], kMinLogProbability);
    auto p = parse(R"({"id":"a","question":"q","steps":[{"index":1,"text":"s","token_probs":[1e-320]}]})");
    EXPECT_DOUBLE_EQ(p.traces[0].steps[0].token_probs()[0], kMinProbability);
}

TEST(LoadCorpus, PositiveLogprobRejected) {
    EXPECT_NE(expect_error(R"({"id":"a","question":"q","steps":[{"index":1,"text":"s","token_logprobs":[0.1]}]})")
                  .find("probability out of range"),
              std::string::npos);
}

TEST(ValidateTrace, WellFormedIsClean) { EXPECT_TRUE(validate_trace(make("a", 3)).empty()); }

TEST(ValidateTrace, IndexGap) {
    auto t = make("a", 2);
    t.steps[1].index = 3;
    auto v = validate_trace(t);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].step_index, 3);
    EXPECT_EQ(v[0].rule + " at " + std::to_string(v[0].step_index), "non-contiguous step index at 3");
    EXPECT_EQ(v[0].field, "steps.index");
}

TEST(ValidateTrace, CorrectnessLength) {
    auto t = make("a", 3);
    t.meta.correctness = std::vector<bool>{true, false};
    auto v = validate_trace(t);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].field, "meta.correctness");
}

TEST(ValidateTrace, TopkMassAboveOne) {
    auto t = make("a", 1);
    t.steps[0].set_logprobs({-0.1});
    t.steps[0].topk_logprobs = std::vector<std::vector<TopkAlternative>>{{{"x", std::log(0.7)}, {"y", std::log(0.31)}}};
    auto v = validate_trace(t);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].rule, "alternative probabilities sum above 1");
    t.steps[0].topk_logprobs = std::vector<std::vector<TopkAlternative>>{{{"x", std::log(0.7)}, {"y", std::log(0.3)}}};
    EXPECT_TRUE(validate_trace(t).empty());
}

TEST(ValidateTrace, UnknownErrorLabelAndEmptyId) {
    auto t = make("", 1);
    t.steps[0].error_label = "bogus";
    EXPECT_EQ(validate_trace(t).size(), 2u);
}

TEST(CorpusSummary, ReasoningTypeCounts) {
    std::vector<Trace> c = {make("a", 3, ReasoningType::deductive), make("b", 3, ReasoningType::deductive),
                            make("c", 3, ReasoningType::inductive)};
    auto s = corpus_summary(c);
    EXPECT_EQ(s.total, 3u);
    EXPECT_EQ(s.reasoning_types.at("deductive"), 2u);
    EXPECT_EQ(s.reasoning_types.at("inductive"), 1u);
    EXPECT_EQ(s.step_histogram.size(), 1u);
    EXPECT_EQ(s.step_histogram.at(3), 3u);
}

TEST(CorpusSummary, MixedCohortKeys) {
    std::vector<Trace> c = {make("a", 2), make("b", 3), make("c", 4), make("d", 4)};
    c[0].meta.cohort["education"] = std::string("phd");
    c[1].meta.cohort["education"] = std::string("master");
    c[1].meta.cohort["openness"] = 5.5;
    c[2].meta.cohort["openness"] = 5.5;
    auto s = corpus_summary(c);
    std::size_t edu = 0, open = 0, hist = 0;
    for (const auto& [v, n] : s.cohort_values.at("education")) edu += n;
    for (const auto& [v, n] : s.cohort_values.at("openness")) open += n;
    for (const auto& [len, n] : s.step_histogram) hist += n;
    EXPECT_EQ(edu, 2u);
    EXPECT_EQ(open, 2u);
    EXPECT_EQ(s.cohort_values.at("openness").at("5.5"), 2u);
    EXPECT_EQ(hist, c.size());
}

TEST(CorpusSummary, EmptyCorpusIsError) { EXPECT_THROW(corpus_summary({}), Error); }

TEST(RoundTrip, WriteThenLoadIsIdentity) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> lp(-12.0, 0.0);
    std::vector<Trace> corpus;
    for (int i = 0; i < 50; ++i) {
        Trace t = make("t" + std::to_string(i), 1 + i % 6, static_cast<ReasoningType>(i % 4));
        for (auto& s : t.steps) {
            std::vector<double> v(1 + rng() % 5);
            for (double& x : v) x = lp(rng);
            s.set_logprobs(v);
            if (i % 7 == 0) s.error_label = "rationale_error";
            if (i % 5 == 0) s.extra["custom"] = i;
        }
        if (i % 3 == 0) {
            std::vector<bool> c(t.steps.size(), true);
            c.back() = false;
            t.meta.correctness = c;
        }
        if (i % 2) t.meta.cohort["openness"] = 0.25 * i;
        t.meta.cohort["phase"] = std::string(i % 2 ? "pre_llm" : "post_llm");
        t.meta.source = "src";
        t.meta.extra["annotator"] = "x";
        t.extra["future_field"] = json::array({1, 2});
        if (i % 4) t.answer = "ans";
        corpus.push_back(t);
    }
    testutil::TempDir dir("rt");
    auto path = (dir.path() / "c.jsonl").string();
    write_corpus(path, corpus);
    auto back = load_corpus(path);
    ASSERT_EQ(back.traces.size(), corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) EXPECT_EQ(back.traces[i], corpus[i]) << corpus[i].id;
    EXPECT_EQ(serialize_corpus(back.traces), serialize_corpus(corpus));
}

TEST(RoundTrip, UnknownKeysPreserved) {
    std::string line =
        R"({"id":"a","question":"q","steps":[{"index":1,"text":"s","token_logprobs":[-0.1],"lang":"en"}],"meta":{"cohort":{"k":1.5},"rater":3},"x":{"y":1}})";
    auto r = parse(line);
    auto out = json::parse(serialize_corpus(r.traces));
    EXPECT_EQ(out, json::parse(line));
}
