#pragma once

// Reasoning-trace data model and the JSONL ingestion/validation layer.
//
// On disk one trace is one JSON object per line. Token probabilities are
// normally stored as natural-log values under "token_logprobs"; plain
// probabilities under "token_probs" are accepted and written back under the
// same key so that load/write round trips are exact. Keys the toolkit does not
// know are kept in `extra` and written back verbatim.

#include <json.hpp>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "common.hpp"

namespace iftrack::trace {

using json = nlohmann::json;

inline constexpr double kMinProbability = 1e-300;
inline const double kMinLogProbability = std::log(kMinProbability);
inline constexpr double kTopkSumSlack = 1e-6;

enum class ReasoningType { none, deductive, inductive, abductive };

inline std::string to_string(ReasoningType t) {
    switch (t) {
        case ReasoningType::deductive: return "deductive";
        case ReasoningType::inductive: return "inductive";
        case ReasoningType::abductive: return "abductive";
        case ReasoningType::none: break;
    }
    return "none";
}

inline std::optional<ReasoningType> parse_reasoning_type(std::string_view s) {
    if (s == "deductive") return ReasoningType::deductive;
    if (s == "inductive") return ReasoningType::inductive;
    if (s == "abductive") return ReasoningType::abductive;
    if (s == "none") return ReasoningType::none;
    return std::nullopt;
}

// Staged error labels; "error" marks an erroneous step without a stage annotation.
inline const std::set<std::string, std::less<>> kErrorLabels = {
    "intuition_collapse", "metacognition_conflict", "rationale_error", "error"};

enum class ProbEncoding { logprob, prob };

struct TopkAlternative {
    std::string token;
    double logprob = 0.0;

    bool operator==(const TopkAlternative&) const = default;
};

struct Step {
    int index = 0;
    std::string text;
    // Raw per-token values as stored, interpreted through `encoding`.
    std::optional<std::vector<double>> token_values;
    ProbEncoding encoding = ProbEncoding::logprob;
    std::optional<std::vector<std::vector<TopkAlternative>>> topk_logprobs;
    std::optional<std::string> error_label;
    json extra = json::object();

    bool scored() const { return token_values.has_value() && !token_values->empty(); }

    std::vector<double> token_probs() const {
        std::vector<double> out;
        if (!token_values) return out;
        out.reserve(token_values->size());
        for (double v : *token_values) out.push_back(encoding == ProbEncoding::logprob ? std::exp(v) : v);
        return out;
    }

    std::vector<double> token_logprobs() const {
        std::vector<double> out;
        if (!token_values) return out;
        out.reserve(token_values->size());
        for (double v : *token_values) out.push_back(encoding == ProbEncoding::logprob ? v : std::log(v));
        return out;
    }

    void set_logprobs(std::vector<double> logprobs) {
        token_values = std::move(logprobs);
        encoding = ProbEncoding::logprob;
    }

    bool operator==(const Step&) const = default;
};

using CohortValue = std::variant<std::string, double>;

inline std::string to_string(const CohortValue& v) {
    if (const auto* s = std::get_if<std::string>(&v)) return *s;
    return format_double(std::get<double>(v));
}

struct Annotations {
    ReasoningType reasoning_type = ReasoningType::none;
    std::optional<std::vector<bool>> correctness;
    std::map<std::string, CohortValue> cohort;
    std::string source;
    json extra = json::object();

    bool operator==(const Annotations&) const = default;
};

struct Trace {
    std::string id;
    std::string question;
    std::vector<Step> steps;
    std::optional<std::string> answer;
    Annotations meta;
    json extra = json::object();

    std::size_t length() const { return steps.size(); }
    bool scored() const {
        return !steps.empty() && std::all_of(steps.begin(), steps.end(), [](const Step& s) { return s.scored(); });
    }

    bool operator==(const Trace&) const = default;
};

struct Violation {
    std::string field;
    int step_index = 0;  // 0 for trace-level rules
    std::string rule;

    std::string message() const {
        if (step_index > 0) return rule + " at " + std::to_string(step_index) + " (" + field + ")";
        return rule + " (" + field + ")";
    }
};

// ---------------------------------------------------------------------------
// Validation

inline std::vector<Violation> validate_trace(const Trace& t) {
    std::vector<Violation> out;
    if (t.id.empty()) out.push_back({"id", 0, "empty id"});
    if (t.steps.empty()) out.push_back({"steps", 0, "empty steps array"});

    for (std::size_t k = 0; k < t.steps.size(); ++k) {
        const Step& s = t.steps[k];
        const int expected = static_cast<int>(k) + 1;
        if (s.index != expected) out.push_back({"steps.index", s.index, "non-contiguous step index"});

        if (s.token_values) {
            if (s.token_values->empty()) out.push_back({"steps.token_logprobs", s.index, "empty token array"});
            for (double v : *s.token_values) {
                bool ok = s.encoding == ProbEncoding::logprob ? (std::isfinite(v) && v <= 0.0)
                                                              : (std::isfinite(v) && v > 0.0 && v <= 1.0);
                if (!ok) {
                    out.push_back({"steps.token_probs", s.index, "probability out of range"});
                    break;
                }
            }
        }
        if (s.topk_logprobs) {
            if (s.token_values && s.topk_logprobs->size() != s.token_values->size())
                out.push_back({"steps.topk_logprobs", s.index, "topk length differs from token count"});
            for (const auto& alts : *s.topk_logprobs) {
                double mass = 0.0;
                bool finite = true;
                for (const auto& a : alts) {
                    if (!std::isfinite(a.logprob) || a.logprob > 0.0) finite = false;
                    mass += std::exp(a.logprob);
                }
                if (!finite) {
                    out.push_back({"steps.topk_logprobs", s.index, "alternative probability out of range"});
                    break;
                }
                if (mass > 1.0 + kTopkSumSlack) {
                    out.push_back({"steps.topk_logprobs", s.index, "alternative probabilities sum above 1"});
                    break;
                }
            }
        }
        if (s.error_label && !kErrorLabels.contains(*s.error_label))
            out.push_back({"steps.error_label", s.index, "unknown error label '" + *s.error_label + "'"});
    }

    if (t.meta.correctness && t.meta.correctness->size() != t.steps.size())
        out.push_back({"meta.correctness", 0, "correctness length " + std::to_string(t.meta.correctness->size()) +
                                                   " differs from step count " + std::to_string(t.steps.size())});
    return out;
}

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline const json& require(const json& j, const char* key, json::value_t type, const char* what) {
    auto it = j.find(key);
    if (it == j.end()) throw Error(std::string("missing field '") + what + "'");
    bool ok = it->type() == type ||
              (type == json::value_t::number_float && it->is_number()) ||
              (type == json::value_t::number_integer && it->is_number_integer());
    if (!ok) throw Error(std::string("field '") + what + "' has wrong type");
    return *it;
}

inline json leftovers(const json& j, std::initializer_list<std::string_view> known) {
    json extra = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) extra[it.key()] = it.value();
    }
    return extra;
}

inline std::vector<double> number_array(const json& j, const char* what) {
    if (!j.is_array()) throw Error(std::string("field '") + what + "' must be an array");
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number()) throw Error(std::string("field '") + what + "' must contain numbers");
        out.push_back(v.get<double>());
    }
    return out;
}

}  // namespace detail

inline Step step_from_json(const json& j) {
    if (!j.is_object()) throw Error("step must be an object");
    Step s;
    s.index = static_cast<int>(detail::require(j, "index", json::value_t::number_integer, "steps.index").get<long long>());
    s.text = detail::require(j, "text", json::value_t::string, "steps.text").get<std::string>();
    if (auto it = j.find("token_logprobs"); it != j.end() && !it->is_null()) {
        s.token_values = detail::number_array(*it, "steps.token_logprobs");
        s.encoding = ProbEncoding::logprob;
    } else if (auto it2 = j.find("token_probs"); it2 != j.end() && !it2->is_null()) {
        s.token_values = detail::number_array(*it2, "steps.token_probs");
        s.encoding = ProbEncoding::prob;
    }
    if (auto it = j.find("topk_logprobs"); it != j.end() && !it->is_null()) {
        if (!it->is_array()) throw Error("field 'steps.topk_logprobs' must be an array");
        std::vector<std::vector<TopkAlternative>> topk;
        for (const auto& per_token : *it) {
            if (!per_token.is_array()) throw Error("field 'steps.topk_logprobs' must be nested arrays");
            std::vector<TopkAlternative> alts;
            for (const auto& pair : per_token) {
                if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_number())
                    throw Error("field 'steps.topk_logprobs' entries must be [token, logprob]");
                alts.push_back({pair[0].get<std::string>(), pair[1].get<double>()});
            }
            topk.push_back(std::move(alts));
        }
        s.topk_logprobs = std::move(topk);
    }
    if (auto it = j.find("error_label"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw Error("field 'steps.error_label' must be a string");
        s.error_label = it->get<std::string>();
    }
    s.extra = detail::leftovers(j, {"index", "text", "token_logprobs", "token_probs", "topk_logprobs", "error_label"});
    return s;
}

inline json step_to_json(const Step& s) {
    json j = s.extra;
    j["index"] = s.index;
    j["text"] = s.text;
    if (s.token_values) j[s.encoding == ProbEncoding::logprob ? "token_logprobs" : "token_probs"] = *s.token_values;
    if (s.topk_logprobs) {
        json topk = json::array();
        for (const auto& alts : *s.topk_logprobs) {
            json row = json::array();
            for (const auto& a : alts) row.push_back(json::array({a.token, a.logprob}));
            topk.push_back(std::move(row));
        }
        j["topk_logprobs"] = std::move(topk);
    }
    if (s.error_label) j["error_label"] = *s.error_label;
    return j;
}

inline Annotations meta_from_json(const json& j) {
    Annotations m;
    if (!j.is_object()) throw Error("field 'meta' must be an object");
    if (auto it = j.find("reasoning_type"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw Error("field 'meta.reasoning_type' must be a string");
        auto rt = parse_reasoning_type(it->get<std::string>());
        if (!rt) throw Error("unknown reasoning_type '" + it->get<std::string>() + "'");
        m.reasoning_type = *rt;
    }
    if (auto it = j.find("correctness"); it != j.end() && !it->is_null()) {
        if (!it->is_array()) throw Error("field 'meta.correctness' must be an array");
        std::vector<bool> c;
        for (const auto& b : *it) {
            if (!b.is_boolean()) throw Error("field 'meta.correctness' must contain booleans");
            c.push_back(b.get<bool>());
        }
        m.correctness = std::move(c);
    }
    if (auto it = j.find("cohort"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw Error("field 'meta.cohort' must be an object");
        for (auto kv = it->begin(); kv != it->end(); ++kv) {
            if (kv->is_string())
                m.cohort[kv.key()] = kv->get<std::string>();
            else if (kv->is_number())
                m.cohort[kv.key()] = kv->get<double>();
            else
                throw Error("cohort value for '" + kv.key() + "' must be a string or number");
        }
    }
    if (auto it = j.find("source"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw Error("field 'meta.source' must be a string");
        m.source = it->get<std::string>();
    }
    m.extra = detail::leftovers(j, {"reasoning_type", "correctness", "cohort", "source"});
    return m;
}

inline json meta_to_json(const Annotations& m) {
    json j = m.extra;
    if (m.reasoning_type != ReasoningType::none) j["reasoning_type"] = to_string(m.reasoning_type);
    if (m.correctness) {
        json c = json::array();
        for (bool b : *m.correctness) c.push_back(b);
        j["correctness"] = std::move(c);
    }
    if (!m.cohort.empty()) {
        json c = json::object();
        for (const auto& [k, v] : m.cohort) {
            if (const auto* s = std::get_if<std::string>(&v))
                c[k] = *s;
            else
                c[k] = std::get<double>(v);
        }
        j["cohort"] = std::move(c);
    }
    if (!m.source.empty()) j["source"] = m.source;
    return j;
}

inline Trace trace_from_json(const json& j) {
    if (!j.is_object()) throw Error("record must be a JSON object");
    Trace t;
    t.id = detail::require(j, "id", json::value_t::string, "id").get<std::string>();
    t.question = detail::require(j, "question", json::value_t::string, "question").get<std::string>();
    const json& steps = detail::require(j, "steps", json::value_t::array, "steps");
    for (const auto& s : steps) t.steps.push_back(step_from_json(s));
    if (auto it = j.find("answer"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw Error("field 'answer' must be a string");
        t.answer = it->get<std::string>();
    }
    if (auto it = j.find("meta"); it != j.end() && !it->is_null()) t.meta = meta_from_json(*it);
    t.extra = detail::leftovers(j, {"id", "question", "answer", "steps", "meta"});
    return t;
}

inline json trace_to_json(const Trace& t) {
    json j = t.extra;
    j["id"] = t.id;
    j["question"] = t.question;
    if (t.answer) j["answer"] = *t.answer;
    json steps = json::array();
    for (const auto& s : t.steps) steps.push_back(step_to_json(s));
    j["steps"] = std::move(steps);
    json meta = meta_to_json(t.meta);
    if (!meta.empty()) j["meta"] = std::move(meta);
    return j;
}

// ---------------------------------------------------------------------------
// Corpus I/O

enum class SchemaMode { strict, lenient };

struct LineIssue {
    std::size_t line = 0;
    std::string message;
};

struct LoadResult {
    std::vector<Trace> traces;
    std::vector<LineIssue> skipped;
    std::vector<std::string> warnings;
    std::size_t line_count = 0;
};

// Clamps probabilities below kMinProbability; returns the number clamped.
inline std::size_t clamp_tiny_probabilities(Trace& t) {
    std::size_t clamped = 0;
    for (auto& s : t.steps) {
        if (!s.token_values) continue;
        for (double& v : *s.token_values) {
            if (s.encoding == ProbEncoding::logprob && std::isfinite(v) && v < kMinLogProbability) {
                v = kMinLogProbability;
                ++clamped;
            } else if (s.encoding == ProbEncoding::prob && v > 0.0 && v < kMinProbability) {
                v = kMinProbability;
                ++clamped;
            }
        }
    }
    return clamped;
}

inline LoadResult parse_corpus(std::istream& in, SchemaMode mode) {
    LoadResult result;
    std::unordered_map<std::string, std::size_t> seen;
    std::string line;
    std::size_t lineno = 0;

    auto fail = [&](std::size_t at, const std::string& msg) {
        if (mode == SchemaMode::strict) throw Error("line " + std::to_string(at) + ": " + msg);
        result.skipped.push_back({at, msg});
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) {
            fail(lineno, "empty line");
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            fail(lineno, std::string("malformed JSON: ") + e.what());
            continue;
        }
        Trace t;
        try {
            t = trace_from_json(j);
        } catch (const Error& e) {
            fail(lineno, e.what());
            continue;
        }
        if (std::size_t n = clamp_tiny_probabilities(t); n > 0)
            result.warnings.push_back("line " + std::to_string(lineno) + ": clamped " + std::to_string(n) +
                                      " probabilities below 1e-300");
        auto violations = validate_trace(t);
        if (!violations.empty()) {
            fail(lineno, violations.front().message());
            continue;
        }
        if (auto it = seen.find(t.id); it != seen.end()) {
            fail(lineno, "duplicate id '" + t.id + "' (first seen on line " + std::to_string(it->second) + ")");
            continue;
        }
        seen.emplace(t.id, lineno);
        result.traces.push_back(std::move(t));
    }
    result.line_count = lineno;
    return result;
}

inline LoadResult load_corpus(const std::string& path, SchemaMode mode = SchemaMode::strict) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read corpus file " + path);
    return parse_corpus(in, mode);
}

inline std::string serialize_corpus(const std::vector<Trace>& traces) {
    std::string out;
    for (const auto& t : traces) {
        out += trace_to_json(t).dump();
        out += '\n';
    }
    return out;
}

inline void write_corpus(const std::string& path, const std::vector<Trace>& traces) {
    write_file(path, serialize_corpus(traces));
}

// ---------------------------------------------------------------------------
// Summary

struct CorpusSummary {
    std::size_t total = 0;
    std::map<std::string, std::size_t> reasoning_types;
    std::map<std::string, std::map<std::string, std::size_t>> cohort_values;
    std::map<std::size_t, std::size_t> step_histogram;
    std::size_t scored = 0;
};

inline CorpusSummary corpus_summary(const std::vector<Trace>& corpus) {
    if (corpus.empty()) throw Error("corpus_summary: empty corpus");
    CorpusSummary s;
    s.total = corpus.size();
    for (const auto& t : corpus) {
        ++s.reasoning_types[to_string(t.meta.reasoning_type)];
        for (const auto& [k, v] : t.meta.cohort) ++s.cohort_values[k][to_string(v)];
        ++s.step_histogram[t.steps.size()];
        if (t.scored()) ++s.scored;
    }
    return s;
}

inline json summary_to_json(const CorpusSummary& s) {
    json j;
    j["total"] = s.total;
    j["scored"] = s.scored;
    j["reasoning_types"] = s.reasoning_types;
    j["cohort_values"] = s.cohort_values;
    json hist = json::object();
    for (const auto& [len, n] : s.step_histogram) hist[std::to_string(len)] = n;
    j["step_histogram"] = std::move(hist);
    return j;
}

}  // namespace iftrack::trace
