#pragma once

// Token log-probabilities for unscored traces: offline score merging and
// teacher-forced scoring against a completions-style HTTP endpoint that echoes
// prompt log-probabilities.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "common.hpp"
#include "trace_model.hpp"

namespace iftrack::gateway {

using json = nlohmann::json;
using trace::Trace;

inline constexpr const char* kApiKeyEnv = "IFTRACK_API_KEY";

struct ScoringConfig {
    std::string endpoint_url;
    std::string model_name;
    int max_parallel_requests = 4;
    int retry_limit = 3;
    double timeout_seconds = 60.0;
    std::string separator = "\n";
    std::string cache_dir;          // empty disables the cache
    double backoff_base_seconds = 0.5;
    std::optional<std::string> api_key;  // falls back to the environment

    void validate() const {
        if (max_parallel_requests < 1) throw Error("scoring config: max_parallel_requests must be >= 1");
        if (retry_limit < 0) throw Error("scoring config: retry_limit must be >= 0");
        if (!(timeout_seconds > 0.0)) throw Error("scoring config: timeout must be positive");
        if (model_name.empty()) throw Error("scoring config: model_name is required");
        if (backoff_base_seconds < 0.0) throw Error("scoring config: backoff_base must be >= 0");
    }
};

inline ScoringConfig scoring_config_from_json(const json& j) {
    ScoringConfig c;
    c.endpoint_url = j.value("endpoint_url", "");
    c.model_name = j.value("model_name", "");
    c.max_parallel_requests = j.value("max_parallel_requests", c.max_parallel_requests);
    c.retry_limit = j.value("retry_limit", c.retry_limit);
    c.timeout_seconds = j.value("timeout", c.timeout_seconds);
    c.separator = j.value("separator", c.separator);
    c.cache_dir = j.value("cache_dir", "");
    c.backoff_base_seconds = j.value("backoff_base", c.backoff_base_seconds);
    c.validate();
    return c;
}

struct ScoredSpan {
    int step_index = 0;
    std::vector<double> token_logprobs;

    std::size_t token_count() const { return token_logprobs.size(); }
    bool operator==(const ScoredSpan&) const = default;
};

// ---------------------------------------------------------------------------
// Offline scores

inline std::vector<ScoredSpan> extract_scores(const Trace& t) {
    std::vector<ScoredSpan> out;
    for (const auto& s : t.steps) {
        if (!s.scored()) throw Error("extract_scores: step " + std::to_string(s.index) + " of '" + t.id + "' is unscored");
        out.push_back({s.index, s.token_logprobs()});
    }
    return out;
}

inline Trace merge_offline_scores(Trace t, std::span<const ScoredSpan> spans) {
    std::map<int, const ScoredSpan*> by_index;
    std::set<int> steps;
    for (const auto& s : t.steps) steps.insert(s.index);
    for (const auto& sp : spans) {
        if (!by_index.emplace(sp.step_index, &sp).second)
            throw Error("duplicate span for step " + std::to_string(sp.step_index));
        if (!steps.contains(sp.step_index)) throw Error("extra span for step " + std::to_string(sp.step_index));
        if (sp.token_logprobs.empty()) throw Error("empty logprob array for step " + std::to_string(sp.step_index));
        for (double lp : sp.token_logprobs)
            if (!(lp <= 0.0)) throw Error("log-probability " + format_double(lp) + " > 0 for step " + std::to_string(sp.step_index));
    }
    for (auto& s : t.steps) {
        auto it = by_index.find(s.index);
        if (it == by_index.end()) throw Error("missing span for step " + std::to_string(s.index));
        s.set_logprobs(it->second->token_logprobs);
    }
    return t;
}

// Offline score file: one JSON object per line,
// {"trace_id": str, "step_index": int, "token_logprobs": [float, ...]}.
inline std::map<std::string, std::vector<ScoredSpan>> parse_offline_scores(std::istream& in) {
    std::map<std::string, std::vector<ScoredSpan>> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = json::parse(line);
            ScoredSpan sp{j.at("step_index").get<int>(), j.at("token_logprobs").get<std::vector<double>>()};
            out[j.at("trace_id").get<std::string>()].push_back(std::move(sp));
        } catch (const json::exception& e) {
            throw Error("scores line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

inline std::string serialize_scores(std::span<const Trace> traces) {
    std::string out;
    for (const auto& t : traces)
        for (const auto& sp : extract_scores(t)) {
            out += json{{"trace_id", t.id}, {"step_index", sp.step_index}, {"token_logprobs", sp.token_logprobs}}.dump();
            out += '\n';
        }
    return out;
}

// ---------------------------------------------------------------------------
// Scoring protocol

// Sends one request body, returns the parsed response body. Throws
// TransportError for failures worth retrying.
class TransportError : public Error {
public:
    using Error::Error;
};

using Transport = std::function<json(const json& request)>;

inline std::string resolve_api_key(const ScoringConfig& cfg) {
    if (cfg.api_key) return *cfg.api_key;
    if (const char* v = std::getenv(kApiKeyEnv)) return v;
    return {};
}

// POSTs JSON to endpoint_url (http or https).
inline Transport http_transport(const ScoringConfig& cfg) {
    const auto& url = cfg.endpoint_url;
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error("scoring config: endpoint_url must include a scheme");
    auto path_start = url.find('/', scheme_end + 3);
    std::string base = path_start == std::string::npos ? url : url.substr(0, path_start);
    std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
    std::string key = resolve_api_key(cfg);
    auto timeout = std::chrono::duration<double>(cfg.timeout_seconds);
    return [base, path, key, timeout](const json& request) -> json {
        httplib::Client client(base);
        client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
        client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
        httplib::Headers headers;
        if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
        auto res = client.Post(path, headers, request.dump(), "application/json");
        if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500)
            throw TransportError("endpoint returned HTTP " + std::to_string(res->status));
        if (res->status != 200) throw Error("endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body);
        try {
            return json::parse(res->body);
        } catch (const json::exception& e) {
            throw Error(std::string("malformed endpoint response: ") + e.what());
        }
    };
}

// On-disk response cache: <cache_dir>/<sha256(model)[:16]>/<sha256(prompt)>.json.
class ResponseCache {
public:
    explicit ResponseCache(std::string dir) : dir_(std::move(dir)) {}

    bool enabled() const { return !dir_.empty(); }

    std::filesystem::path path_for(const std::string& model, const std::string& prompt) const {
        return std::filesystem::path(dir_) / sha256_hex(model).substr(0, 16) / (sha256_hex(prompt) + ".json");
    }

    std::optional<json> get(const std::string& model, const std::string& prompt) const {
        if (!enabled()) return std::nullopt;
        auto p = path_for(model, prompt);
        std::error_code ec;
        if (!std::filesystem::exists(p, ec)) return std::nullopt;
        try {
            auto j = json::parse(read_file(p.string()));
            if (j.value("model", "") != model || j.value("prompt", "") != prompt) return std::nullopt;
            return j.at("response");
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }

    void put(const std::string& model, const std::string& prompt, const json& response) {
        if (!enabled()) return;
        std::lock_guard lock(mutex_);
        auto p = path_for(model, prompt);
        std::filesystem::create_directories(p.parent_path());
        auto tmp = p;
        tmp += ".tmp";
        write_file(tmp.string(), json{{"model", model}, {"prompt", prompt}, {"response", response}}.dump());
        std::filesystem::rename(tmp, p);
    }

private:
    std::string dir_;
    std::mutex mutex_;
};

struct StepPrompt {
    std::string prompt;
    std::size_t step_start = 0;  // character offset where the step's text begins
};

// Context for step t is question + sep + step_1 + ... + sep, followed by step t.
inline std::vector<StepPrompt> build_prompts(const Trace& t, const std::string& separator) {
    std::vector<StepPrompt> out;
    std::string context = t.question;
    for (const auto& s : t.steps) {
        context += separator;
        StepPrompt sp{context + s.text, context.size()};
        out.push_back(sp);
        context += s.text;
    }
    return out;
}

struct Alignment {
    std::vector<double> logprobs;
    std::size_t straddling = 0;  // tokens crossing the step boundary, assigned to the step
};

// Picks the tokens of the step starting at `step_start` from an echoed
// response. Offsets come from logprobs.text_offset when present, otherwise
// from cumulative token lengths; the echoed tokens must reconstruct the prompt.
inline Alignment align_step(const json& response, const std::string& prompt, std::size_t step_start) {
    const json* lp = nullptr;
    try {
        lp = &response.at("choices").at(0).at("logprobs");
    } catch (const json::exception&) {
        throw Error("response lacks choices[0].logprobs");
    }
    if (!lp->contains("tokens") || !lp->contains("token_logprobs"))
        throw Error("response lacks logprobs.tokens or logprobs.token_logprobs");
    const auto& tokens = lp->at("tokens");
    const auto& values = lp->at("token_logprobs");
    if (!tokens.is_array() || !values.is_array() || tokens.size() != values.size())
        throw Error("logprobs.tokens and logprobs.token_logprobs differ in length");
    if (tokens.empty()) throw Error("empty logprob array");

    std::string echoed;
    std::vector<std::size_t> starts;
    for (const auto& tok : tokens) {
        starts.push_back(echoed.size());
        echoed += tok.get<std::string>();
    }
    if (echoed.compare(0, prompt.size(), prompt) != 0 || echoed.size() < prompt.size())
        throw Error("alignment error: echoed tokens do not reconstruct the prompt");
    if (auto it = lp->find("text_offset"); it != lp->end() && it->is_array()) {
        if (it->size() != tokens.size()) throw Error("logprobs.text_offset length mismatch");
        for (std::size_t k = 0; k < tokens.size(); ++k)
            if ((*it)[k].get<std::size_t>() != starts[k])
                throw Error("alignment error: text_offset disagrees with token lengths at token " + std::to_string(k));
    }

    Alignment a;
    for (std::size_t k = 0; k < tokens.size(); ++k) {
        std::size_t begin = starts[k];
        std::size_t end = begin + tokens[k].get_ref<const std::string&>().size();
        if (begin >= prompt.size()) break;  // generated continuation, if any
        if (end <= step_start) continue;
        if (begin < step_start) ++a.straddling;
        const auto& v = values[k];
        if (v.is_null()) {
            if (k != 0) throw Error("null log-probability at token " + std::to_string(k) + " (only the first token may be null)");
            a.logprobs.push_back(0.0);
            continue;
        }
        double x = v.get<double>();
        if (!(x <= 0.0)) throw Error("log-probability " + format_double(x) + " > 0 at token " + std::to_string(k));
        a.logprobs.push_back(x);
    }
    if (a.logprobs.empty()) throw Error("no tokens fall inside the step");
    return a;
}

struct ScoreOutcome {
    Trace trace;
    std::optional<std::string> error;  // trace left unscored when set
    std::size_t requests = 0;
    std::size_t cache_hits = 0;
};

class Scorer {
public:
    Scorer(ScoringConfig cfg, Transport transport)
        : cfg_(std::move(cfg)), transport_(std::move(transport)), cache_(cfg_.cache_dir) {
        cfg_.validate();
    }

    const ScoringConfig& config() const { return cfg_; }

    json request_for(const std::string& prompt) const {
        return json{{"model", cfg_.model_name}, {"prompt", prompt}, {"max_tokens", 0}, {"echo", true}, {"logprobs", 0}};
    }

    // Fetches the response for one prompt, with cache and retries.
    json fetch(const std::string& prompt, std::size_t& requests, std::size_t& hits) {
        if (auto cached = cache_.get(cfg_.model_name, prompt)) {
            ++hits;
            return *cached;
        }
        std::string last;
        for (int attempt = 0; attempt <= cfg_.retry_limit; ++attempt) {
            if (attempt > 0) {
                auto wait = cfg_.backoff_base_seconds * std::pow(2.0, attempt - 1);
                std::this_thread::sleep_for(std::chrono::duration<double>(wait));
            }
            ++requests;
            try {
                json response = transport_(request_for(prompt));
                cache_.put(cfg_.model_name, prompt, response);
                return response;
            } catch (const TransportError& e) {
                last = e.what();
            }
        }
        throw Error("endpoint failure after " + std::to_string(cfg_.retry_limit + 1) + " attempts: " + last);
    }

    ScoreOutcome score_trace(const Trace& t) {
        ScoreOutcome out{t, std::nullopt, 0, 0};
        try {
            if (t.steps.empty()) throw Error("trace has no steps");
            auto prompts = build_prompts(t, cfg_.separator);
            std::vector<std::vector<double>> logprobs;
            std::size_t straddling = 0;
            for (std::size_t k = 0; k < prompts.size(); ++k) {
                json response = fetch(prompts[k].prompt, out.requests, out.cache_hits);
                try {
                    auto a = align_step(response, prompts[k].prompt, prompts[k].step_start);
                    straddling += a.straddling;
                    logprobs.push_back(std::move(a.logprobs));
                } catch (const Error& e) {
                    throw Error("step " + std::to_string(t.steps[k].index) + ": " + e.what());
                }
            }
            for (std::size_t k = 0; k < logprobs.size(); ++k) out.trace.steps[k].set_logprobs(std::move(logprobs[k]));
            out.trace.meta.extra["scoring"] = json{{"model", cfg_.model_name},
                                                   {"separator", cfg_.separator},
                                                   {"boundary_tokens", straddling},
                                                   {"protocol", "teacher_forced_echo"}};
        } catch (const std::exception& e) {
            out.trace = t;
            out.error = std::string("trace '") + t.id + "': " + e.what();
        }
        return out;
    }

    // Scores traces with at most max_parallel_requests traces in flight; each
    // trace's steps are requested in order. Output order matches input order.
    std::vector<ScoreOutcome> score_corpus(std::span<const Trace> traces) {
        std::vector<ScoreOutcome> out(traces.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next++; i < traces.size(); i = next++) out[i] = score_trace(traces[i]);
        };
        const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg_.max_parallel_requests), traces.size());
        std::vector<std::jthread> pool;
        for (std::size_t k = 1; k < n; ++k) pool.emplace_back(worker);
        worker();
        return out;
    }

private:
    ScoringConfig cfg_;
    Transport transport_;
    ResponseCache cache_;
};

}  // namespace iftrack::gateway
