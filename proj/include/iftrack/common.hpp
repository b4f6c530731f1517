#pragma once

// Shared plumbing: error type, number formatting, CSV helpers, hashing.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace iftrack {

inline constexpr std::string_view kToolkitVersion = "0.3.0";

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::array<char, 32> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (ec != std::errc{}) throw Error("format_double: conversion failed");
    return std::string(buf.data(), end);
}

inline double parse_double(std::string_view s) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw Error("parse_double: invalid number '" + std::string(s) + "'");
    return v;
}

inline long long parse_int(std::string_view s) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw Error("parse_int: invalid integer '" + std::string(s) + "'");
    return v;
}

// Minimal CSV: comma separated, fields quoted only when they contain ',', '"' or newlines.
namespace csv {

inline std::string escape(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::string join(const std::vector<std::string>& fields) {
    std::string line;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) line += ',';
        line += escape(fields[i]);
    }
    return line;
}

inline std::vector<std::string> split(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw Error("csv: missing column '" + std::string(name) + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline Table read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw Error("empty csv " + path);
    t.header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = split(line);
        if (row.size() != t.header.size())
            throw Error("csv " + path + ": row width " + std::to_string(row.size()) + " != header width " +
                        std::to_string(t.header.size()));
        t.rows.push_back(std::move(row));
    }
    return t;
}

}  // namespace csv

inline std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out += kHex[md[i] >> 4];
        out += kHex[md[i] & 0xF];
    }
    return out;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("write failed for " + path);
}

// Linear-interpolated quantile (type 7) of an unsorted sample.
inline double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw Error("quantile of empty sample");
    std::sort(values.begin(), values.end());
    double pos = q * static_cast<double>(values.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = std::min(lo + 1, values.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace iftrack
