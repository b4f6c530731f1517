#pragma once

// Deterministic SVG figures: quiver maps, heatmaps with colour bars, and
// trajectory overlays with mean ribbons. Coordinates are printed with fixed
// precision so identical inputs give identical bytes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "analysis.hpp"
#include "baselines.hpp"
#include "common.hpp"
#include "flow_numerics.hpp"
#include "infodyn.hpp"

namespace iftrack::svg {

struct RenderResult {
    std::string svg;
    std::size_t clipped = 0;  // points or arrows clamped into the plot area
};

inline std::string fmt(double v, int decimals = 2) {
    if (!std::isfinite(v)) throw Error("svg: non-finite coordinate");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s(buf);
    if (s == "-0.00" || s == "-0.0" || s == "-0") s.erase(0, 1);
    return s;
}

inline std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    std::string s(buf);
    if (s == "-0") s = "0";
    return s;
}

inline std::string escape_xml(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// Maps data coordinates [x0,x1]x[y0,y1] onto a square plot area; y grows upward.
struct Frame {
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    double left = 60, top = 30, size = 400;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * size; }
    double py(double y) const { return top + size - (y - y0) / (y1 - y0) * size; }
    bool inside(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct Document {
    double width = 0, height = 0;
    std::string body;

    void add(const std::string& s) {
        body += s;
        body += '\n';
    }

    std::string finish() const {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width, 0) + "\" height=\"" + fmt(height, 0) +
               "\" viewBox=\"0 0 " + fmt(width, 0) + " " + fmt(height, 0) + "\">\n" + body + "</svg>\n";
    }
};

inline void axes(Document& doc, const Frame& f, const std::string& xlabel, const std::string& ylabel,
                 const std::string& title) {
    doc.add("<rect class=\"frame\" x=\"" + fmt(f.left) + "\" y=\"" + fmt(f.top) + "\" width=\"" + fmt(f.size) +
            "\" height=\"" + fmt(f.size) + "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>");
    for (int k = 0; k <= 4; ++k) {
        double xv = f.x0 + (f.x1 - f.x0) * k / 4.0;
        double yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
        doc.add("<text class=\"tick\" x=\"" + fmt(f.px(xv)) + "\" y=\"" + fmt(f.top + f.size + 16) +
                "\" font-size=\"10\" text-anchor=\"middle\">" + tick_label(xv) + "</text>");
        doc.add("<text class=\"tick\" x=\"" + fmt(f.left - 6) + "\" y=\"" + fmt(f.py(yv) + 3) +
                "\" font-size=\"10\" text-anchor=\"end\">" + tick_label(yv) + "</text>");
    }
    doc.add("<text class=\"label\" x=\"" + fmt(f.left + f.size / 2) + "\" y=\"" + fmt(f.top + f.size + 34) +
            "\" font-size=\"12\" text-anchor=\"middle\">" + escape_xml(xlabel) + "</text>");
    doc.add("<text class=\"label\" x=\"" + fmt(16) + "\" y=\"" + fmt(f.top + f.size / 2) +
            "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 " + fmt(f.top + f.size / 2) + ")\">" +
            escape_xml(ylabel) + "</text>");
    if (!title.empty())
        doc.add("<text class=\"title\" x=\"" + fmt(f.left + f.size / 2) + "\" y=\"" + fmt(f.top - 10) +
                "\" font-size=\"13\" text-anchor=\"middle\">" + escape_xml(title) + "</text>");
}

// ---------------------------------------------------------------------------
// Colour

enum class Palette { rdbu, puor, viridis, greys };

inline std::string to_string(Palette p) {
    switch (p) {
        case Palette::rdbu: return "rdbu";
        case Palette::puor: return "puor";
        case Palette::viridis: return "viridis";
        case Palette::greys: return "greys";
    }
    return "rdbu";
}

inline Palette parse_palette(std::string_view s) {
    if (s == "rdbu") return Palette::rdbu;
    if (s == "puor") return Palette::puor;
    if (s == "viridis") return Palette::viridis;
    if (s == "greys") return Palette::greys;
    throw Error("unknown palette '" + std::string(s) + "' (expected rdbu, puor, viridis or greys)");
}

using Rgb = std::array<double, 3>;

inline std::string hex(const Rgb& c) {
    char buf[8];
    auto chan = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", chan(c[0]), chan(c[1]), chan(c[2]));
    return buf;
}

// Piecewise-linear colour map over t in [0, 1].
inline Rgb palette_color(Palette p, double t) {
    static const std::vector<Rgb> rdbu = {
        {0.019608, 0.188235, 0.380392}, {0.262745, 0.576471, 0.764706}, {0.968627, 0.968627, 0.968627},
        {0.839216, 0.376471, 0.301961}, {0.403922, 0.0, 0.121569}};
    static const std::vector<Rgb> puor = {
        {0.176471, 0.0, 0.294118}, {0.501961, 0.450980, 0.674510}, {0.968627, 0.968627, 0.968627},
        {0.878431, 0.509804, 0.078431}, {0.498039, 0.231373, 0.031373}};
    static const std::vector<Rgb> viridis = {{0.267004, 0.004874, 0.329415},
                                             {0.229739, 0.322361, 0.545706},
                                             {0.127568, 0.566949, 0.550556},
                                             {0.369214, 0.788888, 0.382914},
                                             {0.993248, 0.906157, 0.143936}};
    static const std::vector<Rgb> greys = {{1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}};
    const auto& stops = p == Palette::rdbu ? rdbu : p == Palette::puor ? puor : p == Palette::viridis ? viridis : greys;
    t = std::clamp(t, 0.0, 1.0);
    double pos = t * static_cast<double>(stops.size() - 1);
    auto k = std::min(static_cast<std::size_t>(pos), stops.size() - 2);
    double w = pos - static_cast<double>(k);
    Rgb c;
    for (int ch = 0; ch < 3; ++ch) c[ch] = stops[k][ch] * (1.0 - w) + stops[k + 1][ch] * w;
    return c;
}

// ---------------------------------------------------------------------------
// Quiver

struct QuiverStyle {
    std::string title = "information flow";
    std::optional<double> reference_speed;  // speed drawn at full cell length; default: max cell speed
    double max_length_fraction = 0.9;       // of a cell's smaller side
    flow::CellEstimate estimate = flow::CellEstimate::mean;
    std::string color = "#1f4e79";
};

inline RenderResult render_quiver(const flow::FlowField& field, const QuiverStyle& style = {}) {
    const auto& g = field.grid();
    if (field.non_empty_cells() == 0) throw Error("render_quiver: all cells are empty");
    Frame f;
    Document doc{f.left + f.size + 30, f.top + f.size + 50, {}};
    axes(doc, f, "uncertainty u", "effort e", style.title);

    double ref = 0.0;
    if (style.reference_speed) {
        ref = *style.reference_speed;
        if (!(ref > 0.0)) throw Error("render_quiver: reference speed must be positive");
    } else {
        for (int j = 0; j < g.ny(); ++j)
            for (int i = 0; i < g.nx(); ++i)
                if (!field.empty(i, j)) {
                    auto [a, b] = field.velocity(i, j, style.estimate);
                    ref = std::max(ref, std::hypot(a, b));
                }
    }
    const double cell_px = std::min(f.size / g.nx(), f.size / g.ny());
    const double full = style.max_length_fraction * cell_px;
    RenderResult out;
    doc.add("<g class=\"quiver\" stroke=\"" + style.color + "\" fill=\"none\" stroke-width=\"1.2\">");
    for (int j = 0; j < g.ny(); ++j) {
        for (int i = 0; i < g.nx(); ++i) {
            if (field.empty(i, j)) continue;
            auto [v1, v2] = field.velocity(i, j, style.estimate);
            double speed = std::hypot(v1, v2);
            double cx = f.px(g.u_center(i)), cy = f.py(g.e_center(j));
            if (speed == 0.0 || ref == 0.0) {
                doc.add("<circle class=\"dot\" cx=\"" + fmt(cx) + "\" cy=\"" + fmt(cy) + "\" r=\"1.5\" fill=\"" +
                        style.color + "\" stroke=\"none\"/>");
                continue;
            }
            double ratio = speed / ref;
            if (ratio > 1.0) {
                ratio = 1.0;
                ++out.clipped;
            }
            double len = full * ratio;
            double dx = v1 / speed, dy = -v2 / speed;  // screen y points down
            double x0 = cx - 0.5 * len * dx, y0 = cy - 0.5 * len * dy;
            double x1 = cx + 0.5 * len * dx, y1 = cy + 0.5 * len * dy;
            double head = std::max(2.0, 0.3 * len);
            double hx = -dx * head, hy = -dy * head;
            constexpr double c30 = 0.866025403784438647, s30 = 0.5;
            double ax = x1 + c30 * hx - s30 * hy, ay = y1 + s30 * hx + c30 * hy;
            double bx = x1 + c30 * hx + s30 * hy, by = y1 - s30 * hx + c30 * hy;
            doc.add("<path class=\"arrow\" d=\"M" + fmt(x0) + " " + fmt(y0) + " L" + fmt(x1) + " " + fmt(y1) + " M" +
                    fmt(ax) + " " + fmt(ay) + " L" + fmt(x1) + " " + fmt(y1) + " L" + fmt(bx) + " " + fmt(by) + "\"/>");
        }
    }
    doc.add("</g>");
    out.svg = doc.finish();
    return out;
}

// ---------------------------------------------------------------------------
// Heatmap

struct HeatmapData {
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    int nx = 0, ny = 0;
    std::vector<double> values;  // row-major in y
    std::vector<char> defined;
    bool symmetric = false;      // colour scale centred on 0
    std::string xlabel = "u";
    std::string ylabel = "e";
    std::string legend;

    double at(int i, int j) const { return values[static_cast<std::size_t>(j) * nx + i]; }
    bool is_defined(int i, int j) const { return defined[static_cast<std::size_t>(j) * nx + i] != 0; }
};

inline HeatmapData heatmap_from_divergence(const flow::DivergenceMap& m) {
    HeatmapData h;
    h.nx = m.grid.nx();
    h.ny = m.grid.ny();
    h.values = m.values;
    h.defined = m.defined;
    h.symmetric = true;
    h.xlabel = "uncertainty u";
    h.ylabel = "effort e";
    h.legend = "divergence";
    return h;
}

inline HeatmapData heatmap_from_landscape(const baselines::LandscapeGrid& l) {
    HeatmapData h;
    h.x0 = l.x0;
    h.x1 = l.x1;
    h.y0 = l.y0;
    h.y1 = l.y1;
    h.nx = l.nx;
    h.ny = l.ny;
    h.values = l.density;
    h.defined.assign(h.values.size(), 1);
    h.symmetric = false;
    h.xlabel = "t-SNE 1";
    h.ylabel = "t-SNE 2";
    h.legend = "density";
    return h;
}

struct HeatmapStyle {
    std::string title;
    std::optional<Palette> palette;  // default: rdbu for symmetric data, viridis otherwise
    int colorbar_steps = 64;
    // Polylines in data coordinates drawn over the map (e.g. projected trajectories).
    std::vector<std::vector<std::pair<double, double>>> overlay;
};

inline RenderResult render_heatmap(const HeatmapData& h, const HeatmapStyle& style = {}) {
    if (h.nx <= 0 || h.ny <= 0 || h.values.size() != static_cast<std::size_t>(h.nx) * h.ny ||
        h.defined.size() != h.values.size())
        throw Error("render_heatmap: inconsistent grid");
    if (std::none_of(h.defined.begin(), h.defined.end(), [](char c) { return c != 0; }))
        throw Error("render_heatmap: no defined cell");
    if (!(h.x1 > h.x0) || !(h.y1 > h.y0)) throw Error("render_heatmap: degenerate extent");
    const Palette pal = style.palette.value_or(h.symmetric ? Palette::rdbu : Palette::viridis);

    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (std::size_t k = 0; k < h.values.size(); ++k) {
        if (!h.defined[k]) continue;
        if (!std::isfinite(h.values[k])) throw Error("render_heatmap: non-finite value");
        if (first) {
            lo = hi = h.values[k];
            first = false;
        }
        lo = std::min(lo, h.values[k]);
        hi = std::max(hi, h.values[k]);
    }
    if (h.symmetric) {
        double m = std::max(std::abs(lo), std::abs(hi));
        lo = -m;
        hi = m;
    } else {
        lo = std::min(lo, 0.0);
    }
    auto to_t = [&](double v) { return hi > lo ? (v - lo) / (hi - lo) : 0.5; };

    Frame f;
    f.x0 = h.x0;
    f.x1 = h.x1;
    f.y0 = h.y0;
    f.y1 = h.y1;
    Document doc{f.left + f.size + 110, f.top + f.size + 50, {}};
    doc.add("<defs><pattern id=\"hatch\" patternUnits=\"userSpaceOnUse\" width=\"6\" height=\"6\">"
            "<rect width=\"6\" height=\"6\" fill=\"#ffffff\"/><path d=\"M0 6 L6 0\" stroke=\"#999999\" "
            "stroke-width=\"1\"/></pattern></defs>");
    const double cw = f.size / h.nx, ch = f.size / h.ny;
    doc.add("<g class=\"cells\">");
    for (int j = 0; j < h.ny; ++j) {
        for (int i = 0; i < h.nx; ++i) {
            double x = f.left + i * cw;
            double y = f.top + f.size - (j + 1) * ch;
            std::string geom = "x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(cw) + "\" height=\"" + fmt(ch) + "\"";
            if (h.is_defined(i, j))
                doc.add("<rect class=\"cell\" " + geom + " fill=\"" + hex(palette_color(pal, to_t(h.at(i, j)))) + "\"/>");
            else
                doc.add("<rect class=\"undefined\" " + geom + " fill=\"url(#hatch)\"/>");
        }
    }
    doc.add("</g>");

    RenderResult out;
    if (!style.overlay.empty()) {
        doc.add("<g class=\"overlay\" fill=\"none\" stroke=\"#ffffff\" stroke-width=\"0.8\" stroke-opacity=\"0.7\">");
        for (const auto& line : style.overlay) {
            if (line.size() < 2) continue;
            std::string pts;
            for (const auto& [x, y] : line) {
                double cx = std::clamp(x, f.x0, f.x1), cy = std::clamp(y, f.y0, f.y1);
                if (cx != x || cy != y) ++out.clipped;
                if (!pts.empty()) pts += ' ';
                pts += fmt(f.px(cx)) + "," + fmt(f.py(cy));
            }
            doc.add("<polyline points=\"" + pts + "\"/>");
        }
        doc.add("</g>");
    }
    axes(doc, f, h.xlabel, h.ylabel, style.title);

    // Colour bar.
    const double bx = f.left + f.size + 20, bw = 16;
    const int steps = std::max(2, style.colorbar_steps);
    const double sh = f.size / steps;
    doc.add("<g class=\"colorbar\">");
    for (int k = 0; k < steps; ++k) {
        double t = (k + 0.5) / steps;
        double y = f.top + f.size - (k + 1) * sh;
        doc.add("<rect x=\"" + fmt(bx) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(bw) + "\" height=\"" + fmt(sh) +
                "\" fill=\"" + hex(palette_color(pal, t)) + "\"/>");
    }
    doc.add("<rect x=\"" + fmt(bx) + "\" y=\"" + fmt(f.top) + "\" width=\"" + fmt(bw) + "\" height=\"" + fmt(f.size) +
            "\" fill=\"none\" stroke=\"#333333\"/>");
    for (int k = 0; k <= 4; ++k) {
        double v = lo + (hi - lo) * k / 4.0;
        double y = f.top + f.size - f.size * k / 4.0;
        doc.add("<text class=\"tick\" x=\"" + fmt(bx + bw + 4) + "\" y=\"" + fmt(y + 3) + "\" font-size=\"10\">" +
                tick_label(v) + "</text>");
    }
    doc.add("<text class=\"label\" x=\"" + fmt(bx) + "\" y=\"" + fmt(f.top - 6) + "\" font-size=\"11\">" +
            escape_xml(h.legend) + "</text>");
    doc.add("</g>");
    out.svg = doc.finish();
    return out;
}

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryStyle {
    std::string title = "trajectories";
    std::vector<std::string> colors = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    double min_opacity = 0.15;  // opacity at tau = 0; rises linearly to 1 at tau = 1
    double stroke_width = 0.8;
};

struct MeanSeries {
    std::string label;
    analysis::MeanTrajectory mean;
};

namespace detail {

inline std::pair<double, double> clamp_unit(double u, double e, std::size_t& clipped) {
    double cu = std::clamp(u, 0.0, 1.0), ce = std::clamp(e, 0.0, 1.0);
    if (cu != u || ce != e) ++clipped;
    return {cu, ce};
}

}  // namespace detail

// Individual trajectories as line segments in normalized (u, e) with tau
// encoded as opacity, then mean trajectories as ribbons plus polylines.
inline RenderResult render_trajectories(std::span<const infodyn::Trajectory> trajectories,
                                        std::span<const MeanSeries> means = {}, const TrajectoryStyle& style = {}) {
    if (trajectories.empty() && means.empty()) throw Error("render_trajectories: empty input");
    Frame f;
    Document doc{f.left + f.size + 140, f.top + f.size + 50, {}};
    RenderResult out;
    axes(doc, f, "uncertainty u", "effort e", style.title);

    if (!trajectories.empty()) {
        doc.add("<g class=\"trajectories\" stroke=\"" + style.colors.front() + "\" stroke-width=\"" +
                fmt(style.stroke_width) + "\">");
        for (const auto& tr : trajectories) {
            for (std::size_t k = 0; k + 1 < tr.points.size(); ++k) {
                const auto& a = tr.points[k];
                const auto& b = tr.points[k + 1];
                auto [ua, ea] = detail::clamp_unit(a.u, a.e, out.clipped);
                auto [ub, eb] = detail::clamp_unit(b.u, b.e, out.clipped);
                double tau = 0.5 * (a.tau + b.tau);
                double op = style.min_opacity + (1.0 - style.min_opacity) * std::clamp(tau, 0.0, 1.0);
                doc.add("<line x1=\"" + fmt(f.px(ua)) + "\" y1=\"" + fmt(f.py(ea)) + "\" x2=\"" + fmt(f.px(ub)) +
                        "\" y2=\"" + fmt(f.py(eb)) + "\" stroke-opacity=\"" + fmt(op, 3) + "\"/>");
            }
        }
        doc.add("</g>");
    }

    for (std::size_t s = 0; s < means.size(); ++s) {
        const auto& mt = means[s].mean;
        const auto& color = style.colors[(s + (trajectories.empty() ? 0 : 1)) % style.colors.size()];
        const std::size_t n = mt.tau.size();
        if (n < 2) throw Error("render_trajectories: mean trajectory needs >= 2 points");
        std::vector<std::pair<double, double>> upper, lower, center;
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t a = k == 0 ? 0 : k - 1, b = k + 1 == n ? k : k + 1;
            double tx = mt.u_mean[b] - mt.u_mean[a], ty = mt.e_mean[b] - mt.e_mean[a];
            double len = std::hypot(tx, ty);
            double nx = len > 0 ? -ty / len : 0.0, ny = len > 0 ? tx / len : 1.0;
            double w = 0.5 * std::hypot(nx * (mt.u_hi[k] - mt.u_lo[k]), ny * (mt.e_hi[k] - mt.e_lo[k]));
            center.push_back(detail::clamp_unit(mt.u_mean[k], mt.e_mean[k], out.clipped));
            upper.push_back(detail::clamp_unit(mt.u_mean[k] + w * nx, mt.e_mean[k] + w * ny, out.clipped));
            lower.push_back(detail::clamp_unit(mt.u_mean[k] - w * nx, mt.e_mean[k] - w * ny, out.clipped));
        }
        std::string ribbon, line;
        for (const auto& [u, e] : upper) ribbon += (ribbon.empty() ? "" : " ") + fmt(f.px(u)) + "," + fmt(f.py(e));
        for (auto it = lower.rbegin(); it != lower.rend(); ++it) ribbon += " " + fmt(f.px(it->first)) + "," + fmt(f.py(it->second));
        for (const auto& [u, e] : center) line += (line.empty() ? "" : " ") + fmt(f.px(u)) + "," + fmt(f.py(e));
        doc.add("<g class=\"mean\" data-label=\"" + escape_xml(means[s].label) + "\">");
        doc.add("<polygon class=\"ribbon\" points=\"" + ribbon + "\" fill=\"" + color +
                "\" fill-opacity=\"0.25\" stroke=\"none\"/>");
        doc.add("<polyline class=\"mean-line\" points=\"" + line + "\" fill=\"none\" stroke=\"" + color +
                "\" stroke-width=\"2\"/>");
        doc.add("</g>");
        double ly = f.top + 14 + 16.0 * static_cast<double>(s);
        doc.add("<text class=\"legend\" x=\"" + fmt(f.left + f.size + 12) + "\" y=\"" + fmt(ly) +
                "\" font-size=\"11\" fill=\"" + color + "\">" + escape_xml(means[s].label) + "</text>");
    }
    out.svg = doc.finish();
    return out;
}

}  // namespace iftrack::svg
