#pragma once

// Self-contained SVG figures: prediction scatter, Kagan histogram, azimuth
// bars, Grad-CAM traces and beachball glyphs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "sourcenet/evalx.hpp"
#include "sourcenet/mtmath.hpp"

namespace sourcenet::report {

/// Polarity of P radiation on a lower-hemisphere equal-area grid. Row 0 is
/// north, column 0 is west; +1 compressional, -1 dilatational, 0 outside the
/// primitive circle.
inline std::vector<std::vector<int>> beachball_grid(const MomentTensor& mt, int n = 64) {
  std::vector<std::vector<int>> grid(n, std::vector<int>(n, 0));
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double x = (c + 0.5) / n * 2.0 - 1.0;  // east
      const double y = 1.0 - (r + 0.5) / n * 2.0;  // north
      const double rho = std::hypot(x, y);
      if (rho > 1.0) continue;
      const double takeoff = 2.0 * std::asin(rho / std::sqrt(2.0)) / kDeg;
      const double az = std::atan2(x, y) / kDeg;
      const double p = radiation(mt, ray_direction(takeoff, az)).p_amp;
      grid[r][c] = p > 0.0 ? 1 : (p < 0.0 ? -1 : 0);
    }
  }
  return grid;
}

class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {}

  static std::string escape(const std::string& s) {
    std::string o;
    for (char ch : s) {
      switch (ch) {
        case '<': o += "&lt;"; break;
        case '>': o += "&gt;"; break;
        case '&': o += "&amp;"; break;
        case '"': o += "&quot;"; break;
        default: o += ch;
      }
    }
    return o;
  }

  void rect(double x, double y, double w, double h, const std::string& fill,
            const std::string& stroke = "none") {
    add("<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\" stroke=\"%s\"/>", x, y, w,
        h, fill.c_str(), stroke.c_str());
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0) {
    add("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"%s\" stroke-width=\"%.2f\"/>", x1, y1,
        x2, y2, stroke.c_str(), width);
  }
  void circle(double cx, double cy, double r, const std::string& fill, const std::string& stroke = "none") {
    add("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%.2f\" fill=\"%s\" stroke=\"%s\"/>", cx, cy, r, fill.c_str(),
        stroke.c_str());
  }
  void text(double x, double y, const std::string& s, double size = 11, const char* anchor = "start") {
    add("<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"%.1f\" text-anchor=\"%s\">", x, y,
        size, anchor);
    body_ += escape(s) + "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ += "<polyline fill=\"none\" stroke=\"" + stroke + "\" points=\"";
    char buf[48];
    for (const auto& [x, y] : pts) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", x, y);
      body_ += buf;
    }
    body_ += "\"/>\n";
  }

  std::string str() const {
    char head[256];
    std::snprintf(head, sizeof head,
                  "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                  "viewBox=\"0 0 %.0f %.0f\">\n",
                  w_, h_, w_, h_);
    return head + std::string("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n") + body_ +
           "</svg>\n";
  }

 private:
  template <class... A>
  void add(const char* fmt, A... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, a...);
    body_ += buf;
    body_ += '\n';
  }

  double w_, h_;
  std::string body_;
};

/// Beachball glyph centred at (cx, cy). Runs of compressional cells in each
/// grid row are merged into one rect.
inline void beachball(Svg& svg, const MomentTensor& mt, double cx, double cy, double radius,
                      const std::string& color, int n = 64) {
  const auto grid = beachball_grid(mt, n);
  const double cell = 2.0 * radius / n;
  svg.circle(cx, cy, radius, "white", color);
  for (int r = 0; r < n; ++r) {
    int c = 0;
    while (c < n) {
      if (grid[r][c] != 1) {
        ++c;
        continue;
      }
      const int start = c;
      while (c < n && grid[r][c] == 1) ++c;
      svg.rect(cx - radius + start * cell, cy - radius + r * cell, (c - start) * cell, cell + 0.05, color);
    }
  }
  svg.circle(cx, cy, radius, "none", color);
}

namespace detail {

struct Panel {
  double x, y, w, h;
};

inline void axes(Svg& svg, const Panel& p, const std::string& title, const std::string& xl,
                 const std::string& yl) {
  svg.rect(p.x, p.y, p.w, p.h, "none", "#444");
  svg.text(p.x + p.w / 2, p.y - 8, title, 12, "middle");
  svg.text(p.x + p.w / 2, p.y + p.h + 28, xl, 10, "middle");
  svg.text(p.x - 30, p.y + p.h / 2, yl, 10, "middle");
}

inline void no_data(Svg& svg, const Panel& p) { svg.text(p.x + p.w / 2, p.y + p.h / 2, "no data", 14, "middle"); }

inline void tick_labels(Svg& svg, const Panel& p, double lo, double hi) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2g", lo);
  svg.text(p.x, p.y + p.h + 13, buf, 9, "middle");
  std::snprintf(buf, sizeof buf, "%.2g", hi);
  svg.text(p.x + p.w, p.y + p.h + 13, buf, 9, "middle");
}

inline void scatter(Svg& svg, const Panel& p, const std::vector<std::pair<double, double>>& pts,
                    const std::string& title, const std::string& color) {
  axes(svg, p, title, "true", "pred");
  if (pts.empty()) return no_data(svg, p);
  double lo = pts[0].first, hi = lo;
  for (const auto& [a, b] : pts) {
    lo = std::min({lo, a, b});
    hi = std::max({hi, a, b});
  }
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  auto X = [&](double v) { return p.x + (v - lo) / (hi - lo) * p.w; };
  auto Y = [&](double v) { return p.y + p.h - (v - lo) / (hi - lo) * p.h; };
  svg.line(X(lo), Y(lo), X(hi), Y(hi), "#999");
  for (const auto& [a, b] : pts) svg.circle(X(a), Y(b), 1.6, color);
  tick_labels(svg, p, lo, hi);
}

}  // namespace detail

/// Full evaluation figure: Mw and deviatoric scatter, Kagan histogram and
/// true (black) against predicted (blue) beachballs for the first events.
inline std::string metrics_svg(const MetricsReport& m, std::size_t n_beachballs = 8) {
  Svg svg(960, 560);
  svg.text(20, 24, m.rows.empty() ? "Evaluation: no data" : metrics_summary(m), 11);

  std::vector<std::pair<double, double>> mw, dev;
  for (const auto& r : m.rows) {
    mw.emplace_back(r.truth[5], r.pred[5]);
    for (int k = 0; k < 5; ++k) dev.emplace_back(r.truth[k], r.pred[k]);
  }
  detail::scatter(svg, {70, 70, 240, 240}, mw, "Mw", "#1f4e9c");
  detail::scatter(svg, {380, 70, 240, 240}, dev, "deviatoric components", "#1f4e9c");

  const detail::Panel hp{690, 70, 240, 240};
  detail::axes(svg, hp, "Kagan angle", "degrees", "count");
  if (m.rows.empty()) {
    detail::no_data(svg, hp);
  } else {
    const std::size_t mx = *std::max_element(m.kagan_hist.begin(), m.kagan_hist.end());
    const double bw = hp.w / kKaganBins;
    for (int b = 0; b < kKaganBins; ++b) {
      const double h = hp.h * static_cast<double>(m.kagan_hist[b]) / static_cast<double>(std::max<std::size_t>(mx, 1));
      svg.rect(hp.x + b * bw, hp.y + hp.h - h, bw, h, "#1f4e9c");
    }
    detail::tick_labels(svg, hp, 0, 120);
  }

  const std::size_t nb = std::min(n_beachballs, m.rows.size());
  for (std::size_t i = 0; i < nb; ++i) {
    const auto& r = m.rows[i];
    const double cx = 70 + 110.0 * static_cast<double>(i);
    beachball(svg, label_to_mt(SourceLabel::from_array(r.truth)), cx, 420, 28, "black");
    try {
      beachball(svg, label_to_mt(SourceLabel::from_array(r.pred)), cx, 485, 28, "#1f4e9c");
    } catch (const Error&) {
      svg.text(cx, 488, "degenerate", 9, "middle");
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f deg", r.kagan);
    svg.text(cx, 530, buf, 9, "middle");
    svg.text(cx, 380, r.id, 8, "middle");
  }
  return svg.str();
}

inline std::string azimuth_svg(const AzimuthProfile& p, const std::string& title = "Pooled attention by azimuth") {
  Svg svg(520, 340);
  const detail::Panel pn{60, 50, 420, 230};
  detail::axes(svg, pn, title, "station azimuth (deg)", "mean a_i N");
  double mx = 0.0;
  for (int k = 0; k < kAzimuthBins; ++k)
    if (!p.empty(k)) mx = std::max(mx, p.weight[k]);
  if (mx <= 0.0) {
    detail::no_data(svg, pn);
    return svg.str();
  }
  const double bw = pn.w / kAzimuthBins;
  const double y1 = pn.y + pn.h - pn.h / (1.2 * mx);
  for (int k = 0; k < kAzimuthBins; ++k) {
    if (p.empty(k)) {
      svg.text(pn.x + (k + 0.5) * bw, pn.y + pn.h - 4, "empty", 8, "middle");
      continue;
    }
    const double h = pn.h * p.weight[k] / (1.2 * mx);
    svg.rect(pn.x + k * bw + 2, pn.y + pn.h - h, bw - 4, h, "#1f4e9c");
  }
  svg.line(pn.x, y1, pn.x + pn.w, y1, "#c33");
  svg.text(pn.x + pn.w + 4, y1 + 4, "1.0", 9);
  detail::tick_labels(svg, pn, 0, 360);
  return svg.str();
}

struct CamPanel {
  std::string label;
  std::vector<double> wave;  // normalized waveform for context
  GradCam cam;
};

inline std::string gradcam_svg(const std::vector<CamPanel>& panels, const std::string& title) {
  const double row = 90;
  Svg svg(760, 60 + row * static_cast<double>(std::max<std::size_t>(panels.size(), 1)));
  svg.text(20, 24, title, 13);
  if (panels.empty()) {
    svg.text(380, 90, "no data", 14, "middle");
    return svg.str();
  }
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const auto& pn = panels[i];
    const double y0 = 50 + row * static_cast<double>(i);
    svg.text(20, y0 + 14, pn.label, 10);
    for (int half = 0; half < 2; ++half) {
      const auto& c = half == 0 ? pn.cam.p : pn.cam.s;
      const double x0 = 140 + 310.0 * half, w = 290, h = 70;
      svg.rect(x0, y0, w, h, "none", "#888");
      svg.text(x0 + 4, y0 + 12, half == 0 ? "P" : "S", 10);
      if (c.empty()) continue;
      const double dx = w / static_cast<double>(c.size());
      for (std::size_t t = 0; t < c.size(); ++t) {
        if (c[t] <= 0.0) continue;
        char col[32];
        std::snprintf(col, sizeof col, "rgba(220,60,30,%.3f)", 0.8 * c[t]);
        svg.rect(x0 + t * dx, y0, dx + 0.05, h, col);
      }
      const std::size_t off = half == 0 ? 0 : pn.wave.size() / 2;
      const std::size_t len = pn.wave.size() / 2;
      if (len) {
        double amp = 1e-12;
        for (std::size_t t = 0; t < len; ++t) amp = std::max(amp, std::abs(pn.wave[off + t]));
        std::vector<std::pair<double, double>> pts;
        for (std::size_t t = 0; t < len; ++t)
          pts.emplace_back(x0 + w * static_cast<double>(t) / static_cast<double>(len),
                           y0 + h / 2 - 0.45 * h * pn.wave[off + t] / amp);
        svg.polyline(pts, "black");
      }
    }
  }
  return svg.str();
}

inline void write_svg(const std::string& svg, const std::string& path) { write_text(path, svg); }

}  // namespace sourcenet::report
