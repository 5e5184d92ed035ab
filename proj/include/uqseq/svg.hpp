#pragma once

// Static SVG line plots of observations, base predictions and bands.
// Output bytes depend only on the inputs (fixed-precision formatting).

#include "uqseq/core.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>

namespace uqseq {

struct PlotOptions {
  int width = 900;
  int height = 360;
  int margin = 48;
  std::string title;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
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

}  // namespace detail

/// Plot of dimension `dim` over columns [begin, end): the observation y,
/// the base prediction, and the band split into its lower part
/// [yhat - z_lower, yhat] and upper part [yhat, yhat + z_upper].
inline std::string render_band_plot(const BoundedPrediction& p, const Matrix& y, Index dim, Index begin, Index end,
                                    const PlotOptions& opt = {}) {
  require_valid(p, y);
  if (dim < 0 || dim >= y.rows() || begin < 0 || end > y.cols() || end - begin < 1) {
    fail(ErrorCode::EmptyRange, "plot range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") of dimension " + std::to_string(dim) + " is empty or outside " + shape_str(y));
  }
  const Index n = end - begin;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (Index t = begin; t < end; ++t) {
    lo = std::min({lo, y(dim, t), p.yhat(dim, t) - p.z_lower(dim, t)});
    hi = std::max({hi, y(dim, t), p.yhat(dim, t) + p.z_upper(dim, t)});
  }
  if (hi - lo < 1e-12) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double W = opt.width - 2.0 * opt.margin;
  const double H = opt.height - 2.0 * opt.margin;
  auto X = [&](Index t) { return opt.margin + (n == 1 ? W / 2 : W * static_cast<double>(t - begin) / (n - 1)); };
  auto Y = [&](double v) { return opt.margin + H * (hi - v) / (hi - lo); };

  auto polyline = [&](auto value) {
    std::string pts;
    for (Index t = begin; t < end; ++t) {
      if (t > begin) pts += ' ';
      pts += detail::fmt(X(t)) + ',' + detail::fmt(Y(value(t)));
    }
    return pts;
  };
  auto region = [&](auto from, auto to) {
    std::string pts = polyline(from);
    for (Index t = end - 1; t >= begin; --t) pts += ' ' + detail::fmt(X(t)) + ',' + detail::fmt(Y(to(t)));
    return pts;
  };
  const auto yhat = [&](Index t) { return p.yhat(dim, t); };
  const auto upper = [&](Index t) { return p.yhat(dim, t) + p.z_upper(dim, t); };
  const auto lower = [&](Index t) { return p.yhat(dim, t) - p.z_lower(dim, t); };
  const auto obs = [&](Index t) { return y(dim, t); };
  const bool asym = !p.is_symmetric();

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
     << "\" viewBox=\"0 0 " << opt.width << ' ' << opt.height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty()) {
    os << "<text x=\"" << opt.margin << "\" y=\"" << opt.margin / 2 << "\" font-family=\"sans-serif\" font-size=\"14\">"
       << detail::xml_escape(opt.title) << "</text>\n";
  }
  os << "<polygon class=\"band-upper\" fill=\"" << (asym ? "#f4a582" : "#92c5de") << "\" fill-opacity=\"0.6\" points=\""
     << region(yhat, upper) << "\"/>\n";
  os << "<polygon class=\"band-lower\" fill=\"#92c5de\" fill-opacity=\"0.6\" points=\"" << region(lower, yhat)
     << "\"/>\n";
  os << "<polyline class=\"yhat\" fill=\"none\" stroke=\"#2166ac\" stroke-width=\"1.5\" points=\"" << polyline(yhat)
     << "\"/>\n";
  os << "<polyline class=\"y\" fill=\"none\" stroke=\"#000000\" stroke-width=\"1\" points=\"" << polyline(obs)
     << "\"/>\n";
  os << "<line x1=\"" << opt.margin << "\" y1=\"" << opt.height - opt.margin << "\" x2=\"" << opt.width - opt.margin
     << "\" y2=\"" << opt.height - opt.margin << "\" stroke=\"#444444\"/>\n";
  os << "<line x1=\"" << opt.margin << "\" y1=\"" << opt.margin << "\" x2=\"" << opt.margin << "\" y2=\""
     << opt.height - opt.margin << "\" stroke=\"#444444\"/>\n";
  os << "<text x=\"4\" y=\"" << opt.margin + 4 << "\" font-family=\"sans-serif\" font-size=\"10\">" << detail::fmt(hi)
     << "</text>\n";
  os << "<text x=\"4\" y=\"" << opt.height - opt.margin << "\" font-family=\"sans-serif\" font-size=\"10\">"
     << detail::fmt(lo) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace uqseq
