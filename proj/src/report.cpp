#include "tweo/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace tweo {

void write_csv(const std::string& path, const std::vector<std::string>& headers,
               const std::vector<std::vector<double>>& columns) {
  if (headers.size() != columns.size())
    throw ContractError(strf("csv: %zu headers for %zu columns", headers.size(),
                             columns.size()));
  if (columns.empty()) throw ContractError("csv: no columns");
  const size_t rows = columns[0].size();
  for (const auto& c : columns)
    if (c.size() != rows) throw ContractError("csv: ragged columns");

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(strf("cannot write %s", path.c_str()));
  for (size_t i = 0; i < headers.size(); ++i)
    out << (i ? "," : "") << headers[i];
  out << "\n";
  for (size_t r = 0; r < rows; ++r) {
    for (size_t i = 0; i < columns.size(); ++i)
      out << (i ? "," : "") << strf("%.10g", columns[i][r]);
    out << "\n";
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(strf("cannot write %s", path.c_str()));
  out << content;
}

namespace {

constexpr double kW = 860, kH = 480;
constexpr double kML = 70, kMR = 160, kMT = 44, kMB = 52;  // margins; right holds the legend

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '&') o += "&amp;";
    else if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else o += c;
  }
  return o;
}

// Round a raw interval up to a 1/2/5 grid step.
double nice_step(double span, int target_ticks) {
  if (span <= 0) return 1.0;
  double raw = span / target_ticks;
  double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double frac = raw / mag;
  double f = frac <= 1 ? 1 : frac <= 2 ? 2 : frac <= 5 ? 5 : 10;
  return f * mag;
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           bool log_y) {
  if (series.empty()) throw ContractError("chart needs at least one series");
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const Series& s : series) {
    if (s.x.size() != s.y.size()) throw ContractError("series x/y length mismatch");
    for (size_t i = 0; i < s.x.size(); ++i) {
      double y = s.y[i];
      if (log_y && !(y > 0)) continue;  // zero/negative points cannot be drawn on a log axis
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = y;
        first = false;
      } else {
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
    }
  }
  if (first) throw ContractError("chart has no drawable points");
  if (xmax == xmin) xmax = xmin + 1;
  if (log_y) {
    ymin = std::log10(ymin);
    ymax = std::log10(ymax);
  }
  if (ymax == ymin) ymax = ymin + 1;
  double ypad = 0.06 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const double pw = kW - kML - kMR, ph = kH - kMT - kMB;
  auto px = [&](double x) { return kML + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) {
    double v = log_y ? std::log10(std::max(y, 1e-300)) : y;
    return kMT + (1.0 - (v - ymin) / (ymax - ymin)) * ph;
  };

  std::string svg = strf(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" "
      "viewBox=\"0 0 %g %g\" font-family=\"sans-serif\">\n",
      kW, kH, kW, kH);
  svg += strf("<rect width=\"%g\" height=\"%g\" fill=\"white\"/>\n", kW, kH);
  svg += strf("<text x=\"%g\" y=\"26\" font-size=\"16\" text-anchor=\"middle\">%s</text>\n",
              kML + pw / 2, esc(title).c_str());

  // axes + grid
  svg += strf("<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" "
              "stroke=\"#333\"/>\n",
              kML, kMT, pw, ph);
  double xstep = nice_step(xmax - xmin, 6);
  for (double t = std::ceil(xmin / xstep) * xstep; t <= xmax + 1e-9; t += xstep) {
    svg += strf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"#ddd\"/>\n", px(t),
                kMT, px(t), kMT + ph);
    svg += strf("<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"middle\">%.6g"
                "</text>\n",
                px(t), kMT + ph + 16, t);
  }
  double ystep = nice_step(ymax - ymin, 6);
  for (double t = std::ceil(ymin / ystep) * ystep; t <= ymax + 1e-9; t += ystep) {
    double yy = kMT + (1.0 - (t - ymin) / (ymax - ymin)) * ph;
    svg += strf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"#ddd\"/>\n", kML, yy,
                kML + pw, yy);
    double label = log_y ? std::pow(10.0, t) : t;
    svg += strf("<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"end\">%.4g</text>\n",
                kML - 6, yy + 4, label);
  }
  svg += strf("<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">%s</text>\n",
              kML + pw / 2, kH - 12, esc(x_label).c_str());
  svg += strf("<text x=\"16\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\" "
              "transform=\"rotate(-90 16 %g)\">%s</text>\n",
              kMT + ph / 2, kMT + ph / 2, esc(log_y ? y_label + " (log)" : y_label).c_str());

  for (size_t si = 0; si < series.size(); ++si) {
    const Series& s = series[si];
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    std::string pts;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (log_y && !(s.y[i] > 0)) continue;
      pts += strf("%.2f,%.2f ", px(s.x[i]), py(s.y[i]));
    }
    if (!pts.empty())
      svg += strf("<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" "
                  "stroke-width=\"1.6\"/>\n",
                  pts.c_str(), color);
    double ly = kMT + 14 + 18.0 * double(si);
    svg += strf("<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" "
                "stroke-width=\"3\"/>\n",
                kML + pw + 12, ly - 4, kML + pw + 34, ly - 4, color);
    svg += strf("<text x=\"%g\" y=\"%g\" font-size=\"11\">%s</text>\n", kML + pw + 40, ly,
                esc(s.label).c_str());
  }
  svg += "</svg>\n";
  return svg;
}

std::string svg_histogram(const std::string& title, const HistogramReport& h) {
  if (h.counts.empty()) throw ContractError("histogram has no bins");
  const double pw = kW - kML - 40, ph = kH - kMT - kMB;
  size_t cmax = 1;
  for (size_t c : h.counts) cmax = std::max(cmax, c);

  std::string svg = strf(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" "
      "viewBox=\"0 0 %g %g\" font-family=\"sans-serif\">\n",
      kW, kH, kW, kH);
  svg += strf("<rect width=\"%g\" height=\"%g\" fill=\"white\"/>\n", kW, kH);
  svg += strf("<text x=\"%g\" y=\"26\" font-size=\"16\" text-anchor=\"middle\">%s</text>\n",
              kML + pw / 2, esc(title).c_str());
  svg += strf("<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" "
              "stroke=\"#333\"/>\n",
              kML, kMT, pw, ph);

  const size_t bins = h.counts.size();
  for (size_t i = 0; i < bins; ++i) {
    // log-count bars: activation histograms span many decades
    double frac = h.counts[i] == 0
                      ? 0.0
                      : std::log10(double(h.counts[i]) + 1.0) / std::log10(double(cmax) + 1.0);
    double bh = frac * (ph - 4);
    double bw = pw / double(bins);
    svg += strf("<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"#1f77b4\"/>\n",
                kML + bw * double(i) + 0.5, kMT + ph - bh, std::max(bw - 1.0, 0.5), bh);
  }
  svg += strf("<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"start\">%.5g</text>\n",
              kML, kMT + ph + 16, h.lo);
  svg += strf("<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"end\">%.5g</text>\n",
              kML + pw, kMT + ph + 16, h.hi);
  svg += strf("<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">value "
              "(n=%zu, mean %.4g, sd %.4g); bar height is log-count</text>\n",
              kML + pw / 2, kH - 12, h.n, h.mean, h.stdev);
  svg += "</svg>\n";
  return svg;
}

std::vector<TelemetryRecord> read_telemetry(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(strf("cannot open telemetry log %s", path.c_str()));
  std::vector<TelemetryRecord> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(strf("%s line %zu: %s", path.c_str(), lineno, e.what()));
    }
    TelemetryRecord r;
    r.step = j.at("step").get<size_t>();
    r.lr = j.at("lr").get<double>();
    r.task_loss = j.at("task_loss").get<double>();
    r.tweo_loss = j.at("tweo_loss").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.layer_top1 = j.at("layer_top1").get<std::vector<double>>();
    r.global_peak = j.at("global_peak").get<double>();
    r.saturation = j.at("saturation").get<uint64_t>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tweo
