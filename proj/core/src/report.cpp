#include "mdc/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mdc/rng.hpp"

using json = nlohmann::json;

namespace mdc::report {

namespace {

json metric_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double parse_metric(const json& j, const std::string& ctx) {
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw std::runtime_error("report: bad tagged metric '" + s + "' in " + ctx);
  }
  return j.get<double>();
}

}  // namespace

void write_report_json(const EvalReport& r, const std::string& path) {
  json fams = json::object();
  for (const auto& [name, m] : r.families)
    fams[name] = {{"psnr_mean", metric_value(m.psnr_mean)},
                  {"ssim_mean", metric_value(m.ssim_mean)},
                  {"count", m.count}};
  json doc = {{"families", fams},
              {"config_digest", r.config_digest},
              {"checkpoint_digest", r.checkpoint_digest},
              {"timestamp", r.timestamp}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_report_json: cannot open " + path);
  out << doc.dump(2) << "\n";
  if (!out) throw std::runtime_error("write_report_json: write failed: " + path);
}

EvalReport read_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_report_json: cannot open " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw std::runtime_error("read_report_json: bad JSON in " + path + ": " +
                             e.what());
  }
  EvalReport r;
  try {
    for (auto& [name, fj] : doc.at("families").items()) {
      FamilyMetrics m;
      m.psnr_mean = parse_metric(fj.at("psnr_mean"), name + ".psnr_mean");
      m.ssim_mean = parse_metric(fj.at("ssim_mean"), name + ".ssim_mean");
      m.count = fj.at("count").get<std::int64_t>();
      r.families[name] = m;
    }
    r.config_digest = doc.at("config_digest").get<std::string>();
    r.checkpoint_digest = doc.at("checkpoint_digest").get<std::string>();
    r.timestamp = doc.at("timestamp").get<std::string>();
  } catch (const json::exception& e) {
    throw std::runtime_error("read_report_json: malformed report in " + path +
                             ": " + e.what());
  }
  return r;
}

namespace {

std::string fmt_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string format_report_text(const EvalReport& r) {
  std::ostringstream os;
  os << "family            psnr_mean   ssim_mean   count\n";
  os << "------            ---------   ---------   -----\n";
  for (const auto& [name, m] : r.families) {
    char line[128];
    std::snprintf(line, sizeof line, "%-16s %10s  %10s  %6lld\n", name.c_str(),
                  fmt_metric(m.psnr_mean).c_str(),
                  fmt_metric(m.ssim_mean).c_str(),
                  static_cast<long long>(m.count));
    os << line;
  }
  os << "config_digest:     " << r.config_digest << "\n";
  os << "checkpoint_digest: " << r.checkpoint_digest << "\n";
  return os.str();
}

void write_report_text(const EvalReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_report_text: cannot open " + path);
  out << format_report_text(r);
  if (!out) throw std::runtime_error("write_report_text: write failed: " + path);
}

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::vector<Series>& series) {
  std::size_t points = 0;
  for (const Series& s : series) {
    if (s.x.size() != s.y.size())
      throw std::invalid_argument("write_line_chart_svg: series '" + s.name +
                                  "' has mismatched x/y lengths");
    points += s.x.size();
  }
  if (points == 0)
    throw std::invalid_argument("write_line_chart_svg: no data points");

  double xmin = std::numeric_limits<double>::max(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;

  const double w = 640, h = 400, ml = 60, mr = 20, mt = 40, mb = 40;
  auto px = [&](double x) {
    return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr);
  };
  auto py = [&](double y) {
    return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb);
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c",
                                 "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
     << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"16\">"
     << title << "</text>\n";
  // axes
  os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr
     << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
     << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", ymin);
  os << "<text x=\"" << ml - 6 << "\" y=\"" << h - mb
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
     << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.4g", ymax);
  os << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 4
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
     << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.4g", xmin);
  os << "<text x=\"" << ml << "\" y=\"" << h - mb + 16
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
     << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.4g", xmax);
  os << "<text x=\"" << w - mr << "\" y=\"" << h - mb + 16
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
     << buf << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const Series& s = series[si];
    if (s.x.empty()) continue;
    const char* color = colors[si % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      os << px(s.x[i]) << "," << py(s.y[i]) << " ";
    os << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i])
         << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << w - mr - 4 << "\" y=\"" << mt + 16 * (si + 1)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" "
          "fill=\""
       << color << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";

  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw std::runtime_error("write_line_chart_svg: cannot open " + path);
  out << os.str();
  if (!out)
    throw std::runtime_error("write_line_chart_svg: write failed: " + path);
}

std::string file_digest_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("file_digest_hex: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string bytes = ss.str();
  return rng::hex64(rng::fnv1a(bytes));
}

}  // namespace mdc::report
