#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

// Evaluation reports and chart emission. Reports carry per-family image
// quality summaries plus provenance digests; serialization round-trips
// exactly, including infinite PSNR (identical images), which is written as a
// tagged "inf" value rather than capped.
namespace mdc::report {

struct FamilyMetrics {
  double psnr_mean = 0.0;  // may be +infinity
  double ssim_mean = 0.0;
  std::int64_t count = 0;
};

struct EvalReport {
  std::map<std::string, FamilyMetrics> families;  // keyed by family name
  std::string config_digest;
  std::string checkpoint_digest;
  std::string timestamp;  // informational; excluded from the text table
};

// Machine-readable form. Throws std::runtime_error on I/O or parse failure.
void write_report_json(const EvalReport& r, const std::string& path);
EvalReport read_report_json(const std::string& path);

// Human-readable aligned table; deterministic for identical report values
// (the timestamp is deliberately not part of it).
std::string format_report_text(const EvalReport& r);
void write_report_text(const EvalReport& r, const std::string& path);

// Simple multi-series line chart. Each series needs matching x/y lengths;
// at least one point overall is required.
struct Series {
  std::string name;
  std::vector<double> x, y;
};
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::vector<Series>& series);

// fnv1a digest of a file's bytes as fixed-width hex (for provenance fields).
std::string file_digest_hex(const std::string& path);

}  // namespace mdc::report
