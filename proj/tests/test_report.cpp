#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

#include "mdc/report.hpp"

using namespace mdc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() /
               (std::string("mdc_report_") + tag + "_" +
                std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

report::EvalReport sample_report() {
  report::EvalReport r;
  r.families["gaussian_noise"] = {31.415, 0.912, 12};
  r.families["low_light"] = {27.5, 0.843, 7};
  r.config_digest = "0123456789abcdef";
  r.checkpoint_digest = "fedcba9876543210";
  r.timestamp = "2024-05-01T10:00:00Z";
  return r;
}

}  // namespace

TEST_SUITE("report") {

TEST_CASE("json reports round-trip exactly, including infinite psnr") {
  fs::path dir = temp_dir("json");
  report::EvalReport r = sample_report();
  r.families["identity"] = {std::numeric_limits<double>::infinity(), 1.0, 3};

  fs::path p = dir / "report.json";
  report::write_report_json(r, p.string());
  report::EvalReport back = report::read_report_json(p.string());

  REQUIRE(back.families.size() == 3);
  CHECK(back.families["gaussian_noise"].psnr_mean == 31.415);
  CHECK(back.families["gaussian_noise"].ssim_mean == 0.912);
  CHECK(back.families["gaussian_noise"].count == 12);
  CHECK(std::isinf(back.families["identity"].psnr_mean));
  CHECK(back.families["identity"].psnr_mean > 0);
  CHECK(back.config_digest == r.config_digest);
  CHECK(back.checkpoint_digest == r.checkpoint_digest);
  CHECK(back.timestamp == r.timestamp);

  // The serialized form tags infinity instead of capping it.
  std::string raw = slurp(p);
  CHECK(raw.find("\"inf\"") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("an empty report survives the round trip") {
  fs::path dir = temp_dir("empty");
  report::EvalReport r;
  fs::path p = dir / "empty.json";
  report::write_report_json(r, p.string());
  report::EvalReport back = report::read_report_json(p.string());
  CHECK(back.families.empty());
  CHECK(back.config_digest.empty());
  fs::remove_all(dir);
}

TEST_CASE("malformed report files are rejected") {
  fs::path dir = temp_dir("bad");
  fs::path p = dir / "bad.json";
  std::ofstream(p) << "{ nope";
  CHECK_THROWS_AS(report::read_report_json(p.string()), std::runtime_error);
  std::ofstream(dir / "tag.json")
      << R"({"families": {"x": {"psnr_mean": "huge", "ssim_mean": 1, "count": 1}},
            "config_digest": "", "checkpoint_digest": "", "timestamp": ""})";
  CHECK_THROWS_AS(report::read_report_json((dir / "tag.json").string()),
                  std::runtime_error);
  CHECK_THROWS_AS(report::read_report_json((dir / "missing.json").string()),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("report text is deterministic and timestamp-free") {
  report::EvalReport a = sample_report();
  report::EvalReport b = sample_report();
  b.timestamp = "1999-01-01T00:00:00Z";
  CHECK(report::format_report_text(a) == report::format_report_text(b));

  std::string text = report::format_report_text(a);
  CHECK(text.find("gaussian_noise") != std::string::npos);
  CHECK(text.find("low_light") != std::string::npos);
  CHECK(text.find("31.41") != std::string::npos);
  CHECK(text.find("1999") == std::string::npos);
  CHECK(text.find(a.config_digest) != std::string::npos);

  fs::path dir = temp_dir("text");
  fs::path p = dir / "report.txt";
  report::write_report_text(a, p.string());
  CHECK(slurp(p) == text);
  fs::remove_all(dir);
}

TEST_CASE("line charts emit valid-looking svg with every series named") {
  fs::path dir = temp_dir("svg");
  report::Series s1{"trained", {0.0, 0.25, 0.5}, {0.9, 0.8, 0.6}};
  report::Series s2{"random", {0.0, 0.25, 0.5}, {0.3, 0.3, 0.3}};
  fs::path p = dir / "chart.svg";
  report::write_line_chart_svg(p.string(), "probe sweep", {s1, s2});
  std::string svg = slurp(p);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("probe sweep") != std::string::npos);
  CHECK(svg.find("trained") != std::string::npos);
  CHECK(svg.find("random") != std::string::npos);
  CHECK(svg.find("<polyline") != std::string::npos);

  // A single point still renders (degenerate ranges must not divide by zero).
  report::Series one{"dot", {1.0}, {2.0}};
  report::write_line_chart_svg((dir / "one.svg").string(), "one", {one});
  CHECK(slurp(dir / "one.svg").find("<svg") != std::string::npos);

  report::Series bad{"bad", {1.0, 2.0}, {1.0}};
  CHECK_THROWS_AS(
      report::write_line_chart_svg((dir / "x.svg").string(), "t", {bad}),
      std::invalid_argument);
  CHECK_THROWS_AS(report::write_line_chart_svg((dir / "y.svg").string(), "t",
                                               {report::Series{"e", {}, {}}}),
                  std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("file digests are stable, content-sensitive, published-vector true") {
  fs::path dir = temp_dir("digest");
  fs::path p = dir / "blob.bin";
  std::ofstream(p, std::ios::binary) << "foobar";
  // Published 64-bit FNV-1a value for "foobar".
  CHECK(report::file_digest_hex(p.string()) == "85944171f73967e8");
  std::ofstream(p, std::ios::binary) << "foobaz";
  CHECK(report::file_digest_hex(p.string()) != "85944171f73967e8");
  CHECK(report::file_digest_hex(p.string()).size() == 16);
  CHECK_THROWS_AS(report::file_digest_hex((dir / "gone").string()),
                  std::runtime_error);
  fs::remove_all(dir);
}

}  // TEST_SUITE
