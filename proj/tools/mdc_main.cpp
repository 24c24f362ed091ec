#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdc/degrade.hpp"
#include "mdc/errors.hpp"
#include "mdc/metrics.hpp"
#include "mdc/model.hpp"
#include "mdc/pipeline.hpp"
#include "mdc/probe.hpp"
#include "mdc/report.hpp"
#include "mdc/rng.hpp"
#include "mdc/tensor.hpp"

namespace fs = std::filesystem;
using namespace mdc;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  return out;
}

std::map<degrade::Family, int> parse_counts(const std::string& s) {
  std::map<degrade::Family, int> counts;
  for (const std::string& part : split(s, ',')) {
    auto eq = part.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--counts expects family=N pairs, got '" +
                                  part + "'");
    counts[degrade::family_from_name(part.substr(0, eq))] =
        std::stoi(part.substr(eq + 1));
  }
  return counts;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const std::string& part : split(s, ',')) out.push_back(std::stod(part));
  return out;
}

// Rebuilds an encoder (masked-capable) from any checkpoint carrying
// "encoder.*" config keys and parameters.
model::Encoder encoder_from_checkpoint(const std::string& path) {
  model::Checkpoint c = model::load_checkpoint(path);
  model::EncoderConfig cfg = model::encoder_config_from_map(c.config);
  cfg.masked_mode = true;
  model::Encoder enc(cfg, 0);
  model::load_store(c, "encoder", enc.params());
  return enc;
}

std::string config_map_canonical(const std::map<std::string, std::string>& m) {
  std::ostringstream os;
  for (const auto& [k, v] : m) os << k << "=" << v << "\n";
  return os.str();
}

struct SynthArgs {
  std::string clean_dir, out, counts;
  std::uint64_t seed = 0;
  int size = 64;
  int pool = 64;
};

int run_synth(const SynthArgs& a) {
  degrade::CorpusSpec spec;
  spec.clean_dir = a.clean_dir;
  spec.procedural_pool = a.pool;
  spec.image_h = spec.image_w = a.size;
  spec.seed = a.seed;
  spec.counts = parse_counts(a.counts);
  degrade::CorpusManifest m = degrade::build_corpus(spec, a.out);
  std::cout << "wrote " << m.entries.size() << " pairs to " << a.out << "\n";
  for (const auto& [f, n] : m.counts)
    std::cout << "  " << degrade::family_name(f) << ": " << n << "\n";
  std::cout << "manifest: " << a.out << "/manifest.json\n";
  return 0;
}

struct TrainArgs {
  std::string config, corpus, out, resume, init;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int run_pretrain(const TrainArgs& a) {
  pipeline::TrainConfig cfg = pipeline::load_train_config(a.config);
  if (a.seed_set) cfg.seed = a.seed;
  model::Checkpoint c = pipeline::pretrain_run(cfg, a.corpus, a.out, a.resume);
  std::cout << "pre-training finished after " << c.meta.iteration
            << " iterations\n"
            << "final checkpoint: " << a.out << "/checkpoint_final.ckpt\n"
            << "loss log: " << a.out << "/loss_log.tsv\n";
  return 0;
}

int run_finetune(const TrainArgs& a) {
  pipeline::TrainConfig cfg = pipeline::load_train_config(a.config);
  if (a.seed_set) cfg.seed = a.seed;
  pipeline::FinetuneResult r =
      pipeline::finetune_run(cfg, a.corpus, a.init, a.out);
  std::cout << report::format_report_text(r.report);
  std::cout << "checkpoint: " << r.checkpoint_path << "\n";
  return 0;
}

struct ProbeArgs {
  std::string checkpoint, config, corpus, out;
  std::string ratios = "0";
  int k = 5;
  int crop = 64;
  int patch = 8;
  std::uint64_t seed = 0;
};

int run_probe(const ProbeArgs& a) {
  if (a.checkpoint.empty() && a.config.empty())
    throw std::invalid_argument(
        "probe needs --checkpoint or --config (for a random-init encoder)");
  std::vector<degrade::PairedSample> samples = degrade::load_corpus(a.corpus);
  std::vector<double> ratios = parse_doubles(a.ratios);

  std::vector<std::pair<double, double>> table;
  if (!a.checkpoint.empty()) {
    model::Encoder enc = encoder_from_checkpoint(a.checkpoint);
    table = probe::mask_ratio_sweep(enc, samples, a.crop, ratios, a.patch,
                                    a.k, a.seed);
  } else {
    pipeline::TrainConfig cfg = pipeline::load_train_config(a.config);
    model::EncoderConfig ec = cfg.encoder;
    ec.masked_mode = true;
    model::PretrainModel m(ec, cfg.cls, rng::derive(a.seed, "init"));
    table = probe::mask_ratio_sweep(m.encoder, samples, a.crop, ratios,
                                    a.patch, a.k, a.seed);
  }

  std::ostringstream tsv;
  tsv << "mask_ratio\taccuracy\n";
  for (const auto& [r, acc] : table) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g\t%.6f\n", r, acc);
    tsv << buf;
  }
  std::cout << tsv.str();

  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream f(a.out + "/probe_sweep.tsv", std::ios::trunc);
    f << tsv.str();
    report::Series s;
    s.name = "accuracy";
    for (const auto& [r, acc] : table) {
      s.x.push_back(r);
      s.y.push_back(acc);
    }
    report::write_line_chart_svg(a.out + "/probe_sweep.svg",
                                 "probe accuracy vs mask ratio", {s});
    std::cout << "wrote " << a.out << "/probe_sweep.tsv and probe_sweep.svg\n";
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint, corpus, out;
};

int run_eval(const EvalArgs& a) {
  model::Checkpoint c = model::load_checkpoint(a.checkpoint);
  if (c.kind != "restoration")
    throw CheckpointError("eval expects a 'restoration' checkpoint, got '" +
                          c.kind + "'");
  model::EncoderConfig ec = model::encoder_config_from_map(c.config);
  model::RestorationModel rm(ec, 0);
  model::load_store(c, "encoder", rm.encoder.params());
  model::load_store(c, "head", rm.head.params());

  std::vector<degrade::PairedSample> samples = degrade::load_corpus(a.corpus);
  struct Acc {
    double psnr = 0.0, ssim = 0.0;
    std::int64_t count = 0;
  };
  std::map<std::string, Acc> acc;
  for (const degrade::PairedSample& s : samples) {
    Tensor restored = clamp01(rm.restore(s.lq));
    Acc& fam = acc[degrade::family_name(s.spec.family)];
    fam.psnr += metrics::psnr(restored, s.gt);
    fam.ssim += metrics::ssim(restored, s.gt);
    fam.count += 1;
  }
  report::EvalReport rep;
  for (const auto& [name, v] : acc)
    rep.families[name] = {v.psnr / static_cast<double>(v.count),
                          v.ssim / static_cast<double>(v.count), v.count};
  rep.config_digest = rng::hex64(rng::fnv1a(config_map_canonical(c.config)));
  rep.checkpoint_digest = report::file_digest_hex(a.checkpoint);
  std::cout << report::format_report_text(rep);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    report::write_report_json(rep, a.out + "/report.json");
    report::write_report_text(rep, a.out + "/report.txt");
    std::cout << "wrote " << a.out << "/report.json and report.txt\n";
  }
  return 0;
}

struct AblateArgs {
  std::string axis, values, config, finetune_config, corpus, out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool paper_scale = false;
};

int run_ablate(const AblateArgs& a) {
  pipeline::AblationAxis axis;
  if (a.axis == "mask_ratio")
    axis = pipeline::AblationAxis::MASK_RATIO;
  else if (a.axis == "patch_size")
    axis = pipeline::AblationAxis::PATCH_SIZE;
  else if (a.axis == "mask_method")
    axis = pipeline::AblationAxis::MASK_METHOD;
  else
    throw std::invalid_argument(
        "--axis must be mask_ratio, patch_size or mask_method");

  pipeline::TrainConfig pc = pipeline::load_train_config(a.config);
  pipeline::TrainConfig fc = pipeline::load_train_config(a.finetune_config);
  if (a.seed_set) pc.seed = fc.seed = a.seed;
  if (a.paper_scale) {
    // Same recipe, larger budget; nothing else changes.
    pc.iterations *= 100;
    fc.iterations *= 100;
  }
  std::vector<pipeline::AblationRow> rows = pipeline::run_ablation(
      axis, split(a.values, ','), pc, fc, a.corpus, a.out);
  std::cout << "axis\tvalue\tpsnr_avg\tssim_avg\n";
  for (const pipeline::AblationRow& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s\t%s\t%.6f\t%.6f\n", a.axis.c_str(),
                  r.value.c_str(), r.psnr_avg, r.ssim_avg);
    std::cout << buf;
  }
  std::cout << "table: " << a.out << "/ablation.tsv\n";
  return 0;
}

struct ReportArgs {
  std::string in, text, log, chart, columns;
};

int run_report(const ReportArgs& a) {
  if (a.in.empty() && a.log.empty())
    throw std::invalid_argument("report needs --in and/or --log");
  if (!a.in.empty()) {
    report::EvalReport rep = report::read_report_json(a.in);
    std::string txt = report::format_report_text(rep);
    std::cout << txt;
    if (!a.text.empty()) {
      std::ofstream f(a.text, std::ios::trunc);
      if (!f) throw std::runtime_error("cannot write " + a.text);
      f << txt;
    }
  }
  if (!a.log.empty()) {
    if (a.chart.empty())
      throw std::invalid_argument("--log needs --chart <svg path>");
    std::ifstream f(a.log);
    if (!f) throw std::runtime_error("cannot open " + a.log);
    std::string header;
    if (!std::getline(f, header))
      throw std::runtime_error("empty log file " + a.log);
    std::vector<std::string> cols = split(header, '\t');
    if (cols.size() < 2)
      throw std::runtime_error("log needs an x column plus data columns");
    std::vector<std::string> want =
        a.columns.empty() ? std::vector<std::string>(cols.begin() + 1,
                                                     cols.end())
                          : split(a.columns, ',');
    std::vector<report::Series> series;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < cols.size(); ++i) index[cols[i]] = i;
    for (const std::string& w : want) {
      if (!index.count(w))
        throw std::runtime_error("log has no column '" + w + "'");
      series.push_back({w, {}, {}});
    }
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> parts = split(line, '\t');
      double x = std::stod(parts[0]);
      for (std::size_t i = 0; i < want.size(); ++i) {
        series[i].x.push_back(x);
        series[i].y.push_back(std::stod(parts.at(index[want[i]])));
      }
    }
    report::write_line_chart_svg(a.chart, fs::path(a.log).stem().string(),
                                 series);
    std::cout << "wrote chart " << a.chart << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "mdc — masked degradation-aware pre-training for image restoration"};
  app.require_subcommand(1);

  SynthArgs sy;
  CLI::App* synth = app.add_subcommand(
      "synth", "build a synthetic degradation corpus");
  synth->add_option("--clean-dir", sy.clean_dir,
                    "directory of clean source images (default: procedural)");
  synth->add_option("--out", sy.out, "output corpus directory")->required();
  synth
      ->add_option("--counts", sy.counts,
                   "per-family pair counts, e.g. haze=12,rain_streak=12")
      ->required();
  synth->add_option("--seed", sy.seed, "corpus seed");
  synth->add_option("--size", sy.size, "square image side (default 64)");
  synth->add_option("--pool", sy.pool,
                    "procedural clean-image pool size (default 64)");

  TrainArgs pt;
  CLI::App* pretrain = app.add_subcommand(
      "pretrain", "masked pre-training (reconstruction + classification)");
  pretrain->add_option("--config", pt.config, "JSON training config")
      ->required();
  pretrain->add_option("--corpus", pt.corpus, "corpus manifest.json")
      ->required();
  pretrain->add_option("--out", pt.out, "output directory")->required();
  pretrain->add_option("--resume", pt.resume, "checkpoint to resume from");
  CLI::Option* pt_seed =
      pretrain->add_option("--seed", pt.seed, "override the config seed");

  TrainArgs ft;
  CLI::App* finetune = app.add_subcommand(
      "finetune", "supervised restoration fine-tuning + held-out report");
  finetune->add_option("--config", ft.config, "JSON training config")
      ->required();
  finetune->add_option("--corpus", ft.corpus, "corpus manifest.json")
      ->required();
  finetune->add_option("--init", ft.init,
                       "pre-trained checkpoint to initialize the encoder");
  finetune->add_option("--out", ft.out, "output directory")->required();
  CLI::Option* ft_seed =
      finetune->add_option("--seed", ft.seed, "override the config seed");

  ProbeArgs pr;
  CLI::App* probe_cmd = app.add_subcommand(
      "probe", "kNN degradation-classification probe over encoder features");
  probe_cmd->add_option("--checkpoint", pr.checkpoint,
                        "checkpoint holding the encoder");
  probe_cmd->add_option("--config", pr.config,
                        "training config (random-init encoder when no "
                        "checkpoint is given)");
  probe_cmd->add_option("--corpus", pr.corpus, "corpus manifest.json")
      ->required();
  probe_cmd->add_option("--mask-ratios", pr.ratios,
                        "comma-separated ratios (default 0)");
  probe_cmd->add_option("--k", pr.k, "kNN neighbor count (default 5)");
  probe_cmd->add_option("--crop", pr.crop, "center-crop side (default 64)");
  probe_cmd->add_option("--mask-patch", pr.patch,
                        "mask patch size (default 8)");
  probe_cmd->add_option("--seed", pr.seed, "probe seed");
  probe_cmd->add_option("--out", pr.out,
                        "directory for probe_sweep.tsv + probe_sweep.svg");

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "evaluate a restoration checkpoint on a corpus");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "restoration checkpoint")
      ->required();
  eval_cmd->add_option("--corpus", ev.corpus, "corpus manifest.json")
      ->required();
  eval_cmd->add_option("--out", ev.out,
                       "directory for report.json + report.txt");

  AblateArgs ab;
  CLI::App* ablate = app.add_subcommand(
      "ablate", "pretrain→finetune→eval over one masking axis");
  ablate->add_option("--axis", ab.axis,
                     "mask_ratio | patch_size | mask_method")
      ->required();
  ablate->add_option("--values", ab.values, "comma-separated axis values")
      ->required();
  ablate->add_option("--config", ab.config, "pre-training JSON config")
      ->required();
  ablate
      ->add_option("--finetune-config", ab.finetune_config,
                   "fine-tuning JSON config")
      ->required();
  ablate->add_option("--corpus", ab.corpus, "corpus manifest.json")
      ->required();
  ablate->add_option("--out", ab.out, "output directory")->required();
  CLI::Option* ab_seed =
      ablate->add_option("--seed", ab.seed, "override both config seeds");
  ablate->add_flag("--paper-scale", ab.paper_scale,
                   "multiply iteration budgets by 100");

  ReportArgs rp;
  CLI::App* report_cmd = app.add_subcommand(
      "report", "render reports and chart training logs");
  report_cmd->add_option("--in", rp.in, "report.json to render as text");
  report_cmd->add_option("--text", rp.text, "write the text rendering here");
  report_cmd->add_option("--log", rp.log, "TSV log to chart");
  report_cmd->add_option("--chart", rp.chart, "output SVG path");
  report_cmd->add_option("--columns", rp.columns,
                         "log columns to plot (default: all)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return run_synth(sy);
    if (*pretrain) {
      pt.seed_set = pt_seed->count() > 0;
      return run_pretrain(pt);
    }
    if (*finetune) {
      ft.seed_set = ft_seed->count() > 0;
      return run_finetune(ft);
    }
    if (*probe_cmd) return run_probe(pr);
    if (*eval_cmd) return run_eval(ev);
    if (*ablate) {
      ab.seed_set = ab_seed->count() > 0;
      return run_ablate(ab);
    }
    if (*report_cmd) return run_report(rp);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
