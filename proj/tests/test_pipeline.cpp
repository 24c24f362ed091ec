#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mdc/degrade.hpp"
#include "mdc/image_io.hpp"
#include "mdc/pipeline.hpp"
#include "mdc/rng.hpp"

using namespace mdc;
namespace fs = std::filesystem;
using degrade::Family;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() /
               (std::string("mdc_pipe_") + tag + "_" +
                std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

// Small two-family corpus on disk; returns the manifest path.
std::string tiny_corpus(const fs::path& dir, int per_family,
                        std::uint64_t seed) {
  degrade::CorpusSpec spec;
  spec.image_h = 32;
  spec.image_w = 32;
  spec.procedural_pool = 8;
  spec.counts = {{Family::GAUSSIAN_NOISE, per_family},
                 {Family::LOW_LIGHT, per_family}};
  spec.seed = seed;
  degrade::build_corpus(spec, dir.string());
  return (dir / "manifest.json").string();
}

// In-memory samples for step-level tests (no disk round trip).
std::vector<degrade::PairedSample> memory_samples(int n, Family f,
                                                  std::uint64_t seed) {
  std::vector<degrade::PairedSample> out;
  for (int i = 0; i < n; ++i) {
    degrade::PairedSample s;
    s.gt = img::procedural_clean(32, 32, rng::derive(seed, "clean", i));
    s.spec = degrade::sample_spec(f, degrade::ParamRanges{},
                                  rng::derive(seed, "spec", i));
    s.lq = degrade::apply_degradation(s.gt, s.spec);
    s.id = "mem_" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

pipeline::TrainConfig tiny_pretrain_cfg(std::uint64_t seed) {
  pipeline::TrainConfig cfg;
  cfg.mode = pipeline::TrainMode::PRETRAIN;
  cfg.iterations = 4;
  cfg.batch_size = 2;
  cfg.crop = 16;
  cfg.lr_encoder = 1e-3;
  cfg.lr_decoder = 1e-3;
  cfg.mask_ratio = 0.5;
  cfg.mask_patch = 4;
  cfg.seed = seed;
  cfg.encoder.num_blocks = 4;
  cfg.encoder.channels = {6, 6, 8, 8};
  cfg.encoder.strides = {1, 2, 1, 1};
  cfg.cls.num_classes = 5;
  cfg.cls.base_width = 8;
  cfg.cls.blocks_per_stage = 1;
  cfg.checkpoint_every = 2;
  cfg.probe = false;
  return cfg;
}

model::PretrainModel tiny_model(const pipeline::TrainConfig& cfg) {
  model::EncoderConfig ec = cfg.encoder;
  ec.masked_mode = true;
  return model::PretrainModel(ec, cfg.cls, rng::derive(cfg.seed, "init"));
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("repeat sampler: exact per-epoch histograms") {
  // 3 noise samples and 1 low-light sample; low-light repeated 3x.
  std::vector<Family> fams = {Family::GAUSSIAN_NOISE, Family::GAUSSIAN_NOISE,
                              Family::GAUSSIAN_NOISE, Family::LOW_LIGHT};
  pipeline::RepeatSampler s(fams, {{Family::LOW_LIGHT, 3}}, 9);
  CHECK(s.epoch_length() == 6);
  std::map<Family, std::int64_t> h = s.histogram();
  CHECK(h[Family::GAUSSIAN_NOISE] == 3);
  CHECK(h[Family::LOW_LIGHT] == 3);

  // Every epoch is a permutation of the same multiset {0,1,2,3,3,3}.
  for (std::int64_t e = 0; e < 4; ++e) {
    std::vector<std::size_t> perm = s.epoch(e);
    std::sort(perm.begin(), perm.end());
    CHECK(perm == std::vector<std::size_t>{0, 1, 2, 3, 3, 3});
  }
}

TEST_CASE("repeat sampler: deterministic epochs that differ between epochs") {
  std::vector<Family> fams(20, Family::HAZE);
  pipeline::RepeatSampler a(fams, {}, 42);
  pipeline::RepeatSampler b(fams, {}, 42);
  CHECK(a.epoch(0) == b.epoch(0));
  CHECK(a.epoch(3) == b.epoch(3));
  // epoch() hands back a reference into a per-sampler cache, so comparisons
  // across epochs of the same sampler need a copy.
  std::vector<std::size_t> first_epoch = a.epoch(0);
  CHECK(first_epoch != a.epoch(1));
  pipeline::RepeatSampler c(fams, {}, 43);
  CHECK(first_epoch != c.epoch(0));
}

TEST_CASE("repeat sampler: global positions walk epochs in order") {
  std::vector<Family> fams = {Family::HAZE, Family::HAZE, Family::RAIN_STREAK};
  pipeline::RepeatSampler s(fams, {{Family::RAIN_STREAK, 2}}, 7);
  REQUIRE(s.epoch_length() == 4);
  for (std::int64_t pos = 0; pos < 12; ++pos)
    CHECK(s.sample_at(pos) ==
          s.epoch(pos / 4)[static_cast<std::size_t>(pos % 4)]);
}

TEST_CASE("repeat sampler input validation") {
  std::vector<Family> fams = {Family::HAZE};
  CHECK_THROWS_AS(pipeline::RepeatSampler(fams, {{Family::HAZE, 0}}, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(pipeline::RepeatSampler({}, {}, 1), std::invalid_argument);

  // A factor for a family the corpus lacks is a warning, not an error.
  pipeline::RepeatSampler s(fams, {{Family::MOTION_BLUR, 5}}, 1);
  CHECK(s.epoch_length() == 1);
  REQUIRE(s.warnings().size() == 1);
  CHECK(s.warnings()[0].find("motion_blur") != std::string::npos);
}

TEST_CASE("train config validation") {
  pipeline::TrainConfig cfg = tiny_pretrain_cfg(1);
  CHECK_NOTHROW(cfg.validate());

  pipeline::TrainConfig bad = cfg;
  bad.crop = 18;  // not a multiple of mask_patch 4
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.mode = pipeline::TrainMode::FINETUNE;  // fine-tuning never masks
  CHECK_NOTHROW(bad.validate());

  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.mask_ratio = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr_encoder = -1e-4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.iterations = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("config files load with strict keys") {
  fs::path dir = temp_dir("cfg");
  fs::path p = dir / "train.json";
  std::ofstream(p) << R"({
    "mode": "pretrain", "iterations": 7, "batch_size": 3, "crop": 24,
    "lr_encoder": 0.001, "lr_decoder": 0.0005,
    "mask": {"ratio": 0.4, "patch": 8, "method": "block_wise"},
    "alpha": 0.5, "gamma": 1.5, "seed": 99, "checkpoint_every": 100,
    "repeat_factors": {"haze": 2},
    "encoder": {"num_blocks": 4, "channels": [6,6,8,8],
                "strides": [1,2,1,1], "topology": "plain"},
    "cls": {"num_classes": 5, "base_width": 8, "blocks_per_stage": 1},
    "probe": {"enabled": false, "k": 3, "max_per_family": 10}
  })";
  pipeline::TrainConfig c = pipeline::load_train_config(p.string());
  CHECK(c.mode == pipeline::TrainMode::PRETRAIN);
  CHECK(c.iterations == 7);
  CHECK(c.batch_size == 3);
  CHECK(c.crop == 24);
  CHECK(c.lr_encoder == 0.001);
  CHECK(c.mask_ratio == 0.4);
  CHECK(c.mask_patch == 8);
  CHECK(c.mask_method == mask::MaskingMethod::BLOCK_WISE);
  CHECK(c.alpha == 0.5);
  CHECK(c.gamma == 1.5);
  CHECK(c.seed == 99);
  CHECK(c.repeat_factors.at(Family::HAZE) == 2);
  CHECK(c.encoder.num_blocks == 4);
  CHECK(c.cls.base_width == 8);
  CHECK(c.probe == false);
  CHECK(c.probe_k == 3);
  CHECK(c.probe_max_per_family == 10);

  SUBCASE("unknown top-level key") {
    fs::path q = dir / "bad1.json";
    std::ofstream(q) << R"({"mode": "pretrain", "bogus": 1})";
    try {
      pipeline::load_train_config(q.string());
      CHECK(false);
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    }
  }
  SUBCASE("unknown nested key") {
    fs::path q = dir / "bad2.json";
    std::ofstream(q) << R"({"mask": {"ratio": 0.5, "pitch": 8}})";
    CHECK_THROWS_AS(pipeline::load_train_config(q.string()),
                    std::runtime_error);
  }
  SUBCASE("bad method name") {
    fs::path q = dir / "bad3.json";
    std::ofstream(q) << R"({"mask": {"method": "diagonal"}})";
    CHECK_THROWS(pipeline::load_train_config(q.string()));
  }
  SUBCASE("malformed JSON") {
    fs::path q = dir / "bad4.json";
    std::ofstream(q) << "{ not json";
    CHECK_THROWS_AS(pipeline::load_train_config(q.string()),
                    std::runtime_error);
  }
  fs::remove_all(dir);
}

TEST_CASE("canonical config text and digest identify a run") {
  pipeline::TrainConfig a = tiny_pretrain_cfg(5);
  std::string text = pipeline::config_canonical(a);
  CHECK(text.find("mode=pretrain\n") != std::string::npos);
  CHECK(text.find("mask.ratio=0.5") != std::string::npos);
  CHECK(pipeline::config_digest(a) == pipeline::config_digest(a));
  CHECK(pipeline::config_digest(a).size() == 16);

  pipeline::TrainConfig b = a;
  b.mask_ratio = 0.75;
  CHECK(pipeline::config_digest(a) != pipeline::config_digest(b));
  pipeline::TrainConfig c = a;
  c.seed = 6;
  CHECK(pipeline::config_digest(a) != pipeline::config_digest(c));
}

TEST_CASE("cosine schedule endpoints and shape") {
  const double lr0 = 2e-4;
  CHECK(pipeline::cosine_lr(lr0, 0, 100) == lr0);
  CHECK(pipeline::cosine_lr(lr0, 99, 100) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(pipeline::cosine_lr(lr0, 500, 100) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(pipeline::cosine_lr(lr0, 0, 1) == lr0);  // single-step run
  // Halfway point sits halfway between the endpoints.
  CHECK(pipeline::cosine_lr(lr0, 50, 101) ==
        doctest::Approx(1e-6 + (lr0 - 1e-6) * 0.5).epsilon(1e-12));
  // Monotone non-increasing across the whole schedule.
  double prev = pipeline::cosine_lr(lr0, 0, 100);
  for (std::int64_t t = 1; t < 100; ++t) {
    double v = pipeline::cosine_lr(lr0, t, 100);
    CHECK(v <= prev + 1e-15);
    prev = v;
  }
}

TEST_CASE("one pre-training step: bookkeeping and split learning rates") {
  pipeline::TrainConfig cfg = tiny_pretrain_cfg(21);
  std::vector<degrade::PairedSample> samples =
      memory_samples(4, Family::GAUSSIAN_NOISE, 77);
  std::vector<const degrade::PairedSample*> batch = {&samples[0], &samples[1]};

  model::PretrainModel m = tiny_model(cfg);
  pipeline::TrainState st;
  st.init(m);
  std::vector<float> enc_before = m.encoder.params().values;
  std::vector<float> cls_before = m.cls.params().values;

  objectives::LossBreakdown b = pipeline::pretrain_step(m, st, batch, cfg);
  CHECK(st.iteration == 1);
  CHECK(std::isfinite(b.total));
  CHECK(b.pix >= 0.0);
  CHECK(b.cls >= 0.0);
  CHECK(b.total == doctest::Approx(cfg.alpha * b.pix + b.cls).epsilon(1e-12));
  CHECK(m.encoder.params().values != enc_before);
  CHECK(m.cls.params().values != cls_before);

  SUBCASE("zero encoder rate freezes the encoder bit for bit") {
    pipeline::TrainConfig frozen = cfg;
    frozen.lr_encoder = 0.0;
    model::PretrainModel m2 = tiny_model(frozen);
    pipeline::TrainState st2;
    st2.init(m2);
    std::vector<float> enc0 = m2.encoder.params().values;
    std::vector<float> cls0 = m2.cls.params().values;
    pipeline::pretrain_step(m2, st2, batch, frozen);
    CHECK(m2.encoder.params().values == enc0);  // untouched, not just close
    CHECK(m2.cls.params().values != cls0);
  }

  SUBCASE("non-finite loss raises a diagnostic error naming the iteration") {
    model::PretrainModel m3 = tiny_model(cfg);
    pipeline::TrainState st3;
    st3.init(m3);
    m3.encoder.params().values[0] = std::nanf("");
    try {
      pipeline::pretrain_step(m3, st3, batch, cfg);
      CHECK(false);
    } catch (const std::runtime_error& e) {
      std::string msg = e.what();
      CHECK(msg.find("iteration") != std::string::npos);
      CHECK(msg.find("seed") != std::string::npos);
    }
  }
}

TEST_CASE("steps are deterministic given the seed") {
  pipeline::TrainConfig cfg = tiny_pretrain_cfg(31);
  std::vector<degrade::PairedSample> samples =
      memory_samples(4, Family::LOW_LIGHT, 78);
  std::vector<const degrade::PairedSample*> batch = {&samples[2], &samples[3]};

  model::PretrainModel a = tiny_model(cfg);
  model::PretrainModel b = tiny_model(cfg);
  pipeline::TrainState sa, sb;
  sa.init(a);
  sb.init(b);
  for (int i = 0; i < 3; ++i) {
    objectives::LossBreakdown la = pipeline::pretrain_step(a, sa, batch, cfg);
    objectives::LossBreakdown lb = pipeline::pretrain_step(b, sb, batch, cfg);
    CHECK(la.total == lb.total);
  }
  CHECK(a.encoder.params().values == b.encoder.params().values);
  CHECK(a.cls.params().values == b.cls.params().values);
  CHECK(a.recon.params().values == b.recon.params().values);
}

TEST_CASE("the classification head fits a single-family corpus") {
  pipeline::TrainConfig cfg = tiny_pretrain_cfg(41);
  cfg.lr_decoder = 3e-2;
  std::vector<degrade::PairedSample> samples =
      memory_samples(4, Family::GAUSSIAN_NOISE, 79);
  std::vector<const degrade::PairedSample*> batch = {&samples[0], &samples[1],
                                                     &samples[2], &samples[3]};
  model::PretrainModel m = tiny_model(cfg);
  pipeline::TrainState st;
  st.init(m);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 400; ++i) {
    objectives::LossBreakdown b = pipeline::pretrain_step(m, st, batch, cfg);
    if (i == 0) first = b.cls;
    last = b.cls;
  }
  CHECK(last < 0.05);
  CHECK(last < first / 10.0);
}

TEST_CASE("pre-training runs write logs and checkpoints") {
  fs::path dir = temp_dir("run");
  std::string manifest = tiny_corpus(dir / "corpus", 3, 6001);
  pipeline::TrainConfig cfg = tiny_pretrain_cfg(51);

  fs::path out = dir / "out";
  model::Checkpoint final_ckpt =
      pipeline::pretrain_run(cfg, manifest, out.string());
  CHECK(final_ckpt.meta.iteration == 4);
  CHECK(final_ckpt.kind == "pretrain");
  CHECK(final_ckpt.meta.loss_digest.size() == 16);
  CHECK(fs::exists(out / "checkpoint_2.ckpt"));
  CHECK(fs::exists(out / "checkpoint_final.ckpt"));

  std::ifstream log(out / "loss_log.tsv");
  std::string line;
  std::getline(log, line);
  CHECK(line == "iter\tpix\tcls\ttotal\tlr_enc\tlr_dec");
  int rows = 0;
  while (std::getline(log, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);

  SUBCASE("resuming continues bit-exactly") {
    fs::path out2 = dir / "resumed";
    model::Checkpoint resumed = pipeline::pretrain_run(
        cfg, manifest, out2.string(), (out / "checkpoint_2.ckpt").string());
    CHECK(resumed.meta.iteration == 4);
    CHECK(slurp(out / "checkpoint_final.ckpt") ==
          slurp(out2 / "checkpoint_final.ckpt"));
  }
  SUBCASE("resume refuses a mismatched config") {
    pipeline::TrainConfig other = cfg;
    other.mask_ratio = 0.25;
    CHECK_THROWS_AS(
        pipeline::pretrain_run(other, manifest, (dir / "x").string(),
                               (out / "checkpoint_2.ckpt").string()),
        std::runtime_error);
  }
  SUBCASE("zero iterations still produce a final checkpoint") {
    pipeline::TrainConfig zero = cfg;
    zero.iterations = 0;
    fs::path out3 = dir / "zero";
    model::Checkpoint c = pipeline::pretrain_run(zero, manifest, out3.string());
    CHECK(c.meta.iteration == 0);
    CHECK(fs::exists(out3 / "checkpoint_final.ckpt"));
    std::ifstream l(out3 / "loss_log.tsv");
    std::string h;
    std::getline(l, h);
    CHECK(h == "iter\tpix\tcls\ttotal\tlr_enc\tlr_dec");
    std::string rest;
    CHECK(!std::getline(l, rest));
  }
  fs::remove_all(dir);
}

TEST_CASE("fine-tuning holds out every sixth sample and reports per family") {
  fs::path dir = temp_dir("ft");
  std::string manifest = tiny_corpus(dir / "corpus", 7, 6002);

  pipeline::TrainConfig cfg = tiny_pretrain_cfg(61);
  cfg.mode = pipeline::TrainMode::FINETUNE;
  cfg.iterations = 3;
  cfg.lr_encoder = 1e-4;

  fs::path out = dir / "ft_out";
  pipeline::FinetuneResult r =
      pipeline::finetune_run(cfg, manifest, "", out.string());
  // 7 samples per family -> ranks 0..6, rank 5 held out -> 1 eval sample each.
  REQUIRE(r.report.families.size() == 2);
  for (const auto& [name, fm] : r.report.families) {
    CHECK(fm.count == 1);
    CHECK(fm.psnr_mean > 0.0);
    CHECK(fm.ssim_mean > 0.0);
    CHECK(fm.ssim_mean <= 1.0);
  }
  CHECK(r.report.config_digest == pipeline::config_digest(cfg));
  CHECK(r.report.checkpoint_digest.size() == 16);
  CHECK(fs::exists(r.checkpoint_path));
  CHECK(fs::exists(out / "report.json"));
  CHECK(fs::exists(out / "report.txt"));
  model::Checkpoint c = model::load_checkpoint(r.checkpoint_path);
  CHECK(c.kind == "restoration");

  SUBCASE("initialization from a pre-trained encoder is accepted") {
    pipeline::TrainConfig pre = tiny_pretrain_cfg(62);
    pre.iterations = 2;
    fs::path pdir = dir / "pre";
    pipeline::pretrain_run(pre, manifest, pdir.string());
    pipeline::FinetuneResult r2 = pipeline::finetune_run(
        cfg, manifest, (pdir / "checkpoint_final.ckpt").string(),
        (dir / "ft2").string());
    CHECK(r2.report.families.size() == 2);
  }
  fs::remove_all(dir);
}

TEST_CASE("fine-tuning runs are reproducible") {
  fs::path dir = temp_dir("ftrep");
  std::string manifest = tiny_corpus(dir / "corpus", 6, 6003);
  pipeline::TrainConfig cfg = tiny_pretrain_cfg(71);
  cfg.mode = pipeline::TrainMode::FINETUNE;
  cfg.iterations = 2;

  pipeline::FinetuneResult a =
      pipeline::finetune_run(cfg, manifest, "", (dir / "a").string());
  pipeline::FinetuneResult b =
      pipeline::finetune_run(cfg, manifest, "", (dir / "b").string());
  CHECK(slurp(dir / "a" / "report.txt") == slurp(dir / "b" / "report.txt"));
  CHECK(slurp(dir / "a" / "checkpoint_final.ckpt") ==
        slurp(dir / "b" / "checkpoint_final.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("the ablation runner sweeps one knob and tabulates every arm") {
  fs::path dir = temp_dir("ablate");
  std::string manifest = tiny_corpus(dir / "corpus", 7, 6004);

  pipeline::TrainConfig pre = tiny_pretrain_cfg(9);
  pre.checkpoint_every = 0;
  pipeline::TrainConfig ft = pre;
  ft.mode = pipeline::TrainMode::FINETUNE;
  ft.iterations = 3;

  std::vector<pipeline::AblationRow> rows = pipeline::run_ablation(
      pipeline::AblationAxis::MASK_RATIO, {"0", "0.5"}, pre, ft, manifest,
      (dir / "out").string());

  REQUIRE(rows.size() == 2);
  CHECK(rows[0].value == "0");
  CHECK(rows[1].value == "0.5");
  for (const pipeline::AblationRow& r : rows) {
    CHECK(std::isfinite(r.psnr_avg));
    CHECK(r.ssim_avg >= -1.0);
    CHECK(r.ssim_avg <= 1.0);
  }
  CHECK(fs::exists(dir / "out" / "mask_ratio_0" / "pretrain" /
                   "checkpoint_final.ckpt"));
  CHECK(fs::exists(dir / "out" / "mask_ratio_0.5" / "finetune" /
                   "report.txt"));
  std::vector<char> raw = slurp(dir / "out" / "ablation.tsv");
  std::string table(raw.begin(), raw.end());
  CHECK(table.find("mask_ratio\t0\t") != std::string::npos);
  CHECK(table.find("mask_ratio\t0.5\t") != std::string::npos);

  CHECK_THROWS_AS(
      pipeline::run_ablation(pipeline::AblationAxis::MASK_RATIO, {}, pre, ft,
                             manifest, (dir / "out2").string()),
      std::invalid_argument);
  fs::remove_all(dir);
}

}  // TEST_SUITE
