#include "mdc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mdc/errors.hpp"
#include "mdc/image_io.hpp"
#include "mdc/metrics.hpp"
#include "mdc/probe.hpp"
#include "mdc/rng.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace mdc::pipeline {

// ---- repeat sampler --------------------------------------------------------

RepeatSampler::RepeatSampler(const std::vector<degrade::Family>& sample_families,
                             const std::map<degrade::Family, int>& factors,
                             std::uint64_t seed)
    : families_(sample_families), seed_(seed) {
  if (sample_families.empty())
    throw std::invalid_argument("RepeatSampler: empty corpus");
  std::set<degrade::Family> present(sample_families.begin(),
                                    sample_families.end());
  for (const auto& [f, factor] : factors) {
    if (factor < 1)
      throw std::invalid_argument(
          std::string("RepeatSampler: repetition factor for ") +
          degrade::family_name(f) + " must be >= 1, got " +
          std::to_string(factor));
    if (!present.count(f))
      warnings_.push_back(std::string("repeat factor for absent family '") +
                          degrade::family_name(f) + "' ignored");
  }
  for (std::size_t i = 0; i < sample_families.size(); ++i) {
    auto it = factors.find(sample_families[i]);
    int factor = it == factors.end() ? 1 : it->second;
    for (int r = 0; r < factor; ++r) base_.push_back(i);
  }
}

const std::vector<std::size_t>& RepeatSampler::epoch(std::int64_t e) const {
  if (e == cached_epoch_) return cached_perm_;
  cached_perm_ = base_;
  rng::Stream s(rng::derive(seed_, "epoch", static_cast<std::uint64_t>(e)));
  s.shuffle(cached_perm_);
  cached_epoch_ = e;
  return cached_perm_;
}

std::size_t RepeatSampler::sample_at(std::int64_t position) const {
  std::int64_t len = static_cast<std::int64_t>(base_.size());
  return epoch(position / len)[static_cast<std::size_t>(position % len)];
}

std::map<degrade::Family, std::int64_t> RepeatSampler::histogram() const {
  std::map<degrade::Family, std::int64_t> h;
  for (std::size_t i : base_) ++h[families_[i]];
  return h;
}

// ---- config ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (iterations < 0)
    throw std::invalid_argument("TrainConfig: negative iterations");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size < 1");
  if (crop < 1) throw std::invalid_argument("TrainConfig: crop < 1");
  if (!(lr_encoder >= 0.0) || !(lr_decoder >= 0.0))
    throw std::invalid_argument("TrainConfig: negative learning rate");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
    throw std::invalid_argument("TrainConfig: mask_ratio outside [0,1]");
  if (mask_patch < 1) throw std::invalid_argument("TrainConfig: mask_patch < 1");
  if (!(alpha >= 0.0)) throw std::invalid_argument("TrainConfig: negative alpha");
  if (!(gamma >= 0.0)) throw std::invalid_argument("TrainConfig: negative gamma");
  if (checkpoint_every < 0)
    throw std::invalid_argument("TrainConfig: negative checkpoint_every");
  if (probe_k < 1) throw std::invalid_argument("TrainConfig: probe_k < 1");
  if (probe_max_per_family < 0)
    throw std::invalid_argument("TrainConfig: negative probe_max_per_family");
  if (mode == TrainMode::PRETRAIN && crop % mask_patch != 0)
    throw std::invalid_argument("TrainConfig: crop " + std::to_string(crop) +
                                " not divisible by mask_patch " +
                                std::to_string(mask_patch));
  encoder.validate();
  cls.validate();
}

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
  for (auto& [k, v] : j.items())
    if (!known.count(k))
      throw std::runtime_error("config: unknown key '" + k + "' in " + where);
}

}  // namespace

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("config: bad JSON in " + path + ": " + e.what());
  }

  TrainConfig c;
  try {
    reject_unknown_keys(
        j,
        {"mode", "iterations", "batch_size", "crop", "lr_encoder",
         "lr_decoder", "mask", "alpha", "gamma", "seed", "checkpoint_every",
         "repeat_factors", "encoder", "cls", "probe"},
        "top level");
    if (j.contains("mode")) {
      std::string m = j["mode"].get<std::string>();
      if (m == "pretrain")
        c.mode = TrainMode::PRETRAIN;
      else if (m == "finetune")
        c.mode = TrainMode::FINETUNE;
      else
        throw std::runtime_error("config: unknown mode '" + m + "'");
    }
    if (j.contains("iterations")) c.iterations = j["iterations"].get<std::int64_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("crop")) c.crop = j["crop"].get<int>();
    if (j.contains("lr_encoder")) c.lr_encoder = j["lr_encoder"].get<double>();
    if (j.contains("lr_decoder")) c.lr_decoder = j["lr_decoder"].get<double>();
    if (j.contains("mask")) {
      const json& m = j["mask"];
      reject_unknown_keys(m, {"ratio", "patch", "method"}, "mask");
      if (m.contains("ratio")) c.mask_ratio = m["ratio"].get<double>();
      if (m.contains("patch")) c.mask_patch = m["patch"].get<int>();
      if (m.contains("method"))
        c.mask_method = mask::method_from_name(m["method"].get<std::string>());
    }
    if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
    if (j.contains("gamma")) c.gamma = j["gamma"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("checkpoint_every"))
      c.checkpoint_every = j["checkpoint_every"].get<std::int64_t>();
    if (j.contains("repeat_factors"))
      for (auto& [name, v] : j["repeat_factors"].items())
        c.repeat_factors[degrade::family_from_name(name)] = v.get<int>();
    if (j.contains("encoder")) {
      const json& e = j["encoder"];
      reject_unknown_keys(
          e, {"num_blocks", "channels", "strides", "input_channels", "topology"},
          "encoder");
      if (e.contains("num_blocks")) c.encoder.num_blocks = e["num_blocks"].get<int>();
      if (e.contains("channels"))
        c.encoder.channels = e["channels"].get<std::vector<int>>();
      if (e.contains("strides"))
        c.encoder.strides = e["strides"].get<std::vector<int>>();
      if (e.contains("input_channels"))
        c.encoder.input_channels = e["input_channels"].get<int>();
      if (e.contains("topology")) {
        std::string t = e["topology"].get<std::string>();
        if (t == "plain")
          c.encoder.topology = model::Topology::PLAIN;
        else if (t == "unet_lite")
          c.encoder.topology = model::Topology::UNET_LITE;
        else
          throw std::runtime_error("config: unknown topology '" + t + "'");
      }
    }
    if (j.contains("cls")) {
      const json& l = j["cls"];
      reject_unknown_keys(l, {"num_classes", "base_width", "blocks_per_stage"},
                          "cls");
      if (l.contains("num_classes")) c.cls.num_classes = l["num_classes"].get<int>();
      if (l.contains("base_width")) c.cls.base_width = l["base_width"].get<int>();
      if (l.contains("blocks_per_stage"))
        c.cls.blocks_per_stage = l["blocks_per_stage"].get<int>();
    }
    if (j.contains("probe")) {
      const json& p = j["probe"];
      reject_unknown_keys(p, {"enabled", "k", "max_per_family"}, "probe");
      if (p.contains("enabled")) c.probe = p["enabled"].get<bool>();
      if (p.contains("k")) c.probe_k = p["k"].get<int>();
      if (p.contains("max_per_family"))
        c.probe_max_per_family = p["max_per_family"].get<int>();
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("config: bad value in " + path + ": " + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string config_canonical(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "mode=" << (cfg.mode == TrainMode::PRETRAIN ? "pretrain" : "finetune")
     << "\n";
  os << "iterations=" << cfg.iterations << "\n";
  os << "batch_size=" << cfg.batch_size << "\n";
  os << "crop=" << cfg.crop << "\n";
  os << "lr_encoder=" << fmt_double(cfg.lr_encoder) << "\n";
  os << "lr_decoder=" << fmt_double(cfg.lr_decoder) << "\n";
  os << "mask.ratio=" << fmt_double(cfg.mask_ratio) << "\n";
  os << "mask.patch=" << cfg.mask_patch << "\n";
  os << "mask.method=" << mask::method_name(cfg.mask_method) << "\n";
  os << "alpha=" << fmt_double(cfg.alpha) << "\n";
  os << "gamma=" << fmt_double(cfg.gamma) << "\n";
  os << "seed=" << cfg.seed << "\n";
  os << "checkpoint_every=" << cfg.checkpoint_every << "\n";
  os << "encoder.num_blocks=" << cfg.encoder.num_blocks << "\n";
  os << "encoder.channels=" << join_ints(cfg.encoder.channels) << "\n";
  os << "encoder.strides=" << join_ints(cfg.encoder.strides) << "\n";
  os << "encoder.input_channels=" << cfg.encoder.input_channels << "\n";
  os << "encoder.topology="
     << (cfg.encoder.topology == model::Topology::PLAIN ? "plain" : "unet_lite")
     << "\n";
  os << "cls.num_classes=" << cfg.cls.num_classes << "\n";
  os << "cls.base_width=" << cfg.cls.base_width << "\n";
  os << "cls.blocks_per_stage=" << cfg.cls.blocks_per_stage << "\n";
  for (const auto& [f, r] : cfg.repeat_factors)
    os << "repeat." << degrade::family_name(f) << "=" << r << "\n";
  os << "probe.enabled=" << (cfg.probe ? 1 : 0) << "\n";
  os << "probe.k=" << cfg.probe_k << "\n";
  os << "probe.max_per_family=" << cfg.probe_max_per_family << "\n";
  return os.str();
}

std::string config_digest(const TrainConfig& cfg) {
  return rng::hex64(rng::fnv1a(config_canonical(cfg)));
}

// ---- train state -----------------------------------------------------------

void TrainState::init(const model::PretrainModel& m) {
  enc.init(m.encoder.params().size());
  cls.init(m.cls.params().size());
  recon.init(m.recon.params().size());
  iteration = 0;
}

void TrainState::init(const model::RestorationModel& m) {
  enc.init(m.encoder.params().size());
  cls.init(0);
  recon.init(m.head.params().size());
  iteration = 0;
}

// ---- pre-training ----------------------------------------------------------

namespace {

struct CroppedPair {
  Tensor lq, gt;
};

CroppedPair crop_and_flip(const degrade::PairedSample& s, int crop,
                          std::uint64_t seed, std::int64_t iteration,
                          std::size_t slot) {
  if (s.lq.h < crop || s.lq.w < crop)
    throw InvalidShapeError("training crop " + std::to_string(crop) +
                            " exceeds sample '" + s.id + "' (" +
                            std::to_string(s.lq.h) + "x" +
                            std::to_string(s.lq.w) + ")");
  rng::Stream cs(rng::derive(seed, "crop",
                             static_cast<std::uint64_t>(iteration), slot));
  int y = s.lq.h == crop
              ? 0
              : static_cast<int>(cs.uniform_int(0, s.lq.h - crop));
  int x = s.lq.w == crop
              ? 0
              : static_cast<int>(cs.uniform_int(0, s.lq.w - crop));
  CroppedPair out{img::crop(s.lq, y, x, crop, crop),
                  img::crop(s.gt, y, x, crop, crop)};
  rng::Stream fsr(rng::derive(seed, "flip",
                              static_cast<std::uint64_t>(iteration), slot));
  if (fsr.bernoulli(0.5)) {
    out.lq = img::hflip(out.lq);
    out.gt = img::hflip(out.gt);
  }
  return out;
}

std::string train_context(std::int64_t iteration, std::uint64_t seed,
                          const std::vector<const degrade::PairedSample*>& batch) {
  std::ostringstream os;
  os << "iteration " << iteration << " (seed " << seed << "; batch ids:";
  for (const degrade::PairedSample* s : batch) os << " " << s->id;
  os << ")";
  return os.str();
}

[[noreturn]] void throw_nonfinite(
    const char* what, std::int64_t iteration, std::uint64_t seed,
    const std::vector<const degrade::PairedSample*>& batch) {
  throw std::runtime_error(std::string(what) + " turned non-finite at " +
                           train_context(iteration, seed, batch));
}

}  // namespace

objectives::LossBreakdown pretrain_step(
    model::PretrainModel& m, TrainState& st,
    const std::vector<const degrade::PairedSample*>& batch,
    const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("pretrain_step: empty batch");
  if (!m.encoder.config().masked_mode)
    throw std::invalid_argument(
        "pretrain_step: the encoder must be built in masked mode");

  const std::size_t n = batch.size();
  std::vector<float> ge(m.encoder.params().size(), 0.0f);
  std::vector<float> gc(m.cls.params().size(), 0.0f);
  std::vector<float> gr(m.recon.params().size(), 0.0f);

  double pix_sum = 0.0, cls_sum = 0.0;
  for (std::size_t slot = 0; slot < n; ++slot) {
    const degrade::PairedSample& s = *batch[slot];
    // Loss-layer validation (e.g. non-finite logits out of diverged weights)
    // throws std::invalid_argument; attach the training context before it
    // surfaces so a crashing run is diagnosable from the message alone.
    try {
      CroppedPair cp = crop_and_flip(s, cfg.crop, cfg.seed, st.iteration, slot);
      mask::MaskMap mk = mask::generate_mask(
          cfg.crop, cfg.crop, cfg.mask_patch, cfg.mask_ratio, cfg.mask_method,
          rng::derive(cfg.seed, "mask",
                      static_cast<std::uint64_t>(st.iteration), slot));
      Tensor masked = mask::apply_mask(cp.lq, mk);

      model::Encoder::Trace etr;
      model::FeaturePyramid pyr = m.encoder.forward(masked, &mk, &etr);
      model::ClsDecoder::Trace ctr;
      std::vector<double> logits = m.cls.forward(pyr, &ctr);
      model::ReconDecoder::Trace rtr;
      Tensor rec = m.recon.forward(pyr.entries.back().feature, &rtr);

      int target = static_cast<int>(s.spec.family);
      objectives::LossBreakdown b = objectives::total_loss(
          rec, cp.gt, logits, target, cfg.alpha, cfg.gamma);
      if (!std::isfinite(b.total))
        throw_nonfinite("pretrain loss", st.iteration, cfg.seed, batch);
      pix_sum += b.pix;
      cls_sum += b.cls;

      std::vector<double> glog = objectives::focal_loss_grad(
          logits, target, cfg.gamma, {}, 1.0 / static_cast<double>(n));
      Tensor gout = objectives::pixel_l1_grad(
          rec, cp.gt, cfg.alpha / static_cast<double>(n));
      std::vector<Tensor> tap_grads = m.cls.backward(ctr, glog, gc);
      Tensor gdeep = m.recon.backward(rtr, gout, gr);
      nn::add_inplace(tap_grads.back(), gdeep);
      m.encoder.backward(etr, tap_grads, ge);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(std::string(e.what()) + " at " +
                               train_context(st.iteration, cfg.seed, batch));
    }
  }

  nn::adam_step(m.encoder.params(), ge, st.enc, st.adam, cfg.lr_encoder);
  nn::adam_step(m.cls.params(), gc, st.cls, st.adam, cfg.lr_decoder);
  nn::adam_step(m.recon.params(), gr, st.recon, st.adam, cfg.lr_decoder);
  ++st.iteration;

  objectives::LossBreakdown mean;
  mean.alpha = cfg.alpha;
  mean.pix = pix_sum / static_cast<double>(n);
  mean.cls = cls_sum / static_cast<double>(n);
  mean.total = cfg.alpha * mean.pix + mean.cls;
  return mean;
}

namespace {

void append_opt_tensors(model::Checkpoint& c, const std::string& prefix,
                        const nn::AdamState& st) {
  model::NamedTensor m;
  m.name = prefix + ".m";
  m.shape = {static_cast<int>(st.m.size())};
  m.data = st.m;
  c.tensors.push_back(std::move(m));
  model::NamedTensor v;
  v.name = prefix + ".v";
  v.shape = {static_cast<int>(st.v.size())};
  v.data = st.v;
  c.tensors.push_back(std::move(v));
}

void load_opt_tensors(const model::Checkpoint& c, const std::string& prefix,
                      nn::AdamState& st) {
  const model::NamedTensor* m = c.find(prefix + ".m");
  const model::NamedTensor* v = c.find(prefix + ".v");
  if (m == nullptr || v == nullptr)
    throw CheckpointError("checkpoint is missing optimizer state '" + prefix +
                          "'");
  if (m->data.size() != st.m.size() || v->data.size() != st.v.size())
    throw CheckpointError("optimizer state '" + prefix +
                          "' does not match the model size");
  st.m = m->data;
  st.v = v->data;
}

std::int64_t opt_step_from_config(const model::Checkpoint& c,
                                  const std::string& key) {
  auto it = c.config.find(key);
  if (it == c.config.end())
    throw CheckpointError("checkpoint config is missing key '" + key + "'");
  return std::stoll(it->second);
}

// The hyperparameters that determine the parameter trajectory. A resumed run
// must match every one of these to be the bit-exact continuation it claims to
// be; run-length and snapshot cadence (iterations, checkpoint_every, probe.*)
// stay free because they never influence a single update.
std::map<std::string, std::string> trajectory_config(const TrainConfig& cfg) {
  std::map<std::string, std::string> t;
  t["train.batch_size"] = std::to_string(cfg.batch_size);
  t["train.crop"] = std::to_string(cfg.crop);
  t["train.lr_encoder"] = fmt_double(cfg.lr_encoder);
  t["train.lr_decoder"] = fmt_double(cfg.lr_decoder);
  t["train.mask.ratio"] = fmt_double(cfg.mask_ratio);
  t["train.mask.patch"] = std::to_string(cfg.mask_patch);
  t["train.mask.method"] = mask::method_name(cfg.mask_method);
  t["train.alpha"] = fmt_double(cfg.alpha);
  t["train.gamma"] = fmt_double(cfg.gamma);
  std::ostringstream rep;
  for (const auto& [f, r] : cfg.repeat_factors)
    rep << (rep.tellp() > 0 ? "," : "") << degrade::family_name(f) << "=" << r;
  t["train.repeat_factors"] = rep.str();
  return t;
}

model::Checkpoint make_pretrain_checkpoint(const model::PretrainModel& m,
                                           const TrainState& st,
                                           const TrainConfig& cfg,
                                           std::uint64_t loss_hash) {
  model::Checkpoint c;
  c.kind = "pretrain";
  c.config = model::encoder_config_map(m.encoder.config());
  for (const auto& [k, v] : model::cls_config_map(m.cls.config()))
    c.config[k] = v;
  for (const auto& [k, v] : trajectory_config(cfg)) c.config[k] = v;
  c.config["opt.encoder.step"] = std::to_string(st.enc.step);
  c.config["opt.cls.step"] = std::to_string(st.cls.step);
  c.config["opt.recon.step"] = std::to_string(st.recon.step);
  c.meta.iteration = st.iteration;
  c.meta.seed = cfg.seed;
  c.meta.loss_digest = rng::hex64(loss_hash);
  model::dump_store(c, "encoder", m.encoder.params());
  model::dump_store(c, "cls", m.cls.params());
  model::dump_store(c, "recon", m.recon.params());
  append_opt_tensors(c, "opt.encoder", st.enc);
  append_opt_tensors(c, "opt.cls", st.cls);
  append_opt_tensors(c, "opt.recon", st.recon);
  return c;
}

void resume_pretrain(const std::string& path, model::PretrainModel& m,
                     TrainState& st, std::uint64_t& loss_hash,
                     const TrainConfig& cfg) {
  model::Checkpoint c = model::load_checkpoint(path);
  if (c.kind != "pretrain")
    throw CheckpointError("resume: expected a 'pretrain' checkpoint, got '" +
                          c.kind + "'");
  if (c.meta.seed != cfg.seed)
    throw CheckpointError(
        "resume: checkpoint seed " + std::to_string(c.meta.seed) +
        " differs from config seed " + std::to_string(cfg.seed));
  std::map<std::string, std::string> want =
      model::encoder_config_map(m.encoder.config());
  for (const auto& [k, v] : model::cls_config_map(m.cls.config())) want[k] = v;
  for (const auto& [k, v] : trajectory_config(cfg)) want[k] = v;
  for (const auto& [k, v] : want) {
    auto it = c.config.find(k);
    if (it == c.config.end())
      throw CheckpointError("resume: checkpoint lacks config key '" + k + "'");
    if (it->second != v)
      throw CheckpointError("resume: config mismatch on '" + k +
                            "': checkpoint '" + it->second + "' vs run '" + v +
                            "'");
  }
  model::load_store(c, "encoder", m.encoder.params());
  model::load_store(c, "cls", m.cls.params());
  model::load_store(c, "recon", m.recon.params());
  load_opt_tensors(c, "opt.encoder", st.enc);
  load_opt_tensors(c, "opt.cls", st.cls);
  load_opt_tensors(c, "opt.recon", st.recon);
  st.enc.step = opt_step_from_config(c, "opt.encoder.step");
  st.cls.step = opt_step_from_config(c, "opt.cls.step");
  st.recon.step = opt_step_from_config(c, "opt.recon.step");
  st.iteration = c.meta.iteration;
  loss_hash = std::stoull(c.meta.loss_digest, nullptr, 16);
}

std::vector<degrade::Family> corpus_families(
    const std::vector<degrade::PairedSample>& samples) {
  std::vector<degrade::Family> f;
  f.reserve(samples.size());
  for (const degrade::PairedSample& s : samples) f.push_back(s.spec.family);
  return f;
}

// Deterministic per-family head of the corpus for probe snapshots.
std::vector<degrade::PairedSample> probe_subset(
    const std::vector<degrade::PairedSample>& samples, int max_per_family) {
  if (max_per_family <= 0) return samples;
  std::map<degrade::Family, int> taken;
  std::vector<degrade::PairedSample> out;
  for (const degrade::PairedSample& s : samples)
    if (taken[s.spec.family]++ < max_per_family) out.push_back(s);
  return out;
}

std::set<std::int64_t> quartile_iterations(std::int64_t total) {
  std::set<std::int64_t> snaps;
  for (int q = 0; q <= 4; ++q)
    snaps.insert(std::llround(static_cast<double>(total) * q / 4.0));
  return snaps;
}

std::string loss_line(std::int64_t iter, const objectives::LossBreakdown& b,
                      double lr_enc, double lr_dec) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n",
                static_cast<long long>(iter), b.pix, b.cls, b.total, lr_enc,
                lr_dec);
  return buf;
}

constexpr const char* kLossHeader = "iter\tpix\tcls\ttotal\tlr_enc\tlr_dec\n";

}  // namespace

model::Checkpoint pretrain_run(const TrainConfig& cfg,
                               const std::string& manifest_path,
                               const std::string& out_dir,
                               const std::string& resume_from) {
  cfg.validate();
  if (cfg.mode != TrainMode::PRETRAIN)
    throw std::invalid_argument("pretrain_run: config mode is not pretrain");
  fs::create_directories(out_dir);

  std::vector<degrade::PairedSample> samples =
      degrade::load_corpus(manifest_path);
  if (samples.empty())
    throw std::invalid_argument("pretrain_run: corpus has no samples");

  model::EncoderConfig enc_cfg = cfg.encoder;
  enc_cfg.masked_mode = true;
  model::PretrainModel m(enc_cfg, cfg.cls, rng::derive(cfg.seed, "init"));
  TrainState st;
  st.init(m);
  std::uint64_t loss_hash = rng::kFnvBasis;
  if (!resume_from.empty()) resume_pretrain(resume_from, m, st, loss_hash, cfg);

  std::vector<degrade::Family> families = corpus_families(samples);
  RepeatSampler sampler(families, cfg.repeat_factors,
                        rng::derive(cfg.seed, "sampler"));

  std::ofstream log(out_dir + "/loss_log.tsv", std::ios::trunc);
  if (!log)
    throw std::runtime_error("pretrain_run: cannot write to " + out_dir);
  log << kLossHeader;

  std::set<degrade::Family> fams(families.begin(), families.end());
  const bool do_probe = cfg.probe && fams.size() >= 2;
  std::ofstream plog;
  if (do_probe) {
    plog.open(out_dir + "/probe_log.tsv", std::ios::trunc);
    plog << "iter\taccuracy\n";
  }
  std::vector<degrade::PairedSample> probe_samples =
      do_probe ? probe_subset(samples, cfg.probe_max_per_family)
               : std::vector<degrade::PairedSample>{};
  std::set<std::int64_t> snaps = quartile_iterations(cfg.iterations);
  auto maybe_probe = [&]() {
    if (!do_probe || !snaps.count(st.iteration)) return;
    snaps.erase(st.iteration);
    double acc =
        probe::probe_accuracy(m.encoder, probe_samples, cfg.crop, 0.0,
                              cfg.mask_patch, cfg.probe_k,
                              rng::derive(cfg.seed, "probe-snapshot"));
    char buf[64];
    std::snprintf(buf, sizeof buf, "%lld\t%.6f\n",
                  static_cast<long long>(st.iteration), acc);
    plog << buf;
    plog.flush();
  };
  // Resumed runs only probe from their own starting point onward.
  for (auto it = snaps.begin(); it != snaps.end();)
    it = *it < st.iteration ? snaps.erase(it) : std::next(it);

  maybe_probe();
  while (st.iteration < cfg.iterations) {
    std::vector<const degrade::PairedSample*> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int bslot = 0; bslot < cfg.batch_size; ++bslot) {
      std::int64_t pos = st.iteration * cfg.batch_size + bslot;
      batch.push_back(&samples[sampler.sample_at(pos)]);
    }
    objectives::LossBreakdown b;
    try {
      b = pretrain_step(m, st, batch, cfg);
    } catch (const std::runtime_error& e) {
      std::ofstream diag(out_dir + "/diagnostics.txt", std::ios::trunc);
      diag << e.what() << "\n";
      throw;
    }
    std::string line = loss_line(st.iteration, b, cfg.lr_encoder, cfg.lr_decoder);
    log << line;
    loss_hash = rng::fnv1a(line, loss_hash);
    if (cfg.checkpoint_every > 0 && st.iteration % cfg.checkpoint_every == 0 &&
        st.iteration < cfg.iterations)
      model::save_checkpoint(
          make_pretrain_checkpoint(m, st, cfg, loss_hash),
          out_dir + "/checkpoint_" + std::to_string(st.iteration) + ".ckpt");
    maybe_probe();
  }
  log.flush();

  model::Checkpoint final_ckpt = make_pretrain_checkpoint(m, st, cfg, loss_hash);
  model::save_checkpoint(final_ckpt, out_dir + "/checkpoint_final.ckpt");
  return final_ckpt;
}

// ---- fine-tuning -----------------------------------------------------------

double cosine_lr(double lr0, std::int64_t t, std::int64_t total) {
  const double lr_min = 1e-6;
  if (t <= 0 || total <= 1) return lr0;
  if (t >= total - 1) return lr_min;
  double phase = M_PI * static_cast<double>(t) / static_cast<double>(total - 1);
  return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + std::cos(phase));
}

namespace {

model::Checkpoint make_restoration_checkpoint(const model::RestorationModel& m,
                                              const TrainState& st,
                                              const TrainConfig& cfg,
                                              std::uint64_t loss_hash) {
  model::Checkpoint c;
  c.kind = "restoration";
  c.config = model::encoder_config_map(m.encoder.config());
  c.meta.iteration = st.iteration;
  c.meta.seed = cfg.seed;
  c.meta.loss_digest = rng::hex64(loss_hash);
  model::dump_store(c, "encoder", m.encoder.params());
  model::dump_store(c, "head", m.head.params());
  return c;
}

std::string iso8601_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

FinetuneResult finetune_run(const TrainConfig& cfg,
                            const std::string& manifest_path,
                            const std::string& init_checkpoint,
                            const std::string& out_dir) {
  cfg.validate();
  if (cfg.mode != TrainMode::FINETUNE)
    throw std::invalid_argument("finetune_run: config mode is not finetune");
  fs::create_directories(out_dir);

  std::vector<degrade::PairedSample> samples =
      degrade::load_corpus(manifest_path);
  if (samples.empty())
    throw std::invalid_argument("finetune_run: corpus has no samples");

  // Every 6th sample of each family (by corpus order) is held out.
  std::vector<std::size_t> train_idx, test_idx;
  std::map<degrade::Family, int> rank;
  for (std::size_t i = 0; i < samples.size(); ++i)
    (rank[samples[i].spec.family]++ % 6 == 5 ? test_idx : train_idx)
        .push_back(i);

  model::RestorationModel rm(cfg.encoder, rng::derive(cfg.seed, "init"));
  if (!init_checkpoint.empty()) model::import_encoder(init_checkpoint, rm);
  TrainState st;
  st.init(rm);

  std::vector<degrade::Family> train_families;
  for (std::size_t i : train_idx)
    train_families.push_back(samples[i].spec.family);
  RepeatSampler sampler(train_families, cfg.repeat_factors,
                        rng::derive(cfg.seed, "sampler"));

  std::ofstream log(out_dir + "/loss_log.tsv", std::ios::trunc);
  if (!log)
    throw std::runtime_error("finetune_run: cannot write to " + out_dir);
  log << kLossHeader;
  std::uint64_t loss_hash = rng::kFnvBasis;

  const std::size_t n = static_cast<std::size_t>(cfg.batch_size);
  const std::vector<int> taps = model::tap_indices(cfg.encoder.num_blocks);
  while (st.iteration < cfg.iterations) {
    double lr = cosine_lr(cfg.lr_encoder, st.iteration, cfg.iterations);
    std::vector<float> ge(rm.encoder.params().size(), 0.0f);
    std::vector<float> gh(rm.head.params().size(), 0.0f);
    std::vector<const degrade::PairedSample*> batch;
    for (std::size_t bslot = 0; bslot < n; ++bslot) {
      std::int64_t pos =
          st.iteration * cfg.batch_size + static_cast<std::int64_t>(bslot);
      batch.push_back(&samples[train_idx[sampler.sample_at(pos)]]);
    }
    double pix_sum = 0.0;
    for (std::size_t slot = 0; slot < n; ++slot) {
      const degrade::PairedSample& s = *batch[slot];
      CroppedPair cp = crop_and_flip(s, cfg.crop, cfg.seed, st.iteration, slot);
      model::Encoder::Trace etr;
      model::FeaturePyramid pyr = rm.encoder.forward(cp.lq, nullptr, &etr);
      model::ReconDecoder::Trace htr;
      Tensor res = rm.head.forward(pyr.entries.back().feature, &htr);
      Tensor out = cp.lq;
      nn::add_inplace(out, res);
      double pix = objectives::pixel_l1_loss(out, cp.gt);
      if (!std::isfinite(pix)) {
        std::ofstream diag(out_dir + "/diagnostics.txt", std::ios::trunc);
        std::ostringstream os;
        os << "finetune loss turned non-finite at iteration " << st.iteration
           << " (seed " << cfg.seed << "; batch ids:";
        for (const degrade::PairedSample* p : batch) os << " " << p->id;
        os << ")";
        diag << os.str() << "\n";
        throw std::runtime_error(os.str());
      }
      pix_sum += pix;
      Tensor gout = objectives::pixel_l1_grad(out, cp.gt,
                                              1.0 / static_cast<double>(n));
      Tensor gdeep = rm.head.backward(htr, gout, gh);
      std::vector<Tensor> tap_grads(taps.size());
      tap_grads.back() = std::move(gdeep);
      rm.encoder.backward(etr, tap_grads, ge);
    }
    nn::adam_step(rm.encoder.params(), ge, st.enc, st.adam, lr);
    nn::adam_step(rm.head.params(), gh, st.recon, st.adam, lr);
    ++st.iteration;

    objectives::LossBreakdown b;
    b.alpha = 1.0;
    b.pix = pix_sum / static_cast<double>(n);
    b.cls = 0.0;
    b.total = b.pix;
    std::string line = loss_line(st.iteration, b, lr, lr);
    log << line;
    loss_hash = rng::fnv1a(line, loss_hash);
  }
  log.flush();

  std::string ckpt_path = out_dir + "/checkpoint_final.ckpt";
  model::save_checkpoint(make_restoration_checkpoint(rm, st, cfg, loss_hash),
                         ckpt_path);

  // Held-out evaluation on full images, per-image metrics averaged by family.
  struct Acc {
    double psnr = 0.0, ssim = 0.0;
    std::int64_t count = 0;
  };
  std::map<std::string, Acc> acc;
  for (std::size_t i : test_idx) {
    const degrade::PairedSample& s = samples[i];
    Tensor restored = clamp01(rm.restore(s.lq));
    Acc& a = acc[degrade::family_name(s.spec.family)];
    a.psnr += metrics::psnr(restored, s.gt);
    a.ssim += metrics::ssim(restored, s.gt);
    a.count += 1;
  }
  report::EvalReport rep;
  for (const auto& [name, a] : acc)
    rep.families[name] = {a.psnr / static_cast<double>(a.count),
                          a.ssim / static_cast<double>(a.count), a.count};
  rep.config_digest = config_digest(cfg);
  rep.checkpoint_digest = report::file_digest_hex(ckpt_path);
  rep.timestamp = iso8601_now();
  report::write_report_json(rep, out_dir + "/report.json");
  report::write_report_text(rep, out_dir + "/report.txt");

  return FinetuneResult{std::move(rm), std::move(rep), ckpt_path};
}

// ---- ablation --------------------------------------------------------------

namespace {

const char* axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::MASK_RATIO: return "mask_ratio";
    case AblationAxis::PATCH_SIZE: return "patch_size";
    case AblationAxis::MASK_METHOD: return "mask_method";
  }
  return "unknown";
}

}  // namespace

std::vector<AblationRow> run_ablation(AblationAxis axis,
                                      const std::vector<std::string>& values,
                                      const TrainConfig& pretrain_cfg,
                                      const TrainConfig& finetune_cfg,
                                      const std::string& manifest_path,
                                      const std::string& out_dir) {
  if (values.empty())
    throw std::invalid_argument("run_ablation: no axis values");
  fs::create_directories(out_dir);
  std::ofstream table(out_dir + "/ablation.tsv", std::ios::trunc);
  if (!table)
    throw std::runtime_error("run_ablation: cannot write to " + out_dir);
  table << "axis\tvalue\tpsnr_avg\tssim_avg\n";
  table.flush();

  std::vector<AblationRow> rows;
  for (const std::string& v : values) {
    TrainConfig pc = pretrain_cfg;
    switch (axis) {
      case AblationAxis::MASK_RATIO:
        pc.mask_ratio = std::stod(v);
        break;
      case AblationAxis::PATCH_SIZE:
        pc.mask_patch = std::stoi(v);
        break;
      case AblationAxis::MASK_METHOD:
        pc.mask_method = mask::method_from_name(v);
        break;
    }
    std::string arm_dir = out_dir + "/" + axis_name(axis) + "_" + v;
    pretrain_run(pc, manifest_path, arm_dir + "/pretrain");
    FinetuneResult fr =
        finetune_run(finetune_cfg, manifest_path,
                     arm_dir + "/pretrain/checkpoint_final.ckpt",
                     arm_dir + "/finetune");
    AblationRow row;
    row.value = v;
    double psnr = 0.0, ssim = 0.0;
    std::int64_t fams = 0;
    for (const auto& [name, fm] : fr.report.families) {
      psnr += fm.psnr_mean;
      ssim += fm.ssim_mean;
      ++fams;
    }
    row.psnr_avg = fams ? psnr / static_cast<double>(fams) : 0.0;
    row.ssim_avg = fams ? ssim / static_cast<double>(fams) : 0.0;
    rows.push_back(row);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s\t%s\t%.6f\t%.6f\n", axis_name(axis),
                  v.c_str(), row.psnr_avg, row.ssim_avg);
    table << buf;
    table.flush();
  }
  return rows;
}

}  // namespace mdc::pipeline
