#include "meshrecon/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace meshrecon {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::runtime_error(where + ": " + msg);
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      fail(where, "unknown key '" + key + "'");
  }
}

}  // namespace

int TrainConfig::resolved_subdivision_epoch() const {
  return subdivision_epoch >= 0 ? subdivision_epoch
                                : static_cast<int>(std::lround(0.7 * epochs));
}

void TrainConfig::validate() const {
  if (epochs <= 0) fail("TrainConfig", "epochs must be positive");
  if (batch_size <= 0) fail("TrainConfig", "batch_size must be positive");
  if (!(lr > 0) || !(lr_after_subdivision > 0)) fail("TrainConfig", "learning rates must be positive");
  int sub = resolved_subdivision_epoch();
  if (sub <= 0 || sub > epochs)
    fail("TrainConfig", "subdivision epoch " + std::to_string(sub) + " outside (0, epochs]");
  if (grad_clip < 0) fail("TrainConfig", "grad_clip must be non-negative");
  if (augment_prob < 0 || augment_prob > 1) fail("TrainConfig", "augment_prob outside [0,1]");
  if (checkpoint_every <= 0) fail("TrainConfig", "checkpoint_every must be positive");
  if (split != "train" && split != "val" && split != "test" && split != "all")
    fail("TrainConfig", "split must be train/val/test/all");
  weights.validate();
  if (model.num_meanshapes < 1) fail("TrainConfig", "need at least one meanshape");
  if (render.image_size <= 0) fail("TrainConfig", "render image_size must be positive");
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail("train_config_from_json", std::string("parse error: ") + e.what());
  }
  check_keys(j,
             {"epochs", "batch_size", "lr", "lr_after_subdivision", "subdivision_epoch",
              "subdivide", "beta1", "beta2", "eps", "grad_clip", "augment_prob", "seed",
              "checkpoint_every", "split", "weights", "model", "render"},
             "train_config_from_json");
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("lr_after_subdivision"))
    c.lr_after_subdivision = j.at("lr_after_subdivision").get<double>();
  if (j.contains("subdivision_epoch")) c.subdivision_epoch = j.at("subdivision_epoch").get<int>();
  if (j.contains("subdivide")) c.subdivide = j.at("subdivide").get<bool>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
  if (j.contains("eps")) c.eps = j.at("eps").get<double>();
  if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
  if (j.contains("augment_prob")) c.augment_prob = j.at("augment_prob").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("checkpoint_every")) c.checkpoint_every = j.at("checkpoint_every").get<int>();
  if (j.contains("split")) c.split = j.at("split").get<std::string>();
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    check_keys(w,
               {"mask", "smooth_mesh", "smooth_deform", "deform", "pose", "quat", "color",
                "style", "percept"},
               "train_config_from_json: weights");
    if (w.contains("mask")) c.weights.mask = w.at("mask").get<double>();
    if (w.contains("smooth_mesh")) c.weights.smooth_mesh = w.at("smooth_mesh").get<double>();
    if (w.contains("smooth_deform")) c.weights.smooth_deform = w.at("smooth_deform").get<double>();
    if (w.contains("deform")) c.weights.deform = w.at("deform").get<double>();
    if (w.contains("pose")) c.weights.pose = w.at("pose").get<double>();
    if (w.contains("quat")) c.weights.quat = w.at("quat").get<double>();
    if (w.contains("color")) c.weights.color = w.at("color").get<double>();
    if (w.contains("style")) c.weights.style = w.at("style").get<double>();
    if (w.contains("percept")) c.weights.percept = w.at("percept").get<double>();
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m,
               {"num_meanshapes", "base_level", "texture_size", "image_feat", "shape_feat",
                "deformer_hidden", "encoder_side", "deformer_dropout", "pose_dropout"},
               "train_config_from_json: model");
    if (m.contains("num_meanshapes")) c.model.num_meanshapes = m.at("num_meanshapes").get<int>();
    if (m.contains("base_level")) c.model.base_level = m.at("base_level").get<int>();
    if (m.contains("texture_size")) c.model.texture_size = m.at("texture_size").get<int>();
    if (m.contains("image_feat")) c.model.image_feat = m.at("image_feat").get<int>();
    if (m.contains("shape_feat")) c.model.shape_feat = m.at("shape_feat").get<int>();
    if (m.contains("deformer_hidden")) c.model.deformer_hidden = m.at("deformer_hidden").get<int>();
    if (m.contains("encoder_side")) c.model.encoder_side = m.at("encoder_side").get<int>();
    if (m.contains("deformer_dropout")) c.model.deformer_dropout = m.at("deformer_dropout").get<double>();
    if (m.contains("pose_dropout")) c.model.pose_dropout = m.at("pose_dropout").get<double>();
  }
  if (j.contains("render")) {
    const json& r = j.at("render");
    check_keys(r, {"image_size", "sigma", "gamma", "eps_bg", "background"},
               "train_config_from_json: render");
    if (r.contains("image_size")) c.render.image_size = r.at("image_size").get<int>();
    if (r.contains("sigma")) c.render.sigma = r.at("sigma").get<double>();
    if (r.contains("gamma")) c.render.gamma = r.at("gamma").get<double>();
    if (r.contains("eps_bg")) c.render.eps_bg = r.at("eps_bg").get<double>();
    if (r.contains("background")) c.render.background = r.at("background").get<std::array<double, 3>>();
  }
  c.validate();
  return c;
}

TrainConfig train_config_from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("train_config_from_file", "cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return train_config_from_json(text);
}

double global_grad_norm(const std::map<std::string, Tensor>& grads) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (std::size_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
  return std::sqrt(sq);
}

void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  long t = ++state.step;
  double bc1 = 1.0 - std::pow(beta1, t);
  double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [name, p] : params.tensors) {
    Tensor zero;
    const Tensor* g = &zero;
    auto it = grads.find(name);
    if (it != grads.end() && it->second.numel() > 0) {
      if (it->second.shape() != p.shape())
        fail("adam_step", "gradient shape mismatch for " + name);
      g = &it->second;
    } else {
      zero = Tensor(p.shape());
    }
    Tensor& m = state.m.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor(p.shape())).first->second;
    if (m.shape() != p.shape() || v.shape() != p.shape())
      fail("adam_step", "optimizer state shape mismatch for " + name +
                            " (moments must be rebuilt after subdivision)");
    for (std::size_t i = 0; i < p.numel(); ++i) {
      double gi = (*g)[i];
      if (!std::isfinite(gi)) fail("adam_step", "non-finite gradient in " + name);
      m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
      v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
}

Trainer::Trainer(TrainConfig cfg, const std::string& dataset_dir, const std::string& out_dir)
    : cfg_(std::move(cfg)), out_dir_(out_dir), rng_(cfg_.seed) {
  cfg_.validate();
  fs::create_directories(out_dir_);
  for (const ManifestEntry& e : read_manifest(dataset_dir)) {
    if (cfg_.split != "all" && e.split != cfg_.split) continue;
    LoadedSample s = load_sample(dataset_dir, e);
    // deliberately narrowing: class label and shape spec stop here
    samples_.push_back(TrainSample{std::move(s.image), std::move(s.mask), s.pose});
  }
  if (samples_.empty()) fail("Trainer", "no samples in split '" + cfg_.split + "'");
  std::size_t side = samples_[0].mask.dim(0);
  for (const TrainSample& s : samples_)
    if (s.mask.ndim() != 2 || s.mask.dim(0) != side || s.mask.dim(1) != side)
      fail("Trainer", "samples must share one square image size");
  cfg_.render.image_size = static_cast<int>(side);
}

std::string Trainer::checkpoint_path() const {
  return (fs::path(out_dir_) / "checkpoint.mcmr").string();
}

void Trainer::rebuild_laplacian() { lap_ = uniform_laplacian(params_.topology); }

double Trainer::lr_for_epoch(int epoch) const {
  return epoch >= cfg_.resolved_subdivision_epoch() ? cfg_.lr_after_subdivision : cfg_.lr;
}

void Trainer::init() {
  params_ = init_model(cfg_.model, cfg_.seed);
  adam_ = AdamState{};
  next_epoch_ = 0;
  rebuild_laplacian();
  initialized_ = true;
}

void Trainer::resume() {
  Checkpoint ck = load_checkpoint(checkpoint_path());
  auto state = ck.extra.find("meta.state");
  if (state == ck.extra.end() || state->second.numel() != 4)
    fail("Trainer::resume", "checkpoint lacks trainer state");
  next_epoch_ = static_cast<int>(state->second[0]);
  adam_ = AdamState{};
  adam_.step = static_cast<long>(state->second[1]);
  std::uint64_t seed = (static_cast<std::uint64_t>(state->second[2]) << 32) |
                       static_cast<std::uint64_t>(state->second[3]);
  if (seed != cfg_.seed)
    fail("Trainer::resume", "checkpoint seed " + std::to_string(seed) +
                                " does not match configured seed " + std::to_string(cfg_.seed));
  if (ck.params.config.num_meanshapes != cfg_.model.num_meanshapes)
    fail("Trainer::resume", "checkpoint bank size does not match config");
  int expected = cfg_.model.base_level +
                 ((cfg_.subdivide && next_epoch_ > cfg_.resolved_subdivision_epoch()) ? 1 : 0);
  if (ck.params.bank_level != expected)
    fail("Trainer::resume", "checkpoint subdivision level " +
                                std::to_string(ck.params.bank_level) +
                                " does not match the schedule (expected " +
                                std::to_string(expected) + ")");
  for (auto& [name, t] : ck.extra) {
    if (name.rfind("adam.m.", 0) == 0) adam_.m[name.substr(7)] = std::move(t);
    else if (name.rfind("adam.v.", 0) == 0) adam_.v[name.substr(7)] = std::move(t);
  }
  params_ = std::move(ck.params);
  rebuild_laplacian();
  initialized_ = true;
}

void Trainer::save(int next_epoch) {
  std::map<std::string, Tensor> extra;
  for (const auto& [name, t] : adam_.m) extra["adam.m." + name] = t;
  for (const auto& [name, t] : adam_.v) extra["adam.v." + name] = t;
  extra["meta.state"] =
      Tensor({4}, {static_cast<double>(next_epoch), static_cast<double>(adam_.step),
                   static_cast<double>(cfg_.seed >> 32),
                   static_cast<double>(cfg_.seed & 0xffffffffull)});
  save_checkpoint(checkpoint_path(), params_, extra);
}

void Trainer::subdivide_now() {
  std::size_t heads_before = params_.head_parameter_count();
  SubdivisionPlan plan = subdivide_bank(params_);
  // new midpoint rows start with fresh (zero) optimizer state; old rows keep theirs
  for (int i = 0; i < cfg_.model.num_meanshapes; ++i) {
    std::string name = "bank." + std::to_string(i);
    for (auto* moments : {&adam_.m, &adam_.v}) {
      auto it = moments->find(name);
      if (it == moments->end()) continue;
      Tensor grown({plan.new_vertex_count(), 3});
      std::copy_n(it->second.data(), it->second.numel(), grown.data());
      it->second = std::move(grown);
    }
  }
  rebuild_laplacian();
  if (params_.head_parameter_count() != heads_before)
    fail("Trainer", "head parameter count changed across subdivision");
}

LossReport Trainer::train_step(const std::vector<std::size_t>& batch, int epoch,
                               int step_in_epoch) {
  if (!initialized_) fail("Trainer", "call init() or resume() before train_step()");
  if (batch.empty()) fail("Trainer", "empty batch");
  Tape tape;
  ParamVars p = watch_params(tape, params_);

  Var batch_total;
  LossReport acc;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::uint64_t sidx = static_cast<std::uint64_t>(step_in_epoch) * cfg_.batch_size + i;
    bool aug = rng_.uniform(rngkey::kAugment, epoch, sidx) < cfg_.augment_prob;
    TrainSample s = symmetry_augment(samples_.at(batch[i]), aug);

    Features f = encode(p, cfg_.model, s.image, s.mask);
    Var w = select_shape(p, f.shape);
    ShapePred sp = predict_shape(p, cfg_.model, f.shape, w, rng_, epoch, sidx, true);
    PosePred pp = regress_pose(p, cfg_.model, f.shape, rng_, epoch, sidx, true);
    Var tex = decode_texture(p, cfg_.model, f.tex);
    PoseVars gt = constant_pose_vars(s.pose);
    RenderOutput rc = render_color(sp.vertices, params_.topology, tex, gt, cfg_.render);

    LossTerms t;
    t.mask = mask_loss(rc.mask, s.mask);
    t.smooth_mesh = smooth_loss(lap_, sp.vertices);
    t.smooth_deform = smooth_loss(lap_, sp.delta);
    t.deform = deformation_reg(sp.delta);
    t.pose = pose_loss(pp.pose, s.pose);
    t.quat = quat_unit_penalty(pp.q_raw);
    t.color = color_loss(rc.rgb, s.image, s.mask);
    t.style = style_loss(rc.rgb, s.image, s.mask);

    LossReport rep;
    Var tot = total_loss(t, cfg_.weights, &rep);
    acc.mask += rep.mask;
    acc.smooth_mesh += rep.smooth_mesh;
    acc.smooth_deform += rep.smooth_deform;
    acc.deform += rep.deform;
    acc.pose += rep.pose;
    acc.quat += rep.quat;
    acc.color += rep.color;
    acc.style += rep.style;
    batch_total = batch_total.ptr() ? add(batch_total, tot) : tot;
  }
  Var loss = mul_scalar(batch_total, 1.0 / static_cast<double>(batch.size()));
  if (!std::isfinite(loss.value()[0])) fail("Trainer", "training loss is not finite");

  GradientMap gm = tape.backward(loss);
  std::map<std::string, Tensor> grads;
  for (const auto& [name, var] : p.vars) grads[name] = gm.get(var);
  if (cfg_.grad_clip > 0) {
    double gn = global_grad_norm(grads);
    if (gn > cfg_.grad_clip) {
      double scale = cfg_.grad_clip / gn;
      for (auto& [name, g] : grads)
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= scale;
    }
  }
  adam_step(params_, grads, adam_, lr_for_epoch(epoch), cfg_.beta1, cfg_.beta2, cfg_.eps);

  double inv = 1.0 / static_cast<double>(batch.size());
  acc.mask *= inv;
  acc.smooth_mesh *= inv;
  acc.smooth_deform *= inv;
  acc.deform *= inv;
  acc.pose *= inv;
  acc.quat *= inv;
  acc.color *= inv;
  acc.style *= inv;
  acc.percept = 0;
  acc.total = loss.value()[0];
  return acc;
}

void Trainer::run() {
  if (!initialized_) init();
  std::size_t n = samples_.size();
  int steps_per_epoch = static_cast<int>((n + cfg_.batch_size - 1) / cfg_.batch_size);
  int sub = cfg_.resolved_subdivision_epoch();

  fs::path log_path = fs::path(out_dir_) / "loss_log.csv";
  std::ofstream log(log_path, next_epoch_ == 0 ? std::ios::trunc : std::ios::app);
  if (!log) fail("Trainer::run", "cannot write " + log_path.string());
  if (next_epoch_ == 0) log << LossReport::csv_header() << "\n";

  for (int e = next_epoch_; e < cfg_.epochs; ++e) {
    if (cfg_.subdivide && e == sub && params_.bank_level == cfg_.model.base_level)
      subdivide_now();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) {  // Fisher-Yates keyed by (epoch, position)
      std::size_t j = static_cast<std::size_t>(rng_.uniform(rngkey::kShuffle, e, i - 1) * i);
      if (j >= i) j = i - 1;
      std::swap(order[i - 1], order[j]);
    }

    for (int step = 0; step < steps_per_epoch; ++step) {
      std::size_t lo = static_cast<std::size_t>(step) * cfg_.batch_size;
      std::size_t hi = std::min(lo + cfg_.batch_size, n);
      std::vector<std::size_t> batch(order.begin() + lo, order.begin() + hi);
      LossReport rep = train_step(batch, e, step);
      log << rep.csv_row(static_cast<long>(e) * steps_per_epoch + step) << "\n";
      log.flush();
    }

    if ((e + 1) % cfg_.checkpoint_every == 0 || e + 1 == cfg_.epochs) save(e + 1);
    next_epoch_ = e + 1;  // keeps run() a no-op once the epoch budget is spent
  }
}

}  // namespace meshrecon
