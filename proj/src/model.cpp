#include "meshrecon/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "meshrecon/image.hpp"
#include "meshrecon/losses.hpp"

namespace meshrecon {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::runtime_error(where + ": " + msg);
}

std::string bank_name(int i) { return "bank." + std::to_string(i); }

bool is_bank(const std::string& name) { return name.rfind("bank.", 0) == 0; }

}  // namespace

std::size_t ModelParams::head_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors)
    if (!is_bank(name)) n += t.numel();
  return n;
}

int ModelParams::bank_rows() const {
  auto it = tensors.find("bank.0");
  if (it == tensors.end()) fail("ModelParams", "bank.0 missing");
  return static_cast<int>(it->second.dim(0));
}

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.num_meanshapes < 1) fail("init_model", "need at least one meanshape");
  ModelParams params;
  params.config = cfg;
  params.bank_level = cfg.base_level;
  params.topology = icosphere(cfg.base_level);

  std::size_t k = params.topology.vertices.size();
  for (int i = 0; i < cfg.num_meanshapes; ++i) {
    Tensor row({k, 3});
    for (std::size_t v = 0; v < k; ++v)
      for (int c = 0; c < 3; ++c) row.at(v, c) = params.topology.vertices[v][c];
    params.tensors[bank_name(i)] = std::move(row);
  }

  CounterRng rng(seed);
  std::uint64_t tidx = 0;
  auto xavier = [&](const std::string& name, std::size_t nin, std::size_t nout) {
    double limit = std::sqrt(6.0 / static_cast<double>(nin + nout));
    Tensor w({nin, nout});
    for (std::size_t e = 0; e < w.numel(); ++e)
      w[e] = rng.uniform_in(-limit, limit, rngkey::kInit, tidx, e);
    params.tensors[name] = std::move(w);
    ++tidx;
  };
  auto zeros = [&](const std::string& name, Shape shape) {
    params.tensors[name] = Tensor(std::move(shape));
    ++tidx;
  };

  std::size_t in = 3 * static_cast<std::size_t>(cfg.encoder_side) * cfg.encoder_side;
  std::size_t F = cfg.image_feat, S = cfg.shape_feat, D = cfg.deformer_hidden;
  std::size_t N = cfg.num_meanshapes, T = cfg.texture_size;
  // per-vertex deformer input: base xyz + shape feature + selection weights
  std::size_t din = 3 + S + N;

  xavier("enc.w1", in, F);
  zeros("enc.b1", {F});
  xavier("enc.w2", F, S);
  zeros("enc.b2", {S});
  xavier("sel.w1", S, S);
  zeros("sel.b1", {S});
  xavier("sel.w2", S, N);
  zeros("sel.b2", {N});
  xavier("def.w1", din, D);
  zeros("def.b1", {D});
  xavier("def.w2", D, D);
  zeros("def.b2", {D});
  xavier("def.w3", D + din, D);  // the input is concatenated back in here
  zeros("def.b3", {D});
  xavier("def.w4", D, D);
  zeros("def.b4", {D});
  zeros("def.w5", {D, 3});  // zero-init final layer: the bank starts undeformed
  zeros("def.b5", {3});
  xavier("pose.w1", S, S);
  zeros("pose.b1", {S});
  xavier("pose.w2", S, 7);
  zeros("pose.b2", {7});
  params.tensors["pose.b2"][3] = 1.0;  // bias the quaternion toward identity
  xavier("tex.w1", F, F);
  zeros("tex.b1", {F});
  xavier("tex.w2", F, 3 * T * T);
  zeros("tex.b2", {3 * T * T});
  return params;
}

const Var& ParamVars::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) fail("ParamVars", "no parameter named '" + name + "'");
  return it->second;
}

ParamVars watch_params(Tape& tape, const ModelParams& params) {
  ParamVars out;
  for (const auto& [name, t] : params.tensors) out.vars[name] = tape.leaf(t);
  return out;
}

ParamVars constant_params(const ModelParams& params) {
  ParamVars out;
  for (const auto& [name, t] : params.tensors) out.vars[name] = Var(t);
  return out;
}

Features encode(const ParamVars& p, const ModelConfig& cfg, const Tensor& image,
                const Tensor& mask) {
  Tensor small = resize_bilinear(apply_mask(image, mask), cfg.encoder_side);
  Tensor flat({1, small.numel()}, std::vector<double>(small.data(), small.data() + small.numel()));
  Var x{std::move(flat)};
  Var h = leaky_relu(layer_norm(bias_add(matmul(x, p.at("enc.w1")), p.at("enc.b1"))));
  Features out;
  out.tex = h;
  out.shape = bias_add(matmul(h, p.at("enc.w2")), p.at("enc.b2"));
  return out;
}

Var select_shape(const ParamVars& p, const Var& shape_feat) {
  Var h = leaky_relu(layer_norm(bias_add(matmul(shape_feat, p.at("sel.w1")), p.at("sel.b1"))));
  return softmax(bias_add(matmul(h, p.at("sel.w2")), p.at("sel.b2")));
}

ShapePred predict_shape(const ParamVars& p, const ModelConfig& cfg, const Var& shape_feat,
                        const Var& select_weights, const CounterRng& rng, std::uint64_t k_epoch,
                        std::uint64_t k_sample, bool train) {
  std::size_t N = cfg.num_meanshapes;
  if (select_weights.shape() != Shape{1, N})
    fail("predict_shape", "selection weights must be [1,N], got " + shape_str(select_weights.shape()));
  std::size_t k = p.at("bank.0").shape()[0];

  std::vector<Var> rows;
  rows.reserve(N);
  for (std::size_t i = 0; i < N; ++i)
    rows.push_back(reshape(p.at(bank_name(static_cast<int>(i))), {1, 3 * k}));
  Var bank = concat(rows, 0);                                    // [N, 3k]
  Var base = reshape(matmul(select_weights, bank), {k, 3});      // soft-selected meanshape

  Var din = concat({base, repeat_rows(shape_feat, k), repeat_rows(select_weights, k)}, 1);  // [k, 3+S+N]
  double rate = cfg.deformer_dropout;
  Var h1 = dropout(relu(bias_add(matmul(din, p.at("def.w1")), p.at("def.b1"))), rate, rng, k_epoch,
                   k_sample, 11, train);
  Var h2 = dropout(relu(bias_add(matmul(h1, p.at("def.w2")), p.at("def.b2"))), rate, rng, k_epoch,
                   k_sample, 12, train);
  Var h2c = concat({h2, din}, 1);
  Var h3 = dropout(relu(bias_add(matmul(h2c, p.at("def.w3")), p.at("def.b3"))), rate, rng, k_epoch,
                   k_sample, 13, train);
  Var h4 = dropout(relu(bias_add(matmul(h3, p.at("def.w4")), p.at("def.b4"))), rate, rng, k_epoch,
                   k_sample, 14, train);
  ShapePred out;
  out.base = base;
  out.delta = tanh(bias_add(matmul(h4, p.at("def.w5")), p.at("def.b5")));
  out.vertices = add(base, out.delta);
  return out;
}

PosePred regress_pose(const ParamVars& p, const ModelConfig& cfg, const Var& shape_feat,
                      const CounterRng& rng, std::uint64_t k_epoch, std::uint64_t k_sample,
                      bool train) {
  Var h = leaky_relu(dropout(layer_norm(bias_add(matmul(shape_feat, p.at("pose.w1")), p.at("pose.b1"))),
                             cfg.pose_dropout, rng, k_epoch, k_sample, 21, train));
  Var raw = transpose2d(bias_add(matmul(h, p.at("pose.w2")), p.at("pose.b2")));  // [7,1]
  PosePred out;
  out.pose.s = exp(reshape(gather_rows(raw, {0}), {1}));
  out.pose.t = reshape(gather_rows(raw, {1, 2}), {2});
  out.q_raw = reshape(gather_rows(raw, {3, 4, 5, 6}), {4});
  Var q = out.q_raw;
  const Tensor& qv = out.q_raw.value();
  double qn = std::sqrt(qv[0] * qv[0] + qv[1] * qv[1] + qv[2] * qv[2] + qv[3] * qv[3]);
  if (qn < 1e-8) {
    // degenerate regression output: nudge toward the identity rotation so the
    // on-tape normalization stays well-defined (gradient of the nudge is 1)
    q = add(out.q_raw, Var(Tensor({4}, {1, 0, 0, 0})));
  }
  out.pose.q = quat_normalize_var(q);
  return out;
}

Var decode_texture(const ParamVars& p, const ModelConfig& cfg, const Var& tex_feat) {
  std::size_t T = cfg.texture_size;
  Var h = leaky_relu(layer_norm(bias_add(matmul(tex_feat, p.at("tex.w1")), p.at("tex.b1"))));
  Var t = sigmoid(bias_add(matmul(h, p.at("tex.w2")), p.at("tex.b2")));
  return reshape(t, {3, T, T});
}

SubdivisionPlan subdivide_bank(ModelParams& params) {
  SubdivisionPlan plan = make_subdivision_plan(params.topology);
  for (int i = 0; i < params.config.num_meanshapes; ++i) {
    Tensor& row = params.tensors.at(bank_name(i));
    row = subdivide_vertices(plan, row);
  }
  params.topology = subdivide(params.topology);
  params.bank_level += 1;
  return plan;
}

// ---- checkpoint I/O --------------------------------------------------------
//
// Layout (all integers little-endian):
//   "MCMR"  u16 version  u32 bank_level  u32 num_meanshapes
//   u32 n_model  u32 n_extra
//   directory: { u16 name_len, name, u8 ndim, u32 dim..., u64 payload_offset }
//   payload: f64 little-endian, in directory order
// The architecture hyperparameters ride along as the "meta.config" extra, so
// a checkpoint is self-describing; topology is rebuilt, never stored.

namespace {

void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& b, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(b, v);
}

struct Cursor {
  const std::string& buf;
  std::size_t pos = 0;
  std::string where;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) fail(where, "truncated checkpoint");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

double f64_at(const std::string& buf, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

Tensor config_tensor(const ModelConfig& c) {
  return Tensor({8}, {static_cast<double>(c.base_level), static_cast<double>(c.texture_size),
                      static_cast<double>(c.image_feat), static_cast<double>(c.shape_feat),
                      static_cast<double>(c.deformer_hidden), static_cast<double>(c.encoder_side),
                      c.deformer_dropout, c.pose_dropout});
}

ModelConfig config_from_tensor(const Tensor& t, int num_meanshapes) {
  if (t.numel() != 8) fail("load_checkpoint", "bad meta.config");
  ModelConfig c;
  c.num_meanshapes = num_meanshapes;
  c.base_level = static_cast<int>(t[0]);
  c.texture_size = static_cast<int>(t[1]);
  c.image_feat = static_cast<int>(t[2]);
  c.shape_feat = static_cast<int>(t[3]);
  c.deformer_hidden = static_cast<int>(t[4]);
  c.encoder_side = static_cast<int>(t[5]);
  c.deformer_dropout = t[6];
  c.pose_dropout = t[7];
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::map<std::string, Tensor>& extra) {
  std::map<std::string, Tensor> extras = extra;
  extras["meta.config"] = config_tensor(params.config);

  std::vector<const std::pair<const std::string, Tensor>*> order;
  for (const auto& kv : params.tensors) order.push_back(&kv);
  for (const auto& kv : extras) order.push_back(&kv);

  std::string dir, payload;
  for (const auto* kv : order) {
    const std::string& name = kv->first;
    const Tensor& t = kv->second;
    if (name.size() > 0xffff) fail("save_checkpoint", "tensor name too long");
    put_u16(dir, static_cast<std::uint16_t>(name.size()));
    dir += name;
    dir.push_back(static_cast<char>(t.ndim()));
    for (std::size_t i = 0; i < t.ndim(); ++i) put_u32(dir, static_cast<std::uint32_t>(t.dim(i)));
    put_u64(dir, payload.size());
    for (std::size_t i = 0; i < t.numel(); ++i) put_f64(payload, t[i]);
  }

  std::string head = "MCMR";
  put_u16(head, 1);  // version
  put_u32(head, static_cast<std::uint32_t>(params.bank_level));
  put_u32(head, static_cast<std::uint32_t>(params.config.num_meanshapes));
  put_u32(head, static_cast<std::uint32_t>(params.tensors.size()));
  put_u32(head, static_cast<std::uint32_t>(extras.size()));

  namespace fs = std::filesystem;
  fs::path tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) fail("save_checkpoint", "cannot write " + tmp.string());
    f << head << dir << payload;
    if (!f) fail("save_checkpoint", "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("load_checkpoint", "cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Cursor c{buf, 0, "load_checkpoint"};
  if (c.str(4) != "MCMR") fail("load_checkpoint", path + " is not a checkpoint (bad magic)");
  std::uint16_t version = c.u16();
  if (version != 1) fail("load_checkpoint", "unsupported version " + std::to_string(version));
  int bank_level = static_cast<int>(c.u32());
  int N = static_cast<int>(c.u32());
  std::uint32_t n_model = c.u32(), n_extra = c.u32();

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < n_model + n_extra; ++i) {
    Entry e;
    e.name = c.str(c.u16());
    std::size_t ndim = static_cast<std::uint8_t>(c.str(1)[0]);
    for (std::size_t d = 0; d < ndim; ++d) e.shape.push_back(c.u32());
    e.offset = c.u64();
    entries.push_back(std::move(e));
  }
  std::size_t payload_start = c.pos;

  Checkpoint ck;
  for (std::uint32_t i = 0; i < entries.size(); ++i) {
    const Entry& e = entries[i];
    Tensor t(e.shape);
    std::size_t at = payload_start + e.offset;
    if (at + 8 * t.numel() > buf.size()) fail("load_checkpoint", "truncated payload for " + e.name);
    for (std::size_t j = 0; j < t.numel(); ++j) t[j] = f64_at(buf, at + 8 * j);
    if (i < n_model)
      ck.params.tensors[e.name] = std::move(t);
    else
      ck.extra[e.name] = std::move(t);
  }

  auto meta = ck.extra.find("meta.config");
  if (meta == ck.extra.end()) fail("load_checkpoint", "meta.config missing");
  ck.params.config = config_from_tensor(meta->second, N);
  ck.extra.erase(meta);
  ck.params.bank_level = bank_level;

  if (bank_level < ck.params.config.base_level)
    fail("load_checkpoint", "bank level below base level");
  ck.params.topology = icosphere(ck.params.config.base_level);
  for (int l = ck.params.config.base_level; l < bank_level; ++l)
    ck.params.topology = subdivide(ck.params.topology);

  std::size_t k = ck.params.topology.vertices.size();
  for (int i = 0; i < N; ++i) {
    auto it = ck.params.tensors.find(bank_name(i));
    if (it == ck.params.tensors.end()) fail("load_checkpoint", bank_name(i) + " missing");
    if (it->second.shape() != Shape{k, 3})
      fail("load_checkpoint", bank_name(i) + " has shape " + shape_str(it->second.shape()) +
                                  ", expected [" + std::to_string(k) + ",3]");
  }
  return ck;
}

}  // namespace meshrecon
