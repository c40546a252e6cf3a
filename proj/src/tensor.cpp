#include "meshrecon/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace meshrecon {

namespace {

// guards runaway shapes before they turn into bad_alloc deep in a pipeline
constexpr std::size_t kMaxElements = 100'000'000;

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::invalid_argument(op + ": " + msg);
}

void check_same_shape(const char* op, const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// common tape of the operands (constants have none); mixing tapes is an error
Tape* tape_of(const char* op, std::initializer_list<const Var*> vs) {
  Tape* t = nullptr;
  for (const Var* v : vs) {
    if (!v->on_tape()) continue;
    if (t && t != v->tape()) fail(op, "operands recorded on different tapes");
    t = v->tape();
  }
  return t;
}

using ERow = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<ERow>;
using ECMap = Eigen::Map<const ERow>;

// unary elementwise op whose local derivative is known at forward time
Var elementwise(const char* op, const Var& x, Tensor out, Tensor dfdx) {
  Tape* t = tape_of(op, {&x});
  if (!t) return Var(std::move(out));
  int px = x.node();
  auto d = std::make_shared<Tensor>(std::move(dfdx));
  return t->record(std::move(out), {x}, [px, d](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, d->shape());
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (*d)[i];
  });
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  std::size_t n = shape_numel(shape_);
  if (n > kMaxElements)
    fail("Tensor", "shape " + shape_str(shape_) + " exceeds the element limit");
  data_.assign(n, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size())
    fail("Tensor", "shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  if (data_.size() > kMaxElements) fail("Tensor", "element limit exceeded");
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

const Tensor* GradientMap::find(int node) const {
  auto it = grads_.find(node);
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor& GradientMap::ensure(int node, const Shape& shape) {
  auto it = grads_.find(node);
  if (it == grads_.end()) it = grads_.emplace(node, Tensor(shape)).first;
  return it->second;
}

Tensor GradientMap::get(const Var& v) const {
  if (v.node() >= 0)
    if (const Tensor* g = find(v.node())) return *g;
  return Tensor(v.shape());  // never reached the loss: zero gradient
}

Var Tape::leaf(Tensor value) {
  if (consumed_) throw std::runtime_error("Tape::leaf: tape already consumed by backward()");
  Var v{std::move(value)};
  v.tape_ = this;
  v.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back({v.value_, BackwardFn{}});
  return v;
}

Var Tape::record(Tensor output, const std::vector<Var>& parents, BackwardFn backward) {
  if (consumed_) throw std::runtime_error("Tape::record: tape already consumed by backward()");
  for (const Var& p : parents)
    if (p.on_tape() && p.tape() != this)
      fail("Tape::record", "parent belongs to a different tape");
  Var v{std::move(output)};
  v.tape_ = this;
  v.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back({v.value_, std::move(backward)});
  return v;
}

GradientMap Tape::backward(const Var& loss) {
  if (consumed_) throw std::runtime_error("Tape::backward: tape already consumed; rebuild the forward pass");
  if (loss.tape() != this) fail("Tape::backward", "loss was not recorded on this tape");
  if (loss.value().numel() != 1)
    fail("Tape::backward", "loss must be scalar, got shape " + shape_str(loss.shape()));
  consumed_ = true;

  GradientMap gm;
  gm.ensure(loss.node(), loss.shape())[0] = 1.0;
  // ids descend in reverse creation order, which is a reverse topological
  // order by construction; nodes the loss never saw have no gradient entry
  for (int id = loss.node(); id >= 0; --id) {
    const Tensor* g = gm.find(id);
    if (!g || !nodes_[id].backward) continue;
    nodes_[id].backward(*g, gm);
  }
  return gm;
}

// ---- arithmetic ---------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  Tape* t = tape_of("add", {&a, &b});
  if (!t) return Var(std::move(out));
  int pa = a.node(), pb = b.node();
  Shape sh = a.shape();
  return t->record(std::move(out), {a, b}, [pa, pb, sh](const Tensor& g, GradientMap& gm) {
    if (pa >= 0) {
      Tensor& ga = gm.ensure(pa, sh);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (pb >= 0) {
      Tensor& gb = gm.ensure(pb, sh);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  Tape* t = tape_of("sub", {&a, &b});
  if (!t) return Var(std::move(out));
  int pa = a.node(), pb = b.node();
  Shape sh = a.shape();
  return t->record(std::move(out), {a, b}, [pa, pb, sh](const Tensor& g, GradientMap& gm) {
    if (pa >= 0) {
      Tensor& ga = gm.ensure(pa, sh);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (pb >= 0) {
      Tensor& gb = gm.ensure(pb, sh);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  Tape* t = tape_of("mul", {&a, &b});
  if (!t) return Var(std::move(out));
  int pa = a.node(), pb = b.node();
  auto av = a.ptr(), bv = b.ptr();
  return t->record(std::move(out), {a, b}, [pa, pb, av, bv](const Tensor& g, GradientMap& gm) {
    if (pa >= 0) {
      Tensor& ga = gm.ensure(pa, av->shape());
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (*bv)[i];
    }
    if (pb >= 0) {
      Tensor& gb = gm.ensure(pb, bv->shape());
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * (*av)[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape("div", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] / b.value()[i];
  Tape* t = tape_of("div", {&a, &b});
  if (!t) return Var(std::move(out));
  int pa = a.node(), pb = b.node();
  auto av = a.ptr(), bv = b.ptr();
  return t->record(std::move(out), {a, b}, [pa, pb, av, bv](const Tensor& g, GradientMap& gm) {
    if (pa >= 0) {
      Tensor& ga = gm.ensure(pa, av->shape());
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / (*bv)[i];
    }
    if (pb >= 0) {
      Tensor& gb = gm.ensure(pb, bv->shape());
      for (std::size_t i = 0; i < g.numel(); ++i) {
        double bi = (*bv)[i];
        gb[i] -= g[i] * (*av)[i] / (bi * bi);
      }
    }
  });
}

Var scale_by(const Var& x, const Var& s) {
  if (s.value().numel() != 1) fail("scale_by", "scale must have shape [1], got " + shape_str(s.shape()));
  double sv = s.value()[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * sv;
  Tape* t = tape_of("scale_by", {&x, &s});
  if (!t) return Var(std::move(out));
  int px = x.node(), ps = s.node();
  auto xv = x.ptr();
  return t->record(std::move(out), {x, s}, [px, ps, sv, xv](const Tensor& g, GradientMap& gm) {
    if (px >= 0) {
      Tensor& gx = gm.ensure(px, xv->shape());
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * sv;
    }
    if (ps >= 0) {
      Tensor& gs = gm.ensure(ps, {1});
      double acc = 0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * (*xv)[i];
      gs[0] += acc;
    }
  });
}

Var add_scalar(const Var& x, double c) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] + c;
  return elementwise("add_scalar", x, std::move(out), Tensor::full(x.shape(), 1.0));
}

Var mul_scalar(const Var& x, double c) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * c;
  return elementwise("mul_scalar", x, std::move(out), Tensor::full(x.shape(), c));
}

Var bias_add(const Var& x, const Var& b) {
  if (x.value().ndim() != 2 || b.value().ndim() != 1 || x.value().cols() != b.value().dim(0))
    fail("bias_add", "expected [n,d] + [d], got " + shape_str(x.shape()) + " and " + shape_str(b.shape()));
  std::size_t n = x.value().rows(), d = x.value().cols();
  Tensor out({n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) = x.value().at(r, c) + b.value()[c];
  Tape* t = tape_of("bias_add", {&x, &b});
  if (!t) return Var(std::move(out));
  int px = x.node(), pb = b.node();
  return t->record(std::move(out), {x, b}, [px, pb, n, d](const Tensor& g, GradientMap& gm) {
    if (px >= 0) {
      Tensor& gx = gm.ensure(px, {n, d});
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (pb >= 0) {
      Tensor& gb = gm.ensure(pb, {d});
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gb[c] += g.at(r, c);
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows())
    fail("matmul", "incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out({n, m});
  EMap(out.data(), n, m) = ECMap(av.data(), n, k) * ECMap(bv.data(), k, m);
  Tape* t = tape_of("matmul", {&a, &b});
  if (!t) return Var(std::move(out));
  int pa = a.node(), pb = b.node();
  auto ap = a.ptr(), bp = b.ptr();
  return t->record(std::move(out), {a, b}, [pa, pb, ap, bp, n, k, m](const Tensor& g, GradientMap& gm) {
    ECMap gg(g.data(), n, m);
    if (pa >= 0) {
      Tensor& ga = gm.ensure(pa, {n, k});
      EMap(ga.data(), n, k) += gg * ECMap(bp->data(), k, m).transpose();
    }
    if (pb >= 0) {
      Tensor& gb = gm.ensure(pb, {k, m});
      EMap(gb.data(), k, m) += ECMap(ap->data(), n, k).transpose() * gg;
    }
  });
}

Var transpose2d(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2) fail("transpose2d", "expected 2-D, got " + shape_str(xv.shape()));
  std::size_t n = xv.rows(), m = xv.cols();
  Tensor out({m, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out.at(c, r) = xv.at(r, c);
  Tape* t = tape_of("transpose2d", {&x});
  if (!t) return Var(std::move(out));
  int px = x.node();
  return t->record(std::move(out), {x}, [px, n, m](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, {n, m});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) gx.at(r, c) += g.at(c, r);
  });
}

Var sum(const Var& x) {
  double acc = 0;
  for (std::size_t i = 0; i < x.value().numel(); ++i) acc += x.value()[i];
  Tape* t = tape_of("sum", {&x});
  if (!t) return Var(Tensor::scalar(acc));
  int px = x.node();
  Shape sh = x.shape();
  return t->record(Tensor::scalar(acc), {x}, [px, sh](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, sh);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
  });
}

Var mean(const Var& x) {
  std::size_t n = x.value().numel();
  if (n == 0) fail("mean", "empty tensor");
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x.value()[i];
  acc /= static_cast<double>(n);
  Tape* t = tape_of("mean", {&x});
  if (!t) return Var(Tensor::scalar(acc));
  int px = x.node();
  Shape sh = x.shape();
  return t->record(Tensor::scalar(acc), {x}, [px, sh, n](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, sh);
    double gi = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gi;
  });
}

// ---- elementwise nonlinearities -----------------------------------------

Var pow(const Var& x, double e) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = std::pow(x.value()[i], e);
    d[i] = e * std::pow(x.value()[i], e - 1.0);
  }
  return elementwise("pow", x, std::move(out), std::move(d));
}

Var exp(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(x.value()[i]);
  Tensor d = out;  // d exp = exp
  return elementwise("exp", x, std::move(out), std::move(d));
}

Var log(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = std::log(x.value()[i]);
    d[i] = 1.0 / x.value()[i];
  }
  return elementwise("log", x, std::move(out), std::move(d));
}

Var sqrt(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = std::sqrt(x.value()[i]);
    d[i] = 0.5 / out[i];
  }
  return elementwise("sqrt", x, std::move(out), std::move(d));
}

Var sigmoid(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double v = x.value()[i];
    double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    out[i] = s;
    d[i] = s * (1.0 - s);
  }
  return elementwise("sigmoid", x, std::move(out), std::move(d));
}

Var tanh(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double th = std::tanh(x.value()[i]);
    out[i] = th;
    d[i] = 1.0 - th * th;
  }
  return elementwise("tanh", x, std::move(out), std::move(d));
}

Var relu(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    bool pos = x.value()[i] > 0;
    out[i] = pos ? x.value()[i] : 0.0;
    d[i] = pos ? 1.0 : 0.0;
  }
  return elementwise("relu", x, std::move(out), std::move(d));
}

Var leaky_relu(const Var& x, double slope) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    bool pos = x.value()[i] > 0;
    out[i] = pos ? x.value()[i] : slope * x.value()[i];
    d[i] = pos ? 1.0 : slope;
  }
  return elementwise("leaky_relu", x, std::move(out), std::move(d));
}

Var clamp(const Var& x, double lo, double hi) {
  if (!(lo <= hi)) fail("clamp", "lo must not exceed hi");
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double v = x.value()[i];
    out[i] = std::min(std::max(v, lo), hi);
    d[i] = (v > lo && v < hi) ? 1.0 : 0.0;
  }
  return elementwise("clamp", x, std::move(out), std::move(d));
}

Var abs(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double v = x.value()[i];
    out[i] = std::fabs(v);
    d[i] = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);  // subgradient 0 at the kink
  }
  return elementwise("abs", x, std::move(out), std::move(d));
}

// ---- structured ops ------------------------------------------------------

Var softmax(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 1 && xv.ndim() != 2)
    fail("softmax", "expected 1-D or 2-D, got " + shape_str(xv.shape()));
  std::size_t rows = xv.ndim() == 2 ? xv.rows() : 1;
  std::size_t cols = xv.ndim() == 2 ? xv.cols() : xv.dim(0);
  if (cols == 0) fail("softmax", "empty axis");
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out.data() + r * cols;
    double mx = in[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double denom = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      denom += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= denom;
  }
  Tape* t = tape_of("softmax", {&x});
  if (!t) return Var(std::move(out));
  int px = x.node();
  auto y = std::make_shared<Tensor>(out);  // backward needs the outputs
  return t->record(std::move(out), {x}, [px, y, rows, cols](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, y->shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yy = y->data() + r * cols;
      const double* gg = g.data() + r * cols;
      double dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += gg[c] * yy[c];
      double* gxr = gx.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) gxr[c] += yy[c] * (gg[c] - dot);
    }
  });
}

Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) fail("concat", "no operands");
  std::size_t nd = xs[0].value().ndim();
  if (axis >= nd) fail("concat", "axis out of range for " + shape_str(xs[0].shape()));
  for (const Var& v : xs) {
    if (v.value().ndim() != nd) fail("concat", "rank mismatch");
    for (std::size_t d = 0; d < nd; ++d)
      if (d != axis && v.value().dim(d) != xs[0].value().dim(d))
        fail("concat", "shape mismatch " + shape_str(xs[0].shape()) + " vs " + shape_str(v.shape()));
  }
  Shape osh = xs[0].value().shape();
  osh[axis] = 0;
  for (const Var& v : xs) osh[axis] += v.value().dim(axis);
  Tensor out(osh);

  // treat as [outer, axis_dim, inner] blocks
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= osh[d];
  for (std::size_t d = axis + 1; d < nd; ++d) inner *= osh[d];
  std::size_t off = 0;
  for (const Var& v : xs) {
    std::size_t ad = v.value().dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t a = 0; a < ad; ++a)
        std::copy_n(v.value().data() + (o * ad + a) * inner, inner,
                    out.data() + (o * osh[axis] + off + a) * inner);
    off += ad;
  }

  Tape* t = nullptr;
  for (const Var& v : xs)
    if (v.on_tape()) {
      if (t && t != v.tape()) fail("concat", "operands recorded on different tapes");
      t = v.tape();
    }
  if (!t) return Var(std::move(out));

  struct Part { int node; std::size_t ad; Shape shape; };
  auto parts = std::make_shared<std::vector<Part>>();
  for (const Var& v : xs) parts->push_back({v.node(), v.value().dim(axis), v.value().shape()});
  std::size_t total = osh[axis];
  return t->record(std::move(out), xs, [parts, outer, inner, total](const Tensor& g, GradientMap& gm) {
    std::size_t off = 0;
    for (const Part& p : *parts) {
      if (p.node >= 0) {
        Tensor& gp = gm.ensure(p.node, p.shape);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t a = 0; a < p.ad; ++a) {
            const double* src = g.data() + (o * total + off + a) * inner;
            double* dst = gp.data() + (o * p.ad + a) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
      }
      off += p.ad;
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel())
    fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor out(shape, std::vector<double>(x.value().data(), x.value().data() + x.value().numel()));
  Tape* t = tape_of("reshape", {&x});
  if (!t) return Var(std::move(out));
  int px = x.node();
  Shape orig = x.shape();
  return t->record(std::move(out), {x}, [px, orig](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, orig);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

Var gather_rows(const Var& x, std::vector<std::size_t> idx) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 1 && xv.ndim() != 2)
    fail("gather_rows", "expected 1-D or 2-D, got " + shape_str(xv.shape()));
  std::size_t nrows = xv.dim(0);
  std::size_t width = xv.ndim() == 2 ? xv.cols() : 1;
  for (std::size_t i : idx)
    if (i >= nrows)
      fail("gather_rows", "index " + std::to_string(i) + " out of range for " + shape_str(xv.shape()));
  Shape osh = xv.shape();
  osh[0] = idx.size();
  Tensor out(osh);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(xv.data() + idx[r] * width, width, out.data() + r * width);
  Tape* t = tape_of("gather_rows", {&x});
  if (!t) return Var(std::move(out));
  int px = x.node();
  Shape orig = xv.shape();
  auto ids = std::make_shared<std::vector<std::size_t>>(std::move(idx));
  return t->record(std::move(out), {x}, [px, orig, width, ids](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, orig);
    for (std::size_t r = 0; r < ids->size(); ++r) {
      const double* src = g.data() + r * width;
      double* dst = gx.data() + (*ids)[r] * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
    }
  });
}

Var row_norm_mean(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 2) fail("row_norm_mean", "expected 2-D, got " + shape_str(xv.shape()));
  std::size_t n = xv.rows(), d = xv.cols();
  if (n == 0) fail("row_norm_mean", "empty tensor");
  auto norms = std::make_shared<std::vector<double>>(n, 0.0);
  double acc = 0;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += xv.at(r, c) * xv.at(r, c);
    (*norms)[r] = std::sqrt(s);
    acc += (*norms)[r];
  }
  acc /= static_cast<double>(n);
  Tape* t = tape_of("row_norm_mean", {&x});
  if (!t) return Var(Tensor::scalar(acc));
  int px = x.node();
  auto xp = x.ptr();
  return t->record(Tensor::scalar(acc), {x}, [px, xp, norms, n, d](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, xp->shape());
    for (std::size_t r = 0; r < n; ++r) {
      double nr = (*norms)[r];
      if (nr == 0.0) continue;  // subgradient 0 for zero rows: keeps ||.|| usable at the origin
      double coef = g[0] / (static_cast<double>(n) * nr);
      for (std::size_t c = 0; c < d; ++c) gx.at(r, c) += coef * xp->at(r, c);
    }
  });
}

Var layer_norm(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 1 && xv.ndim() != 2)
    fail("layer_norm", "expected 1-D or 2-D, got " + shape_str(xv.shape()));
  constexpr double kEps = 1e-5;
  std::size_t rows = xv.ndim() == 2 ? xv.rows() : 1;
  std::size_t cols = xv.ndim() == 2 ? xv.cols() : xv.dim(0);
  if (cols == 0) fail("layer_norm", "empty axis");
  Tensor out(xv.shape());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    double iv = 1.0 / std::sqrt(var + kEps);
    (*inv)[r] = iv;
    double* o = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] = (in[c] - mu) * iv;
  }
  Tape* t = tape_of("layer_norm", {&x});
  if (!t) return Var(std::move(out));
  int px = x.node();
  auto y = std::make_shared<Tensor>(out);
  return t->record(std::move(out), {x}, [px, y, inv, rows, cols](const Tensor& g, GradientMap& gm) {
    Tensor& gx = gm.ensure(px, y->shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yy = y->data() + r * cols;
      const double* gg = g.data() + r * cols;
      double gmean = 0, gydot = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        gmean += gg[c];
        gydot += gg[c] * yy[c];
      }
      gmean /= static_cast<double>(cols);
      gydot /= static_cast<double>(cols);
      double* gxr = gx.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c)
        gxr[c] += (*inv)[r] * (gg[c] - gmean - yy[c] * gydot);
    }
  });
}

Var repeat_rows(const Var& v, std::size_t n) {
  const Tensor& vv = v.value();
  std::size_t d;
  if (vv.ndim() == 1) d = vv.dim(0);
  else if (vv.ndim() == 2 && vv.rows() == 1) d = vv.cols();
  else fail("repeat_rows", "expected [d] or [1,d], got " + shape_str(vv.shape()));
  Tensor out({n, d});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(vv.data(), d, out.data() + r * d);
  Tape* t = tape_of("repeat_rows", {&v});
  if (!t) return Var(std::move(out));
  int pv = v.node();
  Shape orig = vv.shape();
  return t->record(std::move(out), {v}, [pv, orig, n, d](const Tensor& g, GradientMap& gm) {
    Tensor& gv = gm.ensure(pv, orig);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) gv[c] += g.at(r, c);
  });
}

Var dropout(const Var& x, double rate, const CounterRng& rng, std::uint64_t k0,
            std::uint64_t k1, std::uint64_t k2, bool train) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout", "rate must be in [0,1)");
  if (!train || rate == 0.0) return x;  // evaluation mode: identity
  double keep = 1.0 - rate;
  Tensor out(x.shape()), mask(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    bool kept = rng.uniform(rngkey::kDropout, k0 ^ (k1 << 20), k2, i) >= rate;
    mask[i] = kept ? 1.0 / keep : 0.0;  // inverted dropout keeps the expectation
    out[i] = x.value()[i] * mask[i];
  }
  return elementwise("dropout", x, std::move(out), std::move(mask));
}

// ---- finite differences ---------------------------------------------------

namespace {

double eval_scalar(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                   const std::vector<Tensor>& xs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(xs.size());
  for (const Tensor& x : xs) leaves.push_back(tape.leaf(x));
  Var out = f(tape, leaves);
  if (out.value().numel() != 1)
    fail("finite_difference_check", "function must return a scalar, got " + shape_str(out.shape()));
  return out.value()[0];
}

}  // namespace

FdiffReport finite_difference_check_many(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    const std::vector<Tensor>& x0, double step) {
  if (step <= 0) fail("finite_difference_check", "step must be positive");

  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& x : x0) leaves.push_back(tape.leaf(x));
  Var loss = f(tape, leaves);
  if (loss.value().numel() != 1)
    fail("finite_difference_check", "function must return a scalar, got " + shape_str(loss.shape()));
  if (!std::isfinite(loss.value()[0]))
    throw std::runtime_error("finite_difference_check: non-finite loss at the evaluation point");
  GradientMap gm = tape.backward(loss);

  FdiffReport rep;
  for (std::size_t p = 0; p < x0.size(); ++p) {
    Tensor analytic = gm.get(leaves[p]);
    for (std::size_t i = 0; i < x0[p].numel(); ++i) {
      std::vector<Tensor> xp = x0, xm = x0;
      xp[p][i] += step;
      xm[p][i] -= step;
      double fp = eval_scalar(f, xp);
      double fm = eval_scalar(f, xm);
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_difference_check: non-finite value at parameter " +
                                 std::to_string(p) + " coordinate " + std::to_string(i));
      double num = (fp - fm) / (2.0 * step);
      if (!std::isfinite(analytic[i]))
        throw std::runtime_error("finite_difference_check: non-finite gradient at parameter " +
                                 std::to_string(p) + " coordinate " + std::to_string(i));
      double rel = std::fabs(analytic[i] - num) / std::max(1.0, std::fabs(num));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p;
        rep.worst_coord = i;
        rep.analytic = analytic[i];
        rep.numeric = num;
      }
    }
  }
  return rep;
}

FdiffReport finite_difference_check(const std::function<Var(Tape&, const Var&)>& f,
                                    const Tensor& x0, double step) {
  return finite_difference_check_many(
      [&f](Tape& t, const std::vector<Var>& vs) { return f(t, vs[0]); }, {x0}, step);
}

}  // namespace meshrecon
