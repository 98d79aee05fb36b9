#include "tsfuse/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "tsfuse/error.hpp"

namespace tsfuse {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSquare: return "square";
    case OpKind::kMovingAverage: return "moving_average";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(OpKind op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

Shape broadcast_shape(OpKind op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_fail(op, "cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expressed in the axes of `out`, zero along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t in_axis = in.size() - 1 - k;
    const std::size_t out_axis = out.size() - 1 - k;
    strides[out_axis] = in[in_axis] == 1 ? 0 : stride;
    stride *= in[in_axis];
  }
  return strides;
}

template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t n = shape_size(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t axis = out.size(); axis-- > 0;) {
      ++idx[axis];
      ia += sa[axis];
      ib += sb[axis];
      if (idx[axis] < out[axis]) break;
      ia -= sa[axis] * out[axis];
      ib -= sb[axis] * out[axis];
      idx[axis] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct MatMulDims {
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  bool batched_rhs = false;
};

MatMulDims matmul_dims(const Shape& a, const Shape& b) {
  MatMulDims d;
  if (a.size() == 2) {
    d.m = a[0];
    d.k = a[1];
  } else {
    d.batch = a[0];
    d.m = a[1];
    d.k = a[2];
  }
  d.batched_rhs = b.size() == 3;
  d.n = b.back();
  return d;
}

}  // namespace

Var Graph::push(Node n) {
  if (nodes_.size() >= UINT32_MAX - 1) throw GraphError("graph too large");
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw GraphError("invalid variable handle");
  return nodes_[v.id];
}

Graph::Node& Graph::node(Var v) {
  if (!v.valid() || v.id >= nodes_.size()) throw GraphError("invalid variable handle");
  return nodes_[v.id];
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  if (value.empty()) throw GraphError("leaf value must be a non-empty tensor");
  Node n;
  n.op = OpKind::kLeaf;
  n.shape = value.shape();
  n.value = std::move(value);
  n.has_value = true;
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

void Graph::set_value(Var v, Tensor value) {
  Node& n = node(v);
  if (n.op != OpKind::kLeaf) throw GraphError("set_value on a non-leaf node");
  if (value.shape() != n.shape)
    throw ShapeError("set_value: expected " + shape_string(n.shape) + ", got " +
                     shape_string(value.shape()));
  n.value = std::move(value);
  for (auto& other : nodes_)
    if (other.op != OpKind::kLeaf) other.has_value = false;
}

Var Graph::binary(OpKind op, Var a, Var b, double scalar) {
  Node n;
  n.op = op;
  n.inputs = {a.id, b.id};
  n.shape = broadcast_shape(op, node(a).shape, node(b).shape);
  n.scalar = scalar;
  n.flops = shape_size(n.shape);
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  const bool ok_rank = (sa.size() == 2 || sa.size() == 3) &&
                       (sb.size() == 2 || (sb.size() == 3 && sa.size() == 3));
  if (!ok_rank) shape_fail(OpKind::kMatMul, "unsupported ranks " + shape_string(sa) + " x " + shape_string(sb));
  const auto d = matmul_dims(sa, sb);
  const std::size_t kb = sb[sb.size() - 2];
  if (d.k != kb || (d.batched_rhs && sb[0] != d.batch))
    shape_fail(OpKind::kMatMul, "inner dimensions differ: " + shape_string(sa) + " x " + shape_string(sb));
  Node n;
  n.op = OpKind::kMatMul;
  n.inputs = {a.id, b.id};
  n.shape = sa.size() == 2 ? Shape{d.m, d.n} : Shape{d.batch, d.m, d.n};
  n.flops = 2ull * d.batch * d.m * d.k * d.n;
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
Var Graph::sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
Var Graph::mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }
Var Graph::div(Var a, Var b, double min_abs) { return binary(OpKind::kDiv, a, b, min_abs); }

Var Graph::relu(Var a) {
  Node n;
  n.op = OpKind::kRelu;
  n.inputs = {a.id};
  n.shape = node(a).shape;
  n.flops = shape_size(n.shape);
  return push(std::move(n));
}

Var Graph::sigmoid(Var a) {
  Node n;
  n.op = OpKind::kSigmoid;
  n.inputs = {a.id};
  n.shape = node(a).shape;
  n.flops = 4 * shape_size(n.shape);
  return push(std::move(n));
}

Var Graph::square(Var a) {
  Node n;
  n.op = OpKind::kSquare;
  n.inputs = {a.id};
  n.shape = node(a).shape;
  n.flops = shape_size(n.shape);
  return push(std::move(n));
}

Var Graph::layernorm(Var x, Var gamma, Var beta, double eps) {
  const Shape& sx = node(x).shape;
  const std::size_t width = sx.back();
  if (node(gamma).shape != Shape{width} || node(beta).shape != Shape{width})
    shape_fail(OpKind::kLayerNorm, "affine parameters must be [" + std::to_string(width) + "], got " +
                                       shape_string(node(gamma).shape) + " and " +
                                       shape_string(node(beta).shape));
  if (!(eps > 0)) shape_fail(OpKind::kLayerNorm, "eps must be positive");
  Node n;
  n.op = OpKind::kLayerNorm;
  n.inputs = {x.id, gamma.id, beta.id};
  n.shape = sx;
  n.scalar = eps;
  n.flops = 8 * shape_size(sx);
  return push(std::move(n));
}

Var Graph::concat(std::span<const Var> parts) {
  if (parts.empty()) shape_fail(OpKind::kConcat, "no inputs");
  Shape out = node(parts[0]).shape;
  const Shape lead(out.begin(), out.end() - 1);
  std::size_t width = 0;
  Node n;
  n.op = OpKind::kConcat;
  for (Var p : parts) {
    const Shape& s = node(p).shape;
    if (s.size() != out.size() || !std::equal(lead.begin(), lead.end(), s.begin()))
      shape_fail(OpKind::kConcat, "leading axes differ: " + shape_string(out) + " vs " + shape_string(s));
    width += s.back();
    n.inputs.push_back(p.id);
  }
  out.back() = width;
  n.shape = out;
  return push(std::move(n));
}

Var Graph::slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = node(a).shape;
  if (axis >= s.size() || begin >= end || end > s[axis])
    shape_fail(OpKind::kSlice, "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                   ") on axis " + std::to_string(axis) + " of " + shape_string(s));
  Node n;
  n.op = OpKind::kSlice;
  n.inputs = {a.id};
  n.shape = s;
  n.shape[axis] = end - begin;
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}

Var Graph::reduce(OpKind op, Var a, bool full, std::size_t axis) {
  const Shape& s = node(a).shape;
  Node n;
  n.op = op;
  n.inputs = {a.id};
  if (full) {
    n.shape = {1};
    n.axis = SIZE_MAX;
  } else {
    if (axis >= s.size()) shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_string(s));
    n.shape = s;
    n.shape[axis] = 1;
    n.axis = axis;
  }
  n.flops = shape_size(s);
  return push(std::move(n));
}

Var Graph::sum(Var a) { return reduce(OpKind::kSum, a, true, 0); }
Var Graph::sum(Var a, std::size_t axis) { return reduce(OpKind::kSum, a, false, axis); }
Var Graph::mean(Var a) { return reduce(OpKind::kMean, a, true, 0); }
Var Graph::mean(Var a, std::size_t axis) { return reduce(OpKind::kMean, a, false, axis); }

Var Graph::moving_average(Var a, std::size_t kernel) {
  const Shape& s = node(a).shape;
  if (s.size() != 2 && s.size() != 3)
    shape_fail(OpKind::kMovingAverage, "expects rank 2 or 3, got " + shape_string(s));
  if (kernel == 0 || kernel % 2 == 0)
    shape_fail(OpKind::kMovingAverage, "kernel must be odd, got " + std::to_string(kernel));
  Node n;
  n.op = OpKind::kMovingAverage;
  n.inputs = {a.id};
  n.shape = s;
  n.axis = s.size() == 2 ? 0 : 1;
  n.begin = kernel;
  n.flops = kernel * shape_size(s);
  return push(std::move(n));
}

Var Graph::transpose(Var a) {
  const Shape& s = node(a).shape;
  if (s.size() < 2) shape_fail(OpKind::kTranspose, "needs rank >= 2, got " + shape_string(s));
  Node n;
  n.op = OpKind::kTranspose;
  n.inputs = {a.id};
  n.shape = s;
  std::swap(n.shape[s.size() - 1], n.shape[s.size() - 2]);
  return push(std::move(n));
}

Var Graph::reshape(Var a, Shape shape) {
  const Shape& s = node(a).shape;
  if (shape_size(shape) != shape_size(s) || std::find(shape.begin(), shape.end(), 0u) != shape.end())
    shape_fail(OpKind::kReshape, shape_string(s) + " -> " + shape_string(shape));
  Node n;
  n.op = OpKind::kReshape;
  n.inputs = {a.id};
  n.shape = std::move(shape);
  return push(std::move(n));
}

const Shape& Graph::shape(Var v) const { return node(v).shape; }

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  if (!n.has_value) throw GraphError(std::string("value of unevaluated ") + op_name(n.op) + " node");
  return n.value;
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) throw GraphError("gradient requested before backward");
  return n.grad;
}

bool Graph::evaluated(Var v) const { return node(v).has_value; }
OpKind Graph::op(Var v) const { return node(v).op; }

std::vector<bool> Graph::ancestors(Var root) const {
  std::vector<bool> mark(root.id + 1, false);
  mark[root.id] = true;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    if (!mark[i]) continue;
    for (auto in : nodes_[i].inputs) mark[in] = true;
  }
  return mark;
}

std::uint64_t Graph::flop_count(Var root) const {
  node(root);
  const auto mark = ancestors(root);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < mark.size(); ++i)
    if (mark[i]) total += nodes_[i].flops;
  return total;
}

const Tensor& Graph::forward(Var root) {
  node(root);
  const auto mark = ancestors(root);
  for (std::size_t i = 0; i < mark.size(); ++i) {
    Node& n = nodes_[i];
    if (!mark[i] || n.has_value) continue;
    evaluate(n);
    n.has_value = true;
    if (check_finite_) n.value.require_finite(op_name(n.op));
  }
  return nodes_[root.id].value;
}

void Graph::evaluate(Node& n) {
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
  std::vector<double> out(shape_size(n.shape), 0.0);

  switch (n.op) {
    case OpKind::kLeaf:
      return;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kDiv: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const double min_abs = n.scalar;
      for_each_broadcast(n.shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        switch (n.op) {
          case OpKind::kAdd: out[i] = a[ia] + b[ib]; break;
          case OpKind::kSub: out[i] = a[ia] - b[ib]; break;
          case OpKind::kMul: out[i] = a[ia] * b[ib]; break;
          default: out[i] = std::abs(b[ib]) < min_abs ? 0.0 : a[ia] / b[ib]; break;
        }
      });
      break;
    }
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const auto d = matmul_dims(a.shape(), b.shape());
      for (std::size_t bt = 0; bt < d.batch; ++bt) {
        const double* pa = a.data().data() + bt * d.m * d.k;
        const double* pb = b.data().data() + (d.batched_rhs ? bt * d.k * d.n : 0);
        double* pc = out.data() + bt * d.m * d.n;
        for (std::size_t i = 0; i < d.m; ++i)
          for (std::size_t kk = 0; kk < d.k; ++kk) {
            const double av = pa[i * d.k + kk];
            if (av == 0.0) continue;
            const double* rowb = pb + kk * d.n;
            double* rowc = pc + i * d.n;
            for (std::size_t j = 0; j < d.n; ++j) rowc[j] += av * rowb[j];
          }
      }
      break;
    }
    case OpKind::kRelu: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0 ? a[i] : 0.0;
      break;
    }
    case OpKind::kSigmoid: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a[i]);
      break;
    }
    case OpKind::kSquare: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
      break;
    }
    case OpKind::kLayerNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      const std::size_t width = n.shape.back();
      const std::size_t rows = out.size() / width;
      // cache: normalized values followed by one inverse std per row
      n.cache.assign(out.size() + rows, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* px = x.data().data() + r * width;
        double mu = 0.0;
        for (std::size_t j = 0; j < width; ++j) mu += px[j];
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + n.scalar);
        n.cache[out.size() + r] = inv;
        for (std::size_t j = 0; j < width; ++j) {
          const double xhat = (px[j] - mu) * inv;
          n.cache[r * width + j] = xhat;
          out[r * width + j] = xhat * gamma[j] + beta[j];
        }
      }
      break;
    }
    case OpKind::kConcat: {
      const std::size_t width = n.shape.back();
      const std::size_t rows = out.size() / width;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& p = in(k);
        const std::size_t w = p.shape().back();
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(p.data().data() + r * w, w, out.data() + r * width + offset);
        offset += w;
      }
      break;
    }
    case OpKind::kSlice: {
      const Tensor& a = in(0);
      const auto sp = split_axis(a.shape(), n.axis);
      const std::size_t len = n.end - n.begin;
      for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(a.data().data() + (o * sp.n + n.begin) * sp.inner, len * sp.inner,
                    out.data() + o * len * sp.inner);
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const Tensor& a = in(0);
      if (n.axis == SIZE_MAX) {
        double s = 0.0;
        for (double v : a.data()) s += v;
        out[0] = n.op == OpKind::kMean ? s / static_cast<double>(a.size()) : s;
      } else {
        const auto sp = split_axis(a.shape(), n.axis);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < sp.n; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i)
              out[o * sp.inner + i] += a[(o * sp.n + j) * sp.inner + i];
        if (n.op == OpKind::kMean)
          for (double& v : out) v /= static_cast<double>(sp.n);
      }
      break;
    }
    case OpKind::kMovingAverage: {
      const Tensor& a = in(0);
      const auto sp = split_axis(a.shape(), n.axis);
      const std::size_t kernel = n.begin;
      const long half = static_cast<long>(kernel / 2);
      const long len = static_cast<long>(sp.n);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (long t = 0; t < len; ++t)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            double s = 0.0;
            for (long j = -half; j <= half; ++j) {
              const long src = std::clamp(t + j, 0L, len - 1);
              s += a[(o * sp.n + static_cast<std::size_t>(src)) * sp.inner + i];
            }
            out[(o * sp.n + static_cast<std::size_t>(t)) * sp.inner + i] = s / static_cast<double>(kernel);
          }
      break;
    }
    case OpKind::kTranspose: {
      const Tensor& a = in(0);
      const Shape& s = a.shape();
      const std::size_t rows = s[s.size() - 2];
      const std::size_t cols = s[s.size() - 1];
      const std::size_t batch = a.size() / (rows * cols);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            out[b * rows * cols + j * rows + i] = a[b * rows * cols + i * cols + j];
      break;
    }
    case OpKind::kReshape: {
      const auto src = in(0).data();
      std::copy(src.begin(), src.end(), out.begin());
      break;
    }
  }
  n.value = Tensor::unchecked(n.shape, std::move(out));
}

void Graph::backward(Var root) {
  Node& r = node(root);
  if (!r.has_value) throw GraphError("backward called before forward");
  const auto mark = ancestors(root);
  for (auto& n : nodes_) n.grad = Tensor(n.shape, 0.0);
  r.grad.fill(1.0);
  for (std::size_t i = mark.size(); i-- > 0;) {
    if (!mark[i] || nodes_[i].op == OpKind::kLeaf) continue;
    propagate(nodes_[i]);
  }
}

void Graph::propagate(Node& n) {
  const auto g = n.grad.data();
  auto input = [&](std::size_t k) -> Node& { return nodes_[n.inputs[k]]; };

  switch (n.op) {
    case OpKind::kLeaf:
      return;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kDiv: {
      Node& na = input(0);
      Node& nb = input(1);
      const Tensor& a = na.value;
      const Tensor& b = nb.value;
      auto ga = na.grad.data();
      auto gb = nb.grad.data();
      const double min_abs = n.scalar;
      for_each_broadcast(n.shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        switch (n.op) {
          case OpKind::kAdd: ga[ia] += g[i]; gb[ib] += g[i]; break;
          case OpKind::kSub: ga[ia] += g[i]; gb[ib] -= g[i]; break;
          case OpKind::kMul: ga[ia] += g[i] * b[ib]; gb[ib] += g[i] * a[ia]; break;
          default:
            if (std::abs(b[ib]) < min_abs) break;
            ga[ia] += g[i] / b[ib];
            gb[ib] -= g[i] * a[ia] / (b[ib] * b[ib]);
            break;
        }
      });
      break;
    }
    case OpKind::kMatMul: {
      Node& na = input(0);
      Node& nb = input(1);
      const Tensor& a = na.value;
      const Tensor& b = nb.value;
      const auto d = matmul_dims(a.shape(), b.shape());
      auto ga = na.grad.data();
      auto gb = nb.grad.data();
      for (std::size_t bt = 0; bt < d.batch; ++bt) {
        const double* pa = a.data().data() + bt * d.m * d.k;
        const std::size_t boff = d.batched_rhs ? bt * d.k * d.n : 0;
        const double* pb = b.data().data() + boff;
        const double* pg = g.data() + bt * d.m * d.n;
        double* pga = ga.data() + bt * d.m * d.k;
        double* pgb = gb.data() + boff;
        for (std::size_t i = 0; i < d.m; ++i) {
          const double* rowg = pg + i * d.n;
          for (std::size_t kk = 0; kk < d.k; ++kk) {
            const double* rowb = pb + kk * d.n;
            double acc = 0.0;
            for (std::size_t j = 0; j < d.n; ++j) acc += rowg[j] * rowb[j];
            pga[i * d.k + kk] += acc;
            const double av = pa[i * d.k + kk];
            if (av == 0.0) continue;
            double* rowgb = pgb + kk * d.n;
            for (std::size_t j = 0; j < d.n; ++j) rowgb[j] += av * rowg[j];
          }
        }
      }
      break;
    }
    case OpKind::kRelu: {
      Node& na = input(0);
      auto ga = na.grad.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (na.value[i] > 0) ga[i] += g[i];
      break;
    }
    case OpKind::kSigmoid: {
      Node& na = input(0);
      auto ga = na.grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = n.value[i];
        ga[i] += g[i] * s * (1.0 - s);
      }
      break;
    }
    case OpKind::kSquare: {
      Node& na = input(0);
      auto ga = na.grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * na.value[i] * g[i];
      break;
    }
    case OpKind::kLayerNorm: {
      Node& nx = input(0);
      Node& ngamma = input(1);
      Node& nbeta = input(2);
      const Tensor& gamma = ngamma.value;
      const std::size_t width = n.shape.back();
      const std::size_t rows = g.size() / width;
      auto gx = nx.grad.data();
      auto ggamma = ngamma.grad.data();
      auto gbeta = nbeta.grad.data();
      std::vector<double> dxhat(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const double inv = n.cache[g.size() + r];
        const double* xhat = n.cache.data() + r * width;
        const double* gr = g.data() + r * width;
        double sum_d = 0.0;
        double sum_dx = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          dxhat[j] = gr[j] * gamma[j];
          sum_d += dxhat[j];
          sum_dx += dxhat[j] * xhat[j];
          ggamma[j] += gr[j] * xhat[j];
          gbeta[j] += gr[j];
        }
        const double w = static_cast<double>(width);
        for (std::size_t j = 0; j < width; ++j)
          gx[r * width + j] += inv / w * (w * dxhat[j] - sum_d - xhat[j] * sum_dx);
      }
      break;
    }
    case OpKind::kConcat: {
      const std::size_t width = n.shape.back();
      const std::size_t rows = g.size() / width;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& p = input(k);
        const std::size_t w = p.shape.back();
        auto gp = p.grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * width + offset + j];
        offset += w;
      }
      break;
    }
    case OpKind::kSlice: {
      Node& na = input(0);
      const auto sp = split_axis(na.shape, n.axis);
      const std::size_t len = n.end - n.begin;
      auto ga = na.grad.data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < len * sp.inner; ++e)
          ga[(o * sp.n + n.begin) * sp.inner + e] += g[o * len * sp.inner + e];
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      Node& na = input(0);
      auto ga = na.grad.data();
      if (n.axis == SIZE_MAX) {
        const double scale = n.op == OpKind::kMean ? 1.0 / static_cast<double>(ga.size()) : 1.0;
        for (double& v : ga) v += g[0] * scale;
      } else {
        const auto sp = split_axis(na.shape, n.axis);
        const double scale = n.op == OpKind::kMean ? 1.0 / static_cast<double>(sp.n) : 1.0;
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < sp.n; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i)
              ga[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i] * scale;
      }
      break;
    }
    case OpKind::kMovingAverage: {
      Node& na = input(0);
      const auto sp = split_axis(na.shape, n.axis);
      const std::size_t kernel = n.begin;
      const long half = static_cast<long>(kernel / 2);
      const long len = static_cast<long>(sp.n);
      const double scale = 1.0 / static_cast<double>(kernel);
      auto ga = na.grad.data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (long t = 0; t < len; ++t)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const double gv = g[(o * sp.n + static_cast<std::size_t>(t)) * sp.inner + i] * scale;
            for (long j = -half; j <= half; ++j) {
              const long src = std::clamp(t + j, 0L, len - 1);
              ga[(o * sp.n + static_cast<std::size_t>(src)) * sp.inner + i] += gv;
            }
          }
      break;
    }
    case OpKind::kTranspose: {
      Node& na = input(0);
      const Shape& s = na.shape;
      const std::size_t rows = s[s.size() - 2];
      const std::size_t cols = s[s.size() - 1];
      const std::size_t batch = na.value.size() / (rows * cols);
      auto ga = na.grad.data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            ga[b * rows * cols + i * cols + j] += g[b * rows * cols + j * rows + i];
      break;
    }
    case OpKind::kReshape: {
      auto ga = input(0).grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
  }
}

double check_gradients(Graph& graph, Var root, Var leaf, double step) {
  if (!(step > 0)) throw GraphError("check_gradients: step must be positive");
  if (shape_size(graph.shape(root)) != 1) throw ShapeError("check_gradients: root must be a scalar");
  graph.forward(root);
  graph.backward(root);
  const Tensor analytic = graph.grad(leaf);
  Tensor original = graph.value(leaf);
  double worst = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    Tensor plus = original;
    plus[i] += step;
    graph.set_value(leaf, plus);
    const double fp = graph.forward(root)[0];
    Tensor minus = original;
    minus[i] -= step;
    graph.set_value(leaf, minus);
    const double fm = graph.forward(root)[0];
    const double numeric = (fp - fm) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  graph.set_value(leaf, original);
  graph.forward(root);
  return worst;
}

}  // namespace tsfuse
