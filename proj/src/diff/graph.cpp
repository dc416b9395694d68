// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/diff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cycleadapt/error.hpp"
#include "kernels.hpp"

namespace cycleadapt::diff {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::BatchMatMul: return "bmm";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::ScalarMul: return "scalar-mul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Relu: return "relu";
    case Op::LayerNorm: return "layer-norm";
    case Op::MeanAbs: return "mean-abs";
    case Op::MaskSelect: return "mask-select";
    case Op::Sum: return "sum";
    case Op::Rot6d: return "rot6d";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

NodeId Graph::push(Node n) {
  for (NodeId in : n.inputs) {
    if (in >= nodes_.size()) throw ShapeError("node input id out of range");
  }
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(std::string name, bool trainable) {
  Node n;
  n.op = Op::Leaf;
  n.name = std::move(name);
  n.trainable = trainable;
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::make_shared<const Tensor>(std::move(value));
  return push(std::move(n));
}

NodeId Graph::constant(std::shared_ptr<const Tensor> value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

namespace {
Node make(Op op, std::vector<NodeId> inputs) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  return n;
}
}  // namespace

NodeId Graph::matmul(NodeId a, NodeId b) { return push(make(Op::MatMul, {a, b})); }
NodeId Graph::bmm(NodeId a, NodeId b) { return push(make(Op::BatchMatMul, {a, b})); }
NodeId Graph::add(NodeId a, NodeId b) { return push(make(Op::Add, {a, b})); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(make(Op::Sub, {a, b})); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(make(Op::Mul, {a, b})); }
NodeId Graph::transpose(NodeId a) { return push(make(Op::Transpose, {a})); }
NodeId Graph::relu(NodeId a) { return push(make(Op::Relu, {a})); }
NodeId Graph::mean_abs(NodeId a) { return push(make(Op::MeanAbs, {a})); }
NodeId Graph::sum(NodeId a) { return push(make(Op::Sum, {a})); }
NodeId Graph::rot6d(NodeId a) { return push(make(Op::Rot6d, {a})); }

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias) {
  return push(make(Op::LayerNorm, {x, gain, bias}));
}

NodeId Graph::scale(NodeId a, double c) {
  Node n = make(Op::ScalarMul, {a});
  n.scalar = c;
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape shape) {
  Node n = make(Op::Reshape, {a});
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::concat(std::vector<NodeId> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Node n = make(Op::Concat, std::move(parts));
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::slice(NodeId a, std::size_t axis, std::size_t start, std::size_t length) {
  Node n = make(Op::Slice, {a});
  n.axis = axis;
  n.start = start;
  n.length = length;
  return push(std::move(n));
}

NodeId Graph::mask_select(NodeId a, std::size_t axis, std::vector<std::uint8_t> mask) {
  Node n = make(Op::MaskSelect, {a});
  n.axis = axis;
  n.mask = std::move(mask);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Shape helpers

namespace {

[[noreturn]] void shape_fail(NodeId id, const Node& n, const std::string& what) {
  throw ShapeError("node " + std::to_string(id) + " (" + op_name(n.op) + "): " + what);
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;  // stride of a per output axis, 0 if broadcast
  std::vector<std::size_t> stride_b;
  bool same = false;
};

std::vector<std::size_t> strides_for(const Shape& s, std::size_t rank) {
  // strides aligned to the right of an output of the given rank
  std::vector<std::size_t> st(rank, 0);
  std::size_t acc = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t ax = s.size() - 1 - i;
    const std::size_t out_ax = rank - 1 - i;
    st[out_ax] = s[ax] == 1 ? 0 : acc;
    acc *= s[ax];
  }
  return st;
}

bool broadcast_shapes(const Shape& a, const Shape& b, Broadcast& bc) {
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) return false;
    bc.out[rank - 1 - i] = std::max(da, db);
  }
  bc.same = a == b;
  bc.stride_a = strides_for(a, rank);
  bc.stride_b = strides_for(b, rank);
  return true;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t total = numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += bc.stride_a[ax];
      ib += bc.stride_b[ax];
      if (idx[ax] < bc.out[ax]) break;
      ia -= bc.stride_a[ax] * idx[ax];
      ib -= bc.stride_b[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::size_t batch_of(const Shape& s) {
  std::size_t b = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) b *= s[i];
  return b;
}

// 6D -> rotation, columns are the Gram-Schmidt frame (b1, b2, b1 x b2).
struct Frame {
  double b1[3], b2[3], b3[3];
  double n1, n2, d;
};

Frame rot6d_frame(const double* r) {
  Frame f{};
  const double* a1 = r;
  const double* a2 = r + 3;
  f.n1 = std::sqrt(a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]);
  if (!(f.n1 > 1e-8)) throw DegenerateInputError("rot6d: first vector has near-zero norm");
  for (int i = 0; i < 3; ++i) f.b1[i] = a1[i] / f.n1;
  f.d = f.b1[0] * a2[0] + f.b1[1] * a2[1] + f.b1[2] * a2[2];
  double u[3];
  for (int i = 0; i < 3; ++i) u[i] = a2[i] - f.d * f.b1[i];
  f.n2 = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  if (!(f.n2 > 1e-8)) throw DegenerateInputError("rot6d: vectors are parallel or second is near zero");
  for (int i = 0; i < 3; ++i) f.b2[i] = u[i] / f.n2;
  f.b3[0] = f.b1[1] * f.b2[2] - f.b1[2] * f.b2[1];
  f.b3[1] = f.b1[2] * f.b2[0] - f.b1[0] * f.b2[2];
  f.b3[2] = f.b1[0] * f.b2[1] - f.b1[1] * f.b2[0];
  return f;
}

void cross(const double* a, const double* b, double* out) {
  out[0] = a[1] * b[2] - a[2] * b[1];
  out[1] = a[2] * b[0] - a[0] * b[2];
  out[2] = a[0] * b[1] - a[1] * b[0];
}

double dot3(const double* a, const double* b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

const Tensor& value_of(const std::vector<Tensor>& v, NodeId id) { return v[id]; }

// ---------------------------------------------------------------------------
// Forward

Tensor forward_node(NodeId id, const Node& n, const std::vector<Tensor>& v, const Bindings& bindings) {
  switch (n.op) {
    case Op::Leaf: {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) throw UnboundLeafError("unbound leaf '" + n.name + "'");
      return it->second;
    }
    case Op::Constant:
      return *n.value;

    case Op::MatMul: {
      const Tensor& a = value_of(v, n.inputs[0]);
      const Tensor& b = value_of(v, n.inputs[1]);
      if (a.rank() < 2 || b.rank() != 2 || a.shape.back() != b.shape[0])
        shape_fail(id, n, "cannot multiply " + to_string(a.shape) + " by " + to_string(b.shape));
      const std::size_t k = b.shape[0], cols = b.shape[1];
      const std::size_t rows = a.numel() / k;
      Shape out = a.shape;
      out.back() = cols;
      Tensor c(out);
      kernels::gemm_nn(rows, k, cols, a.data.data(), b.data.data(), c.data.data());
      return c;
    }
    case Op::BatchMatMul: {
      const Tensor& a = value_of(v, n.inputs[0]);
      const Tensor& b = value_of(v, n.inputs[1]);
      const bool ok = a.rank() >= 2 && a.rank() == b.rank() &&
                      std::equal(a.shape.begin(), a.shape.end() - 2, b.shape.begin()) &&
                      a.shape[a.rank() - 1] == b.shape[b.rank() - 2];
      if (!ok) shape_fail(id, n, "cannot batch-multiply " + to_string(a.shape) + " by " + to_string(b.shape));
      const std::size_t m = a.shape[a.rank() - 2], k = a.shape.back(), cols = b.shape.back();
      const std::size_t batch = batch_of(a.shape);
      Shape out = a.shape;
      out.back() = cols;
      Tensor c(out);
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm_nn(m, k, cols, a.data.data() + i * m * k, b.data.data() + i * k * cols,
                         c.data.data() + i * m * cols);
      return c;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& a = value_of(v, n.inputs[0]);
      const Tensor& b = value_of(v, n.inputs[1]);
      Broadcast bc;
      if (!broadcast_shapes(a.shape, b.shape, bc))
        shape_fail(id, n, "cannot broadcast " + to_string(a.shape) + " with " + to_string(b.shape));
      Tensor c(bc.out);
      double* out = c.data.data();
      const double* pa = a.data.data();
      const double* pb = b.data.data();
      if (n.op == Op::Add)
        for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] + pb[ib]; });
      else if (n.op == Op::Sub)
        for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] - pb[ib]; });
      else
        for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] * pb[ib]; });
      return c;
    }
    case Op::ScalarMul: {
      Tensor c = value_of(v, n.inputs[0]);
      for (double& x : c.data) x *= n.scalar;
      return c;
    }
    case Op::Transpose: {
      const Tensor& a = value_of(v, n.inputs[0]);
      if (a.rank() < 2) shape_fail(id, n, "transpose needs rank >= 2, got " + to_string(a.shape));
      const std::size_t r = a.shape[a.rank() - 2], cols = a.shape.back();
      Shape out = a.shape;
      std::swap(out[out.size() - 2], out.back());
      Tensor c(out);
      const std::size_t batch = batch_of(a.shape);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = a.data.data() + b * r * cols;
        double* dst = c.data.data() + b * r * cols;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < cols; ++j) dst[j * r + i] = src[i * cols + j];
      }
      return c;
    }
    case Op::Reshape: {
      const Tensor& a = value_of(v, n.inputs[0]);
      if (numel(n.shape) != a.numel())
        shape_fail(id, n, "cannot reshape " + to_string(a.shape) + " to " + to_string(n.shape));
      return Tensor(n.shape, a.data);
    }
    case Op::Concat: {
      const Tensor& first = value_of(v, n.inputs[0]);
      if (n.axis >= first.rank()) shape_fail(id, n, "axis out of range");
      Shape out = first.shape;
      out[n.axis] = 0;
      for (NodeId in : n.inputs) {
        const Tensor& t = value_of(v, in);
        bool ok = t.rank() == first.rank();
        for (std::size_t ax = 0; ok && ax < t.rank(); ++ax)
          if (ax != n.axis && t.shape[ax] != first.shape[ax]) ok = false;
        if (!ok) shape_fail(id, n, "part " + to_string(t.shape) + " incompatible with " + to_string(first.shape));
        out[n.axis] += t.shape[n.axis];
      }
      Tensor c(out);
      const AxisSplit os = split_at(out, n.axis);
      std::size_t offset = 0;
      for (NodeId in : n.inputs) {
        const Tensor& t = value_of(v, in);
        const AxisSplit ts = split_at(t.shape, n.axis);
        for (std::size_t o = 0; o < ts.outer; ++o)
          std::copy_n(t.data.data() + o * ts.dim * ts.inner, ts.dim * ts.inner,
                      c.data.data() + o * os.dim * os.inner + offset * os.inner);
        offset += ts.dim;
      }
      return c;
    }
    case Op::Slice: {
      const Tensor& a = value_of(v, n.inputs[0]);
      if (n.axis >= a.rank() || n.start + n.length > a.shape[n.axis] || n.length == 0)
        shape_fail(id, n, "slice out of range for " + to_string(a.shape));
      Shape out = a.shape;
      out[n.axis] = n.length;
      Tensor c(out);
      const AxisSplit s = split_at(a.shape, n.axis);
      for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(a.data.data() + (o * s.dim + n.start) * s.inner, n.length * s.inner,
                    c.data.data() + o * n.length * s.inner);
      return c;
    }
    case Op::Relu: {
      Tensor c = value_of(v, n.inputs[0]);
      for (double& x : c.data) x = x > 0.0 ? x : 0.0;
      return c;
    }
    case Op::LayerNorm: {
      const Tensor& x = value_of(v, n.inputs[0]);
      const Tensor& g = value_of(v, n.inputs[1]);
      const Tensor& b = value_of(v, n.inputs[2]);
      if (x.rank() < 1) shape_fail(id, n, "layer-norm needs rank >= 1");
      const std::size_t w = x.shape.back();
      if (g.numel() != w || b.numel() != w)
        shape_fail(id, n, "gain/bias " + to_string(g.shape) + "/" + to_string(b.shape) +
                              " do not match feature width " + std::to_string(w));
      Tensor c(x.shape);
      const std::size_t rows = x.numel() / w;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * w;
        double* yr = c.data.data() + r * w;
        double mean = 0.0;
        for (std::size_t j = 0; j < w; ++j) mean += xr[j];
        mean /= static_cast<double>(w);
        double var = 0.0;
        for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(w);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < w; ++j) yr[j] = g.data[j] * (xr[j] - mean) * rstd + b.data[j];
      }
      return c;
    }
    case Op::MeanAbs: {
      const Tensor& a = value_of(v, n.inputs[0]);
      if (a.numel() == 0) shape_fail(id, n, "mean of empty tensor");
      double s = 0.0;
      for (double x : a.data) s += std::abs(x);
      return Tensor::scalar(s / static_cast<double>(a.numel()));
    }
    case Op::MaskSelect: {
      const Tensor& a = value_of(v, n.inputs[0]);
      if (n.axis >= a.rank() || n.mask.size() != a.shape[n.axis])
        shape_fail(id, n, "mask of length " + std::to_string(n.mask.size()) + " does not fit " + to_string(a.shape));
      std::size_t kept = 0;
      for (auto m : n.mask) kept += m ? 1 : 0;
      if (kept == 0) shape_fail(id, n, "mask selects nothing");
      Shape out = a.shape;
      out[n.axis] = kept;
      Tensor c(out);
      const AxisSplit s = split_at(a.shape, n.axis);
      double* dst = c.data.data();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t d = 0; d < s.dim; ++d)
          if (n.mask[d]) {
            std::copy_n(a.data.data() + (o * s.dim + d) * s.inner, s.inner, dst);
            dst += s.inner;
          }
      return c;
    }
    case Op::Sum: {
      const Tensor& a = value_of(v, n.inputs[0]);
      double s = 0.0;
      for (double x : a.data) s += x;
      return Tensor::scalar(s);
    }
    case Op::Rot6d: {
      const Tensor& a = value_of(v, n.inputs[0]);
      if (a.rank() < 1 || a.shape.back() != 6) shape_fail(id, n, "rot6d needs trailing dim 6, got " + to_string(a.shape));
      Shape out = a.shape;
      out.back() = 3;
      out.push_back(3);
      Tensor c(out);
      const std::size_t count = a.numel() / 6;
      for (std::size_t i = 0; i < count; ++i) {
        Frame f;
        try {
          f = rot6d_frame(a.data.data() + 6 * i);
        } catch (const DegenerateInputError& e) {
          throw DegenerateInputError("node " + std::to_string(id) + " (rot6d), entry " + std::to_string(i) + ": " + e.what());
        }
        double* r = c.data.data() + 9 * i;
        for (int row = 0; row < 3; ++row) {
          r[row * 3 + 0] = f.b1[row];
          r[row * 3 + 1] = f.b2[row];
          r[row * 3 + 2] = f.b3[row];
        }
      }
      return c;
    }
  }
  shape_fail(id, n, "unknown op");
}

// ---------------------------------------------------------------------------
// Backward helpers

void accumulate(Tensor& slot, const Shape& shape, const Tensor& g) {
  if (slot.data.empty()) {
    slot = g;
    slot.shape = shape;
    return;
  }
  for (std::size_t i = 0; i < g.numel(); ++i) slot.data[i] += g.data[i];
}

Tensor& slot_for(std::vector<Tensor>& adj, const std::vector<Tensor>& v, NodeId id) {
  if (adj[id].data.empty()) adj[id] = Tensor(v[id].shape, 0.0);
  return adj[id];
}

void backward_node(const Node& n, const Tensor& g, const std::vector<Tensor>& v, std::vector<Tensor>& adj,
                   const std::vector<char>& needs) {
  auto want = [&](std::size_t i) { return needs[n.inputs[i]] != 0; };
  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      return;

    case Op::MatMul: {
      const Tensor& a = v[n.inputs[0]];
      const Tensor& b = v[n.inputs[1]];
      const std::size_t k = b.shape[0], cols = b.shape[1], rows = a.numel() / k;
      if (want(0)) {
        Tensor& ga = slot_for(adj, v, n.inputs[0]);
        kernels::gemm_nt(rows, cols, k, g.data.data(), b.data.data(), ga.data.data());
      }
      if (want(1)) {
        Tensor& gb = slot_for(adj, v, n.inputs[1]);
        kernels::gemm_tn(rows, k, cols, a.data.data(), g.data.data(), gb.data.data());
      }
      return;
    }
    case Op::BatchMatMul: {
      const Tensor& a = v[n.inputs[0]];
      const Tensor& b = v[n.inputs[1]];
      const std::size_t m = a.shape[a.rank() - 2], k = a.shape.back(), cols = b.shape.back();
      const std::size_t batch = batch_of(a.shape);
      if (want(0)) {
        Tensor& ga = slot_for(adj, v, n.inputs[0]);
        for (std::size_t i = 0; i < batch; ++i)
          kernels::gemm_nt(m, cols, k, g.data.data() + i * m * cols, b.data.data() + i * k * cols,
                           ga.data.data() + i * m * k);
      }
      if (want(1)) {
        Tensor& gb = slot_for(adj, v, n.inputs[1]);
        for (std::size_t i = 0; i < batch; ++i)
          kernels::gemm_tn(m, k, cols, a.data.data() + i * m * k, g.data.data() + i * m * cols,
                           gb.data.data() + i * k * cols);
      }
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& a = v[n.inputs[0]];
      const Tensor& b = v[n.inputs[1]];
      Broadcast bc;
      broadcast_shapes(a.shape, b.shape, bc);
      const double* pg = g.data.data();
      if (want(0)) {
        double* ga = slot_for(adj, v, n.inputs[0]).data.data();
        if (n.op == Op::Mul) {
          const double* pb = b.data.data();
          for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += pg[i] * pb[ib]; });
        } else {
          for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += pg[i]; });
        }
      }
      if (want(1)) {
        double* gb = slot_for(adj, v, n.inputs[1]).data.data();
        if (n.op == Op::Mul) {
          const double* pa = a.data.data();
          for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += pg[i] * pa[ia]; });
        } else if (n.op == Op::Sub) {
          for_each_broadcast(bc, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= pg[i]; });
        } else {
          for_each_broadcast(bc, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += pg[i]; });
        }
      }
      return;
    }
    case Op::ScalarMul: {
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += n.scalar * g.data[i];
      return;
    }
    case Op::Transpose: {
      const Tensor& a = v[n.inputs[0]];
      const std::size_t r = a.shape[a.rank() - 2], cols = a.shape.back();
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      const std::size_t batch = batch_of(a.shape);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = g.data.data() + b * r * cols;
        double* dst = ga.data.data() + b * r * cols;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < cols; ++j) dst[i * cols + j] += src[j * r + i];
      }
      return;
    }
    case Op::Reshape:
      accumulate(adj[n.inputs[0]], v[n.inputs[0]].shape, g);
      return;

    case Op::Concat: {
      const Shape& out = g.shape;
      const AxisSplit os = split_at(out, n.axis);
      std::size_t offset = 0;
      for (NodeId in : n.inputs) {
        const Tensor& t = v[in];
        const AxisSplit ts = split_at(t.shape, n.axis);
        if (needs[in]) {
          Tensor& gt = slot_for(adj, v, in);
          for (std::size_t o = 0; o < ts.outer; ++o) {
            const double* src = g.data.data() + o * os.dim * os.inner + offset * os.inner;
            double* dst = gt.data.data() + o * ts.dim * ts.inner;
            for (std::size_t i = 0; i < ts.dim * ts.inner; ++i) dst[i] += src[i];
          }
        }
        offset += ts.dim;
      }
      return;
    }
    case Op::Slice: {
      const Tensor& a = v[n.inputs[0]];
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      const AxisSplit s = split_at(a.shape, n.axis);
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = ga.data.data() + (o * s.dim + n.start) * s.inner;
        const double* src = g.data.data() + o * n.length * s.inner;
        for (std::size_t i = 0; i < n.length * s.inner; ++i) dst[i] += src[i];
      }
      return;
    }
    case Op::Relu: {
      const Tensor& a = v[n.inputs[0]];
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.data[i] > 0.0) ga.data[i] += g.data[i];
      return;
    }
    case Op::LayerNorm: {
      const Tensor& x = v[n.inputs[0]];
      const Tensor& gain = v[n.inputs[1]];
      const std::size_t w = x.shape.back();
      const std::size_t rows = x.numel() / w;
      double* gx = want(0) ? slot_for(adj, v, n.inputs[0]).data.data() : nullptr;
      double* gg = want(1) ? slot_for(adj, v, n.inputs[1]).data.data() : nullptr;
      double* gbias = want(2) ? slot_for(adj, v, n.inputs[2]).data.data() : nullptr;
      std::vector<double> xhat(w), dxhat(w);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * w;
        const double* gr = g.data.data() + r * w;
        double mean = 0.0;
        for (std::size_t j = 0; j < w; ++j) mean += xr[j];
        mean /= static_cast<double>(w);
        double var = 0.0;
        for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(w);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          xhat[j] = (xr[j] - mean) * rstd;
          dxhat[j] = gr[j] * gain.data[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[j];
          if (gg) gg[j] += gr[j] * xhat[j];
          if (gbias) gbias[j] += gr[j];
        }
        mean_d /= static_cast<double>(w);
        mean_dx /= static_cast<double>(w);
        if (gx)
          for (std::size_t j = 0; j < w; ++j) gx[r * w + j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
      }
      return;
    }
    case Op::MeanAbs: {
      const Tensor& a = v[n.inputs[0]];
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      const double scale = g.data[0] / static_cast<double>(a.numel());
      for (std::size_t i = 0; i < a.numel(); ++i) {
        const double x = a.data[i];
        if (x > 0.0) ga.data[i] += scale;
        else if (x < 0.0) ga.data[i] -= scale;
      }
      return;
    }
    case Op::MaskSelect: {
      const Tensor& a = v[n.inputs[0]];
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      const AxisSplit s = split_at(a.shape, n.axis);
      const double* src = g.data.data();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t d = 0; d < s.dim; ++d)
          if (n.mask[d]) {
            double* dst = ga.data.data() + (o * s.dim + d) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
            src += s.inner;
          }
      return;
    }
    case Op::Sum: {
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      for (double& x : ga.data) x += g.data[0];
      return;
    }
    case Op::Rot6d: {
      const Tensor& a = v[n.inputs[0]];
      Tensor& ga = slot_for(adj, v, n.inputs[0]);
      const std::size_t count = a.numel() / 6;
      for (std::size_t i = 0; i < count; ++i) {
        const double* r6 = a.data.data() + 6 * i;
        const Frame f = rot6d_frame(r6);
        const double* G = g.data.data() + 9 * i;
        double g1[3], g2[3], g3[3];
        for (int row = 0; row < 3; ++row) {
          g1[row] = G[row * 3 + 0];
          g2[row] = G[row * 3 + 1];
          g3[row] = G[row * 3 + 2];
        }
        // b3 = b1 x b2
        double t[3];
        cross(f.b2, g3, t);
        for (int k = 0; k < 3; ++k) g1[k] += t[k];
        cross(g3, f.b1, t);
        for (int k = 0; k < 3; ++k) g2[k] += t[k];
        // b2 = u / |u|
        double gu[3];
        const double p2 = dot3(f.b2, g2);
        for (int k = 0; k < 3; ++k) gu[k] = (g2[k] - f.b2[k] * p2) / f.n2;
        // u = a2 - (b1 . a2) b1
        const double* a2 = r6 + 3;
        double ga2[3];
        const double gd = -dot3(gu, f.b1);
        for (int k = 0; k < 3; ++k) {
          ga2[k] = gu[k] + gd * f.b1[k];
          g1[k] += -f.d * gu[k] + gd * a2[k];
        }
        // b1 = a1 / |a1|
        const double p1 = dot3(f.b1, g1);
        double* out = ga.data.data() + 6 * i;
        for (int k = 0; k < 3; ++k) {
          out[k] += (g1[k] - f.b1[k] * p1) / f.n1;
          out[3 + k] += ga2[k];
        }
      }
      return;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<Tensor> evaluate(const Graph& graph, const Bindings& bindings) {
  const auto& nodes = graph.nodes();
  std::vector<Tensor> values(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    values[i] = forward_node(static_cast<NodeId>(i), nodes[i], values, bindings);
  return values;
}

GradientMap backward(const Graph& graph, const std::vector<Tensor>& values, NodeId loss) {
  const auto& nodes = graph.nodes();
  if (loss >= nodes.size()) throw ShapeError("loss node id out of range");
  if (values[loss].numel() != 1)
    throw ShapeError("backward: loss node " + std::to_string(loss) + " is not scalar, shape " +
                     to_string(values[loss].shape));

  // needs[i]: node i depends on a trainable leaf
  std::vector<char> needs(nodes.size(), 0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.op == Op::Leaf) {
      needs[i] = n.trainable;
      continue;
    }
    for (NodeId in : n.inputs)
      if (needs[in]) {
        needs[i] = 1;
        break;
      }
  }

  std::vector<Tensor> adj(nodes.size());
  adj[loss] = Tensor(values[loss].shape, 1.0);
  for (std::size_t i = loss + 1; i-- > 0;) {
    if (!needs[i] || adj[i].data.empty()) continue;
    backward_node(nodes[i], adj[i], values, adj, needs);
  }

  GradientMap grads;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.op != Op::Leaf || !n.trainable) continue;
    auto [it, inserted] = grads.try_emplace(n.name, Tensor(values[i].shape, 0.0));
    if (!adj[i].data.empty())
      for (std::size_t k = 0; k < adj[i].numel(); ++k) it->second.data[k] += adj[i].data[k];
  }
  return grads;
}

GradientMap backward(const Graph& graph, const Bindings& bindings, NodeId loss) {
  return backward(graph, evaluate(graph, bindings), loss);
}

double grad_check(const Graph& graph, const Bindings& bindings, NodeId loss, double step) {
  if (!(step > 0.0)) throw RangeError("grad_check: step must be positive");
  const std::vector<Tensor> base = evaluate(graph, bindings);
  const GradientMap analytic = backward(graph, base, loss);

  std::set<NodeId> kink_inputs;
  for (const Node& n : graph.nodes())
    if (n.op == Op::MeanAbs || n.op == Op::Relu) kink_inputs.insert(n.inputs[0]);

  Bindings work = bindings;
  double worst = 0.0;
  for (const auto& [name, grad] : analytic) {
    Tensor& param = work.at(name);
    for (std::size_t e = 0; e < param.numel(); ++e) {
      const double orig = param.data[e];
      param.data[e] = orig + step;
      const std::vector<Tensor> plus = evaluate(graph, work);
      param.data[e] = orig - step;
      const std::vector<Tensor> minus = evaluate(graph, work);
      param.data[e] = orig;

      bool near_kink = false;
      for (NodeId in : kink_inputs) {
        const Tensor& b0 = base[in];
        for (std::size_t k = 0; k < b0.numel() && !near_kink; ++k)
          if (std::abs(b0.data[k]) < 10.0 * step && plus[in].data[k] != minus[in].data[k]) near_kink = true;
        if (near_kink) break;
      }
      if (near_kink) continue;

      const double numeric = (plus[loss].data[0] - minus[loss].data[0]) / (2.0 * step);
      const double a = grad.data[e];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace cycleadapt::diff
