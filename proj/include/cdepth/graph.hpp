#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Graph records primitive applications in topological order. Primitives are
// evaluated eagerly as they are appended, and the whole graph can be re-run
// with new leaf values via evaluate(). Gradients flow only into leaves marked
// trainable; detach() nodes forward their input and block the backward pass.
//
// Layout conventions: images and feature maps are [N, C, H, W]; vectors fed to
// affine() are [N, features]. Element-wise binary primitives require equal
// shapes; use expand() to broadcast explicitly.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cdepth/errors.hpp"
#include "cdepth/tensor.hpp"

namespace cdepth {

using NodeId = std::int32_t;

enum class Prim : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kShift,
  kExp,
  kLog,
  kSoftplus,
  kRelu,
  kSquare,
  kSqrt,
  kClamp,
  kMaxScalar,
  kAffine,
  kConv2d,
  kUpsample2x,
  kConcat,
  kExpand,
  kReshape,
  kSlice,
  kSum,
  kMean,
  kDetach,
};

inline const char* prim_name(Prim prim);

struct PrimAttrs {
  int stride = 1;
  double a = 0.0;  // scale/shift amount, clamp low, max floor
  double b = 0.0;  // clamp high
  Index begin = 0;
  Index end = 0;
  std::vector<int> axes;
  Shape shape;
};

/// Whether detach nodes recompute from their input or hold the value from
/// the previous evaluation. Finite differences hold them: a stop-gradient
/// is a constant at the point where the derivative is taken.
enum class DetachMode { kRecompute, kHold };

template <typename Scalar>
class Graph;

template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  NodeId id = -1;

  const Tensor<Scalar>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape; }
};

template <typename Scalar>
class Graph {
 public:
  using TensorT = Tensor<Scalar>;
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using VarT = Var<Scalar>;

  struct Node {
    Prim prim = Prim::kLeaf;
    std::vector<NodeId> inputs;
    PrimAttrs attrs;
    std::string label;
    TensorT value;
    bool trainable = false;  // leaves only
    bool needs_grad = false;
    RowMat cache;  // im2col buffer for conv2d
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Named leaf. Trainable leaves receive gradients; others are constants.
  VarT leaf(std::string name, TensorT value, bool trainable) {
    if (!value.data.allFinite()) throw NumericError("non-finite value fed to leaf '" + name + "'");
    Node node;
    node.prim = Prim::kLeaf;
    node.label = std::move(name);
    node.value = std::move(value);
    node.trainable = trainable;
    node.needs_grad = trainable;
    nodes_.push_back(std::move(node));
    return {this, static_cast<NodeId>(nodes_.size() - 1)};
  }

  VarT constant(std::string name, TensorT value) { return leaf(std::move(name), std::move(value), false); }

  VarT apply(Prim prim, std::vector<NodeId> inputs, PrimAttrs attrs = {}) {
    Node node;
    node.prim = prim;
    node.inputs = std::move(inputs);
    node.attrs = std::move(attrs);
    for (NodeId in : node.inputs) {
      if (in < 0 || static_cast<std::size_t>(in) >= nodes_.size()) {
        throw ContractError(std::string(prim_name(prim)) + ": input id out of range");
      }
      node.needs_grad = node.needs_grad || nodes_[static_cast<std::size_t>(in)].needs_grad;
    }
    if (prim == Prim::kDetach) node.needs_grad = false;
    nodes_.push_back(std::move(node));
    const auto id = static_cast<NodeId>(nodes_.size() - 1);
    nodes_.back().label = std::string(prim_name(prim)) + "#" + std::to_string(id);
    compute(id);
    return {this, id};
  }

  void set_label(VarT v, std::string label) { node(v.id).label = std::move(label); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const TensorT& value(VarT v) const { return node(v.id).value; }

  /// Gradient of the last backward() seed with respect to v. Nodes that do
  /// not lead to a trainable leaf (frozen, detached) get exact zeros.
  TensorT grad(VarT v) const { return grad(v.id); }

  TensorT grad(NodeId id) const {
    const auto i = static_cast<std::size_t>(id);
    if (i < grads_.size() && grads_[i].size() > 0) return grads_[i];
    return TensorT::zeros(node(id).value.shape);
  }

  void set_leaf(VarT v, TensorT value) {
    Node& n = node(v.id);
    if (n.prim != Prim::kLeaf) throw ContractError("set_leaf: node '" + n.label + "' is not a leaf");
    if (value.shape != n.value.shape) {
      throw ContractError("set_leaf: shape " + to_string(value.shape) + " does not match leaf '" +
                          n.label + "' of shape " + to_string(n.value.shape));
    }
    n.value = std::move(value);
  }

  /// Re-runs every non-leaf node in order from the current leaf values.
  void evaluate(DetachMode mode = DetachMode::kRecompute) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].prim == Prim::kLeaf) continue;
      if (mode == DetachMode::kHold && nodes_[i].prim == Prim::kDetach) continue;
      compute(static_cast<NodeId>(i));
    }
  }

  /// Named-input form: assigns leaves by label, re-runs, and returns the
  /// values of the requested labelled nodes.
  std::map<std::string, TensorT> evaluate(const std::map<std::string, TensorT>& inputs,
                                          const std::vector<std::string>& outputs) {
    for (const auto& [name, value] : inputs) set_leaf(find(name), value);
    evaluate();
    std::map<std::string, TensorT> out;
    for (const auto& name : outputs) out.emplace(name, value(find(name)));
    return out;
  }

  VarT find(const std::string& label) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].label == label) return {this, static_cast<NodeId>(i)};
    }
    throw ContractError("graph has no node labelled '" + label + "'");
  }

  /// Trainable leaves in creation order.
  std::vector<VarT> trainable_leaves() {
    std::vector<VarT> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].prim == Prim::kLeaf && nodes_[i].trainable) out.push_back({this, static_cast<NodeId>(i)});
    }
    return out;
  }

  void backward(VarT seed);

  /// Gradients of all named leaves (trainable or not; frozen ones are zero).
  std::map<std::string, TensorT> leaf_gradients() const {
    std::map<std::string, TensorT> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].prim == Prim::kLeaf) out.emplace(nodes_[i].label, grad(static_cast<NodeId>(i)));
    }
    return out;
  }

  /// One byte per element of every kinked primitive (relu, clamp, max)
  /// identifying which side of the kink it evaluated on.
  std::vector<std::uint8_t> branch_pattern() const;

 private:
  Node& node(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const TensorT& in(const Node& n, std::size_t k) const { return nodes_[static_cast<std::size_t>(n.inputs[k])].value; }

  void compute(NodeId id);
  void propagate(NodeId id);
  TensorT& grad_slot(NodeId id) {
    TensorT& g = grads_[static_cast<std::size_t>(id)];
    if (g.size() == 0) g = TensorT::zeros(node(id).value.shape);
    return g;
  }

  std::vector<Node> nodes_;
  std::vector<TensorT> grads_;
};

// ---------------------------------------------------------------------------
// Shape helpers

namespace detail {

inline Shape reduced_shape(const Shape& shape, const std::vector<int>& axes) {
  Shape out = shape;
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(shape.size())) throw ContractError("reduction axis out of range");
    out[static_cast<std::size_t>(a)] = 1;
  }
  return out;
}

/// Calls f(full_index, small_index) for every element of `full`, where
/// `small` has the same rank with each dim equal to full's or 1.
template <typename F>
void for_each_broadcast(const Shape& full, const Shape& small, F&& f) {
  const std::size_t rank = full.size();
  std::vector<Index> small_stride(rank, 0);
  Index s = 1;
  for (std::size_t k = rank; k-- > 0;) {
    small_stride[k] = small[k] == 1 ? 0 : s;
    s *= small[k];
  }
  std::vector<Index> coord(rank, 0);
  const Index total = numel(full);
  Index small_index = 0;
  for (Index i = 0; i < total; ++i) {
    f(i, small_index);
    for (std::size_t k = rank; k-- > 0;) {
      ++coord[k];
      small_index += small_stride[k];
      if (coord[k] < full[k]) break;
      small_index -= small_stride[k] * coord[k];
      coord[k] = 0;
    }
  }
}

inline bool broadcastable(const Shape& small, const Shape& full) {
  if (small.size() != full.size()) return false;
  for (std::size_t k = 0; k < full.size(); ++k) {
    if (small[k] != 1 && small[k] != full[k]) return false;
  }
  return true;
}

/// Output extent and leading pad for SAME convolution: ceil(in/stride).
inline std::pair<Index, Index> same_geometry(Index in, Index kernel, int stride) {
  const Index out = (in + stride - 1) / stride;
  const Index pad_total = std::max<Index>((out - 1) * stride + kernel - in, 0);
  return {out, pad_total / 2};
}

template <typename T>
T softplus(T x) {
  return x > T(30) ? x : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  return x > T(30) ? T(1) : T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

inline const char* prim_name(Prim prim) {
  switch (prim) {
    case Prim::kLeaf: return "leaf";
    case Prim::kAdd: return "add";
    case Prim::kSub: return "sub";
    case Prim::kMul: return "mul";
    case Prim::kScale: return "scale";
    case Prim::kShift: return "shift";
    case Prim::kExp: return "exp";
    case Prim::kLog: return "log";
    case Prim::kSoftplus: return "softplus";
    case Prim::kRelu: return "relu";
    case Prim::kSquare: return "square";
    case Prim::kSqrt: return "sqrt";
    case Prim::kClamp: return "clamp";
    case Prim::kMaxScalar: return "max_scalar";
    case Prim::kAffine: return "affine";
    case Prim::kConv2d: return "conv2d";
    case Prim::kUpsample2x: return "upsample2x";
    case Prim::kConcat: return "concat";
    case Prim::kExpand: return "expand";
    case Prim::kReshape: return "reshape";
    case Prim::kSlice: return "slice";
    case Prim::kSum: return "sum";
    case Prim::kMean: return "mean";
    case Prim::kDetach: return "detach";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Forward

template <typename Scalar>
void Graph<Scalar>::compute(NodeId id) {
  Node& n = node(id);
  const auto fail = [&](const std::string& why) { throw ContractError(n.label + ": " + why); };
  auto& out = n.value;
  switch (n.prim) {
    case Prim::kLeaf:
      return;
    case Prim::kAdd:
    case Prim::kSub:
    case Prim::kMul: {
      const TensorT& x = in(n, 0);
      const TensorT& y = in(n, 1);
      if (x.shape != y.shape) fail("shape mismatch " + to_string(x.shape) + " vs " + to_string(y.shape));
      if (n.prim == Prim::kAdd) out = TensorT(x.shape, x.data + y.data);
      else if (n.prim == Prim::kSub) out = TensorT(x.shape, x.data - y.data);
      else out = TensorT(x.shape, x.data.cwiseProduct(y.data));
      break;
    }
    case Prim::kScale:
      out = TensorT(in(n, 0).shape, in(n, 0).data * static_cast<Scalar>(n.attrs.a));
      break;
    case Prim::kShift:
      out = TensorT(in(n, 0).shape, (in(n, 0).data.array() + static_cast<Scalar>(n.attrs.a)).matrix());
      break;
    case Prim::kExp:
      out = TensorT(in(n, 0).shape, in(n, 0).data.array().exp().matrix());
      break;
    case Prim::kLog:
      out = TensorT(in(n, 0).shape, in(n, 0).data.array().log().matrix());
      break;
    case Prim::kSoftplus:
      out = TensorT(in(n, 0).shape, in(n, 0).data.unaryExpr([](Scalar v) { return detail::softplus(v); }));
      break;
    case Prim::kRelu:
      out = TensorT(in(n, 0).shape, in(n, 0).data.cwiseMax(Scalar(0)));
      break;
    case Prim::kSquare:
      out = TensorT(in(n, 0).shape, in(n, 0).data.array().square().matrix());
      break;
    case Prim::kSqrt:
      out = TensorT(in(n, 0).shape, in(n, 0).data.array().sqrt().matrix());
      break;
    case Prim::kClamp: {
      const auto lo = static_cast<Scalar>(n.attrs.a);
      const auto hi = static_cast<Scalar>(n.attrs.b);
      out = TensorT(in(n, 0).shape, in(n, 0).data.cwiseMax(lo).cwiseMin(hi));
      break;
    }
    case Prim::kMaxScalar:
      out = TensorT(in(n, 0).shape, in(n, 0).data.cwiseMax(static_cast<Scalar>(n.attrs.a)));
      break;
    case Prim::kAffine: {
      const TensorT& x = in(n, 0);
      const TensorT& w = in(n, 1);
      const TensorT& b = in(n, 2);
      if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0)) {
        fail("affine expects x[N,in], w[out,in], b[out]; got " + to_string(x.shape) + ", " +
             to_string(w.shape) + ", " + to_string(b.shape));
      }
      const Index batch = x.dim(0);
      const Index outs = w.dim(0);
      out = TensorT({batch, outs});
      Eigen::Map<RowMat> y(out.ptr(), batch, outs);
      Eigen::Map<const RowMat> xm(x.ptr(), batch, x.dim(1));
      Eigen::Map<const RowMat> wm(w.ptr(), outs, w.dim(1));
      y.noalias() = xm * wm.transpose();
      y.rowwise() += b.data.transpose();
      break;
    }
    case Prim::kConv2d: {
      const TensorT& x = in(n, 0);
      const TensorT& w = in(n, 1);
      const TensorT& b = in(n, 2);
      if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) ||
          b.dim(0) != w.dim(0)) {
        fail("conv2d expects x[N,C,H,W], w[Co,C,k,k], b[Co]; got " + to_string(x.shape) + ", " +
             to_string(w.shape) + ", " + to_string(b.shape));
      }
      const int stride = n.attrs.stride;
      const Index batch = x.dim(0), chans = x.dim(1), height = x.dim(2), width = x.dim(3);
      const Index k = w.dim(2), outc = w.dim(0);
      const auto [oh, pad_top] = detail::same_geometry(height, k, stride);
      const auto [ow, pad_left] = detail::same_geometry(width, k, stride);
      const Index plane = oh * ow;
      RowMat& cols = n.cache;
      cols.resize(chans * k * k, batch * plane);
      for (Index c = 0; c < chans; ++c) {
        for (Index ky = 0; ky < k; ++ky) {
          for (Index kx = 0; kx < k; ++kx) {
            Scalar* row = cols.data() + ((c * k + ky) * k + kx) * batch * plane;
            for (Index b_ = 0; b_ < batch; ++b_) {
              const Scalar* src = x.ptr() + (b_ * chans + c) * height * width;
              for (Index oy = 0; oy < oh; ++oy) {
                const Index iy = oy * stride + ky - pad_top;
                Scalar* dst = row + b_ * plane + oy * ow;
                if (iy < 0 || iy >= height) {
                  std::fill(dst, dst + ow, Scalar(0));
                  continue;
                }
                for (Index ox = 0; ox < ow; ++ox) {
                  const Index ix = ox * stride + kx - pad_left;
                  dst[ox] = (ix < 0 || ix >= width) ? Scalar(0) : src[iy * width + ix];
                }
              }
            }
          }
        }
      }
      Eigen::Map<const RowMat> wm(w.ptr(), outc, chans * k * k);
      RowMat prod(outc, batch * plane);
      prod.noalias() = wm * cols;
      out = TensorT({batch, outc, oh, ow});
      for (Index b_ = 0; b_ < batch; ++b_) {
        for (Index co = 0; co < outc; ++co) {
          Eigen::Map<typename TensorT::Vector> dst(out.ptr() + (b_ * outc + co) * plane, plane);
          dst = prod.row(co).segment(b_ * plane, plane).transpose().array() + b.data[co];
        }
      }
      break;
    }
    case Prim::kUpsample2x: {
      const TensorT& x = in(n, 0);
      if (x.rank() != 4) fail("upsample2x expects [N,C,H,W]");
      const Index planes = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3);
      out = TensorT({x.dim(0), x.dim(1), 2 * height, 2 * width});
      for (Index p = 0; p < planes; ++p) {
        const Scalar* src = x.ptr() + p * height * width;
        Scalar* dst = out.ptr() + p * 4 * height * width;
        for (Index y = 0; y < 2 * height; ++y) {
          for (Index xx = 0; xx < 2 * width; ++xx) dst[y * 2 * width + xx] = src[(y / 2) * width + xx / 2];
        }
      }
      break;
    }
    case Prim::kConcat: {
      const TensorT& first = in(n, 0);
      if (first.rank() != 4) fail("concat expects [N,C,H,W] inputs");
      Index total_c = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const TensorT& t = in(n, k);
        if (t.rank() != 4 || t.dim(0) != first.dim(0) || t.dim(2) != first.dim(2) || t.dim(3) != first.dim(3)) {
          fail("concat input " + std::to_string(k) + " shape " + to_string(t.shape) + " incompatible with " +
               to_string(first.shape));
        }
        total_c += t.dim(1);
      }
      const Index batch = first.dim(0), plane = first.dim(2) * first.dim(3);
      out = TensorT({batch, total_c, first.dim(2), first.dim(3)});
      for (Index b_ = 0; b_ < batch; ++b_) {
        Scalar* dst = out.ptr() + b_ * total_c * plane;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const TensorT& t = in(n, k);
          const Index len = t.dim(1) * plane;
          std::copy(t.ptr() + b_ * len, t.ptr() + (b_ + 1) * len, dst);
          dst += len;
        }
      }
      break;
    }
    case Prim::kExpand: {
      const TensorT& x = in(n, 0);
      if (!detail::broadcastable(x.shape, n.attrs.shape)) {
        fail("cannot expand " + to_string(x.shape) + " to " + to_string(n.attrs.shape));
      }
      out = TensorT(n.attrs.shape);
      detail::for_each_broadcast(out.shape, x.shape, [&](Index i, Index j) { out[i] = x[j]; });
      break;
    }
    case Prim::kReshape: {
      const TensorT& x = in(n, 0);
      if (numel(n.attrs.shape) != x.size()) fail("cannot reshape " + to_string(x.shape) + " to " + to_string(n.attrs.shape));
      out = TensorT(n.attrs.shape, x.data);
      break;
    }
    case Prim::kSlice: {
      const TensorT& x = in(n, 0);
      const Index last = x.shape.back();
      const Index begin = n.attrs.begin, end = n.attrs.end;
      if (begin < 0 || end > last || begin >= end) fail("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range");
      Shape s = x.shape;
      s.back() = end - begin;
      out = TensorT(s);
      const Index rows = x.size() / last, width = end - begin;
      for (Index r = 0; r < rows; ++r) {
        std::copy(x.ptr() + r * last + begin, x.ptr() + r * last + end, out.ptr() + r * width);
      }
      break;
    }
    case Prim::kSum:
    case Prim::kMean: {
      const TensorT& x = in(n, 0);
      out = TensorT(detail::reduced_shape(x.shape, n.attrs.axes));
      detail::for_each_broadcast(x.shape, out.shape, [&](Index i, Index j) { out[j] += x[i]; });
      if (n.prim == Prim::kMean) out.data /= static_cast<Scalar>(x.size() / out.size());
      break;
    }
    case Prim::kDetach:
      out = in(n, 0);
      break;
  }
  if (!out.data.allFinite()) throw NumericError(n.label + ": non-finite output");
}

// ---------------------------------------------------------------------------
// Backward

template <typename Scalar>
void Graph<Scalar>::backward(VarT seed) {
  const Node& s = node(seed.id);
  if (s.value.size() != 1) throw ContractError("backward: seed '" + s.label + "' is not scalar, shape " + to_string(s.value.shape));
  grads_.assign(nodes_.size(), TensorT());
  if (!s.needs_grad) return;
  grad_slot(seed.id).data.setOnes();
  for (NodeId id = seed.id; id >= 0; --id) {
    const Node& n = node(id);
    if (!n.needs_grad || n.prim == Prim::kLeaf) continue;
    if (grads_[static_cast<std::size_t>(id)].size() == 0) continue;
    propagate(id);
  }
}

template <typename Scalar>
void Graph<Scalar>::propagate(NodeId id) {
  const Node& n = node(id);
  const TensorT& g = grads_[static_cast<std::size_t>(id)];
  const auto wants = [&](std::size_t k) { return node(n.inputs[k]).needs_grad; };
  const auto slot = [&](std::size_t k) -> TensorT& { return grad_slot(n.inputs[k]); };
  const auto unary = [&](auto&& local) {
    if (!wants(0)) return;
    const TensorT& x = in(n, 0);
    TensorT& gx = slot(0);
    for (Index i = 0; i < g.size(); ++i) gx[i] += g[i] * local(x[i], n.value[i]);
  };
  switch (n.prim) {
    case Prim::kLeaf:
    case Prim::kDetach:
      return;
    case Prim::kAdd:
      if (wants(0)) slot(0).data += g.data;
      if (wants(1)) slot(1).data += g.data;
      return;
    case Prim::kSub:
      if (wants(0)) slot(0).data += g.data;
      if (wants(1)) slot(1).data -= g.data;
      return;
    case Prim::kMul:
      if (wants(0)) slot(0).data += g.data.cwiseProduct(in(n, 1).data);
      if (wants(1)) slot(1).data += g.data.cwiseProduct(in(n, 0).data);
      return;
    case Prim::kScale:
      if (wants(0)) slot(0).data += g.data * static_cast<Scalar>(n.attrs.a);
      return;
    case Prim::kShift:
      if (wants(0)) slot(0).data += g.data;
      return;
    case Prim::kExp:
      unary([](Scalar, Scalar y) { return y; });
      return;
    case Prim::kLog:
      unary([](Scalar x, Scalar) { return Scalar(1) / x; });
      return;
    case Prim::kSoftplus:
      unary([](Scalar x, Scalar) { return detail::sigmoid(x); });
      return;
    case Prim::kRelu:
      unary([](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : Scalar(0); });
      return;
    case Prim::kSquare:
      unary([](Scalar x, Scalar) { return Scalar(2) * x; });
      return;
    case Prim::kSqrt:
      if (!wants(0)) return;
      for (Index i = 0; i < g.size(); ++i) {
        if (g[i] != Scalar(0)) slot(0)[i] += g[i] / (Scalar(2) * n.value[i]);
      }
      return;
    case Prim::kClamp: {
      const auto lo = static_cast<Scalar>(n.attrs.a);
      const auto hi = static_cast<Scalar>(n.attrs.b);
      unary([lo, hi](Scalar x, Scalar) { return (x > lo && x < hi) ? Scalar(1) : Scalar(0); });
      return;
    }
    case Prim::kMaxScalar: {
      const auto lo = static_cast<Scalar>(n.attrs.a);
      unary([lo](Scalar x, Scalar) { return x > lo ? Scalar(1) : Scalar(0); });
      return;
    }
    case Prim::kAffine: {
      const TensorT& x = in(n, 0);
      const TensorT& w = in(n, 1);
      const Index batch = x.dim(0), ins = x.dim(1), outs = w.dim(0);
      Eigen::Map<const RowMat> gy(g.ptr(), batch, outs);
      if (wants(0)) {
        Eigen::Map<RowMat> gx(slot(0).ptr(), batch, ins);
        gx.noalias() += gy * Eigen::Map<const RowMat>(w.ptr(), outs, ins);
      }
      if (wants(1)) {
        Eigen::Map<RowMat> gw(slot(1).ptr(), outs, ins);
        gw.noalias() += gy.transpose() * Eigen::Map<const RowMat>(x.ptr(), batch, ins);
      }
      if (wants(2)) slot(2).data += gy.colwise().sum().transpose();
      return;
    }
    case Prim::kConv2d: {
      const TensorT& x = in(n, 0);
      const TensorT& w = in(n, 1);
      const int stride = n.attrs.stride;
      const Index batch = x.dim(0), chans = x.dim(1), height = x.dim(2), width = x.dim(3);
      const Index k = w.dim(2), outc = w.dim(0);
      const auto [oh, pad_top] = detail::same_geometry(height, k, stride);
      const auto [ow, pad_left] = detail::same_geometry(width, k, stride);
      const Index plane = oh * ow;
      RowMat gout(outc, batch * plane);
      for (Index b_ = 0; b_ < batch; ++b_) {
        for (Index co = 0; co < outc; ++co) {
          gout.row(co).segment(b_ * plane, plane) =
              Eigen::Map<const typename TensorT::Vector>(g.ptr() + (b_ * outc + co) * plane, plane).transpose();
        }
      }
      if (wants(1)) {
        Eigen::Map<RowMat> gw(slot(1).ptr(), outc, chans * k * k);
        gw.noalias() += gout * n.cache.transpose();
      }
      if (wants(2)) slot(2).data += gout.rowwise().sum();
      if (wants(0)) {
        Eigen::Map<const RowMat> wm(w.ptr(), outc, chans * k * k);
        RowMat gcols(chans * k * k, batch * plane);
        gcols.noalias() = wm.transpose() * gout;
        TensorT& gx = slot(0);
        for (Index c = 0; c < chans; ++c) {
          for (Index ky = 0; ky < k; ++ky) {
            for (Index kx = 0; kx < k; ++kx) {
              const Scalar* row = gcols.data() + ((c * k + ky) * k + kx) * batch * plane;
              for (Index b_ = 0; b_ < batch; ++b_) {
                Scalar* dst = gx.ptr() + (b_ * chans + c) * height * width;
                for (Index oy = 0; oy < oh; ++oy) {
                  const Index iy = oy * stride + ky - pad_top;
                  if (iy < 0 || iy >= height) continue;
                  const Scalar* src = row + b_ * plane + oy * ow;
                  for (Index ox = 0; ox < ow; ++ox) {
                    const Index ix = ox * stride + kx - pad_left;
                    if (ix >= 0 && ix < width) dst[iy * width + ix] += src[ox];
                  }
                }
              }
            }
          }
        }
      }
      return;
    }
    case Prim::kUpsample2x: {
      if (!wants(0)) return;
      TensorT& gx = slot(0);
      const Index planes = gx.dim(0) * gx.dim(1), height = gx.dim(2), width = gx.dim(3);
      for (Index p = 0; p < planes; ++p) {
        const Scalar* src = g.ptr() + p * 4 * height * width;
        Scalar* dst = gx.ptr() + p * height * width;
        for (Index y = 0; y < 2 * height; ++y) {
          for (Index xx = 0; xx < 2 * width; ++xx) dst[(y / 2) * width + xx / 2] += src[y * 2 * width + xx];
        }
      }
      return;
    }
    case Prim::kConcat: {
      const Index batch = n.value.dim(0), total_c = n.value.dim(1), plane = n.value.dim(2) * n.value.dim(3);
      Index offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Index len = in(n, k).dim(1) * plane;
        if (wants(k)) {
          TensorT& gx = slot(k);
          for (Index b_ = 0; b_ < batch; ++b_) {
            const Scalar* src = g.ptr() + b_ * total_c * plane + offset;
            for (Index i = 0; i < len; ++i) gx[b_ * len + i] += src[i];
          }
        }
        offset += len;
      }
      return;
    }
    case Prim::kExpand: {
      if (!wants(0)) return;
      TensorT& gx = slot(0);
      detail::for_each_broadcast(n.value.shape, gx.shape, [&](Index i, Index j) { gx[j] += g[i]; });
      return;
    }
    case Prim::kReshape:
      if (wants(0)) slot(0).data += g.data;
      return;
    case Prim::kSlice: {
      if (!wants(0)) return;
      TensorT& gx = slot(0);
      const Index last = gx.shape.back(), width = n.attrs.end - n.attrs.begin, rows = gx.size() / last;
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < width; ++c) gx[r * last + n.attrs.begin + c] += g[r * width + c];
      }
      return;
    }
    case Prim::kSum:
    case Prim::kMean: {
      if (!wants(0)) return;
      TensorT& gx = slot(0);
      const Scalar factor = n.prim == Prim::kMean ? Scalar(1) / static_cast<Scalar>(gx.size() / g.size()) : Scalar(1);
      detail::for_each_broadcast(gx.shape, g.shape, [&](Index i, Index j) { gx[i] += g[j] * factor; });
      return;
    }
  }
}

template <typename Scalar>
std::vector<std::uint8_t> Graph<Scalar>::branch_pattern() const {
  std::vector<std::uint8_t> out;
  for (const Node& n : nodes_) {
    if (n.prim != Prim::kRelu && n.prim != Prim::kClamp && n.prim != Prim::kMaxScalar) continue;
    const TensorT& x = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
    for (Index i = 0; i < x.size(); ++i) {
      std::uint8_t side = 0;
      if (n.prim == Prim::kRelu) side = x[i] > Scalar(0);
      else if (n.prim == Prim::kMaxScalar) side = x[i] > static_cast<Scalar>(n.attrs.a);
      else side = static_cast<std::uint8_t>((x[i] > static_cast<Scalar>(n.attrs.a)) + (x[i] >= static_cast<Scalar>(n.attrs.b)));
      out.push_back(side);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Expression-style free functions

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return a.graph->apply(Prim::kAdd, {a.id, b.id}); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return a.graph->apply(Prim::kSub, {a.id, b.id}); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return a.graph->apply(Prim::kMul, {a.id, b.id}); }

template <typename S>
Var<S> operator*(Var<S> a, double c) {
  PrimAttrs at;
  at.a = c;
  return a.graph->apply(Prim::kScale, {a.id}, at);
}
template <typename S>
Var<S> operator*(double c, Var<S> a) { return a * c; }
template <typename S>
Var<S> operator+(Var<S> a, double c) {
  PrimAttrs at;
  at.a = c;
  return a.graph->apply(Prim::kShift, {a.id}, at);
}
template <typename S>
Var<S> operator-(Var<S> a, double c) { return a + (-c); }

template <typename S>
Var<S> exp(Var<S> x) { return x.graph->apply(Prim::kExp, {x.id}); }
template <typename S>
Var<S> log(Var<S> x) { return x.graph->apply(Prim::kLog, {x.id}); }
template <typename S>
Var<S> softplus(Var<S> x) { return x.graph->apply(Prim::kSoftplus, {x.id}); }
template <typename S>
Var<S> relu(Var<S> x) { return x.graph->apply(Prim::kRelu, {x.id}); }
template <typename S>
Var<S> square(Var<S> x) { return x.graph->apply(Prim::kSquare, {x.id}); }
template <typename S>
Var<S> sqrt(Var<S> x) { return x.graph->apply(Prim::kSqrt, {x.id}); }

template <typename S>
Var<S> clamp(Var<S> x, double lo, double hi) {
  PrimAttrs at;
  at.a = lo;
  at.b = hi;
  return x.graph->apply(Prim::kClamp, {x.id}, at);
}

/// max(x, floor) elementwise; gradient passes only strictly above the floor.
template <typename S>
Var<S> max_scalar(Var<S> x, double floor) {
  PrimAttrs at;
  at.a = floor;
  return x.graph->apply(Prim::kMaxScalar, {x.id}, at);
}

/// y = x * w^T + b, x: [N, in], w: [out, in], b: [out].
template <typename S>
Var<S> affine(Var<S> x, Var<S> w, Var<S> b) { return x.graph->apply(Prim::kAffine, {x.id, w.id, b.id}); }

/// Square-kernel convolution with SAME zero padding, output extent ceil(in/stride).
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride) {
  if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
  PrimAttrs at;
  at.stride = stride;
  return x.graph->apply(Prim::kConv2d, {x.id, w.id, b.id}, at);
}

template <typename S>
Var<S> upsample2x(Var<S> x) { return x.graph->apply(Prim::kUpsample2x, {x.id}); }

template <typename S>
Var<S> concat_channels(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  std::vector<NodeId> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts.front().graph->apply(Prim::kConcat, std::move(ids));
}

template <typename S>
Var<S> expand(Var<S> x, Shape shape) {
  PrimAttrs at;
  at.shape = std::move(shape);
  return x.graph->apply(Prim::kExpand, {x.id}, at);
}

template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  PrimAttrs at;
  at.shape = std::move(shape);
  return x.graph->apply(Prim::kReshape, {x.id}, at);
}

/// Columns [begin, end) of the last axis.
template <typename S>
Var<S> slice_last(Var<S> x, Index begin, Index end) {
  PrimAttrs at;
  at.begin = begin;
  at.end = end;
  return x.graph->apply(Prim::kSlice, {x.id}, at);
}

/// Reductions keep reduced axes as size 1; the *_all forms return shape [1].
template <typename S>
Var<S> sum(Var<S> x, std::vector<int> axes) {
  PrimAttrs at;
  at.axes = std::move(axes);
  return x.graph->apply(Prim::kSum, {x.id}, at);
}
template <typename S>
Var<S> mean(Var<S> x, std::vector<int> axes) {
  PrimAttrs at;
  at.axes = std::move(axes);
  return x.graph->apply(Prim::kMean, {x.id}, at);
}
template <typename S>
Var<S> sum_all(Var<S> x) {
  std::vector<int> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  return reshape(sum(x, axes), {1});
}
template <typename S>
Var<S> mean_all(Var<S> x) {
  std::vector<int> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  return reshape(mean(x, axes), {1});
}

template <typename S>
Var<S> detach(Var<S> x) { return x.graph->apply(Prim::kDetach, {x.id}); }

/// [N, d] -> [N, d, h, w], every cell a copy of the row.
template <typename S>
Var<S> tile_grid(Var<S> v, Index h, Index w) {
  const Shape s = v.shape();
  if (s.size() != 2) throw ContractError("tile_grid expects [N, d], got " + to_string(s));
  return expand(reshape(v, {s[0], s[1], 1, 1}), {s[0], s[1], h, w});
}

}  // namespace cdepth
