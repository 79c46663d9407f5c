#include "sgtm/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

namespace sgtm {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
template <class T>
constexpr T kGeluA = T(0.044715);

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " +
                         shape_to_string(b));
  }
}

}  // namespace

template <class T>
typename Graph<T>::Node& Graph<T>::node(NodeId id) {
  if (id.index >= nodes_.size()) throw IndexError("graph node id out of range");
  return nodes_[id.index];
}

template <class T>
const typename Graph<T>::Node& Graph<T>::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw IndexError("graph node id out of range");
  return nodes_[id.index];
}

template <class T>
const Tensor<T>* Graph<T>::grad(NodeId id) const {
  const Node& n = node(id);
  return n.grad.empty() ? nullptr : &n.grad;
}

template <class T>
Tensor<T>* Graph<T>::mutable_grad(NodeId id) {
  Node& n = node(id);
  return n.grad.empty() ? nullptr : &n.grad;
}

template <class T>
Tensor<T>& Graph<T>::grad_buffer(NodeId id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <class T>
bool Graph<T>::needs_grad(std::initializer_list<NodeId> ids) const {
  return std::any_of(ids.begin(), ids.end(), [&](NodeId id) { return node(id).requires_grad; });
}

template <class T>
NodeId Graph<T>::push(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
  NodeId id{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad,
                        requires_grad ? std::move(backward) : std::function<void()>{}});
  return id;
}

template <class T>
NodeId Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  return push(std::move(value), requires_grad, {});
}

template <class T>
NodeId Graph<T>::matmul(NodeId a, NodeId b, bool transpose_b) {
  const Tensor<T>& A = value(a);
  const Tensor<T>& B = value(b);
  if (A.rank() != 2 || B.rank() != 2) throw DimensionError("matmul: operands must be 2-D");
  const std::size_t m = A.dim(0);
  const std::size_t k = A.dim(1);
  const std::size_t kb = transpose_b ? B.dim(1) : B.dim(0);
  const std::size_t n = transpose_b ? B.dim(0) : B.dim(1);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ " + shape_to_string(A.shape()) + " x " +
                         shape_to_string(B.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor<T> out(Shape{m, n});
  {
    MatMap<T> C(out.raw(), m, n);
    ConstMatMap<T> Am(A.raw(), m, k);
    ConstMatMap<T> Bm(B.raw(), B.dim(0), B.dim(1));
    if (transpose_b) {
      C.noalias() = Am * Bm.transpose();
    } else {
      C.noalias() = Am * Bm;
    }
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({a, b}), [this, self, a, b, transpose_b, m, k, n] {
    const Tensor<T>& G = nodes_[self.index].grad;
    ConstMatMap<T> Gm(G.raw(), m, n);
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    ConstMatMap<T> Am(A.raw(), m, k);
    ConstMatMap<T> Bm(B.raw(), B.dim(0), B.dim(1));
    if (requires_grad(a)) {
      MatMap<T> dA(grad_buffer(a).raw(), m, k);
      if (transpose_b) {
        dA.noalias() += Gm * Bm;
      } else {
        dA.noalias() += Gm * Bm.transpose();
      }
    }
    if (requires_grad(b)) {
      MatMap<T> dB(grad_buffer(b).raw(), B.dim(0), B.dim(1));
      if (transpose_b) {
        dB.noalias() += Gm.transpose() * Am;
      } else {
        dB.noalias() += Am.transpose() * Gm;
      }
    }
  });
}

template <class T>
NodeId Graph<T>::add(NodeId a, NodeId b) {
  require_same_shape(value(a).shape(), value(b).shape(), "add");
  Tensor<T> out = value(a);
  {
    const Tensor<T>& B = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i];
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({a, b}), [this, self, a, b] {
    const Tensor<T>& G = nodes_[self.index].grad;
    for (NodeId in : {a, b}) {
      if (!requires_grad(in)) continue;
      Tensor<T>& d = grad_buffer(in);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += G[i];
    }
  });
}

template <class T>
NodeId Graph<T>::sub(NodeId a, NodeId b) {
  require_same_shape(value(a).shape(), value(b).shape(), "sub");
  Tensor<T> out = value(a);
  {
    const Tensor<T>& B = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= B[i];
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({a, b}), [this, self, a, b] {
    const Tensor<T>& G = nodes_[self.index].grad;
    if (requires_grad(a)) {
      Tensor<T>& d = grad_buffer(a);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += G[i];
    }
    if (requires_grad(b)) {
      Tensor<T>& d = grad_buffer(b);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] -= G[i];
    }
  });
}

template <class T>
NodeId Graph<T>::mul(NodeId a, NodeId b) {
  require_same_shape(value(a).shape(), value(b).shape(), "mul");
  Tensor<T> out = value(a);
  {
    const Tensor<T>& B = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({a, b}), [this, self, a, b] {
    const Tensor<T>& G = nodes_[self.index].grad;
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    if (requires_grad(a)) {
      Tensor<T>& d = grad_buffer(a);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += G[i] * B[i];
    }
    if (requires_grad(b)) {
      Tensor<T>& d = grad_buffer(b);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += G[i] * A[i];
    }
  });
}

template <class T>
NodeId Graph<T>::scale(NodeId a, T factor) {
  Tensor<T> out = value(a);
  for (T& v : out.data()) v *= factor;
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({a}), [this, self, a, factor] {
    const Tensor<T>& G = nodes_[self.index].grad;
    Tensor<T>& d = grad_buffer(a);
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += G[i] * factor;
  });
}

template <class T>
NodeId Graph<T>::add_bias(NodeId x, NodeId bias) {
  const Tensor<T>& X = value(x);
  const Tensor<T>& Bv = value(bias);
  const std::size_t n = X.shape().back();
  if (Bv.numel() != n) {
    throw DimensionError("add_bias: bias length " + std::to_string(Bv.numel()) +
                         " does not match last axis " + std::to_string(n));
  }
  Tensor<T> out = X;
  const std::size_t rows = X.numel() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.raw() + r * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += Bv[j];
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({x, bias}), [this, self, x, bias, rows, n] {
    const Tensor<T>& G = nodes_[self.index].grad;
    if (requires_grad(x)) {
      Tensor<T>& d = grad_buffer(x);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += G[i];
    }
    if (requires_grad(bias)) {
      Tensor<T>& d = grad_buffer(bias);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = G.raw() + r * n;
        for (std::size_t j = 0; j < n; ++j) d[j] += row[j];
      }
    }
  });
}

template <class T>
NodeId Graph<T>::gelu(NodeId x) {
  Tensor<T> out = value(x);
  for (T& v : out.data()) {
    const T u = kGeluC<T> * (v + kGeluA<T> * v * v * v);
    v = T(0.5) * v * (T(1) + std::tanh(u));
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({x}), [this, self, x] {
    const Tensor<T>& G = nodes_[self.index].grad;
    const Tensor<T>& X = value(x);
    Tensor<T>& d = grad_buffer(x);
    for (std::size_t i = 0; i < d.numel(); ++i) {
      const T v = X[i];
      const T t = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
      const T du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
      d[i] += G[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
    }
  });
}

template <class T>
NodeId Graph<T>::softmax(NodeId x, std::size_t axis) {
  const Tensor<T>& X = value(x);
  if (axis >= X.rank()) throw DimensionError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= X.dim(i);
  for (std::size_t i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);
  const std::size_t len = X.dim(axis);
  Tensor<T> out(X.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = X[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, X[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(X[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({x}), [this, self, x, outer, inner, len] {
    const Tensor<T>& G = nodes_[self.index].grad;
    const Tensor<T>& Y = nodes_[self.index].value;
    Tensor<T>& d = grad_buffer(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += G[base + j * inner] * Y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          d[idx] += Y[idx] * (G[idx] - dot);
        }
      }
    }
  });
}

template <class T>
NodeId Graph<T>::layer_norm(NodeId x, NodeId gain, NodeId bias, T eps) {
  const Tensor<T>& X = value(x);
  const std::size_t n = X.shape().back();
  if (value(gain).numel() != n || value(bias).numel() != n) {
    throw DimensionError("layer_norm: gain/bias length must equal last axis " + std::to_string(n));
  }
  const std::size_t rows = X.numel() / n;
  auto stats = std::make_shared<std::vector<T>>(2 * rows);  // mean, rstd
  Tensor<T> out(X.shape());
  const Tensor<T>& Gn = value(gain);
  const Tensor<T>& Bs = value(bias);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X.raw() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    (*stats)[2 * r] = mu;
    (*stats)[2 * r + 1] = rstd;
    T* yr = out.raw() + r * n;
    for (std::size_t j = 0; j < n; ++j) yr[j] = (xr[j] - mu) * rstd * Gn[j] + Bs[j];
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({x, gain, bias}),
              [this, self, x, gain, bias, stats, rows, n] {
                const Tensor<T>& G = nodes_[self.index].grad;
                const Tensor<T>& X = value(x);
                const Tensor<T>& Gn = value(gain);
                Tensor<T>* dx = requires_grad(x) ? &grad_buffer(x) : nullptr;
                Tensor<T>* dg = requires_grad(gain) ? &grad_buffer(gain) : nullptr;
                Tensor<T>* db = requires_grad(bias) ? &grad_buffer(bias) : nullptr;
                std::vector<T> xhat(n), dxhat(n);
                for (std::size_t r = 0; r < rows; ++r) {
                  const T mu = (*stats)[2 * r];
                  const T rstd = (*stats)[2 * r + 1];
                  const T* xr = X.raw() + r * n;
                  const T* gr = G.raw() + r * n;
                  T mean_dxhat = 0, mean_dxhat_xhat = 0;
                  for (std::size_t j = 0; j < n; ++j) {
                    xhat[j] = (xr[j] - mu) * rstd;
                    dxhat[j] = gr[j] * Gn[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                    if (dg) (*dg)[j] += gr[j] * xhat[j];
                    if (db) (*db)[j] += gr[j];
                  }
                  if (!dx) continue;
                  mean_dxhat /= T(n);
                  mean_dxhat_xhat /= T(n);
                  T* dr = dx->raw() + r * n;
                  for (std::size_t j = 0; j < n; ++j) {
                    dr[j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                  }
                }
              });
}

template <class T>
NodeId Graph<T>::embedding(NodeId table, std::span<const std::int32_t> ids) {
  const Tensor<T>& E = value(table);
  if (E.rank() != 2) throw DimensionError("embedding: table must be 2-D");
  const std::size_t vocab = E.dim(0);
  const std::size_t d = E.dim(1);
  if (ids.empty()) throw DimensionError("embedding: no ids");
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(E.raw() + static_cast<std::size_t>(ids[i]) * d, d, out.raw() + i * d);
  }
  auto saved = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({table}), [this, self, table, saved, d] {
    const Tensor<T>& G = nodes_[self.index].grad;
    Tensor<T>& dE = grad_buffer(table);
    for (std::size_t i = 0; i < saved->size(); ++i) {
      T* row = dE.raw() + static_cast<std::size_t>((*saved)[i]) * d;
      const T* g = G.raw() + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
    }
  });
}

template <class T>
NodeId Graph<T>::cross_entropy(NodeId logits, std::span<const std::int32_t> targets,
                               std::int32_t ignore_index) {
  const Tensor<T>& L = value(logits);
  if (L.rank() != 2) throw DimensionError("cross_entropy: logits must be 2-D");
  const std::size_t rows = L.dim(0);
  const std::size_t vocab = L.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::size_t count = 0;
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    const T* row = L.raw() + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    double z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[t]);
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every position is ignored");
  auto saved = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count))),
              needs_grad({logits}),
              [this, self, logits, saved, ignore_index, rows, vocab, count] {
                const T g = nodes_[self.index].grad[0] / static_cast<T>(count);
                const Tensor<T>& L = value(logits);
                Tensor<T>& dL = grad_buffer(logits);
                for (std::size_t r = 0; r < rows; ++r) {
                  const std::int32_t t = (*saved)[r];
                  if (t == ignore_index) continue;
                  const T* row = L.raw() + r * vocab;
                  T* drow = dL.raw() + r * vocab;
                  const T mx = *std::max_element(row, row + vocab);
                  T z = 0;
                  for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
                  for (std::size_t j = 0; j < vocab; ++j) drow[j] += g * std::exp(row[j] - mx) / z;
                  drow[t] -= g;
                }
              });
}

template <class T>
NodeId Graph<T>::causal_attention(NodeId qkv, std::size_t batch, std::size_t seq,
                                  std::size_t n_heads) {
  const Tensor<T>& X = value(qkv);
  if (X.rank() != 2 || X.dim(0) != batch * seq || X.dim(1) % 3 != 0) {
    throw DimensionError("causal_attention: qkv must be [batch*seq, 3*d], got " +
                         shape_to_string(X.shape()));
  }
  const std::size_t d = X.dim(1) / 3;
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: model dim not divisible by head count");
  }
  const std::size_t dh = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(batch * n_heads * seq * seq, T(0));
  Tensor<T> out(Shape{batch * seq, d});
  RowMat<T> scores(seq, seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* base = X.raw() + b * seq * 3 * d;
    for (std::size_t h = 0; h < n_heads; ++h) {
      ConstStridedMap<T> Q(base + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
      ConstStridedMap<T> K(base + d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
      ConstStridedMap<T> V(base + 2 * d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
      scores.noalias() = Q * K.transpose();
      MatMap<T> P(probs->data() + (b * n_heads + h) * seq * seq, seq, seq);
      for (std::size_t i = 0; i < seq; ++i) {
        T mx = scores(i, 0) * scale;
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j) * scale);
        T z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T e = std::exp(scores(i, j) * scale - mx);
          P(i, j) = e;
          z += e;
        }
        for (std::size_t j = 0; j <= i; ++j) P(i, j) /= z;
      }
      StridedMap<T> O(out.raw() + b * seq * d + h * dh, seq, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  }
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({qkv}), [this, self, qkv, probs, batch, seq, n_heads, d,
                                                  dh, scale] {
    const Tensor<T>& G = nodes_[self.index].grad;
    const Tensor<T>& X = value(qkv);
    Tensor<T>& dX = grad_buffer(qkv);
    RowMat<T> dP(seq, seq);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* base = X.raw() + b * seq * 3 * d;
      T* dbase = dX.raw() + b * seq * 3 * d;
      for (std::size_t h = 0; h < n_heads; ++h) {
        ConstStridedMap<T> Q(base + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
        ConstStridedMap<T> K(base + d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
        ConstStridedMap<T> V(base + 2 * d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
        StridedMap<T> dQ(dbase + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
        StridedMap<T> dK(dbase + d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
        StridedMap<T> dV(dbase + 2 * d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
        ConstStridedMap<T> dO(G.raw() + b * seq * d + h * dh, seq, dh, Eigen::OuterStride<>(d));
        ConstMatMap<T> P(probs->data() + (b * n_heads + h) * seq * seq, seq, seq);
        dV.noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        for (std::size_t i = 0; i < seq; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j <= i; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
          for (std::size_t j = i + 1; j < seq; ++j) dP(i, j) = 0;
        }
        dQ.noalias() += dP * K;
        dK.noalias() += dP.transpose() * Q;
      }
    }
  });
}

template <class T>
NodeId Graph<T>::column_gate(NodeId x, std::vector<std::uint8_t> keep, GateMode mode) {
  const Tensor<T>& X = value(x);
  const std::size_t n = X.shape().back();
  if (keep.size() != n) {
    throw DimensionError("column_gate: mask has " + std::to_string(keep.size()) +
                         " entries for last axis " + std::to_string(n));
  }
  Tensor<T> out = X;
  const std::size_t rows = X.numel() / n;
  if (mode == GateMode::kForward) {
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out.raw() + r * n;
      for (std::size_t j = 0; j < n; ++j) {
        if (!keep[j]) row[j] = T(0);
      }
    }
  }
  auto saved = std::make_shared<std::vector<std::uint8_t>>(std::move(keep));
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs_grad({x}), [this, self, x, saved, rows, n] {
    const Tensor<T>& G = nodes_[self.index].grad;
    Tensor<T>& d = grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = G.raw() + r * n;
      T* dr = d.raw() + r * n;
      for (std::size_t j = 0; j < n; ++j) {
        if ((*saved)[j]) dr[j] += g[j];
      }
    }
  });
}

template <class T>
NodeId Graph<T>::sum(NodeId x) {
  T total = 0;
  for (T v : value(x).data()) total += v;
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(Tensor<T>::scalar(total), needs_grad({x}), [this, self, x] {
    const T g = nodes_[self.index].grad[0];
    for (T& v : grad_buffer(x).data()) v += g;
  });
}

template <class T>
NodeId Graph<T>::mean(NodeId x) {
  T total = 0;
  for (T v : value(x).data()) total += v;
  const T n = static_cast<T>(value(x).numel());
  const NodeId self{static_cast<std::uint32_t>(nodes_.size())};
  return push(Tensor<T>::scalar(total / n), needs_grad({x}), [this, self, x, n] {
    const T g = nodes_[self.index].grad[0] / n;
    for (T& v : grad_buffer(x).data()) v += g;
  });
}

template <class T>
void Graph<T>::backward(NodeId loss) {
  if (value(loss).numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_to_string(value(loss).shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor<T>{};
  if (!requires_grad(loss)) return;
  grad_buffer(loss)[0] = T(1);
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward();
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace sgtm
