#include "pudnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace pudnet {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace pudnet

namespace pudnet::ops {

namespace {

using detail::Node;
using detail::NodePtr;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
void accumulate(Node<T>& node, std::span<const T> g) {
  if (!node.requires_grad) return;
  auto& buf = detail::grad_buffer(node);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <class T>
const NodePtr<T>& node_of(const Tensor<T>& t) {
  if (!t.defined()) throw ContractError("use of undefined tensor");
  return t.node();
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(s));
  }
}

// Output index -> input offsets for two broadcast operands.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;

  Broadcast(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    sa.assign(r, 0);
    sb.assign(r, 0);
    std::size_t stride_a = 1, stride_b = 1;
    for (std::size_t k = 0; k < r; ++k) {
      const std::size_t i = r - 1 - k;
      const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
      const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
      if (da != db && da != 1 && db != 1) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcast-compatible");
      }
      out[i] = std::max(da, db);
      sa[i] = da == 1 ? 0 : stride_a;
      sb[i] = db == 1 ? 0 : stride_b;
      stride_a *= da;
      stride_b *= db;
    }
  }

  template <class F>
  void for_each(F&& f) const {
    const std::size_t n = shape_numel(out);
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
      f(i, oa, ob);
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        oa += sa[d];
        ob += sb[d];
        if (idx[d] < out[d]) break;
        oa -= sa[d] * out[d];
        ob -= sb[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

// Elementwise binary op with broadcasting. Fwd(a,b) -> y; DA/DB(a,b) -> partials.
template <class T, class Fwd, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db, const char* op) {
  const auto& na = node_of(a);
  const auto& nb = node_of(b);
  Broadcast bc(na->shape, nb->shape, op);
  std::vector<T> y(shape_numel(bc.out));
  const T* av = na->value.data();
  const T* bv = nb->value.data();
  if (na->shape == nb->shape) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(av[i], bv[i]);
  } else {
    bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = fwd(av[ia], bv[ib]); });
  }
  return detail::make_result<T>(
      bc.out, std::move(y), {na, nb},
      [na, nb, bc, da, db](const Node<T>& out) {
        const T* g = out.grad.data();
        const T* av = na->value.data();
        const T* bv = nb->value.data();
        T* ga = na->requires_grad ? detail::grad_buffer(*na).data() : nullptr;
        T* gb = nb->requires_grad ? detail::grad_buffer(*nb).data() : nullptr;
        bc.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (ga) ga[ia] += g[i] * da(av[ia], bv[ib]);
          if (gb) gb[ib] += g[i] * db(av[ia], bv[ib]);
        });
      },
      op);
}

// Elementwise unary op whose derivative is expressed through (x, y).
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv, const char* op) {
  const auto& nx = node_of(x);
  std::vector<T> y(nx->value.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(nx->value[i]);
  return detail::make_result<T>(
      nx->shape, std::move(y), {nx},
      [nx, deriv](const Node<T>& out) {
        if (!nx->requires_grad) return;
        auto& gx = detail::grad_buffer(*nx);
        for (std::size_t i = 0; i < gx.size(); ++i) {
          gx[i] += out.grad[i] * deriv(nx->value[i], out.value[i]);
        }
      },
      op);
}

template <class T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(H) &&
                                iw < static_cast<long>(W);
            row[oh * Wo + ow] = inside ? img[(c * H + ih) * W + iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* img) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            img[(c * H + ih) * W + iw] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

// Treats the tensor as [rows, last-dim].
std::pair<std::size_t, std::size_t> rows_cols(const Shape& s, const char* op) {
  if (s.empty() || s.size() > 2) {
    throw DimensionError(std::string(op) + ": expected a 1-D or 2-D tensor, got " + shape_str(s));
  }
  return s.size() == 1 ? std::pair{std::size_t{1}, s[0]} : std::pair{s[0], s[1]};
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& na = node_of(a);
  const auto& nb = node_of(b);
  require_rank(na->shape, 2, "matmul");
  require_rank(nb->shape, 2, "matmul");
  const std::size_t M = na->shape[0], K = na->shape[1], N = nb->shape[1];
  if (nb->shape[0] != K) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(na->shape) + " x " +
                         shape_str(nb->shape));
  }
  std::vector<T> y(M * N);
  MutMap<T>(y.data(), M, N).noalias() =
      ConstMap<T>(na->value.data(), M, K) * ConstMap<T>(nb->value.data(), K, N);
  return detail::make_result<T>(
      {M, N}, std::move(y), {na, nb},
      [na, nb, M, K, N](const Node<T>& out) {
        ConstMap<T> g(out.grad.data(), M, N);
        if (na->requires_grad) {
          MutMap<T>(detail::grad_buffer(*na).data(), M, K).noalias() +=
              g * ConstMap<T>(nb->value.data(), K, N).transpose();
        }
        if (nb->requires_grad) {
          MutMap<T>(detail::grad_buffer(*nb).data(), K, N).noalias() +=
              ConstMap<T>(na->value.data(), M, K).transpose() * g;
        }
      },
      "matmul");
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const auto& na = node_of(a);
  require_rank(na->shape, 2, "transpose");
  const std::size_t R = na->shape[0], C = na->shape[1];
  std::vector<T> y(R * C);
  MutMap<T>(y.data(), C, R) = ConstMap<T>(na->value.data(), R, C).transpose();
  return detail::make_result<T>(
      {C, R}, std::move(y), {na},
      [na, R, C](const Node<T>& out) {
        if (!na->requires_grad) return;
        MutMap<T>(detail::grad_buffer(*na).data(), R, C) +=
            ConstMap<T>(out.grad.data(), C, R).transpose();
      },
      "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; },
      "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary<T>(
      a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); }, "add_scalar");
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return unary<T>(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; }, "leaky_relu");
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  const auto& nx = node_of(x);
  if (shape_numel(shape) != nx->value.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(nx->shape) + " as " +
                         shape_str(shape));
  }
  return detail::make_result<T>(
      std::move(shape), nx->value, {nx},
      [nx](const Node<T>& out) { accumulate<T>(*nx, out.grad); }, "reshape");
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(node_of(p));
  const Shape& first = nodes[0]->shape;
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& n : nodes) {
    if (n->shape.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && n->shape[d] != first[d]) {
        throw DimensionError("concat: shapes " + shape_str(first) + " and " +
                             shape_str(n->shape) + " differ off the concat axis");
      }
    }
    out_shape[axis] += n->shape[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> y(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& n : nodes) {
    const std::size_t block = n->shape[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(n->value.data() + o * block, block, y.data() + o * out_row + offset);
    }
    offset += block;
  }
  return detail::make_result<T>(
      out_shape, std::move(y), nodes,
      [nodes, outer, inner, out_row, axis](const Node<T>& out) {
        std::size_t offset = 0;
        for (const auto& n : nodes) {
          const std::size_t block = n->shape[axis] * inner;
          if (n->requires_grad) {
            auto& g = detail::grad_buffer(*n);
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t j = 0; j < block; ++j) {
                g[o * block + j] += out.grad[o * out_row + offset + j];
              }
            }
          }
          offset += block;
        }
      },
      "concat");
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const auto& nx = node_of(x);
  if (nx->shape.empty()) throw DimensionError("gather_rows: scalar input");
  if (rows.empty()) throw DimensionError("gather_rows: empty row selection");
  const std::size_t n = nx->shape[0];
  const std::size_t width = nx->value.size() / n;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> y(idx.size() * width);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) {
      throw IndexError("gather_rows: row " + std::to_string(idx[r]) + " out of range " +
                       std::to_string(n));
    }
    std::copy_n(nx->value.data() + idx[r] * width, width, y.data() + r * width);
  }
  Shape shape = nx->shape;
  shape[0] = idx.size();
  return detail::make_result<T>(
      shape, std::move(y), {nx},
      [nx, idx, width](const Node<T>& out) {
        if (!nx->requires_grad) return;
        auto& g = detail::grad_buffer(*nx);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          for (std::size_t j = 0; j < width; ++j) g[idx[r] * width + j] += out.grad[r * width + j];
        }
      },
      "gather_rows");
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto& nx = node_of(x);
  T s = T(0);
  for (T v : nx->value) s += v;
  return detail::make_result<T>(
      {}, {s}, {nx},
      [nx](const Node<T>& out) {
        if (!nx->requires_grad) return;
        for (auto& g : detail::grad_buffer(*nx)) g += out.grad[0];
      },
      "sum");
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const auto& nx = node_of(x);
  const Shape& s = nx->shape;
  if (axis >= s.size()) throw DimensionError("sum: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<T> y(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += nx->value[(o * len + l) * inner + i];
  return detail::make_result<T>(
      out_shape, std::move(y), {nx},
      [nx, outer, inner, len](const Node<T>& out) {
        if (!nx->requires_grad) return;
        auto& g = detail::grad_buffer(*nx);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) g[(o * len + l) * inner + i] += out.grad[o * inner + i];
      },
      "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  const std::size_t len = x.dim(axis);
  return scale(sum(x, axis), T(1) / static_cast<T>(len));
}

// ---------------------------------------------------------------------------
// Convolutional building blocks

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  const auto& nx = node_of(x);
  const auto& nw = node_of(w);
  require_rank(nx->shape, 4, "conv2d input");
  require_rank(nw->shape, 4, "conv2d kernel");
  const std::size_t B = nx->shape[0], C = nx->shape[1], H = nx->shape[2], W = nx->shape[3];
  const std::size_t O = nw->shape[0], k = nw->shape[2];
  if (nw->shape[1] != C) {
    throw DimensionError("conv2d: channel mismatch, input has " + std::to_string(C) +
                         " channels but kernel expects " + std::to_string(nw->shape[1]));
  }
  if (nw->shape[3] != k) throw DimensionError("conv2d: kernel must be square, got " + shape_str(nw->shape));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (k > H + 2 * pad || k > W + 2 * pad) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(nx->shape));
  }
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t ckk = C * k * k, hw = Ho * Wo;
  std::vector<T> y(B * O * hw);
  std::vector<T> col(ckk * hw);
  ConstMap<T> wm(nw->value.data(), O, ckk);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(nx->value.data() + b * C * H * W, C, H, W, k, stride, pad, Ho, Wo, col.data());
    MutMap<T>(y.data() + b * O * hw, O, hw).noalias() = wm * ConstMap<T>(col.data(), ckk, hw);
  }
  return detail::make_result<T>(
      {B, O, Ho, Wo}, std::move(y), {nx, nw},
      [nx, nw, B, C, H, W, O, k, stride, pad, Ho, Wo](const Node<T>& out) {
        const std::size_t ckk = C * k * k, hw = Ho * Wo;
        std::vector<T> col(ckk * hw);
        ConstMap<T> wm(nw->value.data(), O, ckk);
        T* gw = nw->requires_grad ? detail::grad_buffer(*nw).data() : nullptr;
        T* gx = nx->requires_grad ? detail::grad_buffer(*nx).data() : nullptr;
        std::vector<T> dcol(gx ? ckk * hw : 0);
        for (std::size_t b = 0; b < B; ++b) {
          ConstMap<T> g(out.grad.data() + b * O * hw, O, hw);
          if (gw) {
            im2col(nx->value.data() + b * C * H * W, C, H, W, k, stride, pad, Ho, Wo, col.data());
            MutMap<T>(gw, O, ckk).noalias() += g * ConstMap<T>(col.data(), ckk, hw).transpose();
          }
          if (gx) {
            MutMap<T>(dcol.data(), ckk, hw).noalias() = wm.transpose() * g;
            col2im(dcol.data(), C, H, W, k, stride, pad, Ho, Wo, gx + b * C * H * W);
          }
        }
      },
      "conv2d");
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  const auto& nx = node_of(x);
  require_rank(nx->shape, 4, "avg_pool2d");
  const std::size_t B = nx->shape[0], C = nx->shape[1], H = nx->shape[2], W = nx->shape[3];
  if (k < 1 || H < k || W < k) {
    throw DimensionError("avg_pool2d: window " + std::to_string(k) + " does not fit " +
                         shape_str(nx->shape));
  }
  const std::size_t Ho = H / k, Wo = W / k;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> y(B * C * Ho * Wo, T(0));
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* src = nx->value.data() + bc * H * W;
    T* dst = y.data() + bc * Ho * Wo;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T s = T(0);
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) s += src[(oh * k + i) * W + ow * k + j];
        dst[oh * Wo + ow] = s * inv;
      }
  }
  return detail::make_result<T>(
      {B, C, Ho, Wo}, std::move(y), {nx},
      [nx, B, C, H, W, Ho, Wo, k, inv](const Node<T>& out) {
        if (!nx->requires_grad) return;
        auto& g = detail::grad_buffer(*nx);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          const T* go = out.grad.data() + bc * Ho * Wo;
          T* gi = g.data() + bc * H * W;
          for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const T v = go[oh * Wo + ow] * inv;
              for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j) gi[(oh * k + i) * W + ow * k + j] += v;
            }
        }
      },
      "avg_pool2d");
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const auto& nx = node_of(x);
  require_rank(nx->shape, 4, "global_avg_pool");
  const std::size_t B = nx->shape[0], C = nx->shape[1];
  const std::size_t hw = nx->shape[2] * nx->shape[3];
  const T inv = T(1) / static_cast<T>(hw);
  std::vector<T> y(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    T s = T(0);
    for (std::size_t i = 0; i < hw; ++i) s += nx->value[bc * hw + i];
    y[bc] = s * inv;
  }
  return detail::make_result<T>(
      {B, C}, std::move(y), {nx},
      [nx, B, C, hw, inv](const Node<T>& out) {
        if (!nx->requires_grad) return;
        auto& g = detail::grad_buffer(*nx);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          const T v = out.grad[bc] * inv;
          for (std::size_t i = 0; i < hw; ++i) g[bc * hw + i] += v;
        }
      },
      "global_avg_pool");
}

template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps) {
  const auto& nx = node_of(x);
  require_rank(nx->shape, 4, "instance_norm");
  const std::size_t slices = nx->shape[0] * nx->shape[1];
  const std::size_t n = nx->shape[2] * nx->shape[3];
  std::vector<T> y(nx->value.size());
  std::vector<T> inv_std(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    const T* src = nx->value.data() + s * n;
    T mu = T(0);
    for (std::size_t i = 0; i < n; ++i) mu += src[i];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(n);
    inv_std[s] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) y[s * n + i] = (src[i] - mu) * inv_std[s];
  }
  return detail::make_result<T>(
      nx->shape, std::move(y), {nx},
      [nx, inv_std, slices, n](const Node<T>& out) {
        if (!nx->requires_grad) return;
        auto& gx = detail::grad_buffer(*nx);
        for (std::size_t s = 0; s < slices; ++s) {
          const T* g = out.grad.data() + s * n;
          const T* yv = out.value.data() + s * n;
          T mg = T(0), mgy = T(0);
          for (std::size_t i = 0; i < n; ++i) {
            mg += g[i];
            mgy += g[i] * yv[i];
          }
          mg /= static_cast<T>(n);
          mgy /= static_cast<T>(n);
          for (std::size_t i = 0; i < n; ++i) gx[s * n + i] += inv_std[s] * (g[i] - mg - yv[i] * mgy);
        }
      },
      "instance_norm");
}

template <class T>
BatchNormResult<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                    const Tensor<T>& beta, T eps) {
  const auto& nx = node_of(x);
  const auto& ng = node_of(gamma);
  const auto& nb = node_of(beta);
  require_rank(nx->shape, 4, "batch_norm");
  const std::size_t B = nx->shape[0], C = nx->shape[1], hw = nx->shape[2] * nx->shape[3];
  if (ng->shape != Shape{C} || nb->shape != Shape{C}) {
    throw DimensionError("batch_norm: affine parameters must have shape [" + std::to_string(C) + "]");
  }
  const std::size_t n = B * hw;
  std::vector<T> mean_c(C, T(0)), var_c(C, T(0)), inv_std(C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) mean_c[c] += nx->value[(b * C + c) * hw + i];
  for (auto& m : mean_c) m /= static_cast<T>(n);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const T d = nx->value[(b * C + c) * hw + i] - mean_c[c];
        var_c[c] += d * d;
      }
  for (std::size_t c = 0; c < C; ++c) {
    var_c[c] /= static_cast<T>(n);
    inv_std[c] = T(1) / std::sqrt(var_c[c] + eps);
  }
  std::vector<T> xhat(nx->value.size()), y(nx->value.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t at = (b * C + c) * hw + i;
        xhat[at] = (nx->value[at] - mean_c[c]) * inv_std[c];
        y[at] = ng->value[c] * xhat[at] + nb->value[c];
      }
  auto out = detail::make_result<T>(
      nx->shape, std::move(y), {nx, ng, nb},
      [nx, ng, nb, xhat = std::move(xhat), inv_std, B, C, hw, n](const Node<T>& out) {
        std::vector<T> sg(C, T(0)), sgx(C, T(0));
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t at = (b * C + c) * hw + i;
              sg[c] += out.grad[at];
              sgx[c] += out.grad[at] * xhat[at];
            }
        if (ng->requires_grad) {
          auto& g = detail::grad_buffer(*ng);
          for (std::size_t c = 0; c < C; ++c) g[c] += sgx[c];
        }
        if (nb->requires_grad) {
          auto& g = detail::grad_buffer(*nb);
          for (std::size_t c = 0; c < C; ++c) g[c] += sg[c];
        }
        if (nx->requires_grad) {
          auto& gx = detail::grad_buffer(*nx);
          const T inv_n = T(1) / static_cast<T>(n);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const T gam = ng->value[c];
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t at = (b * C + c) * hw + i;
                gx[at] += gam * inv_std[c] *
                          (out.grad[at] - sg[c] * inv_n - xhat[at] * sgx[c] * inv_n);
              }
            }
        }
      },
      "batch_norm_train");
  return BatchNormResult<T>{std::move(out), std::move(mean_c), std::move(var_c)};
}

template <class T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          std::span<const T> running_mean, std::span<const T> running_var,
                          T eps) {
  const auto& nx = node_of(x);
  const auto& ng = node_of(gamma);
  const auto& nb = node_of(beta);
  require_rank(nx->shape, 4, "batch_norm");
  const std::size_t B = nx->shape[0], C = nx->shape[1], hw = nx->shape[2] * nx->shape[3];
  if (ng->shape != Shape{C} || nb->shape != Shape{C} || running_mean.size() != C ||
      running_var.size() != C) {
    throw DimensionError("batch_norm: parameters/statistics must have " + std::to_string(C) + " entries");
  }
  std::vector<T> mu(running_mean.begin(), running_mean.end());
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
  std::vector<T> y(nx->value.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t at = (b * C + c) * hw + i;
        y[at] = ng->value[c] * (nx->value[at] - mu[c]) * inv_std[c] + nb->value[c];
      }
  return detail::make_result<T>(
      nx->shape, std::move(y), {nx, ng, nb},
      [nx, ng, nb, mu, inv_std, B, C, hw](const Node<T>& out) {
        T* gx = nx->requires_grad ? detail::grad_buffer(*nx).data() : nullptr;
        T* gg = ng->requires_grad ? detail::grad_buffer(*ng).data() : nullptr;
        T* gb = nb->requires_grad ? detail::grad_buffer(*nb).data() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t at = (b * C + c) * hw + i;
              const T g = out.grad[at];
              const T xh = (nx->value[at] - mu[c]) * inv_std[c];
              if (gx) gx[at] += g * ng->value[c] * inv_std[c];
              if (gg) gg[c] += g * xh;
              if (gb) gb[c] += g;
            }
      },
      "batch_norm_eval");
}

// ---------------------------------------------------------------------------
// Classification primitives

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const auto& nl = node_of(logits);
  const auto [R, C] = rows_cols(nl->shape, "softmax");
  std::vector<T> y(R * C);
  for (std::size_t r = 0; r < R; ++r) {
    const T* z = nl->value.data() + r * C;
    const T mx = *std::max_element(z, z + C);
    T s = T(0);
    for (std::size_t c = 0; c < C; ++c) s += (y[r * C + c] = std::exp(z[c] - mx));
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] /= s;
  }
  return detail::make_result<T>(
      nl->shape, std::move(y), {nl},
      [nl, R, C](const Node<T>& out) {
        if (!nl->requires_grad) return;
        auto& g = detail::grad_buffer(*nl);
        for (std::size_t r = 0; r < R; ++r) {
          T dot = T(0);
          for (std::size_t c = 0; c < C; ++c) dot += out.grad[r * C + c] * out.value[r * C + c];
          for (std::size_t c = 0; c < C; ++c) {
            g[r * C + c] += out.value[r * C + c] * (out.grad[r * C + c] - dot);
          }
        }
      },
      "softmax");
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  const auto& nl = node_of(logits);
  const auto [R, C] = rows_cols(nl->shape, "log_softmax");
  std::vector<T> y(R * C);
  for (std::size_t r = 0; r < R; ++r) {
    const T* z = nl->value.data() + r * C;
    const T mx = *std::max_element(z, z + C);
    T s = T(0);
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] = z[c] - lse;
  }
  return detail::make_result<T>(
      nl->shape, std::move(y), {nl},
      [nl, R, C](const Node<T>& out) {
        if (!nl->requires_grad) return;
        auto& g = detail::grad_buffer(*nl);
        for (std::size_t r = 0; r < R; ++r) {
          T gs = T(0);
          for (std::size_t c = 0; c < C; ++c) gs += out.grad[r * C + c];
          for (std::size_t c = 0; c < C; ++c) {
            g[r * C + c] += out.grad[r * C + c] - std::exp(out.value[r * C + c]) * gs;
          }
        }
      },
      "log_softmax");
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  const auto& nl = node_of(logits);
  require_rank(nl->shape, 2, "softmax_cross_entropy");
  const std::size_t B = nl->shape[0], C = nl->shape[1];
  if (labels.size() != B) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(B) + " rows");
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  std::vector<T> probs(B * C);
  T loss = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    if (lab[b] >= C) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(lab[b]) +
                       " outside [0," + std::to_string(C) + ")");
    }
    const T* z = nl->value.data() + b * C;
    const T mx = *std::max_element(z, z + C);
    T s = T(0);
    for (std::size_t c = 0; c < C; ++c) s += (probs[b * C + c] = std::exp(z[c] - mx));
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] /= s;
    loss += mx + std::log(s) - z[lab[b]];
  }
  loss /= static_cast<T>(B);
  return detail::make_result<T>(
      {}, {loss}, {nl},
      [nl, probs = std::move(probs), lab, B, C](const Node<T>& out) {
        if (!nl->requires_grad) return;
        auto& g = detail::grad_buffer(*nl);
        const T s = out.grad[0] / static_cast<T>(B);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            g[b * C + c] += s * (probs[b * C + c] - (c == lab[b] ? T(1) : T(0)));
          }
        }
      },
      "softmax_cross_entropy");
}

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  const auto& nx = node_of(x);
  const auto [R, D] = rows_cols(nx->shape, "l2_normalize");
  std::vector<T> norms(R);
  std::vector<T> y(R * D);
  for (std::size_t r = 0; r < R; ++r) {
    T s = T(0);
    for (std::size_t d = 0; d < D; ++d) s += nx->value[r * D + d] * nx->value[r * D + d];
    norms[r] = std::sqrt(s);
    const T inv = T(1) / (norms[r] + eps);
    for (std::size_t d = 0; d < D; ++d) y[r * D + d] = nx->value[r * D + d] * inv;
  }
  return detail::make_result<T>(
      nx->shape, std::move(y), {nx},
      [nx, norms, R, D, eps](const Node<T>& out) {
        if (!nx->requires_grad) return;
        auto& g = detail::grad_buffer(*nx);
        for (std::size_t r = 0; r < R; ++r) {
          const T n = norms[r];
          const T inv = T(1) / (n + eps);
          const T* xv = nx->value.data() + r * D;
          const T* go = out.grad.data() + r * D;
          T gx = T(0);
          for (std::size_t d = 0; d < D; ++d) gx += go[d] * xv[d];
          const T coef = n > T(0) ? gx * inv * inv / n : T(0);
          for (std::size_t d = 0; d < D; ++d) g[r * D + d] += go[d] * inv - xv[d] * coef;
        }
      },
      "l2_normalize");
}

template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  require_rank(a.shape(), 1, "cosine_similarity");
  if (a.shape() != b.shape()) {
    throw DimensionError("cosine_similarity: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
  return sum(mul(l2_normalize(a, eps), l2_normalize(b, eps)));
}

template <class T>
Tensor<T> cosine_matrix(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  require_rank(a.shape(), 2, "cosine_matrix");
  require_rank(b.shape(), 2, "cosine_matrix");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("cosine_matrix: feature widths differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  return matmul(l2_normalize(a, eps), transpose(l2_normalize(b, eps)));
}

template <class T>
Tensor<T> kl_div_padded(const Tensor<T>& q, const Tensor<T>& p,
                        std::span<const std::size_t> columns, T eps) {
  const auto& nq = node_of(q);
  const auto& np = node_of(p);
  require_rank(nq->shape, 2, "kl_div_padded");
  require_rank(np->shape, 2, "kl_div_padded");
  const std::size_t B = nq->shape[0], C = nq->shape[1], K = np->shape[1];
  if (np->shape[0] != B) throw DimensionError("kl_div_padded: row counts differ");
  if (columns.size() != K) throw DimensionError("kl_div_padded: column map size differs from p width");
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  std::vector<long> inverse(C, -1);
  for (std::size_t k = 0; k < K; ++k) {
    if (cols[k] >= C) throw IndexError("kl_div_padded: column " + std::to_string(cols[k]) + " out of range");
    if (inverse[cols[k]] >= 0) throw ContractError("kl_div_padded: duplicate column in map");
    inverse[cols[k]] = static_cast<long>(k);
  }
  constexpr double kTol = 1e-5;
  for (std::size_t b = 0; b < B; ++b) {
    double sq = 0, sp = 0;
    for (std::size_t c = 0; c < C; ++c) sq += nq->value[b * C + c];
    for (std::size_t k = 0; k < K; ++k) sp += np->value[b * K + k];
    if (std::abs(sq - 1.0) > kTol || std::abs(sp - 1.0) > kTol) {
      throw ContractError("kl_div_padded: probability rows must sum to 1 (row " + std::to_string(b) + ")");
    }
  }
  auto padded = [&](std::size_t b, std::size_t c) {
    return inverse[c] < 0 ? T(0) : np->value[b * K + static_cast<std::size_t>(inverse[c])];
  };
  T total = T(0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T qv = nq->value[b * C + c];
      if (qv > T(0)) total += qv * (std::log(qv) - std::log(padded(b, c) + eps));
    }
  total /= static_cast<T>(B);
  return detail::make_result<T>(
      {}, {total}, {nq, np},
      [nq, np, inverse, B, C, K, eps](const Node<T>& out) {
        const T s = out.grad[0] / static_cast<T>(B);
        auto padded = [&](std::size_t b, std::size_t c) {
          return inverse[c] < 0 ? T(0) : np->value[b * K + static_cast<std::size_t>(inverse[c])];
        };
        if (nq->requires_grad) {
          auto& g = detail::grad_buffer(*nq);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const T qv = std::max(nq->value[b * C + c], eps);
              g[b * C + c] += s * (std::log(qv) + T(1) - std::log(padded(b, c) + eps));
            }
        }
        if (np->requires_grad) {
          auto& g = detail::grad_buffer(*np);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              if (inverse[c] < 0) continue;
              const std::size_t k = static_cast<std::size_t>(inverse[c]);
              g[b * K + k] -= s * nq->value[b * C + c] / (np->value[b * K + k] + eps);
            }
        }
      },
      "kl_div_padded");
}

#define PUDNET_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                            \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                              \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                                 \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> log<T>(const Tensor<T>&);                                                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                       \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                     \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>);            \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sum<T>(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                 \
  template Tensor<T> mean<T>(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);   \
  template Tensor<T> avg_pool2d<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                      \
  template Tensor<T> instance_norm<T>(const Tensor<T>&, T);                                     \
  template BatchNormResult<T> batch_norm_train<T>(const Tensor<T>&, const Tensor<T>&,           \
                                                  const Tensor<T>&, T);                         \
  template Tensor<T> batch_norm_eval<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                        std::span<const T>, std::span<const T>, T);             \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                              \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                          \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const std::size_t>);  \
  template Tensor<T> l2_normalize<T>(const Tensor<T>&, T);                                      \
  template Tensor<T> cosine_similarity<T>(const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> cosine_matrix<T>(const Tensor<T>&, const Tensor<T>&, T);                   \
  template Tensor<T> kl_div_padded<T>(const Tensor<T>&, const Tensor<T>&,                       \
                                      std::span<const std::size_t>, T);

PUDNET_INSTANTIATE_OPS(float)
PUDNET_INSTANTIATE_OPS(double)

#undef PUDNET_INSTANTIATE_OPS

}  // namespace pudnet::ops
