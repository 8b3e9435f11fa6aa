#include "oshx/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "oshx/parallel.hpp"

namespace oshx {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T> using MapMat = Eigen::Map<RowMat<T>>;
template <typename T> using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T> using Node = detail::TensorNode<T>;

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw UsageError("axis " + std::to_string(axis) + " out of range for " +
                     std::to_string(ndim) + "-d tensor");
  return axis;
}

/// Elementwise op from a scalar function and its derivative df(x, y).
template <typename T, typename F, typename DF>
TensorT<T> unary_op(const char* name, const TensorT<T>& x, F f, DF df) {
  auto compute = [f](const Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return out;
  };
  auto backward = [df](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < xn.value.size(); ++i)
      xn.grad[i] += n.grad[i] * df(xn.value[i], n.value[i]);
  };
  return detail::make_op<T>(name, {x}, x.shape(), compute, backward);
}

template <typename T>
void check_matrix_param(const TensorT<T>& w, const TensorT<T>& b,
                        const char* what) {
  if (w.ndim() != 2)
    throw ShapeError(std::string(what) + " weight must be 2-d, got " +
                     shape_str(w.shape()));
  if (b.ndim() != 1 || b.dim(0) != w.dim(0))
    throw ShapeError(std::string(what) + " bias " + shape_str(b.shape()) +
                     " does not match weight " + shape_str(w.shape()));
}

struct ConvGeom {
  bool batched = false;
  int n = 1, cin = 0, h = 0, w = 0;
  int cout = 0, kh = 0, kw = 0;
  int stride = 1, pad = 0;
  int ho = 0, wo = 0;
};

ConvGeom conv_geometry(const Shape& x, const Shape& weight, int stride, int pad,
                       const char* op) {
  if (stride < 1) throw UsageError(std::string(op) + ": stride must be >= 1");
  if (pad < 0) throw UsageError(std::string(op) + ": padding must be >= 0");
  ConvGeom g;
  g.stride = stride;
  g.pad = pad;
  if (x.size() == 4) {
    g.batched = true;
    g.n = x[0]; g.cin = x[1]; g.h = x[2]; g.w = x[3];
  } else if (x.size() == 3) {
    g.cin = x[0]; g.h = x[1]; g.w = x[2];
  } else {
    throw ShapeError(std::string(op) + ": input must be (C,H,W) or (N,C,H,W), got " +
                     shape_str(x));
  }
  g.cout = weight[0];
  g.kh = weight[2];
  g.kw = weight[3];
  if (weight[1] != g.cin)
    throw ShapeError(std::string(op) + ": channel mismatch between input " +
                     shape_str(x) + " and weight " + shape_str(weight));
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(g.kh) + "x" +
                     std::to_string(g.kw) + " larger than padded input " +
                     shape_str(x) + " with padding " + std::to_string(pad));
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  return g;
}

/// Unrolls one sample's windows into col (Cin*kh*kw rows, Ho*Wo columns).
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const int k_area = g.kh * g.kw;
  const int out_area = g.ho * g.wo;
  for (int c = 0; c < g.cin * k_area; ++c) {
    const int ci = c / k_area;
    const int ki = (c % k_area) / g.kw;
    const int kj = c % g.kw;
    const T* xc = x + static_cast<int64_t>(ci) * g.h * g.w;
    T* row = col + static_cast<int64_t>(c) * out_area;
    for (int oh = 0; oh < g.ho; ++oh) {
      const int ih = oh * g.stride + ki - g.pad;
      for (int ow = 0; ow < g.wo; ++ow) {
        const int iw = ow * g.stride + kj - g.pad;
        row[oh * g.wo + ow] =
            (ih >= 0 && ih < g.h && iw >= 0 && iw < g.w) ? xc[ih * g.w + iw]
                                                         : T(0);
      }
    }
  }
}

/// Scatters col-shaped gradients back onto one sample (additive).
template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const int k_area = g.kh * g.kw;
  const int out_area = g.ho * g.wo;
  for (int c = 0; c < g.cin * k_area; ++c) {
    const int ci = c / k_area;
    const int ki = (c % k_area) / g.kw;
    const int kj = c % g.kw;
    T* dxc = dx + static_cast<int64_t>(ci) * g.h * g.w;
    const T* row = col + static_cast<int64_t>(c) * out_area;
    for (int oh = 0; oh < g.ho; ++oh) {
      const int ih = oh * g.stride + ki - g.pad;
      if (ih < 0 || ih >= g.h) continue;
      for (int ow = 0; ow < g.wo; ++ow) {
        const int iw = ow * g.stride + kj - g.pad;
        if (iw >= 0 && iw < g.w) dxc[ih * g.w + iw] += row[oh * g.wo + ow];
      }
    }
  }
}

template <typename T>
std::vector<int64_t> permute_map(const Shape& in_shape,
                                 const std::vector<int>& axes) {
  const int nd = static_cast<int>(in_shape.size());
  std::vector<int64_t> in_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  Shape out_shape(nd);
  std::vector<int64_t> out_stride_of_in_axis(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = in_shape[axes[i]];
  std::vector<int64_t> out_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i)
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  for (int i = 0; i < nd; ++i) out_stride_of_in_axis[axes[i]] = out_strides[i];
  const int64_t n = shape_numel(in_shape);
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int> idx(nd, 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t out_flat = 0;
    for (int i = 0; i < nd; ++i) out_flat += idx[i] * out_stride_of_in_axis[i];
    map[static_cast<size_t>(out_flat)] = flat;
    for (int i = nd - 1; i >= 0; --i) {
      if (++idx[i] < in_shape[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

struct SliceGeom {
  int64_t outer = 1, inner = 1;
  int axis_len = 0;
};

SliceGeom slice_geometry(const Shape& s, int axis) {
  SliceGeom g;
  for (int i = 0; i < axis; ++i) g.outer *= s[i];
  g.axis_len = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) g.inner *= s[i];
  return g;
}

} // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  return unary_op(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> leaky_relu(const TensorT<T>& x, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw UsageError("leaky_relu alpha must be in (0,1), got " +
                     std::to_string(alpha));
  const T a = static_cast<T>(alpha);
  return unary_op(
      "leaky_relu", x, [a](T v) { return v >= T(0) ? v : a * v; },
      [a](T v, T) { return v >= T(0) ? T(1) : a; });
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  return unary_op(
      "gelu", x,
      [](T v) {
        const double z = static_cast<double>(v);
        return static_cast<T>(0.5 * z * (1.0 + std::erf(z * M_SQRT1_2)));
      },
      [](T v, T) {
        const double z = static_cast<double>(v);
        const double cdf = 0.5 * (1.0 + std::erf(z * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * z * z) * 0.3989422804014326779;
        return static_cast<T>(cdf + z * pdf);
      });
}

namespace {

template <typename T>
TensorT<T> softmax_trailing(const TensorT<T>& x) {
  const int d = x.shape().back();
  auto compute = [d](const Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    std::vector<T> out(xv.size());
    const int64_t rows = static_cast<int64_t>(xv.size()) / d;
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * d;
      T* orow = out.data() + r * d;
      double m = row[0];
      for (int j = 1; j < d; ++j) m = std::max(m, static_cast<double>(row[j]));
      double z = 0.0;
      for (int j = 0; j < d; ++j) {
        const double e = std::exp(static_cast<double>(row[j]) - m);
        orow[j] = static_cast<T>(e);
        z += e;
      }
      const double inv = 1.0 / z;
      for (int j = 0; j < d; ++j) orow[j] = static_cast<T>(orow[j] * inv);
    }
    return out;
  };
  auto backward = [d](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const int64_t rows = static_cast<int64_t>(n.value.size()) / d;
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = n.value.data() + r * d;
      const T* dy = n.grad.data() + r * d;
      T* dx = xn.grad.data() + r * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += static_cast<double>(dy[j]) * y[j];
      for (int j = 0; j < d; ++j)
        dx[j] += static_cast<T>(y[j] * (static_cast<double>(dy[j]) - dot));
    }
  };
  return detail::make_op<T>("softmax", {x}, x.shape(), compute, backward);
}

} // namespace

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  const int nd = x.ndim();
  const int ax = normalize_axis(axis, nd);
  if (ax == nd - 1) return softmax_trailing(x);
  std::vector<int> fwd(nd), inv(nd);
  for (int i = 0; i < nd; ++i) fwd[i] = i;
  std::swap(fwd[ax], fwd[nd - 1]);
  inv = fwd; // the swap is its own inverse
  return permute(softmax_trailing(permute(x, fwd)), inv);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool equal = sa == sb;
  if (!equal) {
    if (sb.size() > sa.size() ||
        !std::equal(sb.begin(), sb.end(), sa.end() - sb.size()))
      throw ShapeError("add: shape " + shape_str(sb) +
                       " is not a trailing suffix of " + shape_str(sa));
  }
  const int64_t bn = shape_numel(sb);
  auto compute = [bn](const Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i)
      out[i] = av[i] + bv[i % static_cast<size_t>(bn)];
    return out;
  };
  auto backward = [bn](const Node<T>& n) {
    auto& an = *n.inputs[0];
    auto& bnode = *n.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) an.grad[i] += n.grad[i];
    }
    if (bnode.requires_grad) {
      bnode.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        bnode.grad[i % static_cast<size_t>(bn)] += n.grad[i];
    }
  };
  return detail::make_op<T>("add", {a, b}, sa, compute, backward);
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  auto compute = [](const Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return out;
  };
  auto backward = [](const Node<T>& n) {
    auto& an = *n.inputs[0];
    auto& bnode = *n.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        an.grad[i] += n.grad[i] * bnode.value[i];
    }
    if (bnode.requires_grad) {
      bnode.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        bnode.grad[i] += n.grad[i] * an.value[i];
    }
  };
  return detail::make_op<T>("mul", {a, b}, a.shape(), compute, backward);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, double s) {
  const T sv = static_cast<T>(s);
  return unary_op(
      "scale", x, [sv](T v) { return sv * v; }, [sv](T, T) { return sv; });
}

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  auto compute = [](const Node<T>& n) {
    double acc = 0.0;
    for (T v : n.inputs[0]->value) acc += static_cast<double>(v);
    return std::vector<T>{static_cast<T>(acc)};
  };
  auto backward = [](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const T g = n.grad[0];
    for (auto& v : xn.grad) v += g;
  };
  return detail::make_op<T>("sum", {x}, {1}, compute, backward);
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- shape glue ------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  auto compute = [](const Node<T>& n) { return n.inputs[0]->value; };
  auto backward = [](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) xn.grad[i] += n.grad[i];
  };
  return detail::make_op<T>("reshape", {x}, std::move(shape), compute, backward);
}

template <typename T>
TensorT<T> flatten(const TensorT<T>& x, int keep_leading) {
  if (keep_leading < 0 || keep_leading >= x.ndim())
    throw UsageError("flatten: keep_leading out of range");
  Shape out(x.shape().begin(), x.shape().begin() + keep_leading);
  int64_t rest = 1;
  for (int i = keep_leading; i < x.ndim(); ++i) rest *= x.dim(i);
  out.push_back(static_cast<int>(rest));
  return reshape(x, std::move(out));
}

template <typename T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& axes) {
  const int nd = x.ndim();
  if (static_cast<int>(axes.size()) != nd)
    throw UsageError("permute: axes rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) {
    if (axes[i] < 0 || axes[i] >= nd || seen[axes[i]])
      throw UsageError("permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = x.dim(axes[i]);
  }
  const Shape in_shape = x.shape();
  const std::vector<int> ax = axes;
  auto compute = [in_shape, ax](const Node<T>& n) {
    const auto map = permute_map<T>(in_shape, ax);
    const auto& xv = n.inputs[0]->value;
    std::vector<T> out(xv.size());
    for (size_t o = 0; o < out.size(); ++o) out[o] = xv[map[o]];
    return out;
  };
  auto backward = [in_shape, ax](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const auto map = permute_map<T>(in_shape, ax);
    for (size_t o = 0; o < n.grad.size(); ++o) xn.grad[map[o]] += n.grad[o];
  };
  return detail::make_op<T>("permute", {x}, out_shape, compute, backward);
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len) {
  const int ax = normalize_axis(axis, x.ndim());
  if (start < 0 || len <= 0 || start + len > x.dim(ax))
    throw UsageError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(ax) + " of " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  const SliceGeom g = slice_geometry(x.shape(), ax);
  auto compute = [g, start, len](const Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    std::vector<T> out(static_cast<size_t>(g.outer) * len * g.inner);
    for (int64_t o = 0; o < g.outer; ++o)
      std::memcpy(out.data() + o * len * g.inner,
                  xv.data() + (o * g.axis_len + start) * g.inner,
                  static_cast<size_t>(len) * g.inner * sizeof(T));
    return out;
  };
  auto backward = [g, start, len](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t o = 0; o < g.outer; ++o) {
      const T* src = n.grad.data() + o * len * g.inner;
      T* dst = xn.grad.data() + (o * g.axis_len + start) * g.inner;
      for (int64_t i = 0; i < len * g.inner; ++i) dst[i] += src[i];
    }
  };
  return detail::make_op<T>("slice", {x}, out_shape, compute, backward);
}

template <typename T>
TensorT<T> concat(const TensorT<T>& a, const TensorT<T>& b, int axis) {
  if (a.ndim() != b.ndim())
    throw ShapeError("concat: rank mismatch between " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const int ax = normalize_axis(axis, a.ndim());
  for (int i = 0; i < a.ndim(); ++i) {
    if (i != ax && a.dim(i) != b.dim(i))
      throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " differ on non-concat axis " +
                       std::to_string(i));
  }
  Shape out_shape = a.shape();
  out_shape[ax] += b.dim(ax);
  const SliceGeom ga = slice_geometry(a.shape(), ax);
  const int alen = a.dim(ax), blen = b.dim(ax);
  auto compute = [ga, alen, blen](const Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    std::vector<T> out(av.size() + bv.size());
    const int64_t inner = ga.inner;
    for (int64_t o = 0; o < ga.outer; ++o) {
      std::memcpy(out.data() + o * (alen + blen) * inner,
                  av.data() + o * alen * inner,
                  static_cast<size_t>(alen) * inner * sizeof(T));
      std::memcpy(out.data() + (o * (alen + blen) + alen) * inner,
                  bv.data() + o * blen * inner,
                  static_cast<size_t>(blen) * inner * sizeof(T));
    }
    return out;
  };
  auto backward = [ga, alen, blen](const Node<T>& n) {
    auto& an = *n.inputs[0];
    auto& bn = *n.inputs[1];
    const int64_t inner = ga.inner;
    for (int64_t o = 0; o < ga.outer; ++o) {
      if (an.requires_grad) {
        an.ensure_grad();
        const T* src = n.grad.data() + o * (alen + blen) * inner;
        T* dst = an.grad.data() + o * alen * inner;
        for (int64_t i = 0; i < alen * inner; ++i) dst[i] += src[i];
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        const T* src = n.grad.data() + (o * (alen + blen) + alen) * inner;
        T* dst = bn.grad.data() + o * blen * inner;
        for (int64_t i = 0; i < blen * inner; ++i) dst[i] += src[i];
      }
    }
  };
  return detail::make_op<T>("concat", {a, b}, out_shape, compute, backward);
}

template <typename T>
TensorT<T> repeat_leading(const TensorT<T>& x, int n) {
  if (n < 1) throw UsageError("repeat_leading: n must be >= 1");
  Shape out_shape;
  out_shape.push_back(n);
  for (int d : x.shape()) out_shape.push_back(d);
  auto compute = [n](const Node<T>& nd) {
    const auto& xv = nd.inputs[0]->value;
    std::vector<T> out(xv.size() * static_cast<size_t>(n));
    for (int b = 0; b < n; ++b)
      std::memcpy(out.data() + static_cast<size_t>(b) * xv.size(), xv.data(),
                  xv.size() * sizeof(T));
    return out;
  };
  auto backward = [n](const Node<T>& nd) {
    auto& xn = *nd.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const size_t m = xn.value.size();
    for (int b = 0; b < n; ++b) {
      const T* src = nd.grad.data() + static_cast<size_t>(b) * m;
      for (size_t i = 0; i < m; ++i) xn.grad[i] += src[i];
    }
  };
  return detail::make_op<T>("repeat_leading", {x}, out_shape, compute, backward);
}

// ---- neural network ops ----------------------------------------------------

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight,
                  const TensorT<T>& bias) {
  check_matrix_param(weight, bias, "linear");
  const int d_in = weight.dim(1);
  const int d_out = weight.dim(0);
  if (x.ndim() < 1 || x.shape().back() != d_in)
    throw ShapeError("linear: input " + shape_str(x.shape()) +
                     " trailing dim does not match weight " +
                     shape_str(weight.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  const int64_t rows = x.numel() / d_in;
  auto compute = [rows, d_in, d_out](const Node<T>& n) {
    CMapMat<T> xm(n.inputs[0]->value.data(), rows, d_in);
    CMapMat<T> wm(n.inputs[1]->value.data(), d_out, d_in);
    const auto& bv = n.inputs[2]->value;
    std::vector<T> out(static_cast<size_t>(rows) * d_out);
    MapMat<T> ym(out.data(), rows, d_out);
    ym.noalias() = xm * wm.transpose();
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < d_out; ++j) out[r * d_out + j] += bv[j];
    return out;
  };
  auto backward = [rows, d_in, d_out](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    auto& wn = *n.inputs[1];
    auto& bn = *n.inputs[2];
    CMapMat<T> dym(n.grad.data(), rows, d_out);
    if (xn.requires_grad) {
      xn.ensure_grad();
      CMapMat<T> wm(wn.value.data(), d_out, d_in);
      MapMat<T> dxm(xn.grad.data(), rows, d_in);
      dxm.noalias() += dym * wm;
    }
    if (wn.requires_grad) {
      wn.ensure_grad();
      CMapMat<T> xm(xn.value.data(), rows, d_in);
      MapMat<T> dwm(wn.grad.data(), d_out, d_in);
      dwm.noalias() += dym.transpose() * xm;
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d_out; ++j) bn.grad[j] += n.grad[r * d_out + j];
    }
  };
  return detail::make_op<T>("linear", {x, weight, bias}, out_shape, compute,
                            backward);
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() < 2 || b.ndim() != a.ndim())
    throw ShapeError("matmul: ranks must match and be >= 2, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int nd = a.ndim();
  for (int i = 0; i < nd - 2; ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("matmul: leading dims differ: " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
  const int m = a.dim(nd - 2), k = a.dim(nd - 1);
  const int k2 = b.dim(nd - 2), p = b.dim(nd - 1);
  if (k != k2)
    throw ShapeError("matmul: inner dims differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  int64_t batch = 1;
  for (int i = 0; i < nd - 2; ++i) batch *= a.dim(i);
  Shape out_shape = a.shape();
  out_shape[nd - 1] = p;
  auto compute = [batch, m, k, p](const Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    std::vector<T> out(static_cast<size_t>(batch) * m * p);
    for (int64_t i = 0; i < batch; ++i) {
      CMapMat<T> am(av.data() + i * m * k, m, k);
      CMapMat<T> bm(bv.data() + i * k * p, k, p);
      MapMat<T> cm(out.data() + i * m * p, m, p);
      cm.noalias() = am * bm;
    }
    return out;
  };
  auto backward = [batch, m, k, p](const Node<T>& n) {
    auto& an = *n.inputs[0];
    auto& bn = *n.inputs[1];
    if (an.requires_grad) an.ensure_grad();
    if (bn.requires_grad) bn.ensure_grad();
    for (int64_t i = 0; i < batch; ++i) {
      CMapMat<T> dcm(n.grad.data() + i * m * p, m, p);
      if (an.requires_grad) {
        CMapMat<T> bm(bn.value.data() + i * k * p, k, p);
        MapMat<T> dam(an.grad.data() + i * m * k, m, k);
        dam.noalias() += dcm * bm.transpose();
      }
      if (bn.requires_grad) {
        CMapMat<T> am(an.value.data() + i * m * k, m, k);
        MapMat<T> dbm(bn.grad.data() + i * k * p, k, p);
        dbm.noalias() += am.transpose() * dcm;
      }
    }
  };
  return detail::make_op<T>("matmul", {a, b}, out_shape, compute, backward);
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, int stride, int padding) {
  if (weight.ndim() != 4)
    throw ShapeError("conv2d: weight must be (C_out,C_in,kH,kW), got " +
                     shape_str(weight.shape()));
  if (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " does not match weight " + shape_str(weight.shape()));
  const ConvGeom g =
      conv_geometry(input.shape(), weight.shape(), stride, padding, "conv2d");
  Shape out_shape = g.batched ? Shape{g.n, g.cout, g.ho, g.wo}
                              : Shape{g.cout, g.ho, g.wo};
  const int64_t k_rows = static_cast<int64_t>(g.cin) * g.kh * g.kw;
  const int64_t out_area = static_cast<int64_t>(g.ho) * g.wo;
  const int64_t in_size = static_cast<int64_t>(g.cin) * g.h * g.w;
  const int64_t out_size = static_cast<int64_t>(g.cout) * out_area;
  auto compute = [g, k_rows, out_area, in_size, out_size](const Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    const auto& wv = n.inputs[1]->value;
    const auto& bv = n.inputs[2]->value;
    std::vector<T> out(static_cast<size_t>(g.n) * out_size);
    parallel_for(0, g.n, [&](int64_t s) {
      std::vector<T> col(static_cast<size_t>(k_rows * out_area));
      im2col(xv.data() + s * in_size, g, col.data());
      CMapMat<T> wm(wv.data(), g.cout, k_rows);
      CMapMat<T> colm(col.data(), k_rows, out_area);
      MapMat<T> ym(out.data() + s * out_size, g.cout, out_area);
      ym.noalias() = wm * colm;
      for (int c = 0; c < g.cout; ++c)
        ym.row(c).array() += static_cast<T>(bv[c]);
    });
    return out;
  };
  auto backward = [g, k_rows, out_area, in_size, out_size](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    auto& wn = *n.inputs[1];
    auto& bn = *n.inputs[2];
    if (xn.requires_grad) xn.ensure_grad();
    if (wn.requires_grad) wn.ensure_grad();
    if (bn.requires_grad) bn.ensure_grad();
    std::vector<T> col(static_cast<size_t>(k_rows * out_area));
    std::vector<T> dcol(static_cast<size_t>(k_rows * out_area));
    for (int64_t s = 0; s < g.n; ++s) {
      CMapMat<T> dym(n.grad.data() + s * out_size, g.cout, out_area);
      if (wn.requires_grad || xn.requires_grad)
        im2col(xn.value.data() + s * in_size, g, col.data());
      if (wn.requires_grad) {
        CMapMat<T> colm(col.data(), k_rows, out_area);
        MapMat<T> dwm(wn.grad.data(), g.cout, k_rows);
        dwm.noalias() += dym * colm.transpose();
      }
      if (bn.requires_grad) {
        for (int c = 0; c < g.cout; ++c)
          bn.grad[c] += dym.row(c).sum();
      }
      if (xn.requires_grad) {
        CMapMat<T> wm(wn.value.data(), g.cout, k_rows);
        MapMat<T> dcolm(dcol.data(), k_rows, out_area);
        dcolm.noalias() = wm.transpose() * dym;
        col2im_add(dcol.data(), g, xn.grad.data() + s * in_size);
      }
    }
  };
  return detail::make_op<T>("conv2d", {input, weight, bias}, out_shape, compute,
                            backward);
}

template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& input, int window, int stride,
                     int padding) {
  if (window < 1) throw UsageError("maxpool2d: window must be >= 1");
  if (padding >= window)
    throw UsageError("maxpool2d: padding must be smaller than the window");
  const Shape wshape{1, input.ndim() == 4 ? input.dim(1) : input.dim(0), window,
                     window};
  const ConvGeom g =
      conv_geometry(input.shape(), wshape, stride, padding, "maxpool2d");
  const int channels = g.cin;
  Shape out_shape = g.batched ? Shape{g.n, channels, g.ho, g.wo}
                              : Shape{channels, g.ho, g.wo};
  const int64_t in_plane = static_cast<int64_t>(g.h) * g.w;
  const int64_t out_plane = static_cast<int64_t>(g.ho) * g.wo;
  const int64_t total = static_cast<int64_t>(g.n) * channels * out_plane;
  auto argmax = std::make_shared<std::vector<int64_t>>(total);
  auto compute = [g, channels, in_plane, out_plane, argmax](const Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    std::vector<T> out(static_cast<size_t>(g.n) * channels * out_plane);
    parallel_for(0, static_cast<int64_t>(g.n) * channels, [&](int64_t plane) {
      const T* x = xv.data() + plane * in_plane;
      T* y = out.data() + plane * out_plane;
      int64_t* am = argmax->data() + plane * out_plane;
      for (int oh = 0; oh < g.ho; ++oh) {
        for (int ow = 0; ow < g.wo; ++ow) {
          T best = std::numeric_limits<T>::lowest();
          int64_t best_idx = -1;
          for (int ki = 0; ki < g.kh; ++ki) {
            const int ih = oh * g.stride + ki - g.pad;
            if (ih < 0 || ih >= g.h) continue;
            for (int kj = 0; kj < g.kw; ++kj) {
              const int iw = ow * g.stride + kj - g.pad;
              if (iw < 0 || iw >= g.w) continue;
              const T v = x[ih * g.w + iw];
              if (v > best) {
                best = v;
                best_idx = ih * g.w + iw;
              }
            }
          }
          y[oh * g.wo + ow] = best;
          am[oh * g.wo + ow] = plane * in_plane + best_idx;
        }
      }
    });
    return out;
  };
  auto backward = [argmax](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      xn.grad[static_cast<size_t>((*argmax)[i])] += n.grad[i];
  };
  return detail::make_op<T>("maxpool2d", {input}, out_shape, compute, backward);
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
  if (input.ndim() != 3 && input.ndim() != 4)
    throw ShapeError("global_avg_pool: input must be (C,H,W) or (N,C,H,W), got " +
                     shape_str(input.shape()));
  const bool batched = input.ndim() == 4;
  const int n = batched ? input.dim(0) : 1;
  const int c = batched ? input.dim(1) : input.dim(0);
  const int64_t area = static_cast<int64_t>(input.dim(batched ? 2 : 1)) *
                       input.dim(batched ? 3 : 2);
  Shape out_shape = batched ? Shape{n, c} : Shape{c};
  auto compute = [n, c, area](const Node<T>& nd) {
    const auto& xv = nd.inputs[0]->value;
    std::vector<T> out(static_cast<size_t>(n) * c);
    for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
      double acc = 0.0;
      const T* x = xv.data() + p * area;
      for (int64_t i = 0; i < area; ++i) acc += static_cast<double>(x[i]);
      out[static_cast<size_t>(p)] = static_cast<T>(acc / static_cast<double>(area));
    }
    return out;
  };
  auto backward = [n, c, area](const Node<T>& nd) {
    auto& xn = *nd.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const T inv = static_cast<T>(1.0 / static_cast<double>(area));
    for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
      const T g = nd.grad[static_cast<size_t>(p)] * inv;
      T* dx = xn.grad.data() + p * area;
      for (int64_t i = 0; i < area; ++i) dx[i] += g;
    }
  };
  return detail::make_op<T>("global_avg_pool", {input}, out_shape, compute,
                            backward);
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, double eps) {
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be > 0");
  const int d = x.shape().back();
  if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 ||
      beta.dim(0) != d)
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) +
                     " / beta " + shape_str(beta.shape()) +
                     " do not match input " + shape_str(x.shape()));
  auto compute = [d, eps](const Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    const auto& gv = n.inputs[1]->value;
    const auto& bv = n.inputs[2]->value;
    std::vector<T> out(xv.size());
    const int64_t rows = static_cast<int64_t>(xv.size()) / d;
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * d;
      T* orow = out.data() + r * d;
      double mu = 0.0;
      for (int j = 0; j < d; ++j) mu += row[j];
      mu /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        const double c = row[j] - mu;
        var += c * c;
      }
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < d; ++j)
        orow[j] = static_cast<T>((row[j] - mu) * inv * gv[j] + bv[j]);
    }
    return out;
  };
  auto backward = [d, eps](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    auto& gn = *n.inputs[1];
    auto& bn = *n.inputs[2];
    const auto& xv = xn.value;
    const auto& gv = gn.value;
    const int64_t rows = static_cast<int64_t>(xv.size()) / d;
    if (xn.requires_grad) xn.ensure_grad();
    if (gn.requires_grad) gn.ensure_grad();
    if (bn.requires_grad) bn.ensure_grad();
    std::vector<double> xhat(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * d;
      const T* dy = n.grad.data() + r * d;
      double mu = 0.0;
      for (int j = 0; j < d; ++j) mu += row[j];
      mu /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        const double c = row[j] - mu;
        var += c * c;
      }
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < d; ++j) xhat[j] = (row[j] - mu) * inv;
      if (gn.requires_grad)
        for (int j = 0; j < d; ++j)
          gn.grad[j] += static_cast<T>(dy[j] * xhat[j]);
      if (bn.requires_grad)
        for (int j = 0; j < d; ++j) bn.grad[j] += dy[j];
      if (xn.requires_grad) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double dxhat = static_cast<double>(dy[j]) * gv[j];
          m1 += dxhat;
          m2 += dxhat * xhat[j];
        }
        m1 /= d;
        m2 /= d;
        T* dx = xn.grad.data() + r * d;
        for (int j = 0; j < d; ++j) {
          const double dxhat = static_cast<double>(dy[j]) * gv[j];
          dx[j] += static_cast<T>(inv * (dxhat - m1 - xhat[j] * m2));
        }
      }
    }
  };
  return detail::make_op<T>("layer_norm", {x, gamma, beta}, x.shape(), compute,
                            backward);
}

template <typename T>
TensorT<T> multi_head_attention(const TensorT<T>& tokens, int heads,
                                const TensorT<T>& qkv_weight,
                                const TensorT<T>& qkv_bias,
                                const TensorT<T>& proj_weight,
                                const TensorT<T>& proj_bias, Trace* trace) {
  const bool batched = tokens.ndim() == 3;
  if (!batched && tokens.ndim() != 2)
    throw ShapeError("multi_head_attention: tokens must be (T,D) or (N,T,D), got " +
                     shape_str(tokens.shape()));
  const int n = batched ? tokens.dim(0) : 1;
  const int t = tokens.dim(batched ? 1 : 0);
  const int d = tokens.dim(batched ? 2 : 1);
  if (heads < 1 || d % heads != 0)
    throw ConfigError("multi_head_attention: embed dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  check_matrix_param(qkv_weight, qkv_bias, "multi_head_attention qkv");
  check_matrix_param(proj_weight, proj_bias, "multi_head_attention proj");
  if (qkv_weight.dim(0) != 3 * d || qkv_weight.dim(1) != d)
    throw ShapeError("multi_head_attention: qkv weight " +
                     shape_str(qkv_weight.shape()) + " must map D to 3D for D=" +
                     std::to_string(d));
  if (proj_weight.dim(0) != d || proj_weight.dim(1) != d)
    throw ShapeError("multi_head_attention: proj weight " +
                     shape_str(proj_weight.shape()) + " must be DxD");
  const int dh = d / heads;

  TensorT<T> x = batched ? tokens : reshape(tokens, {1, t, d});
  TensorT<T> qkv = linear(x, qkv_weight, qkv_bias); // (N,T,3D)
  if (trace) trace->push_back({"attn.qkv", {t, d}, {t, 3 * d}});
  TensorT<T> q = slice(qkv, 2, 0, d);
  TensorT<T> k = slice(qkv, 2, d, d);
  TensorT<T> v = slice(qkv, 2, 2 * d, d);
  auto split_heads = [&](const TensorT<T>& m) {
    return permute(reshape(m, {n, t, heads, dh}), {0, 2, 1, 3}); // (N,H,T,dh)
  };
  TensorT<T> qh = split_heads(q), kh = split_heads(k), vh = split_heads(v);
  if (trace) trace->push_back({"attn.heads", {t, d}, {heads, t, dh}});
  TensorT<T> scores =
      scale(matmul(qh, permute(kh, {0, 1, 3, 2})), 1.0 / std::sqrt(double(dh)));
  TensorT<T> weights = softmax(scores);          // (N,H,T,T)
  TensorT<T> ctx = matmul(weights, vh);          // (N,H,T,dh)
  TensorT<T> merged = reshape(permute(ctx, {0, 2, 1, 3}), {n, t, d});
  TensorT<T> out = linear(merged, proj_weight, proj_bias);
  if (trace) trace->push_back({"attn.proj", {t, d}, {t, d}});
  return batched ? out : reshape(out, {t, d});
}

template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw UsageError("dropout: rate must be in [0,1), got " +
                     std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.values().size());
  for (auto& m : *mask) m = rng.uniform() >= rate ? keep_scale : T(0);
  auto compute = [mask](const Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * (*mask)[i];
    return out;
  };
  auto backward = [mask](const Node<T>& n) {
    auto& xn = *n.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      xn.grad[i] += n.grad[i] * (*mask)[i];
  };
  return detail::make_op<T>("dropout", {x}, x.shape(), compute, backward);
}

template <typename T>
TensorT<T> weighted_cross_entropy(const TensorT<T>& logits,
                                  const std::vector<int>& labels,
                                  const std::vector<double>& weights) {
  if (logits.ndim() != 2)
    throw ShapeError("weighted_cross_entropy: logits must be (B,K), got " +
                     shape_str(logits.shape()));
  const int b = logits.dim(0);
  const int k = logits.dim(1);
  if (static_cast<int>(labels.size()) != b)
    throw UsageError("weighted_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(b));
  if (static_cast<int>(weights.size()) != k)
    throw UsageError("weighted_cross_entropy: " +
                     std::to_string(weights.size()) + " class weights for " +
                     std::to_string(k) + " classes");
  for (int y : labels)
    if (y < 0 || y >= k)
      throw UsageError("weighted_cross_entropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(k) + ")");
  auto lbl = std::make_shared<std::vector<int>>(labels);
  auto wts = std::make_shared<std::vector<double>>(weights);
  auto compute = [b, k, lbl, wts](const Node<T>& n) {
    const auto& z = n.inputs[0]->value;
    double num = 0.0, den = 0.0;
    for (int i = 0; i < b; ++i) {
      const T* row = z.data() + static_cast<int64_t>(i) * k;
      double m = row[0];
      for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
      double s = 0.0;
      for (int j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j]) - m);
      const double lse = std::log(s) + m;
      const double w = (*wts)[static_cast<size_t>((*lbl)[i])];
      num += w * (lse - static_cast<double>(row[(*lbl)[i]]));
      den += w;
    }
    return std::vector<T>{static_cast<T>(num / den)};
  };
  auto backward = [b, k, lbl, wts](const Node<T>& n) {
    auto& zn = *n.inputs[0];
    if (!zn.requires_grad) return;
    zn.ensure_grad();
    double den = 0.0;
    for (int i = 0; i < b; ++i) den += (*wts)[static_cast<size_t>((*lbl)[i])];
    const double g = static_cast<double>(n.grad[0]) / den;
    for (int i = 0; i < b; ++i) {
      const T* row = zn.value.data() + static_cast<int64_t>(i) * k;
      T* drow = zn.grad.data() + static_cast<int64_t>(i) * k;
      double m = row[0];
      for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
      double s = 0.0;
      for (int j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j]) - m);
      const double w = (*wts)[static_cast<size_t>((*lbl)[i])];
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(static_cast<double>(row[j]) - m) / s;
        const double onehot = j == (*lbl)[i] ? 1.0 : 0.0;
        drow[j] += static_cast<T>(g * w * (p - onehot));
      }
    }
  };
  return detail::make_op<T>("weighted_cross_entropy", {logits}, {1}, compute,
                            backward);
}

template <typename T>
TensorT<T> resize_bilinear(const TensorT<T>& x, int side) {
  if (side < 1) throw UsageError("resize_bilinear: side must be >= 1");
  if (x.requires_grad())
    throw UsageError("resize_bilinear has no backward rule; detach the input");
  if (x.ndim() != 3 && x.ndim() != 4)
    throw ShapeError("resize_bilinear: input must be (C,H,W) or (N,C,H,W), got " +
                     shape_str(x.shape()));
  const bool batched = x.ndim() == 4;
  const int n = batched ? x.dim(0) : 1;
  const int c = batched ? x.dim(1) : x.dim(0);
  const int h = x.dim(batched ? 2 : 1);
  const int w = x.dim(batched ? 3 : 2);
  Shape out_shape = batched ? Shape{n, c, side, side} : Shape{c, side, side};
  auto compute = [n, c, h, w, side](const Node<T>& nd) {
    const auto& xv = nd.inputs[0]->value;
    std::vector<T> out(static_cast<size_t>(n) * c * side * side);
    const double sh = static_cast<double>(h) / side;
    const double sw = static_cast<double>(w) / side;
    parallel_for(0, static_cast<int64_t>(n) * c, [&](int64_t plane) {
      const T* src = xv.data() + plane * h * w;
      T* dst = out.data() + plane * side * side;
      for (int oy = 0; oy < side; ++oy) {
        double fy = (oy + 0.5) * sh - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < side; ++ox) {
          double fx = (ox + 0.5) * sw - 0.5;
          fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
          const int x0 = static_cast<int>(fx);
          const int x1 = std::min(x0 + 1, w - 1);
          const double wx = fx - x0;
          const double v =
              (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
              wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
          dst[oy * side + ox] = static_cast<T>(v);
        }
      }
    });
    return out;
  };
  return detail::make_op<T>("resize_bilinear", {x}, out_shape, compute, nullptr);
}

template <typename T>
std::vector<int> argmax_rows(const TensorT<T>& logits) {
  const int k = logits.shape().back();
  const int64_t rows = logits.numel() / k;
  std::vector<int> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = logits.values().data() + r * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

// Explicit instantiations for the two supported numeric modes.
#define OSHX_INSTANTIATE_OPS(T)                                                \
  template TensorT<T> relu<T>(const TensorT<T>&);                             \
  template TensorT<T> leaky_relu<T>(const TensorT<T>&, double);               \
  template TensorT<T> gelu<T>(const TensorT<T>&);                             \
  template TensorT<T> softmax<T>(const TensorT<T>&, int);                     \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);           \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);           \
  template TensorT<T> scale<T>(const TensorT<T>&, double);                    \
  template TensorT<T> sum<T>(const TensorT<T>&);                              \
  template TensorT<T> mean<T>(const TensorT<T>&);                             \
  template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                   \
  template TensorT<T> flatten<T>(const TensorT<T>&, int);                     \
  template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int>&); \
  template TensorT<T> slice<T>(const TensorT<T>&, int, int, int);             \
  template TensorT<T> concat<T>(const TensorT<T>&, const TensorT<T>&, int);   \
  template TensorT<T> repeat_leading<T>(const TensorT<T>&, int);              \
  template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&,         \
                                const TensorT<T>&);                           \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);        \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&,         \
                                const TensorT<T>&, int, int);                 \
  template TensorT<T> maxpool2d<T>(const TensorT<T>&, int, int, int);         \
  template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                  \
  template TensorT<T> layer_norm<T>(const TensorT<T>&, const TensorT<T>&,     \
                                    const TensorT<T>&, double);               \
  template TensorT<T> multi_head_attention<T>(                                \
      const TensorT<T>&, int, const TensorT<T>&, const TensorT<T>&,           \
      const TensorT<T>&, const TensorT<T>&, Trace*);                          \
  template TensorT<T> dropout<T>(const TensorT<T>&, double, Rng&, bool);      \
  template TensorT<T> weighted_cross_entropy<T>(                              \
      const TensorT<T>&, const std::vector<int>&, const std::vector<double>&);\
  template TensorT<T> resize_bilinear<T>(const TensorT<T>&, int);             \
  template std::vector<int> argmax_rows<T>(const TensorT<T>&);

OSHX_INSTANTIATE_OPS(float)
OSHX_INSTANTIATE_OPS(double)

#undef OSHX_INSTANTIATE_OPS

} // namespace oshx
