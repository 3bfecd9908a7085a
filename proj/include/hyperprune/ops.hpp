#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hyperprune/tensor.hpp"

namespace hyperprune {

namespace detail {

// im2col for a single sample. src is [c,H,W] row-major, dst is
// [c*kh*kw, oh*ow] row-major. Out-of-image taps read zero.
template <typename Scalar>
void im2col(const Scalar* src, int c, int H, int W, int kh, int kw, int stride,
            int pad, int oh, int ow, Scalar* dst) {
  for (int ci = 0; ci < c; ++ci) {
    const Scalar* plane = src + static_cast<std::int64_t>(ci) * H * W;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        Scalar* row = dst + (static_cast<std::int64_t>(ci) * kh * kw + u * kw + v) *
                                (static_cast<std::int64_t>(oh) * ow);
        for (int i = 0; i < oh; ++i) {
          const int y = i * stride - pad + u;
          for (int j = 0; j < ow; ++j) {
            const int x = j * stride - pad + v;
            row[i * ow + j] = (y >= 0 && y < H && x >= 0 && x < W)
                                  ? plane[y * W + x]
                                  : Scalar(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the [c,H,W] image.
template <typename Scalar>
void col2im(const Scalar* cols, int c, int H, int W, int kh, int kw, int stride,
            int pad, int oh, int ow, Scalar* dst) {
  for (int ci = 0; ci < c; ++ci) {
    Scalar* plane = dst + static_cast<std::int64_t>(ci) * H * W;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const Scalar* row =
            cols + (static_cast<std::int64_t>(ci) * kh * kw + u * kw + v) *
                       (static_cast<std::int64_t>(oh) * ow);
        for (int i = 0; i < oh; ++i) {
          const int y = i * stride - pad + u;
          if (y < 0 || y >= H) continue;
          for (int j = 0; j < ow; ++j) {
            const int x = j * stride - pad + v;
            if (x >= 0 && x < W) plane[y * W + x] += row[i * ow + j];
          }
        }
      }
    }
  }
}

template <typename Scalar>
using Node = TensorNode<Scalar>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

// Binary ops broadcast a scalar ({1}) against any shape; otherwise shapes
// must match exactly. Richer broadcasting is rejected by design.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const bool as = a.size() == 1, bs = b.size() == 1;
  check_shape(as || bs || same_shape(a.shape(), b.shape()),
              "add: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape out_shape = as && !bs ? b.shape() : a.shape();
  VecX<Scalar> v = as && !bs ? (a.data()[0] + b.data()).eval()
                   : bs && a.size() != 1 ? (a.data() + b.data()[0]).eval()
                                         : (a.data() + b.data()).eval();
  return Tensor<Scalar>::op(
      out_shape, std::move(v), {a, b},
      [](detail::Node<Scalar>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad)
          pa.accumulate(pa.value.size() == n.grad.size()
                            ? n.grad
                            : VecX<Scalar>::Constant(1, n.grad.sum()));
        if (pb.requires_grad)
          pb.accumulate(pb.value.size() == n.grad.size()
                            ? n.grad
                            : VecX<Scalar>::Constant(1, n.grad.sum()));
      },
      "add");
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const bool as = a.size() == 1, bs = b.size() == 1;
  check_shape(as || bs || same_shape(a.shape(), b.shape()),
              "sub: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape out_shape = as && !bs ? b.shape() : a.shape();
  VecX<Scalar> v = as && !bs ? (a.data()[0] - b.data()).eval()
                   : bs && a.size() != 1 ? (a.data() - b.data()[0]).eval()
                                         : (a.data() - b.data()).eval();
  return Tensor<Scalar>::op(
      out_shape, std::move(v), {a, b},
      [](detail::Node<Scalar>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad)
          pa.accumulate(pa.value.size() == n.grad.size()
                            ? n.grad
                            : VecX<Scalar>::Constant(1, n.grad.sum()));
        if (pb.requires_grad)
          pb.accumulate(pb.value.size() == n.grad.size()
                            ? (-n.grad).eval()
                            : VecX<Scalar>::Constant(1, -n.grad.sum()));
      },
      "sub");
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const bool as = a.size() == 1, bs = b.size() == 1;
  check_shape(as || bs || same_shape(a.shape(), b.shape()),
              "mul: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape out_shape = as && !bs ? b.shape() : a.shape();
  VecX<Scalar> v = as && !bs ? (a.data()[0] * b.data()).eval()
                   : bs && a.size() != 1 ? (a.data() * b.data()[0]).eval()
                                         : (a.data() * b.data()).eval();
  return Tensor<Scalar>::op(
      out_shape, std::move(v), {a, b},
      [](detail::Node<Scalar>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        const bool a_scalar = pa.value.size() == 1 && n.grad.size() != 1;
        const bool b_scalar = pb.value.size() == 1 && n.grad.size() != 1;
        if (pa.requires_grad) {
          if (a_scalar)
            pa.accumulate(VecX<Scalar>::Constant(1, (n.grad * pb.value).sum()));
          else if (b_scalar)
            pa.accumulate((n.grad * pb.value[0]).eval());
          else
            pa.accumulate((n.grad * pb.value).eval());
        }
        if (pb.requires_grad) {
          if (b_scalar)
            pb.accumulate(VecX<Scalar>::Constant(1, (n.grad * pa.value).sum()));
          else if (a_scalar)
            pb.accumulate((n.grad * pa.value[0]).eval());
          else
            pb.accumulate((n.grad * pa.value).eval());
        }
      },
      "mul");
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, Scalar s) {
  return Tensor<Scalar>::op(
      a.shape(), (a.data() + s).eval(), {a},
      [](detail::Node<Scalar>& n) { n.parents[0]->accumulate(n.grad); }, "add_scalar");
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, Scalar s) {
  return Tensor<Scalar>::op(
      a.shape(), (a.data() * s).eval(), {a},
      [s](detail::Node<Scalar>& n) { n.parents[0]->accumulate((n.grad * s).eval()); },
      "mul_scalar");
}

template <typename Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& a) {
  return mul(a, Scalar(-1));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return Tensor<Scalar>::op(
      a.shape(), a.data().max(Scalar(0)).eval(), {a},
      [](detail::Node<Scalar>& n) {
        const auto& x = n.parents[0]->value;
        n.parents[0]->accumulate(
            (n.grad * (x > Scalar(0)).template cast<Scalar>()).eval());
      },
      "relu");
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& a, Scalar alpha) {
  VecX<Scalar> v = (a.data() > Scalar(0)).select(a.data(), a.data() * alpha);
  return Tensor<Scalar>::op(
      a.shape(), std::move(v), {a},
      [alpha](detail::Node<Scalar>& n) {
        const auto& x = n.parents[0]->value;
        VecX<Scalar> d = (x > Scalar(0))
                             .select(VecX<Scalar>::Ones(x.size()),
                                     VecX<Scalar>::Constant(x.size(), alpha));
        n.parents[0]->accumulate((n.grad * d).eval());
      },
      "leaky_relu");
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& a) {
  return Tensor<Scalar>::op(
      a.shape(), a.data().tanh().eval(), {a},
      [](detail::Node<Scalar>& n) {
        n.parents[0]->accumulate((n.grad * (Scalar(1) - n.value.square())).eval());
      },
      "tanh");
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  VecX<Scalar> v(a.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const Scalar x = a.data()[i];
    v[i] = x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x))
                          : std::exp(x) / (Scalar(1) + std::exp(x));
  }
  return Tensor<Scalar>::op(
      a.shape(), std::move(v), {a},
      [](detail::Node<Scalar>& n) {
        n.parents[0]->accumulate((n.grad * n.value * (Scalar(1) - n.value)).eval());
      },
      "sigmoid");
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  if ((a.data() <= Scalar(0)).any())
    throw std::domain_error("log of non-positive value");
  return Tensor<Scalar>::op(
      a.shape(), a.data().log().eval(), {a},
      [](detail::Node<Scalar>& n) {
        n.parents[0]->accumulate((n.grad / n.parents[0]->value).eval());
      },
      "log");
}

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& a) {
  return Tensor<Scalar>::op(
      a.shape(), a.data().abs().eval(), {a},
      [](detail::Node<Scalar>& n) {
        const auto& x = n.parents[0]->value;
        n.parents[0]->accumulate((n.grad * x.sign()).eval());
      },
      "abs");
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) { return mul(a, s); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) { return mul(a, s); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  return Tensor<Scalar>::op(
      {1}, VecX<Scalar>::Constant(1, a.data().sum()), {a},
      [](detail::Node<Scalar>& n) {
        n.parents[0]->accumulate(
            VecX<Scalar>::Constant(n.parents[0]->value.size(), n.grad[0]));
      },
      "sum");
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(a.size());
  return Tensor<Scalar>::op(
      {1}, VecX<Scalar>::Constant(1, a.data().mean()), {a},
      [inv_n](detail::Node<Scalar>& n) {
        n.parents[0]->accumulate(
            VecX<Scalar>::Constant(n.parents[0]->value.size(), n.grad[0] * inv_n));
      },
      "mean");
}

// ---------------------------------------------------------------------------
// Linear algebra / shape
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_shape(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D tensors");
  const int p = a.dim(0), q = a.dim(1), r = b.dim(1);
  check_shape(b.dim(0) == q, "matmul: inner dimensions " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
  VecX<Scalar> v(static_cast<std::int64_t>(p) * r);
  {
    ConstMatMap<Scalar> A(a.data().data(), p, q);
    ConstMatMap<Scalar> B(b.data().data(), q, r);
    MatMap<Scalar> Y(v.data(), p, r);
    Y.noalias() = A * B;
  }
  return Tensor<Scalar>::op(
      {p, r}, std::move(v), {a, b},
      [p, q, r](detail::Node<Scalar>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        ConstMatMap<Scalar> G(n.grad.data(), p, r);
        if (pa.requires_grad) {
          VecX<Scalar> da(static_cast<std::int64_t>(p) * q);
          ConstMatMap<Scalar> B(pb.value.data(), q, r);
          MatMap<Scalar>(da.data(), p, q).noalias() = G * B.transpose();
          pa.accumulate(da);
        }
        if (pb.requires_grad) {
          VecX<Scalar> db(static_cast<std::int64_t>(q) * r);
          ConstMatMap<Scalar> A(pa.value.data(), p, q);
          MatMap<Scalar>(db.data(), q, r).noalias() = A.transpose() * G;
          pb.accumulate(db);
        }
      },
      "matmul");
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, const Shape& shape) {
  check_shape(numel(shape) == a.size(), "reshape: element count mismatch");
  return Tensor<Scalar>::op(
      shape, VecX<Scalar>(a.data()), {a},
      [](detail::Node<Scalar>& n) { n.parents[0]->accumulate(n.grad); }, "reshape");
}

/// Swap the two leading axes; trailing axes ride along.
template <typename Scalar>
Tensor<Scalar> transpose_first2(const Tensor<Scalar>& a) {
  check_shape(a.ndim() >= 2, "transpose_first2 expects >= 2 dims");
  const int d0 = a.dim(0), d1 = a.dim(1);
  std::int64_t rest = 1;
  Shape out_shape = a.shape();
  std::swap(out_shape[0], out_shape[1]);
  for (int i = 2; i < a.ndim(); ++i) rest *= a.dim(i);
  VecX<Scalar> v(a.size());
  for (int i = 0; i < d0; ++i)
    for (int j = 0; j < d1; ++j)
      v.segment((static_cast<std::int64_t>(j) * d0 + i) * rest, rest) =
          a.data().segment((static_cast<std::int64_t>(i) * d1 + j) * rest, rest);
  return Tensor<Scalar>::op(
      out_shape, std::move(v), {a},
      [d0, d1, rest](detail::Node<Scalar>& n) {
        VecX<Scalar> g(n.grad.size());
        for (int j = 0; j < d1; ++j)
          for (int i = 0; i < d0; ++i)
            g.segment((static_cast<std::int64_t>(i) * d1 + j) * rest, rest) =
                n.grad.segment((static_cast<std::int64_t>(j) * d0 + i) * rest, rest);
        n.parents[0]->accumulate(g);
      },
      "transpose_first2");
}

/// Concatenate along `axis`; all other dims must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  check_shape(!parts.empty(), "concat of nothing");
  const Shape& s0 = parts[0].shape();
  check_shape(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: bad axis");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];
  int axis_total = 0;
  for (const auto& t : parts) {
    check_shape(t.ndim() == static_cast<int>(s0.size()), "concat: rank mismatch");
    for (int i = 0; i < t.ndim(); ++i)
      check_shape(i == axis || t.dim(i) == s0[static_cast<size_t>(i)],
                  "concat: dim mismatch off-axis");
    axis_total += t.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = axis_total;
  VecX<Scalar> v(outer * axis_total * inner);
  std::vector<int> axis_dims;
  std::int64_t off = 0;
  for (const auto& t : parts) {
    const std::int64_t ad = t.dim(axis);
    axis_dims.push_back(static_cast<int>(ad));
    for (std::int64_t o = 0; o < outer; ++o)
      v.segment((o * axis_total + off) * inner, ad * inner) =
          t.data().segment(o * ad * inner, ad * inner);
    off += ad;
  }
  return Tensor<Scalar>::op(
      out_shape, std::move(v), parts,
      [outer, inner, axis_total, axis_dims](detail::Node<Scalar>& n) {
        std::int64_t off = 0;
        for (size_t k = 0; k < n.parents.size(); ++k) {
          const std::int64_t ad = axis_dims[k];
          auto& p = *n.parents[k];
          if (p.requires_grad) {
            VecX<Scalar> g(outer * ad * inner);
            for (std::int64_t o = 0; o < outer; ++o)
              g.segment(o * ad * inner, ad * inner) =
                  n.grad.segment((o * axis_total + off) * inner, ad * inner);
            p.accumulate(g);
          }
          off += ad;
        }
      },
      "concat");
}

/// Per-channel bias on a [b,c,h,w] tensor.
template <typename Scalar>
Tensor<Scalar> bias_add(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  check_shape(x.ndim() == 4 && bias.ndim() == 1 && bias.dim(0) == x.dim(1),
              "bias_add: bias " + shape_str(bias.shape()) + " vs input " +
                  shape_str(x.shape()));
  const int b = x.dim(0), c = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  VecX<Scalar> v = x.data();
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci)
      v.segment((static_cast<std::int64_t>(bi) * c + ci) * hw, hw) += bias.data()[ci];
  return Tensor<Scalar>::op(
      x.shape(), std::move(v), {x, bias},
      [b, c, hw](detail::Node<Scalar>& n) {
        auto& px = *n.parents[0];
        auto& pb = *n.parents[1];
        if (px.requires_grad) px.accumulate(n.grad);
        if (pb.requires_grad) {
          VecX<Scalar> g = VecX<Scalar>::Zero(c);
          for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci)
              g[ci] += n.grad.segment((static_cast<std::int64_t>(bi) * c + ci) * hw, hw).sum();
          pb.accumulate(g);
        }
      },
      "bias_add");
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

inline int conv_out_size(int in, int k, int stride, int pad) {
  const int num = in + 2 * pad - k;
  if (num < 0 || num % stride != 0)
    throw ShapeError("conv: non-integer output size for in=" + std::to_string(in) +
                     " k=" + std::to_string(k) + " stride=" + std::to_string(stride) +
                     " pad=" + std::to_string(pad));
  return num / stride + 1;
}

inline int conv_transpose_out_size(int in, int k, int stride, int pad) {
  const int out = (in - 1) * stride - 2 * pad + k;
  if (out <= 0) throw ShapeError("conv_transpose: non-positive output size");
  return out;
}

/// Cross-correlation of [b,c,H,W] with [n,c,kh,kw].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, int stride,
                      int pad) {
  check_shape(x.ndim() == 4 && w.ndim() == 4, "conv2d expects 4-D input and weight");
  check_shape(w.dim(1) == x.dim(1), "conv2d: weight input channels " +
                                        std::to_string(w.dim(1)) + " vs input " +
                                        std::to_string(x.dim(1)));
  check_shape(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int b = x.dim(0), c = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int n = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = conv_out_size(H, kh, stride, pad);
  const int ow = conv_out_size(W, kw, stride, pad);
  const std::int64_t ck2 = static_cast<std::int64_t>(c) * kh * kw;
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;

  VecX<Scalar> v(static_cast<std::int64_t>(b) * n * ohw);
  VecX<Scalar> cols(ck2 * ohw);
  ConstMatMap<Scalar> Wm(w.data().data(), n, ck2);
  for (int bi = 0; bi < b; ++bi) {
    detail::im2col(x.data().data() + static_cast<std::int64_t>(bi) * c * H * W, c, H,
                   W, kh, kw, stride, pad, oh, ow, cols.data());
    ConstMatMap<Scalar> C(cols.data(), ck2, ohw);
    MatMap<Scalar>(v.data() + static_cast<std::int64_t>(bi) * n * ohw, n, ohw)
        .noalias() = Wm * C;
  }
  return Tensor<Scalar>::op(
      {b, n, oh, ow}, std::move(v), {x, w},
      [b, c, H, W, n, kh, kw, stride, pad, oh, ow, ck2, ohw](detail::Node<Scalar>& n_) {
        auto& px = *n_.parents[0];
        auto& pw = *n_.parents[1];
        VecX<Scalar> cols(ck2 * ohw);
        VecX<Scalar> dw;
        if (pw.requires_grad) dw = VecX<Scalar>::Zero(pw.value.size());
        VecX<Scalar> dx;
        if (px.requires_grad) dx = VecX<Scalar>::Zero(px.value.size());
        VecX<Scalar> dcols(ck2 * ohw);
        ConstMatMap<Scalar> Wm(pw.value.data(), n, ck2);
        for (int bi = 0; bi < b; ++bi) {
          ConstMatMap<Scalar> G(n_.grad.data() + static_cast<std::int64_t>(bi) * n * ohw,
                                n, ohw);
          if (pw.requires_grad || px.requires_grad)
            detail::im2col(px.value.data() + static_cast<std::int64_t>(bi) * c * H * W,
                           c, H, W, kh, kw, stride, pad, oh, ow, cols.data());
          if (pw.requires_grad) {
            ConstMatMap<Scalar> C(cols.data(), ck2, ohw);
            MatMap<Scalar>(dw.data(), n, ck2).noalias() += G * C.transpose();
          }
          if (px.requires_grad) {
            MatMap<Scalar>(dcols.data(), ck2, ohw).noalias() = Wm.transpose() * G;
            detail::col2im(dcols.data(), c, H, W, kh, kw, stride, pad, oh, ow,
                           dx.data() + static_cast<std::int64_t>(bi) * c * H * W);
          }
        }
        if (pw.requires_grad) pw.accumulate(dw);
        if (px.requires_grad) px.accumulate(dx);
      },
      "conv2d");
}

/// Fractionally strided (transposed) convolution of [b,c,H,W] with weight
/// [c,n,kh,kw]; the adjoint of conv2d with the same stride and padding.
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                int stride, int pad) {
  check_shape(x.ndim() == 4 && w.ndim() == 4,
              "conv_transpose2d expects 4-D input and weight");
  check_shape(w.dim(0) == x.dim(1), "conv_transpose2d: weight leading dim " +
                                        std::to_string(w.dim(0)) + " vs input channels " +
                                        std::to_string(x.dim(1)));
  check_shape(stride >= 1 && pad >= 0, "conv_transpose2d: bad stride/pad");
  const int b = x.dim(0), c = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int n = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int oh = conv_transpose_out_size(H, kh, stride, pad);
  const int ow = conv_transpose_out_size(W, kw, stride, pad);
  const std::int64_t nk2 = static_cast<std::int64_t>(n) * kh * kw;
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;

  VecX<Scalar> v = VecX<Scalar>::Zero(static_cast<std::int64_t>(b) * n * oh * ow);
  VecX<Scalar> cols(nk2 * hw);
  ConstMatMap<Scalar> Wm(w.data().data(), c, nk2);
  for (int bi = 0; bi < b; ++bi) {
    ConstMatMap<Scalar> X(x.data().data() + static_cast<std::int64_t>(bi) * c * hw, c, hw);
    MatMap<Scalar>(cols.data(), nk2, hw).noalias() = Wm.transpose() * X;
    detail::col2im(cols.data(), n, oh, ow, kh, kw, stride, pad, H, W,
                   v.data() + static_cast<std::int64_t>(bi) * n * oh * ow);
  }
  return Tensor<Scalar>::op(
      {b, n, oh, ow}, std::move(v), {x, w},
      [b, c, H, W, n, kh, kw, stride, pad, oh, ow, nk2, hw](detail::Node<Scalar>& n_) {
        auto& px = *n_.parents[0];
        auto& pw = *n_.parents[1];
        VecX<Scalar> cols(nk2 * hw);
        VecX<Scalar> dw;
        if (pw.requires_grad) dw = VecX<Scalar>::Zero(pw.value.size());
        VecX<Scalar> dx;
        if (px.requires_grad) dx = VecX<Scalar>::Zero(px.value.size());
        ConstMatMap<Scalar> Wm(pw.value.data(), c, nk2);
        for (int bi = 0; bi < b; ++bi) {
          // im2col over the output-side gradient plays the conv2d role.
          detail::im2col(n_.grad.data() + static_cast<std::int64_t>(bi) * n * oh * ow, n,
                         oh, ow, kh, kw, stride, pad, H, W, cols.data());
          ConstMatMap<Scalar> C(cols.data(), nk2, hw);
          if (px.requires_grad)
            MatMap<Scalar>(dx.data() + static_cast<std::int64_t>(bi) * c * hw, c, hw)
                .noalias() = Wm * C;
          if (pw.requires_grad) {
            ConstMatMap<Scalar> X(px.value.data() + static_cast<std::int64_t>(bi) * c * hw,
                                  c, hw);
            MatMap<Scalar>(dw.data(), c, nk2).noalias() += X * C.transpose();
          }
        }
        if (px.requires_grad) px.accumulate(dx);
        if (pw.requires_grad) pw.accumulate(dw);
      },
      "conv_transpose2d");
}

// ---------------------------------------------------------------------------
// Normalization / resampling
// ---------------------------------------------------------------------------

namespace detail {

// Shared normalization backward for one slice of length N:
// dx = inv * (g - mean(g) - xhat * mean(g .* xhat)), g = dy (* gamma).
template <typename Scalar>
void norm_slice_backward(const Scalar* dy, const Scalar* xhat, Scalar inv, Scalar gamma,
                         std::int64_t N, Scalar* dx) {
  Scalar gsum = 0, gx = 0;
  for (std::int64_t i = 0; i < N; ++i) {
    const Scalar g = dy[i] * gamma;
    gsum += g;
    gx += g * xhat[i];
  }
  const Scalar gm = gsum / static_cast<Scalar>(N);
  const Scalar gxm = gx / static_cast<Scalar>(N);
  for (std::int64_t i = 0; i < N; ++i)
    dx[i] += inv * (dy[i] * gamma - gm - xhat[i] * gxm);
}

}  // namespace detail

/// Instance norm over each (sample, channel) plane; optional affine
/// parameters, pass invalid tensors to disable.
template <typename Scalar>
Tensor<Scalar> instance_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                             const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  check_shape(x.ndim() == 4, "instance_norm expects [b,c,h,w]");
  const int b = x.dim(0), c = x.dim(1);
  const std::int64_t N = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  const bool affine = gamma.valid();
  if (affine)
    check_shape(gamma.ndim() == 1 && gamma.dim(0) == c && beta.valid() &&
                    beta.ndim() == 1 && beta.dim(0) == c,
                "instance_norm: affine parameter shape");
  auto xhat = std::make_shared<VecX<Scalar>>(x.size());
  auto inv = std::make_shared<VecX<Scalar>>(static_cast<std::int64_t>(b) * c);
  VecX<Scalar> v(x.size());
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      const std::int64_t off = (static_cast<std::int64_t>(bi) * c + ci) * N;
      auto slice = x.data().segment(off, N);
      const Scalar mu = slice.mean();
      const Scalar var = (slice - mu).square().mean();
      const Scalar iv = Scalar(1) / std::sqrt(var + eps);
      (*inv)[static_cast<std::int64_t>(bi) * c + ci] = iv;
      xhat->segment(off, N) = (slice - mu) * iv;
      if (affine)
        v.segment(off, N) = xhat->segment(off, N) * gamma.data()[ci] + beta.data()[ci];
      else
        v.segment(off, N) = xhat->segment(off, N);
    }
  }
  std::vector<Tensor<Scalar>> parents = {x};
  if (affine) {
    parents.push_back(gamma);
    parents.push_back(beta);
  }
  return Tensor<Scalar>::op(
      x.shape(), std::move(v), parents,
      [b, c, N, affine, xhat, inv](detail::Node<Scalar>& n) {
        auto& px = *n.parents[0];
        VecX<Scalar> dx;
        if (px.requires_grad) dx = VecX<Scalar>::Zero(px.value.size());
        VecX<Scalar> dgamma, dbeta;
        const bool want_affine_grad =
            affine && (n.parents[1]->requires_grad || n.parents[2]->requires_grad);
        if (want_affine_grad) {
          dgamma = VecX<Scalar>::Zero(c);
          dbeta = VecX<Scalar>::Zero(c);
        }
        for (int bi = 0; bi < b; ++bi) {
          for (int ci = 0; ci < c; ++ci) {
            const std::int64_t off = (static_cast<std::int64_t>(bi) * c + ci) * N;
            const Scalar g = affine ? n.parents[1]->value[ci] : Scalar(1);
            if (px.requires_grad)
              detail::norm_slice_backward(n.grad.data() + off, xhat->data() + off,
                                          (*inv)[static_cast<std::int64_t>(bi) * c + ci],
                                          g, N, dx.data() + off);
            if (want_affine_grad) {
              dgamma[ci] +=
                  (n.grad.segment(off, N) * xhat->segment(off, N)).sum();
              dbeta[ci] += n.grad.segment(off, N).sum();
            }
          }
        }
        if (px.requires_grad) px.accumulate(dx);
        if (affine && n.parents[1]->requires_grad) n.parents[1]->accumulate(dgamma);
        if (affine && n.parents[2]->requires_grad) n.parents[2]->accumulate(dbeta);
      },
      "instance_norm");
}

/// Batch norm (training statistics) over (sample, spatial) per channel.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  check_shape(x.ndim() == 4, "batch_norm expects [b,c,h,w]");
  const int b = x.dim(0), c = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  const std::int64_t N = static_cast<std::int64_t>(b) * hw;
  const bool affine = gamma.valid();
  if (affine)
    check_shape(gamma.ndim() == 1 && gamma.dim(0) == c && beta.valid() &&
                    beta.ndim() == 1 && beta.dim(0) == c,
                "batch_norm: affine parameter shape");
  auto xhat = std::make_shared<VecX<Scalar>>(x.size());
  auto inv = std::make_shared<VecX<Scalar>>(c);
  VecX<Scalar> v(x.size());
  for (int ci = 0; ci < c; ++ci) {
    Scalar sum = 0, sq = 0;
    for (int bi = 0; bi < b; ++bi) {
      const auto slice =
          x.data().segment((static_cast<std::int64_t>(bi) * c + ci) * hw, hw);
      sum += slice.sum();
      sq += slice.square().sum();
    }
    const Scalar mu = sum / static_cast<Scalar>(N);
    const Scalar var = sq / static_cast<Scalar>(N) - mu * mu;
    const Scalar iv = Scalar(1) / std::sqrt(var + eps);
    (*inv)[ci] = iv;
    for (int bi = 0; bi < b; ++bi) {
      const std::int64_t off = (static_cast<std::int64_t>(bi) * c + ci) * hw;
      xhat->segment(off, hw) = (x.data().segment(off, hw) - mu) * iv;
      if (affine)
        v.segment(off, hw) = xhat->segment(off, hw) * gamma.data()[ci] + beta.data()[ci];
      else
        v.segment(off, hw) = xhat->segment(off, hw);
    }
  }
  std::vector<Tensor<Scalar>> parents = {x};
  if (affine) {
    parents.push_back(gamma);
    parents.push_back(beta);
  }
  return Tensor<Scalar>::op(
      x.shape(), std::move(v), parents,
      [b, c, hw, N, affine, xhat, inv](detail::Node<Scalar>& n) {
        auto& px = *n.parents[0];
        VecX<Scalar> dx;
        if (px.requires_grad) dx = VecX<Scalar>::Zero(px.value.size());
        for (int ci = 0; ci < c; ++ci) {
          const Scalar g = affine ? n.parents[1]->value[ci] : Scalar(1);
          Scalar gsum = 0, gx = 0;
          for (int bi = 0; bi < b; ++bi) {
            const std::int64_t off = (static_cast<std::int64_t>(bi) * c + ci) * hw;
            gsum += n.grad.segment(off, hw).sum() * g;
            gx += (n.grad.segment(off, hw) * xhat->segment(off, hw)).sum() * g;
          }
          const Scalar gm = gsum / static_cast<Scalar>(N);
          const Scalar gxm = gx / static_cast<Scalar>(N);
          if (px.requires_grad) {
            for (int bi = 0; bi < b; ++bi) {
              const std::int64_t off = (static_cast<std::int64_t>(bi) * c + ci) * hw;
              dx.segment(off, hw) =
                  (*inv)[ci] * (n.grad.segment(off, hw) * g - gm -
                                xhat->segment(off, hw) * gxm);
            }
          }
        }
        if (px.requires_grad) px.accumulate(dx);
        if (affine && n.parents[1]->requires_grad) {
          VecX<Scalar> dgamma = VecX<Scalar>::Zero(c);
          VecX<Scalar> dbeta = VecX<Scalar>::Zero(c);
          for (int ci = 0; ci < c; ++ci)
            for (int bi = 0; bi < b; ++bi) {
              const std::int64_t off = (static_cast<std::int64_t>(bi) * c + ci) * hw;
              dgamma[ci] += (n.grad.segment(off, hw) * xhat->segment(off, hw)).sum();
              dbeta[ci] += n.grad.segment(off, hw).sum();
            }
          n.parents[1]->accumulate(dgamma);
          if (n.parents[2]->requires_grad) n.parents[2]->accumulate(dbeta);
        }
      },
      "batch_norm");
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, int factor) {
  check_shape(x.ndim() == 4 && factor >= 1, "upsample_nearest expects [b,c,h,w]");
  const int b = x.dim(0), c = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = H * factor, OW = W * factor;
  VecX<Scalar> v(static_cast<std::int64_t>(b) * c * OH * OW);
  for (int p = 0; p < b * c; ++p) {
    const Scalar* src = x.data().data() + static_cast<std::int64_t>(p) * H * W;
    Scalar* dst = v.data() + static_cast<std::int64_t>(p) * OH * OW;
    for (int i = 0; i < OH; ++i)
      for (int j = 0; j < OW; ++j) dst[i * OW + j] = src[(i / factor) * W + (j / factor)];
  }
  return Tensor<Scalar>::op(
      {b, c, OH, OW}, std::move(v), {x},
      [b, c, H, W, factor, OH, OW](detail::Node<Scalar>& n) {
        VecX<Scalar> g = VecX<Scalar>::Zero(static_cast<std::int64_t>(b) * c * H * W);
        for (int p = 0; p < b * c; ++p) {
          const Scalar* src = n.grad.data() + static_cast<std::int64_t>(p) * OH * OW;
          Scalar* dst = g.data() + static_cast<std::int64_t>(p) * H * W;
          for (int i = 0; i < OH; ++i)
            for (int j = 0; j < OW; ++j) dst[(i / factor) * W + (j / factor)] += src[i * OW + j];
        }
        n.parents[0]->accumulate(g);
      },
      "upsample_nearest");
}

}  // namespace hyperprune
