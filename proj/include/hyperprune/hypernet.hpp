#pragma once

#include <string>
#include <vector>

#include "hyperprune/latent.hpp"
#include "hyperprune/ops.hpp"
#include "hyperprune/tensor.hpp"

namespace hyperprune {

/// Per-layer weight generator parameters. For a conv-like layer with n output
/// channels, c input channels and a w*h kernel, the three stages map a pair
/// of latent vectors to the layer's kernel tensor:
///   V = v_l v_prev^T + B0                  [n,c]
///   S[i,j,:] = V[i,j] W1[i,j,:] + B1[i,j,:]  [n,c,m]
///   F[i,j,:] = W2[i,j,:,:] S[i,j,:] + B2[i,j,:]  [n,c,w*h]
/// Parameter count per layer: n*c*(1 + 2m + w*h*m + w*h).
template <typename Scalar>
struct HyperParams {
  Tensor<Scalar> B0;  // [n,c]
  Tensor<Scalar> W1;  // [n,c,m]
  Tensor<Scalar> B1;  // [n,c,m]
  Tensor<Scalar> W2;  // [n,c,w*h,m]
  Tensor<Scalar> B2;  // [n,c,w*h]
  int n = 0, c = 0, kw = 0, kh = 0, m = 0;

  std::vector<Tensor<Scalar>> all() const { return {B0, W1, B1, W2, B2}; }
};

inline std::int64_t hyper_param_count(int n, int c, int kw, int kh, int m) {
  const std::int64_t wh = static_cast<std::int64_t>(kw) * kh;
  return static_cast<std::int64_t>(n) * c * (1 + 2 * m + wh * m + wh);
}

/// V = v_l v_prev^T + B0.
template <typename Scalar>
Tensor<Scalar> latent_matrix(const Tensor<Scalar>& v_l, const Tensor<Scalar>& v_prev,
                             const Tensor<Scalar>& B0) {
  check_shape(v_l.ndim() == 1 && v_prev.ndim() == 1 && B0.ndim() == 2,
              "latent_matrix: expects vectors and a matrix");
  const int n = v_l.dim(0), c = v_prev.dim(0);
  check_shape(B0.dim(0) == n && B0.dim(1) == c,
              "latent_matrix: B0 " + shape_str(B0.shape()) + " vs outer product [" +
                  std::to_string(n) + "x" + std::to_string(c) + "]");
  VecX<Scalar> v(static_cast<std::int64_t>(n) * c);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      v[static_cast<std::int64_t>(i) * c + j] =
          v_l.data()[i] * v_prev.data()[j] + B0.data()[static_cast<std::int64_t>(i) * c + j];
  return Tensor<Scalar>::op(
      {n, c}, std::move(v), {v_l, v_prev, B0},
      [n, c](detail::TensorNode<Scalar>& nd) {
        auto& pl = *nd.parents[0];
        auto& pp = *nd.parents[1];
        auto& pb = *nd.parents[2];
        ConstMatMap<Scalar> G(nd.grad.data(), n, c);
        if (pl.requires_grad) {
          VecX<Scalar> g(n);
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(g.data(), n).noalias() =
              G * Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
                      pp.value.data(), c);
          pl.accumulate(g);
        }
        if (pp.requires_grad) {
          VecX<Scalar> g(c);
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(g.data(), c).noalias() =
              G.transpose() *
              Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(pl.value.data(),
                                                                         n);
          pp.accumulate(g);
        }
        if (pb.requires_grad) pb.accumulate(nd.grad);
      },
      "latent_matrix");
}

/// S[i,j,:] = V[i,j] * W1[i,j,:] + B1[i,j,:]; per-element parameters.
template <typename Scalar>
Tensor<Scalar> embed(const Tensor<Scalar>& V, const Tensor<Scalar>& W1,
                     const Tensor<Scalar>& B1) {
  check_shape(V.ndim() == 2 && W1.ndim() == 3 && B1.ndim() == 3,
              "embed: expects [n,c], [n,c,m], [n,c,m]");
  const int n = V.dim(0), c = V.dim(1), m = W1.dim(2);
  check_shape(W1.dim(0) == n && W1.dim(1) == c && same_shape(W1.shape(), B1.shape()),
              "embed: parameter shapes inconsistent with latent matrix");
  VecX<Scalar> v(static_cast<std::int64_t>(n) * c * m);
  for (std::int64_t e = 0; e < static_cast<std::int64_t>(n) * c; ++e)
    v.segment(e * m, m) = V.data()[e] * W1.data().segment(e * m, m) + B1.data().segment(e * m, m);
  return Tensor<Scalar>::op(
      {n, c, m}, std::move(v), {V, W1, B1},
      [n, c, m](detail::TensorNode<Scalar>& nd) {
        auto& pv = *nd.parents[0];
        auto& pw = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const std::int64_t nc = static_cast<std::int64_t>(n) * c;
        if (pv.requires_grad) {
          VecX<Scalar> g(nc);
          for (std::int64_t e = 0; e < nc; ++e)
            g[e] = (nd.grad.segment(e * m, m) * pw.value.segment(e * m, m)).sum();
          pv.accumulate(g);
        }
        if (pw.requires_grad) {
          VecX<Scalar> g(nc * m);
          for (std::int64_t e = 0; e < nc; ++e)
            g.segment(e * m, m) = nd.grad.segment(e * m, m) * pv.value[e];
          pw.accumulate(g);
        }
        if (pb.requires_grad) pb.accumulate(nd.grad);
      },
      "embed");
}

/// F[i,j,:] = W2[i,j,:,:] S[i,j,:] + B2[i,j,:]; per-element explicit matrices.
template <typename Scalar>
Tensor<Scalar> explicit_out(const Tensor<Scalar>& S, const Tensor<Scalar>& W2,
                            const Tensor<Scalar>& B2) {
  check_shape(S.ndim() == 3 && W2.ndim() == 4 && B2.ndim() == 3,
              "explicit_out: expects [n,c,m], [n,c,wh,m], [n,c,wh]");
  const int n = S.dim(0), c = S.dim(1), m = S.dim(2);
  const int wh = W2.dim(2);
  check_shape(W2.dim(0) == n && W2.dim(1) == c && W2.dim(3) == m && B2.dim(0) == n &&
                  B2.dim(1) == c && B2.dim(2) == wh,
              "explicit_out: parameter shapes inconsistent with embedding");
  VecX<Scalar> v(static_cast<std::int64_t>(n) * c * wh);
  const std::int64_t nc = static_cast<std::int64_t>(n) * c;
  for (std::int64_t e = 0; e < nc; ++e) {
    ConstMatMap<Scalar> Wm(W2.data().data() + e * wh * m, wh, m);
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> out(v.data() + e * wh, wh);
    out.noalias() =
        Wm * Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
                 S.data().data() + e * m, m);
    out += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
        B2.data().data() + e * wh, wh);
  }
  return Tensor<Scalar>::op(
      {n, c, wh}, std::move(v), {S, W2, B2},
      [n, c, m, wh](detail::TensorNode<Scalar>& nd) {
        auto& ps = *nd.parents[0];
        auto& pw = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const std::int64_t nc = static_cast<std::int64_t>(n) * c;
        VecX<Scalar> gs, gw;
        if (ps.requires_grad) gs.resize(nc * m);
        if (pw.requires_grad) gw.resize(nc * wh * m);
        for (std::int64_t e = 0; e < nc; ++e) {
          ConstMatMap<Scalar> Wm(pw.value.data() + e * wh * m, wh, m);
          Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dF(
              nd.grad.data() + e * wh, wh);
          if (ps.requires_grad)
            Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(gs.data() + e * m, m)
                .noalias() = Wm.transpose() * dF;
          if (pw.requires_grad)
            MatMap<Scalar>(gw.data() + e * wh * m, wh, m).noalias() =
                dF * Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
                         ps.value.data() + e * m, m)
                         .transpose();
        }
        if (ps.requires_grad) ps.accumulate(gs);
        if (pw.requires_grad) pw.accumulate(gw);
        if (pb.requires_grad) pb.accumulate(nd.grad);
      },
      "explicit_out");
}

/// Concatenate input-branch latents in feature-map order. Order matters:
/// it must match the channel order of the skip concatenation.
template <typename Scalar>
Tensor<Scalar> concat_skip_latents(const std::vector<LatentVector<Scalar>>& latents) {
  check_shape(latents.size() >= 2, "concat_skip_latents: need at least two branches");
  std::vector<Tensor<Scalar>> vals;
  vals.reserve(latents.size());
  for (const auto& l : latents) vals.push_back(l.values);
  return concat(vals, 0);
}

enum class WeightLayout { conv, conv_transpose };

/// Compose the three stages and bind the result into the layer's kernel
/// layout: [n,c,w,h] for conv; transposed to [c,n,w,h] for conv-transpose,
/// so the producing layer's latent still indexes output channels.
template <typename Scalar>
Tensor<Scalar> generate_weights(const LatentVector<Scalar>& v_l,
                                const Tensor<Scalar>& v_prev_effective,
                                const HyperParams<Scalar>& params, WeightLayout layout) {
  check_shape(v_prev_effective.ndim() == 1 && v_prev_effective.dim(0) == params.c,
              "generate_weights: input latent length " +
                  std::to_string(v_prev_effective.valid() ? v_prev_effective.dim(0) : -1) +
                  " vs layer input channels " + std::to_string(params.c));
  check_shape(v_l.size() == params.n, "generate_weights: latent length vs output channels");
  Tensor<Scalar> V = latent_matrix(v_l.values, v_prev_effective, params.B0);
  Tensor<Scalar> S = embed(V, params.W1, params.B1);
  Tensor<Scalar> F = explicit_out(S, params.W2, params.B2);
  Tensor<Scalar> kernel = reshape(F, {params.n, params.c, params.kh, params.kw});
  if (layout == WeightLayout::conv_transpose) kernel = transpose_first2(kernel);
  return kernel;
}

/// Seeded init. Biases start at zero; W1 and W2 are uniform with the
/// half-width chosen so the generated kernel std matches 1/sqrt(c*w*h)
/// when latents start at all-ones.
template <typename Scalar>
HyperParams<Scalar> init_hyper_params(int n, int c, int kw, int kh, int m,
                                      std::uint64_t seed) {
  check_shape(n > 0 && c > 0 && kw > 0 && kh > 0 && m > 0,
              "init_hyper_params: dimensions must be positive");
  Rng rng(seed);
  const int wh = kw * kh;
  const Scalar a = static_cast<Scalar>(
      std::sqrt(3.0) / std::pow(static_cast<double>(m) * c * wh, 0.25));
  HyperParams<Scalar> p;
  p.n = n;
  p.c = c;
  p.kw = kw;
  p.kh = kh;
  p.m = m;
  p.B0 = Tensor<Scalar>::zeros({n, c}, true);
  p.W1 = Tensor<Scalar>::uniform({n, c, m}, -a, a, rng, true);
  p.B1 = Tensor<Scalar>::zeros({n, c, m}, true);
  p.W2 = Tensor<Scalar>::uniform({n, c, wh, m}, -a, a, rng, true);
  p.B2 = Tensor<Scalar>::zeros({n, c, wh}, true);
  return p;
}

}  // namespace hyperprune
