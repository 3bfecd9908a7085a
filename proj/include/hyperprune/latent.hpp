#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hyperprune/mask.hpp"
#include "hyperprune/tensor.hpp"

namespace hyperprune {

/// Per-layer trainable vector whose length equals the governed
/// output-channel count. Sparsifying it prunes those channels.
template <typename Scalar>
struct LatentVector {
  std::string layer_id;
  Tensor<Scalar> values;
  bool prunable = true;

  int size() const { return static_cast<int>(values.size()); }
};

/// Elementwise sign(v) * max(|v| - t, 0); the proximal operator of t*|.|_1.
template <typename Scalar>
Tensor<Scalar> soft_threshold(const Tensor<Scalar>& v, Scalar t) {
  if (!(t >= Scalar(0))) throw std::invalid_argument("soft_threshold: t must be >= 0");
  Tensor<Scalar> out = Tensor<Scalar>::leaf(v.shape(), false);
  out.data() = v.data().sign() * (v.data().abs() - t).max(Scalar(0));
  return out;
}

/// Proximal gradient step on a latent: gradient descent followed by soft
/// thresholding with lr*lambda. Non-prunable latents take the plain step.
template <typename Scalar>
void proximal_update(LatentVector<Scalar>& v, const Tensor<Scalar>& grad, Scalar lr,
                     Scalar lambda) {
  check_shape(same_shape(v.values.shape(), grad.shape()),
              "proximal_update: grad shape " + shape_str(grad.shape()) + " vs latent " +
                  shape_str(v.values.shape()));
  if (!(lr > Scalar(0))) throw std::invalid_argument("proximal_update: lr must be > 0");
  if (!(lambda >= Scalar(0)))
    throw std::invalid_argument("proximal_update: lambda must be >= 0");
  VecX<Scalar> stepped = v.values.data() - lr * grad.data();
  if (v.prunable) {
    const Scalar t = lr * lambda;
    v.values.data() = stepped.sign() * (stepped.abs() - t).max(Scalar(0));
  } else {
    v.values.data() = stepped;
  }
}

/// Threshold |v_i| > tau into keep bits. A layer is never pruned to zero
/// channels: if nothing clears tau, the largest-magnitude element stays.
template <typename Scalar>
Mask compute_mask(const LatentVector<Scalar>& v, Scalar tau) {
  if (!(tau > Scalar(0))) throw std::invalid_argument("compute_mask: tau must be > 0");
  Mask m;
  m.latent_id = v.layer_id;
  m.bits.resize(static_cast<size_t>(v.size()), 0);
  bool any = false;
  for (int i = 0; i < v.size(); ++i) {
    if (std::abs(v.values.data()[i]) > tau) {
      m.bits[static_cast<size_t>(i)] = 1;
      any = true;
    }
  }
  if (!any && v.size() > 0) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i)
      if (std::abs(v.values.data()[i]) > std::abs(v.values.data()[best])) best = i;
    m.bits[static_cast<size_t>(best)] = 1;
  }
  return m;
}

struct LayerSparsity {
  std::string layer_id;
  int kept = 0;
  int total = 0;
};

template <typename Scalar>
std::vector<LayerSparsity> sparsity_report(const std::vector<LatentVector<Scalar>>& latents,
                                           Scalar tau) {
  std::vector<LayerSparsity> rows;
  rows.reserve(latents.size());
  for (const auto& v : latents) {
    const Mask m = compute_mask(v, tau);
    rows.push_back({v.layer_id, m.popcount(), v.size()});
  }
  return rows;
}

}  // namespace hyperprune
