#pragma once

#include <nlohmann/json.hpp>

#include "scgan/nn/tensor.hpp"

namespace scgan {

struct LossWeights {
  double lambda1 = 1.0;   // adversarial
  double lambda2 = 10.0;  // cycle (forward + backward)
  double lambda3 = 5.0;   // identity
  double lambda4 = 5.0;   // structural
  double lambda5 = 10.0;  // registered

  void validate() const;
};

struct LossReport {
  double adv_g = 0;
  double adv_d = 0;
  double cycle_f = 0;
  double cycle_b = 0;
  double identity = 0;
  double structural = 0;
  double registered = 0;
  double total = 0;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// Mean squared difference between source edges and the predicted edge head.
template <typename T>
nn::Tensor<T> structural_loss(const nn::Tensor<T>& input_edges, const nn::Tensor<T>& generated_edges);

// Least-squares adversarial loss: mean (score - t)^2, t = 1 for real.
template <typename T>
nn::Tensor<T> adversarial_loss(const nn::Tensor<T>& scores, bool target_real);

// Mean absolute difference over every element (all channels weighted equally).
template <typename T>
nn::Tensor<T> cycle_loss(const nn::Tensor<T>& original, const nn::Tensor<T>& reconstructed);
template <typename T>
nn::Tensor<T> identity_loss(const nn::Tensor<T>& target, const nn::Tensor<T>& mapped);
template <typename T>
nn::Tensor<T> registered_loss(const nn::Tensor<T>& generated, const nn::Tensor<T>& ground_truth);

// l1*adv_g + l2*(cycle_f + cycle_b) + l3*identity + l4*structural
// (+ l5*registered when registered supervision is active).
double total_loss(const LossReport& components, const LossWeights& weights, bool registered_active);

}  // namespace scgan
