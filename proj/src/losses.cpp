#include "scgan/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "scgan/nn/ops.hpp"

namespace scgan {

void LossWeights::validate() const {
  for (double l : {lambda1, lambda2, lambda3, lambda4, lambda5})
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("loss weights must be finite and >= 0");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3},
       {"lambda4", w.lambda4}, {"lambda5", w.lambda5}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.lambda1 = j.value("lambda1", w.lambda1);
  w.lambda2 = j.value("lambda2", w.lambda2);
  w.lambda3 = j.value("lambda3", w.lambda3);
  w.lambda4 = j.value("lambda4", w.lambda4);
  w.lambda5 = j.value("lambda5", w.lambda5);
}

template <typename T>
nn::Tensor<T> structural_loss(const nn::Tensor<T>& input_edges, const nn::Tensor<T>& generated_edges) {
  return nn::mean_squared_error(generated_edges, input_edges);
}

template <typename T>
nn::Tensor<T> adversarial_loss(const nn::Tensor<T>& scores, bool target_real) {
  return nn::mean_squared_error_to(scores, target_real ? 1.0 : 0.0);
}

template <typename T>
nn::Tensor<T> cycle_loss(const nn::Tensor<T>& original, const nn::Tensor<T>& reconstructed) {
  return nn::mean_absolute_error(reconstructed, original);
}

template <typename T>
nn::Tensor<T> identity_loss(const nn::Tensor<T>& target, const nn::Tensor<T>& mapped) {
  return nn::mean_absolute_error(mapped, target);
}

template <typename T>
nn::Tensor<T> registered_loss(const nn::Tensor<T>& generated, const nn::Tensor<T>& ground_truth) {
  return nn::mean_absolute_error(generated, ground_truth);
}

double total_loss(const LossReport& c, const LossWeights& w, bool registered_active) {
  for (double v : {c.adv_g, c.cycle_f, c.cycle_b, c.identity, c.structural, c.registered})
    if (!std::isfinite(v)) throw std::invalid_argument("total_loss: non-finite component");
  double total = w.lambda1 * c.adv_g + w.lambda2 * (c.cycle_f + c.cycle_b) + w.lambda3 * c.identity +
                 w.lambda4 * c.structural;
  if (registered_active) total += w.lambda5 * c.registered;
  return total;
}

#define SCGAN_INSTANTIATE_LOSSES(T)                                                          \
  template nn::Tensor<T> structural_loss(const nn::Tensor<T>&, const nn::Tensor<T>&);        \
  template nn::Tensor<T> adversarial_loss(const nn::Tensor<T>&, bool);                       \
  template nn::Tensor<T> cycle_loss(const nn::Tensor<T>&, const nn::Tensor<T>&);             \
  template nn::Tensor<T> identity_loss(const nn::Tensor<T>&, const nn::Tensor<T>&);          \
  template nn::Tensor<T> registered_loss(const nn::Tensor<T>&, const nn::Tensor<T>&);

SCGAN_INSTANTIATE_LOSSES(float)
SCGAN_INSTANTIATE_LOSSES(double)

}  // namespace scgan
