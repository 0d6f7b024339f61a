#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "scgan/image.hpp"
#include "scgan/nn/ops.hpp"
#include "scgan/nn/tensor.hpp"
#include "scgan/structure.hpp"

namespace scgan {

// Raised when activations or losses stop being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AttentionMode { None, DecoderOnly, EncoderAndDecoder };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& name);

struct AttentionConfig {
  int key_channels = 0;  // 0 selects channels / 8 (at least 1)
  double gamma_init = 0.0;

  int keys_for(int channels) const { return key_channels > 0 ? key_channels : std::max(1, channels / 8); }
};

struct GeneratorConfig {
  int image_size = 128;
  int base_channels = 64;
  int n_downsample = 2;
  int n_res_blocks = 6;
  AttentionMode attention_mode = AttentionMode::DecoderOnly;
  bool use_structure_channel = true;
  AttentionConfig attention;

  void validate() const;
  int input_channels() const { return use_structure_channel ? 4 : 3; }
  bool encoder_attention() const { return attention_mode == AttentionMode::EncoderAndDecoder; }
  bool decoder_attention() const { return attention_mode != AttentionMode::None; }
};

struct DiscriminatorConfig {
  int base_channels = 64;
  int n_layers = 3;

  void validate() const;
};

// Spatial size of the patch score map for a square input.
int discriminator_output_size(const DiscriminatorConfig& config, int input_size);

void to_json(nlohmann::json& j, const AttentionConfig& c);
void from_json(const nlohmann::json& j, AttentionConfig& c);
void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);
void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

// Ordered, uniquely named parameter tensors.
template <typename T>
class ParamMap {
 public:
  void add(const std::string& name, nn::Tensor<T> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const nn::Tensor<T>& at(const std::string& name) const;
  nn::Tensor<T>& at(const std::string& name);

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<nn::Tensor<T>>& tensors() const { return tensors_; }
  std::vector<nn::Tensor<T>>& tensors() { return tensors_; }
  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  bool all_finite() const;
  // Independent deep copy.
  ParamMap clone() const;
  template <typename U>
  ParamMap<U> cast() const {
    ParamMap<U> out;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      const auto d = tensors_[i].data();
      out.add(names_[i], nn::Tensor<U>::parameter(tensors_[i].shape(), std::vector<U>(d.begin(), d.end())));
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<nn::Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct GeneratorParams {
  GeneratorConfig config;
  ParamMap<T> params;
};

template <typename T>
struct DiscriminatorParams {
  DiscriminatorConfig config;
  ParamMap<T> params;
};

template <typename T>
struct GeneratorOutput {
  nn::Tensor<T> rgb;   // [N,3,H,W], tanh range
  nn::Tensor<T> edge;  // [N,1,H,W], sigmoid range
};

template <typename T>
GeneratorParams<T> init_generator(const GeneratorConfig& config, std::uint64_t seed);

template <typename T>
DiscriminatorParams<T> init_discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

// Standalone attention block parameters under `prefix` ("q.w", "q.b", ...).
template <typename T>
ParamMap<T> init_attention(int channels, const AttentionConfig& config, std::uint64_t seed,
                           const std::string& prefix = "attn");

// input4: [N,4,H,W] with RGB in [-1,1] and edges in [0,1].
template <typename T>
GeneratorOutput<T> generator_forward(const GeneratorParams<T>& model, const nn::Tensor<T>& input4);

template <typename T>
nn::Tensor<T> attention_forward(const ParamMap<T>& params, const std::string& prefix,
                                const nn::Tensor<T>& features, std::vector<T>* weights = nullptr);

// rgb: [N,3,H,W] in [-1,1]. Returns unbounded scores [N,1,h,w].
template <typename T>
nn::Tensor<T> discriminator_forward(const DiscriminatorParams<T>& model, const nn::Tensor<T>& rgb);

// --- conversions between images and model tensors ---------------------------

// RGB images -> [N,3,H,W] scaled to [-1,1].
template <typename T>
nn::Tensor<T> pack_rgb(const std::vector<const Image*>& images);
// Edge maps -> [N,1,H,W] unchanged.
template <typename T>
nn::Tensor<T> pack_edges(const std::vector<const EdgeMap*>& edges);
// [N,3,H,W] in (-1,1) -> images in [0,1].
std::vector<Image> unpack_rgb(const nn::Tensor<float>& rgb);
std::vector<EdgeMap> unpack_edges(const nn::Tensor<float>& edges);

extern template class ParamMap<float>;
extern template class ParamMap<double>;

}  // namespace scgan
