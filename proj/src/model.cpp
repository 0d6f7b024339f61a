#include "scgan/model.hpp"

#include <algorithm>
#include <random>

#include "scgan/data.hpp"

namespace scgan {

using nn::Tensor;

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::None: return "none";
    case AttentionMode::DecoderOnly: return "decoder_only";
    case AttentionMode::EncoderAndDecoder: return "encoder_and_decoder";
  }
  return "none";
}

AttentionMode parse_attention_mode(const std::string& name) {
  if (name == "none") return AttentionMode::None;
  if (name == "decoder_only") return AttentionMode::DecoderOnly;
  if (name == "encoder_and_decoder") return AttentionMode::EncoderAndDecoder;
  throw std::invalid_argument("unknown attention_mode \"" + name + "\"");
}

void GeneratorConfig::validate() const {
  if (base_channels < 8) throw std::invalid_argument("generator base_channels must be >= 8");
  if (n_downsample < 0 || n_downsample > 6) throw std::invalid_argument("generator n_downsample must be in [0,6]");
  if (n_res_blocks < 0) throw std::invalid_argument("generator n_res_blocks must be >= 0");
  if (image_size <= 0 || image_size % (1 << n_downsample) != 0)
    throw std::invalid_argument("generator image_size must be divisible by 2^n_downsample");
  // Reflect padding of 3 at full resolution and 1 in the trunk.
  if (image_size < 4 || (image_size >> n_downsample) < 2)
    throw std::invalid_argument("generator image_size too small for the configured depth");
  if (attention.key_channels < 0) throw std::invalid_argument("attention key_channels must be >= 1");
}

void DiscriminatorConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("discriminator n_layers must be >= 1");
  if (base_channels < 1) throw std::invalid_argument("discriminator base_channels must be >= 1");
}

int discriminator_output_size(const DiscriminatorConfig& config, int input_size) {
  config.validate();
  auto conv = [](int n, int stride) { return n < 2 ? 0 : (n + 2 - 4) / stride + 1; };
  int n = input_size;
  for (int i = 0; i < config.n_layers && n > 0; ++i) n = conv(n, 2);
  if (n > 0) n = conv(n, 1);
  if (n > 0) n = conv(n, 1);
  return std::max(n, 0);
}

void to_json(nlohmann::json& j, const AttentionConfig& c) {
  j = {{"key_channels", c.key_channels}, {"gamma_init", c.gamma_init}};
}
void from_json(const nlohmann::json& j, AttentionConfig& c) {
  c.key_channels = j.value("key_channels", c.key_channels);
  c.gamma_init = j.value("gamma_init", c.gamma_init);
}
void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"image_size", c.image_size},
       {"base_channels", c.base_channels},
       {"n_downsample", c.n_downsample},
       {"n_res_blocks", c.n_res_blocks},
       {"attention_mode", to_string(c.attention_mode)},
       {"use_structure_channel", c.use_structure_channel},
       {"attention", c.attention}};
}
void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.n_downsample = j.value("n_downsample", c.n_downsample);
  c.n_res_blocks = j.value("n_res_blocks", c.n_res_blocks);
  if (j.contains("attention_mode")) c.attention_mode = parse_attention_mode(j.at("attention_mode").get<std::string>());
  c.use_structure_channel = j.value("use_structure_channel", c.use_structure_channel);
  if (j.contains("attention")) c.attention = j.at("attention").get<AttentionConfig>();
}
void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = {{"base_channels", c.base_channels}, {"n_layers", c.n_layers}};
}
void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  c.base_channels = j.value("base_channels", c.base_channels);
  c.n_layers = j.value("n_layers", c.n_layers);
}

// --- ParamMap ---------------------------------------------------------------

template <typename T>
void ParamMap<T>::add(const std::string& name, Tensor<T> tensor) {
  if (!index_.emplace(name, names_.size()).second)
    throw std::invalid_argument("duplicate parameter name " + name);
  names_.push_back(name);
  tensors_.push_back(std::move(tensor));
}

template <typename T>
const Tensor<T>& ParamMap<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return tensors_[it->second];
}

template <typename T>
Tensor<T>& ParamMap<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return tensors_[it->second];
}

template <typename T>
std::size_t ParamMap<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

template <typename T>
void ParamMap<T>::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

template <typename T>
bool ParamMap<T>::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(), [](const Tensor<T>& t) { return nn::all_finite(t.data()); });
}

template <typename T>
ParamMap<T> ParamMap<T>::clone() const {
  ParamMap out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].clone());
  return out;
}

template class ParamMap<float>;
template class ParamMap<double>;

// --- initialization -----------------------------------------------------------

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Each tensor draws from its own stream so adding or removing a block does not
// perturb the initial values of the others.
template <typename T>
class Initializer {
 public:
  Initializer(ParamMap<T>& params, std::uint64_t seed) : params_(params), seed_(seed) {}

  void normal(const std::string& name, nn::Shape shape, double stddev = 0.02) {
    std::mt19937_64 rng(mix_seed(seed_, fnv1a(name)));
    std::normal_distribution<float> dist(0.0f, static_cast<float>(stddev));
    std::vector<T> v(nn::numel(shape));
    for (T& x : v) x = static_cast<T>(dist(rng));
    params_.add(name, Tensor<T>::parameter(std::move(shape), std::move(v)));
  }
  void fill(const std::string& name, nn::Shape shape, double value) {
    std::vector<T> v(nn::numel(shape), static_cast<T>(value));
    params_.add(name, Tensor<T>::parameter(std::move(shape), std::move(v)));
  }
  void conv(const std::string& name, int out, int in, int k, bool bias) {
    normal(name + ".w", {out, in, k, k});
    if (bias) fill(name + ".b", {out}, 0.0);
  }
  void norm(const std::string& name, int channels) {
    fill(name + ".g", {channels}, 1.0);
    fill(name + ".b", {channels}, 0.0);
  }
  void attention(const std::string& name, int channels, const AttentionConfig& cfg) {
    const int ck = cfg.keys_for(channels);
    normal(name + ".q.w", {ck, channels});
    fill(name + ".q.b", {ck}, 0.0);
    normal(name + ".k.w", {ck, channels});
    fill(name + ".k.b", {ck}, 0.0);
    normal(name + ".v.w", {channels, channels});
    fill(name + ".v.b", {channels}, 0.0);
    fill(name + ".gamma", {1}, cfg.gamma_init);
  }

 private:
  ParamMap<T>& params_;
  std::uint64_t seed_;
};

template <typename T>
class Layers {
 public:
  explicit Layers(const ParamMap<T>& p) : p_(p) {}

  Tensor<T> conv(const std::string& name, const Tensor<T>& x, int stride, int pad, bool bias = false) const {
    return nn::conv2d(x, p_.at(name + ".w"), bias ? p_.at(name + ".b") : Tensor<T>{}, stride, pad);
  }
  Tensor<T> norm(const std::string& name, const Tensor<T>& x) const {
    return nn::instance_norm(x, p_.at(name + ".g"), p_.at(name + ".b"));
  }

 private:
  const ParamMap<T>& p_;
};

std::string idx(const char* stem, int i) { return stem + std::to_string(i); }

}  // namespace

template <typename T>
ParamMap<T> init_attention(int channels, const AttentionConfig& config, std::uint64_t seed, const std::string& prefix) {
  if (channels < 1) throw std::invalid_argument("attention channels must be >= 1");
  ParamMap<T> params;
  Initializer<T>(params, seed).attention(prefix, channels, config);
  return params;
}

template <typename T>
GeneratorParams<T> init_generator(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  GeneratorParams<T> model{config, {}};
  Initializer<T> init(model.params, seed);
  int c = config.base_channels;
  init.conv("stem.conv", c, config.input_channels(), 7, false);
  init.norm("stem.norm", c);
  for (int i = 0; i < config.n_downsample; ++i) {
    const std::string name = idx("down", i);
    init.conv(name + ".conv", 2 * c, c, 3, false);
    init.norm(name + ".norm", 2 * c);
    c *= 2;
    if (config.encoder_attention()) init.attention(name + ".attn", c, config.attention);
  }
  for (int j = 0; j < config.n_res_blocks; ++j) {
    const std::string name = idx("res", j);
    init.conv(name + ".conv1", c, c, 3, false);
    init.norm(name + ".norm1", c);
    init.conv(name + ".conv2", c, c, 3, false);
    init.norm(name + ".norm2", c);
  }
  for (int i = 0; i < config.n_downsample; ++i) {
    const std::string name = idx("up", i);
    init.conv(name + ".conv", c / 2, c, 3, false);
    init.norm(name + ".norm", c / 2);
    c /= 2;
    if (config.decoder_attention()) init.attention(name + ".attn", c, config.attention);
  }
  init.conv("head_rgb", 3, c, 7, true);
  init.conv("head_edge", 1, c, 7, true);
  return model;
}

template <typename T>
DiscriminatorParams<T> init_discriminator(const DiscriminatorConfig& config, std::uint64_t seed) {
  config.validate();
  DiscriminatorParams<T> model{config, {}};
  Initializer<T> init(model.params, seed);
  auto width = [&](int i) { return config.base_channels * std::min(1 << std::min(i, 3), 8); };
  init.conv("layer0.conv", width(0), 3, 4, true);
  for (int i = 1; i <= config.n_layers; ++i) {
    const std::string name = idx("layer", i);
    init.conv(name + ".conv", width(i), width(i - 1), 4, false);
    init.norm(name + ".norm", width(i));
  }
  init.conv("final.conv", 1, width(config.n_layers), 4, true);
  return model;
}

template <typename T>
Tensor<T> attention_forward(const ParamMap<T>& p, const std::string& prefix, const Tensor<T>& features,
                            std::vector<T>* weights) {
  const nn::AttentionWeights<T> w{p.at(prefix + ".q.w"), p.at(prefix + ".q.b"), p.at(prefix + ".k.w"),
                                  p.at(prefix + ".k.b"), p.at(prefix + ".v.w"), p.at(prefix + ".v.b"),
                                  p.at(prefix + ".gamma")};
  return nn::self_attention(features, w, weights);
}

template <typename T>
GeneratorOutput<T> generator_forward(const GeneratorParams<T>& model, const Tensor<T>& input4) {
  const GeneratorConfig& cfg = model.config;
  if (input4.rank() != 4 || input4.dim(1) != 4 || input4.dim(2) != cfg.image_size || input4.dim(3) != cfg.image_size)
    throw nn::ShapeError("generator expects [N,4," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "] input, got " + nn::to_string(input4.shape()));
  const Layers<T> L(model.params);
  Tensor<T> h = cfg.use_structure_channel ? input4 : nn::slice_channels(input4, 0, 3);

  h = nn::relu(L.norm("stem.norm", L.conv("stem.conv", nn::reflect_pad(h, 3), 1, 0)));
  for (int i = 0; i < cfg.n_downsample; ++i) {
    const std::string name = idx("down", i);
    h = nn::relu(L.norm(name + ".norm", L.conv(name + ".conv", h, 2, 1)));
    if (cfg.encoder_attention()) h = attention_forward(model.params, name + ".attn", h);
  }
  for (int j = 0; j < cfg.n_res_blocks; ++j) {
    const std::string name = idx("res", j);
    Tensor<T> r = nn::relu(L.norm(name + ".norm1", L.conv(name + ".conv1", nn::reflect_pad(h, 1), 1, 0)));
    r = L.norm(name + ".norm2", L.conv(name + ".conv2", nn::reflect_pad(r, 1), 1, 0));
    h = nn::add(h, r);
  }
  for (int i = 0; i < cfg.n_downsample; ++i) {
    const std::string name = idx("up", i);
    h = nn::upsample_nearest2x(h);
    h = nn::relu(L.norm(name + ".norm", L.conv(name + ".conv", nn::reflect_pad(h, 1), 1, 0)));
    if (cfg.decoder_attention()) h = attention_forward(model.params, name + ".attn", h);
  }
  const Tensor<T> padded = nn::reflect_pad(h, 3);
  GeneratorOutput<T> out{nn::tanh(L.conv("head_rgb", padded, 1, 0, true)),
                         nn::sigmoid(L.conv("head_edge", padded, 1, 0, true))};
  if (!nn::all_finite(out.rgb.data()) || !nn::all_finite(out.edge.data()))
    throw DivergenceError("generator produced non-finite activations");
  return out;
}

template <typename T>
Tensor<T> discriminator_forward(const DiscriminatorParams<T>& model, const Tensor<T>& rgb) {
  const DiscriminatorConfig& cfg = model.config;
  if (rgb.rank() != 4 || rgb.dim(1) != 3)
    throw nn::ShapeError("discriminator expects [N,3,H,W] input, got " + nn::to_string(rgb.shape()));
  if (discriminator_output_size(cfg, std::min(rgb.dim(2), rgb.dim(3))) < 1)
    throw nn::ShapeError("discriminator input " + std::to_string(rgb.dim(2)) + "x" + std::to_string(rgb.dim(3)) +
                         " is smaller than the receptive-field minimum");
  const Layers<T> L(model.params);
  constexpr double kSlope = 0.2;
  Tensor<T> h = nn::leaky_relu(L.conv("layer0.conv", rgb, 2, 1, true), kSlope);
  for (int i = 1; i <= cfg.n_layers; ++i) {
    const std::string name = idx("layer", i);
    const int stride = i < cfg.n_layers ? 2 : 1;
    h = nn::leaky_relu(L.norm(name + ".norm", L.conv(name + ".conv", h, stride, 1)), kSlope);
  }
  return L.conv("final.conv", h, 1, 1, true);
}

// --- packing --------------------------------------------------------------------

template <typename T>
Tensor<T> pack_rgb(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("pack_rgb: no images");
  const int h = images[0]->height, w = images[0]->width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> v(images.size() * 3 * plane);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.channels != 3 || img.height != h || img.width != w)
      throw nn::ShapeError("pack_rgb: images must share one RGB size");
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        v[(n * 3 + c) * plane + i] = static_cast<T>(2.0 * img.data[i * 3 + c] - 1.0);
  }
  return Tensor<T>::constant({static_cast<int>(images.size()), 3, h, w}, std::move(v));
}

template <typename T>
Tensor<T> pack_edges(const std::vector<const EdgeMap*>& edges) {
  if (edges.empty()) throw std::invalid_argument("pack_edges: no edge maps");
  const int h = edges[0]->height(), w = edges[0]->width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> v(edges.size() * plane);
  for (std::size_t n = 0; n < edges.size(); ++n) {
    if (edges[n]->height() != h || edges[n]->width() != w) throw nn::ShapeError("pack_edges: size mismatch");
    std::copy(edges[n]->values.data.begin(), edges[n]->values.data.end(), v.begin() + n * plane);
  }
  return Tensor<T>::constant({static_cast<int>(edges.size()), 1, h, w}, std::move(v));
}

std::vector<Image> unpack_rgb(const Tensor<float>& rgb) {
  if (rgb.rank() != 4 || rgb.dim(1) != 3) throw nn::ShapeError("unpack_rgb expects [N,3,H,W]");
  const int n = rgb.dim(0), h = rgb.dim(2), w = rgb.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto d = rgb.data();
  std::vector<Image> out;
  for (int s = 0; s < n; ++s) {
    Image img(h, w, 3);
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        img.data[i * 3 + c] = std::clamp((d[(s * 3 + c) * plane + i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<EdgeMap> unpack_edges(const Tensor<float>& edges) {
  if (edges.rank() != 4 || edges.dim(1) != 1) throw nn::ShapeError("unpack_edges expects [N,1,H,W]");
  const int n = edges.dim(0), h = edges.dim(2), w = edges.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto d = edges.data();
  std::vector<EdgeMap> out;
  for (int s = 0; s < n; ++s) {
    EdgeMap e{Image(h, w, 1)};
    for (std::size_t i = 0; i < plane; ++i) e.values.data[i] = std::clamp(d[s * plane + i], 0.0f, 1.0f);
    out.push_back(std::move(e));
  }
  return out;
}

#define SCGAN_INSTANTIATE_MODEL(T)                                                                          \
  template ParamMap<T> init_attention<T>(int, const AttentionConfig&, std::uint64_t, const std::string&);  \
  template GeneratorParams<T> init_generator<T>(const GeneratorConfig&, std::uint64_t);                    \
  template DiscriminatorParams<T> init_discriminator<T>(const DiscriminatorConfig&, std::uint64_t);        \
  template Tensor<T> attention_forward<T>(const ParamMap<T>&, const std::string&, const Tensor<T>&,        \
                                          std::vector<T>*);                                                 \
  template GeneratorOutput<T> generator_forward<T>(const GeneratorParams<T>&, const Tensor<T>&);           \
  template Tensor<T> discriminator_forward<T>(const DiscriminatorParams<T>&, const Tensor<T>&);            \
  template Tensor<T> pack_rgb<T>(const std::vector<const Image*>&);                                         \
  template Tensor<T> pack_edges<T>(const std::vector<const EdgeMap*>&);

SCGAN_INSTANTIATE_MODEL(float)
SCGAN_INSTANTIATE_MODEL(double)

}  // namespace scgan
