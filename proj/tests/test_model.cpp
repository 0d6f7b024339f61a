#include <doctest.h>

#include <cmath>

#include "scgan/model.hpp"
#include "support.hpp"

using namespace scgan;
using nn::Tensor;

namespace {

GeneratorConfig tiny_generator(AttentionMode mode = AttentionMode::DecoderOnly) {
  GeneratorConfig g;
  g.image_size = 16;
  g.base_channels = 8;
  g.n_downsample = 2;
  g.n_res_blocks = 1;
  g.attention_mode = mode;
  return g;
}

template <typename T>
Tensor<T> random_input(test::Rng& rng, int n, int size) {
  std::vector<T> v(static_cast<std::size_t>(n) * 4 * size * size);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int s = 0; s < n; ++s)
    for (int c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        v[(s * 4 + c) * plane + i] = c < 3 ? T(test::uniform(rng, -1, 1)) : T(test::uniform(rng) < 0.2);
  return Tensor<T>::constant({n, 4, size, size}, std::move(v));
}

// Independent parameter count from the layer list.
std::size_t expected_generator_params(const GeneratorConfig& g) {
  auto attn = [&](std::size_t c) {
    const std::size_t k = g.attention.key_channels > 0 ? g.attention.key_channels : std::max<std::size_t>(1, c / 8);
    return 2 * (k * c + k) + c * c + c + 1;
  };
  std::size_t n = 0, c = g.base_channels;
  n += c * g.input_channels() * 49 + 2 * c;
  for (int i = 0; i < g.n_downsample; ++i) {
    n += 2 * c * c * 9 + 4 * c;
    c *= 2;
    if (g.attention_mode == AttentionMode::EncoderAndDecoder) n += attn(c);
  }
  n += g.n_res_blocks * 2 * (c * c * 9 + 2 * c);
  for (int i = 0; i < g.n_downsample; ++i) {
    n += (c / 2) * c * 9 + c;
    c /= 2;
    if (g.attention_mode != AttentionMode::None) n += attn(c);
  }
  n += 3 * c * 49 + 3 + c * 49 + 1;
  return n;
}

std::size_t expected_discriminator_params(const DiscriminatorConfig& d) {
  std::vector<std::size_t> w;
  for (int i = 0; i <= d.n_layers; ++i) w.push_back(d.base_channels * std::min(1 << i, 8));
  std::size_t n = w[0] * 3 * 16 + w[0];
  for (int i = 1; i <= d.n_layers; ++i) n += w[i] * w[i - 1] * 16 + 2 * w[i];
  return n + w.back() * 16 + 1;
}

// Output extent of a k=4, pad=1 convolution stack.
int oracle_patch_size(int size, int n_layers) {
  auto conv = [](int n, int stride) { return (n + 2 - 4) / stride + 1; };
  int s = conv(size, 2);
  for (int i = 1; i <= n_layers; ++i) s = conv(s, i < n_layers ? 2 : 1);
  return conv(s, 1);
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("initialization is deterministic") {
    const GeneratorConfig g;
    const auto a = init_generator<float>(g, 0), b = init_generator<float>(g, 0);
    REQUIRE(a.params.names() == b.params.names());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      const auto x = a.params.tensors()[i].data(), y = b.params.tensors()[i].data();
      REQUIRE(std::equal(x.begin(), x.end(), y.begin(), y.end()));
    }
    const auto c = init_generator<float>(g, 1);
    CHECK_FALSE(std::equal(a.params.at("stem.conv.w").data().begin(), a.params.at("stem.conv.w").data().end(),
                           c.params.at("stem.conv.w").data().begin()));
  }

  TEST_CASE("attention placement and gamma init") {
    auto count_blocks = [](const ParamMap<float>& p, const std::string& stage) {
      int n = 0;
      for (const auto& name : p.names())
        if (name.ends_with(".attn.gamma") && name.starts_with(stage)) ++n;
      return n;
    };
    for (int n_down : {1, 2, 3}) {
      GeneratorConfig g;
      g.n_downsample = n_down;
      g.image_size = 64;
      g.base_channels = 8;
      const auto dec = init_generator<float>(g, 0);
      CHECK(count_blocks(dec.params, "up") == n_down);
      CHECK(count_blocks(dec.params, "down") == 0);
      g.attention_mode = AttentionMode::EncoderAndDecoder;
      const auto ed = init_generator<float>(g, 0);
      CHECK(count_blocks(ed.params, "up") == n_down);
      CHECK(count_blocks(ed.params, "down") == n_down);
      for (const auto& name : ed.params.names())
        if (name.ends_with(".gamma")) CHECK(ed.params.at(name).item() == 0.0f);
      g.attention_mode = AttentionMode::None;
      CHECK(count_blocks(init_generator<float>(g, 0).params, "") == 0);
    }
  }

  TEST_CASE("parameter count matches layer formula") {
    test::Rng rng(4);
    for (int iter = 0; iter < 12; ++iter) {
      GeneratorConfig g;
      g.base_channels = 8 * test::uniform_int(rng, 1, 3);
      g.n_downsample = test::uniform_int(rng, 1, 3);
      g.image_size = 8 << g.n_downsample;
      g.n_res_blocks = test::uniform_int(rng, 0, 3);
      g.attention_mode = static_cast<AttentionMode>(test::uniform_int(rng, 0, 2));
      g.use_structure_channel = test::uniform(rng) < 0.5;
      if (test::uniform(rng) < 0.3) g.attention.key_channels = test::uniform_int(rng, 1, 5);
      CHECK(init_generator<float>(g, 0).params.scalar_count() == expected_generator_params(g));

      DiscriminatorConfig d;
      d.base_channels = 8 * test::uniform_int(rng, 1, 4);
      d.n_layers = test::uniform_int(rng, 1, 5);
      CHECK(init_discriminator<float>(d, 0).params.scalar_count() == expected_discriminator_params(d));
    }
  }

  TEST_CASE("generator shapes and ranges") {
    test::Rng rng(6);
    GeneratorConfig g;
    g.image_size = 64;
    g.base_channels = 8;
    g.n_res_blocks = 2;
    auto model = init_generator<float>(g, 3);
    for (const auto& name : model.params.names())
      if (name.ends_with(".gamma")) model.params.at(name).mutable_data()[0] = 0.7f;
    const auto out = generator_forward(model, random_input<float>(rng, 2, 64));
    CHECK(out.rgb.shape() == nn::Shape{2, 3, 64, 64});
    CHECK(out.edge.shape() == nn::Shape{2, 1, 64, 64});
    for (float v : out.rgb.data()) REQUIRE((v > -1.0f && v < 1.0f));
    for (float v : out.edge.data()) REQUIRE((v > 0.0f && v < 1.0f));
    CHECK_THROWS_AS(generator_forward(model, random_input<float>(rng, 1, 32)), nn::ShapeError);
  }

  TEST_CASE("samples in a batch do not interact") {
    test::Rng rng(8);
    const auto model = init_generator<float>(tiny_generator(), 1);
    const auto one = random_input<float>(rng, 1, 16);
    std::vector<float> twice(one.data().begin(), one.data().end());
    twice.insert(twice.end(), one.data().begin(), one.data().end());
    const auto out = generator_forward(model, Tensor<float>::constant({2, 4, 16, 16}, twice));
    const auto d = out.rgb.data();
    const std::size_t half = d.size() / 2;
    for (std::size_t i = 0; i < half; ++i) REQUIRE(d[i] == d[half + i]);
  }

  TEST_CASE("zero gamma attention equals the attention-free network") {
    test::Rng rng(12);
    for (AttentionMode mode : {AttentionMode::DecoderOnly, AttentionMode::EncoderAndDecoder}) {
      GeneratorConfig g = tiny_generator(mode);
      g.image_size = 32;
      const auto with_attention = init_generator<float>(g, 5);
      GeneratorParams<float> without = with_attention;
      without.config.attention_mode = AttentionMode::None;
      const auto x = random_input<float>(rng, 2, 32);
      const auto a = generator_forward(with_attention, x), b = generator_forward(without, x);
      double worst = 0;
      for (std::size_t i = 0; i < a.rgb.size(); ++i) worst = std::max<double>(worst, std::fabs(a.rgb.data()[i] - b.rgb.data()[i]));
      for (std::size_t i = 0; i < a.edge.size(); ++i)
        worst = std::max<double>(worst, std::fabs(a.edge.data()[i] - b.edge.data()[i]));
      CHECK(worst <= 1e-6);
    }
  }

  TEST_CASE("attention block closed forms") {
    test::Rng rng(21);
    AttentionConfig cfg;
    auto p = init_attention<double>(6, cfg, 3);
    const auto x = test::random_tensor<double>(rng, {2, 6, 5, 4}, -1, 1);
    SUBCASE("gamma zero is the identity") {
      const auto y = attention_forward(p, "attn", x);
      for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
    }
    SUBCASE("rows of the attention matrix sum to one") {
      p.at("attn.gamma").mutable_data()[0] = 0.3;
      std::vector<double> w;
      attention_forward(p, "attn", x, &w);
      const int positions = 20;
      REQUIRE(w.size() == std::size_t(2 * positions * positions));
      for (int row = 0; row < 2 * positions; ++row) {
        double s = 0;
        for (int c = 0; c < positions; ++c) s += w[row * positions + c];
        REQUIRE(std::fabs(s - 1.0) <= 1e-6);
      }
    }
    SUBCASE("single position adds the value projection") {
      const double gamma = 0.4;
      p.at("attn.gamma").mutable_data()[0] = gamma;
      for (auto& v : p.at("attn.v.b").mutable_data()) v = test::uniform(rng, -0.5, 0.5);
      const auto x1 = test::random_tensor<double>(rng, {1, 6, 1, 1}, -1, 1);
      const auto y = attention_forward(p, "attn", x1);
      const auto wv = p.at("attn.v.w").data(), bv = p.at("attn.v.b").data();
      for (int o = 0; o < 6; ++o) {
        double v = bv[o];
        for (int i = 0; i < 6; ++i) v += wv[o * 6 + i] * x1.data()[i];
        CHECK(y.data()[o] == doctest::Approx(x1.data()[o] + gamma * v).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("discriminator output matches layer arithmetic") {
    test::Rng rng(13);
    const DiscriminatorConfig d;
    CHECK(discriminator_output_size(d, 70) >= 1);
    for (int size : {70, 128, 64, 33}) {
      const int want = oracle_patch_size(size, d.n_layers);
      CHECK(discriminator_output_size(d, size) == want);
    }
    DiscriminatorConfig small;
    small.base_channels = 8;
    const auto model = init_discriminator<float>(small, 2);
    for (int size : {32, 64, 70}) {
      const auto out = discriminator_forward(model, test::random_tensor<float>(rng, {3, 3, size, size}, -1, 1));
      CHECK(out.shape() == nn::Shape{3, 1, oracle_patch_size(size, 3), oracle_patch_size(size, 3)});
    }
    CHECK_THROWS_AS(discriminator_forward(model, test::random_tensor<float>(rng, {1, 3, 8, 8}, -1, 1)),
                    nn::ShapeError);
  }

  TEST_CASE("tiny generator gradients match finite differences") {
    test::Rng rng(2024);
    auto model = init_generator<double>(tiny_generator(), 7);
    // Non-zero gamma so the attention path carries gradient.
    for (const auto& name : model.params.names())
      if (name.ends_with(".gamma")) model.params.at(name).mutable_data()[0] = 0.5;
    for (const auto& name : model.params.names())
      if (name.ends_with(".b") && !name.ends_with("norm.b"))
        for (auto& v : model.params.at(name).mutable_data()) v = test::uniform(rng, -0.1, 0.1);
    const auto x = random_input<double>(rng, 2, 16);
    const auto target_rgb = test::random_tensor<double>(rng, {2, 3, 16, 16}, -0.9, 0.9);
    const auto target_edge = test::random_tensor<double>(rng, {2, 1, 16, 16}, 0, 1);
    auto loss = [&] {
      const auto out = generator_forward(model, x);
      return nn::add(nn::mean_squared_error(out.rgb, target_rgb), nn::mean_absolute_error(out.edge, target_edge));
    };
    const auto r = test::finite_difference_check(model.params.tensors(), loss, 40, rng, 1e-4, 1e-7);
    MESSAGE("checked ", r.checked, " skipped ", r.skipped, " worst ", r.worst_rel);
    CHECK(r.checked >= 25);
    CHECK(r.worst_rel < 1e-3);
  }

  TEST_CASE("discriminator gradients match finite differences") {
    test::Rng rng(99);
    DiscriminatorConfig d;
    d.base_channels = 8;
    d.n_layers = 2;
    auto model = init_discriminator<double>(d, 1);
    const auto x = test::random_tensor<double>(rng, {2, 3, 24, 24}, -1, 1);
    auto loss = [&] { return nn::mean_squared_error_to(discriminator_forward(model, x), 1.0); };
    const auto r = test::finite_difference_check(model.params.tensors(), loss, 30, rng, 1e-4, 1e-7);
    CHECK(r.worst_rel < 1e-3);
  }

  TEST_CASE("config json round trip and validation") {
    GeneratorConfig g = tiny_generator(AttentionMode::EncoderAndDecoder);
    g.use_structure_channel = false;
    g.attention.key_channels = 3;
    const auto back = nlohmann::json(g).get<GeneratorConfig>();
    CHECK(back.attention_mode == AttentionMode::EncoderAndDecoder);
    CHECK(back.attention.key_channels == 3);
    CHECK_FALSE(back.use_structure_channel);
    CHECK(parse_attention_mode(to_string(AttentionMode::DecoderOnly)) == AttentionMode::DecoderOnly);
    CHECK_THROWS(parse_attention_mode("everywhere"));
    GeneratorConfig bad;
    bad.image_size = 30;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("pack and unpack") {
    test::Rng rng(1);
    Image img = test::random_image(rng, 8, 8, 3);
    const auto t = pack_rgb<float>({&img});
    CHECK(t.shape() == nn::Shape{1, 3, 8, 8});
    CHECK(t.data()[64 + 8 * 2 + 3] == doctest::Approx(2 * img.at(2, 3, 1) - 1));
    const auto back = unpack_rgb(t);
    for (std::size_t i = 0; i < img.data.size(); ++i) REQUIRE(std::fabs(back[0].data[i] - img.data[i]) < 1e-6);
  }
}
