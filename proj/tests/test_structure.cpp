#include <doctest.h>

#include <cmath>

#include "scgan/segmenter.hpp"
#include "scgan/structure.hpp"
#include "support.hpp"

using namespace scgan;

namespace {

Image gray_rgb(int h, int w, const std::function<float(int, int)>& f) {
  Image img(h, w, 3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = f(r, c);
  return img;
}

std::size_t edge_count(const EdgeMap& e) {
  std::size_t n = 0;
  for (float v : e.values.data) n += v != 0.0f;
  return n;
}

}  // namespace

TEST_SUITE("structure") {
  TEST_CASE("grayscale weights") {
    const Image white(4, 4, 3, 1.0f);
    for (float v : to_grayscale(white).data) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    Image red(4, 4, 3, 0.0f);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) red.at(r, c, 0) = 1.0f;
    for (float v : to_grayscale(red).data) CHECK(v == doctest::Approx(0.299).epsilon(1e-6));

    test::Rng rng(1);
    const Image img = test::random_image(rng, 13, 17, 3);
    const Image g = to_grayscale(img);
    REQUIRE(g.channels == 1);
    for (int r = 0; r < 13; ++r)
      for (int c = 0; c < 17; ++c) {
        const double want = 0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2);
        REQUIRE(std::fabs(g.at(r, c) - want) < 1e-6);
      }
  }

  TEST_CASE("constant image has no edges") {
    for (float v : {0.0f, 0.3f, 1.0f}) CHECK(edge_count(canny_edges(Image(32, 32, 3, v))) == 0);
  }

  TEST_CASE("vertical step is localized") {
    const int size = 64, step = 32;
    const EdgeMap e = canny_edges(gray_rgb(size, size, [&](int, int c) { return c < step ? 0.0f : 1.0f; }));
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c)
        if (e.values.at(r, c) != 0.0f) {
          // The ideal locus sits between columns step-1 and step.
          REQUIRE(c >= step - 2);
          REQUIRE(c <= step + 1);
        }
    // Every row away from the border carries an edge, at most 2 px thick.
    for (int r = 4; r < size - 4; ++r) {
      int n = 0;
      for (int c = 0; c < size; ++c) n += e.values.at(r, c) != 0.0f;
      CHECK(n >= 1);
      CHECK(n <= 2);
    }
  }

  TEST_CASE("disk boundary forms a ring near the circle") {
    const int size = 64;
    const double cr = 31.5, cc = 31.5, radius = 20;
    const EdgeMap e = canny_edges(gray_rgb(size, size, [&](int r, int c) {
      return std::hypot(r - cr, c - cc) <= radius ? 0.8f : 0.2f;
    }));
    Mask m(size, size);
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c)
        if (e.values.at(r, c) != 0.0f) {
          m.at(r, c) = 1;
          CHECK(std::fabs(std::hypot(r - cr, c - cc) - radius) <= 1.5);
        }
    CHECK(m.count() > 100);
    // One 8-connected ring.
    CHECK(connected_components(m, 8).size() == 1);
  }

  TEST_CASE("edges are binary and invariant to brightness offsets") {
    test::Rng rng(9);
    for (int iter = 0; iter < 20; ++iter) {
      Image img = test::blob_image(rng, 40);
      for (auto& v : img.data) v *= 0.7f;
      const EdgeMap a = canny_edges(img);
      for (float v : a.values.data) REQUIRE((v == 0.0f || v == 1.0f));
      // 0.25 is exact in binary, so the shift does not perturb gradients.
      Image shifted = img;
      for (auto& v : shifted.data) v += 0.25f;
      CHECK(canny_edges(shifted) == a);
    }
  }

  TEST_CASE("canny parameters are validated") {
    CHECK_THROWS_AS(canny_edges(Image(8, 8, 3), CannyParams{0.0, 0.1, 0.2}), std::invalid_argument);
    CHECK_THROWS_AS(canny_edges(Image(8, 8, 3), CannyParams{1.0, 0.3, 0.2}), std::invalid_argument);
    CHECK_THROWS_AS(canny_edges(Image(8, 8, 3), CannyParams{1.0, 0.1, 1.5}), std::invalid_argument);
    const CannyParams p = nlohmann::json{{"sigma", 2.0}, {"low", 0.05}, {"high", 0.3}}.get<CannyParams>();
    CHECK(p.sigma == 2.0);
    CHECK(nlohmann::json(p).get<CannyParams>().high == 0.3);
  }

  TEST_CASE("concat_structure layout") {
    test::Rng rng(2);
    const StainPatch patch(test::random_image(rng, 16, 16, 3), Stain::HE, "p");
    const EdgeMap e = canny_edges(patch.pixels());
    const Image four = concat_structure(patch, e);
    REQUIRE(four.channels == 4);
    CHECK(four.height == 16);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) {
        REQUIRE(four.at(r, c, 3) == e.values.at(r, c));
        REQUIRE(four.at(r, c, 1) == patch.pixels().at(r, c, 1));
      }
    const EdgeMap wrong{Image(32, 32, 1)};
    CHECK_THROWS_AS(concat_structure(patch, wrong), std::invalid_argument);
  }
}
