#include "scgan/structure.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace scgan {

void CannyParams::validate() const {
  if (!(sigma > 0)) throw std::invalid_argument("canny sigma must be > 0");
  if (!(low > 0 && low < high && high <= 1))
    throw std::invalid_argument("canny thresholds must satisfy 0 < low < high <= 1");
}

void to_json(nlohmann::json& j, const CannyParams& p) {
  j = {{"sigma", p.sigma}, {"low", p.low}, {"high", p.high}};
}

void from_json(const nlohmann::json& j, CannyParams& p) {
  p.sigma = j.value("sigma", p.sigma);
  p.low = j.value("low", p.low);
  p.high = j.value("high", p.high);
}

Image to_grayscale(const Image& rgb) {
  if (rgb.channels != 3) throw std::invalid_argument("to_grayscale expects an RGB image");
  Image gray(rgb.height, rgb.width, 1);
  for (std::size_t i = 0; i < gray.data.size(); ++i) {
    const float* p = &rgb.data[i * 3];
    gray.data[i] = static_cast<float>(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
  }
  return gray;
}

namespace {

// Mirror index that tolerates offsets larger than the extent.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

struct Plane {
  int h, w;
  std::vector<double> v;
  double at(int r, int c) const { return v[static_cast<std::size_t>(reflect(r, h)) * w + reflect(c, w)]; }
};

Plane gaussian_smooth(const Plane& in, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  Plane tmp{in.h, in.w, std::vector<double>(in.v.size())};
  for (int r = 0; r < in.h; ++r)
    for (int c = 0; c < in.w; ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * in.at(r, c + i);
      tmp.v[static_cast<std::size_t>(r) * in.w + c] = acc;
    }
  Plane out{in.h, in.w, std::vector<double>(in.v.size())};
  for (int r = 0; r < in.h; ++r)
    for (int c = 0; c < in.w; ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp.at(r + i, c);
      out.v[static_cast<std::size_t>(r) * in.w + c] = acc;
    }
  return out;
}

}  // namespace

EdgeMap canny_edges(const Image& rgb, const CannyParams& params) {
  params.validate();
  const int h = rgb.height, w = rgb.width;
  Plane gray{h, w, std::vector<double>(static_cast<std::size_t>(h) * w)};
  for (std::size_t i = 0; i < gray.v.size(); ++i) {
    const float* p = &rgb.data[i * 3];
    gray.v[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  const Plane smooth = gaussian_smooth(gray, params.sigma);

  std::vector<double> mag(gray.v.size());
  std::vector<std::uint8_t> dir(gray.v.size());
  double peak = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double gx = (smooth.at(r - 1, c + 1) + 2 * smooth.at(r, c + 1) + smooth.at(r + 1, c + 1)) -
                        (smooth.at(r - 1, c - 1) + 2 * smooth.at(r, c - 1) + smooth.at(r + 1, c - 1));
      const double gy = (smooth.at(r + 1, c - 1) + 2 * smooth.at(r + 1, c) + smooth.at(r + 1, c + 1)) -
                        (smooth.at(r - 1, c - 1) + 2 * smooth.at(r - 1, c) + smooth.at(r - 1, c + 1));
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      mag[i] = std::hypot(gx, gy);
      peak = std::max(peak, mag[i]);
      double angle = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
      if (angle < 0) angle += 180.0;
      dir[i] = angle < 22.5 || angle >= 157.5 ? 0 : angle < 67.5 ? 1 : angle < 112.5 ? 2 : 3;
    }

  EdgeMap out{Image(h, w, 1)};
  if (peak < 1e-12) return out;

  // Ties are broken towards the negative-direction neighbour; the tolerance
  // keeps the outcome stable under rounding noise such as a global offset.
  const double tol = 1e-9 * peak;
  static constexpr int kOffsets[4][2] = {{0, 1}, {1, 1}, {1, 0}, {1, -1}};  // (dr, dc) along gradient
  auto mag_at = [&](int r, int c) {
    return (r < 0 || r >= h || c < 0 || c >= w) ? 0.0 : mag[static_cast<std::size_t>(r) * w + c];
  };
  std::vector<double> thin(mag.size(), 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      const auto [dr, dc] = kOffsets[dir[i]];
      const double prev = mag_at(r - dr, c - dc);
      const double next = mag_at(r + dr, c + dc);
      if (mag[i] > prev + tol && mag[i] >= next - tol) thin[i] = mag[i];
    }

  const double hi = params.high * peak - tol;
  const double lo = params.low * peak - tol;
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < thin.size(); ++i)
    if (thin[i] > 0 && thin[i] >= hi) {
      out.values.data[i] = 1.0f;
      stack.push_back(i);
    }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int r = static_cast<int>(i / w), c = static_cast<int>(i % w);
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if ((dr == 0 && dc == 0) || rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * w + cc;
        if (out.values.data[j] == 0.0f && thin[j] > 0 && thin[j] >= lo) {
          out.values.data[j] = 1.0f;
          stack.push_back(j);
        }
      }
  }
  return out;
}

Image concat_structure(const StainPatch& patch, const EdgeMap& edges) {
  const Image& rgb = patch.pixels();
  if (!rgb.same_size(edges.values) || edges.values.channels != 1)
    throw std::invalid_argument("concat_structure: patch is " + std::to_string(rgb.height) + "x" +
                                std::to_string(rgb.width) + " but edge map is " +
                                std::to_string(edges.height()) + "x" + std::to_string(edges.width()));
  Image out(rgb.height, rgb.width, 4);
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
    out.data[i * 4 + 0] = rgb.data[i * 3 + 0];
    out.data[i * 4 + 1] = rgb.data[i * 3 + 1];
    out.data[i * 4 + 2] = rgb.data[i * 3 + 2];
    out.data[i * 4 + 3] = edges.values.data[i];
  }
  return out;
}

}  // namespace scgan
