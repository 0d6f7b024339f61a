#pragma once

// Hand-rolled generators and brute-force reference reductions shared by the
// test executables. Oracles here deliberately avoid the library code paths.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "scgan/image.hpp"
#include "scgan/nn/tensor.hpp"

namespace scgan::test {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}
inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline Mask random_mask(Rng& rng, int h, int w, double density) {
  Mask m(h, w);
  for (auto& v : m.data) v = uniform(rng) < density ? 1 : 0;
  return m;
}

inline Image random_image(Rng& rng, int h, int w, int c) {
  Image img(h, w, c);
  for (auto& v : img.data) v = static_cast<float>(uniform(rng));
  return img;
}

// Smooth-ish image: random blobs over a random background, so structure
// metrics see something other than white noise.
inline Image blob_image(Rng& rng, int size) {
  Image img(size, size, 3);
  const float bg[3] = {float(uniform(rng)), float(uniform(rng)), float(uniform(rng))};
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = bg[ch];
  const int n = uniform_int(rng, 1, 5);
  for (int b = 0; b < n; ++b) {
    const double cr = uniform(rng, 0, size), cc = uniform(rng, 0, size), rad = uniform(rng, 2, size / 3.0);
    const float col[3] = {float(uniform(rng)), float(uniform(rng)), float(uniform(rng))};
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c)
        if ((r - cr) * (r - cr) + (c - cc) * (c - cc) <= rad * rad)
          for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = col[ch];
  }
  return img;
}

template <typename T>
nn::Tensor<T> random_tensor(Rng& rng, nn::Shape shape, double lo, double hi, bool param = false) {
  std::vector<T> v(nn::numel(shape));
  for (auto& x : v) x = static_cast<T>(uniform(rng, lo, hi));
  return param ? nn::Tensor<T>::parameter(std::move(shape), std::move(v))
               : nn::Tensor<T>::constant(std::move(shape), std::move(v));
}

inline bool rel_close(double a, double b, double rel, double abs_floor = 0.0) {
  return std::fabs(a - b) <= std::max(abs_floor, rel * std::max(std::fabs(a), std::fabs(b)));
}

// --- brute-force references -------------------------------------------------

inline double oracle_dice(const Mask& a, const Mask& b) {
  long long inter = 0, na = 0, nb = 0;
  for (int r = 0; r < a.height; ++r)
    for (int c = 0; c < a.width; ++c) {
      const bool x = a.at(r, c) != 0, y = b.at(r, c) != 0;
      inter += x && y;
      na += x;
      nb += y;
    }
  if (na + nb == 0) return 1.0;
  return 2.0 * inter / double(na + nb);
}

inline double oracle_iou(const Mask& a, const Mask& b) {
  long long inter = 0, uni = 0;
  for (int r = 0; r < a.height; ++r)
    for (int c = 0; c < a.width; ++c) {
      const bool x = a.at(r, c) != 0, y = b.at(r, c) != 0;
      inter += x && y;
      uni += x || y;
    }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

template <typename T>
double oracle_mse(std::span<const T> a, std::span<const T> b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (long double)(a[i] - b[i]) * (a[i] - b[i]);
  return double(s / a.size());
}

template <typename T>
double oracle_mae(std::span<const T> a, std::span<const T> b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs((long double)a[i] - b[i]);
  return double(s / a.size());
}

// Central finite-difference check of d(loss)/d(param) at randomly sampled
// coordinates. `loss` must rebuild the graph from the current parameter
// values.
//
// Piecewise-linear activations make the loss non-differentiable on a
// measure-zero set, and a kink inside the +-step stencil corrupts the
// difference quotient. Such coordinates are detected and resampled (at most
// `samples` times in total). For a smooth function the central quotients at
// step and step/2 agree to O(step^2), and the one-sided asymmetry
// f(x+h) - 2f(x) + f(x-h) scales as h^2; a kink at distance d breaks the
// first by ~d/h and the second by ~|3d - h|/h, so together they leave no
// blind spot.
struct GradCheckResult {
  double worst_rel = 0;
  int checked = 0;
  int skipped = 0;
};

inline GradCheckResult finite_difference_check(std::vector<nn::Tensor<double>> params,
                                               const std::function<nn::Tensor<double>()>& loss, int samples,
                                               Rng& rng, double step = 1e-4, double floor = 1e-8,
                                               double tol = 1e-3) {
  for (auto& p : params) p.zero_grad();
  nn::backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    const auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.size(), 0.0);
  }
  const double base = loss().item();
  auto rel_err = [&](double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor}); };
  GradCheckResult out;
  while (out.checked < samples && out.skipped <= samples) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, params[t].size() - 1)(rng);
    auto data = params[t].mutable_data();
    const double saved = data[i];
    auto at = [&](double offset) {
      data[i] = saved + offset;
      const double v = loss().item();
      data[i] = saved;
      return v;
    };
    const double up = at(step), down = at(-step), up2 = at(step / 2), down2 = at(-step / 2);
    const double central = (up - down) / (2 * step), central2 = (up2 - down2) / step;
    const double asym = (up - 2 * base + down) / step, asym2 = (up2 - 2 * base + down2) / (step / 2);
    const double scale = std::max({std::fabs(central), std::fabs(central2), floor});
    if (rel_err(central, central2) > tol / 4 || std::fabs(asym - 2 * asym2) > tol / 4 * scale) {
      ++out.skipped;
      continue;
    }
    out.worst_rel = std::max(out.worst_rel, rel_err(analytic[t][i], central));
    ++out.checked;
  }
  return out;
}

// Scratch directory removed on destruction.
// Independent axis-aligned Gaussian rows.
inline std::vector<std::vector<double>> gaussian_samples(Rng& rng, const std::vector<double>& mean,
                                                         const std::vector<double>& var, int n) {
  std::normal_distribution<double> z;
  std::vector<std::vector<double>> out(n, std::vector<double>(mean.size()));
  for (auto& v : out)
    for (std::size_t i = 0; i < mean.size(); ++i) v[i] = mean[i] + std::sqrt(var[i]) * z(rng);
  return out;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("scgan_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace scgan::test
