#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "scgan/data.hpp"

namespace scgan {

std::string to_string(Marker marker) {
  return marker == Marker::CDX2_like ? "CDX2_like" : "CK818_like";
}

Marker parse_marker(const std::string& name) {
  if (name == "CDX2_like") return Marker::CDX2_like;
  if (name == "CK818_like") return Marker::CK818_like;
  throw DataError("unknown marker \"" + name + "\"");
}

Stain stain_for(Marker marker) {
  return marker == Marker::CDX2_like ? Stain::CDX2 : Stain::CK818;
}

void SynthSpec::validate() const {
  if (image_size <= 0 || image_size % 4 != 0)
    throw DataError("synth image_size must be a positive multiple of 4");
  if (n_glands < 0) throw DataError("synth n_glands must be >= 0");
  if (nuclei_min < 0 || nuclei_max < nuclei_min) throw DataError("synth nuclei range invalid");
  if (!(noise_level >= 0.0)) throw DataError("synth noise_level must be >= 0");
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"image_size", s.image_size},
       {"n_glands", s.n_glands},
       {"nuclei_per_gland", {s.nuclei_min, s.nuclei_max}},
       {"marker", to_string(s.marker)},
       {"noise_level", s.noise_level}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  if (!j.is_object()) throw DataError("synth spec must be a JSON object");
  try {
    s.image_size = j.value("image_size", s.image_size);
    s.n_glands = j.value("n_glands", s.n_glands);
    if (j.contains("nuclei_per_gland")) {
      const auto range = j.at("nuclei_per_gland").get<std::vector<int>>();
      if (range.size() != 2) throw DataError("nuclei_per_gland must be [min, max]");
      s.nuclei_min = range[0];
      s.nuclei_max = range[1];
    }
    s.nuclei_min = j.value("nuclei_min", s.nuclei_min);
    s.nuclei_max = j.value("nuclei_max", s.nuclei_max);
    if (j.contains("marker")) s.marker = parse_marker(j.at("marker").get<std::string>());
    s.noise_level = j.value("noise_level", s.noise_level);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed synth spec: ") + e.what());
  }
  s.validate();
}

const SynthPalette& synth_palette() {
  static const SynthPalette palette{};
  return palette;
}

std::size_t CellTruth::gland_nuclei() const {
  return static_cast<std::size_t>(std::count(nucleus_in_gland.begin(), nucleus_in_gland.end(), true));
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kPolygonVertices = 32;
constexpr double kLumenFraction = 0.42;
constexpr double kNucleusRingFraction = 0.72;

struct Gland {
  Point center;
  double radius = 0;
  double a2 = 0, a3 = 0, phase2 = 0, phase3 = 0;

  double radius_at(double theta) const {
    return radius * (1.0 + a2 * std::sin(2 * theta + phase2) + a3 * std::sin(3 * theta + phase3));
  }
  // Normalized radial coordinate: <= 1 inside the gland outline.
  double rho(double row, double col) const {
    const double dr = row - center.row, dc = col - center.col;
    const double d = std::hypot(dr, dc);
    if (d == 0) return 0;
    return d / radius_at(std::atan2(dr, dc));
  }
  Polygon outline() const {
    Polygon poly;
    for (int i = 0; i < kPolygonVertices; ++i) {
      const double t = kTwoPi * i / kPolygonVertices;
      const double r = radius_at(t);
      poly.push_back({center.row + r * std::sin(t), center.col + r * std::cos(t)});
    }
    return poly;
  }
};

struct Nucleus {
  Point center;
  double major = 0, minor = 0, angle = 0;
  bool in_gland = false;

  bool contains(double row, double col) const {
    const double dr = row - center.row, dc = col - center.col;
    const double u = dc * std::cos(angle) + dr * std::sin(angle);
    const double v = -dc * std::sin(angle) + dr * std::cos(angle);
    return (u * u) / (major * major) + (v * v) / (minor * minor) <= 1.0;
  }
};

double dist(const Point& a, const Point& b) { return std::hypot(a.row - b.row, a.col - b.col); }

void paint(Image& img, int r, int c, const Rgb& color) {
  img.at(r, c, 0) = color.r;
  img.at(r, c, 1) = color.g;
  img.at(r, c, 2) = color.b;
}

void add_noise(Image& img, double sigma, std::mt19937_64& rng) {
  if (sigma > 0) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(sigma));
    for (float& v : img.data) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
  }
  quantize_to_bytes(img);
}

std::vector<Gland> place_glands(const SynthSpec& spec, std::mt19937_64& rng) {
  const double s = spec.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double cap = spec.n_glands > 0 ? s * std::sqrt(0.40 / (std::numbers::pi * spec.n_glands)) : s;
  for (int attempt = 0; attempt < 20; ++attempt, cap *= 0.9) {
    std::vector<Gland> glands;
    bool ok = true;
    for (int g = 0; g < spec.n_glands && ok; ++g) {
      Gland gl;
      gl.radius = std::max(4.0, std::min(s * (0.13 + 0.05 * unit(rng)), cap));
      gl.a2 = 0.03 + 0.04 * unit(rng);
      gl.a3 = 0.02 + 0.03 * unit(rng);
      gl.phase2 = kTwoPi * unit(rng);
      gl.phase3 = kTwoPi * unit(rng);
      const double margin = gl.radius * 1.1 + 2.0;
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        gl.center = {margin + (s - 1 - 2 * margin) * unit(rng), margin + (s - 1 - 2 * margin) * unit(rng)};
        placed = std::all_of(glands.begin(), glands.end(), [&](const Gland& o) {
          return dist(o.center, gl.center) >= 1.1 * (o.radius + gl.radius) + 4.0;
        });
      }
      if (!placed || margin * 2 >= s) ok = false;
      glands.push_back(gl);
    }
    if (ok) return glands;
  }
  throw DataError("cannot place " + std::to_string(spec.n_glands) + " glands in a " +
                  std::to_string(spec.image_size) + " px patch");
}

}  // namespace

SyntheticPair generate_synthetic_pair(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const int s = spec.image_size;
  const auto& pal = synth_palette();
  std::mt19937_64 rng(mix_seed(seed, 0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double rn = std::clamp(s / 40.0, 2.4, 4.0);
  const double spacing = 2 * rn + 3.0;
  const auto glands = place_glands(spec, rng);

  std::vector<Nucleus> nuclei;
  for (const auto& g : glands) {
    std::uniform_int_distribution<int> count(spec.nuclei_min, spec.nuclei_max);
    int k = count(rng);
    const double ring = kNucleusRingFraction * g.radius * (1 - g.a2 - g.a3);
    const int k_max = std::max(1, static_cast<int>(kTwoPi * ring / (spacing + 1.0)));
    k = std::min(k, k_max);
    const double theta0 = kTwoPi * unit(rng);
    for (int i = 0; i < k; ++i) {
      const double t = theta0 + kTwoPi * i / k + 0.15 * (unit(rng) - 0.5) * kTwoPi / k;
      const double r = kNucleusRingFraction * g.radius_at(t);
      Nucleus n;
      n.center = {g.center.row + r * std::sin(t), g.center.col + r * std::cos(t)};
      n.major = n.minor = rn;
      n.in_gland = true;
      const bool clear = std::all_of(nuclei.begin(), nuclei.end(),
                                     [&](const Nucleus& o) { return dist(o.center, n.center) >= spacing + 1.0; });
      if (clear) nuclei.push_back(n);
    }
  }

  // Spindle-shaped stromal nuclei outside the glands.
  const int n_stroma = std::uniform_int_distribution<int>(1, spec.n_glands + 2)(rng);
  for (int i = 0; i < n_stroma; ++i) {
    for (int tries = 0; tries < 100; ++tries) {
      Nucleus n;
      n.major = 1.5 * rn;
      n.minor = 0.75 * rn;
      n.angle = std::numbers::pi * unit(rng);
      const double margin = n.major + 2.0;
      n.center = {margin + (s - 1 - 2 * margin) * unit(rng), margin + (s - 1 - 2 * margin) * unit(rng)};
      const bool outside = std::all_of(glands.begin(), glands.end(), [&](const Gland& g) {
        return dist(g.center, n.center) >= g.radius * 1.12 + n.major + 3.0;
      });
      const bool clear = std::all_of(nuclei.begin(), nuclei.end(), [&](const Nucleus& o) {
        return dist(o.center, n.center) >= o.major + n.major + 4.0;
      });
      if (outside && clear) {
        nuclei.push_back(n);
        break;
      }
    }
  }

  Image he(s, s, 3), ihc(s, s, 3);
  CellTruth truth;
  truth.positive_mask = Mask(s, s);
  truth.negative_mask = Mask(s, s);
  truth.nuclei_mask = Mask(s, s);
  truth.gland_mask = Mask(s, s);
  const bool cdx2 = spec.marker == Marker::CDX2_like;

  for (int r = 0; r < s; ++r) {
    for (int c = 0; c < s; ++c) {
      double rho = 2.0;
      for (const auto& g : glands) rho = std::min(rho, g.rho(r, c));
      const bool in_gland = rho <= 1.0;
      const bool lumen = rho < kLumenFraction;
      const Nucleus* nucleus = nullptr;
      for (const auto& n : nuclei)
        if (n.contains(r, c)) {
          nucleus = &n;
          break;
        }
      if (in_gland) truth.gland_mask.at(r, c) = 1;

      if (nucleus) {
        truth.nuclei_mask.at(r, c) = 1;
        paint(he, r, c, pal.he_nucleus);
        const bool positive = cdx2 && nucleus->in_gland;
        paint(ihc, r, c, positive ? pal.dab_brown : pal.counterstain_blue);
        (positive ? truth.positive_mask : truth.negative_mask).at(r, c) = 1;
      } else if (lumen) {
        paint(he, r, c, pal.he_lumen);
        paint(ihc, r, c, pal.ihc_lumen);
      } else if (in_gland) {
        paint(he, r, c, pal.he_epithelium);
        if (cdx2) {
          paint(ihc, r, c, pal.ihc_epithelium);
        } else {
          paint(ihc, r, c, pal.dab_brown);
          truth.positive_mask.at(r, c) = 1;
        }
      } else {
        paint(he, r, c, pal.he_stroma);
        paint(ihc, r, c, pal.ihc_background);
      }
    }
  }

  for (const auto& n : nuclei) {
    truth.nuclei_centroids.push_back(n.center);
    truth.nucleus_in_gland.push_back(n.in_gland);
  }
  for (const auto& g : glands) truth.gland_boundaries.push_back(g.outline());

  std::mt19937_64 he_noise(mix_seed(seed, 1)), ihc_noise(mix_seed(seed, 2));
  add_noise(he, spec.noise_level, he_noise);
  add_noise(ihc, spec.noise_level, ihc_noise);

  const std::string pair_id = "s" + std::to_string(seed);
  return SyntheticPair{StainPatch(std::move(he), Stain::HE, "synthetic", pair_id),
                       StainPatch(std::move(ihc), stain_for(spec.marker), "synthetic", pair_id),
                       std::move(truth)};
}

namespace {

nlohmann::json mask_runs(const Mask& m) {
  nlohmann::json runs = nlohmann::json::array();
  std::size_t i = 0;
  while (i < m.data.size()) {
    if (!m.data[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < m.data.size() && m.data[j]) ++j;
    runs.push_back({i, j - i});
    i = j;
  }
  return runs;
}

}  // namespace

std::string truth_to_json(const CellTruth& truth) {
  nlohmann::json nuclei = nlohmann::json::array();
  for (std::size_t i = 0; i < truth.nuclei_centroids.size(); ++i)
    nuclei.push_back({{"row", truth.nuclei_centroids[i].row},
                      {"col", truth.nuclei_centroids[i].col},
                      {"in_gland", static_cast<bool>(truth.nucleus_in_gland[i])}});
  nlohmann::json glands = nlohmann::json::array();
  for (const auto& poly : truth.gland_boundaries) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : poly) pts.push_back({p.row, p.col});
    glands.push_back(pts);
  }
  nlohmann::json doc = {{"height", truth.positive_mask.height},
                        {"width", truth.positive_mask.width},
                        {"nuclei", nuclei},
                        {"glands", glands},
                        {"positive_runs", mask_runs(truth.positive_mask)},
                        {"negative_runs", mask_runs(truth.negative_mask)}};
  return doc.dump(2) + "\n";
}

}  // namespace scgan
