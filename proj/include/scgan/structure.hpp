#pragma once

#include <nlohmann/json.hpp>

#include "scgan/data.hpp"
#include "scgan/image.hpp"

namespace scgan {

// Single-channel structural map with values in [0,1]. Canny output is binary.
struct EdgeMap {
  Image values;  // channels == 1

  int height() const { return values.height; }
  int width() const { return values.width; }
  bool operator==(const EdgeMap&) const = default;
};

struct CannyParams {
  double sigma = 1.4;
  double low = 0.1;   // fraction of the maximum gradient magnitude
  double high = 0.2;

  void validate() const;
};

void to_json(nlohmann::json& j, const CannyParams& p);
void from_json(const nlohmann::json& j, CannyParams& p);

// Luma: 0.299 R + 0.587 G + 0.114 B.
Image to_grayscale(const Image& rgb);

// Gaussian smoothing (half-width ceil(3 sigma), reflected borders), 3x3 Sobel,
// four-direction non-maximum suppression and 8-connected hysteresis with
// thresholds relative to the maximum gradient magnitude.
EdgeMap canny_edges(const Image& rgb, const CannyParams& params = {});

// Four-channel H x W x 4 image: RGB followed by the edge map.
Image concat_structure(const StainPatch& patch, const EdgeMap& edges);

}  // namespace scgan
