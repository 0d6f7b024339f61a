#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scgan/image.hpp"

namespace scgan {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BrownThresholds {
  double hue_low = 10.0;  // degrees
  double hue_high = 45.0;
  double sat_min = 0.25;
  double val_min = 0.1;
  double val_max = 0.95;

  void validate() const;
};

void to_json(nlohmann::json& j, const BrownThresholds& t);
void from_json(const nlohmann::json& j, BrownThresholds& t);

struct Hsv {
  double h;  // degrees in [0,360)
  double s;
  double v;
};
Hsv rgb_to_hsv(double r, double g, double b);

// 1 where hue in [hue_low, hue_high], sat >= sat_min and val in [val_min, val_max].
Mask brown_mask(const Image& rgb, const BrownThresholds& thresholds = {});

struct DiceIou {
  double dice;
  double iou;
};
// Both scores are 1 when both masks are empty.
DiceIou dice_iou(const Mask& a, const Mask& b);

// ((gen - gt) / gt) * 100.
double cell_count_ratio(long long gen_count, long long gt_count);

struct CellCounts {
  std::size_t total = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;

  CellCounts& operator+=(const CellCounts& o) {
    total += o.total;
    positive += o.positive;
    negative += o.negative;
    return *this;
  }
  bool operator==(const CellCounts&) const = default;
};

struct CellSegmentation;
CellCounts count_cells(const CellSegmentation& segmentation);

// Mean local SSIM on luma (11x11 Gaussian window, sigma 1.5, dynamic range 1,
// windows fully inside the image). Grayscale inputs are used as they are.
double ssim(const Image& a, const Image& b);

using EmbedFn = std::function<std::vector<double>(const Image&)>;

// Luma averaged over an 8x8 grid of blocks, row-major (64 values).
std::vector<double> downsample_identity(const Image& image);
// Applies `embedder` (downsample_identity when empty) to every image.
std::vector<std::vector<double>> embed(const std::vector<Image>& images, const EmbedFn& embedder = {});

// Frechet distance between Gaussian fits of two vector sets.
double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

// --- dataset evaluation ---------------------------------------------------------------

class CellSegmenter;

struct EvalConfig {
  BrownThresholds thresholds;
  std::shared_ptr<CellSegmenter> segmenter;  // local segmenter when null
  EmbedFn embedder;                          // downsample_identity when empty
};

struct PatchMetrics {
  std::string name;
  double ssim = 0;
  double dice = 0;
  double iou = 0;
  CellCounts generated;
  CellCounts reference;
};

struct MetricReport {
  double fid = 0;
  double ssim = 0;
  double iou = 0;
  double dice = 0;
  // Signed percentages; empty when the reference count is zero.
  std::optional<double> r_total, r_positive, r_negative;
  std::size_t n_patches = 0;
  CellCounts generated;
  CellCounts reference;
  BrownThresholds thresholds;
  std::string segmenter;
  std::string embedder;
  std::vector<PatchMetrics> patches;
};

struct NamedImage {
  std::string name;
  Image image;
};

// Paired evaluation: `generated` and `reference` must carry the same names.
MetricReport evaluate_images(const std::vector<NamedImage>& generated, const std::vector<NamedImage>& reference,
                             const EvalConfig& config);
// Loads every *.png in both directories (sorted by file name).
MetricReport evaluate_dataset(const std::filesystem::path& generated_dir, const std::filesystem::path& reference_dir,
                              const EvalConfig& config);

std::vector<NamedImage> load_png_dir(const std::filesystem::path& dir);

nlohmann::json report_to_json(const MetricReport& report);
std::string report_to_csv(const MetricReport& report);

}  // namespace scgan
