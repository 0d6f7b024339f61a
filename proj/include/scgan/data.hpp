#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "scgan/image.hpp"

namespace scgan {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stain { HE, CDX2, CK818 };

std::string to_string(Stain stain);
Stain parse_stain(const std::string& name);

// An RGB patch from one stain domain. Square, side a positive multiple of 4,
// values in [0,1].
class StainPatch {
 public:
  StainPatch(Image pixels, Stain stain, std::string patient_id,
             std::optional<std::string> pair_id = std::nullopt);

  const Image& pixels() const { return pixels_; }
  Stain stain() const { return stain_; }
  const std::string& patient_id() const { return patient_id_; }
  const std::optional<std::string>& pair_id() const { return pair_id_; }
  int size() const { return pixels_.height; }

  bool operator==(const StainPatch&) const = default;

 private:
  Image pixels_;
  Stain stain_;
  std::string patient_id_;
  std::optional<std::string> pair_id_;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest root unless absolute
  Stain stain;
  std::string patient_id;
  std::optional<std::string> pair_id;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& entry) const;
};

// Parses and validates a manifest JSON file. A relative "root" is resolved
// against the directory holding the manifest.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Checks the manifest invariants (unique pair per stain, paths exist).
void validate_manifest(const DatasetManifest& manifest);
std::string manifest_to_json(const DatasetManifest& manifest);

// Cuts row-major tiles; the last tile in each axis is clamped to the border.
std::vector<StainPatch> tile_image(const Image& image, int tile, int stride, Stain stain,
                                   const std::string& patient_id);
// Tile origins along one axis of length `extent`.
std::vector<int> tile_offsets(int extent, int tile, int stride);

// --- synthetic stain pairs ----------------------------------------------

enum class Marker { CDX2_like, CK818_like };

std::string to_string(Marker marker);
Marker parse_marker(const std::string& name);
Stain stain_for(Marker marker);

struct SynthSpec {
  int image_size = 128;
  int n_glands = 3;
  int nuclei_min = 4;  // per gland, inclusive
  int nuclei_max = 8;
  Marker marker = Marker::CDX2_like;
  double noise_level = 0.02;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
// Accepts "nuclei_per_gland": [min, max] or separate nuclei_min/nuclei_max.
void from_json(const nlohmann::json& j, SynthSpec& s);

struct Rgb {
  float r, g, b;
};

// Rendering palette. Tests refer to these symbolically.
struct SynthPalette {
  Rgb he_stroma{0.91f, 0.63f, 0.71f};
  Rgb he_nucleus{0.42f, 0.30f, 0.58f};
  Rgb he_epithelium{0.86f, 0.72f, 0.84f};
  Rgb he_lumen{0.97f, 0.95f, 0.97f};
  Rgb ihc_background{0.93f, 0.92f, 0.91f};
  Rgb ihc_epithelium{0.89f, 0.88f, 0.87f};
  Rgb ihc_lumen{0.98f, 0.98f, 0.98f};
  Rgb dab_brown{0.55f, 0.27f, 0.07f};
  Rgb counterstain_blue{0.36f, 0.42f, 0.72f};
};

const SynthPalette& synth_palette();

struct Point {
  double row = 0;
  double col = 0;
};

using Polygon = std::vector<Point>;

struct CellTruth {
  std::vector<Point> nuclei_centroids;
  // Parallel to nuclei_centroids: true for nuclei inside a gland.
  std::vector<bool> nucleus_in_gland;
  Mask positive_mask;
  Mask negative_mask;
  std::vector<Polygon> gland_boundaries;
  Mask nuclei_mask;
  Mask gland_mask;

  std::size_t gland_nuclei() const;
};

struct SyntheticPair {
  StainPatch he;
  StainPatch ihc;
  CellTruth truth;
};

// Pure function of (spec, seed).
SyntheticPair generate_synthetic_pair(const SynthSpec& spec, std::uint64_t seed);

std::string truth_to_json(const CellTruth& truth);

// --- batch sampling -------------------------------------------------------

enum class BatchMode { Registered, Unregistered };

struct PatchBatch {
  std::vector<StainPatch> he;
  std::vector<StainPatch> ihc;
  bool registered = false;
};

// Indices chosen for one batch; `he[i]` and `ihc[i]` index the H&E and IHC
// entry lists of the source.
struct BatchSelection {
  std::vector<std::size_t> he;
  std::vector<std::size_t> ihc;
  bool registered = false;
};

// Stain/pair layout of a patch source, independent of pixel storage.
struct DomainIndex {
  std::vector<std::size_t> he;   // positions of H&E entries
  std::vector<std::size_t> ihc;  // positions of IHC entries
  // (i, j) for every pair_id present in both domains, in order of the H&E entry.
  // i indexes `he` and j indexes `ihc`, as in BatchSelection.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

DomainIndex index_domains(const std::vector<Stain>& stains,
                          const std::vector<std::optional<std::string>>& pair_ids);

BatchSelection select_batch(const DomainIndex& index, BatchMode mode, int batch, std::uint64_t seed);

// Preloaded patches; used by training.
struct PatchDataset {
  std::vector<StainPatch> patches;
  DomainIndex index;

  static PatchDataset from_patches(std::vector<StainPatch> patches);
  Stain ihc_stain() const;
  int patch_size() const;
};

PatchDataset load_dataset(const DatasetManifest& manifest);
PatchDataset synthetic_dataset(const SynthSpec& spec, int n_pairs, std::uint64_t seed);

PatchBatch sample_batch(const PatchDataset& dataset, BatchMode mode, int batch, std::uint64_t seed);
// Loads only the images chosen for the batch.
PatchBatch sample_batch(const DatasetManifest& manifest, BatchMode mode, int batch,
                        std::uint64_t seed);

// Deterministic seed derivation for sub-streams (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace scgan
