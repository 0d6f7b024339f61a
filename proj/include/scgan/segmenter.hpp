#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "scgan/data.hpp"
#include "scgan/image.hpp"
#include "scgan/metrics.hpp"

namespace scgan {

class SegmenterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CellClass { Positive, Negative };

struct Cell {
  int row = 0;  // centroid
  int col = 0;
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive bounding box
  CellClass cls = CellClass::Negative;

  bool operator==(const Cell&) const = default;
};

struct CellSegmentation {
  int height = 0;
  int width = 0;
  std::vector<Cell> cells;

  // Throws SegmenterError if a cell lies outside the image or its bounding
  // box is inverted or misses the centroid.
  void validate() const;
  bool operator==(const CellSegmentation&) const = default;
};

// JSON wire format: {"cells":[{"centroid":[r,c],"bbox":[r0,c0,r1,c1],"cls":"positive"|"negative"}]}
std::string segmentation_to_json(const CellSegmentation& segmentation);
// Parses and validates a response for an image of the given size.
CellSegmentation parse_segmentation_json(const std::string& body, int height, int width);

class CellSegmenter {
 public:
  virtual ~CellSegmenter() = default;
  virtual CellSegmentation segment(const Image& ihc) = 0;
  // Order-preserving batch form; implementations may overlap requests.
  virtual std::vector<CellSegmentation> segment_many(const std::vector<const Image*>& images);
  virtual std::string identity() const = 0;

  CellSegmentation segment(const StainPatch& patch) { return segment(patch.pixels()); }
};

// --- local connected-components segmenter -------------------------------------------

struct LocalSegmenterConfig {
  BrownThresholds brown;
  double blue_hue_low = 180.0;
  double blue_hue_high = 280.0;
  double blue_sat_min = 0.15;
  int min_area = 12;
};

struct Component {
  std::size_t area = 0;
  double sum_row = 0, sum_col = 0;
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
};

// Labels 8-connected (or 4-connected) foreground regions. `labels` receives a
// 1-based component id per pixel (0 for background) when non-null.
std::vector<Component> connected_components(const Mask& mask, int connectivity = 8,
                                            std::vector<int>* labels = nullptr);

// Counterstain (hematoxylin-blue) pixels.
Mask blue_mask(const Image& rgb, const LocalSegmenterConfig& config);

CellSegmentation segment_local(const Image& ihc, const LocalSegmenterConfig& config = {});

class LocalSegmenter : public CellSegmenter {
 public:
  explicit LocalSegmenter(LocalSegmenterConfig config = {});
  CellSegmentation segment(const Image& ihc) override;
  std::string identity() const override;
  using CellSegmenter::segment;

 private:
  LocalSegmenterConfig config_;
};

// --- remote service client and loopback server ------------------------------------------

// POSTs the PNG-encoded patch to <endpoint>/segment.
CellSegmentation segment_remote(const std::string& endpoint, const Image& ihc, double timeout_seconds = 30.0);

class RemoteSegmenter : public CellSegmenter {
 public:
  RemoteSegmenter(std::string endpoint, double timeout_seconds = 30.0, int max_in_flight = 4);
  CellSegmentation segment(const Image& ihc) override;
  std::vector<CellSegmentation> segment_many(const std::vector<const Image*>& images) override;
  std::string identity() const override;
  using CellSegmenter::segment;

 private:
  std::string endpoint_;
  double timeout_;
  int max_in_flight_;
};

// HTTP server exposing a segmenter under POST /segment.
class SegmentServer {
 public:
  explicit SegmentServer(std::shared_ptr<CellSegmenter> backend);
  ~SegmentServer();
  SegmentServer(const SegmentServer&) = delete;
  SegmentServer& operator=(const SegmentServer&) = delete;

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();
  int port() const { return port_; }
  std::string endpoint() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  std::string host_;
  int port_ = 0;
};

}  // namespace scgan
