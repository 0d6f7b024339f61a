#include "scgan/segmenter.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace scgan {

// --- segmentation records -----------------------------------------------------------------

void CellSegmentation::validate() const {
  if (height <= 0 || width <= 0) throw SegmenterError("segmentation has no image size");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& c = cells[i];
    const std::string where = "cell " + std::to_string(i) + ": ";
    if (c.r0 > c.r1 || c.c0 > c.c1) throw SegmenterError(where + "inverted bounding box");
    if (c.r0 < 0 || c.c0 < 0 || c.r1 >= height || c.c1 >= width)
      throw SegmenterError(where + "bounding box outside the " + std::to_string(height) + "x" +
                           std::to_string(width) + " image");
    if (c.row < c.r0 || c.row > c.r1 || c.col < c.c0 || c.col > c.c1)
      throw SegmenterError(where + "centroid outside its bounding box");
  }
}

std::string segmentation_to_json(const CellSegmentation& s) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : s.cells)
    cells.push_back({{"centroid", {c.row, c.col}},
                     {"bbox", {c.r0, c.c0, c.r1, c.c1}},
                     {"cls", c.cls == CellClass::Positive ? "positive" : "negative"}});
  return nlohmann::json{{"cells", cells}}.dump();
}

CellSegmentation parse_segmentation_json(const std::string& body, int height, int width) {
  CellSegmentation s{height, width, {}};
  try {
    const auto doc = nlohmann::json::parse(body);
    for (const auto& item : doc.at("cells")) {
      const auto centroid = item.at("centroid").get<std::vector<int>>();
      const auto bbox = item.at("bbox").get<std::vector<int>>();
      const auto cls = item.at("cls").get<std::string>();
      if (centroid.size() != 2 || bbox.size() != 4) throw SegmenterError("centroid/bbox arity");
      if (cls != "positive" && cls != "negative") throw SegmenterError("unknown cell class \"" + cls + "\"");
      s.cells.push_back({centroid[0], centroid[1], bbox[0], bbox[1], bbox[2], bbox[3],
                         cls == "positive" ? CellClass::Positive : CellClass::Negative});
    }
  } catch (const nlohmann::json::exception& e) {
    throw SegmenterError(std::string("malformed segmentation JSON: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<CellSegmentation> CellSegmenter::segment_many(const std::vector<const Image*>& images) {
  std::vector<CellSegmentation> out;
  out.reserve(images.size());
  for (const Image* img : images) out.push_back(segment(*img));
  return out;
}

// --- local segmenter ---------------------------------------------------------------------------

std::vector<Component> connected_components(const Mask& mask, int connectivity, std::vector<int>* labels) {
  if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connectivity must be 4 or 8");
  const int h = mask.height, w = mask.width;
  std::vector<int> label(mask.data.size(), 0);
  std::vector<Component> comps;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.data.size(); ++start) {
    if (!mask.data[start] || label[start]) continue;
    const int id = static_cast<int>(comps.size()) + 1;
    Component comp;
    comp.r0 = comp.r1 = static_cast<int>(start / w);
    comp.c0 = comp.c1 = static_cast<int>(start % w);
    label[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const int r = static_cast<int>(i / w), c = static_cast<int>(i % w);
      ++comp.area;
      comp.sum_row += r;
      comp.sum_col += c;
      comp.r0 = std::min(comp.r0, r);
      comp.r1 = std::max(comp.r1, r);
      comp.c0 = std::min(comp.c0, c);
      comp.c1 = std::max(comp.c1, c);
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if ((dr == 0 && dc == 0) || (connectivity == 4 && dr != 0 && dc != 0)) continue;
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          const std::size_t j = static_cast<std::size_t>(rr) * w + cc;
          if (mask.data[j] && !label[j]) {
            label[j] = id;
            stack.push_back(j);
          }
        }
    }
    comps.push_back(comp);
  }
  if (labels) *labels = std::move(label);
  return comps;
}

Mask blue_mask(const Image& rgb, const LocalSegmenterConfig& config) {
  if (rgb.channels != 3) throw std::invalid_argument("blue_mask expects an RGB image");
  Mask m(rgb.height, rgb.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const float* p = &rgb.data[i * 3];
    const Hsv hsv = rgb_to_hsv(p[0], p[1], p[2]);
    m.data[i] = hsv.h >= config.blue_hue_low && hsv.h <= config.blue_hue_high && hsv.s >= config.blue_sat_min;
  }
  return m;
}

namespace {

void append_cells(std::vector<Cell>& cells, const std::vector<Component>& comps, int min_area, CellClass cls) {
  for (const auto& comp : comps) {
    if (comp.area < static_cast<std::size_t>(min_area)) continue;
    const double n = static_cast<double>(comp.area);
    cells.push_back({static_cast<int>(std::lround(comp.sum_row / n)), static_cast<int>(std::lround(comp.sum_col / n)),
                     comp.r0, comp.c0, comp.r1, comp.c1, cls});
  }
}

}  // namespace

CellSegmentation segment_local(const Image& ihc, const LocalSegmenterConfig& config) {
  if (config.min_area < 1) throw std::invalid_argument("min_area must be >= 1");
  const Mask brown = brown_mask(ihc, config.brown);
  Mask blue = blue_mask(ihc, config);
  for (std::size_t i = 0; i < blue.data.size(); ++i)
    if (brown.data[i]) blue.data[i] = 0;
  CellSegmentation s{ihc.height, ihc.width, {}};
  append_cells(s.cells, connected_components(brown), config.min_area, CellClass::Positive);
  append_cells(s.cells, connected_components(blue), config.min_area, CellClass::Negative);
  return s;
}

LocalSegmenter::LocalSegmenter(LocalSegmenterConfig config) : config_(config) { config_.brown.validate(); }

CellSegmentation LocalSegmenter::segment(const Image& ihc) { return segment_local(ihc, config_); }

std::string LocalSegmenter::identity() const {
  std::ostringstream ss;
  ss << "local(min_area=" << config_.min_area << ")";
  return ss.str();
}

// --- remote client ------------------------------------------------------------------------------

namespace {

struct Endpoint {
  std::string origin;  // scheme://host:port
  std::string path;    // base path without trailing slash
};

Endpoint split_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos || url.compare(0, scheme, "http") != 0)
    throw SegmenterError("endpoint must be an http:// URL: " + url);
  const auto slash = url.find('/', scheme + 3);
  Endpoint e{url.substr(0, slash), slash == std::string::npos ? "" : url.substr(slash)};
  while (!e.path.empty() && e.path.back() == '/') e.path.pop_back();
  return e;
}

}  // namespace

CellSegmentation segment_remote(const std::string& endpoint, const Image& ihc, double timeout_seconds) {
  const Endpoint ep = split_endpoint(endpoint);
  httplib::Client client(ep.origin);
  const auto usec = static_cast<long>(timeout_seconds * 1e6);
  client.set_connection_timeout(usec / 1000000, usec % 1000000);
  client.set_read_timeout(usec / 1000000, usec % 1000000);
  client.set_write_timeout(usec / 1000000, usec % 1000000);
  const auto png = encode_png(ihc);
  const std::string body(png.begin(), png.end());
  auto res = client.Post(ep.path + "/segment", body, "image/png");
  if (!res)
    throw SegmenterError("segmentation request to " + endpoint + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    std::string detail = res->body;
    try {
      detail = nlohmann::json::parse(res->body).at("error").get<std::string>();
    } catch (const std::exception&) {
    }
    throw SegmenterError("segmentation service at " + endpoint + " returned HTTP " + std::to_string(res->status) +
                         ": " + detail);
  }
  return parse_segmentation_json(res->body, ihc.height, ihc.width);
}

RemoteSegmenter::RemoteSegmenter(std::string endpoint, double timeout_seconds, int max_in_flight)
    : endpoint_(std::move(endpoint)), timeout_(timeout_seconds), max_in_flight_(max_in_flight) {
  if (max_in_flight_ < 1) throw std::invalid_argument("max_in_flight must be >= 1");
  if (!(timeout_ > 0)) throw std::invalid_argument("timeout must be > 0");
  split_endpoint(endpoint_);
}

CellSegmentation RemoteSegmenter::segment(const Image& ihc) { return segment_remote(endpoint_, ihc, timeout_); }

std::vector<CellSegmentation> RemoteSegmenter::segment_many(const std::vector<const Image*>& images) {
  std::vector<CellSegmentation> out(images.size());
  std::vector<std::exception_ptr> errors(images.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        out[i] = segment_remote(endpoint_, *images[i], timeout_);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(max_in_flight_), images.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::string RemoteSegmenter::identity() const { return "remote(" + endpoint_ + ")"; }

// --- loopback server ------------------------------------------------------------------------------

struct SegmentServer::Impl {
  httplib::Server server;
  std::shared_ptr<CellSegmenter> backend;
};

SegmentServer::SegmentServer(std::shared_ptr<CellSegmenter> backend) : impl_(std::make_unique<Impl>()) {
  if (!backend) throw std::invalid_argument("SegmentServer needs a backend segmenter");
  impl_->backend = std::move(backend);
  impl_->server.Post("/segment", [this](const httplib::Request& req, httplib::Response& res) {
    auto fail = [&](int status, const std::string& msg) {
      res.status = status;
      res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    };
    Image img;
    try {
      img = decode_png(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(req.body.data()),
                                                     req.body.size()));
    } catch (const std::exception& e) {
      return fail(400, std::string("body is not a PNG image: ") + e.what());
    }
    if (img.channels != 3) return fail(400, "expected an RGB PNG");
    try {
      res.set_content(segmentation_to_json(impl_->backend->segment(img)), "application/json");
    } catch (const std::exception& e) {
      fail(500, e.what());
    }
  });
}

SegmentServer::~SegmentServer() { stop(); }

int SegmentServer::start(const std::string& host, int port) {
  host_ = host;
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    port_ = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) throw SegmenterError("cannot bind segmentation server to " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void SegmentServer::run(const std::string& host, int port) {
  host_ = host;
  port_ = port;
  if (!impl_->server.listen(host, port))
    throw SegmenterError("cannot serve segmentation on " + host + ":" + std::to_string(port));
}

void SegmentServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

std::string SegmentServer::endpoint() const { return "http://" + host_ + ":" + std::to_string(port_); }

}  // namespace scgan
