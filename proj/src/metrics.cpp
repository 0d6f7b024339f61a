#include "scgan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <Eigen/Dense>

#include "scgan/segmenter.hpp"
#include "scgan/structure.hpp"

namespace scgan {

namespace fs = std::filesystem;

void BrownThresholds::validate() const {
  if (!(0 <= hue_low && hue_low < hue_high && hue_high <= 360))
    throw std::invalid_argument("brown thresholds need 0 <= hue_low < hue_high <= 360");
  if (!(0 <= sat_min && sat_min <= 1)) throw std::invalid_argument("brown sat_min must be in [0,1]");
  if (!(0 <= val_min && val_min < val_max && val_max <= 1))
    throw std::invalid_argument("brown thresholds need 0 <= val_min < val_max <= 1");
}

void to_json(nlohmann::json& j, const BrownThresholds& t) {
  j = {{"hue_low", t.hue_low}, {"hue_high", t.hue_high}, {"sat_min", t.sat_min},
       {"val_min", t.val_min}, {"val_max", t.val_max}};
}

void from_json(const nlohmann::json& j, BrownThresholds& t) {
  t.hue_low = j.value("hue_low", t.hue_low);
  t.hue_high = j.value("hue_high", t.hue_high);
  t.sat_min = j.value("sat_min", t.sat_min);
  t.val_min = j.value("val_min", t.val_min);
  t.val_max = j.value("val_max", t.val_max);
}

Hsv rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  Hsv out{0.0, mx > 0 ? d / mx : 0.0, mx};
  if (d > 0) {
    double h;
    if (mx == r)
      h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
      h = (b - r) / d + 2.0;
    else
      h = (r - g) / d + 4.0;
    h *= 60.0;
    if (h < 0) h += 360.0;
    out.h = h;
  }
  return out;
}

Mask brown_mask(const Image& rgb, const BrownThresholds& t) {
  if (rgb.channels != 3) throw std::invalid_argument("brown_mask expects an RGB image");
  Mask m(rgb.height, rgb.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const float* p = &rgb.data[i * 3];
    const Hsv hsv = rgb_to_hsv(p[0], p[1], p[2]);
    m.data[i] = hsv.h >= t.hue_low && hsv.h <= t.hue_high && hsv.s >= t.sat_min && hsv.v >= t.val_min &&
                hsv.v <= t.val_max;
  }
  return m;
}

DiceIou dice_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw MetricError("dice_iou: mask shapes differ");
  std::size_t inter = 0, uni = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += x && y;
    uni += x || y;
    na += x;
    nb += y;
  }
  if (uni == 0) return {1.0, 1.0};
  return {2.0 * static_cast<double>(inter) / static_cast<double>(na + nb),
          static_cast<double>(inter) / static_cast<double>(uni)};
}

double cell_count_ratio(long long gen_count, long long gt_count) {
  if (gt_count <= 0) throw MetricError("cell_count_ratio undefined for a reference count of 0");
  if (gen_count < 0) throw MetricError("cell_count_ratio: negative count");
  return static_cast<double>(gen_count - gt_count) / static_cast<double>(gt_count) * 100.0;
}

CellCounts count_cells(const CellSegmentation& segmentation) {
  CellCounts c;
  for (const auto& cell : segmentation.cells) (cell.cls == CellClass::Positive ? c.positive : c.negative)++;
  c.total = c.positive + c.negative;
  return c;
}

// --- SSIM --------------------------------------------------------------------------------

namespace {

std::vector<double> luma(const Image& img) {
  std::vector<double> out(img.pixel_count());
  if (img.channels == 1) {
    std::copy(img.data.begin(), img.data.end(), out.begin());
  } else if (img.channels == 3) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = 0.299 * img.data[i * 3] + 0.587 * img.data[i * 3 + 1] + 0.114 * img.data[i * 3 + 2];
  } else {
    throw MetricError("expected a 1- or 3-channel image");
  }
  return out;
}

// Valid-mode separable filtering: output is (h-k+1) x (w-k+1).
std::vector<double> filter_valid(const std::vector<double>& in, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * in[static_cast<std::size_t>(r) * w + c + i];
      tmp[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * tmp[static_cast<std::size_t>(r + i) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  constexpr int kWindow = 11;
  constexpr double kSigma = 1.5;
  constexpr double C1 = 0.01 * 0.01;
  constexpr double C2 = 0.03 * 0.03;
  if (!a.same_size(b)) throw MetricError("ssim: image shapes differ");
  if (a.height < kWindow || a.width < kWindow) throw MetricError("ssim: image smaller than the 11x11 window");
  const std::vector<double> x = luma(a), y = luma(b);

  std::vector<double> k(kWindow);
  double sum = 0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    k[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;

  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const int h = a.height, w = a.width;
  const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
  const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k), sxy = filter_valid(xy, h, w, k);
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + C1) * (2 * cxy + C2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
  }
  return total / static_cast<double>(mx.size());
}

// --- embeddings and FID ----------------------------------------------------------------------

std::vector<double> downsample_identity(const Image& image) {
  constexpr int kGrid = 8;
  if (image.height < kGrid || image.width < kGrid) throw MetricError("embedding needs images of at least 8x8");
  const std::vector<double> y = luma(image);
  std::vector<double> out(kGrid * kGrid);
  for (int br = 0; br < kGrid; ++br)
    for (int bc = 0; bc < kGrid; ++bc) {
      const int r0 = br * image.height / kGrid, r1 = (br + 1) * image.height / kGrid;
      const int c0 = bc * image.width / kGrid, c1 = (bc + 1) * image.width / kGrid;
      double acc = 0;
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) acc += y[static_cast<std::size_t>(r) * image.width + c];
      out[br * kGrid + bc] = acc / static_cast<double>((r1 - r0) * (c1 - c0));
    }
  return out;
}

std::vector<std::vector<double>> embed(const std::vector<Image>& images, const EmbedFn& embedder) {
  if (images.empty()) throw MetricError("embed: no images");
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(embedder ? embedder(img) : downsample_identity(img));
  return out;
}

namespace {

void moments(const std::vector<std::vector<double>>& v, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
  const std::size_t n = v.size();
  const Eigen::Index d = static_cast<Eigen::Index>(v[0].size());
  mean = Eigen::VectorXd::Zero(d);
  for (const auto& x : v) mean += Eigen::Map<const Eigen::VectorXd>(x.data(), d);
  mean /= static_cast<double>(n);
  cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& x : v) {
    const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(x.data(), d) - mean;
    cov.noalias() += c * c.transpose();
  }
  cov /= static_cast<double>(n - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() < 2 || b.size() < 2) throw MetricError("fid needs at least 2 vectors per set");
  const std::size_t d = a[0].size();
  if (d == 0) throw MetricError("fid: empty vectors");
  for (const auto* set : {&a, &b})
    for (const auto& x : *set)
      if (x.size() != d) throw MetricError("fid: vector dimensions differ");

  constexpr double kRegularization = 1e-6;
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  moments(a, mu_a, cov_a);
  moments(b, mu_b, cov_b);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  cov_a += kRegularization * eye;
  cov_b += kRegularization * eye;

  // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2); the inner product is symmetric PSD.
  const Eigen::MatrixXd root_a = psd_sqrt(cov_a);
  Eigen::MatrixXd inner = root_a * cov_b * root_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(value, 0.0);
}

// --- dataset evaluation ----------------------------------------------------------------------

std::vector<NamedImage> load_png_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<NamedImage> out;
  for (const auto& f : files) out.push_back({f.filename().string(), read_png(f)});
  return out;
}

MetricReport evaluate_images(const std::vector<NamedImage>& generated, const std::vector<NamedImage>& reference,
                             const EvalConfig& config) {
  config.thresholds.validate();
  if (generated.empty() || reference.empty()) throw MetricError("evaluation needs non-empty image sets");
  std::map<std::string, const Image*> ref_by_name;
  for (const auto& r : reference) ref_by_name[r.name] = &r.image;
  if (ref_by_name.size() != generated.size())
    throw MetricError("filename mismatch: " + std::to_string(generated.size()) + " generated vs " +
                      std::to_string(ref_by_name.size()) + " reference images");
  for (const auto& g : generated)
    if (!ref_by_name.count(g.name)) throw MetricError("filename mismatch: no reference image named " + g.name);

  std::shared_ptr<CellSegmenter> segmenter = config.segmenter;
  if (!segmenter) segmenter = std::make_shared<LocalSegmenter>(LocalSegmenterConfig{config.thresholds});

  MetricReport report;
  report.thresholds = config.thresholds;
  report.segmenter = segmenter->identity();
  report.embedder = config.embedder ? "pluggable" : "downsample_identity";
  report.n_patches = generated.size();

  std::vector<const Image*> gen_images, ref_images;
  for (const auto& g : generated) {
    gen_images.push_back(&g.image);
    ref_images.push_back(ref_by_name.at(g.name));
  }
  const auto gen_seg = segmenter->segment_many(gen_images);
  const auto ref_seg = segmenter->segment_many(ref_images);

  std::vector<Image> gen_set, ref_set;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const Image& gi = *gen_images[i];
    const Image& ri = *ref_images[i];
    if (!gi.same_size(ri) || gi.channels != ri.channels)
      throw MetricError("image " + generated[i].name + " differs in shape from its reference");
    PatchMetrics pm;
    pm.name = generated[i].name;
    pm.ssim = ssim(gi, ri);
    const DiceIou di = dice_iou(brown_mask(gi, config.thresholds), brown_mask(ri, config.thresholds));
    pm.dice = di.dice;
    pm.iou = di.iou;
    pm.generated = count_cells(gen_seg[i]);
    pm.reference = count_cells(ref_seg[i]);
    report.ssim += pm.ssim;
    report.dice += pm.dice;
    report.iou += pm.iou;
    report.generated += pm.generated;
    report.reference += pm.reference;
    report.patches.push_back(pm);
    gen_set.push_back(gi);
  }
  for (const auto& r : reference) ref_set.push_back(r.image);
  const double n = static_cast<double>(generated.size());
  report.ssim /= n;
  report.dice /= n;
  report.iou /= n;

  auto ratio = [](std::size_t gen, std::size_t ref) -> std::optional<double> {
    if (ref == 0) return std::nullopt;
    return cell_count_ratio(static_cast<long long>(gen), static_cast<long long>(ref));
  };
  report.r_total = ratio(report.generated.total, report.reference.total);
  report.r_positive = ratio(report.generated.positive, report.reference.positive);
  report.r_negative = ratio(report.generated.negative, report.reference.negative);

  if (gen_set.size() >= 2 && ref_set.size() >= 2)
    report.fid = fid(embed(gen_set, config.embedder), embed(ref_set, config.embedder));
  return report;
}

MetricReport evaluate_dataset(const fs::path& generated_dir, const fs::path& reference_dir,
                              const EvalConfig& config) {
  const auto gen = load_png_dir(generated_dir);
  if (gen.empty()) throw MetricError("no PNG images in " + generated_dir.string());
  const auto ref = load_png_dir(reference_dir);
  if (ref.empty()) throw MetricError("no PNG images in " + reference_dir.string());
  return evaluate_images(gen, ref, config);
}

namespace {

nlohmann::json counts_json(const CellCounts& c) {
  return {{"total", c.total}, {"positive", c.positive}, {"negative", c.negative}};
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

nlohmann::json report_to_json(const MetricReport& r) {
  return {{"n_patches", r.n_patches},
          {"fid", r.fid},
          {"ssim", r.ssim},
          {"iou", r.iou},
          {"dice", r.dice},
          {"r_total", optional_json(r.r_total)},
          {"r_positive", optional_json(r.r_positive)},
          {"r_negative", optional_json(r.r_negative)},
          {"counts", {{"generated", counts_json(r.generated)}, {"reference", counts_json(r.reference)}}},
          {"display",
           {{"fid", r.fid},
            {"ssim", r.ssim * 100.0},
            {"iou", r.iou * 100.0},
            {"dice", r.dice * 100.0},
            {"r_total", optional_json(r.r_total)},
            {"r_positive", optional_json(r.r_positive)},
            {"r_negative", optional_json(r.r_negative)}}},
          {"thresholds", r.thresholds},
          {"segmenter", r.segmenter},
          {"embedder", r.embedder}};
}

std::string report_to_csv(const MetricReport& r) {
  std::string out = "name,ssim,dice,iou,gen_total,gen_positive,gen_negative,ref_total,ref_positive,ref_negative\n";
  char buf[512];
  for (const auto& p : r.patches) {
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%.9g,%zu,%zu,%zu,%zu,%zu,%zu\n", p.ssim, p.dice, p.iou,
                  p.generated.total, p.generated.positive, p.generated.negative, p.reference.total,
                  p.reference.positive, p.reference.negative);
    out += p.name + buf;
  }
  return out;
}

}  // namespace scgan
