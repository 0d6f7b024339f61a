#include "scgan/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

namespace scgan {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Stain stain) {
  switch (stain) {
    case Stain::HE: return "HE";
    case Stain::CDX2: return "CDX2";
    case Stain::CK818: return "CK818";
  }
  return "?";
}

Stain parse_stain(const std::string& name) {
  if (name == "HE") return Stain::HE;
  if (name == "CDX2") return Stain::CDX2;
  if (name == "CK818") return Stain::CK818;
  throw DataError("unknown stain \"" + name + "\"");
}

StainPatch::StainPatch(Image pixels, Stain stain, std::string patient_id,
                       std::optional<std::string> pair_id)
    : pixels_(std::move(pixels)), stain_(stain), patient_id_(std::move(patient_id)),
      pair_id_(std::move(pair_id)) {
  if (pixels_.channels != 3) throw DataError("stain patch must be RGB");
  if (pixels_.height != pixels_.width)
    throw DataError("stain patch must be square, got " + std::to_string(pixels_.height) + "x" +
                    std::to_string(pixels_.width));
  if (pixels_.height <= 0 || pixels_.height % 4 != 0)
    throw DataError("stain patch side must be a positive multiple of 4, got " +
                    std::to_string(pixels_.height));
  for (float v : pixels_.data)
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("stain patch pixel outside [0,1]");
}

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const {
  fs::path p(entry.path);
  return p.is_absolute() ? p : root / p;
}

void validate_manifest(const DatasetManifest& manifest) {
  std::set<std::pair<Stain, std::string>> seen;
  for (const auto& e : manifest.entries) {
    if (e.pair_id && !seen.emplace(e.stain, *e.pair_id).second)
      throw DataError("duplicate pair: stain " + to_string(e.stain) + " has pair_id \"" + *e.pair_id +
                      "\" more than once");
  }
  for (const auto& e : manifest.entries) {
    const auto p = manifest.resolve(e);
    if (!fs::exists(p)) throw DataError("dangling path: " + p.string());
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest manifest;
  try {
    if (!doc.is_object() || !doc.contains("entries") || !doc["entries"].is_array())
      throw DataError("malformed manifest: expected object with \"entries\" array");
    fs::path root = doc.value("root", std::string("."));
    manifest.root = root.is_absolute() ? root : path.parent_path() / root;
    std::size_t i = 0;
    for (const auto& rec : doc["entries"]) {
      const std::string where = "malformed record " + std::to_string(i++) + ": ";
      if (!rec.is_object()) throw DataError(where + "not an object");
      for (const char* key : {"path", "stain", "patient_id"})
        if (!rec.contains(key) || !rec[key].is_string())
          throw DataError(where + "missing string field \"" + key + "\"");
      ManifestEntry entry;
      entry.path = rec["path"].get<std::string>();
      try {
        entry.stain = parse_stain(rec["stain"].get<std::string>());
      } catch (const DataError& e) {
        throw DataError(where + e.what());
      }
      entry.patient_id = rec["patient_id"].get<std::string>();
      if (rec.contains("pair_id") && !rec["pair_id"].is_null()) {
        if (!rec["pair_id"].is_string()) throw DataError(where + "pair_id must be string or null");
        entry.pair_id = rec["pair_id"].get<std::string>();
      }
      manifest.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  validate_manifest(manifest);
  return manifest;
}

std::string manifest_to_json(const DatasetManifest& manifest) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"path", e.path},
                       {"stain", to_string(e.stain)},
                       {"patient_id", e.patient_id},
                       {"pair_id", e.pair_id ? json(*e.pair_id) : json(nullptr)}});
  }
  json doc = {{"root", manifest.root.generic_string()}, {"entries", entries}};
  return doc.dump(2) + "\n";
}

std::vector<int> tile_offsets(int extent, int tile, int stride) {
  if (tile <= 0 || stride < 1) throw DataError("tile and stride must be positive");
  if (tile > extent)
    throw DataError("tile " + std::to_string(tile) + " exceeds image dimension " + std::to_string(extent));
  std::vector<int> offsets;
  for (int pos = 0;; pos += stride) {
    offsets.push_back(std::min(pos, extent - tile));
    if (pos + tile >= extent) break;
  }
  return offsets;
}

std::vector<StainPatch> tile_image(const Image& image, int tile, int stride, Stain stain,
                                   const std::string& patient_id) {
  const auto rows = tile_offsets(image.height, tile, stride);
  const auto cols = tile_offsets(image.width, tile, stride);
  std::vector<StainPatch> out;
  out.reserve(rows.size() * cols.size());
  for (int r0 : rows) {
    for (int c0 : cols) {
      Image patch(tile, tile, image.channels);
      for (int r = 0; r < tile; ++r) {
        const float* src = &image.data[(static_cast<std::size_t>(r0 + r) * image.width + c0) * image.channels];
        std::copy_n(src, static_cast<std::size_t>(tile) * image.channels,
                    &patch.data[static_cast<std::size_t>(r) * tile * image.channels]);
      }
      out.emplace_back(std::move(patch), stain, patient_id);
    }
  }
  return out;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

DomainIndex index_domains(const std::vector<Stain>& stains,
                          const std::vector<std::optional<std::string>>& pair_ids) {
  DomainIndex index;
  std::map<std::string, std::size_t> ihc_by_pair;
  for (std::size_t i = 0; i < stains.size(); ++i) {
    if (stains[i] == Stain::HE) {
      index.he.push_back(i);
    } else {
      index.ihc.push_back(i);
      if (pair_ids[i]) ihc_by_pair.emplace(*pair_ids[i], index.ihc.size() - 1);
    }
  }
  for (std::size_t h = 0; h < index.he.size(); ++h) {
    const auto& pid = pair_ids[index.he[h]];
    if (!pid) continue;
    auto it = ihc_by_pair.find(*pid);
    if (it != ihc_by_pair.end()) index.pairs.emplace_back(h, it->second);
  }
  return index;
}

namespace {

// First `k` entries of a seeded Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

BatchSelection select_batch(const DomainIndex& index, BatchMode mode, int batch, std::uint64_t seed) {
  if (batch < 1) throw DataError("batch size must be positive");
  const auto k = static_cast<std::size_t>(batch);
  std::mt19937_64 rng(seed);
  BatchSelection sel;
  if (mode == BatchMode::Registered) {
    if (index.pairs.size() < k)
      throw DataError("insufficient pairs: need " + std::to_string(k) + ", have " +
                      std::to_string(index.pairs.size()));
    for (std::size_t p : draw_without_replacement(index.pairs.size(), k, rng)) {
      sel.he.push_back(index.pairs[p].first);
      sel.ihc.push_back(index.pairs[p].second);
    }
    sel.registered = true;
  } else {
    if (index.he.size() < k || index.ihc.size() < k)
      throw DataError("insufficient patches: need " + std::to_string(k) + " per domain, have " +
                      std::to_string(index.he.size()) + " H&E / " + std::to_string(index.ihc.size()) +
                      " IHC");
    sel.he = draw_without_replacement(index.he.size(), k, rng);
    sel.ihc = draw_without_replacement(index.ihc.size(), k, rng);
  }
  return sel;
}

PatchDataset PatchDataset::from_patches(std::vector<StainPatch> patches) {
  PatchDataset ds;
  std::vector<Stain> stains;
  std::vector<std::optional<std::string>> pairs;
  for (const auto& p : patches) {
    stains.push_back(p.stain());
    pairs.push_back(p.pair_id());
  }
  ds.patches = std::move(patches);
  ds.index = index_domains(stains, pairs);
  if (!ds.patches.empty()) {
    const int size = ds.patches.front().size();
    for (const auto& p : ds.patches)
      if (p.size() != size) throw DataError("dataset mixes patch sizes");
  }
  std::set<Stain> markers;
  for (std::size_t i : ds.index.ihc) markers.insert(ds.patches[i].stain());
  if (markers.size() > 1) throw DataError("dataset mixes IHC markers");
  return ds;
}

Stain PatchDataset::ihc_stain() const {
  if (index.ihc.empty()) throw DataError("dataset has no IHC patches");
  return patches[index.ihc.front()].stain();
}

int PatchDataset::patch_size() const {
  if (patches.empty()) throw DataError("empty dataset");
  return patches.front().size();
}

PatchDataset load_dataset(const DatasetManifest& manifest) {
  std::vector<StainPatch> patches;
  patches.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries)
    patches.emplace_back(read_png(manifest.resolve(e)), e.stain, e.patient_id, e.pair_id);
  return PatchDataset::from_patches(std::move(patches));
}

PatchDataset synthetic_dataset(const SynthSpec& spec, int n_pairs, std::uint64_t seed) {
  std::vector<StainPatch> patches;
  patches.reserve(static_cast<std::size_t>(n_pairs) * 2);
  std::vector<StainPatch> ihc;
  for (int i = 0; i < n_pairs; ++i) {
    auto pair = generate_synthetic_pair(spec, mix_seed(seed, static_cast<std::uint64_t>(i)));
    patches.push_back(std::move(pair.he));
    ihc.push_back(std::move(pair.ihc));
  }
  for (auto& p : ihc) patches.push_back(std::move(p));
  return PatchDataset::from_patches(std::move(patches));
}

PatchBatch sample_batch(const PatchDataset& dataset, BatchMode mode, int batch, std::uint64_t seed) {
  const auto sel = select_batch(dataset.index, mode, batch, seed);
  PatchBatch out;
  out.registered = sel.registered;
  for (std::size_t i : sel.he) out.he.push_back(dataset.patches[dataset.index.he[i]]);
  for (std::size_t i : sel.ihc) out.ihc.push_back(dataset.patches[dataset.index.ihc[i]]);
  return out;
}

PatchBatch sample_batch(const DatasetManifest& manifest, BatchMode mode, int batch, std::uint64_t seed) {
  std::vector<Stain> stains;
  std::vector<std::optional<std::string>> pairs;
  for (const auto& e : manifest.entries) {
    stains.push_back(e.stain);
    pairs.push_back(e.pair_id);
  }
  const auto index = index_domains(stains, pairs);
  const auto sel = select_batch(index, mode, batch, seed);
  auto load = [&](std::size_t entry) {
    const auto& e = manifest.entries[entry];
    return StainPatch(read_png(manifest.resolve(e)), e.stain, e.patient_id, e.pair_id);
  };
  PatchBatch out;
  out.registered = sel.registered;
  for (std::size_t i : sel.he) out.he.push_back(load(index.he[i]));
  for (std::size_t i : sel.ihc) out.ihc.push_back(load(index.ihc[i]));
  return out;
}

}  // namespace scgan
