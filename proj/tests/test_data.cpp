#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "scgan/data.hpp"
#include "scgan/metrics.hpp"
#include "support.hpp"

using namespace scgan;
using scgan::test::TempDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

Image flat(int size, float v) { return Image(size, size, 3, v); }

// Manifest with n registered H&E/CDX2 pairs on disk.
std::filesystem::path paired_manifest(const TempDir& dir, int n) {
  DatasetManifest m{dir.path, {}};
  for (int i = 0; i < n; ++i) {
    const std::string id = "p" + std::to_string(i);
    write_png(dir.path / (id + "_he.png"), flat(8, 0.1f * i));
    write_png(dir.path / (id + "_ihc.png"), flat(8, 0.1f * i + 0.05f));
    m.entries.push_back({id + "_he.png", Stain::HE, "pt", id});
    m.entries.push_back({id + "_ihc.png", Stain::CDX2, "pt", id});
  }
  const auto path = dir.path / "manifest.json";
  write_text(path, manifest_to_json(m));
  return path;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("png round trip is exact on the byte grid") {
    TempDir dir("png");
    test::Rng rng(3);
    Image img = test::random_image(rng, 9, 7, 3);
    quantize_to_bytes(img);
    write_png(dir.path / "a.png", img);
    CHECK(read_png(dir.path / "a.png") == img);
    Image gray = test::random_image(rng, 5, 6, 1);
    quantize_to_bytes(gray);
    CHECK(decode_png(encode_png(gray)) == gray);
  }

  TEST_CASE("manifest loads valid entries") {
    TempDir dir("manifest");
    const auto path = paired_manifest(dir, 2);
    const auto m = load_manifest(path);
    CHECK(m.entries.size() == 4);
    CHECK(m.entries[1].stain == Stain::CDX2);
    CHECK(m.entries[1].pair_id == std::optional<std::string>("p0"));
  }

  TEST_CASE("manifest errors") {
    TempDir dir("manifest_err");
    write_png(dir.path / "a.png", flat(8, 0.5f));

    SUBCASE("dangling path") {
      write_text(dir.path / "m.json",
                 R"({"entries":[{"path":"nope.png","stain":"HE","patient_id":"x"}]})");
      CHECK_THROWS_WITH_AS(load_manifest(dir.path / "m.json"), doctest::Contains("dangling path"), DataError);
    }
    SUBCASE("duplicate pair") {
      write_text(dir.path / "m.json", R"({"entries":[
        {"path":"a.png","stain":"CDX2","patient_id":"x","pair_id":"p7"},
        {"path":"a.png","stain":"CDX2","patient_id":"x","pair_id":"p7"}]})");
      CHECK_THROWS_WITH_AS(load_manifest(dir.path / "m.json"), doctest::Contains("duplicate pair"), DataError);
    }
    SUBCASE("unknown stain") {
      write_text(dir.path / "m.json", R"({"entries":[{"path":"a.png","stain":"PAS","patient_id":"x"}]})");
      CHECK_THROWS_AS(load_manifest(dir.path / "m.json"), DataError);
    }
    SUBCASE("malformed json") {
      write_text(dir.path / "m.json", "{");
      CHECK_THROWS_AS(load_manifest(dir.path / "m.json"), DataError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_manifest(dir.path / "absent.json"), DataError); }
  }

  TEST_CASE("tiling offsets and coverage") {
    CHECK(tile_offsets(512, 256, 256) == std::vector<int>{0, 256});
    CHECK(tile_offsets(512, 512, 512) == std::vector<int>{0});
    CHECK(tile_offsets(500, 256, 256) == std::vector<int>{0, 244});

    const Image big = flat(512, 0.3f);
    CHECK(tile_image(big, 256, 256, Stain::HE, "p").size() == 4);
    const auto one = tile_image(big, 512, 512, Stain::HE, "p");
    REQUIRE(one.size() == 1);
    CHECK(one[0].pixels() == big);
    CHECK(tile_image(flat(500, 0.3f), 256, 256, Stain::HE, "p").size() == 4);
    CHECK_THROWS_AS(tile_offsets(100, 128, 64), DataError);

    // Property: full coverage whenever stride <= tile.
    test::Rng rng(11);
    for (int iter = 0; iter < 200; ++iter) {
      const int tile = test::uniform_int(rng, 1, 40);
      const int extent = test::uniform_int(rng, tile, 120);
      const int stride = test::uniform_int(rng, 1, tile);
      std::vector<int> hit(extent, 0);
      for (int o : tile_offsets(extent, tile, stride)) {
        REQUIRE(o >= 0);
        REQUIRE(o + tile <= extent);
        for (int i = o; i < o + tile; ++i) hit[i] = 1;
      }
      for (int h : hit) REQUIRE(h == 1);
    }
  }

  TEST_CASE("tiles copy the right pixels") {
    test::Rng rng(5);
    Image img = test::random_image(rng, 20, 20, 3);
    const auto tiles = tile_image(img, 12, 8, Stain::HE, "p");
    REQUIRE(tiles.size() == 4);
    // Second tile in the first row starts at the clamped column 8.
    CHECK(tiles[1].pixels().at(0, 0, 1) == img.at(0, 8, 1));
    CHECK(tiles[3].pixels().at(11, 11, 2) == img.at(19, 19, 2));
  }

  TEST_CASE("stain patch invariants") {
    CHECK_THROWS_AS(StainPatch(Image(8, 8, 1), Stain::HE, "p"), DataError);
    CHECK_THROWS_AS(StainPatch(Image(8, 12, 3), Stain::HE, "p"), DataError);
    CHECK_THROWS_AS(StainPatch(Image(6, 6, 3), Stain::HE, "p"), DataError);
    CHECK_THROWS_AS(StainPatch(Image(8, 8, 3, 1.5f), Stain::HE, "p"), DataError);
    CHECK_NOTHROW(StainPatch(Image(8, 8, 3, 1.0f), Stain::HE, "p"));
  }

  TEST_CASE("synthetic pair contract") {
    SynthSpec spec;
    spec.n_glands = 3;
    const auto a = generate_synthetic_pair(spec, 1);
    CHECK(a.truth.gland_boundaries.size() == 3);
    CHECK(a.truth.nuclei_centroids.size() >= 3);
    CHECK(a.he.stain() == Stain::HE);
    CHECK(a.ihc.stain() == Stain::CDX2);
    CHECK(a.he.pair_id() == a.ihc.pair_id());

    const auto b = generate_synthetic_pair(spec, 1);
    CHECK(a.he == b.he);
    CHECK(a.ihc == b.ihc);
    CHECK(truth_to_json(a.truth) == truth_to_json(b.truth));
    CHECK_FALSE(generate_synthetic_pair(spec, 2).he == a.he);
  }

  TEST_CASE("noise-free CDX2 brown matches positive truth") {
    SynthSpec spec;
    spec.noise_level = 0;
    for (std::uint64_t seed : {1, 2, 3, 4}) {
      const auto p = generate_synthetic_pair(spec, seed);
      const auto s = dice_iou(brown_mask(p.ihc.pixels()), p.truth.positive_mask);
      CHECK(s.iou >= 0.9);
    }
  }

  TEST_CASE("brown area stays inside the dilated truth region") {
    auto dilate = [](const Mask& m, int r) {
      Mask out(m.height, m.width);
      for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
          if (!m.at(y, x)) continue;
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy >= 0 && yy < m.height && xx >= 0 && xx < m.width) out.at(yy, xx) = 1;
            }
        }
      return out;
    };
    for (Marker marker : {Marker::CDX2_like, Marker::CK818_like}) {
      SynthSpec spec;
      spec.marker = marker;
      for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const auto p = generate_synthetic_pair(spec, seed);
        const Mask region = dilate(marker == Marker::CDX2_like ? p.truth.nuclei_mask : p.truth.gland_mask, 2);
        const Mask brown = brown_mask(p.ihc.pixels());
        std::size_t outside = 0;
        for (std::size_t i = 0; i < brown.data.size(); ++i) outside += brown.data[i] && !region.data[i];
        CHECK(outside == 0);
      }
    }
  }

  TEST_CASE("synth spec json") {
    const SynthSpec s = nlohmann::json::parse(R"({"image_size":64,"n_glands":2,"nuclei_per_gland":[3,5],
                                                  "marker":"CK818_like","noise_level":0.01})")
                            .get<SynthSpec>();
    CHECK(s.image_size == 64);
    CHECK(s.nuclei_min == 3);
    CHECK(s.nuclei_max == 5);
    CHECK(s.marker == Marker::CK818_like);
    CHECK(nlohmann::json(s).get<SynthSpec>().nuclei_max == 5);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"nuclei_per_gland":[5,3]})").get<SynthSpec>(), DataError);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"marker":"nope"})").get<SynthSpec>(), DataError);
  }

  TEST_CASE("registered batches keep pairs aligned") {
    TempDir dir("batch");
    const auto manifest = load_manifest(paired_manifest(dir, 5));
    const auto b = sample_batch(manifest, BatchMode::Registered, 2, 9);
    REQUIRE(b.he.size() == 2);
    REQUIRE(b.ihc.size() == 2);
    CHECK(b.registered);
    for (int i = 0; i < 2; ++i) CHECK(b.he[i].pair_id() == b.ihc[i].pair_id());
    const auto again = sample_batch(manifest, BatchMode::Registered, 2, 9);
    for (int i = 0; i < 2; ++i) {
      CHECK(again.he[i] == b.he[i]);
      CHECK(again.ihc[i] == b.ihc[i]);
    }
  }

  TEST_CASE("registered sampling without pairs fails") {
    std::vector<Stain> stains{Stain::HE, Stain::CDX2, Stain::HE, Stain::CDX2};
    std::vector<std::optional<std::string>> ids(4);
    const auto index = index_domains(stains, ids);
    CHECK(index.pairs.empty());
    CHECK_THROWS_WITH_AS(select_batch(index, BatchMode::Registered, 1, 0), doctest::Contains("insufficient pairs"),
                         DataError);
    CHECK_NOTHROW(select_batch(index, BatchMode::Unregistered, 1, 0));
  }

  TEST_CASE("registered selection property") {
    test::Rng rng(77);
    for (int iter = 0; iter < 100; ++iter) {
      const int n = test::uniform_int(rng, 1, 12);
      std::vector<Stain> stains;
      std::vector<std::optional<std::string>> ids;
      for (int i = 0; i < n; ++i) {
        const bool paired = test::uniform(rng) < 0.7;
        const std::string id = "id" + std::to_string(i);
        stains.push_back(Stain::HE);
        ids.push_back(paired ? std::optional(id) : std::nullopt);
        stains.push_back(Stain::CK818);
        ids.push_back(paired ? std::optional(id) : std::nullopt);
      }
      // Shuffle the entry order so pairs are not adjacent.
      std::vector<std::size_t> perm(stains.size());
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<Stain> s2;
      std::vector<std::optional<std::string>> i2;
      for (auto p : perm) {
        s2.push_back(stains[p]);
        i2.push_back(ids[p]);
      }
      const auto index = index_domains(s2, i2);
      if (index.pairs.empty()) continue;
      const int batch = test::uniform_int(rng, 1, static_cast<int>(std::min<std::size_t>(4, index.pairs.size())));
      const auto sel = select_batch(index, BatchMode::Registered, batch, rng());
      REQUIRE(sel.he.size() == static_cast<std::size_t>(batch));
      for (int i = 0; i < batch; ++i) {
        const std::size_t h = index.he[sel.he[i]], c = index.ihc[sel.ihc[i]];
        REQUIRE(s2[h] == Stain::HE);
        REQUIRE(s2[c] == Stain::CK818);
        REQUIRE(i2[h].has_value());
        REQUIRE(i2[h] == i2[c]);
      }
    }
  }

  TEST_CASE("datasets reject mixed markers") {
    SynthSpec a, b;
    b.marker = Marker::CK818_like;
    auto pa = generate_synthetic_pair(a, 1), pb = generate_synthetic_pair(b, 2);
    CHECK_THROWS_WITH_AS(PatchDataset::from_patches({pa.he, pa.ihc, pb.ihc}), doctest::Contains("mixes IHC markers"),
                         DataError);
  }

  TEST_CASE("mix_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 20; ++s)
      for (std::uint64_t k = 0; k < 20; ++k) seen.insert(mix_seed(s, k));
    CHECK(seen.size() == 400);
    CHECK(mix_seed(5, 3) == mix_seed(5, 3));
  }
}
