#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "fedwsidd/data.hpp"
#include "fedwsidd/stain.hpp"
#include "helpers.hpp"

using namespace fedwsidd;
namespace fs = std::filesystem;

namespace {

ToyGenConfig small_cfg() {
  ToyGenConfig cfg = ca16_preset();
  cfg.slides_per_class_per_centre = 10;
  cfg.patches_per_slide = 4;
  cfg.patch_height = cfg.patch_width = 16;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("presets") {
  CHECK(ca16_preset().num_centres == 2);
  CHECK(ca17_preset().num_centres == 5);
  for (const auto& p : {ca16_preset(), ca17_preset()}) {
    CHECK(p.slides_per_class_per_centre == 20);
    CHECK(p.patches_per_slide == 30);
    CHECK(p.patch_height == 64);
    CHECK(p.test_fraction == doctest::Approx(0.2));
    CHECK(p.tumor_patch_fraction < 0.5 + 1e-12);
    CHECK_NOTHROW(p.validate());
  }
}

TEST_CASE("toy federation shape and split") {
  const auto cfg = small_cfg();
  const auto data = generate_toy_federation(cfg);
  REQUIRE(data.size() == 2u);
  CHECK(data[0].centre_id == "C1");
  CHECK(data[1].centre_id == "C2");
  for (const auto& ds : data) {
    CHECK(validate_client_dataset(ds).empty());
    CHECK(ds.test_slides.size() == 4u);  // 2 per class
    CHECK(ds.train_slides.size() == 16u);
    int per_class[2] = {0, 0};
    for (const auto& s : ds.test_slides) ++per_class[s.label.index];
    CHECK(per_class[0] == 2);
    CHECK(per_class[1] == 2);
    for (const auto& s : ds.train_slides) {
      CHECK(s.patches.size() == 4u);
      CHECK(s.patches[0].height == 16);
    }
  }
}

TEST_CASE("toy federation is deterministic in the seed") {
  auto cfg = small_cfg();
  const auto a = generate_toy_federation(cfg);
  const auto b = generate_toy_federation(cfg);
  CHECK(a[0].train_slides == b[0].train_slides);
  cfg.seed = 9;
  const auto c = generate_toy_federation(cfg);
  CHECK_FALSE(a[0].train_slides[0].patches == c[0].train_slides[0].patches);
}

TEST_CASE("centre stains are shifted only when asked") {
  auto cfg = small_cfg();
  cfg.stain_shift_strength = 0.0;
  const auto s0 = centre_stain(cfg, 0), s1 = centre_stain(cfg, 1);
  CHECK((s0.vectors - s1.vectors).norm() < 1e-12);
  cfg.stain_shift_strength = 1.0;
  const auto t0 = centre_stain(cfg, 0), t1 = centre_stain(cfg, 1);
  CHECK(stain::angular_distance_deg(t0.vectors.col(0), t1.vectors.col(0)) > 1.0);
  for (int j = 0; j < 2; ++j) CHECK(t0.vectors.col(j).norm() == doctest::Approx(1.0));
  CHECK(stain::angular_distance_deg(t0.vectors.col(0), t0.vectors.col(1)) >= 18.0);
}

TEST_CASE("tumor fields carry more nuclei") {
  auto cfg = small_cfg();
  cfg.patch_height = cfg.patch_width = 64;
  cfg.class_signal = 1.0;
  auto rng = derive_stream(1, "fields");
  double normal = 0, tumor = 0;
  for (int i = 0; i < 40; ++i) {
    normal += oracle_features(sample_field(cfg, 0.0, rng))[2];
    tumor += oracle_features(sample_field(cfg, 1.0, rng))[2];
  }
  CHECK(tumor > 1.3 * normal);
}

TEST_CASE("generator records concentration fields") {
  auto cfg = small_cfg();
  cfg.num_centres = 1;
  std::vector<ToySlideRecord> fields;
  const auto data = generate_toy_federation(cfg, &fields);
  CHECK(fields.size() == 20u);
  CHECK(fields[0].fields.size() == 4u);
}

TEST_CASE("area resize") {
  PatchTensor p(1, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) p.at(0, y, x) = static_cast<float>(y * 4 + x) / 16.0f;
  CHECK(area_resize(p, 4, 4) == p);
  const auto half = area_resize(p, 2, 2);
  CHECK(half.at(0, 0, 0) == doctest::Approx((0 + 1 + 4 + 5) / 64.0));
  const auto odd = area_resize(p, 3, 3);
  double m0 = 0, m1 = 0;
  for (float v : p.data) m0 += v / 16.0;
  for (float v : odd.data) m1 += v / 9.0;
  CHECK(m1 == doctest::Approx(m0).epsilon(1e-6));
}

TEST_CASE("png round trip quantizes to 8 bits") {
  TempDir dir("fedwsidd_png_test");
  auto rng = derive_stream(2, "png");
  PatchTensor p(3, 5, 7);
  for (auto& v : p.data) v = static_cast<float>(rng.uniform());
  const auto path = (dir.path / "p.png").string();
  write_png(p, path);
  const auto back = read_png(path);
  REQUIRE(back.same_shape(p));
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::fabs(back.data[i] - p.data[i]) <= 0.5 / 255.0 + 1e-6);
  CHECK_THROWS_AS(read_png((dir.path / "missing.png").string()), Error);
  std::ofstream(dir.path / "junk.png") << "not a png";
  try {
    read_png((dir.path / "junk.png").string());
    FAIL("no throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::UndecodableImage);
  }
}

TEST_CASE("patch directory export and ingest") {
  TempDir dir("fedwsidd_manifest_test");
  const auto data = generate_toy_federation(small_cfg());
  const auto manifest = export_patch_directory(data[0], (dir.path / "C1").string());
  CHECK(fs::exists(manifest));
  const auto back = ingest_patch_directory((dir.path / "C1").string(), manifest, 16, 16);
  CHECK(back.centre_id == "C1");
  CHECK(back.num_classes == 2);
  REQUIRE(back.train_slides.size() == data[0].train_slides.size());
  REQUIRE(back.test_slides.size() == data[0].test_slides.size());
  CHECK(back.train_slides[3].id == data[0].train_slides[3].id);
  CHECK(back.train_slides[3].label == data[0].train_slides[3].label);
  const auto& a = back.train_slides[3].patches[1].data;
  const auto& b = data[0].train_slides[3].patches[1].data;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= 0.5 / 255.0 + 1e-6);

  // resized on ingest
  const auto small = ingest_patch_directory((dir.path / "C1").string(), manifest, 8, 8);
  CHECK(small.train_slides[0].patches[0].height == 8);
}

TEST_CASE("manifest errors") {
  TempDir dir("fedwsidd_manifest_errors");
  const auto m = (dir.path / "manifest.yaml").string();
  auto expect = [&](const std::string& text, Errc code) {
    std::ofstream(m) << text;
    try {
      ingest_patch_directory(dir.path.string(), m, 8, 8);
      FAIL("no throw for: " << text);
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };
  expect("schema: 2\ncentre: C1\nnum_classes: 2\nslides: []\n", Errc::ManifestSchema);
  expect("schema: 1\nnum_classes: 2\nslides: []\n", Errc::ManifestSchema);
  expect("schema: 1\ncentre: C1\nnum_classes: 2\nslides:\n  - id: a\n    label: 5\n    split: train\n    patches: [x.png]\n",
         Errc::ManifestSchema);
  expect("schema: 1\ncentre: C1\nnum_classes: 2\nslides:\n  - id: a\n    label: 0\n    split: train\n    patches: [x.png]\n",
         Errc::MissingFile);
  CHECK_THROWS_AS(ingest_patch_directory(dir.path.string(), (dir.path / "none.yaml").string(), 8, 8), Error);
}

TEST_CASE("slide tensors round trip") {
  const auto data = generate_toy_federation(small_cfg());
  const auto& slides = data[1].test_slides;
  CHECK(slides_from_tensors(slides_to_tensors(slides)) == slides);
  SyntheticSet set;
  set.centre_id = "C2";
  set.slides = {slides[0], slides[1]};
  for (auto& s : set.slides) s.kind = SlideKind::synthetic;
  set.slides_per_class = 1;
  set.patches_per_slide = 4;
  const auto back = synthetic_from_tensors(synthetic_to_tensors(set));
  CHECK(back.slides == set.slides);
  CHECK(back.centre_id == "C2");
  CHECK(back.patches_per_slide == 4);
}

TEST_CASE("toy config validation") {
  auto cfg = small_cfg();
  cfg.tumor_patch_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_cfg();
  cfg.test_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_cfg();
  cfg.stain_matrices.resize(1);
  CHECK_THROWS_AS(cfg.validate(), Error);
}
