#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "mvseg/metrics.hpp"
#include "mvseg/synth.hpp"

using namespace mvseg;

TEST_CASE("phantom generation is deterministic and well-formed", "[synth]") {
  PhantomSpec ps;
  ps.size = 32;
  ps.seed = 42;
  auto [i1, m1] = generate_phantom(ps);
  auto [i2, m2] = generate_phantom(ps);
  CHECK(i1.vec() == i2.vec());
  CHECK(m1.vec() == m2.vec());

  float lo = 1e9f, hi = -1e9f;
  for (int64_t i = 0; i < i1.numel(); ++i) {
    lo = std::min(lo, i1.data()[i]);
    hi = std::max(hi, i1.data()[i]);
  }
  CHECK(lo >= 0.f);
  CHECK(hi <= 1.f);
  for (int64_t i = 0; i < m1.numel(); ++i)
    REQUIRE((m1.data()[i] == 0.f || m1.data()[i] == 1.f));

  // object fraction within the generator contract and strictly interior
  int64_t fg = 0;
  for (int64_t i = 0; i < m1.numel(); ++i) fg += m1.data()[i] != 0.f;
  double frac = double(fg) / double(m1.numel());
  CHECK(frac >= 0.05);
  CHECK(frac <= 0.40);
  const auto& d = m1.dims();
  for (int64_t z = 0; z < d[2]; ++z)
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x)
        if (x == 0 || x == d[0] - 1 || y == 0 || y == d[1] - 1 || z == 0 ||
            z == d[2] - 1)
          REQUIRE(m1.at(x, y, z) == 0.f);
}

TEST_CASE("single-ellipsoid mask volume matches the analytic value", "[synth]") {
  PhantomSpec ps;
  ps.size = 128;
  ps.seed = 7;
  ps.noise_sigma = 0.0;
  ps.forced_ellipsoid = {24, 20, 16};
  auto [img, msk] = generate_phantom(ps);
  int64_t fg = 0;
  for (int64_t i = 0; i < msk.numel(); ++i) fg += msk.data()[i] != 0.f;
  double analytic = 4.0 / 3.0 * 3.14159265358979 * 24 * 20 * 16;
  CHECK(std::abs(double(fg) - analytic) / analytic < 0.02);
}

TEST_CASE("degrade identity with d=1 reproduces the HR pair", "[synth]") {
  PhantomSpec ps;
  ps.size = 32;
  ps.seed = 3;
  auto [img, msk] = generate_phantom(ps);
  auto rec = degrade(img, msk, ViewAxis::axial, 1, AffineParams::identity(), 1.0);
  CHECK(rec.lr_image.vec() == img.vec());
  CHECK(rec.lr_mask.vec() == msk.vec());
}

TEST_CASE("degrade dims and parameter validation", "[synth]") {
  PhantomSpec ps;
  ps.size = 64;
  ps.seed = 5;
  auto [img, msk] = generate_phantom(ps);
  auto rec = degrade(img, msk, ViewAxis::axial, 8, AffineParams::identity(), 1.0);
  CHECK(rec.lr_image.dims() == std::array<int64_t, 3>{64, 64, 8});
  auto rec2 = degrade(img, msk, ViewAxis::coronal, 8, AffineParams::identity(), 1.0);
  CHECK(rec2.lr_image.dims() == std::array<int64_t, 3>{64, 8, 64});
  auto rec3 = degrade(img, msk, ViewAxis::sagittal, 8, AffineParams::identity(), 1.0);
  CHECK(rec3.lr_image.dims() == std::array<int64_t, 3>{8, 64, 64});

  AffineParams too_big;
  too_big.rotation = {deg2rad(50), 0, 0};
  CHECK_THROWS_AS(degrade(img, msk, ViewAxis::axial, 8, too_big, 1.0), Error);
  AffineParams too_far;
  too_far.translation = {0.5, 0, 0};  // ~15.8 vox at n=64, limit is 7.5
  CHECK_THROWS_AS(degrade(img, msk, ViewAxis::axial, 8, too_far, 1.0), Error);
  CHECK_THROWS_AS(degrade(img, msk, ViewAxis::axial, 8, AffineParams::identity(), 2.0),
                  Error);
}

TEST_CASE("degraded mask slices equal warped-HR mask planes", "[synth]") {
  PhantomSpec ps;
  ps.size = 32;
  ps.seed = 9;
  auto [img, msk] = generate_phantom(ps);
  AffineParams mis;
  mis.rotation = {deg2rad(10), deg2rad(-6), deg2rad(14)};
  mis.translation = {0.05, -0.03, 0.06};
  const int64_t d = 4;
  auto rec = degrade(img, msk, ViewAxis::axial, d, mis, 1.0);

  auto wmsk = warp(msk, mis, SampleMode::nearest);
  const int64_t c = d / 2;
  for (int64_t s = 0; s < 32 / d; ++s)
    for (int64_t y = 0; y < 32; ++y)
      for (int64_t x = 0; x < 32; ++x)
        REQUIRE(rec.lr_mask.at(x, y, s) == wmsk.at(x, y, s * d + c));
}

TEST_CASE("study generator self-consistency and view conventions", "[synth]") {
  StudyConfig cfg;
  cfg.size = 32;
  cfg.d_vox = 4;
  cfg.max_rot_deg = 20;
  auto st = make_study(cfg, 101);

  // axial view is the identity-pose reference
  CHECK(st.views[0].axis == ViewAxis::axial);
  for (double r : st.views[0].true_misalignment.rotation) CHECK(r == 0.0);
  for (double t : st.views[0].true_misalignment.translation) CHECK(t == 0.0);

  // regenerating each view from the stored transform reproduces it exactly
  for (const auto& v : st.views) {
    auto redo = degrade(st.hr_image, st.hr_mask, v.axis, cfg.d_vox,
                        v.true_misalignment, v.gamma);
    for (int64_t i = 0; i < v.lr_image.numel(); ++i)
      REQUIRE(std::abs(redo.lr_image.data()[i] - v.lr_image.data()[i]) <= 1e-6f);
    CHECK(redo.lr_mask.vec() == v.lr_mask.vec());
  }
}

TEST_CASE("degradation preserves single-component topology", "[synth]") {
  StudyConfig cfg;
  cfg.size = 64;
  cfg.d_vox = 8;
  cfg.max_rot_deg = 20;
  for (uint64_t seed : {11ull, 22ull}) {
    auto st = make_study(cfg, seed);
    REQUIRE(count_mask_components(st.hr_mask) == 1);
    for (const auto& v : st.views)
      CHECK(count_mask_components(v.lr_mask) == 1);
  }
}

TEST_CASE("build_corpus layout, determinism and oracle round trip", "[synth]") {
  namespace fs = std::filesystem;
  auto root = fs::temp_directory_path() / "mvseg_corpus_test";
  fs::remove_all(root);

  StudyConfig cfg;
  cfg.size = 32;
  cfg.d_vox = 4;
  cfg.max_rot_deg = 15;
  auto manifest = build_corpus(2, 1, cfg, 77, root.string());
  CHECK(manifest["studies"].size() == 3);

  // layout: manifest + per-study SMV files
  CHECK(fs::exists(root / "manifest.json"));
  for (const char* f :
       {"hr_img.smv", "hr_msk.smv", "view_axial_img.smv", "view_axial_msk.smv",
        "view_coronal_img.smv", "view_coronal_msk.smv", "view_sagittal_img.smv",
        "view_sagittal_msk.smv"})
    CHECK(fs::exists(root / "study_0" / f));

  // non-empty target rejected without force
  CHECK_THROWS_AS(build_corpus(2, 1, cfg, 77, root.string()), Error);

  // same seed regenerates an identical manifest
  auto root2 = fs::temp_directory_path() / "mvseg_corpus_test2";
  fs::remove_all(root2);
  auto manifest2 = build_corpus(2, 1, cfg, 77, root2.string());
  CHECK(manifest.dump() == manifest2.dump());

  // stored transforms reproduce the stored LR views
  auto m = read_manifest(root.string());
  auto st = load_study(root.string(), m["studies"][1]);
  for (const auto& v : st.views) {
    auto redo = degrade(st.hr_image, st.hr_mask, v.axis, cfg.d_vox,
                        v.true_misalignment, v.gamma);
    for (int64_t i = 0; i < v.lr_image.numel(); ++i)
      REQUIRE(std::abs(redo.lr_image.data()[i] - v.lr_image.data()[i]) <= 1e-6f);
    REQUIRE(redo.lr_mask.vec() == v.lr_mask.vec());
  }

  // pairwise ground-truth transforms are consistent by construction
  const auto& views = st.views;
  auto rel = compose(views[1].true_misalignment,
                     inverse(views[0].true_misalignment));
  auto direct = views[1].true_misalignment;  // axial is identity
  CHECK(rotation_distance(rel, direct) < 1e-9);

  fs::remove_all(root);
  fs::remove_all(root2);
}
