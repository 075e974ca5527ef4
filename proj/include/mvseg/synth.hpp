#pragma once

// Synthetic ground-truth studies: textured phantoms with known masks, degraded
// into three unaligned anisotropic views with known misalignment transforms.
// Stands in for real multi-view acquisitions and supplies exact oracles for
// registration and fusion quality.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvseg/common.hpp"
#include "mvseg/geometry.hpp"
#include "mvseg/rng.hpp"
#include "mvseg/volume.hpp"

namespace mvseg {

struct PhantomSpec {
  int64_t size = 64;
  int max_lobes = 4;       // union of 1..max_lobes ellipsoids
  double noise_sigma = 0.01;
  uint64_t seed = 0;
  // Test hook: when set, generates exactly one axis-aligned centered
  // ellipsoid with these semi-axes (voxels) and no texture inside the check.
  std::array<double, 3> forced_ellipsoid{0, 0, 0};
};

struct ViewRecord {
  ViewAxis axis = ViewAxis::axial;
  Volume lr_image;
  Volume lr_mask;
  AffineParams true_misalignment;
  double gamma = 1.0;  // applied monotone contrast map: v -> v^gamma
};

struct Study {
  Volume hr_image;
  Volume hr_mask;
  std::array<ViewRecord, 3> views;  // axial, coronal, sagittal
  int64_t slice_distance_vox = 8;
};

namespace detail {

struct Lobe {
  Vec3 center;        // voxel coords
  Vec3 semi_axes;     // voxels
  Mat3 rot;
};

inline bool inside_lobe(const Lobe& l, double x, double y, double z) {
  Vec3 d = {x - l.center[0], y - l.center[1], z - l.center[2]};
  Vec3 q = mat3_apply(l.rot, d);
  double s = 0;
  for (int i = 0; i < 3; ++i) {
    double t = q[i] / l.semi_axes[i];
    s += t * t;
  }
  return s <= 1.0;
}

struct Blob {
  Vec3 center;
  double sigma;
  double amp;
};

inline double blob_field(const std::vector<Blob>& blobs, double x, double y,
                         double z) {
  double v = 0;
  for (const auto& b : blobs) {
    double dx = x - b.center[0], dy = y - b.center[1], dz = z - b.center[2];
    double r2 = dx * dx + dy * dy + dz * dz;
    v += b.amp * std::exp(-r2 / (2.0 * b.sigma * b.sigma));
  }
  return v;
}

inline int64_t connected_components_6(const Volume& mask) {
  const auto& d = mask.dims();
  std::vector<uint8_t> seen(static_cast<size_t>(mask.numel()), 0);
  auto idx = [&](int64_t x, int64_t y, int64_t z) {
    return static_cast<size_t>(x + d[0] * (y + d[1] * z));
  };
  int64_t comps = 0;
  std::vector<std::array<int64_t, 3>> stack;
  for (int64_t z = 0; z < d[2]; ++z)
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x) {
        if (mask.at(x, y, z) == 0.f || seen[idx(x, y, z)]) continue;
        ++comps;
        stack.push_back({x, y, z});
        seen[idx(x, y, z)] = 1;
        while (!stack.empty()) {
          auto [cx, cy, cz] = stack.back();
          stack.pop_back();
          const std::array<std::array<int64_t, 3>, 6> nb = {
              {{cx - 1, cy, cz}, {cx + 1, cy, cz}, {cx, cy - 1, cz},
               {cx, cy + 1, cz}, {cx, cy, cz - 1}, {cx, cy, cz + 1}}};
          for (const auto& [nx, ny, nz] : nb) {
            if (nx < 0 || nx >= d[0] || ny < 0 || ny >= d[1] || nz < 0 ||
                nz >= d[2])
              continue;
            if (mask.at(nx, ny, nz) == 0.f || seen[idx(nx, ny, nz)]) continue;
            seen[idx(nx, ny, nz)] = 1;
            stack.push_back({nx, ny, nz});
          }
        }
      }
  return comps;
}

inline std::pair<Volume, Volume> render_phantom(const PhantomSpec& spec,
                                                uint64_t seed) {
  const int64_t n = spec.size;
  Rng rng(seed);
  const double cN = (static_cast<double>(n) - 1.0) / 2.0;

  std::vector<Lobe> lobes;
  if (spec.forced_ellipsoid[0] > 0) {
    lobes.push_back({{cN, cN, cN}, spec.forced_ellipsoid, mat3_identity()});
  } else {
    int n_lobes = static_cast<int>(rng.uniform_int(1, spec.max_lobes));
    Lobe primary;
    for (int i = 0; i < 3; ++i)
      primary.center[i] = cN + rng.uniform(-0.06, 0.06) * static_cast<double>(n);
    for (int i = 0; i < 3; ++i)
      primary.semi_axes[i] = rng.uniform(0.23, 0.30) * static_cast<double>(n);
    primary.rot = rotation_zyx({rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                                rng.uniform(-0.6, 0.6)});
    lobes.push_back(primary);
    for (int l = 1; l < n_lobes; ++l) {
      Lobe lb;
      // Lobe centers stay inside the primary so the union is one component.
      double amin = std::min({primary.semi_axes[0], primary.semi_axes[1],
                              primary.semi_axes[2]});
      for (int i = 0; i < 3; ++i)
        lb.center[i] = primary.center[i] + rng.uniform(-0.5, 0.5) * amin;
      for (int i = 0; i < 3; ++i)
        lb.semi_axes[i] = rng.uniform(0.08, 0.12) * static_cast<double>(n);
      lb.rot = rotation_zyx({rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                             rng.uniform(-0.6, 0.6)});
      lobes.push_back(lb);
    }
  }

  // Smooth multi-scale texture shared by background and object interior. It
  // is what makes unsupervised correlation registration well-posed.
  std::vector<Blob> bg_blobs, obj_blobs;
  int n_bg = 20;
  for (int i = 0; i < n_bg; ++i) {
    Blob b;
    for (int k = 0; k < 3; ++k) b.center[k] = rng.uniform(0, static_cast<double>(n - 1));
    b.sigma = rng.uniform(0.06, 0.18) * static_cast<double>(n);
    b.amp = rng.uniform(-0.22, 0.22);
    bg_blobs.push_back(b);
  }
  int n_obj = 8;
  for (int i = 0; i < n_obj; ++i) {
    Blob b;
    for (int k = 0; k < 3; ++k)
      b.center[k] = cN + rng.uniform(-0.25, 0.25) * static_cast<double>(n);
    b.sigma = rng.uniform(0.05, 0.12) * static_cast<double>(n);
    b.amp = rng.uniform(-0.12, 0.12);
    obj_blobs.push_back(b);
  }
  Vec3 grad_dir = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};

  Volume img({n, n, n}, {1, 1, 1}, VolumeKind::image);
  Volume msk({n, n, n}, {1, 1, 1}, VolumeKind::mask);
  Rng noise = rng.fork(0x6e6f6973);
  for (int64_t z = 0; z < n; ++z)
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x) {
        double fx = static_cast<double>(x), fy = static_cast<double>(y),
               fz = static_cast<double>(z);
        bool inside = false;
        for (const auto& l : lobes)
          if (inside_lobe(l, fx, fy, fz)) {
            inside = true;
            break;
          }
        double g = (grad_dir[0] * (fx - cN) + grad_dir[1] * (fy - cN) +
                    grad_dir[2] * (fz - cN)) /
                   static_cast<double>(n);
        double v;
        if (inside) {
          v = 0.78 + 0.13 * blob_field(obj_blobs, fx, fy, fz) / 0.12 * 0.5;
        } else {
          v = 0.28 + blob_field(bg_blobs, fx, fy, fz) + 0.08 * g;
        }
        v += spec.noise_sigma * noise.normal();
        img.at(x, y, z) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        msk.at(x, y, z) = inside ? 1.0f : 0.0f;
      }
  return {img, msk};
}

}  // namespace detail

// Deterministic given the seed; image in [0,1], binary mask, object strictly
// interior and occupying 5-40% of the volume. Degenerate draws retry with a
// perturbed seed, at most 10 times.
inline std::pair<Volume, Volume> generate_phantom(const PhantomSpec& spec) {
  check(spec.size >= 32, ErrorKind::data, "generate_phantom: size must be >= 32");
  const bool forced = spec.forced_ellipsoid[0] > 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    uint64_t seed = spec.seed + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(attempt);
    auto [img, msk] = detail::render_phantom(spec, seed);
    int64_t fg = 0;
    for (int64_t i = 0; i < msk.numel(); ++i) fg += msk.data()[i] != 0.f;
    double frac = static_cast<double>(fg) / static_cast<double>(msk.numel());
    if (fg == 0) continue;
    if (!forced && (frac < 0.05 || frac > 0.40)) continue;
    bool touches = false;
    const auto& d = msk.dims();
    for (int64_t z = 0; z < d[2] && !touches; ++z)
      for (int64_t y = 0; y < d[1] && !touches; ++y)
        for (int64_t x = 0; x < d[0] && !touches; ++x) {
          if (msk.at(x, y, z) == 0.f) continue;
          if (x == 0 || x == d[0] - 1 || y == 0 || y == d[1] - 1 || z == 0 ||
              z == d[2] - 1)
            touches = true;
        }
    if (touches) continue;
    return {img, msk};
  }
  fail_data("generate_phantom: no valid draw after 10 attempts (seed " +
            std::to_string(spec.seed) + ")");
}

inline int64_t count_mask_components(const Volume& mask) {
  return detail::connected_components_6(mask);
}

// ---------------------------------------------------------------------------
// Degradation
// ---------------------------------------------------------------------------

struct DegradeLimits {
  double max_rot_deg = 45.0;        // per §-range hard bound
  double max_trans_vox_256 = 30.0;  // voxels at a 256 grid, scaled by n/256
};

inline double max_translation_vox(int64_t n, double base_256 = 30.0) {
  return base_256 * static_cast<double>(n) / 256.0;
}

// Applies the misalignment to the HR pair (trilinear image, nearest mask),
// applies a monotone gamma contrast map to the image, then reduces the sparse
// axis: image slice s = mean of planes [s*d, (s+1)*d) and mask slice s =
// plane s*d + floor(d/2). Centering the reduction on each block keeps the
// up-sampled content geometrically unbiased, so the generator transforms are
// a faithful registration oracle.
inline ViewRecord degrade(const Volume& hr_image, const Volume& hr_mask,
                          ViewAxis axis, int64_t d_vox,
                          const AffineParams& misalign, double gamma) {
  check(hr_image.is_cubic() && hr_mask.is_cubic(), ErrorKind::data,
        "degrade: HR volumes must be cubic");
  check(hr_image.dims() == hr_mask.dims(), ErrorKind::data,
        "degrade: image/mask dims mismatch");
  const int64_t n = hr_image.dims()[0];
  check(d_vox >= 1 && n % d_vox == 0, ErrorKind::data,
        "degrade: slice distance " + std::to_string(d_vox) +
            " must divide grid size " + std::to_string(n));
  for (double r : misalign.rotation)
    check(std::abs(r) <= deg2rad(45.0) + 1e-9, ErrorKind::data,
          "degrade: rotation outside the +-45 degree range");
  double tmax = max_translation_vox(n) * 2.0 / static_cast<double>(n - 1) + 1e-9;
  for (double t : misalign.translation)
    check(std::abs(t) <= tmax, ErrorKind::data,
          "degrade: translation outside the +-30*(n/256) voxel range");
  check(gamma >= 0.7 - 1e-9 && gamma <= 1.4 + 1e-9, ErrorKind::data,
        "degrade: gamma outside [0.7, 1.4]");

  Volume wimg = warp(hr_image, misalign, SampleMode::trilinear, BorderMode::clamp);
  Volume wmsk = warp(hr_mask, misalign, SampleMode::nearest, BorderMode::clamp);
  if (gamma != 1.0) {
    for (int64_t i = 0; i < wimg.numel(); ++i) {
      float v = std::max(0.0f, wimg.data()[i]);
      wimg.data()[i] = std::pow(v, static_cast<float>(gamma));
    }
  }

  const int ax = sparse_axis_index(axis);
  std::array<int64_t, 3> ld = wimg.dims();
  ld[static_cast<size_t>(ax)] = n / d_vox;
  std::array<double, 3> sp = {1, 1, 1};
  sp[static_cast<size_t>(ax)] = static_cast<double>(d_vox);
  ViewRecord rec;
  rec.axis = axis;
  rec.true_misalignment = misalign;
  rec.gamma = gamma;
  rec.lr_image = Volume(ld, sp, VolumeKind::image);
  rec.lr_mask = Volume(ld, sp, VolumeKind::mask);
  const int64_t c = d_vox / 2;
  for (int64_t z = 0; z < ld[2]; ++z)
    for (int64_t y = 0; y < ld[1]; ++y)
      for (int64_t x = 0; x < ld[0]; ++x) {
        int64_t sx = x, sy = y, sz = z;
        double acc = 0;
        for (int64_t r = 0; r < d_vox; ++r) {
          int64_t px = ax == 0 ? x * d_vox + r : sx;
          int64_t py = ax == 1 ? y * d_vox + r : sy;
          int64_t pz = ax == 2 ? z * d_vox + r : sz;
          acc += wimg.at(px, py, pz);
        }
        rec.lr_image.at(x, y, z) = static_cast<float>(acc / static_cast<double>(d_vox));
        int64_t mx = ax == 0 ? x * d_vox + c : sx;
        int64_t my = ax == 1 ? y * d_vox + c : sy;
        int64_t mz = ax == 2 ? z * d_vox + c : sz;
        rec.lr_mask.at(x, y, z) = wmsk.at(mx, my, mz);
      }
  return rec;
}

// ---------------------------------------------------------------------------
// Studies and corpus
// ---------------------------------------------------------------------------

struct StudyConfig {
  int64_t size = 64;
  int64_t d_vox = 8;
  double max_rot_deg = 45.0;
  double max_trans_vox = -1.0;  // < 0: use 30 * size/256
  bool contrast_jitter = true;
  double noise_sigma = 0.01;
  int max_lobes = 4;
};

inline AffineParams sample_misalignment(Rng& rng, int64_t n, double max_rot_deg,
                                        double max_trans_vox) {
  AffineParams p;
  for (int i = 0; i < 3; ++i)
    p.rotation[i] = deg2rad(rng.uniform(-max_rot_deg, max_rot_deg));
  double tnorm = max_trans_vox * 2.0 / static_cast<double>(n - 1);
  for (int i = 0; i < 3; ++i) p.translation[i] = rng.uniform(-tnorm, tnorm);
  return p;
}

// One synthetic patient. The axial view keeps the identity pose (the HR mask
// is aligned with it); coronal and sagittal get independent random transforms.
inline Study make_study(const StudyConfig& cfg, uint64_t seed) {
  PhantomSpec ps;
  ps.size = cfg.size;
  ps.seed = seed;
  ps.noise_sigma = cfg.noise_sigma;
  ps.max_lobes = cfg.max_lobes;
  auto [img, msk] = generate_phantom(ps);
  Study st;
  st.hr_image = img;
  st.hr_mask = msk;
  st.slice_distance_vox = cfg.d_vox;
  double tmax = cfg.max_trans_vox >= 0 ? cfg.max_trans_vox
                                       : max_translation_vox(cfg.size);
  Rng rng = Rng(seed).fork(0xd36badeull);
  const ViewAxis axes[3] = {ViewAxis::axial, ViewAxis::coronal,
                            ViewAxis::sagittal};
  for (int i = 0; i < 3; ++i) {
    AffineParams mis = i == 0 ? AffineParams::identity()
                              : sample_misalignment(rng, cfg.size,
                                                    cfg.max_rot_deg, tmax);
    double gamma = cfg.contrast_jitter ? rng.uniform(0.7, 1.4) : 1.0;
    st.views[static_cast<size_t>(i)] =
        degrade(img, msk, axes[i], cfg.d_vox, mis, gamma);
  }
  return st;
}

inline nlohmann::json params_to_json(const AffineParams& p) {
  auto m = p.matrix4();
  return {{"rotation_rad", {p.rotation[0], p.rotation[1], p.rotation[2]}},
          {"translation_norm",
           {p.translation[0], p.translation[1], p.translation[2]}},
          {"matrix4_row_major", std::vector<double>(m.begin(), m.end())}};
}

inline AffineParams params_from_json(const nlohmann::json& j) {
  AffineParams p;
  auto r = j.at("rotation_rad").get<std::vector<double>>();
  auto t = j.at("translation_norm").get<std::vector<double>>();
  check(r.size() == 3 && t.size() == 3, ErrorKind::data,
        "manifest: transform must have 3 rotations and 3 translations");
  p.rotation = {r[0], r[1], r[2]};
  p.translation = {t[0], t[1], t[2]};
  return p;
}

struct CorpusPaths {
  std::filesystem::path root;
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path study_dir(int64_t k) const {
    return root / ("study_" + std::to_string(k));
  }
};

// Generates n_train+n_test studies under `out`, one directory per study plus
// a manifest listing files, true transforms and generator parameters.
inline nlohmann::json build_corpus(int64_t n_train, int64_t n_test,
                                   const StudyConfig& cfg, uint64_t seed,
                                   const std::string& out, bool force = false) {
  check(n_train >= 1 && n_test >= 0, ErrorKind::config,
        "build_corpus: need at least one training study");
  namespace fs = std::filesystem;
  fs::path root(out);
  if (fs::exists(root) && !fs::is_empty(root)) {
    check(force, ErrorKind::data,
          "build_corpus: target directory '" + out +
              "' is not empty (use --force to overwrite)");
    fs::remove_all(root);
  }
  fs::create_directories(root);
  CorpusPaths paths{root};

  nlohmann::json manifest;
  manifest["format"] = "mvseg-corpus-v1";
  manifest["size"] = cfg.size;
  manifest["d_vox"] = cfg.d_vox;
  manifest["seed"] = seed;
  manifest["n_train"] = n_train;
  manifest["n_test"] = n_test;
  manifest["max_rot_deg"] = cfg.max_rot_deg;
  manifest["max_trans_vox"] =
      cfg.max_trans_vox >= 0 ? cfg.max_trans_vox : max_translation_vox(cfg.size);
  manifest["contrast_jitter"] = cfg.contrast_jitter;
  manifest["noise_sigma"] = cfg.noise_sigma;
  manifest["studies"] = nlohmann::json::array();

  Rng root_rng(seed);
  const int64_t total = n_train + n_test;
  for (int64_t k = 0; k < total; ++k) {
    uint64_t study_seed = root_rng.fork(static_cast<uint64_t>(k)).next_u64();
    Study st = make_study(cfg, study_seed);
    fs::path sdir = paths.study_dir(k);
    fs::create_directories(sdir);
    write_volume(st.hr_image, (sdir / "hr_img.smv").string());
    write_volume(st.hr_mask, (sdir / "hr_msk.smv").string());
    nlohmann::json sj;
    sj["id"] = "study_" + std::to_string(k);
    sj["dir"] = "study_" + std::to_string(k);
    sj["split"] = k < n_train ? "train" : "test";
    sj["seed"] = study_seed;
    sj["components"] = count_mask_components(st.hr_mask);
    sj["files"] = {{"hr_img", "hr_img.smv"}, {"hr_msk", "hr_msk.smv"}};
    sj["views"] = nlohmann::json::array();
    for (const auto& v : st.views) {
      std::string a = to_string(v.axis);
      write_volume(v.lr_image, (sdir / ("view_" + a + "_img.smv")).string());
      write_volume(v.lr_mask, (sdir / ("view_" + a + "_msk.smv")).string());
      nlohmann::json vj;
      vj["axis"] = a;
      vj["gamma"] = v.gamma;
      vj["true_misalignment"] = params_to_json(v.true_misalignment);
      vj["files"] = {{"img", "view_" + a + "_img.smv"},
                     {"msk", "view_" + a + "_msk.smv"}};
      sj["views"].push_back(vj);
    }
    manifest["studies"].push_back(sj);
  }
  std::ofstream mf(paths.manifest());
  mf << manifest.dump(2) << "\n";
  check(mf.good(), ErrorKind::data, "build_corpus: failed writing manifest");
  return manifest;
}

struct LoadedStudy {
  std::string id;
  std::string split;
  Volume hr_image, hr_mask;
  std::array<ViewRecord, 3> views;
};

inline nlohmann::json read_manifest(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "manifest.json");
  check(in.good(), ErrorKind::data, "corpus: missing manifest.json in '" + dir + "'");
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    fail_data("corpus: malformed manifest.json: " + std::string(e.what()));
  }
  check(m.value("format", "") == "mvseg-corpus-v1", ErrorKind::data,
        "corpus: unknown manifest format");
  return m;
}

inline LoadedStudy load_study(const std::string& dir, const nlohmann::json& sj) {
  namespace fs = std::filesystem;
  fs::path sdir = fs::path(dir) / sj.at("dir").get<std::string>();
  LoadedStudy st;
  st.id = sj.at("id").get<std::string>();
  st.split = sj.at("split").get<std::string>();
  st.hr_image = read_volume((sdir / "hr_img.smv").string());
  st.hr_mask = read_volume((sdir / "hr_msk.smv").string());
  for (const auto& vj : sj.at("views")) {
    ViewAxis axis = view_axis_from_string(vj.at("axis").get<std::string>());
    size_t i = static_cast<size_t>(sparse_axis_index(axis) == 2   ? 0
                                   : sparse_axis_index(axis) == 1 ? 1
                                                                  : 2);
    ViewRecord& r = st.views[i];
    r.axis = axis;
    r.gamma = vj.at("gamma").get<double>();
    r.true_misalignment = params_from_json(vj.at("true_misalignment"));
    r.lr_image = read_volume(
        (sdir / vj.at("files").at("img").get<std::string>()).string());
    r.lr_mask = read_volume(
        (sdir / vj.at("files").at("msk").get<std::string>()).string());
  }
  return st;
}

}  // namespace mvseg
