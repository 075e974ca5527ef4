#pragma once

// Physical-space volume container, SMV file I/O and the preprocessing steps
// that turn anisotropic acquisitions into cubic working grids.
//
// SMV format: one JSON header line terminated by a NUL byte, then raw
// little-endian 32-bit floats in x-fastest order:
//   {"dims":[X,Y,Z],"spacing_mm":[sx,sy,sz],"dtype":"f32",
//    "layout":"x-fastest","kind":"image"}\0 <payload>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvseg/common.hpp"
#include "mvseg/tensor.hpp"

namespace mvseg {

enum class VolumeKind { image, mask };

inline const char* to_string(VolumeKind k) {
  return k == VolumeKind::image ? "image" : "mask";
}

// Axis along which a low-resolution view is sparse.
enum class ViewAxis { axial, coronal, sagittal };  // z-, y-, x-sparse

inline const char* to_string(ViewAxis a) {
  switch (a) {
    case ViewAxis::axial: return "axial";
    case ViewAxis::coronal: return "coronal";
    default: return "sagittal";
  }
}

inline ViewAxis view_axis_from_string(const std::string& s) {
  if (s == "axial") return ViewAxis::axial;
  if (s == "coronal") return ViewAxis::coronal;
  if (s == "sagittal") return ViewAxis::sagittal;
  fail_data("unknown view axis '" + s + "'");
}

// 0 = x sparse (sagittal), 1 = y sparse (coronal), 2 = z sparse (axial).
inline int sparse_axis_index(ViewAxis a) {
  switch (a) {
    case ViewAxis::axial: return 2;
    case ViewAxis::coronal: return 1;
    default: return 0;
  }
}

class Volume {
 public:
  Volume() = default;
  Volume(std::array<int64_t, 3> dims, std::array<double, 3> spacing_mm,
         VolumeKind kind, float fill = 0.f)
      : dims_(dims), spacing_(spacing_mm), kind_(kind) {
    for (double s : spacing_) check(s > 0, ErrorKind::data, "volume: spacing components must be > 0");
    for (int64_t d : dims_) check(d > 0, ErrorKind::data, "volume: dims must be positive");
    data_.assign(static_cast<size_t>(numel()), fill);
  }

  const std::array<int64_t, 3>& dims() const { return dims_; }
  const std::array<double, 3>& spacing() const { return spacing_; }
  VolumeKind kind() const { return kind_; }
  void set_kind(VolumeKind k) { kind_ = k; }
  int64_t numel() const { return dims_[0] * dims_[1] * dims_[2]; }
  bool is_cubic() const { return dims_[0] == dims_[1] && dims_[1] == dims_[2]; }

  float& at(int64_t x, int64_t y, int64_t z) {
    return data_[static_cast<size_t>(x + dims_[0] * (y + dims_[1] * z))];
  }
  float at(int64_t x, int64_t y, int64_t z) const {
    return data_[static_cast<size_t>(x + dims_[0] * (y + dims_[1] * z))];
  }

  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  // View of the volume as a [1,1,Z,Y,X] tensor. x-fastest volume layout is
  // identical to W-fastest NCDHW, so this is a straight copy.
  template <class T = float>
  TensorT<T> as_tensor() const {
    std::vector<T> d(data_.begin(), data_.end());
    return TensorT<T>::from_data({1, 1, dims_[2], dims_[1], dims_[0]},
                                 std::move(d));
  }

  template <class T>
  static Volume from_tensor(const TensorT<T>& t,
                            std::array<double, 3> spacing_mm,
                            VolumeKind kind) {
    const Shape& s = t.shape();
    check(s.size() == 5 && s[0] == 1 && s[1] == 1, ErrorKind::data,
          "volume: tensor must be [1,1,D,H,W], got " + shape_str(s));
    Volume v({s[4], s[3], s[2]}, spacing_mm, kind);
    const T* p = t.data();
    for (int64_t i = 0; i < v.numel(); ++i) v.data_[static_cast<size_t>(i)] = static_cast<float>(p[i]);
    return v;
  }

 private:
  std::array<int64_t, 3> dims_{0, 0, 0};        // [X,Y,Z]
  std::array<double, 3> spacing_{1.0, 1.0, 1.0};  // mm
  VolumeKind kind_ = VolumeKind::image;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// SMV I/O
// ---------------------------------------------------------------------------

inline void write_volume(const Volume& v, const std::string& path) {
  nlohmann::json hdr;
  hdr["dims"] = {v.dims()[0], v.dims()[1], v.dims()[2]};
  hdr["spacing_mm"] = {v.spacing()[0], v.spacing()[1], v.spacing()[2]};
  hdr["dtype"] = "f32";
  hdr["layout"] = "x-fastest";
  hdr["kind"] = to_string(v.kind());
  std::ofstream out(path, std::ios::binary);
  check(out.good(), ErrorKind::data, "smv: cannot open '" + path + "' for writing");
  std::string h = hdr.dump();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.put('\0');
  static_assert(sizeof(float) == 4);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.numel() * 4));
  check(out.good(), ErrorKind::data, "smv: short write to '" + path + "'");
}

inline Volume read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorKind::data, "smv: cannot open '" + path + "'");
  std::string header;
  std::getline(in, header, '\0');
  check(in.good(), ErrorKind::data, "smv: '" + path + "' missing NUL-terminated header");
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    fail_data("smv: malformed header in '" + path + "': " + e.what());
  }
  check(hdr.contains("dims") && hdr.contains("spacing_mm") && hdr.contains("dtype") &&
            hdr.contains("kind"),
        ErrorKind::data, "smv: header missing required keys in '" + path + "'");
  check(hdr["dtype"] == "f32", ErrorKind::data,
        "smv: unknown dtype '" + hdr["dtype"].get<std::string>() + "' in '" + path + "'");
  auto dims = hdr["dims"].get<std::vector<int64_t>>();
  auto spacing = hdr["spacing_mm"].get<std::vector<double>>();
  check(dims.size() == 3 && spacing.size() == 3, ErrorKind::data,
        "smv: dims/spacing must have 3 entries in '" + path + "'");
  std::string kind_s = hdr["kind"].get<std::string>();
  check(kind_s == "image" || kind_s == "mask", ErrorKind::data,
        "smv: unknown kind '" + kind_s + "' in '" + path + "'");
  Volume v({dims[0], dims[1], dims[2]}, {spacing[0], spacing[1], spacing[2]},
           kind_s == "image" ? VolumeKind::image : VolumeKind::mask);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.numel() * 4));
  check(in.gcount() == v.numel() * 4, ErrorKind::data,
        "smv: payload length mismatch in '" + path + "': header dims need " +
            std::to_string(v.numel() * 4) + " bytes, got " +
            std::to_string(in.gcount()));
  in.peek();
  check(in.eof(), ErrorKind::data,
        "smv: trailing bytes after payload in '" + path + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Nearest up-sampling along the sparse axis only: slice s is replicated into
// up-sampled indices [s*f, (s+1)*f). Spacing becomes isotropic.
inline Volume upsample_to_isotropic(const Volume& lr, ViewAxis axis,
                                    int64_t target_dim) {
  int ax = sparse_axis_index(axis);
  int64_t sparse = lr.dims()[static_cast<size_t>(ax)];
  check(sparse >= 1, ErrorKind::data, "upsample: empty sparse axis");
  check(target_dim % sparse == 0, ErrorKind::data,
        "upsample: target dim " + std::to_string(target_dim) +
            " not an integer multiple of sparse extent " + std::to_string(sparse));
  int64_t f = target_dim / sparse;
  std::array<int64_t, 3> od = lr.dims();
  od[static_cast<size_t>(ax)] = target_dim;
  double p = lr.spacing()[(ax + 1) % 3];
  Volume out(od, {p, p, p}, lr.kind());
  for (int64_t z = 0; z < od[2]; ++z)
    for (int64_t y = 0; y < od[1]; ++y)
      for (int64_t x = 0; x < od[0]; ++x) {
        int64_t sx = ax == 0 ? x / f : x;
        int64_t sy = ax == 1 ? y / f : y;
        int64_t sz = ax == 2 ? z / f : z;
        out.at(x, y, z) = lr.at(sx, sy, sz);
      }
  return out;
}

// Clamp to the [2nd, 98th] percentile (nearest-rank on the sorted voxel list)
// and rescale to [0,1]. A constant volume maps to all zeros.
inline Volume normalize_intensity(const Volume& v, double lo_pct = 2.0,
                                  double hi_pct = 98.0) {
  check(v.kind() == VolumeKind::image, ErrorKind::data,
        "normalize_intensity: expects an image volume");
  std::vector<float> sorted = v.vec();
  std::sort(sorted.begin(), sorted.end());
  auto rank = [&](double pct) {
    int64_t n = static_cast<int64_t>(sorted.size());
    int64_t r = static_cast<int64_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
    r = std::max<int64_t>(1, std::min(n, r));
    return sorted[static_cast<size_t>(r - 1)];
  };
  float lo = rank(lo_pct), hi = rank(hi_pct);
  Volume out(v.dims(), v.spacing(), VolumeKind::image);
  if (hi <= lo) return out;  // constant (or degenerate) volume -> zeros
  float span = hi - lo;
  for (int64_t i = 0; i < v.numel(); ++i) {
    float x = std::min(hi, std::max(lo, v.data()[i]));
    out.data()[i] = (x - lo) / span;
  }
  return out;
}

inline Volume binarize(const Volume& v, float threshold = 0.5f) {
  Volume out(v.dims(), v.spacing(), VolumeKind::mask);
  for (int64_t i = 0; i < v.numel(); ++i)
    out.data()[i] = v.data()[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

}  // namespace mvseg
