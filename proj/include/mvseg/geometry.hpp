#pragma once

// 6-DOF rigid transform parameterization, sampling-grid generation and
// differentiable trilinear grid sampling.
//
// Conventions, fixed project-wide:
//  - normalized coordinates: [-1,1] spans each axis, voxel i maps to
//    2*i/(n-1) - 1 (so -1 and +1 sit exactly on the first/last voxel).
//  - rotations: Euler angles applied Z*Y*X about the volume center.
//  - backward warping: params describe the map from output (fixed) voxel
//    coordinates to source (moving) coordinates.

#include <array>
#include <cmath>
#include <cstdint>

#include "mvseg/common.hpp"
#include "mvseg/tensor.hpp"
#include "mvseg/volume.hpp"

namespace mvseg {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Vec3 = std::array<double, 3>;

inline Mat3 mat3_identity() {
  return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a[i][k] * b[k][j];
      r[i][j] = s;
    }
  return r;
}

inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  Vec3 r{};
  for (int i = 0; i < 3; ++i)
    r[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
  return r;
}

inline Mat3 mat3_transpose(const Mat3& m) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = m[j][i];
  return r;
}

inline double mat3_det(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

inline Mat3 rot_x(double a) {
  double c = std::cos(a), s = std::sin(a);
  return {{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
}
inline Mat3 rot_y(double a) {
  double c = std::cos(a), s = std::sin(a);
  return {{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
}
inline Mat3 rot_z(double a) {
  double c = std::cos(a), s = std::sin(a);
  return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}

// R = Rz(rz) * Ry(ry) * Rx(rx).
inline Mat3 rotation_zyx(const Vec3& angles) {
  return mat3_mul(rot_z(angles[2]), mat3_mul(rot_y(angles[1]), rot_x(angles[0])));
}

// Euler ZYX extraction; valid away from the ry = +-pi/2 gimbal locus, which
// the +-45 degree operating range never approaches.
inline Vec3 euler_zyx_from_matrix(const Mat3& r) {
  Vec3 e{};
  e[1] = std::asin(std::max(-1.0, std::min(1.0, -r[2][0])));
  e[0] = std::atan2(r[2][1], r[2][2]);
  e[2] = std::atan2(r[1][0], r[0][0]);
  return e;
}

// Rigid 6-DOF transform: 3 Euler angles (radians) + 3 translations in
// normalized coordinates. Acts as p_src = R * p + t on normalized points.
struct AffineParams {
  Vec3 rotation{0, 0, 0};     // rx, ry, rz
  Vec3 translation{0, 0, 0};  // tx, ty, tz (normalized units)

  static AffineParams identity() { return {}; }

  Mat3 matrix3() const { return rotation_zyx(rotation); }

  // Row-major 4x4 homogeneous matrix.
  std::array<double, 16> matrix4() const {
    Mat3 r = matrix3();
    return {r[0][0], r[0][1], r[0][2], translation[0],
            r[1][0], r[1][1], r[1][2], translation[1],
            r[2][0], r[2][1], r[2][2], translation[2],
            0,       0,       0,       1};
  }

  Vec3 apply(const Vec3& p) const {
    Vec3 q = mat3_apply(matrix3(), p);
    return {q[0] + translation[0], q[1] + translation[1], q[2] + translation[2]};
  }

  static AffineParams from_matrix(const Mat3& r, const Vec3& t) {
    AffineParams p;
    p.rotation = euler_zyx_from_matrix(r);
    p.translation = t;
    return p;
  }
};

// compose(a, b): apply b first, then a; matrices multiply as A*B.
inline AffineParams compose(const AffineParams& a, const AffineParams& b) {
  Mat3 ra = a.matrix3(), rb = b.matrix3();
  Mat3 r = mat3_mul(ra, rb);
  Vec3 t = mat3_apply(ra, b.translation);
  for (int i = 0; i < 3; ++i) t[i] += a.translation[i];
  return AffineParams::from_matrix(r, t);
}

inline AffineParams inverse(const AffineParams& p) {
  Mat3 rt = mat3_transpose(p.matrix3());
  Vec3 t = mat3_apply(rt, p.translation);
  return AffineParams::from_matrix(rt, {-t[0], -t[1], -t[2]});
}

// Geodesic rotation distance in radians.
inline double rotation_distance(const AffineParams& a, const AffineParams& b) {
  Mat3 rel = mat3_mul(a.matrix3(), mat3_transpose(b.matrix3()));
  double tr = rel[0][0] + rel[1][1] + rel[2][2];
  return std::acos(std::max(-1.0, std::min(1.0, (tr - 1.0) / 2.0)));
}

// Center-point displacement discrepancy, converted to voxels of an n^3 grid.
inline double translation_distance_vox(const AffineParams& a,
                                       const AffineParams& b, int64_t n) {
  double dx = a.translation[0] - b.translation[0];
  double dy = a.translation[1] - b.translation[1];
  double dz = a.translation[2] - b.translation[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz) * static_cast<double>(n - 1) / 2.0;
}

inline double deg2rad(double d) { return d * 3.14159265358979323846 / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / 3.14159265358979323846; }

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

// A GridField is a [D,H,W,3] tensor of normalized source coordinates, with
// the last axis ordered (x, y, z).

inline void check_grid_shape(const Shape& dhw) {
  check(dhw.size() == 3, ErrorKind::data, "grid: shape must be [D,H,W]");
  for (int64_t e : dhw)
    check(e >= 2, ErrorKind::data,
          "grid: degenerate extent " + std::to_string(e) + " (all extents must be >= 2)");
}

template <class T>
TensorT<T> identity_grid(const Shape& dhw) {
  check_grid_shape(dhw);
  const int64_t D = dhw[0], H = dhw[1], W = dhw[2];
  TensorT<T> g = TensorT<T>::zeros({D, H, W, 3});
  T* p = g.data();
  for (int64_t z = 0; z < D; ++z) {
    T nz = static_cast<T>(2.0 * z / (D - 1) - 1.0);
    for (int64_t y = 0; y < H; ++y) {
      T ny = static_cast<T>(2.0 * y / (H - 1) - 1.0);
      for (int64_t x = 0; x < W; ++x) {
        T* v = p + ((z * H + y) * W + x) * 3;
        v[0] = static_cast<T>(2.0 * x / (W - 1) - 1.0);
        v[1] = ny;
        v[2] = nz;
      }
    }
  }
  return g;
}

// Sampling grid for a parameter tensor [6] = (rx,ry,rz,tx,ty,tz):
// grid(v) = R(theta) * v_norm + t. Differentiable w.r.t. theta.
template <class T>
TensorT<T> affine_grid(const TensorT<T>& theta, const Shape& dhw) {
  check(theta.shape() == Shape{6}, ErrorKind::data,
        "affine_grid: theta must be a [6] tensor, got " + shape_str(theta.shape()));
  check_grid_shape(dhw);
  const int64_t D = dhw[0], H = dhw[1], W = dhw[2];
  const T* tp = theta.data();
  Vec3 ang = {static_cast<double>(tp[0]), static_cast<double>(tp[1]),
              static_cast<double>(tp[2])};
  Vec3 tr = {static_cast<double>(tp[3]), static_cast<double>(tp[4]),
             static_cast<double>(tp[5])};
  Mat3 r = rotation_zyx(ang);
  TensorT<T> g = TensorT<T>::zeros({D, H, W, 3});
  T* p = g.data();
  for (int64_t z = 0; z < D; ++z) {
    double nz = 2.0 * z / (D - 1) - 1.0;
    for (int64_t y = 0; y < H; ++y) {
      double ny = 2.0 * y / (H - 1) - 1.0;
      for (int64_t x = 0; x < W; ++x) {
        double nx = 2.0 * x / (W - 1) - 1.0;
        T* v = p + ((z * H + y) * W + x) * 3;
        v[0] = static_cast<T>(r[0][0] * nx + r[0][1] * ny + r[0][2] * nz + tr[0]);
        v[1] = static_cast<T>(r[1][0] * nx + r[1][1] * ny + r[1][2] * nz + tr[1]);
        v[2] = static_cast<T>(r[2][0] * nx + r[2][1] * ny + r[2][2] * nz + tr[2]);
      }
    }
  }
  if (grad_enabled_for(theta)) {
    g.set_requires_grad(true);
    auto ti = theta.impl();
    auto gi = g.impl();
    active_tape<T>()->record([ti, gi, D, H, W, ang]() {
      if (gi->grad.empty() || !ti->requires_grad) return;
      ti->ensure_grad();
      const T* gg = gi->grad.data();
      // grid = R v + t, so grad_R = sum_v g(v) v^T and grad_t = sum_v g(v);
      // the Euler chain rule contracts grad_R with dR/dangle.
      double m[3][3] = {};
      double tsum[3] = {};
      for (int64_t z = 0; z < D; ++z) {
        double nz = 2.0 * z / (D - 1) - 1.0;
        for (int64_t y = 0; y < H; ++y) {
          double ny = 2.0 * y / (H - 1) - 1.0;
          for (int64_t x = 0; x < W; ++x) {
            double nx = 2.0 * x / (W - 1) - 1.0;
            const T* gv = gg + ((z * H + y) * W + x) * 3;
            for (int i = 0; i < 3; ++i) {
              double gvi = static_cast<double>(gv[i]);
              m[i][0] += gvi * nx;
              m[i][1] += gvi * ny;
              m[i][2] += gvi * nz;
              tsum[i] += gvi;
            }
          }
        }
      }
      double ca = std::cos(ang[0]), sa = std::sin(ang[0]);
      double cb = std::cos(ang[1]), sb = std::sin(ang[1]);
      double cc = std::cos(ang[2]), sc = std::sin(ang[2]);
      Mat3 rx = rot_x(ang[0]), ry = rot_y(ang[1]), rz = rot_z(ang[2]);
      Mat3 drx = {{{0, 0, 0}, {0, -sa, -ca}, {0, ca, -sa}}};
      Mat3 dry = {{{-sb, 0, cb}, {0, 0, 0}, {-cb, 0, -sb}}};
      Mat3 drz = {{{-sc, -cc, 0}, {cc, -sc, 0}, {0, 0, 0}}};
      Mat3 d_rx = mat3_mul(rz, mat3_mul(ry, drx));
      Mat3 d_ry = mat3_mul(rz, mat3_mul(dry, rx));
      Mat3 d_rz = mat3_mul(drz, mat3_mul(ry, rx));
      const Mat3* dr[3] = {&d_rx, &d_ry, &d_rz};
      for (int k = 0; k < 3; ++k) {
        double acc = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) acc += m[i][j] * (*dr[k])[i][j];
        ti->grad[k] += static_cast<T>(acc);
      }
      for (int k = 0; k < 3; ++k) ti->grad[3 + k] += static_cast<T>(tsum[k]);
    });
  }
  return g;
}

template <class T>
TensorT<T> affine_grid(const AffineParams& params, const Shape& dhw) {
  std::vector<T> v = {static_cast<T>(params.rotation[0]),
                      static_cast<T>(params.rotation[1]),
                      static_cast<T>(params.rotation[2]),
                      static_cast<T>(params.translation[0]),
                      static_cast<T>(params.translation[1]),
                      static_cast<T>(params.translation[2])};
  return affine_grid(TensorT<T>::from_data({6}, std::move(v)), dhw);
}

template <class T>
AffineParams params_from_tensor(const TensorT<T>& theta) {
  check(theta.shape() == Shape{6}, ErrorKind::data, "expected a [6] parameter tensor");
  const T* p = theta.data();
  AffineParams a;
  a.rotation = {static_cast<double>(p[0]), static_cast<double>(p[1]),
                static_cast<double>(p[2])};
  a.translation = {static_cast<double>(p[3]), static_cast<double>(p[4]),
                   static_cast<double>(p[5])};
  return a;
}

// ---------------------------------------------------------------------------
// grid_sample
// ---------------------------------------------------------------------------

enum class SampleMode { trilinear, nearest };
enum class BorderMode { clamp, zero };

namespace detail {

// Normalized coordinate -> continuous voxel index; exact-node coordinates are
// snapped so that identity grids reproduce inputs bitwise.
template <class T>
inline double unnormalize(T c, int64_t extent) {
  double s = (static_cast<double>(c) + 1.0) * 0.5 * static_cast<double>(extent - 1);
  double r = std::round(s);
  if (std::abs(s - r) < 1e-6) s = r;
  return s;
}

}  // namespace detail

// Samples `input` [N,C,D,H,W] at `grid` [Dg,Hg,Wg,3] -> [N,C,Dg,Hg,Wg].
// Trilinear mode is differentiable w.r.t. both input and grid. BorderMode
// selects clamp-to-edge (images) or zero outside (confidence fields).
template <class T>
TensorT<T> grid_sample(const TensorT<T>& input, const TensorT<T>& grid,
                       SampleMode mode = SampleMode::trilinear,
                       BorderMode border = BorderMode::clamp) {
  const Shape& is = input.shape();
  const Shape& gs = grid.shape();
  check(is.size() == 5, ErrorKind::data,
        "grid_sample: input must be [N,C,D,H,W], got " + shape_str(is));
  check(gs.size() == 4 && gs[3] == 3, ErrorKind::data,
        "grid_sample: grid must be [D,H,W,3], got " + shape_str(gs));
  const int64_t N = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t Dg = gs[0], Hg = gs[1], Wg = gs[2];
  TensorT<T> out = TensorT<T>::zeros({N, C, Dg, Hg, Wg});
  const T* ip = input.data();
  const T* gp = grid.data();
  T* op = out.data();
  const int64_t in_ch = D * H * W;
  const int64_t out_sp = Dg * Hg * Wg;

  auto fetch = [&](const T* chan, int64_t x, int64_t y, int64_t z) -> T {
    if (border == BorderMode::zero) {
      if (x < 0 || x >= W || y < 0 || y >= H || z < 0 || z >= D) return T(0);
    } else {
      x = std::clamp<int64_t>(x, 0, W - 1);
      y = std::clamp<int64_t>(y, 0, H - 1);
      z = std::clamp<int64_t>(z, 0, D - 1);
    }
    return chan[(z * H + y) * W + x];
  };

  parallel_for(0, out_sp, [&](int64_t v0, int64_t v1) {
    for (int64_t v = v0; v < v1; ++v) {
      const T* gv = gp + v * 3;
      double sx = detail::unnormalize(gv[0], W);
      double sy = detail::unnormalize(gv[1], H);
      double sz = detail::unnormalize(gv[2], D);
      if (mode == SampleMode::nearest) {
        int64_t x = static_cast<int64_t>(std::round(sx));
        int64_t y = static_cast<int64_t>(std::round(sy));
        int64_t z = static_cast<int64_t>(std::round(sz));
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c)
            op[(n * C + c) * out_sp + v] = fetch(ip + (n * C + c) * in_ch, x, y, z);
        continue;
      }
      double cx = border == BorderMode::clamp
                      ? std::clamp(sx, 0.0, static_cast<double>(W - 1)) : sx;
      double cy = border == BorderMode::clamp
                      ? std::clamp(sy, 0.0, static_cast<double>(H - 1)) : sy;
      double cz = border == BorderMode::clamp
                      ? std::clamp(sz, 0.0, static_cast<double>(D - 1)) : sz;
      int64_t x0 = static_cast<int64_t>(std::floor(cx));
      int64_t y0 = static_cast<int64_t>(std::floor(cy));
      int64_t z0 = static_cast<int64_t>(std::floor(cz));
      T fx = static_cast<T>(cx - static_cast<double>(x0));
      T fy = static_cast<T>(cy - static_cast<double>(y0));
      T fz = static_cast<T>(cz - static_cast<double>(z0));
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const T* chan = ip + (n * C + c) * in_ch;
          T c000 = fetch(chan, x0, y0, z0), c100 = fetch(chan, x0 + 1, y0, z0);
          T c010 = fetch(chan, x0, y0 + 1, z0), c110 = fetch(chan, x0 + 1, y0 + 1, z0);
          T c001 = fetch(chan, x0, y0, z0 + 1), c101 = fetch(chan, x0 + 1, y0, z0 + 1);
          T c011 = fetch(chan, x0, y0 + 1, z0 + 1), c111 = fetch(chan, x0 + 1, y0 + 1, z0 + 1);
          T c00 = c000 + fx * (c100 - c000);
          T c01 = c001 + fx * (c101 - c001);
          T c10 = c010 + fx * (c110 - c010);
          T c11 = c011 + fx * (c111 - c011);
          T c0 = c00 + fy * (c10 - c00);
          T c1 = c01 + fy * (c11 - c01);
          op[(n * C + c) * out_sp + v] = c0 + fz * (c1 - c0);
        }
    }
  });

  if (mode == SampleMode::trilinear && grad_enabled_for(input, grid)) {
    out.set_requires_grad(true);
    auto ii = input.impl();
    auto gi = grid.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ii, gi, oi, N, C, D, H, W, Dg, Hg, Wg, in_ch,
                              out_sp, border]() {
      if (oi->grad.empty()) return;
      const T* go = oi->grad.data();
      const T* gp = gi->data.data();
      const T* ip = ii->data.data();
      const bool want_input = ii->requires_grad;
      const bool want_grid = gi->requires_grad;
      if (want_input) ii->ensure_grad();
      if (want_grid) gi->ensure_grad();
      T* gin = want_input ? ii->grad.data() : nullptr;
      T* ggr = want_grid ? gi->grad.data() : nullptr;

      auto in_bounds = [&](int64_t x, int64_t y, int64_t z) {
        return x >= 0 && x < W && y >= 0 && y < H && z >= 0 && z < D;
      };
      // Serial: input-gradient scatter touches shared voxels.
      for (int64_t v = 0; v < Dg * Hg * Wg; ++v) {
        const T* gv = gp + v * 3;
        double sx = detail::unnormalize(gv[0], W);
        double sy = detail::unnormalize(gv[1], H);
        double sz = detail::unnormalize(gv[2], D);
        bool clx = false, cly = false, clz = false;
        double cx = sx, cy = sy, cz = sz;
        if (border == BorderMode::clamp) {
          cx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
          cy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
          cz = std::clamp(sz, 0.0, static_cast<double>(D - 1));
          clx = cx != sx;
          cly = cy != sy;
          clz = cz != sz;
        }
        int64_t x0 = static_cast<int64_t>(std::floor(cx));
        int64_t y0 = static_cast<int64_t>(std::floor(cy));
        int64_t z0 = static_cast<int64_t>(std::floor(cz));
        T fx = static_cast<T>(cx - static_cast<double>(x0));
        T fy = static_cast<T>(cy - static_cast<double>(y0));
        T fz = static_cast<T>(cz - static_cast<double>(z0));
        const T wz[2] = {T(1) - fz, fz};
        const T wy[2] = {T(1) - fy, fy};
        const T wx[2] = {T(1) - fx, fx};
        T dgx = T(0), dgy = T(0), dgz = T(0);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            T g = go[(n * C + c) * out_sp + v];
            if (g == T(0)) continue;
            const T* chan = ip + (n * C + c) * in_ch;
            T* gchan = gin ? gin + (n * C + c) * in_ch : nullptr;
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  int64_t x = x0 + dx, y = y0 + dy, z = z0 + dz;
                  bool inb = in_bounds(x, y, z);
                  int64_t xi = std::clamp<int64_t>(x, 0, W - 1);
                  int64_t yi = std::clamp<int64_t>(y, 0, H - 1);
                  int64_t zi = std::clamp<int64_t>(z, 0, D - 1);
                  T cv;
                  if (border == BorderMode::zero) {
                    cv = inb ? chan[(z * H + y) * W + x] : T(0);
                  } else {
                    cv = chan[(zi * H + yi) * W + xi];
                  }
                  T w = wx[dx] * wy[dy] * wz[dz];
                  if (gchan) {
                    if (border == BorderMode::zero) {
                      if (inb) gchan[(z * H + y) * W + x] += g * w;
                    } else {
                      gchan[(zi * H + yi) * W + xi] += g * w;
                    }
                  }
                  T sgnx = dx ? T(1) : T(-1);
                  T sgny = dy ? T(1) : T(-1);
                  T sgnz = dz ? T(1) : T(-1);
                  dgx += g * cv * sgnx * wy[dy] * wz[dz];
                  dgy += g * cv * sgny * wx[dx] * wz[dz];
                  dgz += g * cv * sgnz * wx[dx] * wy[dy];
                }
          }
        if (ggr) {
          T sx_scale = clx ? T(0) : static_cast<T>(0.5 * (W - 1));
          T sy_scale = cly ? T(0) : static_cast<T>(0.5 * (H - 1));
          T sz_scale = clz ? T(0) : static_cast<T>(0.5 * (D - 1));
          ggr[v * 3 + 0] += dgx * sx_scale;
          ggr[v * 3 + 1] += dgy * sy_scale;
          ggr[v * 3 + 2] += dgz * sz_scale;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// warp
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> warp_tensor(const TensorT<T>& moving, const TensorT<T>& theta,
                       SampleMode mode = SampleMode::trilinear,
                       BorderMode border = BorderMode::clamp) {
  const Shape& s = moving.shape();
  check(s.size() == 5, ErrorKind::data, "warp: expected [N,C,D,H,W] tensor");
  return grid_sample(moving, affine_grid(theta, {s[2], s[3], s[4]}), mode, border);
}

// Volume-level warp. Backward-warping: `params` maps output (fixed) voxel
// coordinates to source coordinates inside `moving`.
inline Volume warp(const Volume& moving, const AffineParams& params,
                   SampleMode mode = SampleMode::trilinear,
                   BorderMode border = BorderMode::clamp) {
  check(moving.is_cubic(), ErrorKind::data,
        "warp: moving volume must be cubic (preprocess first)");
  NoGradT<float> ng;
  Tensor t = moving.as_tensor<float>();
  Tensor g = affine_grid<float>(params, {t.shape()[2], t.shape()[3], t.shape()[4]});
  Tensor w = grid_sample(t, g, mode, border);
  return Volume::from_tensor(w, moving.spacing(), moving.kind());
}

}  // namespace mvseg
