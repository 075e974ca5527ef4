#pragma once

// Segmentation evaluation: DSC, under/over-segmentation rates, their RMS, and
// a symmetric boundary-accuracy score. All operate on binary mask volumes.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvseg/common.hpp"
#include "mvseg/volume.hpp"

namespace mvseg {

namespace detail {

inline void check_mask_pair(const Volume& pred, const Volume& gt, const char* op) {
  check(pred.dims() == gt.dims(), ErrorKind::data,
        std::string(op) + ": mask dims mismatch");
  for (int64_t i = 0; i < pred.numel(); ++i) {
    float p = pred.data()[i], g = gt.data()[i];
    check((p == 0.f || p == 1.f) && (g == 0.f || g == 1.f), ErrorKind::data,
          std::string(op) + ": masks must be binary {0,1}");
  }
}

struct OverlapCounts {
  int64_t tp = 0, fp = 0, fn = 0, gt_size = 0, pred_size = 0;
};

inline OverlapCounts overlap_counts(const Volume& pred, const Volume& gt) {
  OverlapCounts c;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    bool p = pred.data()[i] != 0.f, g = gt.data()[i] != 0.f;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  c.gt_size = c.tp + c.fn;
  c.pred_size = c.tp + c.fp;
  return c;
}

}  // namespace detail

// Dice similarity 2|P*G| / (|P|+|G|); defined as 1.0 when both masks are empty.
inline double dsc(const Volume& pred, const Volume& gt) {
  detail::check_mask_pair(pred, gt, "dsc");
  auto c = detail::overlap_counts(pred, gt);
  if (c.gt_size == 0 && c.pred_size == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) /
         static_cast<double>(c.pred_size + c.gt_size);
}

struct UsOsRms {
  double us = 0, os = 0, rms = 0;
};

// US = |G\P|/|G|, OS = |P\G|/|G|, RMS = sqrt((US^2+OS^2)/2).
inline UsOsRms us_os_rms(const Volume& pred, const Volume& gt) {
  detail::check_mask_pair(pred, gt, "us_os_rms");
  auto c = detail::overlap_counts(pred, gt);
  check(c.gt_size > 0, ErrorKind::data, "us_os_rms: ground-truth mask is empty");
  UsOsRms r;
  r.us = static_cast<double>(c.fn) / static_cast<double>(c.gt_size);
  r.os = static_cast<double>(c.fp) / static_cast<double>(c.gt_size);
  r.rms = std::sqrt((r.us * r.us + r.os * r.os) / 2.0);
  return r;
}

namespace detail {

// Foreground voxels with at least one six-connected background neighbour;
// voxels outside the volume count as background.
inline std::vector<uint8_t> boundary_mask(const Volume& m) {
  const auto& d = m.dims();
  std::vector<uint8_t> b(static_cast<size_t>(m.numel()), 0);
  for (int64_t z = 0; z < d[2]; ++z)
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x) {
        if (m.at(x, y, z) == 0.f) continue;
        bool edge = x == 0 || x == d[0] - 1 || y == 0 || y == d[1] - 1 ||
                    z == 0 || z == d[2] - 1;
        bool bg = edge;
        if (!bg)
          bg = m.at(x - 1, y, z) == 0.f || m.at(x + 1, y, z) == 0.f ||
               m.at(x, y - 1, z) == 0.f || m.at(x, y + 1, z) == 0.f ||
               m.at(x, y, z - 1) == 0.f || m.at(x, y, z + 1) == 0.f;
        if (bg) b[static_cast<size_t>(x + d[0] * (y + d[1] * z))] = 1;
      }
  return b;
}

// One 26-neighbourhood dilation pass expands a set by Chebyshev distance 1.
inline std::vector<uint8_t> dilate26(const std::vector<uint8_t>& in,
                                     const std::array<int64_t, 3>& d) {
  std::vector<uint8_t> out(in.size(), 0);
  for (int64_t z = 0; z < d[2]; ++z)
    for (int64_t y = 0; y < d[1]; ++y)
      for (int64_t x = 0; x < d[0]; ++x) {
        bool hit = false;
        for (int64_t dz = -1; dz <= 1 && !hit; ++dz)
          for (int64_t dy = -1; dy <= 1 && !hit; ++dy)
            for (int64_t dx = -1; dx <= 1 && !hit; ++dx) {
              int64_t xx = x + dx, yy = y + dy, zz = z + dz;
              if (xx < 0 || xx >= d[0] || yy < 0 || yy >= d[1] || zz < 0 ||
                  zz >= d[2])
                continue;
              hit = in[static_cast<size_t>(xx + d[0] * (yy + d[1] * zz))] != 0;
            }
        out[static_cast<size_t>(x + d[0] * (y + d[1] * z))] = hit ? 1 : 0;
      }
  return out;
}

}  // namespace detail

// Symmetric boundary recall at Chebyshev tolerance tau: the mean over both
// directions of the fraction of boundary voxels lying within tau of the other
// mask's boundary.
inline double mba(const Volume& pred, const Volume& gt, int tau = 2) {
  detail::check_mask_pair(pred, gt, "mba");
  check(tau >= 0, ErrorKind::data, "mba: tau must be >= 0");
  auto cp = detail::overlap_counts(pred, gt);
  check(cp.pred_size > 0 && cp.gt_size > 0, ErrorKind::data,
        "mba: both masks must be non-empty");
  auto pb = detail::boundary_mask(pred);
  auto gb = detail::boundary_mask(gt);
  auto pd = pb;
  auto gd = gb;
  for (int t = 0; t < tau; ++t) {
    pd = detail::dilate26(pd, pred.dims());
    gd = detail::dilate26(gd, gt.dims());
  }
  int64_t g_total = 0, g_hit = 0, p_total = 0, p_hit = 0;
  for (size_t i = 0; i < pb.size(); ++i) {
    if (gb[i]) {
      ++g_total;
      g_hit += pd[i] != 0;
    }
    if (pb[i]) {
      ++p_total;
      p_hit += gd[i] != 0;
    }
  }
  double fa = static_cast<double>(g_hit) / static_cast<double>(g_total);
  double fb = static_cast<double>(p_hit) / static_cast<double>(p_total);
  return 0.5 * (fa + fb);
}

struct MetricsReport {
  double dsc = 0, us = 0, os = 0, rms = 0, mba = 0;
  int64_t tp = 0, fp = 0, fn = 0, gt_size = 0;
  int tau = 2;
};

inline MetricsReport evaluate_masks(const Volume& pred, const Volume& gt,
                                    int tau = 2) {
  MetricsReport r;
  r.tau = tau;
  r.dsc = dsc(pred, gt);
  auto c = detail::overlap_counts(pred, gt);
  r.tp = c.tp;
  r.fp = c.fp;
  r.fn = c.fn;
  r.gt_size = c.gt_size;
  auto u = us_os_rms(pred, gt);
  r.us = u.us;
  r.os = u.os;
  r.rms = u.rms;
  r.mba = mba(pred, gt, tau);
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"dsc", r.dsc}, {"us", r.us},       {"os", r.os},
          {"rms", r.rms}, {"mba", r.mba},     {"tp", r.tp},
          {"fp", r.fp},   {"fn", r.fn},       {"gt_size", r.gt_size},
          {"tau", r.tau}};
}

// Pairwise agreement between per-view masks aligned into the reference frame,
// plus agreement of the two moved views with the reference-frame ground truth.
struct CrossViewReport {
  double d12 = 0, d13 = 0, d23 = 0, d2hr = 0, d3hr = 0;
  double mean_pairwise() const { return (d12 + d13 + d23) / 3.0; }
};

inline CrossViewReport cross_view_report(const Volume& m1, const Volume& m2_to_1,
                                         const Volume& m3_to_1,
                                         const Volume& hr_gt) {
  CrossViewReport r;
  r.d12 = dsc(m1, m2_to_1);
  r.d13 = dsc(m1, m3_to_1);
  r.d23 = dsc(m2_to_1, m3_to_1);
  r.d2hr = dsc(m2_to_1, hr_gt);
  r.d3hr = dsc(m3_to_1, hr_gt);
  return r;
}

inline nlohmann::json to_json(const CrossViewReport& r) {
  return {{"dsc_1_2", r.d12},   {"dsc_1_3", r.d13},  {"dsc_2_3", r.d23},
          {"dsc_2_hr", r.d2hr}, {"dsc_3_hr", r.d3hr}};
}

}  // namespace mvseg
