#pragma once

// Shared test utilities: independent oracles (naive convolution, pointwise
// trilinear interpolation) and a central finite-difference gradient checker.
// These stay deliberately naive and separate from the library implementations
// they cross-check.

#include <cmath>
#include <functional>
#include <vector>

#include "mvseg/geometry.hpp"
#include "mvseg/rng.hpp"
#include "mvseg/tensor.hpp"

namespace testutil {

using mvseg::Rng;
using mvseg::Shape;
using mvseg::TensorT;

template <class T>
TensorT<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                         double hi = 1.0, bool requires_grad = false) {
  std::vector<T> data(static_cast<size_t>(mvseg::shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return TensorT<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

// Direct 7-loop reference convolution (cross-correlation, zero padding).
template <class T>
TensorT<T> conv3d_oracle(const TensorT<T>& input, const TensorT<T>& weight,
                         const TensorT<T>& bias, int64_t stride,
                         int64_t padding) {
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  int64_t N = is[0], Ci = is[1], D = is[2], H = is[3], W = is[4];
  int64_t Co = ws[0], k = ws[2];
  int64_t Do = (D + 2 * padding - k) / stride + 1;
  int64_t Ho = (H + 2 * padding - k) / stride + 1;
  int64_t Wo = (W + 2 * padding - k) / stride + 1;
  TensorT<T> out = TensorT<T>::zeros({N, Co, Do, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t x = 0; x < Wo; ++x) {
            double acc = bias.defined() ? static_cast<double>(bias.data()[co]) : 0.0;
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int64_t kz = 0; kz < k; ++kz)
                for (int64_t ky = 0; ky < k; ++ky)
                  for (int64_t kx = 0; kx < k; ++kx) {
                    int64_t zi = z * stride + kz - padding;
                    int64_t yi = y * stride + ky - padding;
                    int64_t xi = x * stride + kx - padding;
                    if (zi < 0 || zi >= D || yi < 0 || yi >= H || xi < 0 ||
                        xi >= W)
                      continue;
                    double iv = input.data()[(((n * Ci + ci) * D + zi) * H + yi) * W + xi];
                    double wv = weight.data()[(((co * Ci + ci) * k + kz) * k + ky) * k + kx];
                    acc += iv * wv;
                  }
            out.data()[(((n * Co + co) * Do + z) * Ho + y) * Wo + x] =
                static_cast<T>(acc);
          }
  return out;
}

// Independent scalar trilinear interpolation at one normalized coordinate
// (8-corner formula, clamp or zero border).
template <class T>
double trilinear_oracle(const TensorT<T>& vol, double gx, double gy, double gz,
                        bool zero_border = false) {
  const auto& s = vol.shape();
  int64_t D = s[2], H = s[3], W = s[4];
  auto unnorm = [](double c, int64_t n) {
    return (c + 1.0) * 0.5 * static_cast<double>(n - 1);
  };
  double sx = unnorm(gx, W), sy = unnorm(gy, H), sz = unnorm(gz, D);
  if (!zero_border) {
    sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
    sz = std::clamp(sz, 0.0, static_cast<double>(D - 1));
  }
  int64_t x0 = static_cast<int64_t>(std::floor(sx));
  int64_t y0 = static_cast<int64_t>(std::floor(sy));
  int64_t z0 = static_cast<int64_t>(std::floor(sz));
  double fx = sx - static_cast<double>(x0);
  double fy = sy - static_cast<double>(y0);
  double fz = sz - static_cast<double>(z0);
  auto fetch = [&](int64_t x, int64_t y, int64_t z) -> double {
    if (zero_border) {
      if (x < 0 || x >= W || y < 0 || y >= H || z < 0 || z >= D) return 0.0;
    } else {
      x = std::clamp<int64_t>(x, 0, W - 1);
      y = std::clamp<int64_t>(y, 0, H - 1);
      z = std::clamp<int64_t>(z, 0, D - 1);
    }
    return vol.data()[(z * H + y) * W + x];
  };
  double acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        acc += w * fetch(x0 + dx, y0 + dy, z0 + dz);
      }
  return acc;
}

// Central finite-difference gradient check. `make_loss` must rebuild the
// graph from the leaves on every call. Returns the max relative error over
// all checked coordinates, rel = |ad - fd| / max(1, |ad|, |fd|).
template <class T, class F>
double grad_check(std::vector<TensorT<T>> leaves, F make_loss, T h,
                  int max_coords_per_leaf = -1, Rng* pick_rng = nullptr) {
  for (auto& l : leaves) l.set_requires_grad(true);
  mvseg::TapeT<T> tape;
  std::vector<std::vector<T>> analytic;
  {
    mvseg::TapeScopeT<T> scope(tape);
    TensorT<T> loss = make_loss();
    mvseg::backward(loss);
  }
  for (auto& l : leaves) {
    analytic.push_back(l.has_grad()
                           ? l.grad_vec()
                           : std::vector<T>(static_cast<size_t>(l.numel()), T(0)));
    mvseg::zero_grad(l);
  }
  double worst = 0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    int64_t n = leaf.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_leaf > 0 && n > max_coords_per_leaf && pick_rng) {
      for (int c = 0; c < max_coords_per_leaf; ++c)
        coords.push_back(pick_rng->uniform_int(0, n - 1));
    } else {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    }
    for (int64_t ci : coords) {
      T saved = leaf.data()[ci];
      double lp, lm;
      {
        mvseg::NoGradT<T> ng;
        leaf.data()[ci] = saved + h;
        lp = static_cast<double>(make_loss().item());
        leaf.data()[ci] = saved - h;
        lm = static_cast<double>(make_loss().item());
        leaf.data()[ci] = saved;
      }
      double fd = (lp - lm) / (2.0 * static_cast<double>(h));
      double ad = static_cast<double>(analytic[li][static_cast<size_t>(ci)]);
      double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace testutil
