#pragma once

// Dense tensor arithmetic with reverse-mode automatic differentiation.
//
// Tensors are cheap shared handles onto contiguous storage (x fastest, NCDHW
// for network activations). Primitive ops record backward closures onto a
// thread-local tape when one is active and any input participates in
// gradients. backward() replays the tape in reverse execution order exactly
// once, accumulating additively into every consumer, then clears the tape.
//
// Everything is templated on the scalar so the same graph can run in float
// (production) or double (gradient-check shadow mode).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mvseg/common.hpp"

namespace mvseg {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <class T>
struct TensorImplT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(Shape shape, T value, bool requires_grad = false) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), value);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<T> data,
                           bool requires_grad = false) {
    check(shape_numel(shape) == static_cast<int64_t>(data.size()), ErrorKind::data,
          "tensor: data length " + std::to_string(data.size()) +
              " does not match shape " + shape_str(shape));
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  T* grad() { return impl_->grad.data(); }
  const T* grad() const { return impl_->grad.data(); }
  std::vector<T>& grad_vec() { return impl_->grad; }

  T item() const {
    check(numel() == 1, ErrorKind::data,
          "item(): tensor has shape " + shape_str(shape()) + ", expected a scalar");
    return impl_->data[0];
  }

  bool is_scalar() const { return numel() == 1; }

  std::shared_ptr<TensorImplT<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImplT<T>> impl_;
};

using Tensor = TensorT<float>;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class T>
class TapeT {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Reverse sweep; each node runs exactly once, then the tape is dropped.
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

template <class T>
inline TapeT<T>*& active_tape() {
  thread_local TapeT<T>* tape = nullptr;
  return tape;
}

// Activates a tape for the current thread for the lifetime of the scope.
template <class T>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<T>& tape) : prev_(active_tape<T>()) {
    active_tape<T>() = &tape;
  }
  ~TapeScopeT() { active_tape<T>() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<T>* prev_;
};

template <class T>
class NoGradT {
 public:
  NoGradT() : prev_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradT() { active_tape<T>() = prev_; }
  NoGradT(const NoGradT&) = delete;
  NoGradT& operator=(const NoGradT&) = delete;

 private:
  TapeT<T>* prev_;
};

using Tape = TapeT<float>;
using TapeScope = TapeScopeT<float>;
using NoGrad = NoGradT<float>;

template <class T>
inline bool grad_enabled_for(const TensorT<T>& t) {
  return active_tape<T>() != nullptr && t.requires_grad();
}

template <class T, class... Ts>
inline bool grad_enabled_for(const TensorT<T>& t, const Ts&... rest) {
  return grad_enabled_for(t) || grad_enabled_for(rest...);
}

// ---------------------------------------------------------------------------
// Elementwise suite
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline void check_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                             const char* op) {
  check(a.shape() == b.shape(), ErrorKind::data,
        std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
            shape_str(b.shape()));
}

// Either identical shapes or one side a scalar; anything else is rejected to
// keep backward rules auditable.
template <class T>
inline void check_broadcast(const TensorT<T>& a, const TensorT<T>& b,
                            const char* op) {
  if (a.shape() == b.shape() || a.is_scalar() || b.is_scalar()) return;
  fail_data(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
            " vs " + shape_str(b.shape()) +
            " (only identical shapes or tensor-vs-scalar)");
}

template <class T>
inline void accumulate(const std::shared_ptr<TensorImplT<T>>& impl,
                       const T* src, int64_t n) {
  if (!impl->requires_grad) return;
  impl->ensure_grad();
  T* g = impl->grad.data();
  for (int64_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

template <class T, class Fwd, class Bwd>
TensorT<T> binary_pointwise(const TensorT<T>& a, const TensorT<T>& b,
                            const char* name, Fwd fwd, Bwd bwd) {
  detail::check_broadcast(a, b, name);
  const bool a_scalar = a.is_scalar() && !b.is_scalar();
  const bool b_scalar = b.is_scalar() && !a.is_scalar();
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  int64_t n = shape_numel(out_shape);
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i)
    po[i] = fwd(pa[a_scalar ? 0 : i], pb[b_scalar ? 0 : i]);
  if (grad_enabled_for(a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ai, bi, oi, n, a_scalar, b_scalar, bwd]() {
      const T* go = oi->grad.data();
      if (oi->grad.empty()) return;
      std::vector<T> ga(ai->requires_grad ? ai->data.size() : 0, T(0));
      std::vector<T> gb(bi->requires_grad ? bi->data.size() : 0, T(0));
      for (int64_t i = 0; i < n; ++i) {
        int64_t ia = a_scalar ? 0 : i;
        int64_t ib = b_scalar ? 0 : i;
        T da, db;
        bwd(ai->data[ia], bi->data[ib], go[i], da, db);
        if (!ga.empty()) ga[ia] += da;
        if (!gb.empty()) gb[ib] += db;
      }
      if (!ga.empty()) detail::accumulate(ai, ga.data(), static_cast<int64_t>(ga.size()));
      if (!gb.empty()) detail::accumulate(bi, gb.data(), static_cast<int64_t>(gb.size()));
    });
  }
  return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_pointwise<T>(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = g;
      });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_pointwise<T>(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = -g;
      });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_pointwise<T>(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g * y;
        db = g * x;
      });
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_pointwise<T>(
      a, b, "div", [](T x, T y) { return x / y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

template <class T, class Fwd, class Bwd>
TensorT<T> unary_pointwise(const TensorT<T>& a, Fwd fwd, Bwd bwd) {
  int64_t n = a.numel();
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (grad_enabled_for(a)) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ai, oi, n, bwd]() {
      if (oi->grad.empty()) return;
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T* go = oi->grad.data();
      const T* x = ai->data.data();
      const T* y = oi->data.data();
      T* ga = ai->grad.data();
      for (int64_t i = 0; i < n; ++i) ga[i] += bwd(x[i], y[i], go[i]);
    });
  }
  return out;
}

template <class T>
TensorT<T> scalar_mul(const TensorT<T>& a, T s) {
  return unary_pointwise<T>(
      a, [s](T x) { return x * s; }, [s](T, T, T g) { return g * s; });
}

template <class T>
TensorT<T> scalar_add(const TensorT<T>& a, T s) {
  return unary_pointwise<T>(
      a, [s](T x) { return x + s; }, [](T, T, T g) { return g; });
}

// Subgradient at 0 is 0 (deterministic tests depend on it).
template <class T>
TensorT<T> relu(const TensorT<T>& a) {
  return unary_pointwise<T>(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  return unary_pointwise<T>(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <class T>
TensorT<T> sum(const TensorT<T>& a) {
  int64_t n = a.numel();
  const T* pa = a.data();
  // Fixed 8-lane reduction: fast and bitwise stable for a given input.
  T lanes[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) lanes[l] += pa[i + l];
  for (; i < n; ++i) lanes[i % 8] += pa[i];
  T total = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
            ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
  TensorT<T> out = TensorT<T>::scalar(total);
  if (grad_enabled_for(a)) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ai, oi, n]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      T g = oi->grad[0];
      T* ga = ai->grad.data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

template <class T>
TensorT<T> mean(const TensorT<T>& a) {
  return scalar_mul(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Constant copy detached from the graph; never accumulates grad.
template <class T>
TensorT<T> detach(const TensorT<T>& a) {
  return TensorT<T>::from_data(a.shape(), a.vec(), false);
}

template <class T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
  check(shape_numel(new_shape) == a.numel(), ErrorKind::data,
        "reshape: cannot view " + shape_str(a.shape()) + " as " +
            shape_str(new_shape));
  TensorT<T> out = TensorT<T>::from_data(std::move(new_shape), a.vec());
  if (grad_enabled_for(a)) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ai, oi]() {
      if (oi->grad.empty() || !ai->requires_grad) return;
      detail::accumulate(ai, oi->grad.data(), static_cast<int64_t>(oi->grad.size()));
    });
  }
  return out;
}

template <class T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "mse");
  TensorT<T> d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

namespace detail {

// Valid output range along one axis: indices o with 0 <= o*stride + k - pad < in.
inline void conv_axis_range(int64_t out_extent, int64_t in_extent, int64_t k,
                            int64_t pad, int64_t stride, int64_t& lo,
                            int64_t& hi) {
  int64_t num = pad - k;
  lo = num > 0 ? (num + stride - 1) / stride : 0;
  int64_t top = in_extent - 1 + pad - k;
  hi = top < 0 ? 0 : std::min(out_extent, top / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace detail

// Cross-correlation convolution over NCDHW input with a cubic kernel.
// Differentiable w.r.t. input, weight and bias.
template <class T>
TensorT<T> conv3d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, int64_t stride = 1,
                  int64_t padding = 0) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  check(is.size() == 5, ErrorKind::data,
        "conv3d: input must be [N,Cin,D,H,W], got " + shape_str(is));
  check(ws.size() == 5, ErrorKind::data,
        "conv3d: weight must be [Cout,Cin,k,k,k], got " + shape_str(ws));
  check(ws[2] == ws[3] && ws[3] == ws[4], ErrorKind::data,
        "conv3d: kernel must be cubic, got " + shape_str(ws));
  const int64_t N = is[0], Ci = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t Co = ws[0], k = ws[2];
  check(k % 2 == 1, ErrorKind::data, "conv3d: kernel extent must be odd, got " +
                                         std::to_string(k));
  check(stride >= 1, ErrorKind::data, "conv3d: stride must be >= 1");
  check(padding >= 0, ErrorKind::data, "conv3d: padding must be >= 0");
  check(ws[1] == Ci, ErrorKind::data,
        "conv3d: input channel dim = " + std::to_string(Ci) +
            " does not match weight Cin = " + std::to_string(ws[1]));
  if (bias.defined())
    check(bias.shape() == Shape{Co}, ErrorKind::data,
          "conv3d: bias dim = " + shape_str(bias.shape()) + ", expected [" +
              std::to_string(Co) + "]");
  auto out_extent = [&](int64_t in, const char* name) {
    int64_t num = in + 2 * padding - k;
    check(num >= 0 && num % stride == 0, ErrorKind::data,
          std::string("conv3d: ") + name + " extent " + std::to_string(in) +
              " incompatible with k=" + std::to_string(k) +
              " pad=" + std::to_string(padding) +
              " stride=" + std::to_string(stride));
    return num / stride + 1;
  };
  const int64_t Do = out_extent(D, "D"), Ho = out_extent(H, "H"),
                Wo = out_extent(W, "W");

  TensorT<T> out = TensorT<T>::zeros({N, Co, Do, Ho, Wo});
  const T* in_p = input.data();
  const T* w_p = weight.data();
  const T* b_p = bias.defined() ? bias.data() : nullptr;
  T* out_p = out.data();

  const int64_t in_ch = D * H * W, out_ch = Do * Ho * Wo;
  parallel_for(0, N * Co, [&](int64_t t0, int64_t t1) {
    for (int64_t t = t0; t < t1; ++t) {
      const int64_t n = t / Co, co = t % Co;
      T* oc = out_p + (n * Co + co) * out_ch;
      T bv = b_p ? b_p[co] : T(0);
      std::fill(oc, oc + out_ch, bv);
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const T* icn = in_p + (n * Ci + ci) * in_ch;
        for (int64_t kz = 0; kz < k; ++kz) {
          int64_t z0, z1;
          detail::conv_axis_range(Do, D, kz, padding, stride, z0, z1);
          for (int64_t ky = 0; ky < k; ++ky) {
            int64_t y0, y1;
            detail::conv_axis_range(Ho, H, ky, padding, stride, y0, y1);
            for (int64_t kx = 0; kx < k; ++kx) {
              int64_t x0, x1;
              detail::conv_axis_range(Wo, W, kx, padding, stride, x0, x1);
              const T wv = w_p[(((co * Ci + ci) * k + kz) * k + ky) * k + kx];
              if (wv == T(0)) continue;
              for (int64_t z = z0; z < z1; ++z) {
                const int64_t zi = z * stride + kz - padding;
                for (int64_t y = y0; y < y1; ++y) {
                  const int64_t yi = y * stride + ky - padding;
                  const T* irow = icn + (zi * H + yi) * W;
                  T* orow = oc + (z * Ho + y) * Wo;
                  if (stride == 1) {
                    const T* ir = irow + kx - padding;
                    for (int64_t x = x0; x < x1; ++x) orow[x] += wv * ir[x];
                  } else {
                    for (int64_t x = x0; x < x1; ++x)
                      orow[x] += wv * irow[x * stride + kx - padding];
                  }
                }
              }
            }
          }
        }
      }
    }
  });

  if (grad_enabled_for(input, weight, bias.defined() ? bias : input)) {
    out.set_requires_grad(true);
    auto ii = input.impl();
    auto wi = weight.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    auto oi = out.impl();
    int64_t pad = padding, str = stride;
    active_tape<T>()->record([ii, wi, bi, oi, N, Ci, Co, D, H, W, Do, Ho, Wo, k,
                              pad, str, in_ch, out_ch]() {
      if (oi->grad.empty()) return;
      const T* go = oi->grad.data();
      const T* w_p = wi->data.data();
      const T* in_p = ii->data.data();

      if (ii->requires_grad) {
        ii->ensure_grad();
        T* gi = ii->grad.data();
        // Each (n, ci) channel is owned by one task; inner order fixed.
        parallel_for(0, N * Ci, [&](int64_t t0, int64_t t1) {
          for (int64_t t = t0; t < t1; ++t) {
            const int64_t n = t / Ci, ci = t % Ci;
            T* gcn = gi + (n * Ci + ci) * in_ch;
            for (int64_t co = 0; co < Co; ++co) {
              const T* gocn = go + (n * Co + co) * out_ch;
              for (int64_t kz = 0; kz < k; ++kz) {
                int64_t z0, z1;
                detail::conv_axis_range(Do, D, kz, pad, str, z0, z1);
                for (int64_t ky = 0; ky < k; ++ky) {
                  int64_t y0, y1;
                  detail::conv_axis_range(Ho, H, ky, pad, str, y0, y1);
                  for (int64_t kx = 0; kx < k; ++kx) {
                    int64_t x0, x1;
                    detail::conv_axis_range(Wo, W, kx, pad, str, x0, x1);
                    const T wv =
                        w_p[(((co * Ci + ci) * k + kz) * k + ky) * k + kx];
                    if (wv == T(0)) continue;
                    for (int64_t z = z0; z < z1; ++z) {
                      const int64_t zi = z * str + kz - pad;
                      for (int64_t y = y0; y < y1; ++y) {
                        const int64_t yi = y * str + ky - pad;
                        const T* grow = gocn + (z * Ho + y) * Wo;
                        T* girow = gcn + (zi * H + yi) * W;
                        if (str == 1) {
                          T* gr = girow + kx - pad;
                          for (int64_t x = x0; x < x1; ++x) gr[x] += wv * grow[x];
                        } else {
                          for (int64_t x = x0; x < x1; ++x)
                            girow[x * str + kx - pad] += wv * grow[x];
                        }
                      }
                    }
                  }
                }
              }
            }
          }
        });
      }

      if (wi->requires_grad) {
        wi->ensure_grad();
        T* gw = wi->grad.data();
        // Each (co, ci) weight block owned by one task.
        parallel_for(0, Co * Ci, [&](int64_t t0, int64_t t1) {
          for (int64_t t = t0; t < t1; ++t) {
            const int64_t co = t / Ci, ci = t % Ci;
            for (int64_t kz = 0; kz < k; ++kz) {
              int64_t z0, z1;
              detail::conv_axis_range(Do, D, kz, pad, str, z0, z1);
              for (int64_t ky = 0; ky < k; ++ky) {
                int64_t y0, y1;
                detail::conv_axis_range(Ho, H, ky, pad, str, y0, y1);
                for (int64_t kx = 0; kx < k; ++kx) {
                  int64_t x0, x1;
                  detail::conv_axis_range(Wo, W, kx, pad, str, x0, x1);
                  T lanes[8] = {};
                  for (int64_t n = 0; n < N; ++n) {
                    const T* gocn = go + (n * Co + co) * out_ch;
                    const T* icn = in_p + (n * Ci + ci) * in_ch;
                    for (int64_t z = z0; z < z1; ++z) {
                      const int64_t zi = z * str + kz - pad;
                      for (int64_t y = y0; y < y1; ++y) {
                        const int64_t yi = y * str + ky - pad;
                        const T* grow = gocn + (z * Ho + y) * Wo;
                        const T* irow = icn + (zi * H + yi) * W;
                        if (str == 1) {
                          const T* ir = irow + kx - pad;
                          int64_t x = x0;
                          for (; x + 8 <= x1; x += 8)
                            for (int l = 0; l < 8; ++l)
                              lanes[l] += grow[x + l] * ir[x + l];
                          for (; x < x1; ++x)
                            lanes[(x - x0) % 8] += grow[x] * ir[x];
                        } else {
                          for (int64_t x = x0; x < x1; ++x)
                            lanes[(x - x0) % 8] +=
                                grow[x] * irow[x * str + kx - pad];
                        }
                      }
                    }
                  }
                  gw[(((co * Ci + ci) * k + kz) * k + ky) * k + kx] +=
                      ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
                      ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
                }
              }
            }
          }
        });
      }

      if (bi && bi->requires_grad) {
        bi->ensure_grad();
        T* gb = bi->grad.data();
        for (int64_t co = 0; co < Co; ++co) {
          T lanes[8] = {};
          for (int64_t n = 0; n < N; ++n) {
            const T* gocn = go + (n * Co + co) * out_ch;
            int64_t i = 0;
            for (; i + 8 <= out_ch; i += 8)
              for (int l = 0; l < 8; ++l) lanes[l] += gocn[i + l];
            for (; i < out_ch; ++i) lanes[i % 8] += gocn[i];
          }
          gb[co] += ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
                    ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> conv3d(const TensorT<T>& input, const TensorT<T>& weight,
                  int64_t stride = 1, int64_t padding = 0) {
  return conv3d(input, weight, TensorT<T>(), stride, padding);
}

// ---------------------------------------------------------------------------
// maxpool3d / upsample
// ---------------------------------------------------------------------------

// Max over k^3 windows; gradient routes to the argmax, first occurrence in
// scan order on ties.
template <class T>
TensorT<T> maxpool3d(const TensorT<T>& input, int64_t k) {
  const Shape& is = input.shape();
  check(is.size() == 5, ErrorKind::data,
        "maxpool3d: input must be [N,C,D,H,W], got " + shape_str(is));
  check(k >= 1, ErrorKind::data, "maxpool3d: k must be >= 1");
  const int64_t N = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  for (int axis = 2; axis < 5; ++axis)
    check(is[axis] % k == 0, ErrorKind::data,
          "maxpool3d: spatial dim " + std::to_string(axis - 2) + " extent " +
              std::to_string(is[axis]) + " not divisible by k=" +
              std::to_string(k));
  const int64_t Do = D / k, Ho = H / k, Wo = W / k;
  TensorT<T> out = TensorT<T>::zeros({N, C, Do, Ho, Wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(out.numel()));
  const T* ip = input.data();
  T* op = out.data();
  int64_t* am = argmax->data();
  const int64_t in_ch = D * H * W, out_ch = Do * Ho * Wo;
  parallel_for(0, N * C, [&](int64_t t0, int64_t t1) {
    for (int64_t t = t0; t < t1; ++t) {
      const T* icn = ip + t * in_ch;
      T* ocn = op + t * out_ch;
      int64_t* acn = am + t * out_ch;
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t x = 0; x < Wo; ++x) {
            T best{};
            int64_t best_idx = -1;
            for (int64_t dz = 0; dz < k; ++dz)
              for (int64_t dy = 0; dy < k; ++dy)
                for (int64_t dx = 0; dx < k; ++dx) {
                  int64_t idx =
                      ((z * k + dz) * H + (y * k + dy)) * W + (x * k + dx);
                  T v = icn[idx];
                  if (best_idx < 0 || v > best) {
                    best = v;
                    best_idx = idx;
                  }
                }
            ocn[(z * Ho + y) * Wo + x] = best;
            acn[(z * Ho + y) * Wo + x] = best_idx;
          }
    }
  });
  if (grad_enabled_for(input)) {
    out.set_requires_grad(true);
    auto ii = input.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ii, oi, argmax, N, C, in_ch, out_ch]() {
      if (oi->grad.empty() || !ii->requires_grad) return;
      ii->ensure_grad();
      const T* go = oi->grad.data();
      T* gi = ii->grad.data();
      const int64_t* am = argmax->data();
      for (int64_t t = 0; t < N * C; ++t) {
        const T* gocn = go + t * out_ch;
        T* gicn = gi + t * in_ch;
        const int64_t* acn = am + t * out_ch;
        for (int64_t i = 0; i < out_ch; ++i) gicn[acn[i]] += gocn[i];
      }
    });
  }
  return out;
}

// Mean over k^3 windows; gradient spreads uniformly back over each window.
template <class T>
TensorT<T> avgpool3d(const TensorT<T>& input, int64_t k) {
  const Shape& is = input.shape();
  check(is.size() == 5, ErrorKind::data,
        "avgpool3d: input must be [N,C,D,H,W], got " + shape_str(is));
  check(k >= 1, ErrorKind::data, "avgpool3d: k must be >= 1");
  for (int axis = 2; axis < 5; ++axis)
    check(is[axis] % k == 0, ErrorKind::data,
          "avgpool3d: spatial dim " + std::to_string(axis - 2) + " extent " +
              std::to_string(is[axis]) + " not divisible by k=" +
              std::to_string(k));
  const int64_t N = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t Do = D / k, Ho = H / k, Wo = W / k;
  const T inv = T(1) / static_cast<T>(k * k * k);
  TensorT<T> out = TensorT<T>::zeros({N, C, Do, Ho, Wo});
  const T* ip = input.data();
  T* op = out.data();
  const int64_t in_ch = D * H * W, out_ch = Do * Ho * Wo;
  parallel_for(0, N * C, [&](int64_t t0, int64_t t1) {
    for (int64_t t = t0; t < t1; ++t) {
      const T* icn = ip + t * in_ch;
      T* ocn = op + t * out_ch;
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t x = 0; x < Wo; ++x) {
            T acc = T(0);
            for (int64_t dz = 0; dz < k; ++dz)
              for (int64_t dy = 0; dy < k; ++dy)
                for (int64_t dx = 0; dx < k; ++dx)
                  acc += icn[((z * k + dz) * H + (y * k + dy)) * W + x * k + dx];
            ocn[(z * Ho + y) * Wo + x] = acc * inv;
          }
    }
  });
  if (grad_enabled_for(input)) {
    out.set_requires_grad(true);
    auto ii = input.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ii, oi, N, C, H, W, Do, Ho, Wo, k, inv, in_ch,
                              out_ch]() {
      if (oi->grad.empty() || !ii->requires_grad) return;
      ii->ensure_grad();
      const T* go = oi->grad.data();
      T* gi = ii->grad.data();
      for (int64_t t = 0; t < N * C; ++t) {
        const T* gocn = go + t * out_ch;
        T* gicn = gi + t * in_ch;
        for (int64_t z = 0; z < Do; ++z)
          for (int64_t y = 0; y < Ho; ++y)
            for (int64_t x = 0; x < Wo; ++x) {
              T g = gocn[(z * Ho + y) * Wo + x] * inv;
              for (int64_t dz = 0; dz < k; ++dz)
                for (int64_t dy = 0; dy < k; ++dy)
                  for (int64_t dx = 0; dx < k; ++dx)
                    gicn[((z * k + dz) * H + (y * k + dy)) * W + x * k + dx] += g;
            }
      }
    });
  }
  return out;
}

// Nearest-neighbour up-sampling with per-axis integer factors; the gradient
// of each source voxel sums over its replicated cells.
template <class T>
TensorT<T> upsample_nearest3d(const TensorT<T>& input, int64_t fd, int64_t fh,
                              int64_t fw) {
  const Shape& is = input.shape();
  check(is.size() == 5, ErrorKind::data,
        "upsample_nearest3d: input must be [N,C,D,H,W], got " + shape_str(is));
  check(fd >= 1 && fh >= 1 && fw >= 1, ErrorKind::data,
        "upsample_nearest3d: factors must be >= 1");
  const int64_t N = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t Do = D * fd, Ho = H * fh, Wo = W * fw;
  TensorT<T> out = TensorT<T>::zeros({N, C, Do, Ho, Wo});
  const T* ip = input.data();
  T* op = out.data();
  const int64_t in_ch = D * H * W, out_ch = Do * Ho * Wo;
  parallel_for(0, N * C, [&](int64_t t0, int64_t t1) {
    for (int64_t t = t0; t < t1; ++t) {
      const T* icn = ip + t * in_ch;
      T* ocn = op + t * out_ch;
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y) {
          const T* irow = icn + ((z / fd) * H + (y / fh)) * W;
          T* orow = ocn + (z * Ho + y) * Wo;
          for (int64_t x = 0; x < Wo; ++x) orow[x] = irow[x / fw];
        }
    }
  });
  if (grad_enabled_for(input)) {
    out.set_requires_grad(true);
    auto ii = input.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ii, oi, N, C, D, H, W, fd, fh, fw, Ho, Wo, in_ch,
                              out_ch]() {
      if (oi->grad.empty() || !ii->requires_grad) return;
      ii->ensure_grad();
      const T* go = oi->grad.data();
      T* gi = ii->grad.data();
      for (int64_t t = 0; t < N * C; ++t) {
        const T* gocn = go + t * out_ch;
        T* gicn = gi + t * in_ch;
        for (int64_t z = 0; z < D; ++z)
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
              T acc = T(0);
              for (int64_t dz = 0; dz < fd; ++dz)
                for (int64_t dy = 0; dy < fh; ++dy) {
                  const T* grow = gocn + ((z * fd + dz) * Ho + (y * fh + dy)) * Wo +
                                  x * fw;
                  for (int64_t dx = 0; dx < fw; ++dx) acc += grow[dx];
                }
              gicn[(z * H + y) * W + x] += acc;
            }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> upsample_nearest3d(const TensorT<T>& input, int64_t factor) {
  return upsample_nearest3d(input, factor, factor, factor);
}

// ---------------------------------------------------------------------------
// concat / linear / boxsum
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  check(as.size() == 5 && bs.size() == 5, ErrorKind::data,
        "concat_channels: inputs must be [N,C,D,H,W]");
  check(as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3] && as[4] == bs[4],
        ErrorKind::data,
        "concat_channels: shape mismatch " + shape_str(as) + " vs " +
            shape_str(bs));
  const int64_t N = as[0], Ca = as[1], Cb = bs[1];
  const int64_t spatial = as[2] * as[3] * as[4];
  TensorT<T> out = TensorT<T>::zeros({N, Ca + Cb, as[2], as[3], as[4]});
  T* op = out.data();
  for (int64_t n = 0; n < N; ++n) {
    std::copy(a.data() + n * Ca * spatial, a.data() + (n + 1) * Ca * spatial,
              op + n * (Ca + Cb) * spatial);
    std::copy(b.data() + n * Cb * spatial, b.data() + (n + 1) * Cb * spatial,
              op + (n * (Ca + Cb) + Ca) * spatial);
  }
  if (grad_enabled_for(a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ai, bi, oi, N, Ca, Cb, spatial]() {
      if (oi->grad.empty()) return;
      const T* go = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
          const T* src = go + n * (Ca + Cb) * spatial;
          T* dst = ai->grad.data() + n * Ca * spatial;
          for (int64_t i = 0; i < Ca * spatial; ++i) dst[i] += src[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
          const T* src = go + (n * (Ca + Cb) + Ca) * spatial;
          T* dst = bi->grad.data() + n * Cb * spatial;
          for (int64_t i = 0; i < Cb * spatial; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  check(xs.size() == 2 && ws.size() == 2, ErrorKind::data,
        "linear: expected x [N,F] and w [O,F]");
  check(xs[1] == ws[1], ErrorKind::data,
        "linear: feature dim = " + std::to_string(xs[1]) +
            " does not match weight F = " + std::to_string(ws[1]));
  const int64_t N = xs[0], F = xs[1], O = ws[0];
  if (b.defined())
    check(b.shape() == Shape{O}, ErrorKind::data, "linear: bias dim mismatch");
  TensorT<T> out = TensorT<T>::zeros({N, O});
  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = b.defined() ? b.data() : nullptr;
  T* op = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o) {
      T lanes[8] = {};
      const T* xr = xp + n * F;
      const T* wr = wp + o * F;
      int64_t f = 0;
      for (; f + 8 <= F; f += 8)
        for (int l = 0; l < 8; ++l) lanes[l] += xr[f + l] * wr[f + l];
      for (; f < F; ++f) lanes[f % 8] += xr[f] * wr[f];
      T acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
              ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
      op[n * O + o] = acc + (bp ? bp[o] : T(0));
    }
  if (grad_enabled_for(x, w, b.defined() ? b : x)) {
    out.set_requires_grad(true);
    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    auto oi = out.impl();
    active_tape<T>()->record([xi, wi, bi, oi, N, F, O]() {
      if (oi->grad.empty()) return;
      const T* go = oi->grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t o = 0; o < O; ++o) {
            T g = go[n * O + o];
            const T* wr = wi->data.data() + o * F;
            T* gx = xi->grad.data() + n * F;
            for (int64_t f = 0; f < F; ++f) gx[f] += g * wr[f];
          }
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        for (int64_t o = 0; o < O; ++o)
          for (int64_t n = 0; n < N; ++n) {
            T g = go[n * O + o];
            const T* xr = xi->data.data() + n * F;
            T* gw = wi->grad.data() + o * F;
            for (int64_t f = 0; f < F; ++f) gw[f] += g * xr[f];
          }
      }
      if (bi && bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t o = 0; o < O; ++o) {
          T acc = T(0);
          for (int64_t n = 0; n < N; ++n) acc += go[n * O + o];
          bi->grad[o] += acc;
        }
      }
    });
  }
  return out;
}

namespace detail {

// In-place zero-padded box filter along one axis described by (count, stride).
template <class T>
void boxsum_axis(T* data, int64_t lines, int64_t line_stride, int64_t n,
                 int64_t stride, int64_t radius,
                 const std::function<int64_t(int64_t)>& line_base) {
  std::vector<T> prefix(static_cast<size_t>(n) + 1);
  std::vector<T> tmp(static_cast<size_t>(n));
  for (int64_t li = 0; li < lines; ++li) {
    T* base = data + line_base(li) * line_stride;
    prefix[0] = T(0);
    for (int64_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + base[i * stride];
    for (int64_t i = 0; i < n; ++i) {
      int64_t lo = std::max<int64_t>(0, i - radius);
      int64_t hi = std::min<int64_t>(n - 1, i + radius);
      tmp[i] = prefix[hi + 1] - prefix[lo];
    }
    for (int64_t i = 0; i < n; ++i) base[i * stride] = tmp[i];
  }
}

}  // namespace detail

// Sliding-window sum over window^3 neighbourhoods (zero padding outside).
// Separable, so it is O(n) per axis; the operator is self-adjoint, meaning
// backward is the same box sum applied to the output gradient.
template <class T>
TensorT<T> boxsum3d(const TensorT<T>& input, int64_t window) {
  const Shape& is = input.shape();
  check(is.size() == 5, ErrorKind::data,
        "boxsum3d: input must be [N,C,D,H,W], got " + shape_str(is));
  check(window >= 1 && window % 2 == 1, ErrorKind::data,
        "boxsum3d: window must be odd and positive");
  const int64_t N = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t r = window / 2;
  TensorT<T> out = TensorT<T>::from_data(is, input.vec());
  T* p = out.data();
  auto run = [=](T* buf) {
    // x axis: lines are contiguous rows.
    detail::boxsum_axis<T>(buf, N * C * D * H, 1, W, 1, r,
                           [&](int64_t li) { return li * W; });
    // y axis.
    detail::boxsum_axis<T>(buf, N * C * D * W, 1, H, W, r, [&](int64_t li) {
      int64_t x = li % W;
      int64_t zs = li / W;
      return zs * H * W + x;
    });
    // z axis.
    detail::boxsum_axis<T>(buf, N * C * H * W, 1, D, H * W, r, [&](int64_t li) {
      int64_t hw = li % (H * W);
      int64_t nc = li / (H * W);
      return nc * D * H * W + hw;
    });
  };
  run(p);
  if (grad_enabled_for(input)) {
    out.set_requires_grad(true);
    auto ii = input.impl();
    auto oi = out.impl();
    active_tape<T>()->record([ii, oi, run]() {
      if (oi->grad.empty() || !ii->requires_grad) return;
      std::vector<T> g = oi->grad;
      run(g.data());
      detail::accumulate(ii, g.data(), static_cast<int64_t>(g.size()));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward / SGD
// ---------------------------------------------------------------------------

template <class T>
void backward(TensorT<T>& loss) {
  check(loss.is_scalar(), ErrorKind::numeric,
        "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  TapeT<T>* tape = active_tape<T>();
  check(tape != nullptr, ErrorKind::numeric,
        "backward: no active tape in this execution context");
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = T(1);
  tape->run_backward();
}

template <class T>
void zero_grad(TensorT<T>& t) {
  if (t.has_grad()) std::fill(t.grad_vec().begin(), t.grad_vec().end(), T(0));
}

// p <- p - lr * grad(p); grads zeroed. Plain step, no momentum state.
template <class T>
void sgd_step(std::vector<TensorT<T>>& params, T lr) {
  for (auto& p : params) {
    check(p.has_grad(), ErrorKind::numeric,
          "sgd_step: parameter of shape " + shape_str(p.shape()) +
              " has no gradient");
    T* d = p.data();
    T* g = p.grad();
    int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) d[i] -= lr * g[i];
    std::fill(p.grad_vec().begin(), p.grad_vec().end(), T(0));
  }
}

// SGD with optional momentum (v <- mu*v + g; p <- p - lr*v). Momentum is on
// by default: the small nets train unstably without it.
template <class T>
class SgdT {
 public:
  SgdT(std::vector<TensorT<T>> params, bool use_momentum = true,
       T momentum = T(0.9))
      : params_(std::move(params)),
        use_momentum_(use_momentum),
        momentum_(momentum) {
    velocity_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(static_cast<size_t>(params_[i].numel()), T(0));
  }

  void step(T lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      check(p.has_grad(), ErrorKind::numeric,
            "sgd: parameter of shape " + shape_str(p.shape()) +
                " has no gradient");
      T* d = p.data();
      T* g = p.grad();
      int64_t n = p.numel();
      if (use_momentum_) {
        T* v = velocity_[i].data();
        for (int64_t j = 0; j < n; ++j) {
          v[j] = momentum_ * v[j] + g[j];
          d[j] -= lr * v[j];
        }
      } else {
        for (int64_t j = 0; j < n; ++j) d[j] -= lr * g[j];
      }
      std::fill(p.grad_vec().begin(), p.grad_vec().end(), T(0));
    }
  }

  std::vector<TensorT<T>>& params() { return params_; }

 private:
  std::vector<TensorT<T>> params_;
  bool use_momentum_;
  T momentum_;
  std::vector<std::vector<T>> velocity_;
};

using Sgd = SgdT<float>;

}  // namespace mvseg
