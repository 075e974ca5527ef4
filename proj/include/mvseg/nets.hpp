#pragma once

// The two learnable components and every training loss.
//
// Segmentor: 2-level 3D U-Net (additive skip, sigmoid head) mapping a cubic
// intensity volume to a soft mask in [0,1].
// AlignNet: convolutional localization trunk over the channel-concatenated
// (moving, fixed) pair, dense head emitting 6 rigid-transform parameters. The
// final layer is zero-initialized so the net starts at the identity
// transform.
//
// Loss conventions: L2 terms are means (not sums) so weights are
// resolution-independent; every loss returns a scalar tensor on the active
// tape.

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mvseg/common.hpp"
#include "mvseg/geometry.hpp"
#include "mvseg/rng.hpp"
#include "mvseg/tensor.hpp"

namespace mvseg {

struct LossWeights {
  double lambda1 = 0.1;   // identity-loss weight
  double lambda2 = 0.05;  // supervised mask-similarity weight
  double alpha1 = 0.05;   // segmentor consistency weight
  double alpha2 = 0.05;   // aligner consistency weight

  void validate() const {
    check(lambda1 >= 0 && lambda2 >= 0 && alpha1 >= 0 && alpha2 >= 0,
          ErrorKind::config, "loss weights must be >= 0");
  }
};

enum class Cons2Target { pose_consistent, as_written };

inline Cons2Target cons2_target_from_string(const std::string& s) {
  if (s == "pose-consistent") return Cons2Target::pose_consistent;
  if (s == "as-written") return Cons2Target::as_written;
  fail_config("cons2-target must be 'pose-consistent' or 'as-written', got '" + s + "'");
}

namespace detail {

template <class T>
TensorT<T> make_param(Shape shape, Rng& rng, double scale) {
  std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-scale, scale));
  return TensorT<T>::from_data(std::move(shape), std::move(data), true);
}

template <class T>
TensorT<T> conv_param(int64_t co, int64_t ci, int64_t k, Rng& rng) {
  double fan_in = static_cast<double>(ci * k * k * k);
  return make_param<T>({co, ci, k, k, k}, rng, std::sqrt(2.0 / fan_in));
}

}  // namespace detail

template <class T>
using NamedParams = std::vector<std::pair<std::string, TensorT<T>>>;

// ---------------------------------------------------------------------------
// Segmentor
// ---------------------------------------------------------------------------

template <class T>
class SegmentorT {
 public:
  explicit SegmentorT(int64_t base_channels, Rng rng)
      : channels_(base_channels) {
    const int64_t c = base_channels;
    enc1_w = detail::conv_param<T>(c, 1, 3, rng);
    enc1_b = TensorT<T>::zeros({c}, true);
    bott1_w = detail::conv_param<T>(2 * c, c, 3, rng);
    bott1_b = TensorT<T>::zeros({2 * c}, true);
    bott2_w = detail::conv_param<T>(2 * c, 2 * c, 3, rng);
    bott2_b = TensorT<T>::zeros({2 * c}, true);
    bott3_w = detail::conv_param<T>(c, 2 * c, 3, rng);
    bott3_b = TensorT<T>::zeros({c}, true);
    dec_w = detail::conv_param<T>(c, c, 3, rng);
    dec_b = TensorT<T>::zeros({c}, true);
    head_w = detail::conv_param<T>(1, c, 1, rng);
    head_b = TensorT<T>::zeros({1}, true);
  }

  // [1,1,n,n,n] intensity volume -> [1,1,n,n,n] soft mask in [0,1].
  TensorT<T> operator()(const TensorT<T>& x) const {
    const Shape& s = x.shape();
    check(s.size() == 5 && s[1] == 1, ErrorKind::data,
          "segmentor: input must be [N,1,D,H,W], got " + shape_str(s));
    check(s[2] % 2 == 0 && s[3] % 2 == 0 && s[4] % 2 == 0, ErrorKind::data,
          "segmentor: spatial extents must be even");
    auto e1 = relu(conv3d(x, enc1_w, enc1_b, 1, 1));
    auto p = maxpool3d(e1, 2);
    auto b1 = relu(conv3d(p, bott1_w, bott1_b, 1, 1));
    auto b2 = relu(conv3d(b1, bott2_w, bott2_b, 1, 1));
    auto b3 = relu(conv3d(b2, bott3_w, bott3_b, 1, 1));
    auto up = upsample_nearest3d(b3, 2);
    auto d = relu(conv3d(add(up, e1), dec_w, dec_b, 1, 1));
    return sigmoid(conv3d(d, head_w, head_b, 1, 0));
  }

  NamedParams<T> named_params() {
    return {{"enc1.w", enc1_w},   {"enc1.b", enc1_b},   {"bott1.w", bott1_w},
            {"bott1.b", bott1_b}, {"bott2.w", bott2_w}, {"bott2.b", bott2_b},
            {"bott3.w", bott3_w}, {"bott3.b", bott3_b}, {"dec.w", dec_w},
            {"dec.b", dec_b},     {"head.w", head_w},   {"head.b", head_b}};
  }

  std::vector<TensorT<T>> params() {
    std::vector<TensorT<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  int64_t channels() const { return channels_; }

  TensorT<T> enc1_w, enc1_b, bott1_w, bott1_b, bott2_w, bott2_b, bott3_w,
      bott3_b, dec_w, dec_b, head_w, head_b;

 private:
  int64_t channels_;
};

using Segmentor = SegmentorT<float>;

// ---------------------------------------------------------------------------
// AlignNet
// ---------------------------------------------------------------------------

template <class T>
class AlignNetT {
 public:
  // trunk_input_dim: spatial extent after the initial 2x average pooling;
  // the trunk pools it down to 4 before the dense head.
  explicit AlignNetT(int64_t base_channels, Rng rng)
      : channels_(base_channels) {
    const int64_t c = base_channels;
    c1_w = detail::conv_param<T>(c, 2, 3, rng);
    c1_b = TensorT<T>::zeros({c}, true);
    c2_w = detail::conv_param<T>(2 * c, c, 3, rng);
    c2_b = TensorT<T>::zeros({2 * c}, true);
    c3_w = detail::conv_param<T>(4 * c, 2 * c, 3, rng);
    c3_b = TensorT<T>::zeros({4 * c}, true);
    c4_w = detail::conv_param<T>(4 * c, 4 * c, 3, rng);
    c4_b = TensorT<T>::zeros({4 * c}, true);
    fc1_w = detail::make_param<T>({64, 4 * c * 64},
                                  rng, std::sqrt(2.0 / (4.0 * c * 64.0)));
    fc1_b = TensorT<T>::zeros({64}, true);
    // zero-init head: the initial prediction is the identity transform
    fc2_w = TensorT<T>::zeros({6, 64}, true);
    fc2_b = TensorT<T>::zeros({6}, true);
  }

  // (moving, fixed) cubic volumes [1,1,n,n,n] -> theta [6].
  TensorT<T> operator()(const TensorT<T>& moving, const TensorT<T>& fixed) const {
    detail::check_same_shape(moving, fixed, "alignnet");
    const Shape& s = moving.shape();
    check(s.size() == 5 && s[0] == 1 && s[1] == 1, ErrorKind::data,
          "alignnet: inputs must be [1,1,n,n,n]");
    check(s[2] == s[3] && s[3] == s[4] && s[2] % 16 == 0 && s[2] >= 32,
          ErrorKind::data,
          "alignnet: extent must be cubic, >= 32 and divisible by 16");
    auto x = concat_channels(moving, fixed);
    x = avgpool3d(x, s[2] / 32);          // 32^3 working resolution
    auto h = relu(conv3d(x, c1_w, c1_b, 1, 1));
    h = maxpool3d(h, 2);                  // 16
    h = relu(conv3d(h, c2_w, c2_b, 1, 1));
    h = maxpool3d(h, 2);                  // 8
    h = relu(conv3d(h, c3_w, c3_b, 1, 1));
    h = maxpool3d(h, 2);                  // 4
    h = relu(conv3d(h, c4_w, c4_b, 1, 1));
    auto flat = reshape(h, {1, shape_numel(h.shape())});
    auto f = relu(linear(flat, fc1_w, fc1_b));
    auto theta = linear(f, fc2_w, fc2_b);
    return reshape(theta, {6});
  }

  NamedParams<T> named_params() {
    return {{"c1.w", c1_w}, {"c1.b", c1_b}, {"c2.w", c2_w}, {"c2.b", c2_b},
            {"c3.w", c3_w}, {"c3.b", c3_b}, {"c4.w", c4_w}, {"c4.b", c4_b},
            {"fc1.w", fc1_w}, {"fc1.b", fc1_b}, {"fc2.w", fc2_w},
            {"fc2.b", fc2_b}};
  }

  std::vector<TensorT<T>> params() {
    std::vector<TensorT<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  int64_t channels() const { return channels_; }

  TensorT<T> c1_w, c1_b, c2_w, c2_b, c3_w, c3_b, c4_w, c4_b, fc1_w, fc1_b,
      fc2_w, fc2_b;

 private:
  int64_t channels_;
};

using AlignNet = AlignNetT<float>;

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps)
template <class T>
TensorT<T> dice_loss(const TensorT<T>& pred, const TensorT<T>& gt) {
  detail::check_same_shape(pred, gt, "dice_loss");
  const T eps = T(1e-5);
  auto inter = sum(mul(pred, gt));
  auto denom = add(sum(pred), sum(gt));
  auto ratio = div(scalar_add(scalar_mul(inter, T(2)), eps),
                   scalar_add(denom, eps));
  return scalar_add(scalar_mul(ratio, T(-1)), T(1));
}

// Local squared Pearson correlation over window^3 neighbourhoods, returned as
// a loss 1 - mean(r^2) so that lower is better. Windows are truncated at the
// borders (per-voxel counts). Second moments are window sums, the denominator
// is guarded by max(var_a*var_b, eps) with eps = 1e-5, and windows whose
// variance product falls at or below the guard have no defined correlation:
// they are excluded from the mean (and contribute no gradient). On a
// fully-degenerate pair (no window with variance) the loss is 1.
template <class T>
TensorT<T> local_cc(const TensorT<T>& a, const TensorT<T>& b,
                    int64_t window = 9) {
  detail::check_same_shape(a, b, "local_cc");
  check(window % 2 == 1, ErrorKind::data, "local_cc: window must be odd");
  const T eps = T(1e-5);
  TensorT<T> counts;
  {
    NoGradT<T> ng;
    counts = boxsum3d(TensorT<T>::filled(a.shape(), T(1)), window);
  }
  auto sa = boxsum3d(a, window);
  auto sb = boxsum3d(b, window);
  auto saa = boxsum3d(mul(a, a), window);
  auto sbb = boxsum3d(mul(b, b), window);
  auto sab = boxsum3d(mul(a, b), window);
  auto cov = sub(sab, div(mul(sa, sb), counts));
  auto var_a = relu(sub(saa, div(mul(sa, sa), counts)));
  auto var_b = relu(sub(sbb, div(mul(sb, sb), counts)));
  auto prod = mul(var_a, var_b);
  TensorT<T> defined;  // indicator of windows with defined correlation
  T n_defined;
  {
    NoGradT<T> ng;
    defined = TensorT<T>::zeros(prod.shape());
    n_defined = T(0);
    for (int64_t i = 0; i < prod.numel(); ++i)
      if (prod.data()[i] > eps) {
        defined.data()[i] = T(1);
        n_defined += T(1);
      }
  }
  auto guarded = scalar_add(relu(scalar_add(prod, -eps)), eps);  // max(prod, eps)
  auto r2 = div(mul(cov, cov), guarded);
  // clamp r^2 at 1 to absorb floating-point overshoot
  auto r2c = scalar_add(
      scalar_mul(relu(scalar_add(scalar_mul(r2, T(-1)), T(1))), T(-1)), T(1));
  auto kept = sum(mul(r2c, defined));
  T denom = n_defined > T(0) ? n_defined : T(1);
  return scalar_add(scalar_mul(scalar_mul(kept, T(1) / denom), T(-1)), T(1));
}

// L_ID: mean-squared self-registration residual for both inputs. AlignFn maps
// (moving, fixed) -> theta[6].
template <class T, class AlignFn>
TensorT<T> identity_loss(AlignFn&& g, const TensorT<T>& a, const TensorT<T>& b) {
  auto theta_aa = g(a, a);
  auto theta_bb = g(b, b);
  auto waa = warp_tensor(a, theta_aa);
  auto wbb = warp_tensor(b, theta_bb);
  return add(mse(detach(a), waa), mse(detach(b), wbb));
}

// L_align1 = local_cc(fixed, warp(moving)) + lambda1 * L_ID.
template <class T, class AlignFn>
TensorT<T> align_loss_unsup(AlignFn&& g, const TensorT<T>& moving,
                            const TensorT<T>& fixed, double lambda1,
                            int64_t cc_window = 9) {
  auto theta = g(moving, fixed);
  auto moved = warp_tensor(moving, theta);
  auto loss = local_cc(fixed, moved, cc_window);
  if (lambda1 != 0.0) {
    auto lid = identity_loss<T>(g, moving, fixed);
    loss = add(loss, scalar_mul(lid, static_cast<T>(lambda1)));
  }
  return loss;
}

// Supervised extension: adds lambda2 * local_cc(fixed_mask, warp(moving_mask)).
// Masks are warped softly so the term stays differentiable.
template <class T, class AlignFn>
TensorT<T> align_loss_sup(AlignFn&& g, const TensorT<T>& moving,
                          const TensorT<T>& fixed,
                          const TensorT<T>& moving_mask,
                          const TensorT<T>& fixed_mask, double lambda1,
                          double lambda2, int64_t cc_window = 9) {
  auto theta = g(moving, fixed);
  auto moved = warp_tensor(moving, theta);
  auto loss = local_cc(fixed, moved, cc_window);
  if (lambda1 != 0.0) {
    auto lid = identity_loss<T>(g, moving, fixed);
    loss = add(loss, scalar_mul(lid, static_cast<T>(lambda1)));
  }
  if (lambda2 != 0.0) {
    auto moved_mask = warp_tensor(moving_mask, theta);
    auto mask_term = local_cc(fixed_mask, moved_mask, cc_window);
    loss = add(loss, scalar_mul(mask_term, static_cast<T>(lambda2)));
  }
  return loss;
}

// L_cons1: the segmentation of each aligned image should match the (detached)
// single-view prediction. Gradients flow only through S(f_*): the single-view
// masks act as soft targets.
template <class T, class SegFn>
TensorT<T> cons1_loss(SegFn&& s, const TensorT<T>& f_j_to_i,
                      const TensorT<T>& f_i_to_j, const TensorT<T>& m_i,
                      const TensorT<T>& m_j) {
  auto a = mse(s(f_j_to_i), detach(m_i));
  auto b = mse(s(f_i_to_j), detach(m_j));
  return add(a, b);
}

// L_cons2: segment-then-warp consistency. S is applied outside the tape (its
// outputs enter as constants) so gradients reach only the aligner.
template <class T, class SegFn, class AlignFn>
TensorT<T> cons2_loss(SegFn&& s, AlignFn&& g, const TensorT<T>& i_i,
                      const TensorT<T>& i_j,
                      Cons2Target target = Cons2Target::pose_consistent) {
  TensorT<T> m_i, m_j;
  {
    NoGradT<T> ng;
    m_i = detach(s(i_i));
    m_j = detach(s(i_j));
  }
  auto theta_ij = g(i_i, i_j);
  auto theta_ji = g(i_j, i_i);
  auto f_mi = warp_tensor(m_i, theta_ij);
  auto f_mj = warp_tensor(m_j, theta_ji);
  const TensorT<T>& target_i = target == Cons2Target::pose_consistent ? m_j : m_i;
  const TensorT<T>& target_j = target == Cons2Target::pose_consistent ? m_i : m_j;
  return add(mse(f_mi, target_i), mse(f_mj, target_j));
}

// ---------------------------------------------------------------------------
// Checkpoints: one file per model, JSON manifest + NUL + raw LE f32 blobs.
// ---------------------------------------------------------------------------

template <class T>
void save_checkpoint(NamedParams<T> params, const std::string& arch,
                     int64_t channels, const std::string& path) {
  nlohmann::json manifest;
  manifest["format"] = "mvseg-checkpoint-v1";
  manifest["arch"] = arch;
  manifest["channels"] = channels;
  manifest["layers"] = nlohmann::json::array();
  for (auto& [name, t] : params)
    manifest["layers"].push_back({{"name", name}, {"shape", t.shape()}});
  std::ofstream out(path, std::ios::binary);
  check(out.good(), ErrorKind::data, "checkpoint: cannot open '" + path + "'");
  std::string h = manifest.dump();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.put('\0');
  for (auto& [name, t] : params) {
    std::vector<float> f(t.vec().begin(), t.vec().end());
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(f.size() * 4));
  }
  check(out.good(), ErrorKind::data, "checkpoint: short write to '" + path + "'");
}

template <class T>
void load_checkpoint(NamedParams<T> params, const std::string& arch,
                     const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorKind::data, "checkpoint: cannot open '" + path + "'");
  std::string header;
  std::getline(in, header, '\0');
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    fail_data("checkpoint: malformed manifest in '" + path + "': " + e.what());
  }
  check(manifest.value("format", "") == "mvseg-checkpoint-v1", ErrorKind::data,
        "checkpoint: unknown format in '" + path + "'");
  check(manifest.value("arch", "") == arch, ErrorKind::data,
        "checkpoint: arch mismatch, expected '" + arch + "', got '" +
            manifest.value("arch", "") + "'");
  const auto& layers = manifest.at("layers");
  check(layers.size() == params.size(), ErrorKind::data,
        "checkpoint: layer count mismatch in '" + path + "'");
  for (size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    check(layers[i].at("name") == name, ErrorKind::data,
          "checkpoint: layer order mismatch at '" + name + "'");
    Shape shape = layers[i].at("shape").get<Shape>();
    check(shape == t.shape(), ErrorKind::data,
          "checkpoint: shape mismatch for layer '" + name + "'");
    std::vector<float> f(static_cast<size_t>(t.numel()));
    in.read(reinterpret_cast<char*>(f.data()),
            static_cast<std::streamsize>(f.size() * 4));
    check(in.gcount() == static_cast<std::streamsize>(f.size() * 4),
          ErrorKind::data, "checkpoint: truncated payload in '" + path + "'");
    for (size_t j = 0; j < f.size(); ++j) t.data()[j] = static_cast<T>(f[j]);
  }
}

// Reads the channel count back so callers can rebuild the architecture before
// loading weights.
inline int64_t checkpoint_channels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorKind::data, "checkpoint: cannot open '" + path + "'");
  std::string header;
  std::getline(in, header, '\0');
  try {
    auto manifest = nlohmann::json::parse(header);
    return manifest.at("channels").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail_data("checkpoint: malformed manifest in '" + path + "': " + e.what());
  }
}

template <class T>
SegmentorT<T> load_segmentor(const std::string& path) {
  SegmentorT<T> s(checkpoint_channels(path), Rng(0));
  load_checkpoint<T>(s.named_params(), "segmentor", path);
  return s;
}

template <class T>
AlignNetT<T> load_alignnet(const std::string& path) {
  AlignNetT<T> g(checkpoint_channels(path), Rng(0));
  load_checkpoint<T>(g.named_params(), "alignnet", path);
  return g;
}

}  // namespace mvseg
