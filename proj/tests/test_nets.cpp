#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "helpers.hpp"
#include "mvseg/nets.hpp"
#include "mvseg/synth.hpp"

using namespace mvseg;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

// Sliding-window squared-Pearson oracle with truncated windows, mirroring the
// documented loss definition (sum-form moments, eps = 1e-5).
template <class T>
double local_cc_oracle(const TensorT<T>& a, const TensorT<T>& b, int64_t w) {
  const auto& s = a.shape();
  int64_t D = s[2], H = s[3], W = s[4], r = w / 2;
  double total = 0;
  int64_t count = 0;
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        int64_t n = 0;
        for (int64_t dz = -r; dz <= r; ++dz)
          for (int64_t dy = -r; dy <= r; ++dy)
            for (int64_t dx = -r; dx <= r; ++dx) {
              int64_t zi = z + dz, yi = y + dy, xi = x + dx;
              if (zi < 0 || zi >= D || yi < 0 || yi >= H || xi < 0 || xi >= W)
                continue;
              double av = a.data()[(zi * H + yi) * W + xi];
              double bv = b.data()[(zi * H + yi) * W + xi];
              sa += av;
              sb += bv;
              saa += av * av;
              sbb += bv * bv;
              sab += av * bv;
              ++n;
            }
        double cov = sab - sa * sb / n;
        double va = std::max(0.0, saa - sa * sa / n);
        double vb = std::max(0.0, sbb - sb * sb / n);
        double r2 = cov * cov / (va * vb + 1e-5);
        total += std::min(1.0, r2);
        ++count;
      }
  return 1.0 - total / static_cast<double>(count);
}

Tensor textured_volume(int64_t n, uint64_t seed) {
  PhantomSpec ps;
  ps.size = n;
  ps.seed = seed;
  auto [img, msk] = generate_phantom(ps);
  return img.as_tensor<float>();
}

// Align-fn stub returning a fixed parameter tensor regardless of inputs.
struct FixedAlign {
  Tensor theta;
  Tensor operator()(const Tensor&, const Tensor&) const { return theta; }
};

}  // namespace

TEST_CASE("dice loss closed forms", "[nets]") {
  auto m = Tensor::from_data({1, 1, 2, 2, 2}, {1, 0, 1, 1, 0, 0, 1, 0});
  CHECK(dice_loss(m, m).item() <= 1e-4f);

  auto a = Tensor::from_data({4}, {1, 1, 0, 0});
  auto b = Tensor::from_data({4}, {0, 0, 1, 1});
  CHECK(dice_loss(a, b).item() == Catch::Approx(1.0).margin(1e-4));

  auto p = Tensor::from_data({2}, {1, 1});
  auto g = Tensor::from_data({2}, {1, 0});
  CHECK(dice_loss(p, g).item() == Catch::Approx(1.0 / 3.0).margin(1e-4));
}

TEST_CASE("local_cc basics and affine invariance", "[nets]") {
  Rng rng(3);
  auto a = random_tensor<float>({1, 1, 9, 9, 9}, rng, 0.0, 1.0);
  CHECK(local_cc(a, a).item() < 1e-3f);

  auto b = scalar_add(scalar_mul(a, 2.f), 3.f);
  CHECK(local_cc(a, b).item() < 1e-3f);
  CHECK(std::abs(local_cc(a, b).item() - local_cc(a, a).item()) < 1e-4f);
}

TEST_CASE("local_cc matches the sliding-window oracle", "[nets]") {
  Rng rng(5);
  auto a = random_tensor<float>({1, 1, 9, 9, 9}, rng, 0.0, 1.0);
  auto b = random_tensor<float>({1, 1, 9, 9, 9}, rng, 0.0, 1.0);
  double got = local_cc(a, b, 9).item();
  double want = local_cc_oracle(a, b, 9);
  CHECK(got == Catch::Approx(want).margin(1e-4));

  double got3 = local_cc(a, b, 3).item();
  double want3 = local_cc_oracle(a, b, 3);
  CHECK(got3 == Catch::Approx(want3).margin(1e-4));
}

TEST_CASE("alignnet zero-init predicts the identity transform", "[nets]") {
  AlignNet g(8, Rng(11));
  Rng rng(7);
  auto a = random_tensor<float>({1, 1, 32, 32, 32}, rng, 0.0, 1.0);
  auto b = random_tensor<float>({1, 1, 32, 32, 32}, rng, 0.0, 1.0);
  auto theta = g(a, b);
  REQUIRE(theta.shape() == Shape{6});
  for (int i = 0; i < 6; ++i) CHECK(theta.data()[i] == 0.f);
}

TEST_CASE("segmentor output stays in [0,1]", "[nets]") {
  Segmentor s(4, Rng(13));
  Rng rng(17);
  auto x = random_tensor<float>({1, 1, 16, 16, 16}, rng, 0.0, 1.0);
  auto m = s(x);
  REQUIRE(m.shape() == x.shape());
  for (int64_t i = 0; i < m.numel(); ++i) {
    CHECK(m.data()[i] >= 0.f);
    CHECK(m.data()[i] <= 1.f);
  }
}

TEST_CASE("identity loss", "[nets]") {
  auto a = textured_volume(32, 100);
  auto b = textured_volume(32, 101);

  // zero-init net: identity warp, loss ~ 0
  AlignNet g(4, Rng(3));
  auto l0 = identity_loss<float>(
      [&](const Tensor& m, const Tensor& f) { return g(m, f); }, a, b);
  CHECK(l0.item() < 1e-6f);

  // hand-forced 10 degree rotation on a textured volume: loss > 0
  FixedAlign forced{
      Tensor::from_data({6}, {0.f, 0.f, float(deg2rad(10)), 0.f, 0.f, 0.f})};
  auto l1 = identity_loss<float>(forced, a, b);
  CHECK(l1.item() > 1e-3f);

  // recomposition oracle
  {
    NoGrad ng;
    auto waa = warp_tensor(a, forced.theta);
    auto wbb = warp_tensor(b, forced.theta);
    float want = mse(a, waa).item() + mse(b, wbb).item();
    CHECK(l1.item() == Catch::Approx(want).margin(1e-6));
  }
}

TEST_CASE("align_loss_unsup reductions and recomposition", "[nets]") {
  auto v = textured_volume(32, 200);
  AlignNet g(4, Rng(5));
  auto gfn = [&](const Tensor& m, const Tensor& f) { return g(m, f); };

  // moving == fixed with identity-init G
  auto l = align_loss_unsup<float>(gfn, v, v, 0.1);
  CHECK(l.item() < 1e-4f);

  // lambda1 = 0 reduces to the pure similarity term
  auto b = textured_volume(32, 201);
  auto l_nosim = align_loss_unsup<float>(gfn, v, b, 0.0);
  {
    NoGrad ng;
    auto theta = g(v, b);
    auto moved = warp_tensor(v, theta);
    CHECK(l_nosim.item() ==
          Catch::Approx(local_cc(b, moved).item()).margin(1e-6));
  }

  // full loss equals the sum of its two components
  auto l_full = align_loss_unsup<float>(gfn, v, b, 0.37);
  {
    NoGrad ng;
    float lid = identity_loss<float>(gfn, v, b).item();
    CHECK(l_full.item() ==
          Catch::Approx(l_nosim.item() + 0.37f * lid).margin(1e-5));
  }
}

TEST_CASE("align_loss_sup", "[nets]") {
  auto v = textured_volume(32, 300);
  auto b = textured_volume(32, 301);
  PhantomSpec ps;
  ps.size = 32;
  ps.seed = 300;
  auto [img, msk] = generate_phantom(ps);
  auto mv = msk.as_tensor<float>();
  AlignNet g(4, Rng(5));
  auto gfn = [&](const Tensor& m, const Tensor& f) { return g(m, f); };

  // lambda2 = 0 equals the unsupervised loss exactly
  auto sup0 = align_loss_sup<float>(gfn, v, b, mv, mv, 0.1, 0.0);
  auto uns = align_loss_unsup<float>(gfn, v, b, 0.1);
  CHECK(sup0.item() == Catch::Approx(uns.item()).margin(1e-7));

  // perfectly pre-aligned pair with identity G: mask term ~ 0
  auto sup = align_loss_sup<float>(gfn, v, v, mv, mv, 0.0, 1.0);
  auto uns2 = align_loss_unsup<float>(gfn, v, v, 0.0);
  CHECK(std::abs(sup.item() - uns2.item()) < 1e-3f);
}

TEST_CASE("cons1 loss", "[nets]") {
  auto v = textured_volume(32, 400);
  Segmentor s(4, Rng(7));
  auto sfn = [&](const Tensor& x) { return s(x); };

  // identical views, identity alignment: only segmentor self-consistency
  Tensor m;
  {
    NoGrad ng;
    m = s(v);
  }
  auto l = cons1_loss<float>(sfn, v, v, m, m);
  CHECK(l.item() < 1e-8f);

  // constant-output segmentor is a degenerate fixed point with zero loss
  auto const_seg = [&](const Tensor& x) {
    return Tensor::filled(x.shape(), 0.5f);
  };
  auto lc = cons1_loss<float>(const_seg, v, v, Tensor::filled(v.shape(), 0.5f),
                              Tensor::filled(v.shape(), 0.5f));
  CHECK(lc.item() == 0.f);

  // recomposition
  auto b = textured_volume(32, 401);
  Tensor mb;
  {
    NoGrad ng;
    mb = s(b);
  }
  auto l2 = cons1_loss<float>(sfn, b, v, m, mb);
  {
    NoGrad ng;
    float want = mse(s(b), m).item() + mse(s(v), mb).item();
    CHECK(l2.item() == Catch::Approx(want).margin(1e-6));
  }
}

TEST_CASE("cons2 loss identity and recomposition", "[nets]") {
  auto v = textured_volume(32, 500);
  Segmentor s(4, Rng(9));
  auto sfn = [&](const Tensor& x) { return s(x); };
  AlignNet g(4, Rng(11));
  auto gfn = [&](const Tensor& m, const Tensor& f) { return g(m, f); };

  // identity G, i == j
  auto l = cons2_loss<float>(sfn, gfn, v, v);
  CHECK(l.item() == 0.f);

  // recomposition against independently computed terms (pose-consistent)
  auto b = textured_volume(32, 501);
  FixedAlign fixed{
      Tensor::from_data({6}, {0.02f, -0.03f, 0.05f, 0.01f, 0.f, -0.02f})};
  auto l2 = cons2_loss<float>(sfn, fixed, v, b, Cons2Target::pose_consistent);
  {
    NoGrad ng;
    auto mi = s(v);
    auto mj = s(b);
    auto fmi = warp_tensor(mi, fixed.theta);
    auto fmj = warp_tensor(mj, fixed.theta);
    float want = mse(fmi, mj).item() + mse(fmj, mi).item();
    CHECK(l2.item() == Catch::Approx(want).margin(1e-6));
  }
  // as-written variant compares against the unwarped self mask
  auto l3 = cons2_loss<float>(sfn, fixed, v, b, Cons2Target::as_written);
  {
    NoGrad ng;
    auto mi = s(v);
    auto mj = s(b);
    auto fmi = warp_tensor(mi, fixed.theta);
    auto fmj = warp_tensor(mj, fixed.theta);
    float want = mse(fmi, mi).item() + mse(fmj, mj).item();
    CHECK(l3.item() == Catch::Approx(want).margin(1e-6));
  }
}

TEST_CASE("cons2 is minimized near the true relative rotation", "[nets]") {
  // 1-DOF sweep oracle: I_j is I_i warped by a known z-rotation; a soft
  // intensity threshold stands in for the segmentor.
  PhantomSpec ps;
  ps.size = 32;
  ps.seed = 600;
  ps.noise_sigma = 0.0;
  auto [img, msk] = generate_phantom(ps);
  auto ii = img.as_tensor<float>();
  const double true_deg = 7.0;
  Tensor ij;
  {
    NoGrad ng;
    ij = warp_tensor(
        ii, Tensor::from_data({6}, {0.f, 0.f, float(deg2rad(true_deg)), 0.f,
                                    0.f, 0.f}));
  }
  auto soft_seg = [](const Tensor& x) {
    return sigmoid(scalar_mul(scalar_add(x, -0.55f), 14.f));
  };
  const void* ii_id = ii.impl().get();
  double best_deg = -100, best_loss = 1e9;
  for (double cand = true_deg - 6; cand <= true_deg + 6; cand += 0.5) {
    float rad = static_cast<float>(deg2rad(cand));
    auto gfn = [&](const Tensor& m, const Tensor&) {
      bool fwd = m.impl().get() == ii_id;
      return Tensor::from_data({6},
                               {0.f, 0.f, fwd ? rad : -rad, 0.f, 0.f, 0.f});
    };
    NoGrad ng;
    double loss = cons2_loss<float>(soft_seg, gfn, ii, ij).item();
    if (loss < best_loss) {
      best_loss = loss;
      best_deg = cand;
    }
  }
  CHECK(std::abs(best_deg - true_deg) <= 2.0);
}

TEST_CASE("loss gradients match finite differences on small volumes", "[nets]") {
  Rng rng(77);
  // dice
  {
    auto p = random_tensor<float>({1, 1, 8, 8, 8}, rng, 0.05, 0.95);
    auto g = random_tensor<float>({1, 1, 8, 8, 8}, rng, 0.0, 1.0);
    for (int64_t i = 0; i < g.numel(); ++i)
      g.data()[i] = g.data()[i] > 0.5f ? 1.f : 0.f;
    double err = grad_check<float>(
        {p}, [&] { return dice_loss(p, g); }, 1e-2f, 40, &rng);
    CHECK(err < 1e-2);
  }
  // local_cc
  {
    auto a = random_tensor<float>({1, 1, 8, 8, 8}, rng, 0.0, 1.0);
    auto b = random_tensor<float>({1, 1, 8, 8, 8}, rng, 0.0, 1.0);
    double err = grad_check<float>(
        {a, b}, [&] { return local_cc(a, b, 5); }, 1e-2f, 30, &rng);
    CHECK(err < 1e-2);
  }
}

TEST_CASE("all losses are non-negative and finite", "[nets]") {
  Rng rng(88);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_tensor<float>({1, 1, 8, 8, 8}, rng, 0.0, 1.0);
    auto b = random_tensor<float>({1, 1, 8, 8, 8}, rng, 0.0, 1.0);
    CHECK(local_cc(a, b).item() >= 0.f);
    CHECK(std::isfinite(local_cc(a, b).item()));
    CHECK(dice_loss(a, b).item() >= 0.f);
    CHECK(mse(a, b).item() >= 0.f);
  }
}

TEST_CASE("checkpoint round trip", "[nets]") {
  namespace fs = std::filesystem;
  auto path = fs::temp_directory_path() / "mvseg_ckpt_test.ckpt";
  Segmentor s(4, Rng(21));
  save_checkpoint<float>(s.named_params(), "segmentor", s.channels(),
                         path.string());
  auto s2 = load_segmentor<float>(path.string());
  auto p1 = s.named_params();
  auto p2 = s2.named_params();
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i)
    CHECK(p1[i].second.vec() == p2[i].second.vec());

  // arch mismatch rejected
  AlignNet g(4, Rng(22));
  CHECK_THROWS_AS(
      load_checkpoint<float>(g.named_params(), "alignnet", path.string()),
      Error);
  fs::remove(path);
}
