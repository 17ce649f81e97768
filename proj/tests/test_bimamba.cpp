#include <doctest.h>

#include "pc4d/bimamba.hpp"
#include "test_util.hpp"

using namespace pc4d;
using pc4d::testing::kind_of;
using pc4d::testing::TempDir;

namespace {

template <class T>
Mat<T> random_mat(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Mat<T> m(r, c);
  for (auto& v : m.data) v = static_cast<T>(rng.uniform(-scale, scale));
  return m;
}

// Non-trivial output map so the residual branch is exercised.
template <class T>
StackParams<T> live_stack(const BiMambaDims& dims, std::uint64_t seed) {
  auto p = ad::cast_params<T>(init_stack(dims, seed));
  Rng rng(seed + 100);
  for (auto& b : p.blocks) {
    b.mlp_2_w = random_mat<T>(dims.E, dims.c, rng, 0.5);
    b.mlp_2_b = random_mat<T>(1, dims.c, rng, 0.1);
  }
  return p;
}

}  // namespace

TEST_CASE("scan examples") {
  Mat<double> c(2, 1, 1.0), d(1, 1, 0.0), x(2, 1, 1.0);
  const std::vector<double> a{0.5, 0.5}, b{1, 1};
  const auto y = scan<double>(a, b, c, d, x);
  CHECK(y(0, 0) == 1.0);
  CHECK(y(1, 0) == 1.5);

  Rng rng(1);
  const std::size_t L = 20, E = 3, n = 2;
  std::vector<double> ones(L * E * n, 1.0), bx(L * E * n);
  for (auto& v : bx) v = rng.uniform(-1, 1);
  const auto prefix = scan<double>(ones, bx, Mat<double>(L, n, 1.0), Mat<double>(1, E), Mat<double>(L, E));
  for (std::size_t e = 0; e < E; ++e) {
    double running[2] = {0, 0};
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t s = 0; s < n; ++s) running[s] += bx[(l * E + e) * n + s];
      CHECK(prefix(l, e) == doctest::Approx(running[0] + running[1]).epsilon(1e-12));
    }
  }

  const std::vector<double> zeros(L * E * n, 0.0);
  const auto z = scan<double>(ones, zeros, Mat<double>(L, n, 1.0), Mat<double>(1, E, 1.0), Mat<double>(L, E));
  for (double v : z.data) CHECK(v == 0.0);

  std::vector<double> bad = bx;
  bad[3] = std::nan("");
  CHECK(kind_of([&] { scan<double>(ones, bad, Mat<double>(L, n), Mat<double>(1, E), Mat<double>(L, E)); }) ==
        ErrorKind::kNonFinite);
  CHECK(kind_of([&] { scan<double>(ones, bx, Mat<double>(L, n), Mat<double>(1, E + 1), Mat<double>(L, E)); }) ==
        ErrorKind::kShapeMismatch);
}

TEST_CASE("parallel scan is bitwise equal to the serial reference") {
  Rng rng(4);
  const std::size_t L = 512, E = 64, n = 16;
  std::vector<float> a(L * E * n), b(L * E * n);
  for (auto& v : a) v = float(rng.uniform(0.5, 1.0));
  for (auto& v : b) v = float(rng.uniform(-1, 1));
  const auto c = random_mat<float>(L, n, rng), d = random_mat<float>(1, E, rng), x = random_mat<float>(L, E, rng);
  CHECK(scan<float>(a, b, c, d, x) == serial::scan<float>(a, b, c, d, x));
}

TEST_CASE("selective ssm: zero input, causality and direction identity") {
  Rng rng(5);
  auto params = init_stack({8, 16, 4, 1}, 3).blocks[0].ssm_f;
  for (auto& v : params.b_delta.data) v = 0.0f;
  const Mat<float> zero(10, 16);
  for (float v : selective_ssm(zero, params, Direction::kForward).data) CHECK(v == 0.0f);

  params = init_stack({8, 16, 4, 1}, 3).blocks[0].ssm_f;
  const auto x = random_mat<float>(24, 16, rng);
  const auto fwd = selective_ssm(x, params, Direction::kForward);
  const auto bwd = selective_ssm(x, params, Direction::kBackward);
  CHECK(bwd == flip_rows(selective_ssm(flip_rows(x), params, Direction::kForward)));

  for (std::size_t j : {0u, 7u, 23u}) {
    auto px = x;
    for (std::size_t e = 0; e < 16; ++e) px(j, e) += 0.25f;
    const auto pf = selective_ssm(px, params, Direction::kForward);
    const auto pb = selective_ssm(px, params, Direction::kBackward);
    bool prefix_same = true, suffix_same = true, changed = false;
    for (std::size_t l = 0; l < 24; ++l)
      for (std::size_t e = 0; e < 16; ++e) {
        if (l < j) prefix_same &= pf(l, e) == fwd(l, e);
        if (l > j) suffix_same &= pb(l, e) == bwd(l, e);
        if (l == j) changed |= pf(l, e) != fwd(l, e);
      }
    CHECK(prefix_same);
    CHECK(suffix_same);
    CHECK(changed);
  }
}

TEST_CASE("selective ssm stays finite over long sequences") {
  Rng rng(6);
  const auto params = init_stack({4, 8, 4, 1}, 1).blocks[0].ssm_f;
  const auto x = random_mat<float>(100000, 8, rng, 3.0);
  const auto y = selective_ssm(x, params, Direction::kForward);
  for (float v : y.data) REQUIRE(std::isfinite(v));
  // |A_bar| < 1 for any positive delta
  for (float a : params.a_log.data)
    for (double dt : {1e-4, 0.1, 10.0}) CHECK(std::abs(std::exp(dt * -std::exp(double(a)))) < 1.0);
}

TEST_CASE("block residual identity at initialisation") {
  Rng rng(7);
  const auto stack = init_stack({8, 16, 4, 2}, 9);
  const auto f = random_mat<float>(12, 8, rng);
  CHECK(bimamba_block(f, stack.blocks[0]).first == f);
  CHECK(stack_forward(f, stack) == f);
}

TEST_CASE("time-reversal equivariance under branch swap") {
  Rng rng(8);
  const BiMambaDims dims{8, 16, 4, 1};
  {
    const auto p = live_stack<float>(dims, 2).blocks[0];
    const auto f = random_mat<float>(30, 8, rng);
    const auto a = bimamba_block(flip_rows(f), swap_branches(p)).first;
    const auto b = flip_rows(bimamba_block(f, p).first);
    CHECK(max_abs_diff(a, b) <= 1e-5f);
  }
  {
    const auto p = live_stack<double>(dims, 2).blocks[0];
    const auto f = random_mat<double>(30, 8, rng);
    const auto a = bimamba_block(flip_rows(f), swap_branches(p)).first;
    const auto b = flip_rows(bimamba_block(f, p).first);
    CHECK(max_abs_diff(a, b) <= 1e-10);
  }
}

TEST_CASE("single token: both branches agree given the same parameters") {
  Rng rng(9);
  auto p = live_stack<double>({8, 16, 4, 1}, 4).blocks[0];
  p.ln_b_g = p.ln_f_g;
  p.ln_b_b = p.ln_f_b;
  p.mlp_b_w = p.mlp_f_w;
  p.mlp_b_b = p.mlp_f_b;
  p.ssm_b = p.ssm_f;
  const auto f = random_mat<double>(1, 8, rng);
  ad::Tape<double> t;
  const auto v = ad::bind(t, p, false);
  const auto in = t.constant(f);
  const auto xf = ad::gelu(t, ad::linear(t, ad::layernorm(t, in, v.ln_f_g, v.ln_f_b), v.mlp_f_w, v.mlp_f_b));
  const auto yf = ssm_apply(t, xf, v.ssm_f);
  const auto xb = ad::gelu(t, ad::linear(t, ad::flip_rows(t, ad::layernorm(t, in, v.ln_b_g, v.ln_b_b)), v.mlp_b_w,
                                         v.mlp_b_b));
  const auto yb = ad::flip_rows(t, ssm_apply(t, xb, v.ssm_b));
  CHECK(t.value(yf) == t.value(yb));
}

TEST_CASE("stack composition") {
  Rng rng(10);
  const auto p = live_stack<float>({8, 16, 4, 2}, 5);
  const auto f = random_mat<float>(10, 8, rng);
  const auto one = bimamba_block(f, p.blocks[0]).first;
  const auto two = bimamba_block(one, p.blocks[1]).first;
  CHECK(stack_forward(f, p) == two);
  StackParams<float> single;
  single.blocks = {p.blocks[0]};
  CHECK(stack_forward(f, single) == one);
  CHECK(kind_of([&] { stack_forward(f, StackParams<float>{}); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("block backward: zero seed, cache misuse, residual path") {
  Rng rng(11);
  const auto p = live_stack<double>({4, 8, 2, 1}, 6).blocks[0];
  const auto f = random_mat<double>(5, 4, rng);
  auto [out, cache] = bimamba_block(f, p);
  const auto g = block_backward(cache, Mat<double>(5, 4));
  for (double v : g.d_input.data) CHECK(v == 0.0);
  auto gp = g.d_params;
  gp.for_each([](const std::string&, Mat<double>& m) {
    for (double v : m.data) CHECK(v == 0.0);
  });
  CHECK(kind_of([&] { block_backward(cache, Mat<double>(5, 4)); }) == ErrorKind::kCacheMismatch);
  auto [out2, cache2] = bimamba_block(f, p);
  CHECK(kind_of([&] { block_backward(cache2, Mat<double>(4, 4)); }) == ErrorKind::kCacheMismatch);

  // With zero output maps the block is the identity, so dF = dF_tilde exactly.
  auto ident = p;
  ident.mlp_2_w.fill(0);
  ident.mlp_2_b.fill(0);
  auto [o3, c3] = bimamba_block(f, ident);
  const auto seed = random_mat<double>(5, 4, rng);
  CHECK(block_backward(c3, seed).d_input == seed);

  // Input gradient of the live block against central differences.
  auto [o4, c4] = bimamba_block(f, p);
  const auto gi = block_backward(c4, seed).d_input;
  for (std::size_t i = 0; i < f.size(); ++i) {
    auto up = f, down = f;
    up.data[i] += 1e-6;
    down.data[i] -= 1e-6;
    const auto yu = bimamba_block(up, p).first, yd = bimamba_block(down, p).first;
    double num = 0;
    for (std::size_t k = 0; k < yu.size(); ++k) num += (yu.data[k] - yd.data[k]) / 2e-6 * seed.data[k];
    CHECK(relative_error(gi.data[i], num) < 1e-6);
  }
}

TEST_CASE("finite-difference gradient check of the two-block stack") {
  const auto report = gradcheck_stack({6, 8, 8, 4, 2, 1e-5, 0});
  CHECK(report.max_rel_error < 1e-4);
  std::size_t expected = 6 * 8;
  init_stack({8, 8, 4, 2}, 0).for_each([&](const std::string&, Mat<float>& m) { expected += m.size(); });
  CHECK(report.checked == expected);
  for (const auto& e : report.entries) {
    INFO(e.name);
    CHECK(e.max_rel_error < 1e-4);
    CHECK(e.max_abs_grad > 0.0);
  }
}

TEST_CASE("stack weights round trip") {
  TempDir dir("stack");
  const auto p = init_stack({8, 16, 4, 2}, 12);
  save_stack(p, dir / "s.pcw");
  auto q = load_stack(dir / "s.pcw");
  ad::zip_params<Mat<float>>(q, const_cast<StackParams<float>&>(p),
                             [](const std::string&, Mat<float>& a, Mat<float>& b) { CHECK(a == b); });
  const auto d = stack_dims(q);
  CHECK(d.K == 2);
  CHECK(d.E == 16);
}

TEST_CASE("attention baseline keeps shape and depends on every token") {
  Rng rng(13);
  const auto p = init_attention_baseline(8, 1);
  const auto f = random_mat<float>(16, 8, rng);
  const auto y = attention_baseline_forward(f, p);
  CHECK(y.rows == 16);
  auto g = f;
  g(15, 0) += 1.0f;
  const auto y2 = attention_baseline_forward(g, p);
  bool first_changed = false;
  for (std::size_t j = 0; j < 8; ++j) first_changed |= y(0, j) != y2(0, j);
  CHECK(first_changed);
}
