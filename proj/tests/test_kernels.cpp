#include <doctest.h>
#include <omp.h>

#include "pc4d/kernels.hpp"
#include "pc4d/rng.hpp"

using namespace pc4d;

namespace {

Mat<float> random_mat(std::size_t r, std::size_t c, Rng& rng) {
  Mat<float> m(r, c);
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(-1, 1));
  return m;
}

struct ThreadCount {
  explicit ThreadCount(int n) : saved(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~ThreadCount() { omp_set_num_threads(saved); }
  int saved;
};

}  // namespace

TEST_CASE("parallel gemm variants are bitwise equal to the serial reference") {
  ThreadCount threads(4);
  Rng rng(7);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {5, 3, 7}, {64, 96, 80}, {300, 64, 128}}) {
    const auto a = random_mat(m, k, rng), b = random_mat(k, n, rng), bt = random_mat(n, k, rng);
    const auto at = random_mat(k, m, rng);
    Mat<float> s, p;
    kernels::serial::gemm_nn(a, b, s);
    kernels::parallel::gemm_nn(a, b, p);
    CHECK(s == p);
    kernels::serial::gemm_nt(a, bt, s);
    kernels::parallel::gemm_nt(a, bt, p);
    CHECK(s == p);
    kernels::serial::gemm_tn(at, b, s);
    kernels::parallel::gemm_tn(at, b, p);
    CHECK(s == p);
    // accumulate mode adds onto the existing contents
    Mat<float> acc_s = s, acc_p = s;
    kernels::serial::gemm_tn(at, b, acc_s, true);
    kernels::parallel::gemm_tn(at, b, acc_p, true);
    CHECK(acc_s == acc_p);
    for (std::size_t i = 0; i < acc_p.size(); ++i)
      CHECK(acc_p.data[i] == doctest::Approx(2.0 * s.data[i]).epsilon(1e-5));
  }
}

TEST_CASE("gemm matches a naive triple loop") {
  Rng rng(3);
  const auto a = random_mat(4, 6, rng), b = random_mat(6, 5, rng);
  Mat<double> ref(4, 5);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t p = 0; p < 6; ++p) ref(i, j) += double(a(i, p)) * b(p, j);
  Mat<float> c;
  kernels::gemm_nn(a, b, c);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-5));
}

TEST_CASE("gemm rejects mismatched inner dimensions") {
  Mat<float> a(2, 3), b(4, 2), c;
  CHECK_THROWS_AS(kernels::gemm_nn(a, b, c), Error);
}

TEST_CASE("fps_update and reconstruct agree across serial and parallel") {
  ThreadCount threads(3);
  Rng rng(11);
  const std::size_t n = 20000;
  std::vector<float> xyz(n * 3);
  for (auto& v : xyz) v = static_cast<float>(rng.uniform(-1, 1));
  std::vector<float> d_s(n, 1e30f), d_p(n, 1e30f);
  for (int step = 0; step < 5; ++step) {
    const float from[3] = {float(step) * 0.1f, 0.2f, -0.3f};
    CHECK(kernels::serial::fps_update(xyz, 3, from, d_s) == kernels::parallel::fps_update(xyz, 3, from, d_p));
  }
  CHECK(d_s == d_p);

  std::vector<Vec3> verts(100);
  for (auto& v : verts)
    v = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
  std::vector<Face> faces(50);
  for (auto& f : faces)
    f = {static_cast<std::uint32_t>(rng.below(100)), static_cast<std::uint32_t>(rng.below(100)),
         static_cast<std::uint32_t>(rng.below(100))};
  std::vector<std::uint32_t> tri(n);
  std::vector<std::array<float, 3>> bary(n);
  for (std::size_t i = 0; i < n; ++i) {
    tri[i] = static_cast<std::uint32_t>(rng.below(50));
    const float u = static_cast<float>(rng.uniform()), v = static_cast<float>(rng.uniform()) * (1 - u);
    bary[i] = {u, v, 1 - u - v};
  }
  std::vector<Vec3> out_s(n), out_p(n);
  kernels::serial::reconstruct(tri, bary, faces, verts, out_s);
  kernels::parallel::reconstruct(tri, bary, faces, verts, out_p);
  CHECK(out_s == out_p);
}
