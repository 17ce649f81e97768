// Serial vs OpenMP kernel timings, the linear-time scan check and the
// attention baseline comparison.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include <omp.h>

#include "pc4d/bimamba.hpp"
#include "pc4d/encoder.hpp"
#include "pc4d/kernels.hpp"
#include "pc4d/rng.hpp"

using namespace pc4d;

namespace {

double median_ms(const std::function<void()>& f, int reps) {
  std::vector<double> t;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

Mat<float> random_mat(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Mat<float> m(r, c);
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(-scale, scale));
  return m;
}

void row(const char* name, double serial, double parallel, bool equal) {
  std::printf("%-28s %10.3f %10.3f %8.2fx  %s\n", name, serial, parallel, serial / parallel,
              equal ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::max(1, std::atoi(argv[1])) : 5;
  Rng rng(1);
  std::printf("threads: %d, median of %d runs\n\n", omp_get_max_threads(), reps);
  std::printf("%-28s %10s %10s %9s\n", "kernel", "serial ms", "omp ms", "speedup");

  {
    const auto a = random_mat(512, 256, rng), b = random_mat(256, 512, rng), bt = random_mat(512, 256, rng);
    Mat<float> cs, cp;
    row("gemm_nn 512x256x512", median_ms([&] { kernels::serial::gemm_nn(a, b, cs); }, reps),
        median_ms([&] { kernels::parallel::gemm_nn(a, b, cp); }, reps), cs == cp);
    row("gemm_nt 512x256x512", median_ms([&] { kernels::serial::gemm_nt(a, bt, cs); }, reps),
        median_ms([&] { kernels::parallel::gemm_nt(a, bt, cp); }, reps), cs == cp);
    row("gemm_tn 256x512x512", median_ms([&] { kernels::serial::gemm_tn(a, bt, cs); }, reps),
        median_ms([&] { kernels::parallel::gemm_tn(a, bt, cp); }, reps), cs == cp);
  }
  {
    const std::size_t n = 1 << 16;
    std::vector<float> xyz(n * 6);
    for (auto& v : xyz) v = static_cast<float>(rng.uniform(-1, 1));
    std::vector<float> ds(n, 1e30f), dp(n, 1e30f);
    std::size_t is = 0, ip = 0;
    const double s = median_ms([&] { for (int k = 0; k < 64; ++k) is = kernels::serial::fps_update(xyz, 6, xyz.data() + is * 6, ds); }, reps);
    const double p = median_ms([&] { for (int k = 0; k < 64; ++k) ip = kernels::parallel::fps_update(xyz, 6, xyz.data() + ip * 6, dp); }, reps);
    row("fps_update 64k pts x64", s, p, ds == dp && is == ip);

    std::vector<Vec3> centers;
    for (std::size_t g = 0; g < 32; ++g) centers.push_back({xyz[g * 600], xyz[g * 600 + 1], xyz[g * 600 + 2]});
    std::vector<std::vector<std::size_t>> gs, gp;
    row("knn_group 64k pts, 32x32", median_ms([&] { gs = serial::knn_group(xyz, 6, centers, 32); }, reps),
        median_ms([&] { gp = knn_group(xyz, 6, centers, 32); }, reps), gs == gp);
  }
  {
    const std::size_t L = 4096, E = 64, n = 16;
    std::vector<float> a_bar(L * E * n), bx(L * E * n);
    for (auto& v : a_bar) v = static_cast<float>(rng.uniform(0.5, 0.99));
    for (auto& v : bx) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    const auto c = random_mat(L, n, rng), d = random_mat(1, E, rng), x = random_mat(L, E, rng);
    Mat<float> ys, yp;
    row("scan L=4096 E=64 n=16", median_ms([&] { ys = serial::scan<float>(a_bar, bx, c, d, x); }, reps),
        median_ms([&] { yp = scan<float>(a_bar, bx, c, d, x); }, reps), ys == yp);
  }

  std::printf("\nselective_ssm (E=64, n_s=16) wall time vs L\n");
  Rng prng(3);
  const auto block = init_block(64, 64, 16, prng);
  double prev = 0;
  for (std::size_t L = 1 << 12; L <= (1u << 15); L <<= 1) {
    const auto x = random_mat(L, 64, rng, 0.5);
    const double ms = median_ms([&] { (void)selective_ssm(x, block.ssm_f, Direction::kForward); }, reps);
    if (prev > 0)
      std::printf("  L=%6zu %10.2f ms   ratio to L/2: %.2f\n", L, ms, ms / prev);
    else
      std::printf("  L=%6zu %10.2f ms\n", L, ms);
    prev = ms;
  }

  std::printf("\ntemporal module: bidirectional block vs attention baseline (c=64)\n");
  const auto stack = init_stack({64, 128, 16, 1}, 5);
  const auto att = init_attention_baseline(64, 5);
  for (std::size_t L : {256u, 512u, 1024u, 2048u}) {
    const auto f = random_mat(L, 64, rng, 0.5);
    const double m = median_ms([&] { (void)stack_forward(f, stack); }, reps);
    const double a = median_ms([&] { (void)attention_baseline_forward(f, att); }, reps);
    std::printf("  L=%5zu  bi-mamba %9.2f ms   attention %9.2f ms\n", L, m, a);
  }
  return 0;
}
