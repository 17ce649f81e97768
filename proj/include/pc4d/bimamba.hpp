#pragma once

// Bidirectional selective state-space block over the flattened token
// sequence. One block:
//
//   F_f = SSM_f(gelu(MLP_f(LN_f(F))))
//   F_b = flip(SSM_b(gelu(MLP_b(flip(LN_b(F))))))
//   F_g = MLP_1(LN_1(F))
//   out = F + MLP_2(F_f * F_g + F_b * F_g)
//
// K blocks are applied in sequence. Everything is templated on the scalar
// type so gradient checks can run in double.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "pc4d/autodiff.hpp"
#include "pc4d/rng.hpp"
#include "pc4d/tensor.hpp"
#include "pc4d/weights.hpp"

namespace pc4d {

template <class N>
struct SsmParamsT {
  N a_log;    // E x n_s, A = -exp(a_log)
  N w_b;      // E x n_s
  N w_c;      // E x n_s
  N w_delta;  // E x E
  N b_delta;  // 1 x E
  N d;        // 1 x E

  template <class F>
  void for_each(F&& f) {
    f("a_log", a_log);
    f("w_b", w_b);
    f("w_c", w_c);
    f("w_delta", w_delta);
    f("b_delta", b_delta);
    f("d", d);
  }
};

template <class N>
struct BlockParamsT {
  N ln_f_g, ln_f_b, ln_b_g, ln_b_b, ln_1_g, ln_1_b;  // 1 x c
  N mlp_f_w, mlp_f_b;                                // c -> E
  N mlp_b_w, mlp_b_b;                                // c -> E
  SsmParamsT<N> ssm_f, ssm_b;
  N mlp_1_w, mlp_1_b;  // c -> E
  N mlp_2_w, mlp_2_b;  // E -> c

  template <class F>
  void for_each(F&& f) {
    f("ln_f.g", ln_f_g);
    f("ln_f.b", ln_f_b);
    f("ln_b.g", ln_b_g);
    f("ln_b.b", ln_b_b);
    f("ln_1.g", ln_1_g);
    f("ln_1.b", ln_1_b);
    f("mlp_f.w", mlp_f_w);
    f("mlp_f.b", mlp_f_b);
    f("mlp_b.w", mlp_b_w);
    f("mlp_b.b", mlp_b_b);
    ssm_f.for_each([&](const std::string& n, N& m) { f("ssm_f." + n, m); });
    ssm_b.for_each([&](const std::string& n, N& m) { f("ssm_b." + n, m); });
    f("mlp_1.w", mlp_1_w);
    f("mlp_1.b", mlp_1_b);
    f("mlp_2.w", mlp_2_w);
    f("mlp_2.b", mlp_2_b);
  }
};

template <class N>
struct StackParamsT {
  std::vector<BlockParamsT<N>> blocks;

  template <class F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each([&](const std::string& n, N& m) { f("block" + std::to_string(i) + "." + n, m); });
  }
};

template <class A, class B>
void shape_like(StackParamsT<A>& dst, const StackParamsT<B>& src) {
  dst.blocks.resize(src.blocks.size());
}

template <class T>
using SsmParams = SsmParamsT<Mat<T>>;
template <class T>
using BlockParams = BlockParamsT<Mat<T>>;
template <class T>
using StackParams = StackParamsT<Mat<T>>;

struct BiMambaDims {
  std::size_t c = 64;   // token width
  std::size_t E = 128;  // expanded width
  std::size_t n_s = 16;
  std::size_t K = 2;
};

BlockParams<float> init_block(std::size_t c, std::size_t E, std::size_t n_s, Rng& rng);
StackParams<float> init_stack(const BiMambaDims& dims, std::uint64_t seed);
BiMambaDims stack_dims(const StackParams<float>& p);

// Block with the f and b branch parameter sets exchanged.
template <class T>
BlockParams<T> swap_branches(BlockParams<T> p) {
  std::swap(p.ln_f_g, p.ln_b_g);
  std::swap(p.ln_f_b, p.ln_b_b);
  std::swap(p.mlp_f_w, p.mlp_b_w);
  std::swap(p.mlp_f_b, p.mlp_b_b);
  std::swap(p.ssm_f, p.ssm_b);
  return p;
}

std::vector<NamedTensor> stack_tensors(const StackParams<float>& p);
StackParams<float> stack_from_tensors(std::span<const NamedTensor> tensors);
void save_stack(const StackParams<float>& p, const std::filesystem::path& path);
StackParams<float> load_stack(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Primitive recurrence with explicit discretized inputs.
//   a_bar, b_bar_x: L*E*n_s laid out [l][e][s];  c: L x n_s;  d: 1 x E;  x: L x E
template <class T>
Mat<T> scan(std::span<const T> a_bar, std::span<const T> b_bar_x, const Mat<T>& c, const Mat<T>& d, const Mat<T>& x);

namespace serial {
template <class T>
Mat<T> scan(std::span<const T> a_bar, std::span<const T> b_bar_x, const Mat<T>& c, const Mat<T>& d, const Mat<T>& x);
}

enum class Direction { kForward, kBackward };

// ---------------------------------------------------------------------------
// Tape-level building blocks

template <class T>
ad::Var ssm_apply(ad::Tape<T>& t, ad::Var x, const SsmParamsT<ad::Var>& p) {
  const ad::Var delta = ad::softplus(t, ad::linear(t, x, p.w_delta, p.b_delta));
  const ad::Var b = ad::matmul(t, x, p.w_b);
  const ad::Var c = ad::matmul(t, x, p.w_c);
  return ad::selective_scan(t, x, delta, b, c, p.a_log, p.d);
}

template <class T>
ad::Var block_apply(ad::Tape<T>& t, ad::Var f, const BlockParamsT<ad::Var>& p) {
  using namespace ad;
  const Var xf = gelu(t, linear(t, layernorm(t, f, p.ln_f_g, p.ln_f_b), p.mlp_f_w, p.mlp_f_b));
  const Var yf = ssm_apply(t, xf, p.ssm_f);
  const Var xb = gelu(t, linear(t, flip_rows(t, layernorm(t, f, p.ln_b_g, p.ln_b_b)), p.mlp_b_w, p.mlp_b_b));
  const Var yb = flip_rows(t, ssm_apply(t, xb, p.ssm_b));
  const Var g = linear(t, layernorm(t, f, p.ln_1_g, p.ln_1_b), p.mlp_1_w, p.mlp_1_b);
  const Var merged = add(t, mul(t, yf, g), mul(t, yb, g));
  return add(t, f, linear(t, merged, p.mlp_2_w, p.mlp_2_b));
}

template <class T>
ad::Var stack_apply(ad::Tape<T>& t, ad::Var f, const StackParamsT<ad::Var>& p) {
  for (const auto& b : p.blocks) f = block_apply(t, f, b);
  return f;
}

// ---------------------------------------------------------------------------
// Value-level API

template <class T>
void check_finite(const Mat<T>& m, const char* what) {
  for (T v : m.data)
    if (!std::isfinite(v)) fail(ErrorKind::kNonFinite, std::string(what) + " contains a non-finite value");
}

template <class T>
Mat<T> selective_ssm(const Mat<T>& x, const SsmParams<T>& params, Direction dir) {
  check_finite(x, "selective_ssm input");
  ad::Tape<T> t;
  const auto p = ad::bind(t, params, false);
  ad::Var in = t.constant(dir == Direction::kForward ? x : pc4d::flip_rows(x));
  const ad::Var y = ssm_apply(t, in, p);
  return dir == Direction::kForward ? t.value(y) : pc4d::flip_rows(t.value(y));
}

template <class T>
struct BlockCache {
  std::shared_ptr<ad::Tape<T>> tape;
  ad::Var input, output;
  BlockParamsT<ad::Var> vars;
  bool consumed = false;
};

template <class T>
struct BlockGrads {
  Mat<T> d_input;
  BlockParams<T> d_params;
};

template <class T>
std::pair<Mat<T>, BlockCache<T>> bimamba_block(const Mat<T>& f, const BlockParams<T>& params) {
  check_finite(f, "bimamba_block input");
  require_shape(params.ln_f_g, 1, f.cols, "bimamba_block token width");
  BlockCache<T> cache;
  cache.tape = std::make_shared<ad::Tape<T>>();
  auto& t = *cache.tape;
  cache.vars = ad::bind(t, params, true);
  cache.input = t.variable(f);
  cache.output = block_apply(t, cache.input, cache.vars);
  Mat<T> out = t.value(cache.output);
  check_finite(out, "bimamba_block output");
  return {std::move(out), std::move(cache)};
}

template <class T>
BlockGrads<T> block_backward(BlockCache<T>& cache, const Mat<T>& d_out) {
  if (!cache.tape || cache.consumed) fail(ErrorKind::kCacheMismatch, "block cache is empty or already used");
  const auto& out = cache.tape->value(cache.output);
  if (d_out.rows != out.rows || d_out.cols != out.cols)
    fail(ErrorKind::kCacheMismatch, "gradient shape does not match the cached forward pass");
  cache.tape->backward(cache.output, d_out);
  cache.consumed = true;
  BlockGrads<T> g;
  const auto& in = cache.tape->value(cache.input);
  g.d_input = cache.tape->has_grad(cache.input) ? cache.tape->grad(cache.input) : Mat<T>(in.rows, in.cols);
  g.d_params = ad::grads_of<BlockParamsT>(*cache.tape, cache.vars);
  return g;
}

template <class T>
Mat<T> stack_forward(const Mat<T>& f, const StackParams<T>& params) {
  if (params.blocks.empty()) fail(ErrorKind::kInvalidArgument, "stack needs K >= 1 blocks");
  check_finite(f, "stack input");
  ad::Tape<T> t;
  const auto p = ad::bind(t, params, false);
  return t.value(stack_apply(t, t.constant(f), p));
}

// ---------------------------------------------------------------------------
// Finite-difference check of the K-block stack in double precision.

struct GradcheckConfig {
  std::size_t L = 6, c = 8, E = 8, n_s = 4, K = 2;
  double eps = 1e-5;
  std::uint64_t seed = 0;
};

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0;
  double max_abs_grad = 0;
  std::size_t count = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;  // one per parameter tensor, plus "input"
  double max_rel_error = 0;
  std::size_t checked = 0;
};

// |a - b| / max(|a|, |b|, 1e-6)
double relative_error(double analytic, double numeric);

GradcheckReport gradcheck_stack(const GradcheckConfig& cfg);

// ---------------------------------------------------------------------------
// Ablation baseline: the temporal module replaced by a single full softmax
// self-attention residual block (quadratic in L).

struct AttentionBaselineParams {
  Mat<float> ln_g, ln_b, w_q, w_k, w_v, w_o;
};

AttentionBaselineParams init_attention_baseline(std::size_t c, std::uint64_t seed);
Mat<float> attention_baseline_forward(const Mat<float>& f, const AttentionBaselineParams& p);

}  // namespace pc4d
