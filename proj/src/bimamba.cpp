#include "pc4d/bimamba.hpp"

#include <algorithm>
#include <cmath>

#include "pc4d/weights.hpp"

namespace pc4d {

namespace {

Mat<float> uniform_init(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat<float> m(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(-bound, bound));
  return m;
}

SsmParams<float> init_ssm(std::size_t E, std::size_t n_s, Rng& rng) {
  SsmParams<float> p;
  p.a_log = Mat<float>(E, n_s);
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t s = 0; s < n_s; ++s) p.a_log(e, s) = static_cast<float>(std::log(1.0 + double(s)));
  p.w_b = uniform_init(E, n_s, rng);
  p.w_c = uniform_init(E, n_s, rng);
  p.w_delta = uniform_init(E, E, rng);
  // softplus(b_delta) log-uniform in [1e-3, 1e-1]
  p.b_delta = Mat<float>(1, E);
  for (auto& v : p.b_delta.data) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<float>(std::log(std::expm1(dt)));
  }
  p.d = Mat<float>(1, E, 1.0f);
  return p;
}

template <class T>
void scan_channel(std::span<const T> a_bar, std::span<const T> b_bar_x, const Mat<T>& c, const Mat<T>& d,
                  const Mat<T>& x, Mat<T>& y, std::size_t e) {
  const std::size_t L = x.rows, E = x.cols, n = c.cols;
  std::vector<T> h(n, T(0));
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t base = (l * E + e) * n;
    T acc = 0;
    for (std::size_t s = 0; s < n; ++s) {
      h[s] = a_bar[base + s] * h[s] + b_bar_x[base + s];
      acc += c(l, s) * h[s];
    }
    y(l, e) = acc + d.data[e] * x(l, e);
  }
}

template <class T>
void check_scan_args(std::span<const T> a_bar, std::span<const T> b_bar_x, const Mat<T>& c, const Mat<T>& d,
                     const Mat<T>& x) {
  const std::size_t L = x.rows, E = x.cols, n = c.cols;
  if (c.rows != L || a_bar.size() != L * E * n || b_bar_x.size() != L * E * n)
    fail(ErrorKind::kShapeMismatch, "scan: inconsistent L/E/n_s");
  require_shape(d, 1, E, "scan D");
  for (auto span : {a_bar, b_bar_x})
    for (T v : span)
      if (!std::isfinite(v)) fail(ErrorKind::kNonFinite, "scan input contains a non-finite value");
  check_finite(c, "scan C");
  check_finite(x, "scan x");
}

}  // namespace

BlockParams<float> init_block(std::size_t c, std::size_t E, std::size_t n_s, Rng& rng) {
  BlockParams<float> p;
  for (auto* g : {&p.ln_f_g, &p.ln_b_g, &p.ln_1_g}) *g = Mat<float>(1, c, 1.0f);
  for (auto* b : {&p.ln_f_b, &p.ln_b_b, &p.ln_1_b}) *b = Mat<float>(1, c);
  p.mlp_f_w = uniform_init(c, E, rng);
  p.mlp_f_b = Mat<float>(1, E);
  p.mlp_b_w = uniform_init(c, E, rng);
  p.mlp_b_b = Mat<float>(1, E);
  p.ssm_f = init_ssm(E, n_s, rng);
  p.ssm_b = init_ssm(E, n_s, rng);
  p.mlp_1_w = uniform_init(c, E, rng);
  p.mlp_1_b = Mat<float>(1, E);
  p.mlp_2_w = Mat<float>(E, c);
  p.mlp_2_b = Mat<float>(1, c);
  return p;
}

StackParams<float> init_stack(const BiMambaDims& dims, std::uint64_t seed) {
  if (dims.K == 0 || dims.c == 0 || dims.E == 0 || dims.n_s == 0)
    fail(ErrorKind::kInvalidArgument, "bimamba dimensions must be positive");
  Rng rng(derive_seed(seed, "bimamba"));
  StackParams<float> p;
  for (std::size_t k = 0; k < dims.K; ++k) p.blocks.push_back(init_block(dims.c, dims.E, dims.n_s, rng));
  return p;
}

BiMambaDims stack_dims(const StackParams<float>& p) {
  if (p.blocks.empty()) fail(ErrorKind::kInvalidArgument, "empty stack");
  const auto& b = p.blocks[0];
  return {b.mlp_f_w.rows, b.mlp_f_w.cols, b.ssm_f.a_log.cols, p.blocks.size()};
}

std::vector<NamedTensor> stack_tensors(const StackParams<float>& p) {
  const auto dims = stack_dims(p);
  Mat<float> meta(1, 4);
  meta.data = {float(dims.K), float(dims.c), float(dims.E), float(dims.n_s)};
  auto tensors = to_named(p);
  tensors.insert(tensors.begin(), {"meta", meta});
  return tensors;
}

StackParams<float> stack_from_tensors(std::span<const NamedTensor> tensors) {
  if (tensors.empty() || tensors[0].name != "meta" || tensors[0].value.size() != 4)
    fail(ErrorKind::kSchema, "stack weights need a leading 'meta' tensor [K, c, E, n_s]");
  const auto& m = tensors[0].value.data;
  BiMambaDims dims{std::size_t(m[1]), std::size_t(m[2]), std::size_t(m[3]), std::size_t(m[0])};
  auto p = init_stack(dims, 0);
  from_named(p, tensors.subspan(1));
  return p;
}

void save_stack(const StackParams<float>& p, const std::filesystem::path& path) {
  save_weights(stack_tensors(p), path);
}

StackParams<float> load_stack(const std::filesystem::path& path) { return stack_from_tensors(load_weights(path)); }

namespace serial {

template <class T>
Mat<T> scan(std::span<const T> a_bar, std::span<const T> b_bar_x, const Mat<T>& c, const Mat<T>& d, const Mat<T>& x) {
  check_scan_args(a_bar, b_bar_x, c, d, x);
  Mat<T> y(x.rows, x.cols);
  for (std::size_t e = 0; e < x.cols; ++e) scan_channel(a_bar, b_bar_x, c, d, x, y, e);
  return y;
}

template Mat<float> scan(std::span<const float>, std::span<const float>, const Mat<float>&, const Mat<float>&,
                         const Mat<float>&);
template Mat<double> scan(std::span<const double>, std::span<const double>, const Mat<double>&, const Mat<double>&,
                          const Mat<double>&);

}  // namespace serial

template <class T>
Mat<T> scan(std::span<const T> a_bar, std::span<const T> b_bar_x, const Mat<T>& c, const Mat<T>& d, const Mat<T>& x) {
  check_scan_args(a_bar, b_bar_x, c, d, x);
  Mat<T> y(x.rows, x.cols);
  const auto E = static_cast<std::int64_t>(x.cols);
#pragma omp parallel for schedule(static) if (x.rows * x.cols * c.cols > 65536)
  for (std::int64_t e = 0; e < E; ++e) scan_channel(a_bar, b_bar_x, c, d, x, y, static_cast<std::size_t>(e));
  return y;
}

template Mat<float> scan(std::span<const float>, std::span<const float>, const Mat<float>&, const Mat<float>&,
                         const Mat<float>&);
template Mat<double> scan(std::span<const double>, std::span<const double>, const Mat<double>&, const Mat<double>&,
                          const Mat<double>&);

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradcheckReport gradcheck_stack(const GradcheckConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "gradcheck"));
  auto params32 = init_stack({cfg.c, cfg.E, cfg.n_s, cfg.K}, cfg.seed);
  auto params = ad::cast_params<double>(params32);
  // Zero-initialised output maps would hide every gradient upstream of them.
  for (auto& b : params.blocks) {
    for (auto& v : b.mlp_2_w.data) v = rng.uniform(-0.5, 0.5);
    for (auto& v : b.mlp_2_b.data) v = rng.uniform(-0.1, 0.1);
    for (auto* m : {&b.ln_f_b, &b.ln_b_b, &b.ln_1_b, &b.mlp_f_b, &b.mlp_b_b, &b.mlp_1_b})
      for (auto& v : m->data) v = rng.uniform(-0.2, 0.2);
    for (auto* m : {&b.ln_f_g, &b.ln_b_g, &b.ln_1_g})
      for (auto& v : m->data) v = 1.0 + rng.uniform(-0.2, 0.2);
    for (auto* ssm : {&b.ssm_f, &b.ssm_b})
      for (auto& v : ssm->b_delta.data) v = rng.uniform(-1.0, 1.0);
  }
  Mat<double> input(cfg.L, cfg.c), proj(cfg.L, cfg.c);
  for (auto& v : input.data) v = rng.uniform(-1, 1);
  for (auto& v : proj.data) v = rng.uniform(-1, 1);

  auto loss = [&](const StackParams<double>& p, const Mat<double>& x) {
    const auto y = stack_forward(x, p);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * proj.data[i];
    return s;
  };

  ad::Tape<double> t;
  auto vars = ad::bind(t, params, true);
  const ad::Var in = t.variable(input);
  const ad::Var out = stack_apply(t, in, vars);
  t.backward(out, proj);
  const auto grads = ad::grads_of<StackParamsT>(t, vars);
  const Mat<double> d_input = t.grad(in);

  GradcheckReport report;
  auto check_tensor = [&](const std::string& name, Mat<double>& value, const Mat<double>& analytic,
                          const std::function<double()>& eval) {
    GradcheckEntry entry{name, 0, 0, value.size()};
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value.data[i];
      value.data[i] = saved + cfg.eps;
      const double up = eval();
      value.data[i] = saved - cfg.eps;
      const double down = eval();
      value.data[i] = saved;
      const double numeric = (up - down) / (2 * cfg.eps);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic.data[i], numeric));
      entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(analytic.data[i]));
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.checked += entry.count;
    report.entries.push_back(std::move(entry));
  };

  ad::zip_params<const Mat<double>>(params, const_cast<StackParams<double>&>(grads),
                                    [&](const std::string& name, Mat<double>& value, const Mat<double>& g) {
                                      check_tensor(name, value, g, [&] { return loss(params, input); });
                                    });
  check_tensor("input", input, d_input, [&] { return loss(params, input); });
  return report;
}

AttentionBaselineParams init_attention_baseline(std::size_t c, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "attention_baseline"));
  AttentionBaselineParams p;
  p.ln_g = Mat<float>(1, c, 1.0f);
  p.ln_b = Mat<float>(1, c);
  p.w_q = uniform_init(c, c, rng);
  p.w_k = uniform_init(c, c, rng);
  p.w_v = uniform_init(c, c, rng);
  p.w_o = uniform_init(c, c, rng);
  return p;
}

Mat<float> attention_baseline_forward(const Mat<float>& f, const AttentionBaselineParams& p) {
  const std::size_t L = f.rows, c = f.cols;
  Mat<float> x, q, k, v;
  ad::layernorm_rows<float>(f, p.ln_g, p.ln_b, x, nullptr, nullptr);
  kernels::gemm_nn(x, p.w_q, q);
  kernels::gemm_nn(x, p.w_k, k);
  kernels::gemm_nn(x, p.w_v, v);
  Mat<float> ctx(L, c);
  const float scale = 1.0f / std::sqrt(float(c));
  const auto rows = static_cast<std::int64_t>(L);
#pragma omp parallel for schedule(static) if (L > 256)
  for (std::int64_t i = 0; i < rows; ++i) {
    std::vector<float> s(L);
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < L; ++j) {
      float acc = 0;
      for (std::size_t ch = 0; ch < c; ++ch) acc += q(i, ch) * k(j, ch);
      s[j] = acc * scale;
      mx = std::max(mx, s[j]);
    }
    float z = 0;
    for (auto& val : s) z += (val = std::exp(val - mx));
    for (std::size_t j = 0; j < L; ++j) {
      const float w = s[j] / z;
      for (std::size_t ch = 0; ch < c; ++ch) ctx(i, ch) += w * v(j, ch);
    }
  }
  Mat<float> out = f;
  kernels::gemm_nn(ctx, p.w_o, out, true);
  return out;
}

}  // namespace pc4d
