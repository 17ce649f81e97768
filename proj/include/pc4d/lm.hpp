#pragma once

// Language side of the model: a token-wise projector from temporal tokens to
// the decoder width, a small causal decoder over [point prefix | text], the
// bundle container holding every parameter set, and the staged trainer.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pc4d/autodiff.hpp"
#include "pc4d/bimamba.hpp"
#include "pc4d/encoder.hpp"
#include "pc4d/tensor.hpp"

namespace pc4d {

// ---------------------------------------------------------------------------
// Words

// Whitespace split; leading/trailing punctuation becomes its own token. Case is
// kept so that generated text can match captions verbatim.
std::vector<std::string> split_words(std::string_view text);
std::string join_words(std::span<const std::string> words);

class Vocabulary {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kPcl = 3;
  static constexpr int kReserved = 4;

  Vocabulary();
  // Reserved tokens, then the distinct words of `texts` in sorted order.
  static Vocabulary build(std::span<const std::string> texts);
  static Vocabulary from_words(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  const std::string& word(int id) const;
  std::optional<int> find(std::string_view w) const;
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(std::string_view text) const;  // UnknownToken
  bool covers(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;  // reserved ids are dropped

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Parameters

template <class N>
struct ProjectorT {
  N w1, b1;  // c -> c'
  N w2, b2;  // c' -> c'

  template <class F>
  void for_each(F&& f) {
    f("w1", w1);
    f("b1", b1);
    f("w2", w2);
    f("b2", b2);
  }
};

template <class N>
struct DecoderLayerT {
  N ln1_g, ln1_b;
  N w_q, w_k, w_v, w_o, b_o;
  N ln2_g, ln2_b;
  N ff1_w, ff1_b, ff2_w, ff2_b;

  template <class F>
  void for_each(F&& f) {
    f("ln1.g", ln1_g);
    f("ln1.b", ln1_b);
    f("w_q", w_q);
    f("w_k", w_k);
    f("w_v", w_v);
    f("w_o", w_o);
    f("b_o", b_o);
    f("ln2.g", ln2_g);
    f("ln2.b", ln2_b);
    f("ff1.w", ff1_w);
    f("ff1.b", ff1_b);
    f("ff2.w", ff2_w);
    f("ff2.b", ff2_b);
  }
};

template <class N>
struct DecoderT {
  N embed;  // V x c'
  std::vector<DecoderLayerT<N>> layers;
  N lnf_g, lnf_b;
  N out_w, out_b;  // c' -> V, untied

  template <class F>
  void for_each(F&& f) {
    f("embed", embed);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].for_each([&](const std::string& n, N& m) { f("layer" + std::to_string(i) + "." + n, m); });
    f("lnf.g", lnf_g);
    f("lnf.b", lnf_b);
    f("out.w", out_w);
    f("out.b", out_b);
  }
};

template <class A, class B>
void shape_like(DecoderT<A>& dst, const DecoderT<B>& src) {
  dst.layers.resize(src.layers.size());
}

template <class T>
using Projector = ProjectorT<Mat<T>>;
template <class T>
using Decoder = DecoderT<Mat<T>>;

struct DecoderDims {
  std::size_t width = 128;  // c'
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ff_mult = 4;
  std::size_t context = 512;
};

struct ModelDims {
  std::size_t groups = 16, neighbors = 32, width = 64;  // encoder G, k, c
  BiMambaDims mamba{};                                 // mamba.c must equal width
  DecoderDims decoder{};
};

struct ModelBundle {
  ModelDims dims;
  EncoderParams encoder;
  StackParams<float> mamba;
  Projector<float> projector;
  Decoder<float> decoder;
  Vocabulary vocab;

  // Hex FNV-1a over dims, vocabulary and every parameter blob.
  std::string fingerprint() const;
  void check_consistent() const;  // ShapeMismatch
};

ModelBundle init_bundle(const ModelDims& dims, Vocabulary vocab, std::uint64_t seed);

void save_bundle(const ModelBundle& b, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_bundle(const ModelBundle& b);
ModelBundle decode_bundle(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Forward pieces

Mat<float> sinusoidal_positions(std::size_t rows, std::size_t width);

// Two-layer MLP followed by an affine-free layer norm, so prefix rows enter
// the decoder at the same scale as text embeddings.
template <class T>
ad::Var projector_apply(ad::Tape<T>& t, ad::Var f, const ProjectorT<ad::Var>& p) {
  const ad::Var y = ad::linear(t, ad::gelu(t, ad::linear(t, f, p.w1, p.b1)), p.w2, p.b2);
  const std::size_t n = t.value(y).cols;
  return ad::layernorm(t, y, t.constant(Mat<T>(1, n, T(1))), t.constant(Mat<T>(1, n, T(0))));
}

// Logits for rows [first_row, prefix.rows + ids.size()) of the mixed sequence.
template <class T>
ad::Var decoder_apply(ad::Tape<T>& t, ad::Var prefix, std::span<const int> ids, const DecoderT<ad::Var>& p,
                      const DecoderDims& dims, std::size_t first_row) {
  using namespace ad;
  const std::size_t L = t.value(prefix).rows + ids.size();
  if (L > dims.context)
    fail(ErrorKind::kContextOverflow,
         "sequence of " + std::to_string(L) + " tokens exceeds context " + std::to_string(dims.context));
  Var x = prefix;
  if (!ids.empty()) x = concat_rows(t, prefix, embedding(t, p.embed, ids));
  x = add(t, x, t.constant(sinusoidal_positions(L, dims.width).template cast<T>()));
  for (const auto& layer : p.layers) {
    const Var a = layernorm(t, x, layer.ln1_g, layer.ln1_b);
    const Var att = causal_attention(t, matmul(t, a, layer.w_q), matmul(t, a, layer.w_k), matmul(t, a, layer.w_v),
                                     dims.heads);
    x = add(t, x, linear(t, att, layer.w_o, layer.b_o));
    const Var h = layernorm(t, x, layer.ln2_g, layer.ln2_b);
    x = add(t, x, linear(t, gelu(t, linear(t, h, layer.ff1_w, layer.ff1_b)), layer.ff2_w, layer.ff2_b));
  }
  if (first_row > 0) x = slice_rows(t, x, first_row, L - first_row);
  return linear(t, layernorm(t, x, p.lnf_g, p.lnf_b), p.out_w, p.out_b);
}

// Text layout after the point prefix: PCL prompt BOS answer. Targets are -1
// except on BOS and answer rows, which predict the next answer token or EOS.
struct LmExample {
  std::vector<int> ids;
  std::vector<int> targets;
  std::size_t answer_start = 0;  // index of BOS within ids
};

LmExample make_example(const Vocabulary& vocab, std::string_view prompt, std::string_view answer);

template <class T>
struct LmVars {
  StackParamsT<ad::Var> mamba;
  ProjectorT<ad::Var> projector;
  DecoderT<ad::Var> decoder;
};

// Mean cross-entropy over the answer rows of one example.
template <class T>
ad::Var lm_loss(ad::Tape<T>& t, ad::Var point_tokens, const LmVars<T>& v, const DecoderDims& dims,
                const LmExample& ex) {
  const ad::Var temporal = stack_apply(t, point_tokens, v.mamba);
  const ad::Var prefix = projector_apply(t, temporal, v.projector);
  const std::size_t first = t.value(prefix).rows + ex.answer_start;
  const ad::Var logits = decoder_apply(t, prefix, ex.ids, v.decoder, dims, first);
  return ad::cross_entropy(t, logits, std::span(ex.targets).subspan(ex.answer_start));
}

Mat<float> project_tokens(const Mat<float>& f, const Projector<float>& p);

// Temporal + projected prefix for an encoded sequence.
Mat<float> point_prefix(const ModelBundle& b, const TokenSequence& tokens);

// Logits for every row of [prefix | ids].
Mat<float> decoder_forward(const ModelBundle& b, const Mat<float>& prefix, std::span<const int> ids);

// ---------------------------------------------------------------------------
// Generation

struct GenerateOptions {
  std::size_t max_len = 48;
};

// Greedy decoding after "PCL prompt BOS", with a per-layer key/value cache.
std::string generate_from_prefix(const ModelBundle& b, const Mat<float>& prefix, std::string_view prompt,
                                 const GenerateOptions& opts = {});
std::string generate(const ModelBundle& b, const PointCloudSequence& seq, std::string_view prompt,
                     const GenerateOptions& opts = {});

// ---------------------------------------------------------------------------
// Training

enum class Stage { kAlign, kSft, kRefine };
std::string to_string(Stage s);
Stage parse_stage(std::string_view s);

struct FreezeMask {
  bool encoder = true;
  bool mamba = false;
  bool projector = false;
  bool decoder = false;
  bool operator==(const FreezeMask&) const = default;
};

FreezeMask stage_freeze(Stage s);

struct TrainConfig {
  Stage stage = Stage::kSft;
  FreezeMask freeze = stage_freeze(Stage::kSft);
  std::size_t steps = 0;   // 0: epochs * ceil(n / batch_size)
  std::size_t epochs = 1;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  double min_lr_ratio = 0.1;
  std::size_t warmup = 0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables
  std::uint64_t seed = 0;
};

TrainConfig stage_config(Stage s, std::size_t steps, double learning_rate, std::uint64_t seed);

struct TrainSample {
  std::size_t sequence = 0;  // index into TrainSet::tokens
  std::string prompt;
  std::string answer;
};

struct TrainSet {
  std::vector<TokenSequence> tokens;
  std::vector<TrainSample> samples;
};

struct TrainResult {
  std::vector<double> loss_curve;  // batch mean per step
};

TrainResult train_stage(ModelBundle& bundle, const TrainSet& data, const TrainConfig& cfg);

// Mean loss per sample without updating anything.
std::vector<double> sample_losses(const ModelBundle& bundle, const TrainSet& data);

}  // namespace pc4d
