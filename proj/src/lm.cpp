#include "pc4d/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>

#include "pc4d/bytes.hpp"
#include "pc4d/kernels.hpp"
#include "pc4d/rng.hpp"
#include "pc4d/weights.hpp"

namespace pc4d {

namespace {

bool is_punct(char c) { return c != '\0' && std::strchr(".,;:!?()", c) != nullptr; }

bool space_before(const std::string& w) { return !(w.size() == 1 && std::strchr(".,;:!?)", w[0])); }

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::string_view chunk = text.substr(i, j - i);
    i = j;
    if (chunk.empty()) continue;
    while (!chunk.empty() && is_punct(chunk.front())) {
      out.emplace_back(1, chunk.front());
      chunk.remove_prefix(1);
    }
    std::vector<std::string> tail;
    while (!chunk.empty() && is_punct(chunk.back())) {
      tail.emplace_back(1, chunk.back());
      chunk.remove_suffix(1);
    }
    if (!chunk.empty()) out.emplace_back(chunk);
    out.insert(out.end(), tail.rbegin(), tail.rend());
  }
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0 && space_before(words[i]) && words[i - 1] != "(") out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<bos>", "<eos>", "<pcl>"};
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  v.index_.clear();
  for (auto& w : words) {
    if (w.empty() || w.size() > 0xFFFF) fail(ErrorKind::kInvalidArgument, "vocabulary word of invalid length");
    v.words_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < v.words_.size(); ++i)
    if (!v.index_.emplace(v.words_[i], static_cast<int>(i)).second)
      fail(ErrorKind::kInvalidArgument, "duplicate vocabulary word '" + v.words_[i] + "'");
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::vector<std::string> words;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) words.push_back(std::move(w));
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  std::erase_if(words, [](const std::string& w) { return w.front() == '<' && w.back() == '>'; });
  return from_words(std::move(words));
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    fail(ErrorKind::kUnknownToken, "token id " + std::to_string(id) + " outside the vocabulary");
  return words_[id];
}

std::optional<int> Vocabulary::find(std::string_view w) const {
  const auto it = index_.find(std::string(w));
  if (it == index_.end() || it->second < kReserved) return std::nullopt;
  return it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    const auto id = find(w);
    if (!id) fail(ErrorKind::kUnknownToken, "word '" + w + "' is not in the vocabulary");
    ids.push_back(*id);
  }
  return ids;
}

bool Vocabulary::covers(std::string_view text) const {
  for (const auto& w : split_words(text))
    if (!find(w)) return false;
  return true;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  for (int id : ids)
    if (id >= kReserved) words.push_back(word(id));
  return join_words(words);
}

// ---------------------------------------------------------------------------
// Bundle

namespace {

Mat<float> uniform_mat(std::size_t r, std::size_t c, double bound, Rng& rng) {
  Mat<float> m(r, c);
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(-bound, bound));
  return m;
}

Mat<float> linear_weight(std::size_t in, std::size_t out, Rng& rng) {
  return uniform_mat(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

constexpr char kBundleMagic[] = "PCB1";
constexpr std::uint32_t kBundleVersion = 1;

std::vector<std::uint32_t> dims_fields(const ModelDims& d) {
  return {std::uint32_t(d.groups),         std::uint32_t(d.neighbors),     std::uint32_t(d.width),
          std::uint32_t(d.mamba.E),        std::uint32_t(d.mamba.n_s),     std::uint32_t(d.mamba.K),
          std::uint32_t(d.decoder.width),  std::uint32_t(d.decoder.heads), std::uint32_t(d.decoder.layers),
          std::uint32_t(d.decoder.ff_mult), std::uint32_t(d.decoder.context)};
}

ModelDims dims_from_fields(const std::vector<std::uint32_t>& f) {
  ModelDims d;
  d.groups = f[0];
  d.neighbors = f[1];
  d.width = f[2];
  d.mamba = {f[2], f[3], f[4], f[5]};
  d.decoder = {f[6], f[7], f[8], f[9], f[10]};
  return d;
}

std::vector<std::vector<std::uint8_t>> bundle_blobs(const ModelBundle& b) {
  return {encode_weights(encoder_tensors(b.encoder)), encode_weights(stack_tensors(b.mamba)),
          encode_weights(to_named(b.projector)), encode_weights(to_named(b.decoder))};
}

std::string fingerprint_of(const ModelDims& dims, const Vocabulary& vocab,
                           const std::vector<std::vector<std::uint8_t>>& blobs) {
  ByteWriter w;
  for (auto f : dims_fields(dims)) w.u32(f);
  for (const auto& word : vocab.words()) w.str16(word);
  std::uint64_t h = fnv1a64({reinterpret_cast<const char*>(w.bytes().data()), w.bytes().size()});
  for (const auto& blob : blobs) h = fnv1a64({reinterpret_cast<const char*>(blob.data()), blob.size()}, h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string ModelBundle::fingerprint() const { return fingerprint_of(dims, vocab, bundle_blobs(*this)); }

void ModelBundle::check_consistent() const {
  const auto& d = dims;
  const std::size_t dw = d.decoder.width, V = vocab.size();
  if (encoder.width != d.width || encoder.groups != d.groups)
    fail(ErrorKind::kShapeMismatch, "encoder width/groups disagree with bundle dims");
  const auto md = stack_dims(mamba);
  if (md.c != d.width || md.E != d.mamba.E || md.n_s != d.mamba.n_s || md.K != d.mamba.K)
    fail(ErrorKind::kShapeMismatch, "mamba stack dims disagree with bundle dims");
  require_shape(projector.w1, d.width, dw, "projector w1");
  require_shape(projector.w2, dw, dw, "projector w2");
  require_shape(decoder.embed, V, dw, "decoder embedding");
  require_shape(decoder.out_w, dw, V, "decoder output");
  if (decoder.layers.size() != d.decoder.layers) fail(ErrorKind::kShapeMismatch, "decoder layer count");
  if (d.decoder.heads == 0 || dw % d.decoder.heads != 0)
    fail(ErrorKind::kShapeMismatch, "decoder width not divisible by heads");
}

ModelBundle init_bundle(const ModelDims& dims, Vocabulary vocab, std::uint64_t seed) {
  ModelBundle b;
  b.dims = dims;
  b.dims.mamba.c = dims.width;
  b.vocab = std::move(vocab);
  b.encoder = init_encoder(dims.groups, dims.neighbors, dims.width, derive_seed(seed, "encoder"));
  b.mamba = init_stack(b.dims.mamba, seed);

  const std::size_t c = dims.width, dw = dims.decoder.width, V = b.vocab.size();
  Rng pr(derive_seed(seed, "projector"));
  b.projector.w1 = linear_weight(c, dw, pr);
  b.projector.b1 = Mat<float>(1, dw);
  b.projector.w2 = linear_weight(dw, dw, pr);
  b.projector.b2 = Mat<float>(1, dw);

  Rng dr(derive_seed(seed, "decoder"));
  auto& dec = b.decoder;
  dec.embed = uniform_mat(V, dw, 0.5, dr);
  const std::size_t ff = dw * dims.decoder.ff_mult;
  dec.layers.resize(dims.decoder.layers);
  for (auto& l : dec.layers) {
    l.ln1_g = Mat<float>(1, dw, 1.0f);
    l.ln1_b = Mat<float>(1, dw);
    l.w_q = linear_weight(dw, dw, dr);
    l.w_k = linear_weight(dw, dw, dr);
    l.w_v = linear_weight(dw, dw, dr);
    l.w_o = linear_weight(dw, dw, dr);
    l.b_o = Mat<float>(1, dw);
    l.ln2_g = Mat<float>(1, dw, 1.0f);
    l.ln2_b = Mat<float>(1, dw);
    l.ff1_w = linear_weight(dw, ff, dr);
    l.ff1_b = Mat<float>(1, ff);
    l.ff2_w = linear_weight(ff, dw, dr);
    l.ff2_b = Mat<float>(1, dw);
  }
  dec.lnf_g = Mat<float>(1, dw, 1.0f);
  dec.lnf_b = Mat<float>(1, dw);
  dec.out_w = linear_weight(dw, V, dr);
  dec.out_b = Mat<float>(1, V);
  b.check_consistent();
  return b;
}

std::vector<std::uint8_t> encode_bundle(const ModelBundle& b) {
  b.check_consistent();
  const auto blobs = bundle_blobs(b);
  ByteWriter w;
  w.raw(std::string_view(kBundleMagic, 4));
  w.u32(kBundleVersion);
  const auto fields = dims_fields(b.dims);
  w.u32(static_cast<std::uint32_t>(fields.size()));
  for (auto f : fields) w.u32(f);
  w.u32(static_cast<std::uint32_t>(b.vocab.size() - Vocabulary::kReserved));
  for (std::size_t i = Vocabulary::kReserved; i < b.vocab.size(); ++i) w.str16(b.vocab.words()[i]);
  w.u32(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& blob : blobs) {
    w.u32(static_cast<std::uint32_t>(blob.size()));
    w.raw(blob);
  }
  w.str16(fingerprint_of(b.dims, b.vocab, blobs));
  w.append_crc();
  return w.take();
}

ModelBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kBundleMagic, 4) != 0)
    fail(ErrorKind::kBadMagic, "not a model bundle (expected magic PCB1)");
  ByteReader crc_reader(bytes.subspan(bytes.size() - 4));
  if (crc32(bytes.first(bytes.size() - 4)) != crc_reader.u32())
    fail(ErrorKind::kChecksumMismatch, "model bundle checksum mismatch");
  ByteReader r(bytes.first(bytes.size() - 4));
  r.raw(4);
  const auto version = r.u32();
  if (version != kBundleVersion)
    fail(ErrorKind::kVersionUnsupported, "model bundle version " + std::to_string(version));
  const auto nfields = r.u32();
  if (nfields != 11) fail(ErrorKind::kSchema, "model bundle dims block has " + std::to_string(nfields) + " fields");
  std::vector<std::uint32_t> fields(nfields);
  for (auto& f : fields) f = r.u32();
  const auto nwords = r.u32();
  std::vector<std::string> words(nwords);
  for (auto& w : words) w = r.str16();

  ModelBundle b = init_bundle(dims_from_fields(fields), Vocabulary::from_words(std::move(words)), 0);
  if (r.u32() != 4) fail(ErrorKind::kSchema, "model bundle needs four parameter blobs");
  std::vector<std::vector<NamedTensor>> blobs;
  for (int i = 0; i < 4; ++i) blobs.push_back(decode_weights(r.span(r.u32())));
  b.encoder = encoder_from_tensors(blobs[0]);
  b.mamba = stack_from_tensors(blobs[1]);
  from_named(b.projector, blobs[2]);
  from_named(b.decoder, blobs[3]);
  b.check_consistent();
  const std::string stored = r.str16();
  if (stored != b.fingerprint()) fail(ErrorKind::kChecksumMismatch, "model bundle fingerprint mismatch");
  return b;
}

void save_bundle(const ModelBundle& b, const std::filesystem::path& path) { write_file(path, encode_bundle(b)); }

ModelBundle load_bundle(const std::filesystem::path& path) { return decode_bundle(read_file(path)); }

// ---------------------------------------------------------------------------
// Forward

Mat<float> sinusoidal_positions(std::size_t rows, std::size_t width) {
  Mat<float> m(rows, width);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < width; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k - k % 2) / static_cast<double>(width));
      m(i, k) = static_cast<float>(k % 2 == 0 ? std::sin(i * freq) : std::cos(i * freq));
    }
  return m;
}

LmExample make_example(const Vocabulary& vocab, std::string_view prompt, std::string_view answer) {
  LmExample ex;
  ex.ids.push_back(Vocabulary::kPcl);
  for (int id : vocab.encode(prompt)) ex.ids.push_back(id);
  ex.answer_start = ex.ids.size();
  ex.ids.push_back(Vocabulary::kBos);
  for (int id : vocab.encode(answer)) ex.ids.push_back(id);
  ex.targets.assign(ex.ids.size(), -1);
  for (std::size_t i = ex.answer_start; i < ex.ids.size(); ++i)
    ex.targets[i] = i + 1 < ex.ids.size() ? ex.ids[i + 1] : Vocabulary::kEos;
  return ex;
}

Mat<float> project_tokens(const Mat<float>& f, const Projector<float>& p) {
  if (f.cols != p.w1.rows)
    fail(ErrorKind::kShapeMismatch, "projector expects width " + std::to_string(p.w1.rows) + ", got " +
                                        std::to_string(f.cols));
  ad::Tape<float> t;
  const auto v = ad::bind(t, p, false);
  return t.value(projector_apply(t, t.constant(f), v));
}

Mat<float> point_prefix(const ModelBundle& b, const TokenSequence& tokens) {
  if (tokens.c != b.dims.width) fail(ErrorKind::kShapeMismatch, "token width does not match the bundle");
  return project_tokens(stack_forward(tokens.tokens, b.mamba), b.projector);
}

Mat<float> decoder_forward(const ModelBundle& b, const Mat<float>& prefix, std::span<const int> ids) {
  require_shape(prefix, prefix.rows, b.dims.decoder.width, "decoder prefix");
  ad::Tape<float> t;
  const auto v = ad::bind(t, b.decoder, false);
  return t.value(decoder_apply(t, t.constant(prefix), ids, v, b.dims.decoder, 0));
}

// ---------------------------------------------------------------------------
// Generation

namespace {

// Row-at-a-time decoder with per-layer key/value caches. Follows the exact op
// sequence of decoder_apply for each row.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ModelBundle& b)
      : dec_(b.decoder), dims_(b.dims.decoder), keys_(dims_.layers), values_(dims_.layers) {
    for (std::size_t l = 0; l < dims_.layers; ++l) {
      keys_[l] = Mat<float>(dims_.context, dims_.width);
      values_[l] = Mat<float>(dims_.context, dims_.width);
    }
  }

  std::size_t length() const { return n_; }

  void push_token(int id, Mat<float>* logits) {
    Mat<float> x(1, dims_.width);
    const auto row = dec_.embed.row(static_cast<std::size_t>(id));
    std::copy(row.begin(), row.end(), x.data.begin());
    push(std::move(x), logits);
  }

  void push(Mat<float> x, Mat<float>* logits) {
    if (n_ >= dims_.context)
      fail(ErrorKind::kContextOverflow, "generation exceeds context " + std::to_string(dims_.context));
    const std::size_t d = dims_.width;
    for (std::size_t k = 0; k < d; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k - k % 2) / static_cast<double>(d));
      x.data[k] += static_cast<float>(k % 2 == 0 ? std::sin(n_ * freq) : std::cos(n_ * freq));
    }
    for (std::size_t l = 0; l < dims_.layers; ++l) {
      const auto& p = dec_.layers[l];
      Mat<float> a, q, k, v;
      ad::layernorm_rows<float>(x, p.ln1_g, p.ln1_b, a, nullptr, nullptr);
      kernels::gemm_nn(a, p.w_q, q);
      kernels::gemm_nn(a, p.w_k, k);
      kernels::gemm_nn(a, p.w_v, v);
      std::copy(k.data.begin(), k.data.end(), keys_[l].row(n_).begin());
      std::copy(v.data.begin(), v.data.end(), values_[l].row(n_).begin());
      Mat<float> att(1, d);
      attend(q, keys_[l], values_[l], att);
      add_into(x, linear(att, p.w_o, p.b_o));
      Mat<float> h;
      ad::layernorm_rows<float>(x, p.ln2_g, p.ln2_b, h, nullptr, nullptr);
      Mat<float> f = linear(h, p.ff1_w, p.ff1_b);
      for (auto& e : f.data) e = ad::gelu(e);
      add_into(x, linear(f, p.ff2_w, p.ff2_b));
    }
    ++n_;
    if (logits) {
      Mat<float> h;
      ad::layernorm_rows<float>(x, dec_.lnf_g, dec_.lnf_b, h, nullptr, nullptr);
      *logits = linear(h, dec_.out_w, dec_.out_b);
    }
  }

 private:
  static Mat<float> linear(const Mat<float>& x, const Mat<float>& w, const Mat<float>& b) {
    Mat<float> out;
    kernels::gemm_nn(x, w, out);
    for (std::size_t j = 0; j < out.cols; ++j) out.data[j] = out.data[j] + b.data[j];
    return out;
  }

  static void add_into(Mat<float>& x, const Mat<float>& y) {
    for (std::size_t j = 0; j < x.cols; ++j) x.data[j] = x.data[j] + y.data[j];
  }

  void attend(const Mat<float>& q, const Mat<float>& keys, const Mat<float>& values, Mat<float>& out) const {
    const std::size_t heads = dims_.heads, dh = dims_.width / heads, i = n_;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> row(i + 1);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        float s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q.data[off + c] * keys(j, off + c);
        row[j] = s * scale;
        mx = std::max(mx, row[j]);
      }
      float z = 0;
      for (std::size_t j = 0; j <= i; ++j) z += (row[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j <= i; ++j) {
        const float p = row[j] / z;
        for (std::size_t c = 0; c < dh; ++c) out.data[off + c] += p * values(j, off + c);
      }
    }
  }

  const Decoder<float>& dec_;
  DecoderDims dims_;
  std::vector<Mat<float>> keys_, values_;
  std::size_t n_ = 0;
};

int greedy_pick(const Mat<float>& logits) {
  int best = Vocabulary::kEos;
  for (std::size_t j = Vocabulary::kReserved; j < logits.cols; ++j)
    if (logits.data[j] > logits.data[best]) best = static_cast<int>(j);
  return best;
}

}  // namespace

std::string generate_from_prefix(const ModelBundle& b, const Mat<float>& prefix, std::string_view prompt,
                                 const GenerateOptions& opts) {
  require_shape(prefix, prefix.rows, b.dims.decoder.width, "generation prefix");
  if (opts.max_len == 0) return "";
  const auto prompt_ids = b.vocab.encode(prompt);
  IncrementalDecoder dec(b);
  for (std::size_t r = 0; r < prefix.rows; ++r) {
    Mat<float> row(1, prefix.cols);
    std::copy(prefix.row(r).begin(), prefix.row(r).end(), row.data.begin());
    dec.push(std::move(row), nullptr);
  }
  dec.push_token(Vocabulary::kPcl, nullptr);
  for (int id : prompt_ids) dec.push_token(id, nullptr);
  Mat<float> logits;
  dec.push_token(Vocabulary::kBos, &logits);
  std::vector<int> out;
  while (out.size() < opts.max_len) {
    const int id = greedy_pick(logits);
    if (id == Vocabulary::kEos) break;
    out.push_back(id);
    if (out.size() == opts.max_len || dec.length() >= b.dims.decoder.context) break;
    dec.push_token(id, &logits);
  }
  return b.vocab.decode(out);
}

std::string generate(const ModelBundle& b, const PointCloudSequence& seq, std::string_view prompt,
                     const GenerateOptions& opts) {
  if (opts.max_len == 0) return "";
  return generate_from_prefix(b, point_prefix(b, encode_sequence(seq, b.encoder)), prompt, opts);
}

// ---------------------------------------------------------------------------
// Training

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kAlign: return "align";
    case Stage::kSft: return "sft";
    case Stage::kRefine: return "refine";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  if (s == "align") return Stage::kAlign;
  if (s == "sft") return Stage::kSft;
  if (s == "refine") return Stage::kRefine;
  fail(ErrorKind::kInvalidArgument, "unknown stage '" + std::string(s) + "' (align|sft|refine)");
}

FreezeMask stage_freeze(Stage s) {
  switch (s) {
    case Stage::kAlign:
    case Stage::kRefine: return {true, false, false, true};
    case Stage::kSft: return {true, false, false, false};
  }
  return {};
}

TrainConfig stage_config(Stage s, std::size_t steps, double learning_rate, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.stage = s;
  cfg.freeze = stage_freeze(s);
  cfg.steps = steps;
  cfg.learning_rate = learning_rate;
  cfg.warmup = std::min<std::size_t>(20, steps / 10);
  cfg.seed = derive_seed(seed, to_string(s));
  return cfg;
}

namespace {

template <class Group, class F>
void visit_group(Group& g, F&& f) {
  g.for_each([&](const std::string&, auto& m) { f(m); });
}

double forward_backward(const ModelBundle& b, const TokenSequence& tokens, const LmExample& ex,
                        const FreezeMask& freeze, std::vector<Mat<float>>* grads, float weight) {
  ad::Tape<float> t;
  LmVars<float> v;
  v.mamba = ad::bind(t, b.mamba, grads && !freeze.mamba);
  v.projector = ad::bind(t, b.projector, grads && !freeze.projector);
  v.decoder = ad::bind(t, b.decoder, grads && !freeze.decoder);
  const ad::Var loss = lm_loss(t, t.constant(tokens.tokens), v, b.dims.decoder, ex);
  const double value = t.value(loss).data[0];
  if (!grads || !std::isfinite(value)) return value;
  t.backward(loss, Mat<float>(1, 1, weight));
  std::size_t i = 0;
  auto fold = [&](ad::Var& var) {
    Mat<float>& acc = (*grads)[i++];
    if (!t.has_grad(var)) return;
    const auto& g = t.grad(var);
    for (std::size_t k = 0; k < g.size(); ++k) acc.data[k] += g.data[k];
  };
  if (!freeze.mamba) visit_group(v.mamba, fold);
  if (!freeze.projector) visit_group(v.projector, fold);
  if (!freeze.decoder) visit_group(v.decoder, fold);
  return value;
}

std::vector<Mat<float>*> trainable_params(ModelBundle& b, const FreezeMask& freeze) {
  std::vector<Mat<float>*> out;
  auto take = [&](Mat<float>& m) { out.push_back(&m); };
  if (!freeze.mamba) visit_group(b.mamba, take);
  if (!freeze.projector) visit_group(b.projector, take);
  if (!freeze.decoder) visit_group(b.decoder, take);
  return out;
}

std::vector<LmExample> prepare(const ModelBundle& b, const TrainSet& data) {
  if (data.samples.empty()) fail(ErrorKind::kEmptyDataset, "training set has no samples");
  std::vector<LmExample> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    if (s.sequence >= data.tokens.size()) fail(ErrorKind::kInvalidArgument, "sample refers to a missing sequence");
    out.push_back(make_example(b.vocab, s.prompt, s.answer));
  }
  for (const auto& ts : data.tokens)
    if (ts.c != b.dims.width) fail(ErrorKind::kShapeMismatch, "token width does not match the bundle");
  return out;
}

}  // namespace

TrainResult train_stage(ModelBundle& bundle, const TrainSet& data, const TrainConfig& cfg) {
  if (!cfg.freeze.encoder) fail(ErrorKind::kInvalidArgument, "the frame encoder is not trainable");
  if (cfg.batch_size == 0) fail(ErrorKind::kInvalidArgument, "batch_size must be >= 1");
  bundle.check_consistent();
  const auto examples = prepare(bundle, data);
  const std::size_t n = examples.size();
  const std::size_t steps = cfg.steps ? cfg.steps : cfg.epochs * ((n + cfg.batch_size - 1) / cfg.batch_size);

  const auto params = trainable_params(bundle, cfg.freeze);
  std::vector<Mat<float>> m1, m2, grads;
  for (auto* p : params) {
    m1.emplace_back(p->rows, p->cols);
    m2.emplace_back(p->rows, p->cols);
    grads.emplace_back(p->rows, p->cols);
  }

  Rng order_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(n);
  std::size_t cursor = n;

  TrainResult result;
  result.loss_curve.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    for (auto& g : grads) g.fill(0.0f);
    double batch_loss = 0;
    for (std::size_t j = 0; j < cfg.batch_size; ++j) {
      if (cursor == n) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      const auto& s = data.samples[idx];
      const double loss = forward_backward(bundle, data.tokens[s.sequence], examples[idx], cfg.freeze,
                                           params.empty() ? nullptr : &grads, 1.0f / float(cfg.batch_size));
      if (!std::isfinite(loss))
        fail(ErrorKind::kNonFiniteLoss, "non-finite loss at " + to_string(cfg.stage) + " step " +
                                            std::to_string(step + 1) + ", sample " + std::to_string(idx) +
                                            " (prompt '" + s.prompt + "')");
      batch_loss += loss;
    }
    result.loss_curve.push_back(batch_loss / double(cfg.batch_size));
    if (params.empty()) continue;

    double norm2 = 0;
    for (const auto& g : grads)
      for (float v : g.data) norm2 += double(v) * v;
    if (!std::isfinite(norm2))
      fail(ErrorKind::kNonFiniteLoss, "non-finite gradient at step " + std::to_string(step + 1));
    const double norm = std::sqrt(norm2);
    const double clip = cfg.clip_norm > 0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    double lr = cfg.learning_rate;
    if (step < cfg.warmup) {
      lr *= double(step + 1) / double(cfg.warmup + 1);
    } else if (steps > cfg.warmup + 1) {
      const double progress = double(step - cfg.warmup) / double(steps - cfg.warmup - 1);
      lr *= cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + std::cos(std::numbers::pi * progress));
    }
    const double bc1 = 1 - std::pow(cfg.beta1, double(step + 1));
    const double bc2 = 1 - std::pow(cfg.beta2, double(step + 1));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& w = params[p]->data;
      auto& a = m1[p].data;
      auto& v = m2[p].data;
      const auto& g = grads[p].data;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k] * clip;
        a[k] = static_cast<float>(cfg.beta1 * a[k] + (1 - cfg.beta1) * gk);
        v[k] = static_cast<float>(cfg.beta2 * v[k] + (1 - cfg.beta2) * gk * gk);
        const double update = (a[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.adam_eps) + cfg.weight_decay * w[k];
        w[k] = static_cast<float>(w[k] - lr * update);
      }
    }
  }
  return result;
}

std::vector<double> sample_losses(const ModelBundle& bundle, const TrainSet& data) {
  const auto examples = prepare(bundle, data);
  std::vector<double> out;
  for (std::size_t i = 0; i < examples.size(); ++i)
    out.push_back(
        forward_backward(bundle, data.tokens[data.samples[i].sequence], examples[i], stage_freeze(Stage::kSft),
                         nullptr, 1.0f));
  return out;
}

}  // namespace pc4d
