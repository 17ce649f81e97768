#pragma once

// Failure-aware bootstrapping: score model answers against ground truth,
// take the bottom fraction, ask a teacher for one corrective QA pair per
// failure, append them to the manifest and refine on them. Also holds the
// annotation and judge prompt templates.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pc4d/lm.hpp"
#include "pc4d/seqstore.hpp"

namespace pc4d {

// ---------------------------------------------------------------------------
// Data files and templates

// Contents of a shipped data file (path relative to data/, e.g. "prompts/judge.txt").
const std::string& data_file(std::string_view name);

// The 12 error categories, one per line of taxonomy.txt.
std::vector<std::string> load_taxonomy();

// Question stems of lexicon.txt with the caption sentence (1-based) each one asks about.
std::vector<std::pair<std::string, int>> load_lexicon();

// Neutralizes the quote delimiters <<< and >>> inside user content.
std::string escape_delimiters(std::string_view text);

// Replaces {{key}} placeholders in one pass; values are delimiter-escaped.
// Unknown or unfilled placeholders throw InvalidArgument.
std::string render_template(std::string_view tmpl, std::span<const std::pair<std::string, std::string>> values);

// ---------------------------------------------------------------------------
// Embedding and similarity

constexpr std::size_t kEmbedDim = 4096;

// Hashed character-trigram counts of the lowercased, space-padded text,
// L2-normalized. Empty text gives the zero vector.
std::vector<float> embed_text_default(std::string_view text);

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<float> embed(std::string_view text) = 0;
};

class BuiltinEmbedder : public Embedder {
 public:
  std::vector<float> embed(std::string_view text) override { return embed_text_default(text); }
};

struct EmbedderClientConfig {
  std::string endpoint;  // OpenAI-style /v1/embeddings URL
  std::string model;
  std::string auth_env = "PC4D_EMBEDDER_TOKEN";
  double timeout_s = 30;
};

// Remote embedder; any transport or format problem is EmbedderUnavailable.
class ExternalEmbedder : public Embedder {
 public:
  explicit ExternalEmbedder(EmbedderClientConfig cfg) : cfg_(std::move(cfg)) {}
  std::vector<float> embed(std::string_view text) override;

 private:
  EmbedderClientConfig cfg_;
};

// Cosine of the embeddings; 0 when either side is empty.
double semantic_similarity(std::string_view y, std::string_view y_hat, Embedder& embedder);

// ---------------------------------------------------------------------------
// Failure selection

struct ScoredPrediction {
  std::string record_id;
  std::size_t qa_index = 0;
  std::string question;
  std::string ground_truth;
  std::string prediction;
  double similarity = 0;
};

struct FailureCase {
  ScoredPrediction scored;
  std::string detailed_caption;
  std::vector<std::string> existing_questions;
  std::size_t selected_rank = 0;  // 1-based, ascending similarity
};

// ceil(k * n) lowest-similarity items (1e-9 slack against representation
// error), ties broken by record_id then qa_index, sorted ascending.
std::size_t failure_count(std::size_t n, double k);
std::vector<FailureCase> select_failures(std::span<const ScoredPrediction> scored, double k);

// ---------------------------------------------------------------------------
// Prompts

enum class CaptionLevel { kBrief, kDetailed };

std::string build_caption_prompt(CaptionLevel level);
std::string build_qa_prompt(std::string_view detailed_caption);
std::string build_diagnostic_prompt(const FailureCase& c, std::span<const std::string> taxonomy);
std::string build_judge_prompt(std::string_view ground_truth, std::string_view prediction);
std::string build_aggregation_prompt(std::span<const std::string> frame_predictions, std::string_view task);

struct QaParseResult {
  std::vector<QaPair> pairs;
  std::vector<std::string> diagnostics;  // "line N: ..."
};

// Lines of the form "[type] Q: question A: answer". Malformed lines and
// unknown types are skipped with a diagnostic; no usable pair is ParseFailure.
QaParseResult parse_qa_response(std::string_view text);

// ---------------------------------------------------------------------------
// Teacher

struct TeacherClientConfig {
  std::string endpoint = "stub";  // "stub" or an http(s) chat-completions URL
  std::string model = "stub-teacher";
  double temperature = 0.0;
  int max_tokens = 512;
  int retry_limit = 2;
  double timeout_s = 60;
  std::string auth_env = "PC4D_TEACHER_TOKEN";
  std::size_t concurrency = 4;
};

class TeacherBackend {
 public:
  virtual ~TeacherBackend() = default;
  virtual std::string model_id() const = 0;
  // Raw assistant text for one prompt; `context` is the case being diagnosed.
  virtual std::string complete(const std::string& prompt, const FailureCase& context, int attempt) = 0;
};

// Chat-completions JSON over HTTP with a bearer token from the environment.
class HttpTeacher : public TeacherBackend {
 public:
  explicit HttpTeacher(TeacherClientConfig cfg) : cfg_(std::move(cfg)) {}
  std::string model_id() const override { return cfg_.model; }
  std::string complete(const std::string& prompt, const FailureCase& context, int attempt) override;

  static std::string request_body(const TeacherClientConfig& cfg, const std::string& prompt);

 private:
  TeacherClientConfig cfg_;
};

// Offline rule-based teacher: category "temporal-order confusion", a
// question stem from lexicon.txt not already asked about the record, and the
// matching sentence of the detailed caption as the answer.
class StubTeacher : public TeacherBackend {
 public:
  StubTeacher();
  std::string model_id() const override { return "stub-teacher"; }
  std::string complete(const std::string& prompt, const FailureCase& context, int attempt) override;

 private:
  std::vector<std::pair<std::string, int>> stems_;
};

// Test double driven by a callback.
class FunctionTeacher : public TeacherBackend {
 public:
  using Fn = std::function<std::string(const std::string&, const FailureCase&, int)>;
  explicit FunctionTeacher(Fn fn, std::string id = "function-teacher") : fn_(std::move(fn)), id_(std::move(id)) {}
  std::string model_id() const override { return id_; }
  std::string complete(const std::string& prompt, const FailureCase& c, int attempt) override {
    return fn_(prompt, c, attempt);
  }

 private:
  Fn fn_;
  std::string id_;
};

std::unique_ptr<TeacherBackend> make_teacher(const TeacherClientConfig& cfg);

struct CorrectiveQA {
  std::vector<std::string> error_categories;
  std::string question;
  std::string answer;
  std::string teacher_model;
  std::string response_hash;  // hex FNV-1a of the raw response
};

// Lowercase alphanumeric words joined by single spaces.
std::string normalize_question(std::string_view q);
double unigram_jaccard(std::string_view a, std::string_view b);

// Fenced JSON block -> fields. ParseFailure on a missing block, bad JSON or
// missing fields.
CorrectiveQA parse_corrective_response(std::string_view response);

// Category membership, non-empty fields and the no-paraphrase rule
// (different normalized text and unigram Jaccard < 0.8). ValidationFailure.
void validate_corrective(const CorrectiveQA& qa, const FailureCase& c, std::span<const std::string> taxonomy,
                         const Vocabulary* vocab = nullptr);

// Up to 1 + retry_limit attempts; SkippedSample once they are exhausted.
CorrectiveQA request_corrective_qa(TeacherBackend& teacher, const TeacherClientConfig& cfg, const FailureCase& c,
                                   std::span<const std::string> taxonomy, const Vocabulary* vocab = nullptr);

// ---------------------------------------------------------------------------
// Rounds

struct BootstrapConfig {
  double eval_fraction = 0.2;
  double fail_fraction = 0.4;
  int rounds = 2;
  bool hold_out = false;  // keep the evaluation sample out of sft
  std::uint64_t seed = 0;
  std::size_t refine_steps = 300;
  double refine_lr = 2e-3;
  std::size_t max_answer_len = 48;
  std::string embedder = "builtin";  // builtin | external
  EmbedderClientConfig external_embedder;

  void validate() const;  // InvalidArgument
};

struct QaRef {
  std::size_t record = 0;  // index into the manifest
  std::size_t qa_index = 0;
  bool operator==(const QaRef&) const = default;
};

// Deterministic seeded-hash sample of ceil(fraction * n) QA pairs, in
// manifest order.
std::vector<QaRef> sample_eval_pairs(std::span<const ManifestRecord> records, double fraction, std::uint64_t seed);

struct SkippedCase {
  std::string record_id;
  std::size_t qa_index = 0;
  std::string reason;
};

struct RoundReport {
  int round = 0;
  std::size_t evaluated = 0;
  std::size_t selected = 0;
  double cutoff = 0;          // similarity of the last selected item
  double mean_s_before = 0;   // over the evaluation sample
  double mean_s_after = 0;    // same sample, refined bundle
  std::size_t synthesized = 0;
  std::vector<SkippedCase> skipped;
  double skip_rate = 0;
  double synth_loss_before = 0, synth_loss_after = 0;
  double synth_s_before = 0, synth_s_after = 0;
  std::vector<double> refine_loss_curve;
  std::string teacher_model;
  std::string bundle_fingerprint;

  std::string to_text() const;
};

struct RoundResult {
  std::vector<ManifestRecord> records;
  RoundReport report;
};

// Updates `bundle` in place with the refine stage; `records` is not modified.
RoundResult run_bootstrap_round(ModelBundle& bundle, std::span<const ManifestRecord> records,
                                const std::filesystem::path& data_root, const BootstrapConfig& cfg, int round_index,
                                TeacherBackend& teacher, const TeacherClientConfig& teacher_cfg);

}  // namespace pc4d
