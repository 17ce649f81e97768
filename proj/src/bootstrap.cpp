#include "pc4d/bootstrap.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "pc4d/rng.hpp"
#include "pc4d/textmetrics.hpp"

namespace pc4d {

namespace detail {
const std::map<std::string, std::string>& embedded_data();
}

// ---------------------------------------------------------------------------
// Data files and templates

const std::string& data_file(std::string_view name) {
  const auto& files = detail::embedded_data();
  const auto it = files.find(std::string(name));
  if (it == files.end()) fail(ErrorKind::kIo, "no shipped data file '" + std::string(name) + "'");
  return it->second;
}

namespace {

std::vector<std::string> content_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    out.push_back(line);
  }
  return out;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<std::string> load_taxonomy() {
  auto lines = content_lines(data_file("taxonomy.txt"));
  if (lines.size() != 12) fail(ErrorKind::kSchema, "taxonomy must list 12 categories, found " + std::to_string(lines.size()));
  return lines;
}

std::vector<std::pair<std::string, int>> load_lexicon() {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& line : content_lines(data_file("lexicon.txt"))) {
    const auto bar = line.rfind('|');
    if (bar == std::string::npos) fail(ErrorKind::kSchema, "lexicon line without '|': " + line);
    int k = 0;
    try {
      k = std::stoi(line.substr(bar + 1));
    } catch (const std::exception&) {
      fail(ErrorKind::kSchema, "lexicon line has a bad sentence index: " + line);
    }
    if (k < 1) fail(ErrorKind::kSchema, "lexicon sentence index must be >= 1: " + line);
    out.emplace_back(line.substr(0, bar), k);
  }
  if (out.empty()) fail(ErrorKind::kSchema, "lexicon has no question stems");
  return out;
}

std::string escape_delimiters(std::string_view text) {
  std::string s(text);
  for (const char* d : {"<<<", ">>>"}) {
    std::size_t pos;
    while ((pos = s.find(d)) != std::string::npos) s.insert(pos + 1, " ");
  }
  return s;
}

std::string render_template(std::string_view tmpl, std::span<const std::pair<std::string, std::string>> values) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    const std::size_t open = tmpl.find("{{", i);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(i));
      break;
    }
    const std::size_t close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) fail(ErrorKind::kInvalidArgument, "unterminated template placeholder");
    out.append(tmpl.substr(i, open - i));
    const std::string key(tmpl.substr(open + 2, close - open - 2));
    const auto it = std::find_if(values.begin(), values.end(), [&](const auto& kv) { return kv.first == key; });
    if (it == values.end()) fail(ErrorKind::kInvalidArgument, "no value for template placeholder '" + key + "'");
    out += escape_delimiters(it->second);
    i = close + 2;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding

std::vector<float> embed_text_default(std::string_view text) {
  std::vector<float> v(kEmbedDim, 0.0f);
  if (text.empty()) return v;
  std::string s = " ";
  for (char c : text) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  s += ' ';
  for (std::size_t i = 0; i + 3 <= s.size(); ++i) v[fnv1a64(std::string_view(s).substr(i, 3)) % kEmbedDim] += 1.0f;
  double n2 = 0;
  for (float x : v) n2 += double(x) * x;
  const double inv = 1.0 / std::sqrt(n2);
  for (float& x : v) x = static_cast<float>(x * inv);
  return v;
}

double semantic_similarity(std::string_view y, std::string_view y_hat, Embedder& embedder) {
  if (y.empty() || y_hat.empty()) return 0.0;
  const auto a = embedder.embed(y);
  const auto b = embedder.embed(y_hat);
  const double s = cosine(a, b);
  if (!std::isfinite(s)) fail(ErrorKind::kNonFinite, "similarity is not finite");
  return s;
}

// ---------------------------------------------------------------------------
// Selection

std::size_t failure_count(std::size_t n, double k) {
  if (!(k > 0 && k <= 1)) fail(ErrorKind::kInvalidArgument, "fraction must be in (0, 1]");
  const auto c = static_cast<std::size_t>(std::ceil(k * double(n) - 1e-9));
  return std::clamp<std::size_t>(c, n ? 1 : 0, n);
}

std::vector<FailureCase> select_failures(std::span<const ScoredPrediction> scored, double k) {
  if (scored.empty()) fail(ErrorKind::kEmptyInput, "no scored predictions to select from");
  const std::size_t count = failure_count(scored.size(), k);
  std::vector<std::size_t> idx(scored.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = scored[a];
    const auto& y = scored[b];
    if (x.similarity != y.similarity) return x.similarity < y.similarity;
    if (x.record_id != y.record_id) return x.record_id < y.record_id;
    return x.qa_index < y.qa_index;
  });
  std::vector<FailureCase> out;
  for (std::size_t r = 0; r < count; ++r) {
    FailureCase c;
    c.scored = scored[idx[r]];
    c.selected_rank = r + 1;
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompts

std::string build_caption_prompt(CaptionLevel level) {
  return data_file(level == CaptionLevel::kBrief ? "prompts/caption_brief.txt" : "prompts/caption_detailed.txt");
}

std::string build_qa_prompt(std::string_view detailed_caption) {
  const std::pair<std::string, std::string> v[] = {{"detailed_caption", std::string(detailed_caption)}};
  return render_template(data_file("prompts/qa_generation.txt"), v);
}

std::string build_diagnostic_prompt(const FailureCase& c, std::span<const std::string> taxonomy) {
  std::string categories;
  for (const auto& t : taxonomy) categories += "- " + t + "\n";
  if (!categories.empty()) categories.pop_back();
  std::string existing;
  for (const auto& q : c.existing_questions) existing += (existing.empty() ? "" : "\n") + q;
  const auto or_empty = [](const std::string& s) { return s.empty() ? std::string("(empty)") : s; };
  const std::pair<std::string, std::string> v[] = {
      {"detailed_caption", or_empty(c.detailed_caption)},
      {"question", or_empty(c.scored.question)},
      {"ground_truth", or_empty(c.scored.ground_truth)},
      {"model_output", or_empty(c.scored.prediction)},
      {"existing_questions", existing.empty() ? "(none)" : existing},
      {"categories", "\x01"},
  };
  // Category names are trusted and go in unescaped.
  std::string out = render_template(data_file("prompts/diagnostic.txt"), v);
  out.replace(out.find('\x01'), 1, categories);
  return out;
}

std::string build_judge_prompt(std::string_view ground_truth, std::string_view prediction) {
  const std::pair<std::string, std::string> v[] = {
      {"ground_truth", ground_truth.empty() ? "(empty)" : std::string(ground_truth)},
      {"prediction", prediction.empty() ? "(empty)" : std::string(prediction)}};
  return render_template(data_file("prompts/judge.txt"), v);
}

std::string build_aggregation_prompt(std::span<const std::string> frame_predictions, std::string_view task) {
  std::string frames;
  for (std::size_t i = 0; i < frame_predictions.size(); ++i)
    frames += (i ? "\n" : "") + std::string("Frame ") + std::to_string(i + 1) + ": " +
              (frame_predictions[i].empty() ? "(empty)" : frame_predictions[i]);
  const std::pair<std::string, std::string> v[] = {{"frame_predictions", frames.empty() ? "(none)" : frames},
                                                   {"task", std::string(task)}};
  return render_template(data_file("prompts/temporal_aggregation.txt"), v);
}

QaParseResult parse_qa_response(std::string_view text) {
  static const std::regex line_re(R"(^\s*\[([A-Za-z_ ]+)\]\s*Q:\s*(.*?)\s+A:\s*(.*?)\s*$)");
  QaParseResult res;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::smatch m;
    if (!std::regex_match(line, m, line_re)) {
      res.diagnostics.push_back("line " + std::to_string(n) + ": not of the form '[type] Q: ... A: ...'");
      continue;
    }
    std::string type = m[1].str();
    for (auto& ch : type) ch = ch == ' ' ? '_' : static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    const auto qt = parse_qa_type(type);
    if (!qt) {
      res.diagnostics.push_back("line " + std::to_string(n) + ": unknown question type '" + m[1].str() + "'");
      continue;
    }
    if (m[2].length() == 0 || m[3].length() == 0) {
      res.diagnostics.push_back("line " + std::to_string(n) + ": empty question or answer");
      continue;
    }
    res.pairs.push_back({*qt, m[2].str(), m[3].str(), QaOrigin::kSeed});
  }
  if (res.pairs.empty()) {
    std::string why = res.diagnostics.empty() ? "empty response" : res.diagnostics.front();
    fail(ErrorKind::kParseFailure, "no usable QA pair in response (" + why + ")");
  }
  return res;
}

// ---------------------------------------------------------------------------
// Teacher

std::string normalize_question(std::string_view q) {
  std::string out;
  for (const auto& w : metric_tokens(q)) out += (out.empty() ? "" : " ") + w;
  return out;
}

double unigram_jaccard(std::string_view a, std::string_view b) {
  const auto ta = metric_tokens(a), tb = metric_tokens(b);
  const std::set<std::string> sa(ta.begin(), ta.end()), sb(tb.begin(), tb.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& w : sa) inter += sb.count(w);
  return double(inter) / double(sa.size() + sb.size() - inter);
}

CorrectiveQA parse_corrective_response(std::string_view response) {
  const std::size_t open = response.find("```");
  if (open == std::string_view::npos) fail(ErrorKind::kParseFailure, "response has no fenced block");
  std::size_t body = response.find('\n', open);
  if (body == std::string_view::npos) fail(ErrorKind::kParseFailure, "fenced block is empty");
  ++body;
  const std::size_t close = response.find("```", body);
  if (close == std::string_view::npos) fail(ErrorKind::kParseFailure, "fenced block is not closed");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(response.substr(body, close - body));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParseFailure, std::string("fenced block is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kParseFailure, "fenced block is not a JSON object");
  CorrectiveQA qa;
  try {
    const auto& cats = j.at("error_categories");
    if (cats.is_string()) {
      qa.error_categories.push_back(cats.get<std::string>());
    } else {
      for (const auto& c : cats) qa.error_categories.push_back(c.get<std::string>());
    }
    qa.question = j.at("new_question").get<std::string>();
    qa.answer = j.at("new_answer").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParseFailure, std::string("missing or mistyped field: ") + e.what());
  }
  qa.response_hash = hex64(fnv1a64(response));
  return qa;
}

void validate_corrective(const CorrectiveQA& qa, const FailureCase& c, std::span<const std::string> taxonomy,
                         const Vocabulary* vocab) {
  if (qa.error_categories.empty()) fail(ErrorKind::kValidationFailure, "no error category given");
  for (const auto& cat : qa.error_categories)
    if (std::find(taxonomy.begin(), taxonomy.end(), cat) == taxonomy.end())
      fail(ErrorKind::kValidationFailure, "category '" + cat + "' is not in the taxonomy");
  if (normalize_question(qa.question).empty()) fail(ErrorKind::kValidationFailure, "new question is empty");
  if (normalize_question(qa.answer).empty()) fail(ErrorKind::kValidationFailure, "new answer is empty");
  if (normalize_question(qa.question) == normalize_question(c.scored.question))
    fail(ErrorKind::kValidationFailure, "new question repeats the original question");
  const double overlap = unigram_jaccard(qa.question, c.scored.question);
  if (overlap >= 0.8)
    fail(ErrorKind::kValidationFailure, "new question paraphrases the original (word overlap " + fmt(overlap) + ")");
  for (const auto& q : c.existing_questions)
    if (normalize_question(q) == normalize_question(qa.question))
      fail(ErrorKind::kValidationFailure, "new question repeats an existing question");
  if (vocab && (!vocab->covers(qa.question) || !vocab->covers(qa.answer)))
    fail(ErrorKind::kValidationFailure, "new pair uses words outside the decoder vocabulary");
}

CorrectiveQA request_corrective_qa(TeacherBackend& teacher, const TeacherClientConfig& cfg, const FailureCase& c,
                                   std::span<const std::string> taxonomy, const Vocabulary* vocab) {
  if (cfg.retry_limit < 0) fail(ErrorKind::kInvalidArgument, "retry_limit must be >= 0");
  const std::string prompt = build_diagnostic_prompt(c, taxonomy);
  std::string last;
  for (int attempt = 0; attempt <= cfg.retry_limit; ++attempt) {
    try {
      const std::string response = teacher.complete(prompt, c, attempt);
      CorrectiveQA qa = parse_corrective_response(response);
      validate_corrective(qa, c, taxonomy, vocab);
      qa.teacher_model = teacher.model_id();
      return qa;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kTransport && e.kind() != ErrorKind::kParseFailure &&
          e.kind() != ErrorKind::kValidationFailure)
        throw;
      last = e.what();
    }
  }
  fail(ErrorKind::kSkippedSample, c.scored.record_id + "#" + std::to_string(c.scored.qa_index) + " skipped after " +
                                      std::to_string(cfg.retry_limit + 1) + " attempts; last error: " + last);
}

namespace {

std::vector<std::string> sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    cur += text[i];
    const bool end = (text[i] == '.' || text[i] == '!' || text[i] == '?') && (i + 1 == text.size() || text[i + 1] == ' ');
    if (end) {
      const auto first = cur.find_first_not_of(' ');
      if (first != std::string::npos) out.push_back(cur.substr(first));
      cur.clear();
    }
  }
  const auto first = cur.find_first_not_of(' ');
  if (first != std::string::npos) out.push_back(cur.substr(first));
  return out;
}

}  // namespace

StubTeacher::StubTeacher() : stems_(load_lexicon()) {}

std::string StubTeacher::complete(const std::string&, const FailureCase& c, int) {
  const auto parts = sentences(c.detailed_caption);
  std::set<std::string> asked;
  for (const auto& q : c.existing_questions) asked.insert(normalize_question(q));
  const std::size_t start =
      mix64(fnv1a64(c.scored.record_id) ^ static_cast<std::uint64_t>(c.scored.qa_index)) % stems_.size();
  std::string question = c.scored.question, answer = c.scored.ground_truth;
  for (std::size_t k = 0; k < stems_.size(); ++k) {
    const auto& [stem, sentence] = stems_[(start + k) % stems_.size()];
    if (asked.count(normalize_question(stem)) || unigram_jaccard(stem, c.scored.question) >= 0.8) continue;
    question = stem;
    if (!parts.empty()) answer = parts[std::min<std::size_t>(std::max(sentence, 1), parts.size()) - 1];
    break;
  }
  nlohmann::ordered_json j;
  j["error_categories"] = {"temporal-order confusion"};
  j["new_question"] = question;
  j["new_answer"] = answer;
  return "The model output does not follow the order of events in the ground truth.\n```json\n" + j.dump() + "\n```\n";
}

std::unique_ptr<TeacherBackend> make_teacher(const TeacherClientConfig& cfg) {
  if (cfg.endpoint == "stub") return std::make_unique<StubTeacher>();
  return std::make_unique<HttpTeacher>(cfg);
}

// ---------------------------------------------------------------------------
// Rounds

void BootstrapConfig::validate() const {
  if (!(eval_fraction > 0 && eval_fraction <= 1)) fail(ErrorKind::kInvalidArgument, "eval_fraction must be in (0, 1]");
  if (!(fail_fraction > 0 && fail_fraction <= 1)) fail(ErrorKind::kInvalidArgument, "fail_fraction must be in (0, 1]");
  if (rounds < 1 || rounds > 2) fail(ErrorKind::kInvalidArgument, "rounds must be 1 or 2");
  if (embedder != "builtin" && embedder != "external")
    fail(ErrorKind::kInvalidArgument, "embedder must be 'builtin' or 'external'");
}

std::vector<QaRef> sample_eval_pairs(std::span<const ManifestRecord> records, double fraction, std::uint64_t seed) {
  struct Keyed {
    std::uint64_t key;
    QaRef ref;
  };
  std::vector<Keyed> all;
  for (std::size_t r = 0; r < records.size(); ++r)
    for (std::size_t q = 0; q < records[r].qa.size(); ++q)
      all.push_back({mix64(derive_seed(seed, records[r].id) ^ mix64(q)), {r, q}});
  if (all.empty()) return {};
  const std::size_t n = failure_count(all.size(), fraction);
  std::sort(all.begin(), all.end(), [](const Keyed& a, const Keyed& b) {
    if (a.key != b.key) return a.key < b.key;
    return std::pair(a.ref.record, a.ref.qa_index) < std::pair(b.ref.record, b.ref.qa_index);
  });
  std::vector<QaRef> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(all[i].ref);
  std::sort(out.begin(), out.end(),
            [](const QaRef& a, const QaRef& b) { return std::pair(a.record, a.qa_index) < std::pair(b.record, b.qa_index); });
  return out;
}

std::string RoundReport::to_text() const {
  std::ostringstream o;
  o << "round: " << round << "\n";
  o << "teacher: " << teacher_model << "\n";
  o << "evaluated: " << evaluated << "\n";
  o << "selected: " << selected << "\n";
  o << "cutoff: " << fmt(cutoff) << "\n";
  o << "mean_s_before: " << fmt(mean_s_before) << "\n";
  o << "mean_s_after: " << fmt(mean_s_after) << "\n";
  o << "synthesized: " << synthesized << "\n";
  o << "skipped: " << skipped.size() << "\n";
  o << "skip_rate: " << fmt(skip_rate) << "\n";
  o << "synth_loss_before: " << fmt(synth_loss_before) << "\n";
  o << "synth_loss_after: " << fmt(synth_loss_after) << "\n";
  o << "synth_s_before: " << fmt(synth_s_before) << "\n";
  o << "synth_s_after: " << fmt(synth_s_after) << "\n";
  o << "refine_steps: " << refine_loss_curve.size() << "\n";
  if (!refine_loss_curve.empty()) {
    o << "refine_loss_first: " << fmt(refine_loss_curve.front()) << "\n";
    o << "refine_loss_last: " << fmt(refine_loss_curve.back()) << "\n";
  }
  o << "bundle_fingerprint: " << bundle_fingerprint << "\n";
  for (const auto& s : skipped) o << "skip: " << s.record_id << " " << s.qa_index << " " << s.reason << "\n";
  return o.str();
}

namespace {

template <class F>
void parallel_indexed(std::size_t n, std::size_t workers, F&& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

}  // namespace

RoundResult run_bootstrap_round(ModelBundle& bundle, std::span<const ManifestRecord> records,
                                const std::filesystem::path& data_root, const BootstrapConfig& cfg, int round_index,
                                TeacherBackend& teacher, const TeacherClientConfig& teacher_cfg) {
  cfg.validate();
  const QaOrigin origin = bootstrap_origin(round_index);
  const auto taxonomy = load_taxonomy();
  RoundResult result;
  result.records.assign(records.begin(), records.end());
  auto& recs = result.records;
  RoundReport& rep = result.report;
  rep.round = round_index;
  rep.teacher_model = teacher.model_id();

  std::unique_ptr<Embedder> embedder;
  if (cfg.embedder == "external")
    embedder = std::make_unique<ExternalEmbedder>(cfg.external_embedder);
  else
    embedder = std::make_unique<BuiltinEmbedder>();

  std::map<std::size_t, TokenSequence> tokens;
  auto tokens_of = [&](std::size_t r) -> const TokenSequence& {
    auto it = tokens.find(r);
    if (it == tokens.end())
      it = tokens.emplace(r, encode_sequence(read_sequence(data_root / recs[r].file), bundle.encoder)).first;
    return it->second;
  };
  const GenerateOptions gen{cfg.max_answer_len};
  auto answer = [&](std::size_t r, const std::string& question, const std::map<std::size_t, Mat<float>>& prefixes) {
    if (!bundle.vocab.covers(question)) return std::string();
    return generate_from_prefix(bundle, prefixes.at(r), question, gen);
  };
  auto prefixes_for = [&](const std::vector<std::size_t>& rs) {
    std::map<std::size_t, Mat<float>> out;
    for (auto r : rs)
      if (!out.count(r)) out.emplace(r, point_prefix(bundle, tokens_of(r)));
    return out;
  };

  // 1-2: evaluate a seeded sample and score it.
  const auto evals = sample_eval_pairs(recs, cfg.eval_fraction, derive_seed(cfg.seed, "eval"));
  if (evals.empty()) fail(ErrorKind::kEmptyDataset, "manifest has no QA pairs to evaluate");
  std::vector<std::size_t> eval_records;
  for (const auto& e : evals) eval_records.push_back(e.record);
  auto prefixes = prefixes_for(eval_records);
  std::vector<ScoredPrediction> scored;
  for (const auto& e : evals) {
    const auto& qa = recs[e.record].qa[e.qa_index];
    ScoredPrediction s{recs[e.record].id, e.qa_index, qa.question, qa.answer, answer(e.record, qa.question, prefixes), 0};
    s.similarity = semantic_similarity(s.ground_truth, s.prediction, *embedder);
    scored.push_back(std::move(s));
  }
  rep.evaluated = scored.size();
  std::vector<double> s_before;
  for (const auto& s : scored) s_before.push_back(s.similarity);
  rep.mean_s_before = mean(s_before);

  // 3: failures and corrective pairs.
  auto failures = select_failures(scored, cfg.fail_fraction);
  rep.selected = failures.size();
  rep.cutoff = failures.back().scored.similarity;
  std::map<std::string, std::size_t> by_id;
  for (std::size_t r = 0; r < recs.size(); ++r) by_id[recs[r].id] = r;
  for (auto& f : failures) {
    const auto& rec = recs[by_id.at(f.scored.record_id)];
    f.detailed_caption = rec.captions.detailed;
    for (const auto& q : rec.qa) f.existing_questions.push_back(q.question);
  }
  // Cases on the same record run in rank order so each request sees the
  // questions accepted before it; records run concurrently.
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < failures.size(); ++i) groups[failures[i].scored.record_id].push_back(i);
  std::vector<const std::vector<std::size_t>*> group_list;
  for (const auto& [id, g] : groups) group_list.push_back(&g);
  std::vector<std::optional<CorrectiveQA>> answers(failures.size());
  std::vector<std::string> errors(failures.size());
  parallel_indexed(group_list.size(), teacher_cfg.concurrency, [&](std::size_t gi) {
    std::vector<std::string> accepted;
    for (std::size_t i : *group_list[gi]) {
      FailureCase& f = failures[i];
      f.existing_questions.insert(f.existing_questions.end(), accepted.begin(), accepted.end());
      try {
        answers[i] = request_corrective_qa(teacher, teacher_cfg, f, taxonomy, &bundle.vocab);
        accepted.push_back(answers[i]->question);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kSkippedSample) throw;
        errors[i] = e.what();
      }
    }
  });

  // 4: append in rank order, skipping duplicates within the round.
  TrainSet synth;
  std::map<std::size_t, std::size_t> synth_seq;
  std::vector<std::pair<std::size_t, std::size_t>> synth_refs;
  for (std::size_t i = 0; i < failures.size(); ++i) {
    const auto& f = failures[i];
    if (!answers[i]) {
      rep.skipped.push_back({f.scored.record_id, f.scored.qa_index, errors[i]});
      continue;
    }
    const std::size_t r = by_id.at(f.scored.record_id);
    auto& rec = recs[r];
    const bool dup = std::any_of(rec.qa.begin(), rec.qa.end(), [&](const QaPair& q) {
      return normalize_question(q.question) == normalize_question(answers[i]->question);
    });
    if (dup) {
      rep.skipped.push_back({f.scored.record_id, f.scored.qa_index, "duplicate of an existing question"});
      continue;
    }
    rec.qa.push_back({rec.qa[f.scored.qa_index].qtype, answers[i]->question, answers[i]->answer, origin});
    if (!synth_seq.count(r)) {
      synth_seq[r] = synth.tokens.size();
      synth.tokens.push_back(tokens_of(r));
    }
    synth.samples.push_back({synth_seq[r], answers[i]->question, answers[i]->answer});
    synth_refs.emplace_back(r, rec.qa.size() - 1);
  }
  rep.synthesized = synth.samples.size();
  rep.skip_rate = failures.empty() ? 0.0 : double(rep.skipped.size()) / double(failures.size());

  auto synth_similarity = [&]() {
    std::vector<std::size_t> rs;
    for (const auto& [r, q] : synth_refs) rs.push_back(r);
    const auto pre = prefixes_for(rs);
    std::vector<double> s;
    for (const auto& [r, q] : synth_refs)
      s.push_back(semantic_similarity(recs[r].qa[q].answer, answer(r, recs[r].qa[q].question, pre), *embedder));
    return mean(s);
  };

  // 5: refine on the new samples only.
  if (rep.synthesized > 0) {
    rep.synth_loss_before = mean(sample_losses(bundle, synth));
    rep.synth_s_before = synth_similarity();
    auto tc = stage_config(Stage::kRefine, cfg.refine_steps, cfg.refine_lr,
                           derive_seed(cfg.seed, "round" + std::to_string(round_index)));
    tc.batch_size = std::min<std::size_t>(4, synth.samples.size());
    rep.refine_loss_curve = train_stage(bundle, synth, tc).loss_curve;
    rep.synth_loss_after = mean(sample_losses(bundle, synth));
    rep.synth_s_after = synth_similarity();
  }

  // 6: re-score the evaluation sample with the refined bundle.
  prefixes = prefixes_for(eval_records);
  std::vector<double> s_after;
  for (const auto& e : evals) {
    const auto& qa = recs[e.record].qa[e.qa_index];
    s_after.push_back(semantic_similarity(qa.answer, answer(e.record, qa.question, prefixes), *embedder));
  }
  rep.mean_s_after = mean(s_after);
  rep.bundle_fingerprint = bundle.fingerprint();
  return result;
}

}  // namespace pc4d
