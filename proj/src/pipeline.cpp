#include "pc4d/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>
#include <omp.h>

#include "pc4d/bytes.hpp"
#include "pc4d/rng.hpp"
#include "pc4d/textmetrics.hpp"

namespace pc4d {

using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config

ModelDims PipelineConfig::demo_dims() {
  ModelDims d;
  d.groups = 8;
  d.neighbors = 16;
  d.width = 32;
  d.mamba = {32, 64, 8, 2};
  d.decoder.width = 64;
  return d;
}

std::string PipelineConfig::to_json() const {
  ojson j;
  j["seed"] = seed;
  j["deterministic"] = deterministic;
  j["corpus"] = {{"assets", corpus.assets},
                 {"frames", corpus.frames},
                 {"points", corpus.points},
                 {"source_frames", corpus.source_frames},
                 {"mode", corpus.mode == SampleMode::kPoisson ? "poisson" : "uniform"}};
  j["model"] = {{"groups", dims.groups},
                {"neighbors", dims.neighbors},
                {"width", dims.width},
                {"mamba", {{"E", dims.mamba.E}, {"n_s", dims.mamba.n_s}, {"K", dims.mamba.K}}},
                {"decoder",
                 {{"width", dims.decoder.width},
                  {"heads", dims.decoder.heads},
                  {"layers", dims.decoder.layers},
                  {"ff_mult", dims.decoder.ff_mult},
                  {"context", dims.decoder.context}}}};
  j["train"] = {{"align_steps", align.steps},
                {"align_lr", align.learning_rate},
                {"sft_steps", sft.steps},
                {"sft_lr", sft.learning_rate},
                {"batch_size", batch_size}};
  j["bootstrap"] = {{"eval_fraction", bootstrap.eval_fraction},
                    {"fail_fraction", bootstrap.fail_fraction},
                    {"rounds", bootstrap.rounds},
                    {"hold_out", bootstrap.hold_out},
                    {"refine_steps", bootstrap.refine_steps},
                    {"refine_lr", bootstrap.refine_lr},
                    {"max_answer_len", bootstrap.max_answer_len},
                    {"embedder", bootstrap.embedder},
                    {"external_embedder",
                     {{"endpoint", bootstrap.external_embedder.endpoint},
                      {"model", bootstrap.external_embedder.model},
                      {"auth_env", bootstrap.external_embedder.auth_env},
                      {"timeout_s", bootstrap.external_embedder.timeout_s}}}};
  j["teacher"] = {{"endpoint", teacher.endpoint},   {"model", teacher.model},
                  {"temperature", teacher.temperature}, {"max_tokens", teacher.max_tokens},
                  {"retry_limit", teacher.retry_limit}, {"timeout_s", teacher.timeout_s},
                  {"auth_env", teacher.auth_env},   {"concurrency", teacher.concurrency}};
  return j.dump(2);
}

namespace {

template <class T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kSchema, std::string("config field '") + key + "': " + e.what());
  }
}

const nlohmann::json& section(const nlohmann::json& j, const char* key) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(key)) return empty;
  if (!j[key].is_object()) fail(ErrorKind::kSchema, std::string("config section '") + key + "' must be an object");
  return j[key];
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const auto& [k, v] : j.items())
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) == allowed.end())
      fail(ErrorKind::kSchema, "unknown config key '" + where + k + "'");
}

}  // namespace

PipelineConfig PipelineConfig::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kSchema, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kSchema, "config must be a JSON object");
  check_keys(j, {"seed", "deterministic", "out_dir", "corpus", "model", "train", "bootstrap", "teacher"}, "");
  PipelineConfig c;
  take(j, "seed", c.seed);
  take(j, "deterministic", c.deterministic);
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();

  const auto& co = section(j, "corpus");
  check_keys(co, {"assets", "frames", "points", "source_frames", "mode"}, "corpus.");
  take(co, "assets", c.corpus.assets);
  take(co, "frames", c.corpus.frames);
  take(co, "points", c.corpus.points);
  take(co, "source_frames", c.corpus.source_frames);
  if (co.contains("mode")) c.corpus.mode = parse_sample_mode(co["mode"].get<std::string>());

  const auto& m = section(j, "model");
  check_keys(m, {"groups", "neighbors", "width", "mamba", "decoder"}, "model.");
  take(m, "groups", c.dims.groups);
  take(m, "neighbors", c.dims.neighbors);
  take(m, "width", c.dims.width);
  const auto& mm = section(m, "mamba");
  check_keys(mm, {"E", "n_s", "K"}, "model.mamba.");
  take(mm, "E", c.dims.mamba.E);
  take(mm, "n_s", c.dims.mamba.n_s);
  take(mm, "K", c.dims.mamba.K);
  c.dims.mamba.c = c.dims.width;
  const auto& md = section(m, "decoder");
  check_keys(md, {"width", "heads", "layers", "ff_mult", "context"}, "model.decoder.");
  take(md, "width", c.dims.decoder.width);
  take(md, "heads", c.dims.decoder.heads);
  take(md, "layers", c.dims.decoder.layers);
  take(md, "ff_mult", c.dims.decoder.ff_mult);
  take(md, "context", c.dims.decoder.context);

  const auto& t = section(j, "train");
  check_keys(t, {"align_steps", "align_lr", "sft_steps", "sft_lr", "batch_size"}, "train.");
  take(t, "align_steps", c.align.steps);
  take(t, "align_lr", c.align.learning_rate);
  take(t, "sft_steps", c.sft.steps);
  take(t, "sft_lr", c.sft.learning_rate);
  take(t, "batch_size", c.batch_size);

  const auto& b = section(j, "bootstrap");
  check_keys(b, {"eval_fraction", "fail_fraction", "rounds", "hold_out", "refine_steps", "refine_lr", "max_answer_len",
                 "embedder", "external_embedder"},
             "bootstrap.");
  take(b, "eval_fraction", c.bootstrap.eval_fraction);
  take(b, "fail_fraction", c.bootstrap.fail_fraction);
  take(b, "rounds", c.bootstrap.rounds);
  take(b, "hold_out", c.bootstrap.hold_out);
  take(b, "refine_steps", c.bootstrap.refine_steps);
  take(b, "refine_lr", c.bootstrap.refine_lr);
  take(b, "max_answer_len", c.bootstrap.max_answer_len);
  take(b, "embedder", c.bootstrap.embedder);
  const auto& ee = section(b, "external_embedder");
  check_keys(ee, {"endpoint", "model", "auth_env", "timeout_s"}, "bootstrap.external_embedder.");
  take(ee, "endpoint", c.bootstrap.external_embedder.endpoint);
  take(ee, "model", c.bootstrap.external_embedder.model);
  take(ee, "auth_env", c.bootstrap.external_embedder.auth_env);
  take(ee, "timeout_s", c.bootstrap.external_embedder.timeout_s);

  const auto& te = section(j, "teacher");
  check_keys(te, {"endpoint", "model", "temperature", "max_tokens", "retry_limit", "timeout_s", "auth_env", "concurrency"},
             "teacher.");
  take(te, "endpoint", c.teacher.endpoint);
  take(te, "model", c.teacher.model);
  take(te, "temperature", c.teacher.temperature);
  take(te, "max_tokens", c.teacher.max_tokens);
  take(te, "retry_limit", c.teacher.retry_limit);
  take(te, "timeout_s", c.teacher.timeout_s);
  take(te, "auth_env", c.teacher.auth_env);
  take(te, "concurrency", c.teacher.concurrency);
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return from_json(std::string(bytes.begin(), bytes.end()));
}

std::string PipelineConfig::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json())));
  return buf;
}

void PipelineConfig::validate() const {
  if (corpus.assets == 0) fail(ErrorKind::kInvalidArgument, "corpus.assets must be > 0");
  if (corpus.frames == 0 || corpus.points == 0) fail(ErrorKind::kInvalidArgument, "corpus frames and points must be > 0");
  if (dims.mamba.c != dims.width) fail(ErrorKind::kInvalidArgument, "mamba width must equal the encoder width");
  if (dims.decoder.heads == 0 || dims.decoder.width % dims.decoder.heads != 0)
    fail(ErrorKind::kInvalidArgument, "decoder width must be divisible by the head count");
  if (batch_size == 0) fail(ErrorKind::kInvalidArgument, "batch_size must be > 0");
  if (teacher.concurrency == 0) fail(ErrorKind::kInvalidArgument, "teacher.concurrency must be > 0");
  bootstrap.validate();
}

// ---------------------------------------------------------------------------
// Predictions and metrics

std::string prediction_line(const Prediction& p) {
  ojson j;
  j["id"] = p.id;
  j["qa_index"] = p.qa_index;
  j["prediction"] = p.prediction;
  return j.dump();
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open predictions file " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("qa_index").get<std::size_t>(),
                     j.at("prediction").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kSchema, "predictions line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_predictions(std::span<const Prediction> preds, const std::filesystem::path& path) {
  std::string text;
  for (const auto& p : preds) text += prediction_line(p) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<Prediction> predict_qa(const ModelBundle& bundle, std::span<const ManifestRecord> records,
                                   const std::filesystem::path& data_root, std::size_t max_len) {
  std::vector<Prediction> out;
  for (const auto& r : records) {
    if (r.qa.empty()) continue;
    const auto prefix = point_prefix(bundle, encode_sequence(read_sequence(data_root / r.file), bundle.encoder));
    for (std::size_t q = 0; q < r.qa.size(); ++q) {
      std::string pred;
      if (bundle.vocab.covers(r.qa[q].question))
        pred = generate_from_prefix(bundle, prefix, r.qa[q].question, {max_len});
      out.push_back({r.id, q, pred});
    }
  }
  return out;
}

std::string MetricTable::to_text() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-24s %6s %9s %9s %12s\n", "category", "n", "bleu1", "rouge_l", "meteor_lite");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-24s %6zu %9.4f %9.4f %12.4f\n", r.label.c_str(), r.n, r.bleu1, r.rouge_l,
                  r.meteor_lite);
    out += buf;
  }
  return out;
}

MetricTable evaluate_predictions(std::span<const ManifestRecord> records, std::span<const Prediction> preds) {
  std::map<std::string, const ManifestRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  constexpr QaType kTypes[] = {QaType::kCounting, QaType::kTemporalRelationship, QaType::kAction,
                               QaType::kSpatialRelationship, QaType::kAppearance};
  MetricTable t;
  for (QaType q : kTypes) t.rows.push_back({to_string(q)});
  t.rows.push_back({"overall"});
  for (const auto& p : preds) {
    const auto it = by_id.find(p.id);
    if (it == by_id.end() || p.qa_index >= it->second->qa.size())
      fail(ErrorKind::kSchema, "prediction for unknown pair " + p.id + "#" + std::to_string(p.qa_index));
    const auto& qa = it->second->qa[p.qa_index];
    const auto s = score_pair(p.prediction, qa.answer);
    for (MetricRow* row : {&t.rows[static_cast<std::size_t>(qa.qtype)], &t.rows.back()}) {
      ++row->n;
      row->bleu1 += s.bleu1;
      row->rouge_l += s.rouge_l;
      row->meteor_lite += s.meteor;
    }
  }
  for (auto& r : t.rows)
    if (r.n) {
      r.bleu1 /= double(r.n);
      r.rouge_l /= double(r.n);
      r.meteor_lite /= double(r.n);
    }
  return t;
}

// ---------------------------------------------------------------------------
// Demo

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    std::string what = e.what();
    const auto colon = what.find(": ");
    if (colon != std::string::npos) what = what.substr(colon + 2);
    fail(e.kind(), std::string("stage '") + name + "': " + what);
  } catch (const std::exception& e) {
    fail(ErrorKind::kIo, std::string("stage '") + name + "': " + e.what());
  }
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string curve_text(const char* stage_name, const std::vector<double>& curve) {
  std::string out;
  for (std::size_t i = 0; i < curve.size(); ++i)
    out += std::string(stage_name) + "\t" + std::to_string(i + 1) + "\t" + fmt6(curve[i]) + "\n";
  return out;
}

}  // namespace

std::vector<std::filesystem::path> demo_artifacts(const std::filesystem::path& out_dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::exists(out_dir)) return out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(out_dir))
    if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), out_dir));
  std::sort(out.begin(), out.end());
  return out;
}

DemoSummary run_demo(const PipelineConfig& cfg) {
  stage("config", [&] { cfg.validate(); });
  const auto& out = cfg.out_dir;
  const auto data = out / "data";
  const std::string fp = cfg.fingerprint();
  const std::string header = "config_fingerprint: " + fp + "\n";
  DemoSummary summary;
  auto boot = cfg.bootstrap;
  boot.seed = cfg.seed;
  if (cfg.deterministic) omp_set_dynamic(0);

  std::vector<ManifestRecord> records = stage("corpus", [&] {
    std::filesystem::create_directories(out);
    write_text(out / "config.json", cfg.to_json() + "\n");
    auto co = cfg.corpus;
    co.seed = derive_seed(cfg.seed, "corpus");
    auto recs = build_synthetic_corpus(co, data);
    write_manifest(recs, data / "manifest.jsonl");
    return recs;
  });

  ModelBundle bundle = stage("init", [&] {
    std::vector<std::string> extra;
    for (const auto& [q, k] : load_lexicon()) extra.push_back(q);
    return init_bundle(cfg.dims, Vocabulary::build(corpus_texts(records, extra)), derive_seed(cfg.seed, "init"));
  });

  std::string train_log = header;
  auto run_stage = [&](Stage s, const StageBudget& budget, std::span<const ManifestRecord> recs) {
    auto set = make_train_set(bundle, recs, data, stage_selection(s));
    auto tc = stage_config(s, budget.steps, budget.learning_rate, cfg.seed);
    tc.batch_size = cfg.batch_size;
    auto res = train_stage(bundle, set, tc);
    train_log += curve_text(to_string(s).c_str(), res.loss_curve);
    return res;
  };

  std::vector<ManifestRecord> sft_records = records;
  if (cfg.bootstrap.hold_out) {
    const auto held = sample_eval_pairs(records, boot.eval_fraction, derive_seed(boot.seed, "eval"));
    for (auto it = held.rbegin(); it != held.rend(); ++it)
      sft_records[it->record].qa.erase(sft_records[it->record].qa.begin() + static_cast<std::ptrdiff_t>(it->qa_index));
  }

  stage("align", [&] { run_stage(Stage::kAlign, cfg.align, records); });
  stage("sft", [&] {
    const auto res = run_stage(Stage::kSft, cfg.sft, sft_records);
    summary.sft_loss_first = res.loss_curve.front();
    summary.sft_loss_last = res.loss_curve.back();
    save_bundle(bundle, out / "bundle_sft.pcb");
  });

  stage("captions", [&] {
    std::string text = header;
    for (const auto& r : records) {
      const auto prefix = point_prefix(bundle, encode_sequence(read_sequence(data / r.file), bundle.encoder));
      for (const auto& [prompt, want] : {std::pair{kBriefPrompt, r.captions.brief}, {kDetailedPrompt, r.captions.detailed}}) {
        const auto got = generate_from_prefix(bundle, prefix, prompt, {80});
        ++summary.captions;
        summary.captions_verbatim += got == want;
        text += r.id + "\t" + (std::string(prompt) == kBriefPrompt ? "brief" : "detailed") + "\t" + got + "\n";
      }
    }
    write_text(out / "captions_sft.tsv", text);
  });

  auto teacher = stage("teacher", [&] { return make_teacher(cfg.teacher); });
  for (int round = 1; round <= cfg.bootstrap.rounds; ++round) {
    const std::string name = "bootstrap_round" + std::to_string(round);
    stage(name.c_str(), [&] {
      auto res = run_bootstrap_round(bundle, records, data, boot, round, *teacher, cfg.teacher);
      records = std::move(res.records);
      train_log += curve_text(("refine" + std::to_string(round)).c_str(), res.report.refine_loss_curve);
      write_manifest(records, out / ("manifest_round" + std::to_string(round) + ".jsonl"));
      write_text(out / ("round" + std::to_string(round) + ".txt"), header + res.report.to_text());
      summary.rounds.push_back(std::move(res.report));
    });
  }
  write_text(out / "train_log.tsv", train_log);

  stage("evaluate", [&] {
    std::vector<ManifestRecord> seed_only = records;
    for (auto& r : seed_only)
      r.qa.erase(std::remove_if(r.qa.begin(), r.qa.end(), [](const QaPair& q) { return q.origin != QaOrigin::kSeed; }),
                 r.qa.end());
    const auto preds = predict_qa(bundle, seed_only, data, cfg.bootstrap.max_answer_len);
    write_predictions(preds, out / "predictions.jsonl");
    summary.metrics = evaluate_predictions(seed_only, preds);
    std::string text = header + "bundle_fingerprint: " + bundle.fingerprint() + "\n";
    text += "sft_loss_first: " + fmt6(summary.sft_loss_first) + "\n";
    text += "sft_loss_last: " + fmt6(summary.sft_loss_last) + "\n";
    text += "caption_verbatim: " + std::to_string(summary.captions_verbatim) + "/" + std::to_string(summary.captions) + "\n";
    text += "\n";
    text += summary.metrics.to_text();
    write_text(out / "metrics.txt", text);
    save_bundle(bundle, out / "bundle.pcb");
  });
  return summary;
}

}  // namespace pc4d
