// pc4d: command-line front end for the 4D point cloud pipeline.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>
#include <omp.h>

#include "pc4d/bimamba.hpp"
#include "pc4d/bootstrap.hpp"
#include "pc4d/bytes.hpp"
#include "pc4d/corpus.hpp"
#include "pc4d/encoder.hpp"
#include "pc4d/lm.hpp"
#include "pc4d/mesh.hpp"
#include "pc4d/pipeline.hpp"
#include "pc4d/rng.hpp"
#include "pc4d/sampler.hpp"
#include "pc4d/seqstore.hpp"
#include "pc4d/textmetrics.hpp"

namespace fs = std::filesystem;
using namespace pc4d;
using ojson = nlohmann::ordered_json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;

  PipelineConfig pipeline() const {
    PipelineConfig c = config.empty() ? PipelineConfig{} : PipelineConfig::load(config);
    if (seed) c.seed = *seed;
    if (deterministic) c.deterministic = true;
    c.bootstrap.seed = c.seed;
    if (c.deterministic) omp_set_dynamic(0);
    return c;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------

struct IngestArgs {
  std::string input, format = "m4d", report, out;
  int min_frames = 16, max_frames = 200;
};

int run_ingest(const IngestArgs& a) {
  auto anim = load_mesh_animation(a.input, parse_animation_format(a.format));
  anim = clip_frame_range(anim, a.min_frames, a.max_frames);
  FilterConfig fc;
  fc.min_frames = a.min_frames;
  fc.max_frames = a.max_frames;
  const auto rep = validate_animation(anim, fc);
  ojson j;
  j["asset_id"] = anim.asset_id;
  j["frames"] = anim.frame_count();
  j["vertices"] = anim.vertex_count();
  j["faces"] = anim.faces.size();
  j["topology_ok"] = rep.topology_ok;
  j["frame_count_ok"] = rep.frame_count_ok;
  j["degenerate_triangles"] = rep.degenerate_triangles;
  j["motion_score"] = rep.motion_score;
  j["max_transition"] = rep.max_transition;
  j["accepted"] = rep.accepted;
  j["reasons"] = rep.reasons;
  const std::string text = j.dump(2) + "\n";
  if (!a.report.empty())
    write_text(a.report, text);
  else
    std::cout << text;
  if (!a.out.empty()) save_m4d(anim, a.out);
  return rep.accepted ? 0 : 3;
}

struct SampleArgs {
  std::string input, out, mode = "uniform";
  int frames = 16;
  std::size_t points = 8192;
  std::optional<std::uint64_t> seed;
};

int run_sample(const SampleArgs& a, const Globals& g) {
  const auto anim = load_mesh_animation(a.input, AnimationFormat::kM4d);
  const auto idx = select_frames_equidistant(static_cast<int>(anim.frame_count()), a.frames);
  SequenceOptions so;
  so.points = a.points;
  so.mode = parse_sample_mode(a.mode);
  so.seed = a.seed ? *a.seed : g.seed.value_or(0);
  const auto seq = build_sequence(anim, idx, so);
  write_sequence(seq, a.out);
  std::printf("wrote %s: T=%zu N=%zu%s\n", a.out.c_str(), seq.T, seq.N,
              seq.poisson_underfilled ? " (poisson top-up used)" : "");
  return 0;
}

int run_inspect(const std::string& file, bool stats) {
  const auto h = read_sequence_header(file);
  std::printf("file: %s\nasset_id: %s\nversion: %u\nT: %u\nN: %u\nC: %u\n", file.c_str(), h.asset_id.c_str(), h.version,
              h.T, h.N, h.C);
  std::printf("norm_center: %.6f %.6f %.6f\nnorm_scale: %.6f\n", h.norm_center[0], h.norm_center[1], h.norm_center[2],
              h.norm_scale);
  if (!stats) return 0;
  const auto seq = read_sequence(file);
  static const char* names[] = {"x", "y", "z", "r", "g", "b"};
  std::printf("%-4s %12s %12s %12s\n", "ch", "min", "max", "mean");
  for (std::size_t c = 0; c < PointCloudSequence::kChannels; ++c) {
    double lo = INFINITY, hi = -INFINITY, sum = 0;
    for (std::size_t t = 0; t < seq.T; ++t)
      for (std::size_t i = 0; i < seq.N; ++i) {
        const double v = seq.point(t, i)[c];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        sum += v;
      }
    std::printf("%-4s %12.6f %12.6f %12.6f\n", names[c], lo, hi, sum / double(seq.T * seq.N));
  }
  std::printf("transition  mean_displacement\n");
  for (std::size_t t = 1; t < seq.T; ++t) {
    double d = 0;
    for (std::size_t i = 0; i < seq.N; ++i) {
      const float* a = seq.point(t - 1, i);
      const float* b = seq.point(t, i);
      d += std::sqrt(double(b[0] - a[0]) * (b[0] - a[0]) + double(b[1] - a[1]) * (b[1] - a[1]) +
                     double(b[2] - a[2]) * (b[2] - a[2]));
    }
    std::printf("%2zu->%-2zu     %.6f\n", t - 1, t, d / double(seq.N));
  }
  return 0;
}

struct EncodeArgs {
  std::string in, params, out;
  bool init = false;
};

int run_encode(const EncodeArgs& a, const Globals& g) {
  if (a.init) {
    const auto cfg = g.pipeline();
    save_encoder(init_encoder(cfg.dims.groups, cfg.dims.neighbors, cfg.dims.width, derive_seed(cfg.seed, "encoder")),
                 a.params);
  }
  const auto params = load_encoder(a.params);
  const auto tokens = encode_sequence(read_sequence(a.in), params);
  save_tokens(tokens, a.out);
  std::printf("wrote %s: T=%zu G=%zu c=%zu (%zu tokens)\n", a.out.c_str(), tokens.T, tokens.G, tokens.c, tokens.length());
  return 0;
}

struct GradcheckArgs {
  std::string config;
  double eps = 1e-5;
  int dtype = 64;
  double tol = 1e-4;
};

int run_gradcheck(const GradcheckArgs& a, const Globals& g) {
  if (a.dtype != 64) fail(ErrorKind::kInvalidArgument, "gradcheck runs in 64-bit only (--dtype 64)");
  GradcheckConfig cfg;
  cfg.seed = g.seed.value_or(0);
  if (!a.config.empty()) {
    const auto bytes = read_file(a.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
      cfg.L = j.value("L", cfg.L);
      cfg.c = j.value("c", cfg.c);
      cfg.E = j.value("E", cfg.E);
      cfg.n_s = j.value("n_s", cfg.n_s);
      cfg.K = j.value("K", cfg.K);
      cfg.seed = j.value("seed", cfg.seed);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kSchema, std::string("gradcheck config: ") + e.what());
    }
  }
  cfg.eps = a.eps;
  const auto rep = gradcheck_stack(cfg);
  std::printf("L=%zu c=%zu E=%zu n_s=%zu K=%zu eps=%g\n", cfg.L, cfg.c, cfg.E, cfg.n_s, cfg.K, cfg.eps);
  std::printf("%-28s %6s %14s %14s\n", "tensor", "count", "max_rel_err", "max_abs_grad");
  for (const auto& e : rep.entries)
    std::printf("%-28s %6zu %14.3e %14.3e\n", e.name.c_str(), e.count, e.max_rel_error, e.max_abs_grad);
  const bool ok = rep.max_rel_error < a.tol;
  std::printf("checked %zu entries, max relative error %.3e: %s\n", rep.checked, rep.max_rel_error, ok ? "PASS" : "FAIL");
  return ok ? 0 : 3;
}

struct TrainArgs {
  std::string stage, manifest, bundle, out;
  bool init = false;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
};

int run_train(const TrainArgs& a, const Globals& g) {
  const auto cfg = g.pipeline();
  const Stage s = parse_stage(a.stage);
  const fs::path manifest = a.manifest;
  const fs::path root = manifest.parent_path();
  const auto records = read_manifest(manifest);
  ModelBundle bundle;
  if (a.init) {
    std::vector<std::string> extra;
    for (const auto& [q, k] : load_lexicon()) extra.push_back(q);
    bundle = init_bundle(cfg.dims, Vocabulary::build(corpus_texts(records, extra)), derive_seed(cfg.seed, "init"));
  } else {
    bundle = load_bundle(a.bundle);
  }
  const StageBudget budget = s == Stage::kAlign ? cfg.align
                             : s == Stage::kSft ? cfg.sft
                                                : StageBudget{cfg.bootstrap.refine_steps, cfg.bootstrap.refine_lr};
  auto tc = stage_config(s, a.steps.value_or(budget.steps), a.lr.value_or(budget.learning_rate), cfg.seed);
  tc.batch_size = cfg.batch_size;
  const auto set = make_train_set(bundle, records, root, stage_selection(s));
  const auto res = train_stage(bundle, set, tc);
  save_bundle(bundle, a.out);
  std::printf("stage %s: %zu samples, %zu steps, loss %.6f -> %.6f\nwrote %s (fingerprint %s)\n", to_string(s).c_str(),
              set.samples.size(), res.loss_curve.size(), res.loss_curve.empty() ? 0.0 : res.loss_curve.front(),
              res.loss_curve.empty() ? 0.0 : res.loss_curve.back(), a.out.c_str(), bundle.fingerprint().c_str());
  return 0;
}

struct InferArgs {
  std::string bundle, seq, prompt;
  std::size_t max_len = 48;
};

int run_infer(const InferArgs& a) {
  const auto bundle = load_bundle(a.bundle);
  std::cout << generate(bundle, read_sequence(a.seq), a.prompt, {a.max_len}) << "\n";
  return 0;
}

struct BootstrapArgs {
  std::string bundle, manifest, out_bundle, report_dir, teacher;
  std::optional<int> rounds;
  std::optional<double> eval_frac, fail_frac;
};

int run_bootstrap(const BootstrapArgs& a, const Globals& g) {
  auto cfg = g.pipeline();
  if (a.rounds) cfg.bootstrap.rounds = *a.rounds;
  if (a.eval_frac) cfg.bootstrap.eval_fraction = *a.eval_frac;
  if (a.fail_frac) cfg.bootstrap.fail_fraction = *a.fail_frac;
  if (!a.teacher.empty()) cfg.teacher.endpoint = a.teacher;
  cfg.bootstrap.validate();
  const fs::path manifest = a.manifest;
  const fs::path report_dir = a.report_dir.empty() ? manifest.parent_path() : fs::path(a.report_dir);
  auto records = read_manifest(manifest);
  auto bundle = load_bundle(a.bundle);
  auto teacher = make_teacher(cfg.teacher);
  for (int r = 1; r <= cfg.bootstrap.rounds; ++r) {
    auto res = run_bootstrap_round(bundle, records, manifest.parent_path(), cfg.bootstrap, r, *teacher, cfg.teacher);
    records = std::move(res.records);
    write_manifest(records, manifest);
    const auto report = "config_fingerprint: " + cfg.fingerprint() + "\n" + res.report.to_text();
    write_text(report_dir / ("round" + std::to_string(r) + ".txt"), report);
    std::cout << report << "\n";
  }
  save_bundle(bundle, a.out_bundle.empty() ? a.bundle : a.out_bundle);
  return 0;
}

int run_eval(const std::string& manifest, const std::string& predictions, const std::string& out) {
  const auto records = read_manifest(manifest);
  const auto preds = read_predictions(predictions);
  const auto table = evaluate_predictions(records, preds);
  const std::string text = table.to_text();
  if (out.empty())
    std::cout << text;
  else
    write_text(out, text);
  return 0;
}

int run_demo_cmd(const std::string& out, const Globals& g) {
  auto cfg = g.pipeline();
  cfg.deterministic = true;
  omp_set_dynamic(0);
  if (!out.empty()) cfg.out_dir = out;
  const auto summary = run_demo(cfg);
  std::printf("demo written to %s (config %s)\n", cfg.out_dir.string().c_str(), cfg.fingerprint().c_str());
  std::printf("sft loss %.4f -> %.4f, captions verbatim %zu/%zu\n", summary.sft_loss_first, summary.sft_loss_last,
              summary.captions_verbatim, summary.captions);
  for (const auto& r : summary.rounds)
    std::printf("round %d: evaluated %zu, selected %zu, synthesized %zu, skipped %zu, synth loss %.4f -> %.4f\n",
                r.round, r.evaluated, r.selected, r.synthesized, r.skipped.size(), r.synth_loss_before,
                r.synth_loss_after);
  std::cout << "\n" << summary.metrics.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pc4d: 4D point cloud captioning and QA toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Pipeline config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Global seed");
  app.add_flag("--deterministic", g.deterministic, "Pin OpenMP thread scheduling (the demo always does)");

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Load, clip and validate a mesh animation");
  c_ingest->add_option("--input", ingest.input, "OBJ-sequence directory or .m4d file")->required();
  c_ingest->add_option("--format", ingest.format, "obj-seq | m4d")->check(CLI::IsMember({"obj-seq", "m4d"}));
  c_ingest->add_option("--min-frames", ingest.min_frames);
  c_ingest->add_option("--max-frames", ingest.max_frames);
  c_ingest->add_option("--report", ingest.report, "Write the JSON report here instead of stdout");
  c_ingest->add_option("--out", ingest.out, "Save the clipped animation as .m4d");

  SampleArgs sample;
  auto* c_sample = app.add_subcommand("sample", "Sample a .m4d animation into a point cloud sequence");
  c_sample->add_option("--input", sample.input)->required()->check(CLI::ExistingFile);
  c_sample->add_option("--frames", sample.frames, "T");
  c_sample->add_option("--points", sample.points, "N");
  c_sample->add_option("--mode", sample.mode)->check(CLI::IsMember({"uniform", "poisson"}));
  c_sample->add_option("--seed", sample.seed);
  c_sample->add_option("--out", sample.out, ".pcs output")->required();

  std::string inspect_file;
  bool inspect_stats = false;
  auto* c_inspect = app.add_subcommand("inspect", "Print a .pcs header and optional statistics");
  c_inspect->add_option("--file", inspect_file)->required()->check(CLI::ExistingFile);
  c_inspect->add_flag("--stats", inspect_stats);

  EncodeArgs encode;
  auto* c_encode = app.add_subcommand("encode", "Encode a .pcs sequence into frame tokens");
  c_encode->add_option("--in", encode.in)->required()->check(CLI::ExistingFile);
  c_encode->add_option("--params", encode.params, "Encoder weights file")->required();
  c_encode->add_option("--out", encode.out)->required();
  c_encode->add_flag("--init", encode.init, "Write freshly initialized weights to --params first");

  GradcheckArgs gc;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of the Bi-Mamba stack");
  c_grad->add_option("--config", gc.config, "JSON with L, c, E, n_s, K, seed")->check(CLI::ExistingFile);
  c_grad->add_option("--eps", gc.eps);
  c_grad->add_option("--dtype", gc.dtype);
  c_grad->add_option("--tol", gc.tol, "Pass threshold on the max relative error");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Run one curriculum stage");
  c_train->add_option("--stage", train.stage)->required()->check(CLI::IsMember({"align", "sft", "refine"}));
  c_train->add_option("--manifest", train.manifest)->required()->check(CLI::ExistingFile);
  c_train->add_option("--bundle", train.bundle, "Input bundle");
  c_train->add_flag("--init", train.init, "Start from a fresh bundle built from the manifest");
  c_train->add_option("--out", train.out)->required();
  c_train->add_option("--steps", train.steps);
  c_train->add_option("--lr", train.lr);
  c_train->add_option("--seed", g.seed, "Global seed");

  InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "Greedy answer for one sequence and prompt");
  c_infer->add_option("--bundle", infer.bundle)->required()->check(CLI::ExistingFile);
  c_infer->add_option("--seq", infer.seq)->required()->check(CLI::ExistingFile);
  c_infer->add_option("--prompt", infer.prompt)->required();
  c_infer->add_option("--max-len", infer.max_len);

  BootstrapArgs boot;
  auto* c_boot = app.add_subcommand("bootstrap", "Failure-aware bootstrapping rounds (updates the manifest in place)");
  c_boot->add_option("--bundle", boot.bundle)->required()->check(CLI::ExistingFile);
  c_boot->add_option("--manifest", boot.manifest)->required()->check(CLI::ExistingFile);
  c_boot->add_option("--rounds", boot.rounds);
  c_boot->add_option("--eval-frac", boot.eval_frac);
  c_boot->add_option("--fail-frac", boot.fail_frac);
  c_boot->add_option("--teacher", boot.teacher, "stub or an http chat-completions URL");
  c_boot->add_option("--out-bundle", boot.out_bundle, "Defaults to overwriting --bundle");
  c_boot->add_option("--report-dir", boot.report_dir, "Defaults to the manifest directory");
  c_boot->add_option("--seed", g.seed, "Global seed");

  std::string eval_manifest, eval_preds, eval_out;
  auto* c_eval = app.add_subcommand("eval", "Score predictions against manifest answers");
  c_eval->add_option("--manifest", eval_manifest)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--predictions", eval_preds)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out", eval_out);

  std::string demo_out;
  auto* c_demo = app.add_subcommand("demo", "Synthetic corpus, curriculum and two bootstrap rounds");
  c_demo->add_option("--out", demo_out, "Artifact directory (default demo_out)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_ingest) return run_ingest(ingest);
    if (*c_sample) return run_sample(sample, g);
    if (*c_inspect) return run_inspect(inspect_file, inspect_stats);
    if (*c_encode) return run_encode(encode, g);
    if (*c_grad) return run_gradcheck(gc, g);
    if (*c_train) {
      if (!train.init && train.bundle.empty()) fail(ErrorKind::kInvalidArgument, "train needs --bundle or --init");
      return run_train(train, g);
    }
    if (*c_infer) return run_infer(infer);
    if (*c_boot) return run_bootstrap(boot, g);
    if (*c_eval) return run_eval(eval_manifest, eval_preds, eval_out);
    if (*c_demo) return run_demo_cmd(demo_out, g);
  } catch (const Error& e) {
    ojson j;
    j["error"] = to_string(e.kind());
    j["message"] = e.what();
    std::cerr << j.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    ojson j;
    j["error"] = "Internal";
    j["message"] = e.what();
    std::cerr << j.dump() << "\n";
    return 1;
  }
  return 1;
}
