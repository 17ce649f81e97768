#include <doctest.h>

#include <fstream>
#include <sstream>

#include "pc4d/pipeline.hpp"
#include "pc4d/textmetrics.hpp"
#include "test_util.hpp"

using namespace pc4d;
using pc4d::testing::kind_of;
using pc4d::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

PipelineConfig small_config(const std::filesystem::path& out) {
  PipelineConfig c;
  c.out_dir = out;
  c.seed = 3;
  c.deterministic = true;
  c.corpus.assets = 4;
  c.corpus.points = 256;
  c.dims.groups = 4;
  c.dims.neighbors = 8;
  c.dims.width = 8;
  c.dims.mamba = {8, 16, 4, 1};
  c.dims.decoder = {16, 2, 1, 2, 256};
  c.align = {3, 1e-3};
  c.sft = {3, 1e-3};
  c.bootstrap.rounds = 1;
  c.bootstrap.refine_steps = 2;
  c.bootstrap.max_answer_len = 4;
  return c;
}

}  // namespace

TEST_CASE("config JSON round trip and schema errors") {
  PipelineConfig c;
  c.seed = 42;
  c.sft.learning_rate = 5e-4;
  c.dims.width = 16;
  c.dims.mamba.c = 16;
  c.bootstrap.rounds = 1;
  c.teacher.model = "judge";
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.fingerprint() == c.fingerprint());
  CHECK(back.dims.mamba.c == 16);
  CHECK(PipelineConfig{}.fingerprint() != c.fingerprint());

  const auto partial = PipelineConfig::from_json(R"({"seed": 9, "train": {"sft_steps": 10}})");
  CHECK(partial.seed == 9);
  CHECK(partial.sft.steps == 10);
  CHECK(partial.align.steps == PipelineConfig{}.align.steps);

  CHECK(kind_of([] { PipelineConfig::from_json(R"({"sed": 1})"); }) == ErrorKind::kSchema);
  CHECK(kind_of([] { PipelineConfig::from_json(R"({"model": {"mamba": {"N": 3}}})"); }) == ErrorKind::kSchema);
  CHECK(kind_of([] { PipelineConfig::from_json(R"({"seed": "seven"})"); }) == ErrorKind::kSchema);
  CHECK(kind_of([] { PipelineConfig::from_json("[1, 2]"); }) == ErrorKind::kSchema);
  CHECK(kind_of([] { PipelineConfig::from_json("{"); }) == ErrorKind::kSchema);

  PipelineConfig bad;
  bad.batch_size = 0;
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::kInvalidArgument);
  bad = PipelineConfig{};
  bad.dims.decoder.heads = 3;
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::kInvalidArgument);
  PipelineConfig{}.validate();
}

TEST_CASE("prediction files and metric tables") {
  TempDir dir("pred");
  ManifestRecord r;
  r.id = "a";
  r.qa = {{QaType::kCounting, "How many turns?", "One full turn.", QaOrigin::kSeed},
          {QaType::kAction, "What is it doing?", "It is rotating.", QaOrigin::kSeed}};
  const std::vector<ManifestRecord> recs{r};
  const std::vector<Prediction> preds{{"a", 0, "One full turn."}, {"a", 1, "It \"slides\"\nsideways."}};
  write_predictions(preds, dir / "p.jsonl");
  CHECK(read_predictions(dir / "p.jsonl") == preds);

  const auto t = evaluate_predictions(recs, preds);
  REQUIRE(t.rows.size() == 6);
  CHECK(t.rows[0].label == "counting");
  CHECK(t.rows[0].n == 1);
  CHECK(t.rows[0].bleu1 == doctest::Approx(1.0));
  CHECK(t.rows[1].n == 0);
  CHECK(t.rows.back().label == "overall");
  CHECK(t.rows.back().n == 2);
  CHECK(t.rows.back().bleu1 == doctest::Approx((1.0 + bleu1(preds[1].prediction, r.qa[1].answer)) / 2));
  CHECK(t.to_text().rfind("category", 0) == 0);

  const std::vector<Prediction> stray{{"b", 0, "x"}};
  CHECK(kind_of([&] { evaluate_predictions(recs, stray); }) == ErrorKind::kSchema);
  const std::vector<Prediction> out_of_range{{"a", 2, "x"}};
  CHECK(kind_of([&] { evaluate_predictions(recs, out_of_range); }) == ErrorKind::kSchema);
  std::ofstream(dir / "bad.jsonl") << "{\"id\": \"a\"}\n";
  CHECK(kind_of([&] { read_predictions(dir / "bad.jsonl"); }) == ErrorKind::kSchema);
}

TEST_CASE("small demo writes fingerprinted, reproducible artifacts") {
  TempDir a("demo_a"), b("demo_b");
  const auto sa = run_demo(small_config(a.path()));
  run_demo(small_config(b.path()));
  const auto files = demo_artifacts(a.path());
  CHECK(files == demo_artifacts(b.path()));
  for (const char* name : {"config.json", "metrics.txt", "predictions.jsonl", "round1.txt", "train_log.tsv",
                           "captions_sft.tsv", "bundle.pcb", "bundle_sft.pcb", "manifest_round1.jsonl"})
    CHECK(std::find(files.begin(), files.end(), std::filesystem::path(name)) != files.end());
  for (const auto& f : files) {
    INFO(f.string());
    CHECK(slurp(a.path() / f) == slurp(b.path() / f));
  }
  const auto fp = small_config(a.path()).fingerprint();
  for (const char* name : {"metrics.txt", "round1.txt", "train_log.tsv", "captions_sft.tsv"})
    CHECK(slurp(a.path() / name).rfind("config_fingerprint: " + fp + "\n", 0) == 0);
  CHECK(sa.captions == 8);
  CHECK(sa.rounds.size() == 1);
  CHECK(sa.metrics.rows.back().n == 20);

  auto bad = small_config(a.path() / "again");
  bad.batch_size = 0;
  try {
    run_demo(bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInvalidArgument);
    CHECK(std::string(e.what()).find("stage 'config'") != std::string::npos);
  }
}
