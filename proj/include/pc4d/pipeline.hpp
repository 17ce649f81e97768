#pragma once

// End-to-end plumbing shared by the CLI: one config struct, prediction files
// and metric tables, and the synthetic demo run.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pc4d/bootstrap.hpp"
#include "pc4d/corpus.hpp"
#include "pc4d/lm.hpp"

namespace pc4d {

struct StageBudget {
  std::size_t steps = 0;
  double learning_rate = 1e-3;
};

struct PipelineConfig {
  std::filesystem::path out_dir = "demo_out";
  std::uint64_t seed = 0;
  bool deterministic = false;
  CorpusOptions corpus{};
  ModelDims dims = demo_dims();
  StageBudget align{300, 1e-3};
  StageBudget sft{1000, 1.5e-3};
  std::size_t batch_size = 4;
  BootstrapConfig bootstrap{};
  TeacherClientConfig teacher{};

  static ModelDims demo_dims();

  // Canonical JSON (fixed key order). out_dir is not part of the fingerprint.
  std::string to_json() const;
  static PipelineConfig from_json(std::string_view text);  // missing keys keep defaults
  static PipelineConfig load(const std::filesystem::path& path);
  std::string fingerprint() const;
  void validate() const;  // InvalidArgument
};

struct Prediction {
  std::string id;
  std::size_t qa_index = 0;
  std::string prediction;
  bool operator==(const Prediction&) const = default;
};

std::string prediction_line(const Prediction& p);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);
void write_predictions(std::span<const Prediction> preds, const std::filesystem::path& path);

// Greedy answers for every QA pair in the manifest.
std::vector<Prediction> predict_qa(const ModelBundle& bundle, std::span<const ManifestRecord> records,
                                   const std::filesystem::path& data_root, std::size_t max_len = 48);

struct MetricRow {
  std::string label;
  std::size_t n = 0;
  double bleu1 = 0, rouge_l = 0, meteor_lite = 0;
};

struct MetricTable {
  std::vector<MetricRow> rows;  // one per QA category, then "overall"
  std::string to_text() const;
};

// Scores predictions against the manifest answers. A prediction for an unknown
// (id, qa_index) is Schema.
MetricTable evaluate_predictions(std::span<const ManifestRecord> records, std::span<const Prediction> preds);

struct DemoSummary {
  double sft_loss_first = 0, sft_loss_last = 0;
  std::size_t captions = 0, captions_verbatim = 0;
  std::vector<RoundReport> rounds;
  MetricTable metrics;
};

// Corpus -> align -> sft -> bootstrap rounds -> metrics, all under
// cfg.out_dir. A failing stage rethrows with the stage named.
DemoSummary run_demo(const PipelineConfig& cfg);

// Files written by run_demo, relative to out_dir, in a fixed order.
std::vector<std::filesystem::path> demo_artifacts(const std::filesystem::path& out_dir);

}  // namespace pc4d
