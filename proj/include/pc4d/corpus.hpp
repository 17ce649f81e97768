#pragma once

// Templated synthetic corpus: animated primitives with captions and QA pairs
// generated from their SynthSpec, so ground truth is known by construction.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pc4d/lm.hpp"
#include "pc4d/mesh.hpp"
#include "pc4d/sampler.hpp"
#include "pc4d/seqstore.hpp"

namespace pc4d {

inline constexpr const char* kBriefPrompt = "Describe the motion of this object briefly.";
inline constexpr const char* kDetailedPrompt = "Describe the motion of this object in detail.";

struct CorpusAsset {
  SynthSpec spec;
  std::string color, shape, motion;  // caption words
  Captions captions;
  std::vector<QaPair> qa;  // one per QA category
};

// 4 motion kinds x (4 colours x 2 shapes); the direction alternates.
std::vector<CorpusAsset> synthetic_corpus(std::size_t count = 32);

struct CorpusOptions {
  std::size_t assets = 32;
  std::size_t frames = 16;    // T
  std::size_t points = 1024;  // N
  int source_frames = 32;
  SampleMode mode = SampleMode::kUniform;
  std::uint64_t seed = 0;
};

// Writes sequences/<id>.pcs under `root` and returns the manifest records
// (file paths relative to root). Assets rejected by the motion filter throw.
std::vector<ManifestRecord> build_synthetic_corpus(const CorpusOptions& opts, const std::filesystem::path& root);

// Every text the model may need to read or write: captions, QA, prompts and
// any extra lines (e.g. teacher templates).
std::vector<std::string> corpus_texts(std::span<const ManifestRecord> records,
                                      std::span<const std::string> extra = {});

struct SampleSelection {
  bool brief = true;
  bool detailed = false;
  bool qa = false;
  bool seed_qa_only = false;
};

SampleSelection stage_selection(Stage s);

// Encodes each record's sequence once with the bundle's frozen encoder.
TrainSet make_train_set(const ModelBundle& bundle, std::span<const ManifestRecord> records,
                        const std::filesystem::path& root, const SampleSelection& sel);

}  // namespace pc4d
