#pragma once

// Persistence for point-cloud sequences (.pcs, magic PCS4) and the line-
// delimited dataset manifest that binds sequences to captions and QA pairs.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pc4d/sampler.hpp"

namespace pc4d {

std::vector<std::uint8_t> encode_sequence_file(const PointCloudSequence& seq);
PointCloudSequence decode_sequence_file(std::span<const std::uint8_t> bytes);

void write_sequence(const PointCloudSequence& seq, const std::filesystem::path& path);
PointCloudSequence read_sequence(const std::filesystem::path& path);

struct SequenceHeader {
  std::uint32_t version = 0;
  std::uint32_t T = 0;
  std::uint32_t N = 0;
  std::uint32_t C = 0;
  std::array<float, 3> norm_center{};
  float norm_scale = 0;
  std::string asset_id;
};

// Header only; no checksum verification.
SequenceHeader read_sequence_header(const std::filesystem::path& path);

enum class QaType { kCounting, kTemporalRelationship, kAction, kSpatialRelationship, kAppearance };
enum class QaOrigin { kSeed, kBootstrapRound1, kBootstrapRound2 };

constexpr std::array<QaType, 5> kAllQaTypes = {QaType::kCounting, QaType::kTemporalRelationship, QaType::kAction,
                                               QaType::kSpatialRelationship, QaType::kAppearance};

std::string to_string(QaType t);
std::string to_string(QaOrigin o);
std::optional<QaType> parse_qa_type(std::string_view s);
std::optional<QaOrigin> parse_qa_origin(std::string_view s);
QaOrigin bootstrap_origin(int round_index);  // 1-based

struct QaPair {
  QaType qtype = QaType::kAction;
  std::string question;
  std::string answer;
  QaOrigin origin = QaOrigin::kSeed;

  bool operator==(const QaPair&) const = default;
};

struct Captions {
  std::string brief;
  std::string detailed;
  bool operator==(const Captions&) const = default;
};

struct ManifestRecord {
  std::string id;
  std::string file;  // relative to the data root
  std::uint32_t frames = 0;
  std::uint32_t points = 0;
  Captions captions;
  std::vector<QaPair> qa;

  bool operator==(const ManifestRecord&) const = default;
};

std::string manifest_line(const ManifestRecord& r);
ManifestRecord parse_manifest_line(std::string_view line, std::size_t line_number);

void write_manifest(std::span<const ManifestRecord> records, const std::filesystem::path& path);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

struct ManifestIssue {
  std::size_t line = 0;
  std::string message;
};

struct ManifestReport {
  std::size_t records = 0;
  std::size_t qa_pairs = 0;
  std::vector<ManifestIssue> issues;
  bool valid() const { return issues.empty(); }
};

// Schema + file existence + header agreement; never throws for content errors.
ManifestReport validate_manifest(const std::filesystem::path& path, const std::filesystem::path& data_root);

}  // namespace pc4d
