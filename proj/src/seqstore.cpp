#include "pc4d/seqstore.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "pc4d/bytes.hpp"
#include "pc4d/error.hpp"

namespace pc4d {

namespace {

constexpr char kPcsMagic[4] = {'P', 'C', 'S', '4'};
constexpr std::uint32_t kPcsVersion = 1;

SequenceHeader read_header(ByteReader& in) {
  if (in.remaining() < 4) fail(ErrorKind::kParse, "file too short for magic");
  const auto magic = in.raw(4);
  if (magic != std::string_view(kPcsMagic, 4)) fail(ErrorKind::kBadMagic, "expected PCS4, found '" + magic + "'");
  SequenceHeader h;
  h.version = in.u32();
  if (h.version != kPcsVersion) fail(ErrorKind::kVersionUnsupported, "pcs version " + std::to_string(h.version));
  h.T = in.u32();
  h.N = in.u32();
  h.C = in.u32();
  if (h.C != PointCloudSequence::kChannels)
    fail(ErrorKind::kParse, "channel count " + std::to_string(h.C) + " at byte offset 16, expected 6");
  for (auto& c : h.norm_center) c = in.f32();
  h.norm_scale = in.f32();
  h.asset_id = in.str16();
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_sequence_file(const PointCloudSequence& seq) {
  if (seq.data.size() != seq.T * seq.N * PointCloudSequence::kChannels)
    fail(ErrorKind::kShapeMismatch, "sequence payload does not match T*N*6");
  ByteWriter out;
  out.raw(std::string_view(kPcsMagic, 4));
  out.u32(kPcsVersion);
  out.u32(static_cast<std::uint32_t>(seq.T));
  out.u32(static_cast<std::uint32_t>(seq.N));
  out.u32(PointCloudSequence::kChannels);
  for (float c : seq.norm_center) out.f32(c);
  out.f32(seq.norm_scale);
  out.str16(seq.asset_id);
  for (float v : seq.data) out.f32(v);
  out.append_crc();
  return out.take();
}

PointCloudSequence decode_sequence_file(std::span<const std::uint8_t> bytes) {
  // Magic first so a wrong file type is reported as such, not as a bad checksum.
  if (bytes.size() < 4 || !std::equal(kPcsMagic, kPcsMagic + 4, bytes.begin())) {
    ByteReader probe(bytes);
    read_header(probe);
  }
  auto body = verify_trailing_crc(bytes);
  ByteReader in(body);
  const SequenceHeader h = read_header(in);
  const std::uint64_t count = std::uint64_t{h.T} * h.N * h.C;
  if (count * 4 != in.remaining())
    fail(ErrorKind::kParse, "payload at byte offset " + std::to_string(in.offset()) + " holds " +
                                std::to_string(in.remaining()) + " bytes, header implies " + std::to_string(count * 4));
  PointCloudSequence seq;
  seq.T = h.T;
  seq.N = h.N;
  seq.norm_center = h.norm_center;
  seq.norm_scale = h.norm_scale;
  seq.asset_id = h.asset_id;
  seq.data.resize(count);
  for (auto& v : seq.data) v = in.f32();
  return seq;
}

void write_sequence(const PointCloudSequence& seq, const std::filesystem::path& path) {
  write_file(path, encode_sequence_file(seq));
}

PointCloudSequence read_sequence(const std::filesystem::path& path) { return decode_sequence_file(read_file(path)); }

SequenceHeader read_sequence_header(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> head(32 + 2 + 0xffff);
  f.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(f.gcount()));
  ByteReader in(head);
  return read_header(in);
}

// ---------------------------------------------------------------------------
// Manifest

std::string to_string(QaType t) {
  switch (t) {
    case QaType::kCounting: return "counting";
    case QaType::kTemporalRelationship: return "temporal_relationship";
    case QaType::kAction: return "action";
    case QaType::kSpatialRelationship: return "spatial_relationship";
    case QaType::kAppearance: return "appearance";
  }
  return "?";
}

std::string to_string(QaOrigin o) {
  switch (o) {
    case QaOrigin::kSeed: return "seed";
    case QaOrigin::kBootstrapRound1: return "bootstrap_round_1";
    case QaOrigin::kBootstrapRound2: return "bootstrap_round_2";
  }
  return "?";
}

std::optional<QaType> parse_qa_type(std::string_view s) {
  for (auto t : kAllQaTypes)
    if (to_string(t) == s) return t;
  return std::nullopt;
}

std::optional<QaOrigin> parse_qa_origin(std::string_view s) {
  for (auto o : {QaOrigin::kSeed, QaOrigin::kBootstrapRound1, QaOrigin::kBootstrapRound2})
    if (to_string(o) == s) return o;
  return std::nullopt;
}

QaOrigin bootstrap_origin(int round_index) {
  switch (round_index) {
    case 1: return QaOrigin::kBootstrapRound1;
    case 2: return QaOrigin::kBootstrapRound2;
    default: fail(ErrorKind::kInvalidArgument, "origin tags exist for bootstrap rounds 1 and 2 only");
  }
}

std::string manifest_line(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["file"] = r.file;
  j["frames"] = r.frames;
  j["points"] = r.points;
  j["captions"] = {{"brief", r.captions.brief}, {"detailed", r.captions.detailed}};
  auto qa = nlohmann::ordered_json::array();
  for (const auto& p : r.qa)
    qa.push_back({{"qtype", to_string(p.qtype)},
                  {"question", p.question},
                  {"answer", p.answer},
                  {"origin", to_string(p.origin)}});
  j["qa"] = std::move(qa);
  return j.dump();
}

namespace {

[[noreturn]] void schema_error(std::size_t line, const std::string& msg) {
  fail(ErrorKind::kSchema, "line " + std::to_string(line) + ": " + msg);
}

std::string req_string(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || !j[key].is_string()) schema_error(line, std::string("missing string field '") + key + "'");
  return j[key].get<std::string>();
}

std::uint32_t req_count(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || !j[key].is_number_unsigned())
    schema_error(line, std::string("missing non-negative integer field '") + key + "'");
  return j[key].get<std::uint32_t>();
}

}  // namespace

ManifestRecord parse_manifest_line(std::string_view text, std::size_t line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    schema_error(line, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) schema_error(line, "record must be an object");
  ManifestRecord r;
  r.id = req_string(j, "id", line);
  r.file = req_string(j, "file", line);
  r.frames = req_count(j, "frames", line);
  r.points = req_count(j, "points", line);
  if (!j.contains("captions") || !j["captions"].is_object()) schema_error(line, "missing object field 'captions'");
  r.captions.brief = req_string(j["captions"], "brief", line);
  r.captions.detailed = req_string(j["captions"], "detailed", line);
  if (!j.contains("qa") || !j["qa"].is_array()) schema_error(line, "missing array field 'qa'");
  for (const auto& q : j["qa"]) {
    if (!q.is_object()) schema_error(line, "qa entries must be objects");
    QaPair p;
    const auto qtype = req_string(q, "qtype", line);
    const auto t = parse_qa_type(qtype);
    if (!t) schema_error(line, "qtype '" + qtype + "' is not one of the five QA categories");
    p.qtype = *t;
    p.question = req_string(q, "question", line);
    p.answer = req_string(q, "answer", line);
    const auto origin = req_string(q, "origin", line);
    const auto o = parse_qa_origin(origin);
    if (!o) schema_error(line, "unknown origin '" + origin + "'");
    p.origin = *o;
    r.qa.push_back(std::move(p));
  }
  return r;
}

void write_manifest(std::span<const ManifestRecord> records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : records) {
    text += manifest_line(r);
    text += '\n';
  }
  write_text_file(path, text);
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::vector<ManifestRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_manifest_line(line, n));
  }
  return out;
}

ManifestReport validate_manifest(const std::filesystem::path& path, const std::filesystem::path& data_root) {
  ManifestReport report;
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    report.issues.push_back({0, e.what()});
    return report;
  }
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestRecord r;
    try {
      r = parse_manifest_line(line, n);
    } catch (const Error& e) {
      report.issues.push_back({n, e.what()});
      continue;
    }
    ++report.records;
    report.qa_pairs += r.qa.size();
    const auto file = data_root / r.file;
    if (!std::filesystem::exists(file)) {
      report.issues.push_back({n, "referenced file does not exist: " + r.file});
      continue;
    }
    try {
      const auto h = read_sequence_header(file);
      if (h.T != r.frames || h.N != r.points)
        report.issues.push_back({n, "header says T=" + std::to_string(h.T) + " N=" + std::to_string(h.N) +
                                        ", record says frames=" + std::to_string(r.frames) +
                                        " points=" + std::to_string(r.points)});
    } catch (const Error& e) {
      report.issues.push_back({n, std::string("unreadable sequence header: ") + e.what()});
    }
  }
  return report;
}

}  // namespace pc4d
