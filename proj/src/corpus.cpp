#include "pc4d/corpus.hpp"

#include <array>

namespace pc4d {

namespace {

struct MotionText {
  MotionKind kind;
  const char* phrase[2];   // by direction
  const char* verb[2];     // "It is ..." form
  const char* detail;
  const char* count_q;
  const char* count_a;
  const char* after_a[2];
  const char* end_a[2];
  int axis;
  double amplitude;
};

const std::array<MotionText, 4> kMotions = {{
    {MotionKind::kRigidRotation,
     {"rotating clockwise", "rotating counterclockwise"},
     {"rotating clockwise", "rotating counterclockwise"},
     "It completes one full turn about its depth axis and returns to its starting pose.",
     "How many full turns does the", "It makes one full turn.",
     {"It keeps rotating clockwise until it is back at its starting pose.",
      "It keeps rotating counterclockwise until it is back at its starting pose."},
     {"It ends up where it started.", "It ends up where it started."},
     2, 0.0},
    {MotionKind::kOscillation,
     {"bobbing up and down", "swaying left and right"},
     {"bobbing up and down", "swaying left and right"},
     "It moves away from its rest position and back again in one smooth cycle.",
     "How many times does the", "It returns to its rest position once.",
     {"It rises first and then sinks back down.", "It sways to one side first and then swings back."},
     {"It ends up where it started.", "It ends up where it started."},
     1, 0.5},
    {MotionKind::kHingeArticulation,
     {"folding forward", "folding backward"},
     {"folding forward", "folding backward"},
     "Its upper half bends at a hinge in the middle while its lower half stays still.",
     "How many parts of the", "One part moves while the other part stays still.",
     {"Its upper half folds forward and then straightens again.",
      "Its upper half folds backward and then straightens again."},
     {"It ends up in its original shape.", "It ends up in its original shape."},
     0, 1.0},
    {MotionKind::kTranslation,
     {"sliding to the right", "sliding to the left"},
     {"sliding to the right", "sliding to the left"},
     "It moves steadily in a straight line without turning.",
     "How many times does the", "It never stops or turns around.",
     {"It keeps sliding to the right at a steady speed.", "It keeps sliding to the left at a steady speed."},
     {"It ends up to the right of where it started.", "It ends up to the left of where it started."},
     0, 1.0},
}};

const std::array<std::pair<ColorScheme, const char*>, 4> kColors = {
    {{ColorScheme::kRed, "red"}, {ColorScheme::kGreen, "green"}, {ColorScheme::kBlue, "blue"},
     {ColorScheme::kYellow, "yellow"}}};
const std::array<std::pair<BaseShape, const char*>, 2> kShapes = {
    {{BaseShape::kBox, "box"}, {BaseShape::kCylinder, "cylinder"}}};

std::string count_question(const MotionText& m, const std::string& shape) {
  switch (m.kind) {
    case MotionKind::kRigidRotation: return std::string(m.count_q) + " " + shape + " make?";
    case MotionKind::kOscillation: return std::string(m.count_q) + " " + shape + " return to its rest position?";
    case MotionKind::kHingeArticulation: return std::string(m.count_q) + " " + shape + " move?";
    default: return std::string(m.count_q) + " " + shape + " stop or turn around?";
  }
}

}  // namespace

std::vector<CorpusAsset> synthetic_corpus(std::size_t count) {
  std::vector<CorpusAsset> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& m = kMotions[i / 8 % 4];
    const std::size_t v = i % 8;
    const auto& [scheme, color] = kColors[v % 4];
    const auto& [base, shape] = kShapes[v / 4];
    const int dir = static_cast<int>((v + v / 4) % 2);

    CorpusAsset a;
    a.color = color;
    a.shape = shape;
    a.motion = m.phrase[dir];
    a.spec.kind = m.kind;
    a.spec.base_shape = base;
    a.spec.color_scheme = scheme;
    a.spec.axis = m.kind == MotionKind::kOscillation ? (dir == 0 ? 1 : 0) : m.axis;
    a.spec.reverse = m.kind == MotionKind::kOscillation ? false : dir == 1;
    a.spec.amplitude = m.amplitude;
    a.spec.period_frames = 32;
    a.spec.frame_count = 32;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%02zu", i);
    a.spec.asset_id = id;

    const std::string obj = std::string(color) + " " + shape;
    a.captions.brief = "A " + obj + " " + m.phrase[dir] + ".";
    a.captions.detailed = "A " + obj + " " + m.phrase[dir] + " continuously across all frames. " + m.detail +
                          " Its size and color stay the same throughout.";
    a.qa = {
        {QaType::kCounting, count_question(m, shape), m.count_a, QaOrigin::kSeed},
        {QaType::kTemporalRelationship, "What happens after the " + std::string(shape) + " starts moving?",
         m.after_a[dir], QaOrigin::kSeed},
        {QaType::kAction, "What is the " + obj + " doing?", std::string("It is ") + m.verb[dir] + ".",
         QaOrigin::kSeed},
        {QaType::kSpatialRelationship,
         "Where does the " + std::string(shape) + " end up relative to where it started?", m.end_a[dir],
         QaOrigin::kSeed},
        {QaType::kAppearance, "What color is the " + std::string(shape) + "?",
         "The " + std::string(shape) + " is " + color + ".", QaOrigin::kSeed},
    };
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<ManifestRecord> build_synthetic_corpus(const CorpusOptions& opts, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "sequences");
  std::vector<ManifestRecord> records;
  for (const auto& a : synthetic_corpus(opts.assets)) {
    auto spec = a.spec;
    spec.frame_count = opts.source_frames;
    spec.period_frames = opts.source_frames;
    const auto anim = generate_synthetic_asset(spec, opts.seed);
    const auto report = validate_animation(anim);
    if (!report.accepted) {
      std::string why;
      for (const auto& r : report.reasons) why += " " + r;
      fail(ErrorKind::kInvalidArgument, "synthetic asset " + spec.asset_id + " rejected:" + why);
    }
    const auto frames = select_frames_equidistant(static_cast<int>(anim.frame_count()), static_cast<int>(opts.frames));
    SequenceOptions so;
    so.points = opts.points;
    so.mode = opts.mode;
    so.seed = derive_seed(opts.seed, spec.asset_id);
    const auto seq = build_sequence(anim, frames, so);
    const std::string rel = "sequences/" + spec.asset_id + ".pcs";
    write_sequence(seq, root / rel);

    ManifestRecord r;
    r.id = spec.asset_id;
    r.file = rel;
    r.frames = static_cast<std::uint32_t>(seq.T);
    r.points = static_cast<std::uint32_t>(seq.N);
    r.captions = a.captions;
    r.qa = a.qa;
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<std::string> corpus_texts(std::span<const ManifestRecord> records, std::span<const std::string> extra) {
  std::vector<std::string> texts{kBriefPrompt, kDetailedPrompt};
  for (const auto& r : records) {
    texts.push_back(r.captions.brief);
    texts.push_back(r.captions.detailed);
    for (const auto& q : r.qa) {
      texts.push_back(q.question);
      texts.push_back(q.answer);
    }
  }
  texts.insert(texts.end(), extra.begin(), extra.end());
  return texts;
}

SampleSelection stage_selection(Stage s) {
  switch (s) {
    case Stage::kAlign: return {true, false, false, true};
    case Stage::kSft: return {true, true, true, true};
    case Stage::kRefine: return {false, false, true, false};
  }
  return {};
}

TrainSet make_train_set(const ModelBundle& bundle, std::span<const ManifestRecord> records,
                        const std::filesystem::path& root, const SampleSelection& sel) {
  TrainSet set;
  for (const auto& r : records) {
    const std::size_t before = set.samples.size();
    const std::size_t seq = set.tokens.size();
    if (sel.brief && !r.captions.brief.empty()) set.samples.push_back({seq, kBriefPrompt, r.captions.brief});
    if (sel.detailed && !r.captions.detailed.empty())
      set.samples.push_back({seq, kDetailedPrompt, r.captions.detailed});
    if (sel.qa)
      for (const auto& q : r.qa)
        if (!sel.seed_qa_only || q.origin == QaOrigin::kSeed) set.samples.push_back({seq, q.question, q.answer});
    if (set.samples.size() == before) continue;
    set.tokens.push_back(encode_sequence(read_sequence(root / r.file), bundle.encoder));
  }
  return set;
}

}  // namespace pc4d
