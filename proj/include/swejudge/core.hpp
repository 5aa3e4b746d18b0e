/// @file core.hpp
/// Dataset model: evaluation samples, score scales, manifest loading and the
/// seeded trial draw used to pick the annotated subset a team is tuned on.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

namespace swejudge {

/// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Bad input data: manifests, samples, scales, reports, templates.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what) {}
};

/// Judge transport failures: auth, timeouts, malformed replies, replay misses.
class BackendError : public Error {
 public:
  explicit BackendError(const std::string& what) : Error(what) {}
};

/// Caller misuse of a public entry point (bad flag combinations and the like).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what) {}
};

enum class TaskKind { code_generation, program_repair, code_summarization };

inline const char* to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::code_generation: return "code_generation";
    case TaskKind::program_repair: return "program_repair";
    case TaskKind::code_summarization: return "code_summarization";
  }
  return "unknown";
}

inline std::optional<TaskKind> task_kind_from_string(const std::string& s) {
  if (s == "code_generation") return TaskKind::code_generation;
  if (s == "program_repair") return TaskKind::program_repair;
  if (s == "code_summarization") return TaskKind::code_summarization;
  return std::nullopt;
}

/// Target scoring scale of a dataset, e.g. {0, 4, 1} or {1, 5, 0.5}.
/// Judge scores are always collected on 0..100 and mapped onto this scale
/// afterwards, so the scale never leaks into prompts.
struct ScoreScale {
  double min = 0.0;
  double max = 100.0;
  double step = 1.0;

  void validate() const {
    if (!(min < max))
      throw ValidationError("score scale: min must be < max");
    if (!(step > 0.0))
      throw ValidationError("score scale: step must be > 0");
    const double span = (max - min) / step;
    const double nearest = std::round(span);
    if (std::abs(span - nearest) > 1e-9)
      throw ValidationError(
          "score scale: (max - min) must be an integer multiple of step");
  }

  /// Number of grid points, e.g. 5 for {0, 4, 1}.
  std::size_t grid_size() const {
    return static_cast<std::size_t>(std::llround((max - min) / step)) + 1;
  }
};

/// One evaluation instance. `reference` is required: several strategies are
/// reference-based and the pipeline refuses datasets without it.
struct EvalSample {
  std::string id;
  std::string requirement;  // task description / buggy context / code to summarize
  std::string candidate;    // artifact under evaluation
  std::string reference;    // ground-truth artifact
  std::optional<double> human_score;  // on the dataset scale, when annotated
};

struct DatasetManifest {
  std::string name;
  TaskKind task_kind = TaskKind::code_generation;
  ScoreScale scale;
  std::string samples_path;  // relative paths resolve against the manifest dir
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<EvalSample> samples;

  std::size_t annotated_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.human_score.has_value();
    return n;
  }
};

namespace detail {

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw ValidationError(where + ": missing or non-string field '" + key + "'");
  return j.at(key).get<std::string>();
}

inline double require_number(const nlohmann::json& j, const char* key,
                             const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_number())
    throw ValidationError(where + ": missing or non-numeric field '" + key + "'");
  return j.at(key).get<double>();
}

}  // namespace detail

inline nlohmann::json sample_to_json(const EvalSample& s) {
  nlohmann::json j{{"id", s.id},
                   {"requirement", s.requirement},
                   {"candidate", s.candidate},
                   {"reference", s.reference}};
  if (s.human_score) j["human_score"] = *s.human_score;
  return j;
}

inline EvalSample sample_from_json(const nlohmann::json& j,
                                   const std::string& where) {
  EvalSample s;
  s.id = detail::require_string(j, "id", where);
  s.requirement = detail::require_string(j, "requirement", where);
  s.candidate = detail::require_string(j, "candidate", where);
  s.reference = detail::require_string(j, "reference", where);
  if (s.id.empty()) throw ValidationError(where + ": empty sample id");
  if (j.contains("human_score")) {
    if (!j.at("human_score").is_number())
      throw ValidationError(where + ": non-numeric human_score (sample '" +
                            s.id + "')");
    s.human_score = j.at("human_score").get<double>();
  }
  return s;
}

/// Reads a manifest (single JSON object) plus the JSONL samples file it points
/// at. Shouts at the first problem with the line number, so a broken corpus is
/// fixable without a debugger.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in)
    throw ValidationError("cannot open manifest: " + manifest_path.string());

  nlohmann::json mj;
  try {
    in >> mj;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + manifest_path.string() +
                          ": invalid JSON: " + e.what());
  }

  const std::string where = "manifest " + manifest_path.string();
  Dataset ds;
  ds.manifest.name = detail::require_string(mj, "name", where);
  const std::string kind_s = detail::require_string(mj, "task_kind", where);
  const auto kind = task_kind_from_string(kind_s);
  if (!kind)
    throw ValidationError(where + ": unknown task_kind '" + kind_s + "'");
  ds.manifest.task_kind = *kind;

  if (!mj.contains("scale") || !mj.at("scale").is_object())
    throw ValidationError(where + ": missing 'scale' object");
  const auto& sj = mj.at("scale");
  ds.manifest.scale.min = detail::require_number(sj, "min", where + " scale");
  ds.manifest.scale.max = detail::require_number(sj, "max", where + " scale");
  ds.manifest.scale.step = detail::require_number(sj, "step", where + " scale");
  ds.manifest.scale.validate();

  ds.manifest.samples_path = detail::require_string(mj, "samples_path", where);
  std::filesystem::path samples = ds.manifest.samples_path;
  if (samples.is_relative())
    samples = manifest_path.parent_path() / samples;

  std::ifstream sf(samples);
  if (!sf)
    throw ValidationError(where + ": cannot open samples file " +
                          samples.string());

  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(sf, line)) {
    ++line_no;
    // Tolerate blank lines and a trailing newline; everything else must parse.
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(samples.string() + ":" + std::to_string(line_no) +
                            ": malformed record: " + e.what());
    }
    EvalSample s = sample_from_json(
        rec, samples.string() + ":" + std::to_string(line_no));
    if (!seen_ids.insert(s.id).second)
      throw ValidationError(samples.string() + ":" + std::to_string(line_no) +
                            ": duplicate sample id '" + s.id + "'");
    if (s.human_score) {
      const auto& sc = ds.manifest.scale;
      if (*s.human_score < sc.min - 1e-9 || *s.human_score > sc.max + 1e-9)
        throw ValidationError(
            samples.string() + ":" + std::to_string(line_no) +
            ": human_score out of scale for sample '" + s.id + "' (" +
            std::to_string(*s.human_score) + " not in [" +
            std::to_string(sc.min) + ", " + std::to_string(sc.max) + "])");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Writes samples back out as JSONL. Inverse of the loader's samples half;
/// mostly here so tooling and tests can round-trip corpora.
inline void write_samples_file(const std::filesystem::path& path,
                               const std::vector<EvalSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write samples file: " + path.string());
  for (const auto& s : samples) out << sample_to_json(s).dump() << "\n";
}

namespace detail {

/// Minimal 64-bit LCG so the trial draw is reproducible from any language
/// without dragging in a full RNG spec. Constants are Knuth's MMIX multiplier
/// and increment; output is the top 31 bits of the state.
struct Lcg64 {
  std::uint64_t state;

  explicit Lcg64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    return state >> 33;
  }
};

}  // namespace detail

/// Draws k distinct annotated samples via a partial Fisher-Yates shuffle over
/// the annotated indices, in dataset order before shuffling. k is clamped to
/// the number of annotated samples; fewer than two annotated ones means no
/// correlation can be computed, so that is an error. The returned order is the
/// draw order.
inline std::vector<EvalSample> sample_trial_set(
    const std::vector<EvalSample>& samples, std::size_t k,
    std::uint64_t seed) {
  std::vector<std::size_t> annotated;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].human_score) annotated.push_back(i);

  if (annotated.size() < 2)
    throw ValidationError(
        "trial draw needs at least 2 annotated samples, found " +
        std::to_string(annotated.size()));
  if (k > annotated.size()) k = annotated.size();
  if (k < 2)
    throw ValidationError("trial size must be at least 2");

  detail::Lcg64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j =
        i + static_cast<std::size_t>(rng.next() % (annotated.size() - i));
    std::swap(annotated[i], annotated[j]);
  }

  std::vector<EvalSample> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(samples[annotated[i]]);
  return out;
}

}  // namespace swejudge
