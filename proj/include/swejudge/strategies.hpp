/// @file strategies.hpp
/// The judge strategies: prompt construction for every strategy variant and
/// the score parser that turns free-form model replies into 0..100 values.
///
/// Strategy variants:
///   P0  - plain "assign a correctness score" baseline, never teamed
///   P1a - direct assessment, no reference shown
///   P1b - direct assessment with the reference shown
///   P2  - P1b followed by a rethink turn that revalidates score and reasons
///   P3  - equivalence judgment of candidate against reference
///   P4  - phase 1 derives test cases from requirement+reference, phase 2
///         asks whether the candidate would pass them
///   P5  - phase 1 extracts the properties that make the reference correct,
///         phase 2 checks the candidate preserves them
///
/// All prompts instruct a 0..100 output regardless of the dataset's scale;
/// mapping onto the target scale happens downstream.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "swejudge/core.hpp"
#include "swejudge/digest.hpp"

namespace swejudge::strategies {

enum class StrategyId { P0, P1a, P1b, P2, P3, P4, P5 };

inline const char* name(StrategyId s) {
  switch (s) {
    case StrategyId::P0: return "P0";
    case StrategyId::P1a: return "P1a";
    case StrategyId::P1b: return "P1b";
    case StrategyId::P2: return "P2";
    case StrategyId::P3: return "P3";
    case StrategyId::P4: return "P4";
    case StrategyId::P5: return "P5";
  }
  return "?";
}

inline std::optional<StrategyId> strategy_from_string(const std::string& s) {
  if (s == "P0") return StrategyId::P0;
  if (s == "P1a") return StrategyId::P1a;
  if (s == "P1b") return StrategyId::P1b;
  if (s == "P2") return StrategyId::P2;
  if (s == "P3") return StrategyId::P3;
  if (s == "P4") return StrategyId::P4;
  if (s == "P5") return StrategyId::P5;
  return std::nullopt;
}

/// The variants teams are drawn from. P0 is deliberately absent.
inline const std::array<StrategyId, 6>& ensemble_eligible() {
  static const std::array<StrategyId, 6> v{StrategyId::P1a, StrategyId::P1b,
                                           StrategyId::P2,  StrategyId::P3,
                                           StrategyId::P4,  StrategyId::P5};
  return v;
}

inline bool is_ensemble_eligible(StrategyId s) { return s != StrategyId::P0; }

/// Number of model calls a full evaluation with this strategy makes.
inline int phase_count(StrategyId s) {
  switch (s) {
    case StrategyId::P2:
    case StrategyId::P4:
    case StrategyId::P5: return 2;
    default: return 1;
  }
}

enum class Role { system, user, assistant };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "?";
}

struct Turn {
  Role role;
  std::string content;
};

struct Conversation {
  std::vector<Turn> turns;
};

/// Everything recorded about one (sample, strategy) evaluation: the final
/// 0..100 score plus the full conversation of every phase for auditing.
struct JudgeRecord {
  std::string sample_id;
  StrategyId strategy = StrategyId::P0;
  double raw_score = 0.0;  // always within [0,100]
  std::vector<Conversation> transcript;  // one conversation per phase
  std::optional<std::string> parse_note;
};

// ---------------------------------------------------------------------------
// Templates

/// One loaded prompt template. Placeholders use {name} syntax; the allowed
/// names are fixed per template slot and checked at load time so a typo like
/// {referene} fails fast instead of reaching the model. Substitution is a
/// single left-to-right pass over the template text only: brace sequences
/// inside substituted values are never re-expanded.
class PromptTemplate {
 public:
  PromptTemplate() = default;

  PromptTemplate(std::string text, std::vector<std::string> allowed,
                 const std::string& origin)
      : text_(std::move(text)) {
    std::size_t pos = 0;
    while ((pos = text_.find('{', pos)) != std::string::npos) {
      const std::size_t end = text_.find('}', pos + 1);
      if (end == std::string::npos) break;
      const std::string name = text_.substr(pos + 1, end - pos - 1);
      if (is_placeholder_name(name)) {
        bool known = false;
        for (const auto& a : allowed) known = known || a == name;
        if (!known)
          throw ValidationError(origin + ": unknown placeholder {" + name + "}");
      }
      pos = end + 1;
    }
  }

  std::string render(
      const std::vector<std::pair<std::string_view, std::string_view>>& values)
      const {
    std::string out;
    out.reserve(text_.size());
    std::size_t pos = 0;
    while (pos < text_.size()) {
      const std::size_t open = text_.find('{', pos);
      if (open == std::string::npos) {
        out.append(text_, pos, std::string::npos);
        break;
      }
      out.append(text_, pos, open - pos);
      const std::size_t close = text_.find('}', open + 1);
      std::string name;
      if (close != std::string::npos)
        name = text_.substr(open + 1, close - open - 1);
      bool replaced = false;
      if (is_placeholder_name(name)) {
        for (const auto& [k, v] : values) {
          if (k == name) {
            out.append(v);
            replaced = true;
            break;
          }
        }
      }
      if (replaced) {
        pos = close + 1;
      } else {
        out.push_back('{');
        pos = open + 1;
      }
    }
    return out;
  }

  const std::string& text() const { return text_; }

 private:
  static bool is_placeholder_name(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
      if (!(std::islower(static_cast<unsigned char>(c)) || c == '_'))
        return false;
    return true;
  }

  std::string text_;
};

enum class TemplateSlot {
  p0,
  p1a,
  p1b,
  p2_rethink,
  p3,
  p4_gen_tests,
  p4_assess,
  p5_extract_props,
  p5_assess,
};

namespace detail {

struct SlotInfo {
  TemplateSlot slot;
  const char* file;
  std::vector<std::string> allowed;
};

inline const std::vector<SlotInfo>& slot_table() {
  static const std::vector<SlotInfo> table{
      {TemplateSlot::p0, "p0.txt", {"requirement", "candidate", "reference"}},
      {TemplateSlot::p1a, "p1a.txt", {"requirement", "candidate"}},
      {TemplateSlot::p1b, "p1b.txt", {"requirement", "candidate", "reference"}},
      {TemplateSlot::p2_rethink,
       "p2_rethink.txt",
       {"requirement", "candidate", "score", "reasons"}},
      {TemplateSlot::p3, "p3.txt", {"requirement", "candidate", "reference"}},
      {TemplateSlot::p4_gen_tests,
       "p4_gen_tests.txt",
       {"requirement", "reference"}},
      {TemplateSlot::p4_assess,
       "p4_assess.txt",
       {"requirement", "candidate", "tests"}},
      {TemplateSlot::p5_extract_props,
       "p5_extract_props.txt",
       {"requirement", "reference"}},
      {TemplateSlot::p5_assess,
       "p5_assess.txt",
       {"requirement", "candidate", "properties"}},
  };
  return table;
}

}  // namespace detail

/// Loads one template family per task kind from
///   <root>/<task_kind>/<slot>.txt
/// Leading lines starting with '#' are file comments (wording notes,
/// editing hints) and are stripped; the prompt body starts at the first
/// non-comment line. All 27 files are loaded and placeholder-checked up
/// front so a bad template cannot surface mid-run.
class TemplateLibrary {
 public:
  explicit TemplateLibrary(const std::filesystem::path& root) : root_(root) {
    static const TaskKind kinds[] = {TaskKind::code_generation,
                                     TaskKind::program_repair,
                                     TaskKind::code_summarization};
    for (TaskKind kind : kinds) {
      for (const auto& info : detail::slot_table()) {
        const std::filesystem::path path =
            root / swejudge::to_string(kind) / info.file;
        std::ifstream in(path, std::ios::binary);
        if (!in)
          throw ValidationError("cannot open template: " + path.string());
        std::string body, line;
        bool in_header = true;
        while (std::getline(in, line)) {
          if (in_header && (line.empty() || line.front() == '#')) continue;
          in_header = false;
          body += line;
          body.push_back('\n');
        }
        if (!body.empty() && body.back() == '\n') body.pop_back();
        if (body.empty())
          throw ValidationError("empty template: " + path.string());
        templates_[key(kind, info.slot)] =
            PromptTemplate(std::move(body), info.allowed, path.string());
      }
    }
  }

  const PromptTemplate& get(TaskKind kind, TemplateSlot slot) const {
    return templates_.at(key(kind, slot));
  }

  const std::filesystem::path& root() const { return root_; }

 private:
  static int key(TaskKind kind, TemplateSlot slot) {
    return static_cast<int>(kind) * 16 + static_cast<int>(slot);
  }

  std::filesystem::path root_;
  std::map<int, PromptTemplate> templates_;
};

// ---------------------------------------------------------------------------
// Prompt builders. All pure: identical inputs give identical conversations.

inline std::string extract_reasons(const std::string& phase1_reply);

inline Conversation build_p0(const EvalSample& sample, TaskKind task,
                             const TemplateLibrary& lib) {
  Conversation c;
  c.turns.push_back({Role::user, lib.get(task, TemplateSlot::p0)
                                     .render({{"requirement", sample.requirement},
                                              {"candidate", sample.candidate},
                                              {"reference", sample.reference}})});
  return c;
}

/// Direct assessment. include_reference=false is P1a, true is P1b.
inline Conversation build_p1(const EvalSample& sample, bool include_reference,
                             TaskKind task, const TemplateLibrary& lib) {
  Conversation c;
  if (include_reference) {
    c.turns.push_back(
        {Role::user, lib.get(task, TemplateSlot::p1b)
                         .render({{"requirement", sample.requirement},
                                  {"candidate", sample.candidate},
                                  {"reference", sample.reference}})});
  } else {
    c.turns.push_back(
        {Role::user, lib.get(task, TemplateSlot::p1a)
                         .render({{"requirement", sample.requirement},
                                  {"candidate", sample.candidate}})});
  }
  return c;
}

/// Rethink conversation: the full first-phase exchange (P1b form) followed by
/// the revalidation request with the parsed score and extracted reasons
/// embedded. The score renders as an integer; judge scores are integral in
/// practice and the prompt reads better than "70.000000".
inline Conversation build_p2(const EvalSample& sample,
                             const std::string& phase1_reply,
                             double phase1_score, TaskKind task,
                             const TemplateLibrary& lib) {
  Conversation c = build_p1(sample, /*include_reference=*/true, task, lib);
  c.turns.push_back({Role::assistant, phase1_reply});
  const std::string score_text =
      std::to_string(static_cast<long long>(std::llround(phase1_score)));
  const std::string reasons = extract_reasons(phase1_reply);
  c.turns.push_back({Role::user, lib.get(task, TemplateSlot::p2_rethink)
                                     .render({{"requirement", sample.requirement},
                                              {"candidate", sample.candidate},
                                              {"score", score_text},
                                              {"reasons", reasons}})});
  return c;
}

inline Conversation build_p3(const EvalSample& sample, TaskKind task,
                             const TemplateLibrary& lib) {
  if (sample.reference.empty())
    throw ValidationError("equivalence assessment needs a nonempty reference (sample '" +
                          sample.id + "')");
  Conversation c;
  c.turns.push_back({Role::user, lib.get(task, TemplateSlot::p3)
                                     .render({{"requirement", sample.requirement},
                                              {"candidate", sample.candidate},
                                              {"reference", sample.reference}})});
  return c;
}

/// Phase 1 of P4: derive test cases from requirement and reference only. The
/// candidate must stay out of this prompt so the tests cannot be biased
/// toward it (and so the result is shareable between samples with the same
/// requirement/reference pair).
inline Conversation build_p4_phase1(const EvalSample& sample, TaskKind task,
                                    const TemplateLibrary& lib) {
  Conversation c;
  c.turns.push_back({Role::user, lib.get(task, TemplateSlot::p4_gen_tests)
                                     .render({{"requirement", sample.requirement},
                                              {"reference", sample.reference}})});
  return c;
}

/// Phase 2 of P4: the candidate is judged strictly against the generated
/// tests; the reference is withheld.
inline Conversation build_p4_phase2(const EvalSample& sample,
                                    const std::string& generated_tests,
                                    TaskKind task, const TemplateLibrary& lib) {
  if (generated_tests.empty())
    throw ValidationError("test-based assessment got empty generated tests (sample '" +
                          sample.id + "')");
  Conversation c;
  c.turns.push_back({Role::user, lib.get(task, TemplateSlot::p4_assess)
                                     .render({{"requirement", sample.requirement},
                                              {"candidate", sample.candidate},
                                              {"tests", generated_tests}})});
  return c;
}

/// Phase 1 of P5: extract the properties that make the reference a correct
/// solution. Candidate-free for the same reasons as P4 phase 1.
inline Conversation build_p5_phase1(const EvalSample& sample, TaskKind task,
                                    const TemplateLibrary& lib) {
  Conversation c;
  c.turns.push_back(
      {Role::user, lib.get(task, TemplateSlot::p5_extract_props)
                       .render({{"requirement", sample.requirement},
                                {"reference", sample.reference}})});
  return c;
}

/// Phase 2 of P5: does the candidate preserve the extracted properties?
inline Conversation build_p5_phase2(const EvalSample& sample,
                                    const std::string& properties,
                                    TaskKind task,
                                    const TemplateLibrary& lib) {
  if (properties.empty())
    throw ValidationError("property-based assessment got empty properties (sample '" +
                          sample.id + "')");
  Conversation c;
  c.turns.push_back({Role::user, lib.get(task, TemplateSlot::p5_assess)
                                     .render({{"requirement", sample.requirement},
                                              {"candidate", sample.candidate},
                                              {"properties", properties}})});
  return c;
}

// ---------------------------------------------------------------------------
// Reply parsing

namespace detail {

struct NumberToken {
  std::size_t pos;
  double value;
};

/// Standalone decimal numbers: not embedded in identifiers ("v2", "P1"),
/// version strings ("1.2.3") or words. An optional leading minus is taken
/// when it is not glued to a previous token.
inline std::vector<NumberToken> number_tokens(const std::string& s) {
  const auto wordish = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
  };
  std::vector<NumberToken> out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) {
      ++i;
      continue;
    }
    std::size_t start = i;
    bool negative = false;
    if (start > 0 && s[start - 1] == '-' &&
        (start < 2 || (!wordish(s[start - 2]) && s[start - 2] != '.' &&
                       s[start - 2] != '-'))) {
      negative = true;
    }
    // Preceded by a word character or a dot: part of an identifier or a
    // dotted version, not a score.
    if (!negative && start > 0 && (wordish(s[start - 1]) || s[start - 1] == '.')) {
      while (i < s.size() && (wordish(s[i]) || s[i] == '.')) ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    if (j + 1 < s.size() && s[j] == '.' &&
        std::isdigit(static_cast<unsigned char>(s[j + 1]))) {
      ++j;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    }
    // Trailing word character or another dot-digit run disqualifies it
    // ("2x", "1.2.3").
    if (j < s.size() && (wordish(s[j]) ||
                         (s[j] == '.' && j + 1 < s.size() &&
                          std::isdigit(static_cast<unsigned char>(s[j + 1]))))) {
      while (j < s.size() && (wordish(s[j]) || s[j] == '.')) ++j;
      i = j;
      continue;
    }
    const std::string token = s.substr(start, j - start);
    try {
      double v = std::stod(token);
      if (negative) v = -v;
      out.push_back({start, v});
    } catch (...) {
      // Overflowing digit runs are not scores; skip them.
    }
    i = j;
  }
  return out;
}

inline std::string to_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace detail

/// Pulls a 0..100 score out of a free-form reply.
///
/// Preference order:
///   1. the last line containing "score" (case-insensitive) followed by a
///      number on that line; the first number after the word wins,
///   2. otherwise the last standalone number anywhere in the reply.
/// The result is clamped to [0,100]. No number at all -> nullopt, which the
/// evaluation loop answers with one retry and then the fallback score.
inline std::optional<double> parse_score(const std::string& reply) {
  std::optional<double> best;

  std::size_t line_start = 0;
  while (line_start <= reply.size()) {
    std::size_t line_end = reply.find('\n', line_start);
    if (line_end == std::string::npos) line_end = reply.size();
    const std::string line = reply.substr(line_start, line_end - line_start);
    const std::string lower = detail::to_lower(line);
    const std::size_t at = lower.rfind("score");
    if (at != std::string::npos) {
      for (const auto& tok : detail::number_tokens(line)) {
        if (tok.pos >= at + 5) {
          best = tok.value;  // later lines overwrite earlier ones
          break;
        }
      }
    }
    if (line_end == reply.size()) break;
    line_start = line_end + 1;
  }

  if (!best) {
    const auto tokens = detail::number_tokens(reply);
    if (!tokens.empty()) best = tokens.back().value;
  }
  if (!best) return std::nullopt;
  return std::clamp(*best, 0.0, 100.0);
}

/// Reasons for the rethink step: the phase-1 reply with score lines removed.
/// If nothing is left (the model answered with a bare score), the full reply
/// stands in so the rethink prompt never embeds an empty reasons block.
inline std::string extract_reasons(const std::string& phase1_reply) {
  std::string kept;
  std::size_t line_start = 0;
  while (line_start <= phase1_reply.size()) {
    std::size_t line_end = phase1_reply.find('\n', line_start);
    if (line_end == std::string::npos) line_end = phase1_reply.size();
    const std::string line =
        phase1_reply.substr(line_start, line_end - line_start);
    const std::string lower = detail::to_lower(line);
    const std::size_t at = lower.rfind("score");
    bool is_score_line = false;
    if (at != std::string::npos) {
      for (const auto& tok : detail::number_tokens(line)) {
        if (tok.pos >= at + 5) {
          is_score_line = true;
          break;
        }
      }
    }
    if (!is_score_line && !line.empty()) {
      kept += line;
      kept.push_back('\n');
    }
    if (line_end == phase1_reply.size()) break;
    line_start = line_end + 1;
  }
  while (!kept.empty() && kept.back() == '\n') kept.pop_back();
  if (kept.find_first_not_of(" \t\r\n") == std::string::npos)
    return phase1_reply;
  return kept;
}

// ---------------------------------------------------------------------------
// Shared phase-1 artifacts

/// Samples with identical (requirement, reference) share one generated test
/// suite (P4) and one property analysis (P5); keyed by digest so large texts
/// are not copied around.
struct ArtifactKey {
  StrategyId strategy = StrategyId::P4;
  std::string requirement_digest;
  std::string reference_digest;

  bool operator==(const ArtifactKey& o) const {
    return strategy == o.strategy &&
           requirement_digest == o.requirement_digest &&
           reference_digest == o.reference_digest;
  }
};

inline ArtifactKey make_artifact_key(StrategyId strategy,
                                     const EvalSample& sample) {
  return ArtifactKey{strategy, sha256_hex(sample.requirement),
                     sha256_hex(sample.reference)};
}

struct ArtifactKeyHash {
  std::size_t operator()(const ArtifactKey& k) const {
    std::size_t h = std::hash<std::string>{}(k.requirement_digest);
    h ^= std::hash<std::string>{}(k.reference_digest) + 0x9e3779b97f4a7c15ULL +
         (h << 6) + (h >> 2);
    return h ^ static_cast<std::size_t>(k.strategy);
  }
};

/// Once-per-key producer cache. The first caller for a key runs produce()
/// while holding only that key's slot; concurrent callers for the same key
/// wait, callers for other keys proceed. A throwing producer leaves the slot
/// unset so the next caller retries.
class SharedArtifactCache {
 public:
  std::string get_or_create(const ArtifactKey& key,
                            const std::function<std::string()>& produce) {
    std::shared_ptr<Entry> entry;
    {
      std::lock_guard<std::mutex> lock(map_mutex_);
      auto& slot = entries_[key];
      if (!slot) slot = std::make_shared<Entry>();
      entry = slot;
    }
    std::call_once(entry->once, [&] { entry->value = produce(); });
    return entry->value;
  }

 private:
  struct Entry {
    std::once_flag once;
    std::string value;
  };

  std::mutex map_mutex_;
  std::unordered_map<ArtifactKey, std::shared_ptr<Entry>, ArtifactKeyHash>
      entries_;
};

}  // namespace swejudge::strategies
