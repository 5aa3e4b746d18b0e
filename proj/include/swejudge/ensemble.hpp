/// @file ensemble.hpp
/// Team enumeration, trial-based team selection, score ensembling, linear
/// mapping onto the dataset scale, and the end-to-end evaluation pipeline.
///
/// The pipeline shape: draw a small annotated trial set, evaluate every
/// strategy variant on it once, pick the team whose averaged scores correlate
/// best with the human annotations, then score the remaining samples with
/// that team only (trial records are reused, never recomputed).
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "swejudge/backend.hpp"
#include "swejudge/core.hpp"
#include "swejudge/stats.hpp"
#include "swejudge/strategies.hpp"

namespace swejudge::ensemble {

using strategies::StrategyId;

/// A set of 2..6 ensemble-eligible strategy variants, kept sorted in the
/// canonical P1a < P1b < P2 < P3 < P4 < P5 order (which is also
/// lexicographic order of the names).
struct Team {
  std::vector<StrategyId> members;

  void validate() const {
    if (members.size() < 2)
      throw UsageError("a team needs at least two strategy variants");
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (!strategies::is_ensemble_eligible(members[i]))
        throw UsageError("P0 is the vanilla baseline and cannot join a team");
      if (i > 0 && !(members[i - 1] < members[i]))
        throw UsageError("team members must be distinct");
    }
  }

  bool contains(StrategyId s) const {
    return std::find(members.begin(), members.end(), s) != members.end();
  }

  std::string to_string() const {
    std::string out;
    for (const auto m : members) {
      if (!out.empty()) out.push_back(',');
      out += strategies::name(m);
    }
    return out;
  }

  /// Parses "P1b,P3" style lists. Misuse (unknown name, P0, duplicates,
  /// fewer than two members) is a usage error.
  static Team parse(const std::string& csv) {
    Team team;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::size_t b = item.find_first_not_of(" \t");
      const std::size_t e = item.find_last_not_of(" \t");
      if (b == std::string::npos)
        throw UsageError("empty team member in '" + csv + "'");
      const std::string name = item.substr(b, e - b + 1);
      const auto id = strategies::strategy_from_string(name);
      if (!id)
        throw UsageError("unknown strategy variant '" + name + "'");
      team.members.push_back(*id);
    }
    std::sort(team.members.begin(), team.members.end());
    const auto dup = std::adjacent_find(team.members.begin(), team.members.end());
    if (dup != team.members.end())
      throw UsageError("duplicate team member " + std::string(strategies::name(*dup)));
    team.validate();
    return team;
  }

  bool operator==(const Team& o) const { return members == o.members; }

  /// Canonical team order: smaller team first, then lexicographic members.
  /// This is the order used both for enumeration and for tie-breaking.
  bool operator<(const Team& o) const {
    if (members.size() != o.members.size())
      return members.size() < o.members.size();
    return members < o.members;
  }
};

/// All 57 teams: every subset of the six eligible variants with at least two
/// members, ordered by size then lexicographic member list.
inline std::vector<Team> enumerate_teams() {
  const auto& pool = strategies::ensemble_eligible();
  std::vector<Team> teams;
  for (unsigned mask = 1; mask < (1u << pool.size()); ++mask) {
    if (__builtin_popcount(mask) < 2) continue;
    Team t;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (mask & (1u << i)) t.members.push_back(pool[i]);
    teams.push_back(std::move(t));
  }
  std::sort(teams.begin(), teams.end());
  return teams;
}

/// A team plus its trial-set correlations.
struct TeamTrialResult {
  Team team;
  stats::CorrelationSummary correlations;
};

/// One sample's ensembled result. `mapped` is NaN until the caller applies
/// map_to_scale; ensembling itself stays on the raw 0..100 range.
struct EnsembledScore {
  std::string sample_id;
  std::map<StrategyId, double> member_scores;
  double raw_mean = 0.0;
  double mapped = std::numeric_limits<double>::quiet_NaN();
};

/// Simple averaging: raw_mean is the arithmetic mean of the team members'
/// raw scores for this sample.
inline EnsembledScore ensemble_scores(
    const Team& team,
    const std::map<StrategyId, strategies::JudgeRecord>& records) {
  team.validate();
  EnsembledScore out;
  double sum = 0.0;
  for (const StrategyId m : team.members) {
    const auto it = records.find(m);
    if (it == records.end())
      throw ValidationError(std::string("missing judge record for team member ") +
                            strategies::name(m));
    if (out.sample_id.empty()) out.sample_id = it->second.sample_id;
    out.member_scores[m] = it->second.raw_score;
    sum += it->second.raw_score;
  }
  out.raw_mean = sum / static_cast<double>(team.members.size());
  return out;
}

/// Linear map from the raw 0..100 range onto the dataset scale:
/// raw/100 * (max - min) + min. Continuous output, no rounding.
inline double map_to_scale(double raw, const ScoreScale& scale) {
  if (!(raw >= 0.0 && raw <= 100.0))
    throw ValidationError("map_to_scale: raw score " + std::to_string(raw) +
                          " outside [0,100]");
  return raw / 100.0 * (scale.max - scale.min) + scale.min;
}

namespace detail {

/// Mapped team predictions for the trial samples, in trial order.
inline std::vector<double> team_predictions(
    const Team& team, const std::vector<EvalSample>& trial,
    const std::map<std::string, std::map<StrategyId, strategies::JudgeRecord>>&
        by_sample,
    const ScoreScale& scale) {
  std::vector<double> out;
  out.reserve(trial.size());
  for (const auto& sample : trial) {
    const auto it = by_sample.find(sample.id);
    if (it == by_sample.end())
      throw ValidationError("no judge records for trial sample '" + sample.id + "'");
    out.push_back(map_to_scale(ensemble_scores(team, it->second).raw_mean, scale));
  }
  return out;
}

}  // namespace detail

/// Scores every one of the 57 teams on the trial set and returns the winner:
/// highest avg_cor, ties broken toward the smaller then lexicographically
/// smaller team. Undefined correlations count as 0 in avg_cor, so a
/// constant-output team cannot win by vacuity.
inline TeamTrialResult select_team(
    const std::vector<EvalSample>& trial,
    const std::vector<strategies::JudgeRecord>& records,
    const ScoreScale& scale) {
  if (trial.size() < 2)
    throw ValidationError("team selection needs at least 2 trial samples");

  std::vector<double> truth;
  truth.reserve(trial.size());
  for (const auto& s : trial) {
    if (!s.human_score)
      throw ValidationError("trial sample '" + s.id + "' has no human score");
    truth.push_back(*s.human_score);
  }

  std::map<std::string, std::map<StrategyId, strategies::JudgeRecord>> by_sample;
  for (const auto& r : records) by_sample[r.sample_id][r.strategy] = r;

  std::optional<TeamTrialResult> best;
  for (const Team& team : enumerate_teams()) {
    stats::PairedScores ps{detail::team_predictions(team, trial, by_sample, scale),
                           truth};
    const auto cor = stats::compute_correlations(ps);
    // Exact comparison on purpose: enumeration order makes ties land on the
    // smaller/lexicographically earlier team, and better() keeps that rule
    // explicit if the enumeration order ever changes.
    const bool better =
        !best || cor.avg_cor > best->correlations.avg_cor ||
        (cor.avg_cor == best->correlations.avg_cor && team < best->team);
    if (better) best = TeamTrialResult{team, cor};
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
  std::size_t trial_size = 10;
  std::uint64_t seed = 42;
  /// Set to skip the trial/selection stage and score with a fixed team.
  std::optional<Team> team_override;
  /// Progress sink; called with short human-readable lines, serialized.
  std::function<void(const std::string&)> progress;
};

/// Correlation and agreement statistics over the annotated samples of a run.
struct ReportStatistics {
  stats::CorrelationSummary correlations;
  std::optional<double> kappa;
  std::size_t annotated = 0;
};

struct EvaluationReport {
  std::string dataset;
  std::string model;
  std::uint64_t seed = 0;
  std::vector<std::string> trial_ids;
  Team selected_team;
  std::optional<TeamTrialResult> trial_correlations;
  std::vector<EnsembledScore> per_sample;
  std::optional<ReportStatistics> statistics;
  backend::CallStats::Snapshot call_stats;

  nlohmann::json to_json() const;
  static EvaluationReport from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static EvaluationReport load(const std::filesystem::path& path);
};

namespace detail {

inline nlohmann::json opt_to_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

inline std::optional<double> opt_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline nlohmann::json correlations_to_json(const stats::CorrelationSummary& c) {
  return {{"tau", opt_to_json(c.tau)},
          {"spearman", opt_to_json(c.spearman)},
          {"pearson", opt_to_json(c.pearson)},
          {"avg_cor", c.avg_cor}};
}

inline stats::CorrelationSummary correlations_from_json(const nlohmann::json& j) {
  stats::CorrelationSummary c;
  c.tau = opt_from_json(j.at("tau"));
  c.spearman = opt_from_json(j.at("spearman"));
  c.pearson = opt_from_json(j.at("pearson"));
  c.avg_cor = j.at("avg_cor").get<double>();
  return c;
}

}  // namespace detail

inline nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json team_names = nlohmann::json::array();
  for (const auto m : selected_team.members)
    team_names.push_back(strategies::name(m));

  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : per_sample) {
    nlohmann::json scores = nlohmann::json::object();
    for (const auto& [id, score] : s.member_scores)
      scores[strategies::name(id)] = score;
    samples.push_back({{"id", s.sample_id},
                       {"member_scores", scores},
                       {"raw_mean", s.raw_mean},
                       {"mapped", s.mapped}});
  }

  nlohmann::json j{
      {"dataset", dataset},
      {"model", model},
      {"seed", seed},
      {"trial_ids", trial_ids},
      {"selected_team", team_names},
      {"trial_correlations",
       trial_correlations
           ? detail::correlations_to_json(trial_correlations->correlations)
           : nlohmann::json(nullptr)},
      {"per_sample", samples},
      {"statistics", nlohmann::json(nullptr)},
      {"call_stats",
       {{"live_calls", call_stats.live_calls},
        {"cache_hits", call_stats.cache_hits},
        {"prompt_chars", call_stats.prompt_chars},
        {"reply_chars", call_stats.reply_chars}}}};
  if (statistics) {
    nlohmann::json st = detail::correlations_to_json(statistics->correlations);
    st["kappa"] = detail::opt_to_json(statistics->kappa);
    st["annotated"] = statistics->annotated;
    j["statistics"] = st;
  }
  return j;
}

inline EvaluationReport EvaluationReport::from_json(const nlohmann::json& j) {
  EvaluationReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.trial_ids = j.at("trial_ids").get<std::vector<std::string>>();
  for (const auto& name : j.at("selected_team")) {
    const auto id = strategies::strategy_from_string(name.get<std::string>());
    if (!id)
      throw ValidationError("report: unknown strategy '" +
                            name.get<std::string>() + "' in selected_team");
    r.selected_team.members.push_back(*id);
  }
  std::sort(r.selected_team.members.begin(), r.selected_team.members.end());
  if (!j.at("trial_correlations").is_null()) {
    TeamTrialResult t;
    t.team = r.selected_team;
    t.correlations = detail::correlations_from_json(j.at("trial_correlations"));
    r.trial_correlations = std::move(t);
  }
  for (const auto& s : j.at("per_sample")) {
    EnsembledScore e;
    e.sample_id = s.at("id").get<std::string>();
    e.raw_mean = s.at("raw_mean").get<double>();
    e.mapped = s.at("mapped").get<double>();
    for (const auto& [name, score] : s.at("member_scores").items()) {
      const auto id = strategies::strategy_from_string(name);
      if (!id)
        throw ValidationError("report: unknown strategy '" + name +
                              "' in member_scores");
      e.member_scores[*id] = score.get<double>();
    }
    r.per_sample.push_back(std::move(e));
  }
  if (!j.at("statistics").is_null()) {
    ReportStatistics st;
    st.correlations = detail::correlations_from_json(j.at("statistics"));
    st.kappa = detail::opt_from_json(j.at("statistics").at("kappa"));
    st.annotated = j.at("statistics").at("annotated").get<std::size_t>();
    r.statistics = std::move(st);
  }
  const auto& cs = j.at("call_stats");
  r.call_stats.live_calls = cs.at("live_calls").get<std::uint64_t>();
  r.call_stats.cache_hits = cs.at("cache_hits").get<std::uint64_t>();
  r.call_stats.prompt_chars = cs.at("prompt_chars").get<std::uint64_t>();
  r.call_stats.reply_chars = cs.at("reply_chars").get<std::uint64_t>();
  return r;
}

inline void EvaluationReport::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw ValidationError("cannot write report: " + path.string());
  out << to_json().dump(2) << "\n";
}

inline EvaluationReport EvaluationReport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open report: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("report " + path.string() + ": invalid JSON: " +
                          e.what());
  }
  return from_json(j);
}

namespace detail {

struct ScoredReply {
  double score = 50.0;
  std::string reply;
  std::optional<std::string> note;
};

/// Completes the conversation and parses a score; one fresh retry on an
/// unparseable reply, then the neutral fallback 50 with an audit note.
inline ScoredReply score_with_retry(backend::JudgeBackend& be,
                                    const strategies::Conversation& conv,
                                    const backend::CallContext& ctx) {
  ScoredReply out;
  out.reply = be.complete(conv, ctx);
  if (auto s = strategies::parse_score(out.reply)) {
    out.score = *s;
    return out;
  }
  out.reply = be.complete(conv, ctx, /*bypass_cache=*/true);
  if (auto s = strategies::parse_score(out.reply)) {
    out.score = *s;
    out.note = "score parsed on retry";
    return out;
  }
  out.score = 50.0;
  out.note = "unparseable";
  return out;
}

/// Produces the shared phase-1 artifact (tests or properties) with one fresh
/// retry if the model returns blank output.
inline std::string produce_artifact(backend::JudgeBackend& be,
                                    const strategies::Conversation& conv,
                                    const backend::CallContext& ctx) {
  const auto blank = [](const std::string& s) {
    return s.find_first_not_of(" \t\r\n") == std::string::npos;
  };
  std::string reply = be.complete(conv, ctx);
  if (blank(reply)) reply = be.complete(conv, ctx, /*bypass_cache=*/true);
  return reply;
}

inline strategies::Conversation with_reply(strategies::Conversation conv,
                                           const std::string& reply) {
  conv.turns.push_back({strategies::Role::assistant, reply});
  return conv;
}

inline std::optional<std::string> join_notes(
    const std::optional<std::string>& a, const std::optional<std::string>& b) {
  if (a && b) return *a + "; " + *b;
  if (a) return a;
  return b;
}

/// Evaluates the requested variants for one sample, in canonical order so a
/// P1b record is available by the time P2 wants to reuse its first phase.
inline std::map<StrategyId, strategies::JudgeRecord> evaluate_sample(
    const EvalSample& sample, const std::vector<StrategyId>& variants,
    TaskKind task, const strategies::TemplateLibrary& lib,
    backend::JudgeBackend& be, strategies::SharedArtifactCache& artifacts) {
  std::map<StrategyId, strategies::JudgeRecord> records;

  const auto single_phase = [&](StrategyId id,
                                const strategies::Conversation& conv) {
    const auto sr = score_with_retry(be, conv, {sample.id, id, 1});
    strategies::JudgeRecord rec;
    rec.sample_id = sample.id;
    rec.strategy = id;
    rec.raw_score = sr.score;
    rec.transcript = {with_reply(conv, sr.reply)};
    rec.parse_note = sr.note;
    records[id] = std::move(rec);
  };

  // Two-phase strategies whose phase 1 derives a shareable artifact from
  // (requirement, reference). A blank artifact is a strategy-level failure:
  // the fallback score applies and phase 2 is not attempted.
  const auto artifact_strategy =
      [&](StrategyId id, const strategies::Conversation& phase1_conv,
          const std::function<strategies::Conversation(const std::string&)>&
              build_phase2) {
        const std::string artifact = artifacts.get_or_create(
            strategies::make_artifact_key(id, sample), [&] {
              return produce_artifact(be, phase1_conv, {sample.id, id, 1});
            });
        strategies::JudgeRecord rec;
        rec.sample_id = sample.id;
        rec.strategy = id;
        rec.transcript = {with_reply(phase1_conv, artifact)};
        if (artifact.find_first_not_of(" \t\r\n") == std::string::npos) {
          rec.raw_score = 50.0;
          rec.parse_note = "generation phase produced no output";
        } else {
          const auto conv2 = build_phase2(artifact);
          const auto sr = score_with_retry(be, conv2, {sample.id, id, 2});
          rec.raw_score = sr.score;
          rec.transcript.push_back(with_reply(conv2, sr.reply));
          rec.parse_note = sr.note;
        }
        records[id] = std::move(rec);
      };

  for (const StrategyId id : variants) {
    switch (id) {
      case StrategyId::P0:
        single_phase(id, strategies::build_p0(sample, task, lib));
        break;
      case StrategyId::P1a:
        single_phase(id, strategies::build_p1(sample, false, task, lib));
        break;
      case StrategyId::P1b:
        single_phase(id, strategies::build_p1(sample, true, task, lib));
        break;
      case StrategyId::P3:
        single_phase(id, strategies::build_p3(sample, task, lib));
        break;
      case StrategyId::P2: {
        strategies::Conversation phase1_conv;
        std::string phase1_reply;
        double phase1_score = 50.0;
        std::optional<std::string> phase1_note;
        if (const auto it = records.find(StrategyId::P1b); it != records.end()) {
          // Reuse the P1b exchange instead of paying for a duplicate call.
          const auto& p1b = it->second;
          phase1_conv = p1b.transcript.front();
          phase1_reply = phase1_conv.turns.back().content;
          phase1_conv.turns.pop_back();
          phase1_score = p1b.raw_score;
        } else {
          phase1_conv = strategies::build_p1(sample, true, task, lib);
          const auto sr =
              score_with_retry(be, phase1_conv, {sample.id, StrategyId::P1b, 1});
          phase1_reply = sr.reply;
          phase1_score = sr.score;
          phase1_note = sr.note;
        }
        const auto conv2 =
            strategies::build_p2(sample, phase1_reply, phase1_score, task, lib);
        const auto sr2 = score_with_retry(be, conv2, {sample.id, id, 2});
        strategies::JudgeRecord rec;
        rec.sample_id = sample.id;
        rec.strategy = id;
        rec.raw_score = sr2.score;
        rec.transcript = {with_reply(phase1_conv, phase1_reply),
                          with_reply(conv2, sr2.reply)};
        rec.parse_note = join_notes(phase1_note, sr2.note);
        records[id] = std::move(rec);
        break;
      }
      case StrategyId::P4:
        artifact_strategy(id, strategies::build_p4_phase1(sample, task, lib),
                          [&](const std::string& tests) {
                            return strategies::build_p4_phase2(sample, tests,
                                                               task, lib);
                          });
        break;
      case StrategyId::P5:
        artifact_strategy(id, strategies::build_p5_phase1(sample, task, lib),
                          [&](const std::string& props) {
                            return strategies::build_p5_phase2(sample, props,
                                                               task, lib);
                          });
        break;
    }
  }
  return records;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first thrown
/// exception stops dispatch and is rethrown after all workers join.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      while (!failed.load(std::memory_order_relaxed)) {
        const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          failed.store(true, std::memory_order_relaxed);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

/// Thrown when a backend failure (or cancellation) stops a run midway.
/// `partial` carries whatever was completed so the caller can persist it.
class PipelineAborted : public BackendError {
 public:
  PipelineAborted(const std::string& what, EvaluationReport partial_report)
      : BackendError(what), partial(std::move(partial_report)) {}

  EvaluationReport partial;
};

/// End-to-end run over one dataset. See the file comment for the stages.
/// Strategy-level problems (unparseable replies, blank generations) degrade
/// to the fallback score per sample; backend-level failures abort the run.
inline EvaluationReport run_pipeline(const Dataset& dataset,
                                     backend::JudgeBackend& be,
                                     const strategies::TemplateLibrary& lib,
                                     const PipelineOptions& options = {}) {
  if (dataset.samples.empty())
    throw ValidationError("dataset '" + dataset.manifest.name +
                          "' has no samples");
  if (options.team_override) options.team_override->validate();

  std::mutex progress_mutex;
  const auto progress = [&](const std::string& line) {
    if (!options.progress) return;
    std::lock_guard<std::mutex> lock(progress_mutex);
    options.progress(line);
  };

  const TaskKind task = dataset.manifest.task_kind;
  const ScoreScale& scale = dataset.manifest.scale;
  const std::size_t workers =
      static_cast<std::size_t>(be.config().max_concurrency);
  strategies::SharedArtifactCache artifacts;

  EvaluationReport report;
  report.dataset = dataset.manifest.name;
  report.model = be.config().model_name;
  report.seed = options.seed;

  // Records for every sample, filled stage by stage.
  std::map<std::string, std::map<StrategyId, strategies::JudgeRecord>> by_sample;
  std::mutex by_sample_mutex;

  Team team;

  // On a mid-run backend failure, everything completed so far is packaged
  // into the exception so callers can write a partial-results file.
  const auto abort_with_partial = [&](const BackendError& e) -> void {
    EvaluationReport partial = report;
    partial.selected_team = team;
    partial.call_stats = be.stats();
    if (!team.members.empty()) {
      for (const auto& sample : dataset.samples) {
        const auto it = by_sample.find(sample.id);
        if (it == by_sample.end()) continue;
        bool complete = true;
        for (const StrategyId m : team.members)
          complete = complete && it->second.count(m) > 0;
        if (!complete) continue;
        EnsembledScore score = ensemble_scores(team, it->second);
        score.sample_id = sample.id;
        score.mapped = map_to_scale(score.raw_mean, scale);
        partial.per_sample.push_back(std::move(score));
      }
    }
    throw PipelineAborted(e.what(), std::move(partial));
  };

  try {
    if (options.team_override) {
      team = *options.team_override;
      progress("team override: " + team.to_string() + "; trial skipped");
    } else {
      const std::vector<EvalSample> trial =
          sample_trial_set(dataset.samples, options.trial_size, options.seed);
      for (const auto& s : trial) report.trial_ids.push_back(s.id);
      progress("trial set: " + std::to_string(trial.size()) + " samples");

      const std::vector<StrategyId> all(strategies::ensemble_eligible().begin(),
                                        strategies::ensemble_eligible().end());
      detail::parallel_for(trial.size(), workers, [&](std::size_t i) {
        auto records =
            detail::evaluate_sample(trial[i], all, task, lib, be, artifacts);
        {
          std::lock_guard<std::mutex> lock(by_sample_mutex);
          by_sample[trial[i].id] = std::move(records);
        }
        progress("trial sample " + trial[i].id + " evaluated");
      });

      std::vector<strategies::JudgeRecord> trial_records;
      for (const auto& s : trial)
        for (const auto& [id, rec] : by_sample.at(s.id))
          trial_records.push_back(rec);

      TeamTrialResult winner = select_team(trial, trial_records, scale);
      team = winner.team;
      report.trial_correlations = std::move(winner);
      progress("selected team " + team.to_string());
    }
    report.selected_team = team;

    // Score the rest of the dataset with the chosen team only; trial records
    // are reused as-is.
    std::vector<std::size_t> remaining;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i)
      if (by_sample.find(dataset.samples[i].id) == by_sample.end())
        remaining.push_back(i);

    detail::parallel_for(remaining.size(), workers, [&](std::size_t k) {
      const EvalSample& sample = dataset.samples[remaining[k]];
      auto records = detail::evaluate_sample(sample, team.members, task, lib,
                                             be, artifacts);
      {
        std::lock_guard<std::mutex> lock(by_sample_mutex);
        by_sample[sample.id] = std::move(records);
      }
      progress("sample " + sample.id + " evaluated");
    });
  } catch (const PipelineAborted&) {
    throw;
  } catch (const BackendError& e) {
    abort_with_partial(e);
  }

  // Ensemble, map, and collect validation statistics.
  std::vector<double> predicted, truth, predicted_labels, truth_labels;
  for (const auto& sample : dataset.samples) {
    EnsembledScore score = ensemble_scores(team, by_sample.at(sample.id));
    score.sample_id = sample.id;
    score.mapped = map_to_scale(score.raw_mean, scale);
    if (sample.human_score) {
      predicted.push_back(score.mapped);
      truth.push_back(*sample.human_score);
      predicted_labels.push_back(stats::discretize(score.mapped, scale));
      truth_labels.push_back(stats::discretize(*sample.human_score, scale));
    }
    report.per_sample.push_back(std::move(score));
  }

  if (predicted.size() >= 2) {
    ReportStatistics st;
    st.correlations = stats::compute_correlations({predicted, truth});
    st.kappa = stats::cohen_kappa(predicted_labels, truth_labels, scale);
    st.annotated = predicted.size();
    report.statistics = std::move(st);
  }

  report.call_stats = be.stats();
  progress("run complete: " + std::to_string(report.per_sample.size()) +
           " samples scored");
  return report;
}

}  // namespace swejudge::ensemble
