/// @file ensemble_test.cpp
/// Team enumeration and parsing, score ensembling, scale mapping, trial-based
/// team selection and the end-to-end pipeline on scripted backends.

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "swejudge/ensemble.hpp"
#include "temp_dir.hpp"

namespace swejudge::ensemble {
namespace {

using backend::BackendConfig;
using backend::BackendKind;
using backend::JudgeBackend;
using backend::MockScript;
using strategies::JudgeRecord;
using strategies::StrategyId;

const strategies::TemplateLibrary& lib() {
  static const strategies::TemplateLibrary instance(SWEJ_TEMPLATE_DIR);
  return instance;
}

TEST(TeamTest, ParseSortsAndTrims) {
  const Team t = Team::parse(" P3 , P1b ");
  ASSERT_EQ(t.members.size(), 2u);
  EXPECT_EQ(t.members[0], StrategyId::P1b);
  EXPECT_EQ(t.members[1], StrategyId::P3);
  EXPECT_EQ(t.to_string(), "P1b,P3");
  EXPECT_TRUE(t.contains(StrategyId::P3));
  EXPECT_FALSE(t.contains(StrategyId::P4));
}

TEST(TeamTest, ParseRejectsMisuse) {
  EXPECT_THROW(Team::parse("P1b"), UsageError);
  EXPECT_THROW(Team::parse(""), UsageError);
  EXPECT_THROW(Team::parse("P1b,,P3"), UsageError);
  EXPECT_THROW(Team::parse("P1b,P9"), UsageError);
  EXPECT_THROW(Team::parse("P1b,P1b"), UsageError);
  try {
    Team::parse("P0,P1a");
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("vanilla baseline"), std::string::npos)
        << e.what();
  }
}

TEST(TeamTest, OrderIsSizeThenLexicographic) {
  const Team ab{{StrategyId::P1a, StrategyId::P1b}};
  const Team a3{{StrategyId::P1a, StrategyId::P3}};
  const Team abc{{StrategyId::P1a, StrategyId::P1b, StrategyId::P2}};
  EXPECT_TRUE(ab < a3);
  EXPECT_TRUE(a3 < abc);
  EXPECT_TRUE(ab < abc);
  EXPECT_FALSE(ab < ab);
}

TEST(TeamTest, EnumerationCoversAll57Subsets) {
  const auto teams = enumerate_teams();
  ASSERT_EQ(teams.size(), 57u);

  std::set<std::string> names;
  std::map<std::size_t, int> by_size;
  for (const auto& t : teams) {
    EXPECT_NO_THROW(t.validate());
    names.insert(t.to_string());
    ++by_size[t.members.size()];
  }
  EXPECT_EQ(names.size(), 57u) << "teams must be distinct";
  EXPECT_EQ(by_size[2], 15);
  EXPECT_EQ(by_size[3], 20);
  EXPECT_EQ(by_size[4], 15);
  EXPECT_EQ(by_size[5], 6);
  EXPECT_EQ(by_size[6], 1);

  for (std::size_t i = 1; i < teams.size(); ++i)
    EXPECT_TRUE(teams[i - 1] < teams[i]) << "enumeration must be sorted";
  EXPECT_EQ(teams.front().to_string(), "P1a,P1b");
  EXPECT_EQ(teams.back().to_string(), "P1a,P1b,P2,P3,P4,P5");
}

std::map<StrategyId, JudgeRecord> records_for(
    const std::string& id, std::map<StrategyId, double> scores) {
  std::map<StrategyId, JudgeRecord> out;
  for (const auto& [strat, score] : scores) {
    JudgeRecord r;
    r.sample_id = id;
    r.strategy = strat;
    r.raw_score = score;
    out[strat] = std::move(r);
  }
  return out;
}

TEST(EnsembleScoresTest, AveragesMemberScores) {
  const Team team{{StrategyId::P1a, StrategyId::P1b, StrategyId::P3}};
  const auto recs = records_for("s1", {{StrategyId::P1a, 60.0},
                                       {StrategyId::P1b, 70.0},
                                       {StrategyId::P3, 80.0},
                                       {StrategyId::P4, 999.0}});
  const auto e = ensemble_scores(team, recs);
  EXPECT_EQ(e.sample_id, "s1");
  EXPECT_DOUBLE_EQ(e.raw_mean, 70.0);
  EXPECT_EQ(e.member_scores.size(), 3u);
  EXPECT_DOUBLE_EQ(e.member_scores.at(StrategyId::P1b), 70.0);
  EXPECT_TRUE(std::isnan(e.mapped)) << "mapping happens downstream";

  const Team pair{{StrategyId::P1a, StrategyId::P1b}};
  const auto recs2 = records_for(
      "s2", {{StrategyId::P1a, 0.0}, {StrategyId::P1b, 100.0}});
  EXPECT_DOUBLE_EQ(ensemble_scores(pair, recs2).raw_mean, 50.0);
}

TEST(EnsembleScoresTest, MissingMemberIsAnError) {
  const Team team{{StrategyId::P1a, StrategyId::P5}};
  const auto recs = records_for("s1", {{StrategyId::P1a, 60.0}});
  try {
    ensemble_scores(team, recs);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("P5"), std::string::npos) << e.what();
  }
}

TEST(MapToScaleTest, EndpointsAndInteriorAreExact) {
  const ScoreScale s15{1, 5, 1};
  EXPECT_EQ(map_to_scale(0.0, s15), 1.0);
  EXPECT_EQ(map_to_scale(100.0, s15), 5.0);
  EXPECT_EQ(map_to_scale(75.0, s15), 4.0);
  EXPECT_EQ(map_to_scale(50.0, s15), 3.0);

  const ScoreScale s04{0, 4, 1};
  EXPECT_EQ(map_to_scale(25.0, s04), 1.0);

  const ScoreScale s01{0, 100, 1};
  for (double raw : {0.0, 12.5, 33.0, 99.0, 100.0})
    EXPECT_DOUBLE_EQ(map_to_scale(raw, s01), raw);

  EXPECT_THROW(map_to_scale(-0.5, s15), ValidationError);
  EXPECT_THROW(map_to_scale(100.5, s15), ValidationError);
  EXPECT_THROW(map_to_scale(std::nan(""), s15), ValidationError);
}

TEST(MapToScaleTest, CommutesWithAveraging) {
  // Mapping is affine, so ensembling raw scores then mapping equals mapping
  // each member then averaging.
  std::mt19937_64 rng(5150);
  std::uniform_real_distribution<double> raw(0.0, 100.0);
  const ScoreScale scales[] = {{1, 5, 0.5}, {0, 4, 1}, {0, 1, 1}, {10, 90, 2}};
  for (const auto& scale : scales) {
    for (int it = 0; it < 200; ++it) {
      double sum_raw = 0.0, sum_mapped = 0.0;
      const int k = 2 + it % 5;
      for (int i = 0; i < k; ++i) {
        const double r = raw(rng);
        sum_raw += r;
        sum_mapped += map_to_scale(r, scale);
      }
      EXPECT_NEAR(map_to_scale(sum_raw / k, scale), sum_mapped / k, 1e-9);
    }
  }
}

/// Five trial samples whose P1b/P3 mean is an exact affine function of the
/// human score while every other variant is constant: the pair {P1b,P3} and
/// all of its supersets hit avg_cor 1.0, and the tie-break must land on the
/// pair itself.
struct SelectionFixture {
  std::vector<EvalSample> trial;
  std::vector<JudgeRecord> records;
  ScoreScale scale{0, 4, 1};

  SelectionFixture() {
    const std::vector<double> human{4, 1, 2, 0, 3};
    const std::vector<double> p1b{80, 45, 40, 10, 60};
    const std::vector<double> p3{70, 30, 60, 40, 65};
    for (std::size_t i = 0; i < human.size(); ++i) {
      EvalSample s;
      s.id = "t-" + std::to_string(i + 1);
      s.requirement = "req";
      s.candidate = "cand";
      s.reference = "ref";
      s.human_score = human[i];
      trial.push_back(s);
      for (const StrategyId strat : strategies::ensemble_eligible()) {
        JudgeRecord r;
        r.sample_id = s.id;
        r.strategy = strat;
        if (strat == StrategyId::P1b)
          r.raw_score = p1b[i];
        else if (strat == StrategyId::P3)
          r.raw_score = p3[i];
        else
          r.raw_score = 50.0;
        records.push_back(std::move(r));
      }
    }
  }
};

TEST(SelectTeamTest, PicksTheBestCorrelatedTeam) {
  const SelectionFixture fx;
  const auto winner = select_team(fx.trial, fx.records, fx.scale);
  EXPECT_EQ(winner.team.to_string(), "P1b,P3");
  EXPECT_DOUBLE_EQ(winner.correlations.avg_cor, 1.0);
  EXPECT_DOUBLE_EQ(*winner.correlations.tau, 1.0);
  EXPECT_DOUBLE_EQ(*winner.correlations.spearman, 1.0);
  EXPECT_DOUBLE_EQ(*winner.correlations.pearson, 1.0);
}

TEST(SelectTeamTest, MatchesExhaustiveEnumeration) {
  const SelectionFixture fx;

  std::map<std::string, std::map<StrategyId, JudgeRecord>> by_sample;
  for (const auto& r : fx.records) by_sample[r.sample_id][r.strategy] = r;
  std::vector<double> truth;
  for (const auto& s : fx.trial) truth.push_back(*s.human_score);

  std::optional<Team> best_team;
  double best_avg = 0.0;
  for (const Team& team : enumerate_teams()) {
    std::vector<double> preds;
    for (const auto& s : fx.trial)
      preds.push_back(map_to_scale(
          ensemble_scores(team, by_sample.at(s.id)).raw_mean, fx.scale));
    const auto cor = stats::compute_correlations({preds, truth});
    if (!best_team || cor.avg_cor > best_avg ||
        (cor.avg_cor == best_avg && team < *best_team)) {
      best_team = team;
      best_avg = cor.avg_cor;
    }
  }

  const auto winner = select_team(fx.trial, fx.records, fx.scale);
  EXPECT_EQ(winner.team, *best_team);
  EXPECT_DOUBLE_EQ(winner.correlations.avg_cor, best_avg);
}

TEST(SelectTeamTest, TieBreakPrefersSmallerTeams) {
  const SelectionFixture fx;
  std::map<std::string, std::map<StrategyId, JudgeRecord>> by_sample;
  for (const auto& r : fx.records) by_sample[r.sample_id][r.strategy] = r;
  std::vector<double> truth;
  for (const auto& s : fx.trial) truth.push_back(*s.human_score);

  // The superset {P1b,P3,P4} provably ties at 1.0 (adding a constant keeps
  // the mean affine in the human score)...
  const Team superset{{StrategyId::P1b, StrategyId::P3, StrategyId::P4}};
  std::vector<double> preds;
  for (const auto& s : fx.trial)
    preds.push_back(map_to_scale(
        ensemble_scores(superset, by_sample.at(s.id)).raw_mean, fx.scale));
  const auto cor = stats::compute_correlations({preds, truth});
  ASSERT_DOUBLE_EQ(cor.avg_cor, 1.0) << "fixture must force a genuine tie";

  // ...yet the selected winner is the two-member team.
  const auto winner = select_team(fx.trial, fx.records, fx.scale);
  EXPECT_EQ(winner.team.members.size(), 2u);
  EXPECT_EQ(winner.team.to_string(), "P1b,P3");
}

TEST(SelectTeamTest, RejectsBadTrials) {
  const SelectionFixture fx;
  std::vector<EvalSample> tiny(fx.trial.begin(), fx.trial.begin() + 1);
  EXPECT_THROW(select_team(tiny, fx.records, fx.scale), ValidationError);

  auto unannotated = fx.trial;
  unannotated[2].human_score.reset();
  EXPECT_THROW(select_team(unannotated, fx.records, fx.scale),
               ValidationError);

  std::vector<JudgeRecord> missing(fx.records.begin(), fx.records.end() - 6);
  EXPECT_THROW(select_team(fx.trial, missing, fx.scale), ValidationError);
}

TEST(ReportTest, JsonRoundTripPreservesEverything) {
  EvaluationReport r;
  r.dataset = "toy";
  r.model = "gpt-4o-mini-2024-07-18";
  r.seed = 42;
  r.trial_ids = {"a", "b"};
  r.selected_team = Team::parse("P1b,P3");
  TeamTrialResult t;
  t.team = r.selected_team;
  t.correlations = {0.5, std::nullopt, 0.25, 0.25};
  r.trial_correlations = t;
  EnsembledScore s;
  s.sample_id = "a";
  s.member_scores = {{StrategyId::P1b, 80.0}, {StrategyId::P3, 60.0}};
  s.raw_mean = 70.0;
  s.mapped = 3.8;
  r.per_sample.push_back(s);
  ReportStatistics st;
  st.correlations = {1.0, 1.0, 1.0, 1.0};
  st.kappa = std::nullopt;
  st.annotated = 2;
  r.statistics = st;
  r.call_stats = {3, 14, 1590, 265};

  const auto j = r.to_json();
  const auto rt = EvaluationReport::from_json(j);
  EXPECT_EQ(rt.dataset, "toy");
  EXPECT_EQ(rt.model, r.model);
  EXPECT_EQ(rt.seed, 42u);
  EXPECT_EQ(rt.trial_ids, r.trial_ids);
  EXPECT_EQ(rt.selected_team, r.selected_team);
  ASSERT_TRUE(rt.trial_correlations.has_value());
  EXPECT_DOUBLE_EQ(*rt.trial_correlations->correlations.tau, 0.5);
  EXPECT_FALSE(rt.trial_correlations->correlations.spearman.has_value());
  ASSERT_EQ(rt.per_sample.size(), 1u);
  EXPECT_EQ(rt.per_sample[0].sample_id, "a");
  EXPECT_DOUBLE_EQ(rt.per_sample[0].raw_mean, 70.0);
  EXPECT_DOUBLE_EQ(rt.per_sample[0].mapped, 3.8);
  EXPECT_DOUBLE_EQ(rt.per_sample[0].member_scores.at(StrategyId::P3), 60.0);
  ASSERT_TRUE(rt.statistics.has_value());
  EXPECT_FALSE(rt.statistics->kappa.has_value());
  EXPECT_EQ(rt.statistics->annotated, 2u);
  EXPECT_EQ(rt.call_stats.cache_hits, 14u);
  EXPECT_EQ(rt.call_stats.prompt_chars, 1590u);

  // Round trip through JSON text is stable.
  EXPECT_EQ(rt.to_json().dump(2), j.dump(2));
}

TEST(ReportTest, EmptyMemberScoresStayAnObject) {
  EvaluationReport r;
  r.selected_team = Team::parse("P1a,P1b");
  EnsembledScore s;
  s.sample_id = "x";
  r.per_sample.push_back(s);
  const auto j = r.to_json();
  EXPECT_TRUE(j.at("per_sample")[0].at("member_scores").is_object());
  EXPECT_TRUE(j.at("statistics").is_null());
  EXPECT_TRUE(j.at("trial_correlations").is_null());
}

class ReportFsTest : public testing::TempDirTest {};

TEST_F(ReportFsTest, SaveLoadRoundTrip) {
  EvaluationReport r;
  r.dataset = "d";
  r.model = "m";
  r.selected_team = Team::parse("P4,P5");
  r.save(path("report.json"));
  const auto rt = EvaluationReport::load(path("report.json"));
  EXPECT_EQ(rt.dataset, "d");
  EXPECT_EQ(rt.selected_team.to_string(), "P4,P5");

  EXPECT_THROW(EvaluationReport::load(path("missing.json")), ValidationError);
  EXPECT_THROW(EvaluationReport::load(write_file("bad.json", "{")),
               ValidationError);
}

// ---------------------------------------------------------------------------
// Pipeline

Dataset perfect_dataset() {
  Dataset ds;
  ds.manifest.name = "pipe-toy";
  ds.manifest.task_kind = TaskKind::code_generation;
  ds.manifest.scale = {0, 4, 1};
  const std::vector<std::optional<double>> human{
      4, 2, 1, 3, 0, 2, 4, 1, 3, 2, std::nullopt, std::nullopt};
  for (std::size_t i = 0; i < human.size(); ++i) {
    EvalSample s;
    s.id = "p-" + std::to_string(i + 1);
    s.requirement = "implement operation " + std::to_string(i + 1);
    s.candidate = "int op" + std::to_string(i + 1) + "() { return 1; }";
    s.reference = "int op" + std::to_string(i + 1) + "() { return 2; }";
    s.human_score = human[i];
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

class PipelineTest : public testing::TempDirTest {
 protected:
  BackendConfig mock_config(int concurrency = 4) {
    BackendConfig c;
    c.kind = BackendKind::mock;
    c.cache_dir = path("cache");
    c.max_concurrency = concurrency;
    return c;
  }
};

TEST_F(PipelineTest, PerfectJudgeRecoversHumanRanking) {
  const Dataset ds = perfect_dataset();
  JudgeBackend be(mock_config(), MockScript::perfect_judge(ds));
  PipelineOptions options;
  options.trial_size = 10;
  options.seed = 42;

  const auto report = run_pipeline(ds, be, lib(), options);

  EXPECT_EQ(report.dataset, "pipe-toy");
  EXPECT_EQ(report.seed, 42u);
  EXPECT_EQ(report.trial_ids.size(), 10u);
  ASSERT_TRUE(report.trial_correlations.has_value());
  EXPECT_DOUBLE_EQ(report.trial_correlations->correlations.avg_cor, 1.0);

  // Every variant echoes the human score, so every team ties at 1.0 and the
  // canonical tie-break selects the first pair.
  EXPECT_EQ(report.selected_team.to_string(), "P1a,P1b");

  ASSERT_EQ(report.per_sample.size(), ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(report.per_sample[i].sample_id, ds.samples[i].id)
        << "per-sample rows follow dataset order";
    if (ds.samples[i].human_score)
      EXPECT_DOUBLE_EQ(report.per_sample[i].mapped,
                       *ds.samples[i].human_score);
    else
      EXPECT_DOUBLE_EQ(report.per_sample[i].mapped, 2.0)
          << "unannotated samples score the neutral 50 -> mid-scale";
  }

  ASSERT_TRUE(report.statistics.has_value());
  EXPECT_EQ(report.statistics->annotated, 10u);
  EXPECT_EQ(*report.statistics->correlations.tau, 1.0);
  EXPECT_EQ(*report.statistics->correlations.spearman, 1.0);
  EXPECT_EQ(*report.statistics->correlations.pearson, 1.0);
  EXPECT_EQ(*report.statistics->kappa, 1.0);
  EXPECT_EQ(report.call_stats.live_calls, 0u);
}

TEST_F(PipelineTest, DeterministicAcrossRunsAndConcurrency) {
  const Dataset ds = perfect_dataset();
  PipelineOptions options;
  options.trial_size = 6;
  options.seed = 7;

  std::optional<nlohmann::json> first;
  for (int concurrency : {1, 4, 8}) {
    JudgeBackend be(mock_config(concurrency), MockScript::perfect_judge(ds));
    const auto report = run_pipeline(ds, be, lib(), options);
    auto j = report.to_json();
    // Call ordering varies with the thread count; drop the only field
    // allowed to differ before comparing.
    j.erase("call_stats");
    if (!first)
      first = j;
    else
      EXPECT_EQ(j.dump(), first->dump()) << "concurrency " << concurrency;
  }
}

TEST_F(PipelineTest, TeamOverrideSkipsTrial) {
  const Dataset ds = perfect_dataset();
  JudgeBackend be(mock_config(), MockScript::perfect_judge(ds));
  PipelineOptions options;
  options.team_override = Team::parse("P3,P5");

  const auto report = run_pipeline(ds, be, lib(), options);
  EXPECT_TRUE(report.trial_ids.empty());
  EXPECT_FALSE(report.trial_correlations.has_value());
  EXPECT_EQ(report.selected_team.to_string(), "P3,P5");
  ASSERT_EQ(report.per_sample.size(), ds.samples.size());
  for (const auto& row : report.per_sample) {
    EXPECT_EQ(row.member_scores.size(), 2u);
    EXPECT_TRUE(row.member_scores.count(StrategyId::P3));
    EXPECT_TRUE(row.member_scores.count(StrategyId::P5));
  }
}

TEST_F(PipelineTest, InvalidOverrideAndEmptyDatasetFailFast) {
  const Dataset ds = perfect_dataset();
  JudgeBackend be(mock_config(), MockScript::perfect_judge(ds));

  PipelineOptions bad;
  bad.team_override = Team{{StrategyId::P0, StrategyId::P1a}};
  EXPECT_THROW(run_pipeline(ds, be, lib(), bad), UsageError);

  Dataset empty;
  empty.manifest = ds.manifest;
  EXPECT_THROW(run_pipeline(empty, be, lib(), {}), ValidationError);

  Dataset unannotated = ds;
  for (auto& s : unannotated.samples) s.human_score.reset();
  EXPECT_THROW(run_pipeline(unannotated, be, lib(), {}), ValidationError);
}

TEST_F(PipelineTest, BackendFailureCarriesPartialResults) {
  Dataset ds = perfect_dataset();
  auto script = MockScript::perfect_judge(ds);
  PipelineOptions options;
  options.trial_size = 10;  // all 10 annotated samples
  options.seed = 42;

  // p-11 and p-12 are unannotated, so they are never in the trial; drop one
  // of their replies to detonate stage two after the trial succeeded.
  MockScript rebuilt;
  for (const auto& s : ds.samples) {
    for (const StrategyId strat : strategies::ensemble_eligible()) {
      for (int phase = 1; phase <= strategies::phase_count(strat); ++phase) {
        backend::CallContext c{s.id, strat, phase};
        const auto reply = script.lookup(c);
        if (!reply) continue;
        if (s.id == "p-12") continue;
        rebuilt.set(s.id, strat, phase, *reply);
      }
    }
  }

  JudgeBackend be(mock_config(1), rebuilt);
  try {
    run_pipeline(ds, be, lib(), options);
    FAIL() << "expected PipelineAborted";
  } catch (const PipelineAborted& e) {
    EXPECT_NE(std::string(e.what()).find("p-12"), std::string::npos)
        << e.what();
    // The trial samples were fully scored before the failure.
    EXPECT_GE(e.partial.per_sample.size(), 10u);
    EXPECT_EQ(e.partial.selected_team.to_string(), "P1a,P1b");
    for (const auto& row : e.partial.per_sample)
      EXPECT_NE(row.sample_id, "p-12");
  }
}

TEST_F(PipelineTest, RethinkReusesTheDirectAssessmentExchange) {
  Dataset ds;
  ds.manifest.name = "mini";
  ds.manifest.task_kind = TaskKind::program_repair;
  ds.manifest.scale = {0, 1, 1};
  ds.samples.push_back(
      {"m-1", "fix the off by one", "i <= n", "i < n", 1.0});

  MockScript script;
  const std::string p1b_reply = "The bound check is correct now.\nScore: 90";
  script.set("m-1", StrategyId::P1b, 1, p1b_reply);
  script.set("m-1", StrategyId::P2, 2, "Reasons validated. Score: 85");

  JudgeBackend be(mock_config(1), script);
  strategies::SharedArtifactCache artifacts;
  const auto records = detail::evaluate_sample(
      ds.samples[0], {StrategyId::P1b, StrategyId::P2},
      ds.manifest.task_kind, lib(), be, artifacts);

  ASSERT_TRUE(records.count(StrategyId::P2));
  const auto& p2 = records.at(StrategyId::P2);
  EXPECT_DOUBLE_EQ(p2.raw_score, 85.0);
  ASSERT_EQ(p2.transcript.size(), 2u);
  // Phase 1 of the record is the reused P1b exchange.
  EXPECT_EQ(p2.transcript[0].turns.back().content, p1b_reply);
  // The rethink prompt embeds the parsed score and the de-scored reasons.
  const auto& rethink = p2.transcript[1].turns;
  ASSERT_GE(rethink.size(), 3u);
  EXPECT_NE(rethink[2].content.find("90"), std::string::npos);
  EXPECT_NE(rethink[2].content.find("The bound check is correct now."),
            std::string::npos);

  // The P1b reply went over the mock wire exactly once: traffic counts the
  // reply a single time even though two strategies consumed it.
  const auto st = be.stats();
  EXPECT_EQ(st.reply_chars,
            p1b_reply.size() + std::string("Reasons validated. Score: 85").size());
}

TEST_F(PipelineTest, RethinkWithoutDirectAssessmentRunsItsOwnFirstPhase) {
  Dataset ds;
  ds.manifest.task_kind = TaskKind::code_generation;
  ds.manifest.scale = {0, 1, 1};
  ds.samples.push_back({"m-2", "req", "cand", "ref", 1.0});

  MockScript script;
  // The first phase of the rethink is the direct-assessment form, so the
  // script keys it as P1b phase 1.
  script.set("m-2", StrategyId::P1b, 1, "Edge cases look handled. Score: 75");
  script.set("m-2", StrategyId::P2, 2, "Score: 70");

  JudgeBackend be(mock_config(1), script);
  strategies::SharedArtifactCache artifacts;
  const auto records =
      detail::evaluate_sample(ds.samples[0], {StrategyId::P2},
                              ds.manifest.task_kind, lib(), be, artifacts);
  ASSERT_EQ(records.size(), 1u);
  const auto& p2 = records.at(StrategyId::P2);
  EXPECT_EQ(p2.strategy, StrategyId::P2);
  EXPECT_DOUBLE_EQ(p2.raw_score, 70.0);
  ASSERT_EQ(p2.transcript.size(), 2u);
}

TEST_F(PipelineTest, SamplesSharingInputsShareGeneratedArtifacts) {
  EvalSample a{"a-1", "same req", "cand A", "same ref", 1.0};
  EvalSample b{"b-1", "same req", "cand B", "same ref", 0.0};

  MockScript script;
  script.set("a-1", StrategyId::P4, 1, "1. assert f(0) == 0");
  script.set("a-1", StrategyId::P4, 2, "Score: 100");
  // No phase-1 entry for b-1: the artifact must come from the shared cache.
  script.set("b-1", StrategyId::P4, 2, "Score: 0");

  JudgeBackend be(mock_config(1), script);
  strategies::SharedArtifactCache artifacts;
  const auto ra = detail::evaluate_sample(a, {StrategyId::P4},
                                          TaskKind::code_generation, lib(),
                                          be, artifacts);
  const auto rb = detail::evaluate_sample(b, {StrategyId::P4},
                                          TaskKind::code_generation, lib(),
                                          be, artifacts);
  EXPECT_DOUBLE_EQ(ra.at(StrategyId::P4).raw_score, 100.0);
  EXPECT_DOUBLE_EQ(rb.at(StrategyId::P4).raw_score, 0.0);
  EXPECT_EQ(rb.at(StrategyId::P4).transcript.front().turns.back().content,
            "1. assert f(0) == 0");
}

TEST_F(PipelineTest, UnparseableRepliesFallBackToNeutralScore) {
  Dataset ds;
  ds.manifest.task_kind = TaskKind::code_generation;
  ds.manifest.scale = {0, 1, 1};
  ds.samples.push_back({"m-3", "req", "cand", "ref", 1.0});

  MockScript script;
  script.set("m-3", StrategyId::P1a, 1, "I cannot rate this.");
  JudgeBackend be(mock_config(1), script);
  strategies::SharedArtifactCache artifacts;
  const auto records =
      detail::evaluate_sample(ds.samples[0], {StrategyId::P1a},
                              ds.manifest.task_kind, lib(), be, artifacts);
  const auto& rec = records.at(StrategyId::P1a);
  EXPECT_DOUBLE_EQ(rec.raw_score, 50.0);
  ASSERT_TRUE(rec.parse_note.has_value());
  EXPECT_EQ(*rec.parse_note, "unparseable");
}

TEST(ParallelForTest, RunsEveryIndexOnce) {
  for (std::size_t threads : {1u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(100);
    detail::parallel_for(100, threads,
                         [&](std::size_t i) { hits[i].fetch_add(1); });
    for (std::size_t i = 0; i < hits.size(); ++i)
      EXPECT_EQ(hits[i].load(), 1) << "index " << i;
  }
  // n smaller than the worker count.
  std::atomic<int> count{0};
  detail::parallel_for(2, 16, [&](std::size_t) { count.fetch_add(1); });
  EXPECT_EQ(count.load(), 2);
  detail::parallel_for(0, 4, [](std::size_t) { FAIL(); });
}

TEST(ParallelForTest, PropagatesTheFirstException) {
  std::atomic<int> started{0};
  try {
    detail::parallel_for(1000, 4, [&](std::size_t i) {
      started.fetch_add(1);
      if (i == 3) throw BackendError("boom at 3");
      // Keep iterations slow enough that surviving workers observe the
      // failure flag instead of draining the whole range first.
      std::this_thread::sleep_for(std::chrono::microseconds(200));
    });
    FAIL() << "expected BackendError";
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
  // Dispatch stops early: nowhere near all 1000 indices should have run.
  EXPECT_LT(started.load(), 500);
}

}  // namespace
}  // namespace swejudge::ensemble
