/// @file swej.cpp
/// Command-line surface for the evaluation library.
///
///   swej validate  --manifest data/toy/codegen.manifest.json
///   swej judge     --manifest ... --backend replay --cache-dir ... --out r.json
///   swej correlate --report r.json --manifest ...
///   swej agreement --report r.json --manifest ...
///   swej baseline  --metric bleu --manifest ...
///
/// Progress and cost go to stderr; data goes to stdout. Exit codes: 0 ok,
/// 2 bad input data, 3 backend failure, 4 usage error.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "swejudge/swejudge.hpp"

namespace {

using namespace swejudge;

std::atomic<bool> g_interrupted{false};

void handle_sigint(int) { g_interrupted.store(true); }

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitBackend = 3;
constexpr int kExitUsage = 4;

std::filesystem::path default_template_dir() {
  if (const char* env = std::getenv("SWEJ_TEMPLATES"); env && *env)
    return env;
#ifdef SWEJ_DEFAULT_TEMPLATE_DIR
  return SWEJ_DEFAULT_TEMPLATE_DIR;
#else
  return "templates";
#endif
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "undef";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

void print_correlation_table(const stats::CorrelationSummary& c,
                             std::size_t n) {
  std::fprintf(stderr, "  n        %zu\n", n);
  std::fprintf(stderr, "  tau      %s\n", fmt_opt(c.tau).c_str());
  std::fprintf(stderr, "  spearman %s\n", fmt_opt(c.spearman).c_str());
  std::fprintf(stderr, "  pearson  %s\n", fmt_opt(c.pearson).c_str());
  std::fprintf(stderr, "  avg_cor  %.6f\n", c.avg_cor);
}

/// Joins report rows with dataset annotations by sample id, in report order.
stats::PairedScores join_report(const ensemble::EvaluationReport& report,
                                const Dataset& ds) {
  std::map<std::string, double> human;
  for (const auto& s : ds.samples)
    if (s.human_score) human[s.id] = *s.human_score;

  stats::PairedScores ps;
  for (const auto& row : report.per_sample) {
    const auto it = human.find(row.sample_id);
    if (it == human.end()) continue;
    ps.predicted.push_back(row.mapped);
    ps.truth.push_back(it->second);
  }
  if (ps.predicted.empty())
    throw ValidationError(
        "report and dataset share no annotated samples (report '" +
        report.dataset + "', dataset '" + ds.manifest.name + "')");
  if (ps.predicted.size() < 2)
    throw ValidationError("need at least 2 overlapping annotated samples, got 1");
  return ps;
}

int cmd_validate(const std::string& manifest) {
  const Dataset ds = load_dataset(manifest);
  std::printf("%s: %zu samples, %zu annotated\n", ds.manifest.name.c_str(),
              ds.samples.size(), ds.annotated_count());
  std::printf("task_kind: %s\n", to_string(ds.manifest.task_kind));
  std::printf("scale: [%g, %g] step %g (%zu grid points)\n",
              ds.manifest.scale.min, ds.manifest.scale.max,
              ds.manifest.scale.step, ds.manifest.scale.grid_size());
  return kExitOk;
}

struct JudgeArgs {
  std::string manifest;
  std::string backend_kind = "replay";
  std::string model = "gpt-4o-mini-2024-07-18";
  std::string endpoint = "https://api.openai.com/v1";
  std::size_t trial_size = 10;
  std::uint64_t seed = 42;
  std::string team;
  std::string out;
  std::string cache_dir = "cache";
  int max_concurrency = 4;
  std::string mock_script;
  bool record = false;
  std::string templates;
  bool quiet = false;
};

int cmd_judge(const JudgeArgs& args) {
  const Dataset ds = load_dataset(args.manifest);

  backend::BackendConfig config;
  const auto kind = backend::backend_kind_from_string(args.backend_kind);
  if (!kind) throw UsageError("unknown backend kind '" + args.backend_kind + "'");
  config.kind = *kind;
  config.model_name = args.model;
  config.endpoint_url = args.endpoint;
  config.cache_dir = args.cache_dir;
  config.max_concurrency = args.max_concurrency;
  config.record = args.record;
  config.cancelled = [] { return g_interrupted.load(); };

  backend::MockScript script;
  if (config.kind == backend::BackendKind::mock) {
    if (args.mock_script.empty())
      throw UsageError("mock backend needs --mock-script");
    script = backend::MockScript::from_file(args.mock_script);
  } else if (!args.mock_script.empty()) {
    throw UsageError("--mock-script only makes sense with --backend mock");
  }

  const strategies::TemplateLibrary lib(
      args.templates.empty() ? default_template_dir()
                             : std::filesystem::path(args.templates));

  ensemble::PipelineOptions options;
  options.trial_size = args.trial_size;
  options.seed = args.seed;
  if (!args.team.empty()) options.team_override = ensemble::Team::parse(args.team);
  if (!args.quiet)
    options.progress = [](const std::string& line) {
      std::fprintf(stderr, "[swej] %s\n", line.c_str());
    };

  backend::JudgeBackend be(config, std::move(script));

  ensemble::EvaluationReport report;
  try {
    report = ensemble::run_pipeline(ds, be, lib, options);
  } catch (const ensemble::PipelineAborted& e) {
    if (!args.out.empty()) {
      const std::string partial_path = args.out + ".partial";
      e.partial.save(partial_path);
      std::fprintf(stderr, "[swej] partial results written to %s\n",
                   partial_path.c_str());
    }
    throw;
  }

  if (!args.quiet) {
    std::fprintf(stderr, "[swej] selected team: %s\n",
                 report.selected_team.to_string().c_str());
    if (report.trial_correlations)
      std::fprintf(stderr, "[swej] trial avg_cor: %.6f\n",
                   report.trial_correlations->correlations.avg_cor);
    if (report.statistics) {
      std::fprintf(stderr, "[swej] dataset statistics (%zu annotated):\n",
                   report.statistics->annotated);
      print_correlation_table(report.statistics->correlations,
                              report.statistics->annotated);
      std::fprintf(stderr, "  kappa    %s\n",
                   fmt_opt(report.statistics->kappa).c_str());
    }
    const auto cs = report.call_stats;
    std::fprintf(stderr,
                 "[swej] calls: %llu live, %llu cache hits; %llu prompt "
                 "chars, %llu reply chars\n",
                 static_cast<unsigned long long>(cs.live_calls),
                 static_cast<unsigned long long>(cs.cache_hits),
                 static_cast<unsigned long long>(cs.prompt_chars),
                 static_cast<unsigned long long>(cs.reply_chars));
  }

  if (!args.out.empty()) {
    report.save(args.out);
    if (!args.quiet)
      std::fprintf(stderr, "[swej] report written to %s\n", args.out.c_str());
  } else {
    std::printf("%s\n", report.to_json().dump(2).c_str());
  }
  return kExitOk;
}

int cmd_correlate(const std::string& report_path, const std::string& manifest) {
  const auto report = ensemble::EvaluationReport::load(report_path);
  const Dataset ds = load_dataset(manifest);
  const auto ps = join_report(report, ds);
  const auto cor = stats::compute_correlations(ps);

  std::fprintf(stderr, "correlation of '%s' against '%s':\n",
               report_path.c_str(), ds.manifest.name.c_str());
  print_correlation_table(cor, ps.predicted.size());

  const nlohmann::json j{{"n", ps.predicted.size()},
                         {"tau", opt_json(cor.tau)},
                         {"spearman", opt_json(cor.spearman)},
                         {"pearson", opt_json(cor.pearson)},
                         {"avg_cor", cor.avg_cor}};
  std::printf("%s\n", j.dump(2).c_str());
  return kExitOk;
}

int cmd_agreement(const std::string& report_path, const std::string& manifest) {
  const auto report = ensemble::EvaluationReport::load(report_path);
  const Dataset ds = load_dataset(manifest);
  const auto ps = join_report(report, ds);

  std::vector<double> a, b;
  for (std::size_t i = 0; i < ps.predicted.size(); ++i) {
    a.push_back(stats::discretize(ps.predicted[i], ds.manifest.scale));
    b.push_back(stats::discretize(ps.truth[i], ds.manifest.scale));
  }
  const auto kappa = stats::cohen_kappa(a, b, ds.manifest.scale);

  std::fprintf(stderr, "agreement of '%s' against '%s':\n",
               report_path.c_str(), ds.manifest.name.c_str());
  std::fprintf(stderr, "  n     %zu\n", a.size());
  std::fprintf(stderr, "  kappa %s\n", fmt_opt(kappa).c_str());

  const nlohmann::json j{{"n", a.size()},
                         {"kappa", opt_json(kappa)},
                         {"grid_points", ds.manifest.scale.grid_size()}};
  std::printf("%s\n", j.dump(2).c_str());
  return kExitOk;
}

int cmd_baseline(const std::string& metric, const std::string& manifest,
                 const std::string& tokenizer_name, const std::string& out) {
  const Dataset ds = load_dataset(manifest);

  baselines::TokenizerId tokenizer;
  if (tokenizer_name == "whitespace") {
    tokenizer = baselines::TokenizerId::whitespace;
  } else if (tokenizer_name == "code_punct") {
    tokenizer = baselines::TokenizerId::code_punct;
  } else if (tokenizer_name.empty()) {
    // Prose gets whitespace tokens; code gets punctuation-aware tokens.
    tokenizer = ds.manifest.task_kind == TaskKind::code_summarization
                    ? baselines::TokenizerId::whitespace
                    : baselines::TokenizerId::code_punct;
  } else {
    throw UsageError("unknown tokenizer '" + tokenizer_name + "'");
  }

  const auto score_one = [&](const EvalSample& s) -> double {
    if (metric == "bleu")
      return baselines::bleu(
          baselines::TokenizedPair::make(s.candidate, s.reference, tokenizer));
    if (metric == "rougeL")
      return baselines::rouge_l(
          baselines::TokenizedPair::make(s.candidate, s.reference, tokenizer));
    if (metric == "chrfpp") return baselines::chrf_pp(s.candidate, s.reference);
    throw UsageError("unknown metric '" + metric + "'");
  };

  nlohmann::json rows = nlohmann::json::array();
  std::vector<double> predicted, truth;
  for (const auto& s : ds.samples) {
    const double score = score_one(s);
    rows.push_back({{"id", s.id}, {"score", score}});
    if (s.human_score) {
      predicted.push_back(score);
      truth.push_back(*s.human_score);
    }
  }

  nlohmann::json j{{"metric", metric},
                   {"tokenizer", metric == "chrfpp"
                                     ? "chars+words"
                                     : baselines::to_string(tokenizer)},
                   {"dataset", ds.manifest.name},
                   {"per_sample", rows},
                   {"correlations", nullptr}};
  if (predicted.size() >= 2) {
    const auto cor = stats::compute_correlations({predicted, truth});
    std::fprintf(stderr, "%s on '%s' (%zu annotated):\n", metric.c_str(),
                 ds.manifest.name.c_str(), predicted.size());
    print_correlation_table(cor, predicted.size());
    j["correlations"] = {{"n", predicted.size()},
                         {"tau", opt_json(cor.tau)},
                         {"spearman", opt_json(cor.spearman)},
                         {"pearson", opt_json(cor.pearson)},
                         {"avg_cor", cor.avg_cor}};
  }

  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    if (!f) throw ValidationError("cannot write output: " + out);
    f << j.dump(2) << "\n";
    std::fprintf(stderr, "baseline scores written to %s\n", out.c_str());
  } else {
    std::printf("%s\n", j.dump(2).c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, handle_sigint);

  CLI::App app{"swej - judge-ensemble evaluation for generated software artifacts"};
  app.require_subcommand(1);

  // validate
  auto* validate = app.add_subcommand("validate", "Load and check a dataset");
  std::string validate_manifest;
  validate->add_option("--manifest", validate_manifest, "Dataset manifest path")
      ->required();

  // judge
  auto* judge = app.add_subcommand("judge", "Run the evaluation pipeline");
  JudgeArgs jargs;
  judge->add_option("--manifest", jargs.manifest, "Dataset manifest path")
      ->required();
  judge->add_option("--backend", jargs.backend_kind,
                    "Backend kind: live, mock or replay");
  judge->add_option("--model", jargs.model, "Judge model name");
  judge->add_option("--endpoint", jargs.endpoint, "Chat-completions base URL");
  judge->add_option("--trial-size", jargs.trial_size,
                    "Annotated samples drawn for team selection");
  judge->add_option("--seed", jargs.seed, "Trial draw seed");
  judge->add_option("--team", jargs.team,
                    "Fixed team (e.g. P1b,P3); skips selection");
  judge->add_option("--out", jargs.out, "Report output path (default: stdout)");
  judge->add_option("--cache-dir", jargs.cache_dir, "Response cache directory");
  judge->add_option("--max-concurrency", jargs.max_concurrency,
                    "Concurrent requests upper bound");
  judge->add_option("--mock-script", jargs.mock_script,
                    "Scripted replies (mock backend)");
  judge->add_flag("--record", jargs.record,
                  "Persist mock replies into the cache for later replay");
  judge->add_option("--templates", jargs.templates,
                    "Prompt template root (default: $SWEJ_TEMPLATES or "
                    "built-in path)");
  judge->add_flag("--quiet", jargs.quiet, "Suppress progress lines");

  // correlate / agreement
  auto* correlate =
      app.add_subcommand("correlate", "Correlate a report with human scores");
  std::string cor_report, cor_manifest;
  correlate->add_option("--report", cor_report, "Report path")->required();
  correlate->add_option("--manifest", cor_manifest, "Dataset manifest path")
      ->required();

  auto* agreement = app.add_subcommand(
      "agreement", "Cohen's kappa of a report against human scores");
  std::string agr_report, agr_manifest;
  agreement->add_option("--report", agr_report, "Report path")->required();
  agreement->add_option("--manifest", agr_manifest, "Dataset manifest path")
      ->required();

  // baseline
  auto* baseline = app.add_subcommand(
      "baseline", "Match-based baseline metrics over a dataset");
  std::string b_metric, b_manifest, b_tokenizer, b_out;
  baseline->add_option("--metric", b_metric, "bleu, rougeL or chrfpp")
      ->required();
  baseline->add_option("--manifest", b_manifest, "Dataset manifest path")
      ->required();
  baseline->add_option("--tokenizer", b_tokenizer,
                       "whitespace or code_punct (default: by task kind)");
  baseline->add_option("--out", b_out, "Output path (default: stdout)");

  try {
    app.parse(argc, argv);
    if (validate->parsed()) return cmd_validate(validate_manifest);
    if (judge->parsed()) return cmd_judge(jargs);
    if (correlate->parsed()) return cmd_correlate(cor_report, cor_manifest);
    if (agreement->parsed()) return cmd_agreement(agr_report, agr_manifest);
    if (baseline->parsed())
      return cmd_baseline(b_metric, b_manifest, b_tokenizer, b_out);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const BackendError& e) {
    std::fprintf(stderr, "backend error: %s\n", e.what());
    return kExitBackend;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
}
