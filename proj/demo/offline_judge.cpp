/// Minimal library walkthrough: build a dataset in memory, run the full
/// pipeline against an offline mock backend and print the report JSON.
///
/// Build:  cmake --build build --target offline_judge
/// Run:    ./build/demo/offline_judge templates

#include <cstdio>
#include <filesystem>

#include "swejudge/swejudge.hpp"

using namespace swejudge;

int main(int argc, char** argv) {
  const std::filesystem::path template_dir =
      argc > 1 ? argv[1] : "templates";

  // A four-sample code generation dataset scored by humans on 0..4.
  Dataset ds;
  ds.manifest.name = "demo";
  ds.manifest.task_kind = TaskKind::code_generation;
  ds.manifest.scale = {0, 4, 1};
  ds.samples = {
      {"d-1", "add two numbers", "def add(a, b): return a + b",
       "def add(a, b): return a + b", 4.0},
      {"d-2", "absolute value", "def f(x): return x",
       "def f(x): return abs(x)", 1.0},
      {"d-3", "square a number", "def sq(x): return x * x",
       "def sq(x): return x ** 2", 4.0},
      {"d-4", "halve a number", "def half(x): return x // 2",
       "def half(x): return x / 2", 2.0},
  };

  // The mock backend answers every judge call from a script; perfect_judge
  // scripts each variant to echo the rescaled human score. Swap in
  // BackendKind::live plus an API key for real model calls.
  backend::BackendConfig cfg;
  cfg.kind = backend::BackendKind::mock;
  cfg.cache_dir = std::filesystem::temp_directory_path() / "swej_demo_cache";
  backend::JudgeBackend be(cfg, backend::MockScript::perfect_judge(ds));

  const strategies::TemplateLibrary lib(template_dir);

  ensemble::PipelineOptions options;
  options.trial_size = 4;
  options.seed = 42;
  options.progress = [](const std::string& line) {
    std::fprintf(stderr, "%s\n", line.c_str());
  };

  const auto report = ensemble::run_pipeline(ds, be, lib, options);
  std::printf("%s\n", report.to_json().dump(2).c_str());
  return 0;
}
