// pslab: command-line front end for the experiment recipes.
//
//   pslab gen-data      -c config.json
//   pslab train         -c config.json [--resume] [--stop-after STEP]
//   pslab finetune      -c config.json
//   pslab pss           -c config.json
//   pslab hallucination -c config.json
//   pslab report        --out DIR RUN_DIR...

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pslab/experiment.hpp"

namespace {

void print_record(const pslab::RunRecord& r) {
  std::cout << r.command << " " << r.config_hash << '\n';
  for (const auto& m : r.metrics) std::cout << "  " << m.dump() << '\n';
  for (const auto& a : r.artifacts) std::cout << "  wrote " << a << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-specialization lab: toy transformers, knowledge-vector surgery and fine-tuning variants"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--output-dir", output_dir, "override output_dir (PSLAB_OUTPUT_DIR also does)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus files");
  add_config(gen);

  bool resume = false;
  std::optional<std::size_t> stop_after;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "pretrain the toy model, saving scheduled checkpoints");
  add_config(train);
  train->add_flag("--resume", resume, "continue from the latest saved checkpoint and optimizer state");
  train->add_option("--stop-after", stop_after, "stop once this scheduled checkpoint is written");
  train->add_flag("-q,--quiet", quiet, "no per-step progress");

  auto* ft = app.add_subcommand("finetune", "fine-tune on new facts with FT-FV / FT-PV / FT-CV / FT-RV");
  add_config(ft);

  auto* pss = app.add_subcommand(
      "pss", "knowledge-vector surgery sweep (t=10 related, t*=50 irrelevant, ratios 10-50%, skip ~5/32 of layers)");
  add_config(pss);

  auto* hal = app.add_subcommand("hallucination", "semantic entropy and LID of model answers");
  add_config(hal);

  std::vector<std::string> inputs;
  std::string report_out = "report";
  auto* rep = app.add_subcommand("report", "PSS/accuracy correlation, per-tier table and checkpoint series");
  rep->add_option("inputs", inputs, "run directories or pss.jsonl files")->required();
  rep->add_option("--out", report_out, "directory for report.json and CSV tables")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (rep->parsed()) {
      std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
      const auto r = pslab::cmd_report(paths, report_out);
      std::cout << pslab::report_text(r);
      return 0;
    }
    auto cfg = pslab::load_experiment_config(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (gen->parsed()) print_record(pslab::cmd_gen_data(cfg));
    if (train->parsed()) {
      pslab::TrainCommandOptions opts;
      opts.resume = resume;
      opts.stop_after = stop_after;
      if (!quiet) {
        const std::size_t total = cfg.train.steps;
        opts.on_step = [total](std::size_t step, double loss) {
          if (step % 50 == 0 || step == total) std::fprintf(stderr, "step %zu/%zu loss %.4f\n", step, total, loss);
        };
      }
      print_record(pslab::cmd_train(cfg, opts));
    }
    if (ft->parsed()) print_record(pslab::cmd_finetune(cfg));
    if (pss->parsed()) print_record(pslab::cmd_pss(cfg));
    if (hal->parsed()) print_record(pslab::cmd_hallucination(cfg));
  } catch (const pslab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const pslab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
