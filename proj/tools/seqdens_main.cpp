#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "seqdens/error.hpp"
#include "seqdens/harness.hpp"
#include "seqdens/version.hpp"

namespace {

// Exit codes: 0 success, 1 unexpected, 2 config, 3 data, 4 numerical.
int run(int argc, char** argv) {
  CLI::App app{"seqdens: density-estimation vs generation benchmark suite"};
  app.set_version_flag("--version", seqdens::kSuiteVersion);
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, out_path, checkpoint_path;
  std::string teacher_checkpoint, input_path, grouping = "within-family";
  std::string manifest_path;
  std::vector<std::string> inputs;
  int refine_k = 1, beam_width = 4, parallelism = 2;
  bool measure_speed = false;

  auto* gen = app.add_subcommand("generate-data", "Generate a synthetic dataset");
  gen->add_option("--config", config_path, "Experiment config JSON")->required();
  gen->add_option("--out", out_dir, "Dataset directory")->required();

  auto* train = app.add_subcommand("train", "Train one model");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--out", out_dir, "Run directory")->required();

  auto* distill = app.add_subcommand("distill", "Teacher-decode the training set");
  distill->add_option("--config", config_path)->required();
  distill->add_option("--teacher", teacher_checkpoint, "Teacher checkpoint")->required();
  distill->add_option("--data", data_dir, "Raw dataset directory")->required();
  distill->add_option("--out", out_dir, "Distilled dataset directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--out", out_path, "Report JSON path")->required();
  eval->add_flag("--speed", measure_speed, "Also measure wall-clock speed");

  auto* infer = app.add_subcommand("infer", "Decode an input file");
  infer->add_option("--checkpoint", checkpoint_path)->required();
  infer->add_option("--data", data_dir, "Dataset dir (for the vocabulary)")->required();
  infer->add_option("--input", input_path)->required();
  infer->add_option("--out", out_path)->required();
  infer->add_option("-k,--refine-steps", refine_k);
  infer->add_option("-w,--beam-width", beam_width);

  auto* corr = app.add_subcommand("correlate", "Correlate LL against BLEU");
  corr->add_option("--inputs", inputs, "Training logs or report files")
      ->required()
      ->expected(-1);
  corr->add_option("--grouping", grouping,
                   "within-family (logs) or across-family (reports)");
  corr->add_option("--out", out_dir)->required();

  auto* report = app.add_subcommand("report", "Summarize report files");
  report->add_option("--inputs", inputs, "Report files")->required()->expected(-1);
  report->add_option("--out", out_dir)->required();

  auto* matrix = app.add_subcommand("run-matrix", "Run an experiment manifest");
  matrix->add_option("--manifest", manifest_path)->required();
  matrix->add_option("--out", out_dir)->required();
  matrix->add_option("-j,--parallelism", parallelism);

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    seqdens::cmd_generate_data(seqdens::ExperimentConfig::load(config_path),
                               out_dir);
    std::cout << "dataset written to " << out_dir << "\n";
  } else if (train->parsed()) {
    auto art = seqdens::cmd_train(seqdens::ExperimentConfig::load(config_path),
                                  data_dir, out_dir);
    std::cout << "trained; best dev BLEU " << art.result.best_dev_bleu
              << " at step " << art.result.best_step << "; log "
              << art.log_path << "\n";
  } else if (distill->parsed()) {
    auto stats = seqdens::cmd_distill(
        seqdens::ExperimentConfig::load(config_path), teacher_checkpoint,
        data_dir, out_dir);
    std::cout << "distilled " << stats.replaced << "/" << stats.total
              << " pairs (" << stats.kept_original << " kept original)\n";
  } else if (eval->parsed()) {
    auto rep = seqdens::cmd_evaluate(checkpoint_path, data_dir, out_path,
                                     measure_speed);
    std::cout << "report written to " << out_path << " (LL "
              << (rep.has_ll ? std::to_string(rep.test_ll) : "absent")
              << ", BLEU "
              << (rep.has_bleu ? std::to_string(rep.test_bleu) : "absent")
              << ")\n";
  } else if (infer->parsed()) {
    seqdens::cmd_infer(checkpoint_path, data_dir, input_path, refine_k,
                       beam_width, out_path);
    std::cout << "decodes written to " << out_path << "\n";
  } else if (corr->parsed()) {
    seqdens::cmd_correlate(inputs, grouping, out_dir);
    std::cout << "correlation tables written to " << out_dir << "\n";
  } else if (report->parsed()) {
    seqdens::cmd_report(inputs, out_dir);
    std::cout << "summary tables written to " << out_dir << "\n";
  } else if (matrix->parsed()) {
    auto res = seqdens::cmd_run_matrix(manifest_path, out_dir, parallelism);
    std::cout << "matrix: " << res.completed << " completed, " << res.skipped
              << " skipped, " << res.failed << " failed\n";
    if (res.failed > 0) return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const seqdens::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const seqdens::DataError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const seqdens::NumericalError& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
}
