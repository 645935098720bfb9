#include "seqdens/harness.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "seqdens/error.hpp"
#include "seqdens/metrics.hpp"
#include "seqdens/version.hpp"

namespace fs = std::filesystem;

namespace seqdens {

using nlohmann::json;

namespace {

void check_task_hash(const ExperimentConfig& config, const std::string& data_dir) {
  const std::string stored = dataset_task_hash(data_dir);
  if (stored != config.task_hash())
    throw ConfigError("dataset at " + data_dir +
                      " was generated for task hash " + stored +
                      ", but this config has task hash " + config.task_hash() +
                      "; regenerate it with the generate-data command");
}

bool is_distilled_dir(const std::string& dir) {
  return fs::exists(dir + "/distilled.json");
}

}  // namespace

void cmd_generate_data(const ExperimentConfig& config, const std::string& out_dir) {
  config.validate();
  Dataset ds = generate_dataset(config.task);
  save_dataset(ds, out_dir, config.task_hash());
}

TrainArtifacts cmd_train(const ExperimentConfig& config,
                         const std::string& data_dir,
                         const std::string& out_dir) {
  config.validate();
  check_task_hash(config, data_dir);
  if (config.data_variant == "distilled" && !is_distilled_dir(data_dir))
    throw ConfigError("config wants distilled data but " + data_dir +
                      " holds raw data; produce it with the distill command");
  if (config.data_variant == "raw" && is_distilled_dir(data_dir))
    throw ConfigError("config wants raw data but " + data_dir +
                      " holds distilled data; point --data at the raw dataset");
  Dataset data = load_dataset(data_dir);
  fs::create_directories(out_dir);

  TrainArtifacts art;
  art.log_path = out_dir + "/train_log.jsonl";
  art.best_checkpoint = out_dir + "/ckpt_best.bin";
  art.final_checkpoint = out_dir + "/ckpt_final.bin";

  auto model = build_model(config);
  std::ofstream log(art.log_path, std::ios::binary);
  if (!log) throw DataError("cannot write " + art.log_path);
  {
    json meta;
    meta["config_hash"] = config.hash();
    meta["task_hash"] = config.task_hash();
    meta["family"] = config.model_family;
    meta["data_variant"] = config.data_variant;
    meta["suite_version"] = kSuiteVersion;
    log << meta.dump() << "\n";
  }
  double best_bleu = -1.0;
  auto on_eval = [&](const EvalRecord& rec) {
    json j;
    j["step"] = rec.step;
    j["train_loss"] = rec.train_loss;
    j["reconstruction"] = rec.reconstruction;
    j["kl"] = rec.kl;
    j["alpha_reg"] = rec.alpha_reg;
    j["length_loss"] = rec.length_loss;
    j["dev_ll"] = rec.dev_ll;
    j["dev_bleu"] = rec.dev_bleu;
    j["beta"] = rec.beta;
    j["lr"] = rec.lr;
    log << j.dump() << "\n";
    log.flush();
    const std::string step_path =
        out_dir + "/ckpt_step" + std::to_string(rec.step) + ".bin";
    save_checkpoint(step_path, config, *model, rec.step, rec.dev_ll,
                    rec.dev_bleu);
    if (rec.dev_bleu > best_bleu) {
      best_bleu = rec.dev_bleu;
      fs::copy_file(step_path, art.best_checkpoint,
                    fs::copy_options::overwrite_existing);
    }
  };
  art.result = train(*model, data, config.training, config.seed, on_eval);
  if (art.result.aborted)
    throw NumericalError("training aborted: " + art.result.abort_reason);
  const EvalRecord last =
      art.result.records.empty() ? EvalRecord{} : art.result.records.back();
  save_checkpoint(art.final_checkpoint, config, *model, last.step, last.dev_ll,
                  last.dev_bleu);
  if (!fs::exists(art.best_checkpoint) && fs::exists(art.final_checkpoint))
    fs::copy_file(art.final_checkpoint, art.best_checkpoint);
  return art;
}

DistillStats cmd_distill(const ExperimentConfig& config,
                         const std::string& teacher_checkpoint,
                         const std::string& data_dir,
                         const std::string& out_dir) {
  config.validate();
  check_task_hash(config, data_dir);
  LoadedCheckpoint teacher = load_checkpoint(teacher_checkpoint);
  if (teacher.config.task_hash() != config.task_hash())
    throw ConfigError("teacher checkpoint was trained on task hash " +
                      teacher.config.task_hash() + ", expected " +
                      config.task_hash());
  Dataset data = load_dataset(data_dir);
  DistillStats stats =
      distill_dataset(*teacher.model, &data, config.beam_width);
  save_dataset(data, out_dir, config.task_hash());
  json j;
  j["teacher_config_hash"] = teacher.config.hash();
  j["teacher_step"] = teacher.step;
  j["beam_width"] = config.beam_width;
  j["total"] = stats.total;
  j["replaced"] = stats.replaced;
  j["kept_original"] = stats.kept_original;
  j["suite_version"] = kSuiteVersion;
  std::ofstream out(out_dir + "/distilled.json", std::ios::binary);
  if (!out) throw DataError("cannot write distilled.json");
  out << j.dump(2) << "\n";
  return stats;
}

ExperimentReport cmd_evaluate(const std::string& checkpoint_path,
                              const std::string& data_dir,
                              const std::string& out_path, bool measure_speed) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
  const ExperimentConfig& config = ck.config;
  check_task_hash(config, data_dir);
  Dataset data = load_dataset(data_dir);
  DensityEstimator& model = *ck.model;

  ExperimentReport rep;
  rep.model_id = config.model_family + "/" + config.model_size;
  rep.family = config.model_family;
  rep.data_variant = config.data_variant;
  rep.config_hash = config.hash();
  rep.suite_version = kSuiteVersion;
  rep.param_count = model.count_params();
  rep.provenance["dataset"] = dataset_task_hash(data_dir);
  rep.provenance["checkpoint_config"] = config.hash();
  rep.provenance["checkpoint_step"] = std::to_string(ck.step);

  // held-out log-likelihood, ground-truth length
  if (auto* ar = dynamic_cast<ArModel*>(&model)) {
    LLEstimate est = ar_test_ll(*ar, data.test);
    rep.test_ll = est.mean_per_token;
    rep.test_ll_std_error = est.std_error;
    rep.has_ll = true;
  } else if (auto* lvm = dynamic_cast<LvmModel*>(&model)) {
    LLEstimate est =
        lvm_test_ll(*lvm, data.test, config.is_samples, config.seed ^ 0xE7A1ull);
    rep.test_ll = est.mean_per_token;
    rep.test_ll_std_error = est.std_error;
    rep.has_ll = true;
  }

  // BLEU with the family's standard inference
  auto refs_of = [&](const SequencePair& p) {
    if (!p.references.empty()) return p.references;
    return std::vector<std::vector<int64_t>>{std::vector<int64_t>(
        p.target.begin(), p.target.begin() + p.raw_target_len)};
  };
  auto bleu_at = [&](int k) {
    std::vector<std::vector<int64_t>> hyps;
    std::vector<std::vector<std::vector<int64_t>>> refs;
    for (const auto& pair : data.test) {
      GenSettings s;
      s.beam_width = config.beam_width;
      s.refine_steps = k;
      s.forced_length = config.length_mode == "ground-truth"
                            ? pair.padded_target_len()
                            : -1;
      DecodeOutput out = generate(model, pair.source, s);
      hyps.push_back(out.tokens);
      refs.push_back(refs_of(pair));
    }
    return bleu(hyps, refs);
  };
  if (model.family() == "ar") {
    rep.test_bleu = bleu_at(0);
    rep.has_bleu = true;
  } else {
    auto* lvm = dynamic_cast<LvmModel*>(&model);
    std::vector<int> ks = config.refine_steps;
    if (ks.empty()) ks.push_back(1);
    for (int k : ks) {
      rep.bleu_per_k[k] = bleu_at(k);
      // dev-style per-token ELBO of the decoded outputs
      double elbo_acc = 0;
      for (const auto& pair : data.test) {
        IterativeResult res = iterative_inference(
            *lvm, pair.source, k,
            config.length_mode == "ground-truth" ? pair.padded_target_len()
                                                 : -1);
        elbo_acc += res.trace.steps.back().elbo;
      }
      rep.elbo_per_k[k] = elbo_acc / static_cast<double>(data.test.size());
    }
    const int report_k =
        std::find(ks.begin(), ks.end(), 1) != ks.end() ? 1 : ks.front();
    rep.test_bleu = rep.bleu_per_k[report_k];
    rep.has_bleu = true;
    // diversity: candidate sets over a capped test subset
    const size_t diversity_cap = 32;
    for (int k : ks) {
      std::vector<std::vector<std::vector<int64_t>>> sets;
      for (size_t i = 0; i < std::min(diversity_cap, data.test.size()); ++i)
        sets.push_back(sample_candidates(model, data.test[i].source,
                                         config.candidates,
                                         config.seed ^ (0xBEEF + i), k));
      rep.pairwise_bleu_per_k[k] = pairwise_bleu(sets);
    }
  }

  // hardware-independent sequential pass count for one decode at k=1/beam
  {
    GenSettings s;
    s.beam_width = config.beam_width;
    s.refine_steps = 1;
    DecodeOutput probe = generate(model, data.test.front().source, s);
    rep.decoder_passes = probe.decoder_passes;
  }
  if (measure_speed) {
    TokenRows inputs;
    for (size_t i = 0; i < std::min<size_t>(16, data.test.size()); ++i)
      inputs.push_back(data.test[i].source);
    GenSettings s;
    s.beam_width = config.beam_width;
    s.refine_steps = 1;
    SpeedReport sp = speed_benchmark(model, inputs, s,
                                     config.speed_repetitions);
    rep.sentences_per_second = sp.sentences_per_second;
    rep.has_speed = true;
  }
  if (!out_path.empty()) rep.save(out_path);
  return rep;
}

void cmd_infer(const std::string& checkpoint_path, const std::string& data_dir,
               const std::string& input_path, int refine_k, int beam_width,
               const std::string& out_path) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
  Vocab vocab = Vocab::load(data_dir + "/vocab.txt");
  std::ifstream in(input_path, std::ios::binary);
  if (!in) throw DataError("cannot read " + input_path);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + out_path);
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    const std::string src_text = tab == std::string::npos ? line : line.substr(0, tab);
    if (src_text.empty()) continue;
    std::vector<int64_t> src;
    std::istringstream is(src_text);
    std::string tok;
    while (is >> tok) src.push_back(vocab.to_id(tok));
    GenSettings s;
    s.beam_width = beam_width;
    s.refine_steps = refine_k;
    DecodeOutput dec = generate(*ck.model, src, s);
    json j;
    j["config_hash"] = ck.config.hash();
    j["suite_version"] = kSuiteVersion;
    j["tokens"] = dec.tokens;
    std::ostringstream text;
    for (size_t i = 0; i < dec.tokens.size(); ++i)
      text << (i ? " " : "") << vocab.to_token(dec.tokens[i]);
    j["text"] = text.str();
    j["score"] = dec.score;
    j["finished"] = dec.finished;
    j["decoder_passes"] = dec.decoder_passes;
    j["seconds"] = dec.seconds;
    j["fixed_point_step"] = dec.fixed_point_step;
    out << j.dump() << "\n";
  }
}

void cmd_correlate(const std::vector<std::string>& inputs,
                   const std::string& grouping, const std::string& out_dir) {
  if (grouping != "within-family" && grouping != "across-family")
    throw ConfigError("grouping must be within-family or across-family");
  fs::create_directories(out_dir);
  std::vector<CorrelationSeries> series;
  std::vector<ScatterPoint> points;
  if (grouping == "within-family") {
    for (const auto& path : inputs) {
      std::ifstream in(path, std::ios::binary);
      if (!in) throw DataError("cannot read " + path);
      std::string line;
      CorrelationSeries s;
      bool first = true;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (first) {
          first = false;
          if (j.contains("family"))
            s.group = j.at("family").get<std::string>() + "/" +
                      j.value("data_variant", std::string("raw"));
          if (j.contains("config_hash")) continue;  // meta line
        }
        if (!j.contains("step")) continue;
        s.log_likelihood.push_back(j.at("dev_ll").get<double>());
        s.bleu_score.push_back(j.at("dev_bleu").get<double>());
        points.push_back({j.at("dev_ll").get<double>(),
                          j.at("dev_bleu").get<double>(),
                          std::to_string(j.at("step").get<int64_t>()), s.group});
      }
      if (s.group.empty()) s.group = path;
      series.push_back(std::move(s));
    }
  } else {
    for (const auto& path : inputs) {
      ExperimentReport rep = ExperimentReport::load(path);
      CorrelationSeries s;
      s.group = rep.model_id + "/" + rep.data_variant;
      s.log_likelihood.push_back(rep.test_ll);
      s.bleu_score.push_back(rep.test_bleu);
      series.push_back(std::move(s));
      points.push_back({rep.test_ll, rep.test_bleu, rep.model_id,
                        rep.family + "/" + rep.data_variant});
    }
  }
  auto rows = correlation_report(series, grouping == "across-family");
  std::ofstream out(out_dir + "/correlations.txt", std::ios::binary);
  if (!out) throw DataError("cannot write correlations.txt");
  out << "# suite " << kSuiteVersion << "; grouping " << grouping << "\n";
  for (const auto& row : rows) {
    out << row.group << "\tn=" << row.n;
    if (row.skipped)
      out << "\tskipped: " << row.note << "\n";
    else {
      out << "\tr=" << row.r << "\trho=" << row.rho;
      if (!row.note.empty()) out << "\tflags: " << row.note;
      out << "\n";
    }
  }
  write_scatter_data(out_dir + "/scatter.tsv", points, "log_likelihood", "bleu",
                     "grouping " + grouping);
  write_scatter_svg(out_dir + "/scatter.svg", points, "log-likelihood", "BLEU",
                    "log-likelihood vs BLEU", "grouping " + grouping);
}

void cmd_report(const std::vector<std::string>& report_paths,
                const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<ExperimentReport> reports;
  for (const auto& p : report_paths) reports.push_back(ExperimentReport::load(p));
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(out_dir + "/" + name, std::ios::binary);
    if (!out) throw DataError("cannot write " + name);
    out << "# suite " << kSuiteVersion << "\n" << text;
  };
  write("results_table.txt", format_results_table(reports));
  write("refinement_table.txt", format_refinement_table(reports));
  write("speed_table.txt", format_speed_table(reports));
  // quality-diversity scatter: (pairwise BLEU, BLEU) per model per k
  std::vector<ScatterPoint> pts;
  for (const auto& r : reports)
    for (const auto& [k, pb] : r.pairwise_bleu_per_k) {
      auto it = r.bleu_per_k.find(k);
      if (it == r.bleu_per_k.end()) continue;
      pts.push_back({pb, it->second, "k=" + std::to_string(k),
                     r.model_id + "/" + r.data_variant});
    }
  write_scatter_data(out_dir + "/quality_diversity.tsv", pts, "pairwise_bleu",
                     "bleu", "quality-diversity");
  write_scatter_svg(out_dir + "/quality_diversity.svg", pts, "pairwise BLEU",
                    "BLEU", "Quality vs diversity", "quality-diversity");
}

namespace {

struct MatrixCell {
  ExperimentConfig config;
  std::string dir;
};

void run_cell(const MatrixCell& cell, const std::string& teacher_ckpt,
              std::atomic<int>* completed, std::atomic<int>* failed) {
  try {
    fs::create_directories(cell.dir);
    const std::string data_dir = cell.dir + "/data";
    if (!fs::exists(data_dir + "/task.json"))
      cmd_generate_data(cell.config, data_dir);
    std::string train_dir = data_dir;
    if (cell.config.data_variant == "distilled") {
      train_dir = cell.dir + "/data_distilled";
      if (!fs::exists(train_dir + "/distilled.json")) {
        if (teacher_ckpt.empty())
          throw ConfigError("distilled cell needs a completed ar/raw teacher");
        cmd_distill(cell.config, teacher_ckpt, data_dir, train_dir);
      }
    }
    TrainArtifacts art = cmd_train(cell.config, train_dir, cell.dir);
    cmd_evaluate(art.best_checkpoint, data_dir, cell.dir + "/report.json");
    ++*completed;
  } catch (const std::exception& e) {
    std::ofstream err(cell.dir + "/error.txt", std::ios::binary);
    err << e.what() << "\n";
    ++*failed;
  }
}

}  // namespace

MatrixResult cmd_run_matrix(const std::string& manifest_path,
                            const std::string& out_root, int parallelism) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw ConfigError("cannot read manifest " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad manifest: ") + e.what());
  }
  if (!manifest.contains("cells") || !manifest.at("cells").is_array())
    throw ConfigError("manifest must carry a 'cells' array");
  std::vector<MatrixCell> raw_cells, distilled_cells;
  for (const auto& cj : manifest.at("cells")) {
    MatrixCell cell;
    cell.config = ExperimentConfig::parse(cj.dump());
    cell.dir = out_root + "/cell-" + cell.config.hash();
    (cell.config.data_variant == "raw" ? raw_cells : distilled_cells)
        .push_back(std::move(cell));
  }
  fs::create_directories(out_root);

  MatrixResult result;
  std::atomic<int> completed{0}, failed{0};
  auto run_phase = [&](std::vector<MatrixCell>& cells,
                       const std::function<std::string(const MatrixCell&)>&
                           teacher_for) {
    std::vector<MatrixCell*> todo;
    for (auto& cell : cells) {
      if (fs::exists(cell.dir + "/report.json")) {
        // completed cells are identified by their config hash in the path
        ++result.skipped;
        continue;
      }
      todo.push_back(&cell);
    }
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      while (true) {
        const size_t i = next.fetch_add(1);
        if (i >= todo.size()) break;
        MatrixCell* cell = todo[i];
        // directory-level lock: the creator of the lockfile owns the cell
        const std::string lock = cell->dir + "/.lock";
        fs::create_directories(cell->dir);
        std::ofstream lf(lock, std::ios::binary | std::ios::app);
        run_cell(*cell, teacher_for(*cell), &completed, &failed);
        fs::remove(lock);
      }
    };
    std::vector<std::thread> threads;
    const int n = std::max(1, parallelism);
    for (int t = 0; t < n; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  };

  run_phase(raw_cells, [](const MatrixCell&) { return std::string(); });
  // teacher lookup: the ar/raw cell sharing the task hash
  run_phase(distilled_cells, [&](const MatrixCell& cell) -> std::string {
    for (const auto& rc : raw_cells) {
      if (rc.config.model_family == "ar" &&
          rc.config.task_hash() == cell.config.task_hash()) {
        const std::string ckpt = rc.dir + "/ckpt_best.bin";
        if (fs::exists(ckpt)) return ckpt;
      }
    }
    return std::string();
  });
  result.completed = completed.load();
  result.failed = failed.load();
  return result;
}

}  // namespace seqdens
