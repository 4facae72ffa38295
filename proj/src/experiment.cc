#include "misdd/experiment.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "misdd/image_io.h"
#include "misdd/tensor_io.h"

namespace misdd {

namespace fs = std::filesystem;
using nlohmann::json;

Model build_warm_model(const Dataset& dataset, const ModelConfig& config, const PromptTemplates& templates,
                       const WarmupConfig& warmup, WarmupLog* log) {
  if (config.encoder.image_size != dataset.image_size()) {
    throw std::invalid_argument("image_size " + std::to_string(config.encoder.image_size) +
                                " does not match the dataset (" + std::to_string(dataset.image_size()) + ")");
  }
  Model model = Model::create(config, templates, dataset.spec().classes, warmup.seed);
  WarmupLog l = warmup_pretrain(model, dataset.train(), warmup);
  if (log != nullptr) *log = std::move(l);
  return model;
}

std::vector<ScoredSample> score_test_set(const Model& model, const Galleries& galleries,
                                         const std::vector<PairedSample>& test, const MissingSchedule& schedule,
                                         const EvalOptions& options) {
  if (schedule.size() != test.size()) throw std::invalid_argument("score_test_set: schedule/sample count mismatch");
  DetectOptions d;
  d.level = options.level;
  d.memory_bank = options.memory_bank;
  std::vector<ScoredSample> out;
  out.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const PairedSample& s = test[i];
    ScorePair sp = detect(model, s, galleries, schedule[i], d);
    if (options.export_dir) {
      const fs::path& root = *options.export_dir;
      const Image& base = schedule[i].rgb ? s.rgb : s.depth;
      write_overlay_png(root / "heatmaps" / (s.id + ".png"), base, sp.s_px);
      write_score_png(root / "maps" / (s.id + ".png"), sp.s_px);
      write_score_tensor(root / "maps" / (s.id + ".bin"), sp.s_px);
    }
    out.push_back({s.id, s.class_name, s.label, s.defect, s.gt_mask, sp.s_im, std::move(sp.s_px)});
  }
  return out;
}

std::string ablation_label(const CellSpec& cell) {
  const TrainConfig& t = cell.train;
  std::vector<std::string> off;
  if (!t.use_ccp) off.push_back("ccp");
  if (!t.use_msp) off.push_back("msp");
  if (!t.use_map) off.push_back("map");
  if (!t.use_scl) off.push_back("scl");
  std::string label;
  if (off.empty()) {
    label = "full";
  } else {
    label = "no";
    for (const std::string& o : off) label += "-" + o;
  }
  if (t.skip_missing_terms) label += "+skip-missing";
  if (cell.memory_bank) label += "+memory-bank";
  if (cell.k_shot > 0) label += "+k" + std::to_string(cell.k_shot);
  return label;
}

namespace {

std::string eta_key(double eta) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", eta);
  return buf;
}

}  // namespace

std::uint64_t schedule_seed(const CellSpec& cell) {
  return derive_seed(cell.train.seed,
                     hash_string(std::string(to_string(cell.type)) + "/" + eta_key(cell.eta) + "/" +
                                 std::string(to_string(cell.train.level))));
}

std::uint64_t training_seed(const CellSpec& cell) {
  // The shot count selects samples but does not reseed training, so K equal to
  // the full class size reproduces the full run.
  CellSpec method = cell;
  method.k_shot = 0;
  return derive_seed(schedule_seed(method), hash_string(ablation_label(method)));
}

std::vector<CsvRow> evaluate_cell(const Model& model, const Galleries& galleries, const Dataset& dataset,
                                  const CellSpec& cell, const fs::path& export_root,
                                  std::vector<ScoredSample>* scored_out) {
  if (model.config().encoder.image_size != dataset.image_size()) {
    throw std::invalid_argument("checkpoint image_size " + std::to_string(model.config().encoder.image_size) +
                                " does not match the dataset image_size " + std::to_string(dataset.image_size()));
  }
  const MissingSchedule test_schedule = schedule_for_split(dataset.test().size(), cell.type, cell.eta,
                                                           schedule_seed(cell), cell.train.level, Split::kTest);
  EvalOptions eo;
  eo.level = cell.train.level;
  eo.memory_bank = cell.memory_bank;
  if (cell.export_heatmaps && !export_root.empty()) eo.export_dir = export_root;
  const std::vector<ScoredSample> scored = score_test_set(model, galleries, dataset.test(), test_schedule, eo);
  std::vector<CsvRow> rows;
  for (MetricsReport& r : evaluate_run(scored)) {
    rows.push_back({std::move(r), std::string(to_string(cell.type)), cell.eta, ablation_label(cell)});
  }
  if (scored_out != nullptr) *scored_out = scored;
  return rows;
}

CellResult run_cell(const Model& warm, const Dataset& dataset, const CellSpec& cell, const fs::path& run_dir,
                    const json& provenance) {
  TrainConfig tc = cell.train;
  tc.seed = training_seed(cell);
  const MissingSchedule train_schedule = schedule_for_split(dataset.train().size(), cell.type, cell.eta,
                                                            schedule_seed(cell), tc.level, Split::kTrain);
  std::optional<std::vector<bool>> participates;
  if (cell.k_shot > 0) {
    participates = few_shot_subset(dataset.train(), cell.k_shot, derive_seed(tc.seed, cell.k_shot));
    if (std::all_of(participates->begin(), participates->end(), [](bool b) { return b; })) participates.reset();
  }

  CellResult result;
  result.trained = train(warm, dataset.train(), train_schedule, tc, participates ? &*participates : nullptr);
  result.loss_log = result.trained.epoch_log;
  result.rows = evaluate_cell(result.trained.model, result.trained.galleries, dataset, cell, run_dir, &result.scored);

  if (!run_dir.empty()) {
    fs::create_directories(run_dir);
    json config{{"train", to_json(cell.train)},
                {"resolved_training_seed", tc.seed},
                {"missing_type", std::string(to_string(cell.type))},
                {"eta", cell.eta},
                {"schedule_seed", schedule_seed(cell)},
                {"train_missing", {{"rgb", train_schedule.rgb_missing_count()},
                                   {"3d", train_schedule.three_d_missing_count()},
                                   {"n", train_schedule.size()}}},
                {"memory_bank", cell.memory_bank},
                {"k_shot", cell.k_shot},
                {"ablation", ablation_label(cell)},
                {"provenance", provenance}};
    write_file_atomic(run_dir / "config.json", config.dump(2) + "\n");
    write_loss_log(run_dir / "loss_log.csv", result.loss_log, tc);
    save_model(result.trained.model, run_dir / "checkpoint", json{{"cell", config}});
    save_galleries(result.trained.galleries, run_dir / "galleries");
    write_csv(run_dir / "metrics.csv", result.rows);
  }
  return result;
}

std::string format_csv(const std::vector<CsvRow>& rows) {
  std::ostringstream out;
  out << "class,missing_type,eta,ablation,i_auroc,p_auroc,aupro_paper,aupro_standard\n";
  char buf[256];
  for (const CsvRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.2f,%s,%.6f,%.6f,%.6f,%.6f\n", r.report.class_name.c_str(),
                  r.missing_type.c_str(), r.eta, r.ablation.c_str(), r.report.i_auroc, r.report.p_auroc,
                  r.report.aupro_paper, r.report.aupro_standard);
    out << buf;
  }
  return out.str();
}

void write_csv(const fs::path& path, const std::vector<CsvRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, format_csv(rows));
}

std::vector<ParamRow> parameter_table(const Model& model) {
  struct Group {
    const char* component;
    std::vector<std::string> prefixes;
  };
  const std::vector<Group> groups = {
      {"vision encoder", {"vision."}}, {"text encoder", {"text/"}}, {"CCP", {"ccp/"}},
      {"MSP", {"msp/"}},               {"MAP", {"map."}},           {"text suffix", {"suffix/"}},
  };
  std::vector<ParamRow> rows;
  for (const Group& g : groups) rows.push_back({g.component, "frozen", 0, 0});
  for (const nn::Parameter* p : model.store().all()) {
    bool matched = false;
    for (std::size_t i = 0; i < groups.size() && !matched; ++i) {
      for (const std::string& prefix : groups[i].prefixes) {
        if (p->name.starts_with(prefix)) {
          rows[i].count += p->size();
          if (p->trainable) rows[i].trainable += p->size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) throw std::logic_error("parameter '" + p->name + "' belongs to no reported group");
  }
  for (ParamRow& r : rows) r.status = r.trainable > 0 ? "learnable" : "frozen";
  return rows;
}

std::string format_param_table(const std::vector<ParamRow>& rows, std::size_t total) {
  std::ostringstream out;
  out << "component,status,parameters\n";
  std::size_t sum = 0;
  for (const ParamRow& r : rows) {
    out << r.component << ',' << r.status << ',' << r.count << '\n';
    sum += r.count;
  }
  out << "total,," << total << '\n';
  if (sum != total) throw std::logic_error("parameter rows do not sum to the checkpoint total");
  return out.str();
}

}  // namespace misdd
