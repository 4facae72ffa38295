#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "misdd/metrics.h"
#include "misdd/scoring.h"
#include "misdd/training.h"
#include "misdd/warmup.h"

namespace misdd {

/// Backbone creation plus warmup on the dataset's training normals.
Model build_warm_model(const Dataset& dataset, const ModelConfig& config, const PromptTemplates& templates,
                       const WarmupConfig& warmup, WarmupLog* log = nullptr);

struct EvalOptions {
  MissingLevel level = MissingLevel::kInput;
  bool memory_bank = false;
  // When set, writes heatmaps/<id>.png, maps/<id>.png and maps/<id>.bin below it.
  std::optional<std::filesystem::path> export_dir;
};

std::vector<ScoredSample> score_test_set(const Model& model, const Galleries& galleries,
                                         const std::vector<PairedSample>& test, const MissingSchedule& schedule,
                                         const EvalOptions& options);

struct CellSpec {
  MissingType type = MissingType::kNone;
  double eta = 0.0;
  TrainConfig train;
  bool memory_bank = false;
  bool export_heatmaps = false;
  int k_shot = 0;  // 0: full training set
};

/// "full" or "no-<part>+..." over {ccp, msp, map, scl}, plus "skip-missing" and "k<K>" tags.
std::string ablation_label(const CellSpec& cell);

// Schedules depend on (seed, type, eta) only; the training stream also on the ablation.
std::uint64_t schedule_seed(const CellSpec& cell);
std::uint64_t training_seed(const CellSpec& cell);

struct CsvRow {
  MetricsReport report;
  std::string missing_type;
  double eta = 0.0;
  std::string ablation;
};

struct CellResult {
  std::vector<CsvRow> rows;
  std::vector<LossBreakdown> loss_log;
  TrainResult trained;
  std::vector<ScoredSample> scored;  // test samples in dataset order
};

/// Trains and evaluates one grid cell. With a non-empty `run_dir` writes
/// config.json, loss_log.csv, checkpoint/, galleries/, metrics.csv and the
/// optional heatmaps into it.
CellResult run_cell(const Model& warm, const Dataset& dataset, const CellSpec& cell,
                    const std::filesystem::path& run_dir = {}, const nlohmann::json& provenance = {});

/// Evaluates a trained model against `dataset` with the cell's test schedule.
std::vector<CsvRow> evaluate_cell(const Model& model, const Galleries& galleries, const Dataset& dataset,
                                  const CellSpec& cell, const std::filesystem::path& export_root = {},
                                  std::vector<ScoredSample>* scored = nullptr);

std::string format_csv(const std::vector<CsvRow>& rows);
void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows);

struct ParamRow {
  std::string component;
  std::string status;  // "frozen" or "learnable"
  std::size_t count = 0;
  std::size_t trainable = 0;
};

/// Vision encoder, text encoder, CCP, MSP, MAP and text suffix counts. Throws
/// if any parameter falls outside these groups.
std::vector<ParamRow> parameter_table(const Model& model);
std::string format_param_table(const std::vector<ParamRow>& rows, std::size_t total);

}  // namespace misdd
