#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"
#include "misdd/missing_config.h"
#include "misdd/model.h"
#include "misdd/scoring.h"

namespace misdd {

struct TrainConfig {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_min = 1e-5;
  int epochs = 30;
  int batch_size = 8;
  int image_size = 64;
  int prompt_depth = 6;
  int prompt_len = 8;  // l_ccp = l_msp = l_map
  std::uint64_t seed = 0;
  bool use_ccp = true;
  bool use_msp = true;
  bool use_map = true;
  bool use_scl = true;
  bool skip_missing_terms = false;
  MissingLevel level = MissingLevel::kInput;

  // Cosine annealing from lr (epoch 0) to lr_min (last epoch).
  double lr_at(int epoch) const;
  void validate() const;
  PromptConfig prompt_config() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double l_rgb_n = 0.0;
  double l_3d_n = 0.0;
  double l_rgb_an = 0.0;
  double l_3d_an = 0.0;
  double total = 0.0;
};

/// Signed sum of unit-vector distances: d(f_rgb, n) + d(f_3d, n) - d(f_rgb, a)
/// - d(f_3d, a). A null feature drops that branch's terms. Throws if an input
/// is off the unit sphere by more than kUnitNormTolerance.
LossBreakdown contrastive_loss(const nn::RowVector* f_rgb, const nn::RowVector* f_3d, const TextEmbeddingPair& text);

/// Same objective on a tape; invalid feature Vars drop their terms.
struct LossVars {
  nn::Var total;
  LossBreakdown values;
};
LossVars contrastive_loss(nn::Var f_rgb, nn::Var f_3d, nn::Var normal, nn::Var abnormal);

/// Whether a branch's terms enter the loss for a sample with indicator `ind`.
bool branch_in_loss(Branch b, const ModalityIndicator& ind, const TrainConfig& config);

struct TrainResult {
  Model model;
  std::vector<LossBreakdown> epoch_log;  // batch-mean breakdown, averaged per epoch
  Galleries galleries;
};

/// Copies the warmed backbone, adds the enabled prompts, freezes the backbone,
/// and optimizes prompts plus the learnable suffix with SGD over normal
/// training samples masked per `schedule`. Samples with participates[i] ==
/// false are skipped. Galleries are built from the final model.
TrainResult train(const Model& warm, const std::vector<PairedSample>& train_set, const MissingSchedule& schedule,
                  const TrainConfig& config, const std::vector<bool>* participates = nullptr);

void write_loss_log(const std::filesystem::path& path, const std::vector<LossBreakdown>& log,
                    const TrainConfig& config);

/// K complete samples per class participate; the rest are fully unavailable.
/// Throws if K is below 1 or above any class's training count.
std::vector<bool> few_shot_subset(const std::vector<PairedSample>& train_set, int k, std::uint64_t seed);

}  // namespace misdd
