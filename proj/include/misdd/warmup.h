#pragma once

#include <cstdint>
#include <vector>

#include "misdd/data_synth.h"
#include "misdd/model.h"

namespace misdd {

struct WarmupConfig {
  // Both stages use Adam with a cosine decay to lr_floor times the base rate;
  // 1 keeps the rate constant.
  double lr_floor = 1.0;
  // Masked-patch reconstruction.
  int mim_epochs = 20;
  double mask_ratio = 0.4;
  double mim_lr = 1e-3;
  // Vision-text alignment on synthetic corruptions of the normals.
  int align_epochs = 15;
  double align_lr = 5e-4;
  double align_temperature = 0.07;
  double token_weight = 1.0;
  // Weight of the blank-input terms (missing-modality dummies).
  double blank_weight = 0.0;
  int batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct WarmupLog {
  std::vector<double> mim_loss;    // per epoch, summed over branches
  std::vector<double> align_loss;  // per epoch
};

/// Smooth random blob covering roughly 1%..8% of the image.
Mask random_blob_mask(int size, Rng& rng);
/// Color blend, cut-paste from `donor`, or additive noise inside `mask`.
Image corrupt_rgb(const Image& rgb, const Mask& mask, const Image& donor, Rng& rng);
/// Smooth offset, cut-paste from `donor`, or a local tilt inside `mask`.
Image corrupt_depth(const Image& depth, const Mask& mask, const Image& donor, Rng& rng);
/// Per patch: 1 if at least a quarter of its pixels are masked, 0 if none, -1 otherwise.
std::vector<int> patch_labels(const Mask& mask, int patch_size);

/// Trains both vision branches and the text encoder of a backbone-only model,
/// then freezes every parameter. Deterministic given `config.seed`.
WarmupLog warmup_pretrain(Model& model, const std::vector<PairedSample>& normals, const WarmupConfig& config);

}  // namespace misdd
