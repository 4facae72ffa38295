#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "misdd/metrics.h"
#include "misdd/missing_config.h"
#include "misdd/model.h"

namespace misdd {

inline constexpr double kScoreTemperature = 0.07;
inline constexpr double kUnitNormTolerance = 1e-4;

enum class GalleryKind { kRgb, kThreeD, kText };

struct Gallery {
  GalleryKind kind = GalleryKind::kRgb;
  nn::Matrix entries;             // unit rows
  std::vector<int> source_layers;  // visual galleries: layers of the token banks
  // Visual galleries: optional per-layer token banks for the memory-bank branch.
  std::map<int, nn::Matrix> tokens;

  Eigen::Index size() const { return entries.rows(); }
};

/// G^rgb, G^3D and G^text. The text gallery holds rows (normal, abnormal)
/// for each class in `classes` order.
struct Galleries {
  Gallery rgb;
  Gallery three_d;
  Gallery text;
  std::vector<std::string> classes;

  const Gallery& visual(Branch b) const { return b == Branch::kRgb ? rgb : three_d; }
  TextEmbeddingPair text_pair(const std::string& class_name) const;
};

struct GalleryOptions {
  bool token_banks = false;
};

/// Pooled (and optionally token) features of every training sample whose
/// modality is present, plus the text pairs of all model classes. Samples with
/// `participates[i] == false` are skipped.
Galleries build_galleries(const Model& model, const std::vector<PairedSample>& train, const MissingSchedule& schedule,
                          const std::vector<bool>* participates = nullptr, const GalleryOptions& options = {});

void save_galleries(const Galleries& g, const std::filesystem::path& dir);
Galleries load_galleries(const std::filesystem::path& dir);

/// Two-way softmax over cosine similarities to (normal, abnormal) at
/// temperature 0.07; returns the abnormal probability.
double image_score(const nn::RowVector& f, const TextEmbeddingPair& text);

/// Per-row abnormal probability of a token matrix.
Eigen::VectorXd token_scores(const nn::Matrix& tokens, const TextEmbeddingPair& text);

/// Bilinear resize of a grid x grid map (row-major) to size x size with
/// half-pixel centers and edge clamping.
ScoreMap upsample_bilinear(const Eigen::VectorXd& grid_values, int grid, int size);

/// Mean over layers of per-token abnormal probabilities, upsampled to
/// image_size. Throws if a requested layer is absent.
ScoreMap pixel_map(const std::map<int, nn::Matrix>& per_layer, const std::vector<int>& layers,
                   const TextEmbeddingPair& text, int grid, int image_size);

/// 2ab / (a + b) with H(0, b) = H(a, 0) = 0.
double harmonic(double a, double b);
ScoreMap harmonic_fuse(double i_score, const ScoreMap& p_map);

/// Per-token 1 - max cosine similarity to the bank, clamped to [0, 1].
Eigen::VectorXd memory_bank_scores(const nn::Matrix& tokens, const nn::Matrix& bank);
ScoreMap memory_bank_map(const std::map<int, nn::Matrix>& per_layer, const std::map<int, nn::Matrix>& banks,
                         int grid, int image_size);

struct DetectOptions {
  MissingLevel level = MissingLevel::kInput;
  bool memory_bank = false;
};

struct BranchScore {
  double image = 0.0;
  ScoreMap pixel;
  ScoreMap fused;
};

struct ScorePair {
  double s_im = 0.0;
  ScoreMap s_px;
  BranchScore rgb;
  BranchScore three_d;
};

/// Masks the sample per `ind` (input level) or its features (feature level),
/// scores both branches, and fuses them by max. A feature-level absent branch
/// scores zero everywhere.
ScorePair detect(const Model& model, const PairedSample& sample, const Galleries& galleries,
                 const ModalityIndicator& ind, const DetectOptions& options = {});

}  // namespace misdd
