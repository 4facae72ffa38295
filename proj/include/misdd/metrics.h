#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "misdd/data_synth.h"

namespace misdd {

/// Row-major H x W real map.
struct ScoreMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  ScoreMap() = default;
  ScoreMap(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

class UndefinedMetricError : public std::invalid_argument {
 public:
  UndefinedMetricError(const std::string& metric, const std::string& why)
      : std::invalid_argument(metric + " is undefined: " + why), metric_(metric) {}
  const std::string& metric() const { return metric_; }

 private:
  std::string metric_;
};

/// Area under the ROC curve by trapezoid over thresholds at the distinct
/// scores; equals the Mann-Whitney statistic with ties counted one half.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// AUROC over the concatenation of all pixels.
double p_auroc(std::span<const ScoreMap> maps, std::span<const Mask> masks);

struct Region {
  std::vector<int> pixels;  // linear indices in raster order
  int top = 0;
  int left = 0;
};

/// 8-connected foreground components, ordered by their first pixel in raster
/// order.
std::vector<Region> connected_components(const Mask& mask);

inline constexpr double kIouThreshold = 0.3;
inline constexpr double kFprLimit = 0.3;

/// Mean over ground-truth regions of 1[IoU(region, {map >= f}) >= tau],
/// integrated exactly over f in [0, 1]. The prediction set is the whole
/// binarized map of the region's image.
double aupro_paper(std::span<const ScoreMap> maps, std::span<const Mask> masks, double tau = kIouThreshold);

/// Mean per-region recall as a step function of the global false positive
/// rate, integrated over [0, fpr_limit] and divided by fpr_limit.
double aupro_standard(std::span<const ScoreMap> maps, std::span<const Mask> masks, double fpr_limit = kFprLimit);

struct MetricsReport {
  std::string class_name;
  double i_auroc = 0.0;
  double p_auroc = 0.0;
  double aupro_paper = 0.0;
  double aupro_standard = 0.0;
  std::size_t n_images = 0;
  std::size_t n_regions = 0;
};

struct ScoredSample {
  std::string id;
  std::string class_name;
  int label = 0;
  DefectType defect = DefectType::kNone;
  Mask gt_mask;
  double s_im = 0.0;
  ScoreMap s_px;
};

/// Per-class rows in first-appearance order followed by a "mean" row holding
/// the arithmetic mean of the class rows.
std::vector<MetricsReport> evaluate_run(std::span<const ScoredSample> samples);

}  // namespace misdd
