#include "misdd/metrics.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace misdd {

namespace {

void check_maps(std::span<const ScoreMap> maps, std::span<const Mask> masks, const char* metric) {
  if (maps.size() != masks.size()) {
    throw std::invalid_argument(std::string(metric) + ": " + std::to_string(maps.size()) + " maps but " +
                                std::to_string(masks.size()) + " masks");
  }
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].height != masks[i].height || maps[i].width != masks[i].width ||
        maps[i].values.size() != masks[i].pixels.size()) {
      throw std::invalid_argument(std::string(metric) + ": map/mask shape mismatch at index " + std::to_string(i));
    }
  }
}

// Pixel reference into the concatenated map set.
struct PixelRef {
  double score;
  int image;
  int index;
};

std::vector<PixelRef> sorted_pixels_desc(std::span<const ScoreMap> maps) {
  std::vector<PixelRef> px;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    for (std::size_t j = 0; j < maps[i].values.size(); ++j) {
      px.push_back({maps[i].values[j], static_cast<int>(i), static_cast<int>(j)});
    }
  }
  std::stable_sort(px.begin(), px.end(), [](const PixelRef& a, const PixelRef& b) { return a.score > b.score; });
  return px;
}

struct RegionIndex {
  // Region id per (image, pixel), -1 for background.
  std::vector<std::vector<int>> label;
  std::vector<int> region_size;
  std::vector<int> region_image;
  std::vector<std::vector<int>> image_regions;
};

RegionIndex index_regions(std::span<const Mask> masks) {
  RegionIndex idx;
  idx.label.resize(masks.size());
  idx.image_regions.resize(masks.size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    idx.label[i].assign(masks[i].pixels.size(), -1);
    for (const Region& r : connected_components(masks[i])) {
      const int id = static_cast<int>(idx.region_size.size());
      for (int p : r.pixels) idx.label[i][static_cast<std::size_t>(p)] = id;
      idx.region_size.push_back(static_cast<int>(r.pixels.size()));
      idx.region_image.push_back(static_cast<int>(i));
      idx.image_regions[i].push_back(id);
    }
  }
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("auroc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc", "labels contain a single class");
  for (double s : scores) {
    if (std::isnan(s)) throw std::invalid_argument("auroc: NaN score");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  // Sweep thresholds from high to low; each distinct score adds one ROC vertex.
  double area = 0.0;
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    double dtp = 0.0, dfp = 0.0;
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      if (labels[order[i]] == 1) {
        dtp += 1.0;
      } else {
        dfp += 1.0;
      }
    }
    area += dfp * (tp + 0.5 * dtp);
    tp += dtp;
    fp += dfp;
  }
  return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

double p_auroc(std::span<const ScoreMap> maps, std::span<const Mask> masks) {
  check_maps(maps, masks, "p_auroc");
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    scores.insert(scores.end(), maps[i].values.begin(), maps[i].values.end());
    for (auto m : masks[i].pixels) labels.push_back(m != 0 ? 1 : 0);
  }
  if (std::find(labels.begin(), labels.end(), 1) == labels.end()) {
    throw UndefinedMetricError("p_auroc", "no defect pixels");
  }
  if (std::find(labels.begin(), labels.end(), 0) == labels.end()) {
    throw UndefinedMetricError("p_auroc", "no normal pixels");
  }
  return auroc(scores, labels);
}

std::vector<Region> connected_components(const Mask& mask) {
  const int h = mask.height;
  const int w = mask.width;
  std::vector<int> parent(static_cast<std::size_t>(h) * w, -1);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  };
  auto unite = [&](int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      const int i = y * w + x;
      parent[static_cast<std::size_t>(i)] = i;
      // Already visited 8-neighbours: W, NW, N, NE.
      const int ny[] = {y, y - 1, y - 1, y - 1};
      const int nx[] = {x - 1, x - 1, x, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || nx[k] < 0 || nx[k] >= w) continue;
        if (mask.at(ny[k], nx[k])) unite(i, ny[k] * w + nx[k]);
      }
    }
  }
  std::map<int, std::size_t> root_to_region;
  std::vector<Region> regions;
  for (int i = 0; i < h * w; ++i) {
    if (parent[static_cast<std::size_t>(i)] < 0) continue;
    const int r = find(i);
    auto [it, fresh] = root_to_region.try_emplace(r, regions.size());
    if (fresh) {
      Region reg;
      reg.top = i / w;
      reg.left = i % w;
      regions.push_back(std::move(reg));
    }
    regions[it->second].pixels.push_back(i);
  }
  return regions;
}

double aupro_paper(std::span<const ScoreMap> maps, std::span<const Mask> masks, double tau) {
  check_maps(maps, masks, "aupro_paper");
  const RegionIndex idx = index_regions(masks);
  const std::size_t n_regions = idx.region_size.size();
  if (n_regions == 0) throw UndefinedMetricError("aupro_paper", "no ground-truth regions");

  std::vector<int> predicted(maps.size(), 0);  // |P_i(f)|
  std::vector<int> inter(n_regions, 0);        // |R_k ∩ P_i(f)|
  std::vector<char> passing(n_regions, 0);
  int n_passing = 0;

  const std::vector<PixelRef> px = sorted_pixels_desc(maps);
  // (threshold, PRO at that threshold) in descending threshold order.
  std::vector<std::pair<double, double>> curve;
  std::vector<int> touched;
  for (std::size_t i = 0; i < px.size();) {
    const double f = px[i].score;
    touched.clear();
    for (; i < px.size() && px[i].score == f; ++i) {
      const auto im = static_cast<std::size_t>(px[i].image);
      ++predicted[im];
      const int r = idx.label[im][static_cast<std::size_t>(px[i].index)];
      if (r >= 0) ++inter[static_cast<std::size_t>(r)];
      touched.push_back(px[i].image);
    }
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    for (int im : touched) {
      for (int r : idx.image_regions[static_cast<std::size_t>(im)]) {
        const auto k = static_cast<std::size_t>(r);
        const double uni = idx.region_size[k] + predicted[static_cast<std::size_t>(im)] - inter[k];
        const char pass = static_cast<double>(inter[k]) / uni >= tau ? 1 : 0;
        n_passing += pass - passing[k];
        passing[k] = pass;
      }
    }
    curve.emplace_back(f, static_cast<double>(n_passing) / static_cast<double>(n_regions));
  }
  // PRO(f) on (u_{j-1}, u_j] equals PRO(u_j); above the top score nothing is
  // predicted and PRO is zero.
  double area = 0.0;
  double lower = 0.0;
  for (auto it = curve.rbegin(); it != curve.rend(); ++it) {
    const double u = std::min(it->first, 1.0);
    if (u > lower) {
      area += (u - lower) * it->second;
      lower = u;
    }
  }
  return area;
}

double aupro_standard(std::span<const ScoreMap> maps, std::span<const Mask> masks, double fpr_limit) {
  check_maps(maps, masks, "aupro_standard");
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw std::invalid_argument("aupro_standard: fpr_limit outside (0, 1]");
  const RegionIndex idx = index_regions(masks);
  const std::size_t n_regions = idx.region_size.size();
  if (n_regions == 0) throw UndefinedMetricError("aupro_standard", "no ground-truth regions");
  std::size_t n_normal = 0;
  for (const Mask& m : masks) n_normal += m.pixels.size() - m.count();
  if (n_normal == 0) throw UndefinedMetricError("aupro_standard", "no normal pixels");

  std::vector<int> inter(n_regions, 0);
  double recall_sum = 0.0;
  std::size_t false_pos = 0;
  const std::vector<PixelRef> px = sorted_pixels_desc(maps);
  double area = 0.0;
  double prev_fpr = 0.0;
  double prev_pro = 0.0;
  for (std::size_t i = 0; i < px.size() && prev_fpr < fpr_limit;) {
    const double f = px[i].score;
    for (; i < px.size() && px[i].score == f; ++i) {
      const int r = idx.label[static_cast<std::size_t>(px[i].image)][static_cast<std::size_t>(px[i].index)];
      if (r >= 0) {
        ++inter[static_cast<std::size_t>(r)];
        recall_sum += 1.0 / idx.region_size[static_cast<std::size_t>(r)];
      } else {
        ++false_pos;
      }
    }
    const double fpr = static_cast<double>(false_pos) / static_cast<double>(n_normal);
    area += (std::min(fpr, fpr_limit) - prev_fpr) * prev_pro;
    prev_fpr = std::min(fpr, fpr_limit);
    prev_pro = recall_sum / static_cast<double>(n_regions);
  }
  area += (fpr_limit - prev_fpr) * prev_pro;
  return area / fpr_limit;
}

std::vector<MetricsReport> evaluate_run(std::span<const ScoredSample> samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate_run: no scored samples");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ScoredSample*>> by_class;
  for (const ScoredSample& s : samples) {
    if (s.s_px.values.empty()) throw std::invalid_argument("evaluate_run: missing pixel scores for " + s.id);
    auto [it, fresh] = by_class.try_emplace(s.class_name);
    if (fresh) order.push_back(s.class_name);
    it->second.push_back(&s);
  }
  std::vector<MetricsReport> rows;
  for (const std::string& cls : order) {
    const auto& group = by_class[cls];
    std::vector<double> im_scores;
    std::vector<int> labels;
    std::vector<ScoreMap> maps;
    std::vector<Mask> masks;
    for (const ScoredSample* s : group) {
      im_scores.push_back(s->s_im);
      labels.push_back(s->label);
      maps.push_back(s->s_px);
      masks.push_back(s->gt_mask);
    }
    MetricsReport r;
    r.class_name = cls;
    r.n_images = group.size();
    for (const Mask& m : masks) r.n_regions += connected_components(m).size();
    try {
      r.i_auroc = auroc(im_scores, labels);
    } catch (const UndefinedMetricError&) {
      throw UndefinedMetricError("i_auroc", "class '" + cls + "': labels contain a single class");
    }
    r.p_auroc = p_auroc(maps, masks);
    r.aupro_paper = aupro_paper(maps, masks);
    r.aupro_standard = aupro_standard(maps, masks);
    rows.push_back(r);
  }
  MetricsReport mean;
  mean.class_name = "mean";
  for (const MetricsReport& r : rows) {
    mean.i_auroc += r.i_auroc;
    mean.p_auroc += r.p_auroc;
    mean.aupro_paper += r.aupro_paper;
    mean.aupro_standard += r.aupro_standard;
    mean.n_images += r.n_images;
    mean.n_regions += r.n_regions;
  }
  const double n = static_cast<double>(rows.size());
  mean.i_auroc /= n;
  mean.p_auroc /= n;
  mean.aupro_paper /= n;
  mean.aupro_standard /= n;
  rows.push_back(mean);
  return rows;
}

}  // namespace misdd
