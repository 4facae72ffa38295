#include "misdd/missing_config.h"

#include <algorithm>
#include <cmath>

#include "misdd/rng.h"

namespace misdd {

std::string_view to_string(MissingType t) {
  switch (t) {
    case MissingType::kNone:
      return "none";
    case MissingType::kRgb:
      return "rgb";
    case MissingType::kThreeD:
      return "3d";
    case MissingType::kBoth:
      return "both";
  }
  return "none";
}

std::string_view to_string(MissingLevel l) { return l == MissingLevel::kInput ? "input" : "feature"; }

MissingType parse_missing_type(std::string_view s) {
  if (s == "none") return MissingType::kNone;
  if (s == "rgb") return MissingType::kRgb;
  if (s == "3d" || s == "threeD" || s == "3D") return MissingType::kThreeD;
  if (s == "both") return MissingType::kBoth;
  throw MissingConfigError("unknown missing type '" + std::string(s) + "' (expected rgb|3d|both|none)");
}

MissingLevel parse_missing_level(std::string_view s) {
  if (s == "input") return MissingLevel::kInput;
  if (s == "feature") return MissingLevel::kFeature;
  throw MissingConfigError("unknown missing level '" + std::string(s) + "' (expected input|feature)");
}

ModalityIndicator indicator_for(bool rgb_missing, bool three_d_missing) {
  if (rgb_missing && three_d_missing) {
    throw MissingConfigError("a sample cannot miss both RGB and 3D modalities");
  }
  return {!rgb_missing, !three_d_missing};
}

std::size_t MissingSchedule::rgb_missing_count() const {
  return static_cast<std::size_t>(std::count_if(assignments.begin(), assignments.end(), [](auto& a) { return !a.rgb; }));
}

std::size_t MissingSchedule::three_d_missing_count() const {
  return static_cast<std::size_t>(
      std::count_if(assignments.begin(), assignments.end(), [](auto& a) { return !a.three_d; }));
}

MissingSchedule sample_missing_schedule(std::size_t n, MissingType type, double eta, std::uint64_t seed,
                                        MissingLevel level) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw MissingConfigError("missing rate eta must lie in [0, 1]");
  if (n < 1) throw MissingConfigError("missing schedule needs at least one sample");
  MissingSchedule s;
  s.type = type;
  s.eta = eta;
  s.seed = seed;
  s.level = level;
  s.assignments.assign(n, indicator_for(false, false));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, hash_string("missing-schedule")));
  rng.shuffle(order);

  const auto nd = static_cast<double>(n);
  switch (type) {
    case MissingType::kNone:
      break;
    case MissingType::kRgb: {
      const auto k = static_cast<std::size_t>(std::llround(eta * nd));
      for (std::size_t i = 0; i < k; ++i) s.assignments[order[i]] = indicator_for(true, false);
      break;
    }
    case MissingType::kThreeD: {
      const auto k = static_cast<std::size_t>(std::llround(eta * nd));
      for (std::size_t i = 0; i < k; ++i) s.assignments[order[i]] = indicator_for(false, true);
      break;
    }
    case MissingType::kBoth: {
      // Each set is round(eta*n/2); 2*round(eta*n/2) <= n + 1 only when eta = 1
      // and n is odd, where the second set is truncated to keep them disjoint.
      const auto k = static_cast<std::size_t>(std::llround(eta * nd / 2.0));
      const std::size_t k_rgb = std::min(k, n);
      const std::size_t k_3d = std::min(k, n - k_rgb);
      for (std::size_t i = 0; i < k_rgb; ++i) s.assignments[order[i]] = indicator_for(true, false);
      for (std::size_t i = 0; i < k_3d; ++i) s.assignments[order[k_rgb + i]] = indicator_for(false, true);
      break;
    }
  }
  return s;
}

MissingSchedule schedule_for_split(std::size_t n, MissingType type, double eta, std::uint64_t seed,
                                   MissingLevel level, Split split) {
  return sample_missing_schedule(n, type, eta, derive_seed(seed, hash_string(to_string(split))), level);
}

ModalityPair apply_input_missing(const ModalityPair& pair, const ModalityIndicator& ind) {
  if (pair.rgb.height != pair.depth.height || pair.rgb.width != pair.depth.width) {
    throw MissingConfigError("apply_input_missing: RGB and depth shapes disagree");
  }
  ModalityPair out = pair;
  if (!ind.rgb) std::fill(out.rgb.pixels.begin(), out.rgb.pixels.end(), 0.0f);
  if (!ind.three_d) std::fill(out.depth.pixels.begin(), out.depth.pixels.end(), 0.0f);
  return out;
}

ModalityPair apply_input_missing(const PairedSample& sample, const ModalityIndicator& ind) {
  return apply_input_missing(ModalityPair{sample.rgb, sample.depth}, ind);
}

}  // namespace misdd
