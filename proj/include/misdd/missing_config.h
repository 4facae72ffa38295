#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "misdd/data_synth.h"

namespace misdd {

enum class MissingType { kNone, kRgb, kThreeD, kBoth };
enum class MissingLevel { kInput, kFeature };

std::string_view to_string(MissingType t);
std::string_view to_string(MissingLevel l);
// Accepts "rgb", "3d" (or "threeD"), "both", "none".
MissingType parse_missing_type(std::string_view s);
MissingLevel parse_missing_level(std::string_view s);

/// Per-sample modality availability. Masks are constant over a sample, so the
/// indicator is a flag pair that expands to all-zero / all-one masks on demand.
/// The pair <0,0> is unrepresentable through indicator_for().
struct ModalityIndicator {
  bool rgb = true;
  bool three_d = true;

  bool complete() const { return rgb && three_d; }
  double rgb_mask() const { return rgb ? 1.0 : 0.0; }
  double three_d_mask() const { return three_d ? 1.0 : 0.0; }
  friend bool operator==(const ModalityIndicator&, const ModalityIndicator&) = default;
};

class MissingConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// <0,1> if RGB is missing, <1,0> if 3D is missing, <1,1> otherwise.
ModalityIndicator indicator_for(bool rgb_missing, bool three_d_missing);

struct MissingSchedule {
  MissingType type = MissingType::kNone;
  double eta = 0.0;
  std::uint64_t seed = 0;
  MissingLevel level = MissingLevel::kInput;
  std::vector<ModalityIndicator> assignments;

  std::size_t size() const { return assignments.size(); }
  const ModalityIndicator& operator[](std::size_t i) const { return assignments.at(i); }
  std::size_t rgb_missing_count() const;
  std::size_t three_d_missing_count() const;
};

/// Exact-count assignment: round(eta * n) samples lose the modality for type
/// rgb/3d; for type both, two disjoint sets of round(eta * n / 2) samples lose
/// RGB and 3D respectively. Sample positions come from a seeded shuffle.
MissingSchedule sample_missing_schedule(std::size_t n, MissingType type, double eta, std::uint64_t seed,
                                        MissingLevel level = MissingLevel::kInput);

// Schedules for the two dataset splits use independent streams of one seed.
MissingSchedule schedule_for_split(std::size_t n, MissingType type, double eta, std::uint64_t seed,
                                   MissingLevel level, Split split);

struct ModalityPair {
  Image rgb;
  Image depth;
};

// Input-level masking: the missing channel becomes the all-zero dummy.
ModalityPair apply_input_missing(const PairedSample& sample, const ModalityIndicator& ind);
ModalityPair apply_input_missing(const ModalityPair& pair, const ModalityIndicator& ind);

}  // namespace misdd
