#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "misdd/rng.h"

namespace misdd {

// Row-major H x W x C float image.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c = 0) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

enum class DefectType { kNone, kRgbOnly, kDepthOnly, kCombined };
enum class Split { kTrain, kTest };

std::string_view to_string(DefectType t);
DefectType parse_defect_type(std::string_view s);
std::string_view to_string(Split s);

struct PairedSample {
  std::string id;
  std::string class_name;
  Split split = Split::kTrain;
  Image rgb;    // H x W x 3
  Image depth;  // H x W x 1
  Mask gt_mask;
  int label = 0;
  DefectType defect = DefectType::kNone;
  // Mean absolute per-channel change inside the defect region, recorded by the
  // injector. Exactly zero for the untouched channel.
  double rgb_delta = 0.0;
  double depth_delta = 0.0;

  int height() const { return rgb.height; }
  int width() const { return rgb.width; }
};

struct DefectMix {
  double rgb_only = 1.0 / 3.0;
  double depth_only = 1.0 / 3.0;
  double combined = 1.0 / 3.0;
};

class InvalidSpecError : public std::invalid_argument {
 public:
  InvalidSpecError(const std::string& field, const std::string& why)
      : std::invalid_argument("invalid dataset spec field '" + field + "': " + why), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct DatasetSpec {
  std::vector<std::string> classes = {"tile", "fabric", "plate", "foam"};
  int n_train_normal = 50;
  int n_test_normal = 10;
  int n_test_anomalous = 20;
  int image_size = 64;
  DefectMix defect_mix;
  std::uint64_t seed = 0;

  // Throws InvalidSpecError naming the offending field.
  void validate() const;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetSpec spec, std::vector<PairedSample> train, std::vector<PairedSample> test);

  const DatasetSpec& spec() const { return spec_; }
  const std::vector<PairedSample>& train() const { return train_; }
  const std::vector<PairedSample>& test() const { return test_; }
  const std::vector<PairedSample>& split(Split s) const { return s == Split::kTrain ? train_ : test_; }
  const PairedSample& by_id(std::string_view id) const;
  int image_size() const { return spec_.image_size; }

 private:
  DatasetSpec spec_;
  std::vector<PairedSample> train_;
  std::vector<PairedSample> test_;
};

class DatasetFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Renders one normal sample of `class_name`. Classes without a built-in
// recipe get a procedural one derived from a hash of the name.
PairedSample render_normal(std::string_view class_name, int image_size, Rng& rng);

// Perturbs a normal sample inside a random ellipse or polyline region covering
// 0.5%..10% of the image. Retries degenerate regions up to kDefectRetryCap.
inline constexpr int kDefectRetryCap = 64;
PairedSample inject_defect(const PairedSample& sample, DefectType defect_type, Rng& rng);

Dataset synthesize_dataset(const DatasetSpec& spec);
Dataset generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);
void save_dataset(const Dataset& dataset, const std::filesystem::path& out_dir);
Dataset load_dataset(const std::filesystem::path& dir);

inline constexpr float kPixelNoiseSigma = 0.01f;

}  // namespace misdd
