#include "misdd/data_synth.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"
#include "misdd/tensor_io.h"

namespace misdd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct ClassRecipe {
  std::array<double, 3> base_color;
  int kind;  // 0 tile, 1 fabric, 2 plate, 3 foam
};

ClassRecipe recipe_for(std::string_view name) {
  if (name == "tile") return {{0.72, 0.50, 0.38}, 0};
  if (name == "fabric") return {{0.32, 0.40, 0.66}, 1};
  if (name == "plate") return {{0.62, 0.64, 0.68}, 2};
  if (name == "foam") return {{0.80, 0.74, 0.50}, 3};
  const std::uint64_t h = hash_string(name);
  Rng r(h);
  return {{r.uniform(0.3, 0.8), r.uniform(0.3, 0.8), r.uniform(0.3, 0.8)}, static_cast<int>(h % 4)};
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(pixels.begin(), pixels.end(), [](auto v) { return v != 0; }));
}

std::string_view to_string(DefectType t) {
  switch (t) {
    case DefectType::kNone:
      return "none";
    case DefectType::kRgbOnly:
      return "rgb_only";
    case DefectType::kDepthOnly:
      return "depth_only";
    case DefectType::kCombined:
      return "combined";
  }
  return "none";
}

DefectType parse_defect_type(std::string_view s) {
  if (s == "none") return DefectType::kNone;
  if (s == "rgb_only") return DefectType::kRgbOnly;
  if (s == "depth_only") return DefectType::kDepthOnly;
  if (s == "combined") return DefectType::kCombined;
  throw std::invalid_argument("unknown defect type '" + std::string(s) + "'");
}

std::string_view to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

void DatasetSpec::validate() const {
  if (classes.empty()) throw InvalidSpecError("classes", "must list at least one class");
  std::set<std::string> unique(classes.begin(), classes.end());
  if (unique.size() != classes.size()) throw InvalidSpecError("classes", "duplicate class name");
  if (n_train_normal < 1) throw InvalidSpecError("n_train_normal", "must be >= 1");
  if (n_test_normal < 0) throw InvalidSpecError("n_test_normal", "must be >= 0");
  if (n_test_anomalous < 0) throw InvalidSpecError("n_test_anomalous", "must be >= 0");
  if (image_size < 16) throw InvalidSpecError("image_size", "must be >= 16");
  const DefectMix& m = defect_mix;
  if (m.rgb_only < 0 || m.depth_only < 0 || m.combined < 0) {
    throw InvalidSpecError("defect_mix", "proportions must be nonnegative");
  }
  if (std::abs(m.rgb_only + m.depth_only + m.combined - 1.0) > 1e-9) {
    throw InvalidSpecError("defect_mix", "proportions must sum to 1");
  }
}

Dataset::Dataset(DatasetSpec spec, std::vector<PairedSample> train, std::vector<PairedSample> test)
    : spec_(std::move(spec)), train_(std::move(train)), test_(std::move(test)) {}

const PairedSample& Dataset::by_id(std::string_view id) const {
  for (const auto* split : {&train_, &test_}) {
    for (const auto& s : *split) {
      if (s.id == id) return s;
    }
  }
  throw std::out_of_range("no sample with id '" + std::string(id) + "'");
}

PairedSample render_normal(std::string_view class_name, int size, Rng& rng) {
  const ClassRecipe recipe = recipe_for(class_name);
  PairedSample s;
  s.class_name = std::string(class_name);
  s.rgb = Image(size, size, 3);
  s.depth = Image(size, size, 1);
  s.gt_mask = Mask(size, size);

  // Low-frequency background shared by both channels.
  const double f1 = rng.uniform(0.3, 1.0), f2 = rng.uniform(0.3, 1.0);
  const double p1 = rng.uniform(), p2 = rng.uniform();
  std::array<double, 3> color = recipe.base_color;
  for (auto& c : color) c += rng.uniform(-0.03, 0.03);
  const double phase_u = rng.uniform(), phase_v = rng.uniform();
  const double tilt_u = rng.uniform(-0.04, 0.04), tilt_v = rng.uniform(-0.04, 0.04);

  struct Blob {
    double u, v, r, amp;
  };
  std::vector<Blob> blobs;
  if (recipe.kind == 3) {
    for (int i = 0; i < 14; ++i) {
      blobs.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.04, 0.1), rng.uniform(-1.0, 1.0)});
    }
  }

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size, v = (y + 0.5) / size;
      const double bg = 0.05 * std::sin(kTwoPi * (f1 * u + p1)) + 0.05 * std::cos(kTwoPi * (f2 * v + p2));
      double shade = 0.0;
      double height = 0.5 + tilt_u * (u - 0.5) + tilt_v * (v - 0.5);
      switch (recipe.kind) {
        case 0: {  // tiles with grout lines
          const double gu = std::fmod(u * 4.0 + phase_u, 1.0), gv = std::fmod(v * 4.0 + phase_v, 1.0);
          const bool grout = gu < 0.09 || gv < 0.09;
          shade = grout ? -0.25 : 0.0;
          height += grout ? -0.07 : 0.0;
          break;
        }
        case 1: {  // woven fabric
          const double w = std::sin(kTwoPi * (8.0 * u + phase_u)) * std::sin(kTwoPi * (8.0 * v + phase_v));
          shade = 0.09 * w + 0.04 * std::sin(kTwoPi * (6.0 * (u + v) + phase_u));
          height += 0.035 * w;
          break;
        }
        case 2: {  // brushed plate on a shallow dome
          shade = 0.035 * std::sin(kTwoPi * (22.0 * v + 0.3 * std::sin(kTwoPi * (u + phase_u))));
          const double r2 = (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5);
          height += 0.14 * (0.5 - r2 * 2.0);
          break;
        }
        default: {  // porous foam
          double acc = 0.0;
          for (const auto& b : blobs) {
            const double d2 = (u - b.u) * (u - b.u) + (v - b.v) * (v - b.v);
            acc += b.amp * std::exp(-d2 / (2.0 * b.r * b.r));
          }
          shade = 0.08 * acc;
          height += 0.04 * acc;
          break;
        }
      }
      for (int c = 0; c < 3; ++c) {
        s.rgb.at(y, x, c) = clamp01(color[c] + bg + shade + rng.normal(0.0, kPixelNoiseSigma));
      }
      s.depth.at(y, x) = clamp01(std::clamp(height + 0.5 * bg, 0.25, 0.75) + rng.normal(0.0, kPixelNoiseSigma));
    }
  }
  return s;
}

namespace {

// Rasterizes a random ellipse or thick polyline. Returns the region and its
// center (used for the bump falloff).
Mask random_region(int size, Rng& rng, double& cy, double& cx, double& radius) {
  Mask m(size, size);
  if (rng.uniform() < 0.6) {
    cx = rng.uniform(0.15, 0.85) * size;
    cy = rng.uniform(0.15, 0.85) * size;
    const double a = rng.uniform(0.03, 0.16) * size;
    const double b = rng.uniform(0.03, 0.16) * size;
    const double th = rng.uniform(0.0, std::numbers::pi);
    const double ct = std::cos(th), st = std::sin(th);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double ru = (dx * ct + dy * st) / a, rv = (-dx * st + dy * ct) / b;
        if (ru * ru + rv * rv <= 1.0) m.at(y, x) = 1;
      }
    }
    radius = std::max(a, b);
  } else {
    const int segments = 2 + static_cast<int>(rng.index(3));
    const double thickness = rng.uniform(0.8, 1.8);
    double px = rng.uniform(0.15, 0.85) * size, py = rng.uniform(0.15, 0.85) * size;
    std::vector<std::array<double, 2>> pts{{px, py}};
    double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int i = 0; i < segments; ++i) {
      heading += rng.uniform(-1.0, 1.0);
      const double len = rng.uniform(0.08, 0.22) * size;
      px = std::clamp(px + len * std::cos(heading), 1.0, size - 1.0);
      py = std::clamp(py + len * std::sin(heading), 1.0, size - 1.0);
      pts.push_back({px, py});
    }
    double sx = 0, sy = 0;
    for (const auto& p : pts) {
      sx += p[0];
      sy += p[1];
    }
    cx = sx / pts.size();
    cy = sy / pts.size();
    radius = 0.0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double qx = x + 0.5, qy = y + 0.5;
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
          const double ax = pts[i][0], ay = pts[i][1], bx = pts[i + 1][0], by = pts[i + 1][1];
          const double vx = bx - ax, vy = by - ay;
          const double len2 = vx * vx + vy * vy;
          const double t = len2 > 0 ? std::clamp(((qx - ax) * vx + (qy - ay) * vy) / len2, 0.0, 1.0) : 0.0;
          const double dx = qx - (ax + t * vx), dy = qy - (ay + t * vy);
          if (dx * dx + dy * dy <= thickness * thickness) {
            m.at(y, x) = 1;
            radius = std::max(radius, std::hypot(qx - cx, qy - cy));
            break;
          }
        }
      }
    }
  }
  return m;
}

}  // namespace

PairedSample inject_defect(const PairedSample& sample, DefectType defect_type, Rng& rng) {
  if (sample.label != 0) throw std::invalid_argument("inject_defect: input sample must be normal");
  if (defect_type == DefectType::kNone) throw std::invalid_argument("inject_defect: defect type none");
  const int size = sample.height();
  const double area = static_cast<double>(size) * size;

  Mask region;
  double cy = 0, cx = 0, radius = 1;
  int attempt = 0;
  for (;; ++attempt) {
    if (attempt >= kDefectRetryCap) {
      throw std::runtime_error("inject_defect: could not draw a valid defect region after " +
                               std::to_string(kDefectRetryCap) + " attempts");
    }
    region = random_region(size, rng, cy, cx, radius);
    const double frac = region.count() / area;
    if (frac >= 0.005 && frac <= 0.10) break;
  }

  PairedSample out = sample;
  out.label = 1;
  out.defect = defect_type;
  out.gt_mask = region;
  radius = std::max(radius, 1.0);

  const bool color = defect_type == DefectType::kRgbOnly || defect_type == DefectType::kCombined;
  const bool geometry = defect_type == DefectType::kDepthOnly || defect_type == DefectType::kCombined;
  const std::size_t n = region.count();

  if (color) {
    // Blotch color pushed away from the local mean so it stays visible.
    std::array<double, 3> mean{};
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (region.at(y, x))
          for (int c = 0; c < 3; ++c) mean[c] += sample.rgb.at(y, x, c) / n;
    std::array<double, 3> blotch{};
    for (int tries = 0; tries < 32; ++tries) {
      for (auto& c : blotch) c = rng.uniform();
      double d = 0;
      for (int c = 0; c < 3; ++c) d += (blotch[c] - mean[c]) * (blotch[c] - mean[c]);
      if (std::sqrt(d) >= 0.35) break;
    }
    const double alpha = rng.uniform(0.55, 0.85);
    double total = 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!region.at(y, x)) continue;
        for (int c = 0; c < 3; ++c) {
          const float before = sample.rgb.at(y, x, c);
          const float after = clamp01((1.0 - alpha) * before + alpha * blotch[c]);
          out.rgb.at(y, x, c) = after;
          total += std::abs(static_cast<double>(after) - before);
        }
      }
    }
    out.rgb_delta = total / (3.0 * n);
  }
  if (geometry) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double amp = rng.uniform(0.08, 0.18);
    double total = 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!region.at(y, x)) continue;
        const double r = std::hypot(y + 0.5 - cy, x + 0.5 - cx) / radius;
        const double falloff = 0.5 + 0.5 * std::exp(-2.0 * r * r);
        const float before = sample.depth.at(y, x);
        const float after = clamp01(before + sign * amp * falloff);
        out.depth.at(y, x) = after;
        total += std::abs(static_cast<double>(after) - before);
      }
    }
    out.depth_delta = total / n;
  }
  return out;
}

namespace {

std::vector<DefectType> defect_schedule(const DatasetSpec& spec, const std::string& class_name) {
  const int n = spec.n_test_anomalous;
  const std::array<double, 3> mix{spec.defect_mix.rgb_only, spec.defect_mix.depth_only, spec.defect_mix.combined};
  const std::array<DefectType, 3> kinds{DefectType::kRgbOnly, DefectType::kDepthOnly, DefectType::kCombined};
  // Largest-remainder apportionment, ties to the earlier kind.
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = mix[k] * n;
    counts[k] = static_cast<int>(std::floor(exact + 1e-9));
    rem[k] = exact - counts[k];
    assigned += counts[k];
  }
  while (assigned < n) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rem[k] > rem[best] + 1e-12) best = k;
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  std::vector<DefectType> out;
  for (int k = 0; k < 3; ++k) out.insert(out.end(), counts[k], kinds[k]);
  Rng rng(derive_seed(spec.seed, hash_string("defects/" + class_name)));
  rng.shuffle(out);
  return out;
}

std::string sample_id(Split split, const std::string& cls, std::string_view kind, int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", index);
  return std::string(to_string(split)) + "_" + cls + "_" + std::string(kind) + "_" + buf;
}

}  // namespace

Dataset synthesize_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<PairedSample> train, test;
  for (const auto& cls : spec.classes) {
    for (int i = 0; i < spec.n_train_normal; ++i) {
      const std::string id = sample_id(Split::kTrain, cls, "good", i);
      Rng rng(derive_seed(spec.seed, hash_string(id)));
      PairedSample s = render_normal(cls, spec.image_size, rng);
      s.id = id;
      s.split = Split::kTrain;
      train.push_back(std::move(s));
    }
    for (int i = 0; i < spec.n_test_normal; ++i) {
      const std::string id = sample_id(Split::kTest, cls, "good", i);
      Rng rng(derive_seed(spec.seed, hash_string(id)));
      PairedSample s = render_normal(cls, spec.image_size, rng);
      s.id = id;
      s.split = Split::kTest;
      test.push_back(std::move(s));
    }
    const auto defects = defect_schedule(spec, cls);
    for (int i = 0; i < spec.n_test_anomalous; ++i) {
      const std::string id = sample_id(Split::kTest, cls, "defect", i);
      Rng rng(derive_seed(spec.seed, hash_string(id)));
      PairedSample base = render_normal(cls, spec.image_size, rng);
      PairedSample s = inject_defect(base, defects[i], rng);
      s.id = id;
      s.split = Split::kTest;
      test.push_back(std::move(s));
    }
  }
  return Dataset(spec, std::move(train), std::move(test));
}

Dataset generate_dataset(const DatasetSpec& spec, const fs::path& out_dir) {
  Dataset d = synthesize_dataset(spec);
  save_dataset(d, out_dir);
  return d;
}

namespace {

json spec_to_json(const DatasetSpec& s) {
  return json{{"classes", s.classes},
              {"n_train_normal", s.n_train_normal},
              {"n_test_normal", s.n_test_normal},
              {"n_test_anomalous", s.n_test_anomalous},
              {"image_size", s.image_size},
              {"defect_mix",
               {{"rgb_only", s.defect_mix.rgb_only},
                {"depth_only", s.defect_mix.depth_only},
                {"combined", s.defect_mix.combined}}},
              {"seed", s.seed}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  s.classes = j.at("classes").get<std::vector<std::string>>();
  s.n_train_normal = j.at("n_train_normal").get<int>();
  s.n_test_normal = j.at("n_test_normal").get<int>();
  s.n_test_anomalous = j.at("n_test_anomalous").get<int>();
  s.image_size = j.at("image_size").get<int>();
  s.defect_mix.rgb_only = j.at("defect_mix").at("rgb_only").get<double>();
  s.defect_mix.depth_only = j.at("defect_mix").at("depth_only").get<double>();
  s.defect_mix.combined = j.at("defect_mix").at("combined").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

void write_image(const fs::path& path, const Image& img) {
  const std::array<std::uint32_t, 3> dims{static_cast<std::uint32_t>(img.height),
                                          static_cast<std::uint32_t>(img.width),
                                          static_cast<std::uint32_t>(img.channels)};
  write_tensor_file(path, DType::kFloat32, dims, std::as_bytes(std::span(img.pixels)));
}

void write_mask(const fs::path& path, const Mask& m) {
  const std::array<std::uint32_t, 2> dims{static_cast<std::uint32_t>(m.height),
                                          static_cast<std::uint32_t>(m.width)};
  write_tensor_file(path, DType::kUInt8, dims, std::as_bytes(std::span(m.pixels)));
}

Image read_image(const fs::path& path, int channels, int size, const std::string& id) {
  if (!fs::exists(path)) throw DatasetFormatError("missing tensor file for sample '" + id + "': " + path.string());
  RawTensor t = read_tensor_file(path);
  if (t.dims.size() != 3 || static_cast<int>(t.dims[0]) != size || static_cast<int>(t.dims[1]) != size ||
      static_cast<int>(t.dims[2]) != channels) {
    throw DatasetFormatError("shape mismatch between manifest and tensor file for sample '" + id + "'");
  }
  Image img;
  img.height = size;
  img.width = size;
  img.channels = channels;
  img.pixels = t.as<float>();
  return img;
}

Mask read_mask(const fs::path& path, int size, const std::string& id) {
  if (!fs::exists(path)) throw DatasetFormatError("missing tensor file for sample '" + id + "': " + path.string());
  RawTensor t = read_tensor_file(path);
  if (t.dims.size() != 2 || static_cast<int>(t.dims[0]) != size || static_cast<int>(t.dims[1]) != size) {
    throw DatasetFormatError("shape mismatch between manifest and mask file for sample '" + id + "'");
  }
  Mask m;
  m.height = size;
  m.width = size;
  m.pixels = t.as<std::uint8_t>();
  return m;
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "samples", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + out_dir.string() + ": " + ec.message());
  json samples = json::array();
  for (const auto* split : {&dataset.train(), &dataset.test()}) {
    for (const auto& s : *split) {
      const std::string rgb = "samples/" + s.id + "_rgb.bin";
      const std::string depth = "samples/" + s.id + "_depth.bin";
      const std::string mask = "samples/" + s.id + "_mask.bin";
      write_image(out_dir / rgb, s.rgb);
      write_image(out_dir / depth, s.depth);
      write_mask(out_dir / mask, s.gt_mask);
      samples.push_back(json{{"id", s.id},
                             {"split", std::string(to_string(s.split))},
                             {"class", s.class_name},
                             {"label", s.label},
                             {"defect_type", std::string(to_string(s.defect))},
                             {"rgb_delta", s.rgb_delta},
                             {"depth_delta", s.depth_delta},
                             {"height", s.height()},
                             {"width", s.width()},
                             {"files", {{"rgb", rgb}, {"depth", depth}, {"mask", mask}}}});
    }
  }
  json manifest{{"format", "misdd-dataset"}, {"version", 1}, {"spec", spec_to_json(dataset.spec())},
                {"samples", samples}};
  write_file_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw DatasetFormatError("missing manifest: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw DatasetFormatError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "misdd-dataset") throw DatasetFormatError("not a dataset manifest");
    DatasetSpec spec = spec_from_json(manifest.at("spec"));
    std::vector<PairedSample> train, test;
    for (const auto& rec : manifest.at("samples")) {
      PairedSample s;
      s.id = rec.at("id").get<std::string>();
      s.class_name = rec.at("class").get<std::string>();
      s.split = rec.at("split").get<std::string>() == "train" ? Split::kTrain : Split::kTest;
      s.label = rec.at("label").get<int>();
      s.defect = parse_defect_type(rec.at("defect_type").get<std::string>());
      s.rgb_delta = rec.at("rgb_delta").get<double>();
      s.depth_delta = rec.at("depth_delta").get<double>();
      const int h = rec.at("height").get<int>();
      if (h != spec.image_size || rec.at("width").get<int>() != spec.image_size) {
        throw DatasetFormatError("sample '" + s.id + "' size disagrees with spec image_size");
      }
      s.rgb = read_image(dir / rec.at("files").at("rgb").get<std::string>(), 3, h, s.id);
      s.depth = read_image(dir / rec.at("files").at("depth").get<std::string>(), 1, h, s.id);
      s.gt_mask = read_mask(dir / rec.at("files").at("mask").get<std::string>(), h, s.id);
      if ((s.gt_mask.count() == 0) != (s.label == 0)) {
        throw DatasetFormatError("sample '" + s.id + "' label disagrees with its mask");
      }
      (s.split == Split::kTrain ? train : test).push_back(std::move(s));
    }
    return Dataset(std::move(spec), std::move(train), std::move(test));
  } catch (const json::exception& e) {
    throw DatasetFormatError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
}

}  // namespace misdd
