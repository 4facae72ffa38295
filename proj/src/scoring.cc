#include "misdd/scoring.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace misdd {

using nlohmann::json;
using nn::Matrix;
using nn::RowVector;

namespace {

void require_unit(const RowVector& v, const char* what) {
  if (std::abs(v.norm() - 1.0) > kUnitNormTolerance) {
    throw std::invalid_argument(std::string(what) + " is not unit-norm (norm " + std::to_string(v.norm()) + ")");
  }
}

// Abnormal probability from the two similarities.
double two_way(double sim_normal, double sim_abnormal) {
  return 1.0 / (1.0 + std::exp((sim_normal - sim_abnormal) / kScoreTemperature));
}

Matrix stack_rows(const std::vector<RowVector>& rows, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i];
  return m;
}

const char* kind_name(GalleryKind k) {
  switch (k) {
    case GalleryKind::kRgb:
      return "rgb";
    case GalleryKind::kThreeD:
      return "3d";
    case GalleryKind::kText:
      return "text";
  }
  return "?";
}

}  // namespace

TextEmbeddingPair Galleries::text_pair(const std::string& class_name) const {
  const auto it = std::find(classes.begin(), classes.end(), class_name);
  if (it == classes.end() || text.entries.rows() < 2 * static_cast<Eigen::Index>(classes.size())) {
    throw std::invalid_argument("text gallery has no entry for class '" + class_name + "'");
  }
  const auto i = static_cast<Eigen::Index>(it - classes.begin());
  return {text.entries.row(2 * i), text.entries.row(2 * i + 1)};
}

Galleries build_galleries(const Model& model, const std::vector<PairedSample>& train, const MissingSchedule& schedule,
                          const std::vector<bool>* participates, const GalleryOptions& options) {
  if (schedule.size() != train.size()) throw std::invalid_argument("build_galleries: schedule/sample count mismatch");
  const EncoderConfig& cfg = model.config().encoder;
  Galleries g;
  g.rgb.kind = GalleryKind::kRgb;
  g.three_d.kind = GalleryKind::kThreeD;
  g.text.kind = GalleryKind::kText;
  g.classes = model.class_names();

  for (Branch b : kBranches) {
    Gallery& gal = b == Branch::kRgb ? g.rgb : g.three_d;
    std::vector<RowVector> pooled;
    std::map<int, std::vector<Matrix>> token_parts;
    const BranchPrompts bp = model.branch_prompts(b);
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (participates != nullptr && !(*participates)[i]) continue;
      const ModalityIndicator& ind = schedule[i];
      if (b == Branch::kRgb ? !ind.rgb : !ind.three_d) continue;
      const Image& img = b == Branch::kRgb ? train[i].rgb : train[i].depth;
      nn::Tape tape(false);
      EncodeOptions eo;
      eo.export_tokens = options.token_banks;
      const EncodedBranch e = encode(tape, model.vision(b), img, model.has_prompts() ? &bp : nullptr, eo);
      pooled.push_back(e.pooled.value());
      for (const auto& [layer, v] : e.per_layer) token_parts[layer].push_back(v.value());
    }
    gal.entries = stack_rows(pooled, cfg.embed_dim);
    if (options.token_banks) gal.source_layers = cfg.feature_layers;
    for (auto& [layer, parts] : token_parts) {
      Eigen::Index rows = 0;
      for (const auto& p : parts) rows += p.rows();
      Matrix bank(rows, cfg.embed_dim);
      Eigen::Index r = 0;
      for (const auto& p : parts) {
        bank.middleRows(r, p.rows()) = p;
        r += p.rows();
      }
      gal.tokens[layer] = std::move(bank);
    }
    if (gal.entries.rows() == 0) {
      spdlog::warn("{} gallery is empty: no training sample has this modality present", kind_name(gal.kind));
    }
  }

  std::vector<RowVector> text_rows;
  for (const std::string& cls : g.classes) {
    const TextEmbeddingPair pair =
        build_semantic_duality(model.text(), model.vocab(), cls, model.templates(), model.config().text.n_ctx);
    text_rows.push_back(pair.normal);
    text_rows.push_back(pair.abnormal);
  }
  g.text.entries = stack_rows(text_rows, cfg.embed_dim);
  return g;
}

void save_galleries(const Galleries& g, const std::filesystem::path& dir) {
  nn::ParameterStore store;
  json meta{{"format", "misdd-galleries"}, {"classes", g.classes}};
  for (const Gallery* gal : {&g.rgb, &g.three_d, &g.text}) {
    const std::string base = std::string("gallery.") + kind_name(gal->kind);
    store.add(base + ".entries", gal->entries, false);
    for (const auto& [layer, bank] : gal->tokens) store.add(base + ".tokens.layer" + std::to_string(layer), bank, false);
    meta[kind_name(gal->kind)] = json{{"rows", gal->entries.rows()}, {"source_layers", gal->source_layers}};
  }
  nn::save_checkpoint(store, dir, meta.dump());
}

Galleries load_galleries(const std::filesystem::path& dir) {
  std::string meta_text;
  nn::ParameterStore store = nn::load_checkpoint(dir, &meta_text);
  const json meta = json::parse(meta_text);
  if (meta.value("format", "") != "misdd-galleries") throw std::runtime_error("not a gallery file: " + dir.string());
  Galleries g;
  g.classes = meta.at("classes").get<std::vector<std::string>>();
  g.rgb.kind = GalleryKind::kRgb;
  g.three_d.kind = GalleryKind::kThreeD;
  g.text.kind = GalleryKind::kText;
  for (Gallery* gal : {&g.rgb, &g.three_d, &g.text}) {
    const std::string base = std::string("gallery.") + kind_name(gal->kind);
    gal->entries = store.at(base + ".entries").value;
    gal->source_layers = meta.at(kind_name(gal->kind)).at("source_layers").get<std::vector<int>>();
    for (int layer : gal->source_layers) {
      gal->tokens[layer] = store.at(base + ".tokens.layer" + std::to_string(layer)).value;
    }
  }
  return g;
}

double image_score(const RowVector& f, const TextEmbeddingPair& text) {
  require_unit(f, "image feature");
  require_unit(text.normal, "normal text embedding");
  require_unit(text.abnormal, "abnormal text embedding");
  return two_way(f.dot(text.normal), f.dot(text.abnormal));
}

Eigen::VectorXd token_scores(const Matrix& tokens, const TextEmbeddingPair& text) {
  const Eigen::VectorXd sn = tokens * text.normal.transpose();
  const Eigen::VectorXd sa = tokens * text.abnormal.transpose();
  Eigen::VectorXd out(tokens.rows());
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) out(i) = two_way(sn(i), sa(i));
  return out;
}

ScoreMap upsample_bilinear(const Eigen::VectorXd& grid_values, int grid, int size) {
  if (grid_values.size() != static_cast<Eigen::Index>(grid) * grid) {
    throw std::invalid_argument("upsample_bilinear: value count does not match grid");
  }
  ScoreMap out(size, size);
  const double scale = static_cast<double>(grid) / size;
  auto coord = [&](int dst, int& i0, int& i1, double& w1) {
    const double src = std::clamp((dst + 0.5) * scale - 0.5, 0.0, static_cast<double>(grid - 1));
    i0 = static_cast<int>(std::floor(src));
    i1 = std::min(i0 + 1, grid - 1);
    w1 = src - i0;
  };
  for (int y = 0; y < size; ++y) {
    int y0, y1;
    double wy;
    coord(y, y0, y1, wy);
    for (int x = 0; x < size; ++x) {
      int x0, x1;
      double wx;
      coord(x, x0, x1, wx);
      const double top = (1 - wx) * grid_values(y0 * grid + x0) + wx * grid_values(y0 * grid + x1);
      const double bot = (1 - wx) * grid_values(y1 * grid + x0) + wx * grid_values(y1 * grid + x1);
      out.at(y, x) = (1 - wy) * top + wy * bot;
    }
  }
  return out;
}

ScoreMap pixel_map(const std::map<int, Matrix>& per_layer, const std::vector<int>& layers,
                   const TextEmbeddingPair& text, int grid, int image_size) {
  if (layers.empty()) throw std::invalid_argument("pixel_map: no feature layers");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid) * grid);
  for (int layer : layers) {
    const auto it = per_layer.find(layer);
    if (it == per_layer.end()) throw std::invalid_argument("pixel_map: missing features of layer " + std::to_string(layer));
    if (it->second.rows() != acc.size()) throw std::invalid_argument("pixel_map: token count does not match grid");
    acc += token_scores(it->second, text);
  }
  acc /= static_cast<double>(layers.size());
  return upsample_bilinear(acc, grid, image_size);
}

double harmonic(double a, double b) {
  if (!(a >= 0.0 && a <= 1.0 && b >= 0.0 && b <= 1.0)) {
    throw std::invalid_argument("harmonic: inputs must lie in [0, 1]");
  }
  if (a == 0.0 || b == 0.0) return 0.0;
  if (a == b) return a;
  return 2.0 * a * b / (a + b);
}

ScoreMap harmonic_fuse(double i_score, const ScoreMap& p_map) {
  ScoreMap out(p_map.height, p_map.width);
  for (std::size_t i = 0; i < p_map.values.size(); ++i) out.values[i] = harmonic(i_score, p_map.values[i]);
  return out;
}

Eigen::VectorXd memory_bank_scores(const Matrix& tokens, const Matrix& bank) {
  if (bank.rows() == 0) throw std::invalid_argument("memory bank is empty");
  const Matrix sims = tokens * bank.transpose();
  Eigen::VectorXd out(tokens.rows());
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) out(i) = std::clamp(1.0 - sims.row(i).maxCoeff(), 0.0, 1.0);
  return out;
}

ScoreMap memory_bank_map(const std::map<int, Matrix>& per_layer, const std::map<int, Matrix>& banks, int grid,
                         int image_size) {
  if (banks.empty()) throw std::invalid_argument("memory bank is empty");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid) * grid);
  for (const auto& [layer, bank] : banks) {
    const auto it = per_layer.find(layer);
    if (it == per_layer.end()) throw std::invalid_argument("memory bank layer " + std::to_string(layer) + " missing");
    acc += memory_bank_scores(it->second, bank);
  }
  acc /= static_cast<double>(banks.size());
  return upsample_bilinear(acc, grid, image_size);
}

ScorePair detect(const Model& model, const PairedSample& sample, const Galleries& galleries,
                 const ModalityIndicator& ind, const DetectOptions& options) {
  const EncoderConfig& cfg = model.config().encoder;
  if (sample.height() != cfg.image_size) {
    throw std::invalid_argument("sample image size " + std::to_string(sample.height()) +
                                " does not match the model's image_size " + std::to_string(cfg.image_size));
  }
  const TextEmbeddingPair text = galleries.text_pair(sample.class_name);
  const bool feature_level = options.level == MissingLevel::kFeature;
  const ModalityPair input =
      feature_level ? ModalityPair{sample.rgb, sample.depth} : apply_input_missing(sample, ind);

  std::array<VisualFeatures, 2> feats;
  for (Branch b : kBranches) {
    nn::Tape tape(false);
    const BranchPrompts bp = model.branch_prompts(b);
    const Image& img = b == Branch::kRgb ? input.rgb : input.depth;
    feats[static_cast<int>(b)] = detach(encode(tape, model.vision(b), img, model.has_prompts() ? &bp : nullptr));
  }
  if (feature_level) apply_feature_missing(feats[0], feats[1], ind);

  ScorePair out;
  for (Branch b : kBranches) {
    BranchScore& bs = b == Branch::kRgb ? out.rgb : out.three_d;
    const bool zeroed = feature_level && (b == Branch::kRgb ? !ind.rgb : !ind.three_d);
    if (zeroed) {
      bs.image = 0.0;
      bs.pixel = ScoreMap(cfg.image_size, cfg.image_size);
      bs.fused = ScoreMap(cfg.image_size, cfg.image_size);
      continue;
    }
    const VisualFeatures& f = feats[static_cast<int>(b)];
    bs.image = image_score(f.pooled, text);
    bs.pixel = pixel_map(f.per_layer, cfg.feature_layers, text, cfg.grid(), cfg.image_size);
    const Gallery& gal = galleries.visual(b);
    if (options.memory_bank && !gal.tokens.empty() && gal.entries.rows() > 0) {
      const ScoreMap mb = memory_bank_map(f.per_layer, gal.tokens, cfg.grid(), cfg.image_size);
      for (std::size_t i = 0; i < bs.pixel.values.size(); ++i) {
        bs.pixel.values[i] = std::max(bs.pixel.values[i], mb.values[i]);
      }
    }
    bs.fused = harmonic_fuse(bs.image, bs.pixel);
  }
  out.s_im = std::max(out.rgb.image, out.three_d.image);
  out.s_px = out.rgb.fused;
  for (std::size_t i = 0; i < out.s_px.values.size(); ++i) {
    out.s_px.values[i] = std::max(out.rgb.fused.values[i], out.three_d.fused.values[i]);
  }
  return out;
}

}  // namespace misdd
