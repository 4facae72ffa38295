#include "misdd/vision_encoder.h"

#include <algorithm>
#include <array>
#include <stdexcept>

namespace misdd {

using nn::Matrix;
using nn::Var;

std::string vision_prefix(Branch b) { return std::string("vision.") + branch_tag(b); }

VisionEncoder VisionEncoder::init(nn::ParameterStore& store, const std::string& prefix, const EncoderConfig& config,
                                  Rng& rng) {
  config.validate();
  nn::Linear::init(store, prefix + ".patch", config.patch_dim(), config.width, rng);
  store.add(prefix + ".cls", nn::normal_matrix(1, config.width, 0.02, rng));
  store.add(prefix + ".pos", nn::normal_matrix(1 + config.num_patches(), config.width, 0.02, rng));
  nn::LayerNorm::init(store, prefix + ".ln_pre", config.width);
  for (int j = 0; j < config.depth; ++j) {
    nn::TransformerBlock::init(store, prefix + ".block" + std::to_string(j), config.width, config.heads,
                               config.mlp_hidden, rng);
  }
  nn::LayerNorm::init(store, prefix + ".ln_post", config.width);
  nn::Linear::init(store, prefix + ".proj", config.width, config.embed_dim, rng);
  return bind(store, prefix, config);
}

VisionEncoder VisionEncoder::bind(nn::ParameterStore& store, const std::string& prefix, const EncoderConfig& config) {
  config.validate();
  VisionEncoder e;
  e.config = config;
  e.prefix = prefix;
  e.patch = nn::Linear::bind(store, prefix + ".patch");
  e.cls = &store.at(prefix + ".cls");
  e.pos = &store.at(prefix + ".pos");
  e.ln_pre = nn::LayerNorm::bind(store, prefix + ".ln_pre");
  for (int j = 0; j < config.depth; ++j) {
    e.blocks.push_back(nn::TransformerBlock::bind(store, prefix + ".block" + std::to_string(j), config.heads));
  }
  e.ln_post = nn::LayerNorm::bind(store, prefix + ".ln_post");
  e.proj = nn::Linear::bind(store, prefix + ".proj");
  if (e.patch.weight->value.rows() != config.patch_dim() || e.pos->value.rows() != 1 + config.num_patches() ||
      e.pos->value.cols() != config.width) {
    throw std::invalid_argument("encoder parameters under '" + prefix + "' do not match the encoder config");
  }
  return e;
}

Matrix patchify(const Image& image, int patch_size) {
  if (patch_size < 1 || image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw std::invalid_argument("patchify: image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " not divisible by patch " + std::to_string(patch_size));
  }
  if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("patchify: expected 1 or 3 channels");
  const int gh = image.height / patch_size;
  const int gw = image.width / patch_size;
  double offset = 0.0, gain = 1.0;
  if (image.channels == 1) {
    double sum = 0.0;
    for (float v : image.pixels) sum += v;
    offset = sum / static_cast<double>(image.pixels.size());
    gain = kDepthGain;
  }
  Matrix out(gh * gw, patch_size * patch_size * 3);
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      const Eigen::Index row = py * gw + px;
      Eigen::Index col = 0;
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          for (int c = 0; c < 3; ++c) {
            const int src_c = image.channels == 1 ? 0 : c;
            out(row, col++) = gain * (image.at(py * patch_size + y, px * patch_size + x, src_c) - offset);
          }
        }
      }
    }
  }
  return out;
}

Var embed_patches(nn::Tape& tape, const VisionEncoder& enc, const Matrix& patches, const std::vector<bool>* masked,
                  nn::Parameter* mask_token) {
  if (patches.rows() != enc.config.num_patches() || patches.cols() != enc.config.patch_dim()) {
    throw std::invalid_argument("embed_patches: patch matrix does not match the encoder config");
  }
  Var tokens = enc.patch(tape, tape.constant(patches));
  if (masked != nullptr && mask_token != nullptr) {
    Matrix keep(patches.rows(), 1);
    for (Eigen::Index i = 0; i < patches.rows(); ++i) keep(i, 0) = (*masked)[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
    Matrix keep_full = keep.replicate(1, enc.config.width);
    Matrix drop_full = Matrix::Ones(patches.rows(), enc.config.width) - keep_full;
    Var m = tape.param(*mask_token);
    Var ones = tape.constant(Matrix::Ones(patches.rows(), 1));
    tokens = nn::add(nn::mul(tokens, tape.constant(keep_full)), nn::mul(nn::matmul(ones, m), tape.constant(drop_full)));
  }
  const std::array<Var, 2> parts{tape.param(*enc.cls), tokens};
  return nn::add(nn::concat_rows(parts), tape.param(*enc.pos));
}

Var patch_embed(nn::Tape& tape, const VisionEncoder& enc, const Image& image) {
  if (image.height != enc.config.image_size || image.width != enc.config.image_size) {
    throw std::invalid_argument("image size " + std::to_string(image.height) + " does not match encoder image_size " +
                                std::to_string(enc.config.image_size));
  }
  return embed_patches(tape, enc, patchify(image, enc.config.patch_size));
}

BranchPrompts BranchPrompts::from(const PromptBundle& bundle, Branch b) {
  BranchPrompts p;
  p.ccp = bundle.ccp;
  const auto& msp = bundle.msp_for(b);
  if (msp) {
    p.msp = &*msp;
    p.l_msp = bundle.config.l_msp;
  }
  p.map = bundle.map_for(b);
  return p;
}

namespace {

Var project_features(nn::Tape& tape, const VisionEncoder& enc, Var rows) {
  return nn::l2_normalize_rows(enc.proj(tape, enc.ln_post(tape, rows)));
}

}  // namespace

EncodedBranch encode(nn::Tape& tape, const VisionEncoder& enc, Var embedded, const BranchPrompts* prompts,
                     const EncodeOptions& options) {
  const EncoderConfig& cfg = enc.config;
  const Eigen::Index n = embedded.rows();
  if (n != 1 + cfg.num_patches()) throw std::invalid_argument("encode: unexpected token count");
  const bool prompted = prompts != nullptr && prompts->any();
  if (prompted && !prompts->map.empty() && static_cast<int>(prompts->map.size()) != cfg.prompt_depth) {
    throw std::invalid_argument("encode: MAP count " + std::to_string(prompts->map.size()) +
                                " does not match prompt_depth " + std::to_string(cfg.prompt_depth));
  }
  if (prompted && prompts->ccp != nullptr && prompts->ccp->value.cols() != cfg.width) {
    throw std::invalid_argument("encode: prompt width does not match encoder width");
  }

  EncodedBranch out;
  Var x = enc.ln_pre(tape, embedded);
  Var msp;
  if (prompted && prompts->msp != nullptr) msp = generate_msp(tape, x, *prompts->msp, cfg.heads, prompts->l_msp);
  Var map_prev;
  for (int j = 0; j < cfg.depth; ++j) {
    const nn::TransformerBlock& block = enc.blocks[static_cast<std::size_t>(j)];
    if (prompted && j < cfg.prompt_depth) {
      InjectedPrompts ip;
      if (prompts->ccp != nullptr) ip.ccp = tape.param(*prompts->ccp);
      ip.msp = msp;
      if (!prompts->map.empty()) {
        Var p3 = tape.param(*prompts->map[static_cast<std::size_t>(j)]);
        ip.map = map_prev.valid() ? nn::add(p3, map_prev) : p3;
      }
      InjectResult r = inject(x, ip, cfg.heads);
      out.sequence_lengths.push_back(r.extended.rows());
      x = nn::slice_rows(block(tape, r.extended), r.prompt_rows, n);
      if (r.map_out.valid()) {
        map_prev = r.map_out;
        ++out.refined_maps;
      }
    } else if (j + 1 == cfg.depth && !options.export_tokens && !options.keep_final_tokens) {
      // Only the class token is read past the last block.
      out.sequence_lengths.push_back(n);
      x = block(tape, x, 1);
    } else {
      out.sequence_lengths.push_back(n);
      x = block(tape, x);
    }
    const int layer = j + 1;
    if (options.export_tokens &&
        std::find(cfg.feature_layers.begin(), cfg.feature_layers.end(), layer) != cfg.feature_layers.end()) {
      out.per_layer[layer] = project_features(tape, enc, nn::slice_rows(x, 1, n - 1));
    }
  }
  out.pooled = project_features(tape, enc, nn::slice_rows(x, 0, 1));
  if (options.keep_final_tokens) out.final_tokens = nn::slice_rows(x, 1, n - 1);
  return out;
}

EncodedBranch encode(nn::Tape& tape, const VisionEncoder& enc, const Image& image, const BranchPrompts* prompts,
                     const EncodeOptions& options) {
  return encode(tape, enc, patch_embed(tape, enc, image), prompts, options);
}

VisualFeatures detach(const EncodedBranch& e) {
  VisualFeatures f;
  f.pooled = e.pooled.value();
  for (const auto& [layer, v] : e.per_layer) f.per_layer[layer] = v.value();
  return f;
}

void apply_feature_missing(VisualFeatures& rgb, VisualFeatures& three_d, const ModalityIndicator& ind) {
  auto zero = [](VisualFeatures& f) {
    f.pooled.setZero();
    for (auto& [layer, m] : f.per_layer) m.setZero();
  };
  if (!ind.rgb) zero(rgb);
  if (!ind.three_d) zero(three_d);
}

}  // namespace misdd
