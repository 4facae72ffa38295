#pragma once

#include <map>
#include <string>
#include <vector>

#include "misdd/data_synth.h"
#include "misdd/missing_config.h"
#include "misdd/model_config.h"
#include "misdd/nn/layers.h"
#include "misdd/prompts.h"

namespace misdd {

/// One branch's patch-embedding transformer. Parameter names live under
/// "vision.rgb" or "vision.3d".
struct VisionEncoder {
  EncoderConfig config;
  std::string prefix;
  nn::Linear patch;        // patch_dim -> width
  nn::Parameter* cls = nullptr;  // 1 x width
  nn::Parameter* pos = nullptr;  // (1 + n_patches) x width
  nn::LayerNorm ln_pre;
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm ln_post;
  nn::Linear proj;         // width -> embed_dim

  static VisionEncoder init(nn::ParameterStore& store, const std::string& prefix, const EncoderConfig& config,
                            Rng& rng);
  static VisionEncoder bind(nn::ParameterStore& store, const std::string& prefix, const EncoderConfig& config);
};

std::string vision_prefix(Branch b);

/// Flattens non-overlapping patches in raster order into rows of length
/// patch*patch*3. Single-channel (depth) images are replicated to three
/// channels after centering on their mean and scaling by kDepthGain, so relief
/// survives the per-token normalization. An all-zero image stays all-zero.
inline constexpr double kDepthGain = 5.0;
nn::Matrix patchify(const Image& image, int patch_size);

/// [cls; patches W + b] + pos, shape (1 + n_patches) x width.
nn::Var patch_embed(nn::Tape& tape, const VisionEncoder& enc, const Image& image);

/// Embeds precomputed patch rows; rows flagged in `masked` are replaced by
/// `mask_token` (used by masked-patch warmup).
nn::Var embed_patches(nn::Tape& tape, const VisionEncoder& enc, const nn::Matrix& patches,
                      const std::vector<bool>* masked = nullptr, nn::Parameter* mask_token = nullptr);

/// Prompt tensors one branch sees during a forward pass.
struct BranchPrompts {
  nn::Parameter* ccp = nullptr;
  const nn::Linear* msp = nullptr;
  std::vector<nn::Parameter*> map;  // one per injected layer
  int l_msp = 0;

  static BranchPrompts from(const PromptBundle& bundle, Branch b);
  bool any() const { return ccp != nullptr || msp != nullptr || !map.empty(); }
};

struct EncodeOptions {
  bool export_tokens = true;
  // Returns the final patch tokens in the residual width (pre ln_post).
  bool keep_final_tokens = false;
};

/// Tape-level encoder output. Feature tokens exclude the class token and all
/// prompt rows.
struct EncodedBranch {
  nn::Var pooled;                        // 1 x embed_dim, unit norm
  std::map<int, nn::Var> per_layer;      // layer -> n_patches x embed_dim, unit rows
  nn::Var final_tokens;                  // n_patches x width when requested
  std::vector<Eigen::Index> sequence_lengths;  // per layer, as seen by the block
  int refined_maps = 0;
};

EncodedBranch encode(nn::Tape& tape, const VisionEncoder& enc, nn::Var embedded, const BranchPrompts* prompts,
                     const EncodeOptions& options = {});
EncodedBranch encode(nn::Tape& tape, const VisionEncoder& enc, const Image& image, const BranchPrompts* prompts,
                     const EncodeOptions& options = {});

/// Detached per-branch features.
struct VisualFeatures {
  std::map<int, nn::Matrix> per_layer;
  nn::RowVector pooled;
};

VisualFeatures detach(const EncodedBranch& e);

/// Feature-level missing: zeroes every feature of an absent branch.
void apply_feature_missing(VisualFeatures& rgb, VisualFeatures& three_d, const ModalityIndicator& ind);

}  // namespace misdd
