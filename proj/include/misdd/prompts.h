#pragma once

#include <array>
#include <optional>
#include <vector>

#include "misdd/model_config.h"
#include "misdd/nn/layers.h"

namespace misdd {

inline constexpr double kPromptInitStd = 0.02;

/// Learnable cross-modal prompts. CCP is one parameter shared by both
/// branches; MSP projections and MAP matrices are per branch. Disabled prompt
/// kinds have no parameters.
struct PromptBundle {
  PromptConfig config;
  int prompt_depth = 0;
  int width = 0;
  int heads = 1;
  nn::Parameter* ccp = nullptr;                        // l_ccp x d
  std::array<std::optional<nn::Linear>, 2> msp;        // per branch, d -> d
  std::array<std::vector<nn::Parameter*>, 2> map;      // per branch, prompt_depth x (l_map x d)

  static PromptBundle init(nn::ParameterStore& store, const PromptConfig& config, int prompt_depth, int width,
                           int heads, Rng& rng);
  static PromptBundle bind(nn::ParameterStore& store, const PromptConfig& config, int prompt_depth, int width,
                           int heads);

  const std::optional<nn::Linear>& msp_for(Branch b) const { return msp[static_cast<int>(b)]; }
  const std::vector<nn::Parameter*>& map_for(Branch b) const { return map[static_cast<int>(b)]; }
};

std::string msp_name(Branch b);
std::string map_name(Branch b, int layer);

/// Modality-specific prompt: consistent self-attention over W x (all heads
/// sharing the single projection), then mean-pooled over `l_msp` contiguous,
/// near-equal row groups.
nn::Var generate_msp(nn::Tape& tape, nn::Var x, const nn::Linear& w, int heads, int l_msp);

/// Pooling matrix (l x n) averaging contiguous row groups of near-equal size.
nn::Matrix stride_pool_matrix(int l, Eigen::Index n);

/// First prompt.rows() rows of consistent attention over the residual-stream
/// stack [prompt; tokens] with identity head weights. `tokens` may have zero
/// rows.
nn::Var refine_prompt(nn::Var prompt, nn::Var tokens, int heads);

struct InjectedPrompts {
  nn::Var ccp;  // invalid when absent
  nn::Var msp;
  nn::Var map;
};

struct InjectResult {
  nn::Var extended;  // [ccp'; msp'; map'; tokens]
  nn::Var map_out;   // refined MAP, input to the next layer's cascade
  Eigen::Index prompt_rows = 0;
};

/// Refines each present prompt against the layer's tokens, then prepends them.
InjectResult inject(nn::Var tokens, const InjectedPrompts& prompts, int heads);

}  // namespace misdd
