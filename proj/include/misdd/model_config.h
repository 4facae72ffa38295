#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace misdd {

enum class Branch { kRgb, kThreeD };
inline constexpr Branch kBranches[] = {Branch::kRgb, Branch::kThreeD};
inline const char* branch_tag(Branch b) { return b == Branch::kRgb ? "rgb" : "3d"; }

struct EncoderConfig {
  int image_size = 64;
  int patch_size = 8;
  int depth = 8;
  int width = 64;
  int heads = 4;
  int mlp_hidden = 128;
  int embed_dim = 64;
  // Layers 0..prompt_depth-1 are injection sites.
  int prompt_depth = 6;
  // 1-based layer indices whose patch tokens are exported.
  std::vector<int> feature_layers = {2, 4, 6, 8};

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  void validate() const;
};

struct PromptConfig {
  int l_ccp = 8;
  int l_msp = 8;
  int l_map = 8;
  bool use_ccp = true;
  bool use_msp = true;
  bool use_map = true;

  int ccp_len() const { return use_ccp ? l_ccp : 0; }
  int msp_len() const { return use_msp ? l_msp : 0; }
  int map_len() const { return use_map ? l_map : 0; }
  int total_len() const { return ccp_len() + msp_len() + map_len(); }
  bool any() const { return total_len() > 0; }
};

struct TextConfig {
  int width = 64;
  int layers = 2;
  int heads = 4;
  int mlp_hidden = 128;
  int n_ctx = 4;
  int max_len = 24;
};

struct ModelConfig {
  EncoderConfig encoder;
  PromptConfig prompts;
  TextConfig text;

  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const PromptConfig& c);
void from_json(const nlohmann::json& j, PromptConfig& c);
void to_json(nlohmann::json& j, const TextConfig& c);
void from_json(const nlohmann::json& j, TextConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace misdd
