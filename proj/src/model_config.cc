#include "misdd/model_config.h"

#include <stdexcept>

namespace misdd {

using nlohmann::json;

void EncoderConfig::validate() const {
  if (patch_size < 1 || image_size % patch_size != 0) {
    throw std::invalid_argument("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                                std::to_string(patch_size));
  }
  if (depth < 1) throw std::invalid_argument("encoder depth must be >= 1");
  if (heads < 1 || width % heads != 0) throw std::invalid_argument("encoder width not divisible by heads");
  if (prompt_depth < 0 || prompt_depth > depth) throw std::invalid_argument("prompt_depth must lie in [0, depth]");
  for (int l : feature_layers) {
    if (l < 1 || l > depth) throw std::invalid_argument("feature layer " + std::to_string(l) + " outside [1, depth]");
  }
  if (feature_layers.empty()) throw std::invalid_argument("at least one feature layer required");
}

void ModelConfig::validate() const {
  encoder.validate();
  if (prompts.l_ccp < 0 || prompts.l_msp < 0 || prompts.l_map < 0) {
    throw std::invalid_argument("prompt lengths must be nonnegative");
  }
  if (text.heads < 1 || text.width % text.heads != 0) throw std::invalid_argument("text width not divisible by heads");
  if (text.n_ctx < 0) throw std::invalid_argument("n_ctx must be nonnegative");
}

void to_json(json& j, const EncoderConfig& c) {
  j = json{{"image_size", c.image_size}, {"patch_size", c.patch_size},     {"depth", c.depth},
           {"width", c.width},           {"heads", c.heads},               {"mlp_hidden", c.mlp_hidden},
           {"embed_dim", c.embed_dim},   {"prompt_depth", c.prompt_depth}, {"feature_layers", c.feature_layers}};
}

void from_json(const json& j, EncoderConfig& c) {
  c.image_size = j.at("image_size");
  c.patch_size = j.at("patch_size");
  c.depth = j.at("depth");
  c.width = j.at("width");
  c.heads = j.at("heads");
  c.mlp_hidden = j.at("mlp_hidden");
  c.embed_dim = j.at("embed_dim");
  c.prompt_depth = j.at("prompt_depth");
  c.feature_layers = j.at("feature_layers").get<std::vector<int>>();
}

void to_json(json& j, const PromptConfig& c) {
  j = json{{"l_ccp", c.l_ccp},     {"l_msp", c.l_msp},     {"l_map", c.l_map},
           {"use_ccp", c.use_ccp}, {"use_msp", c.use_msp}, {"use_map", c.use_map}};
}

void from_json(const json& j, PromptConfig& c) {
  c.l_ccp = j.at("l_ccp");
  c.l_msp = j.at("l_msp");
  c.l_map = j.at("l_map");
  c.use_ccp = j.at("use_ccp");
  c.use_msp = j.at("use_msp");
  c.use_map = j.at("use_map");
}

void to_json(json& j, const TextConfig& c) {
  j = json{{"width", c.width},           {"layers", c.layers}, {"heads", c.heads},
           {"mlp_hidden", c.mlp_hidden}, {"n_ctx", c.n_ctx},   {"max_len", c.max_len}};
}

void from_json(const json& j, TextConfig& c) {
  c.width = j.at("width");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.mlp_hidden = j.at("mlp_hidden");
  c.n_ctx = j.at("n_ctx");
  c.max_len = j.at("max_len");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"encoder", c.encoder}, {"prompts", c.prompts}, {"text", c.text}};
}

void from_json(const json& j, ModelConfig& c) {
  c.encoder = j.at("encoder").get<EncoderConfig>();
  c.prompts = j.at("prompts").get<PromptConfig>();
  c.text = j.at("text").get<TextConfig>();
}

}  // namespace misdd
