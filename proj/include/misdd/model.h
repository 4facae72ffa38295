#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "misdd/model_config.h"
#include "misdd/prompts.h"
#include "misdd/text_branch.h"
#include "misdd/vision_encoder.h"

namespace misdd {

/// Parameter store plus bound views of both vision branches, the text encoder
/// and the prompts. Copies rebind their views to the copied store.
class Model {
 public:
  Model() = default;
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  // Backbone only: both vision branches and the text encoder, no prompts.
  static Model create(const ModelConfig& config, const PromptTemplates& templates,
                      const std::vector<std::string>& class_names, std::uint64_t seed);

  // Adds freshly initialized prompts (any existing prompt parameters must be absent).
  void add_prompts(const PromptConfig& prompts, int prompt_depth, std::uint64_t seed);
  bool has_prompts() const { return has_prompts_; }

  // Encoders and text transformer frozen; prompts and the learnable suffix trainable.
  void freeze_backbone();

  const ModelConfig& config() const { return config_; }
  const PromptTemplates& templates() const { return templates_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  const VisionEncoder& vision(Branch b) const { return vision_[static_cast<int>(b)]; }
  const TextEncoder& text() const { return text_; }
  const PromptBundle& prompts() const { return prompts_; }
  BranchPrompts branch_prompts(Branch b) const { return BranchPrompts::from(prompts_, b); }

  nlohmann::json metadata() const;

  // Names of the learnable parameter groups.
  static bool is_prompt_parameter(const std::string& name);

  friend void save_model(const Model& model, const std::filesystem::path& dir, const nlohmann::json& extra);
  friend Model load_model(const std::filesystem::path& dir, nlohmann::json* extra);

 private:
  void rebind();

  ModelConfig config_;
  PromptTemplates templates_;
  Vocabulary vocab_;
  std::vector<std::string> class_names_;
  nn::ParameterStore store_;
  bool has_prompts_ = false;
  std::array<VisionEncoder, 2> vision_;
  TextEncoder text_;
  PromptBundle prompts_;
};

void save_model(const Model& model, const std::filesystem::path& dir, const nlohmann::json& extra = nlohmann::json::object());
Model load_model(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);

}  // namespace misdd
