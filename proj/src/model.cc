#include "misdd/model.h"

#include <stdexcept>

namespace misdd {

using nlohmann::json;

Model::Model(const Model& other) { *this = other; }

Model& Model::operator=(const Model& other) {
  if (this == &other) return *this;
  config_ = other.config_;
  templates_ = other.templates_;
  vocab_ = other.vocab_;
  class_names_ = other.class_names_;
  store_ = other.store_;
  has_prompts_ = other.has_prompts_;
  rebind();
  return *this;
}

Model Model::create(const ModelConfig& config, const PromptTemplates& templates,
                    const std::vector<std::string>& class_names, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.templates_ = templates;
  m.class_names_ = class_names;
  m.vocab_ = Vocabulary::build(templates, class_names, config.text.n_ctx);
  for (Branch b : kBranches) {
    Rng rng(derive_seed(seed, hash_string(vision_prefix(b))));
    VisionEncoder::init(m.store_, vision_prefix(b), config.encoder, rng);
  }
  Rng text_rng(derive_seed(seed, hash_string("text")));
  TextEncoder::init(m.store_, config.text, m.vocab_, config.encoder.embed_dim, text_rng);
  m.rebind();
  return m;
}

void Model::add_prompts(const PromptConfig& prompts, int prompt_depth, std::uint64_t seed) {
  if (has_prompts_) throw std::logic_error("model already has prompts");
  config_.prompts = prompts;
  config_.encoder.prompt_depth = prompt_depth;
  config_.validate();
  Rng rng(derive_seed(seed, hash_string("prompts")));
  PromptBundle::init(store_, prompts, prompt_depth, config_.encoder.width, config_.encoder.heads, rng);
  has_prompts_ = true;
  rebind();
}

bool Model::is_prompt_parameter(const std::string& name) {
  return name.starts_with("ccp/") || name.starts_with("msp/") || name.starts_with("map.") ||
         name.starts_with("suffix/");
}

void Model::freeze_backbone() {
  for (nn::Parameter* p : store_.all()) p->trainable = is_prompt_parameter(p->name);
}

void Model::rebind() {
  if (store_.size() == 0) return;
  for (Branch b : kBranches) {
    vision_[static_cast<int>(b)] = VisionEncoder::bind(store_, vision_prefix(b), config_.encoder);
  }
  text_ = TextEncoder::bind(store_, config_.text, vocab_);
  if (has_prompts_) {
    prompts_ = PromptBundle::bind(store_, config_.prompts, config_.encoder.prompt_depth, config_.encoder.width,
                                  config_.encoder.heads);
  } else {
    prompts_ = PromptBundle{};
  }
}

json Model::metadata() const {
  return json{{"config", config_},
              {"templates", templates_},
              {"vocabulary", vocab_.words()},
              {"class_names", class_names_},
              {"has_prompts", has_prompts_}};
}

void save_model(const Model& model, const std::filesystem::path& dir, const json& extra) {
  json meta = model.metadata();
  meta["extra"] = extra;
  nn::save_checkpoint(model.store_, dir, meta.dump());
}

Model load_model(const std::filesystem::path& dir, json* extra) {
  std::string meta_text;
  Model m;
  m.store_ = nn::load_checkpoint(dir, &meta_text);
  try {
    const json meta = json::parse(meta_text);
    m.config_ = meta.at("config").get<ModelConfig>();
    m.templates_ = meta.at("templates").get<PromptTemplates>();
    m.class_names_ = meta.at("class_names").get<std::vector<std::string>>();
    m.vocab_ = Vocabulary(meta.at("vocabulary").get<std::vector<std::string>>(), m.config_.text.n_ctx);
    m.has_prompts_ = meta.at("has_prompts").get<bool>();
    if (extra != nullptr) *extra = meta.value("extra", json::object());
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + dir.string() + " has malformed metadata: " + e.what());
  }
  m.rebind();
  return m;
}

}  // namespace misdd
