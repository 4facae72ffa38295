#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "misdd/model_config.h"
#include "misdd/nn/layers.h"

namespace misdd {

/// Prompt vocabulary file contents: general templates (with "{}" standing for
/// the class name), abnormal states, and extra words admitted to the
/// vocabulary.
struct PromptTemplates {
  std::vector<std::string> templates = {"a photo of a {}"};
  std::vector<std::string> states = {"with crack", "with hole", "with contamination", "damaged"};
  std::vector<std::string> extra_words;

  static PromptTemplates load(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const PromptTemplates& t);
void from_json(const nlohmann::json& j, PromptTemplates& t);

class OutOfVocabularyError : public std::invalid_argument {
 public:
  explicit OutOfVocabularyError(const std::string& word)
      : std::invalid_argument("word '" + word + "' is not in the vocabulary"), word_(word) {}
  const std::string& word() const { return word_; }

 private:
  std::string word_;
};

/// Closed word vocabulary. Ids: words first, then BOS, EOS, then n_ctx
/// learnable suffix slots, then n_ctx fixed suffix slots.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> words, int n_ctx);

  // Built-in words plus every word of the templates, states and class names.
  static Vocabulary build(const PromptTemplates& templates, const std::vector<std::string>& class_names, int n_ctx);

  int id(std::string_view word) const;
  bool contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }
  int bos() const { return static_cast<int>(words_.size()); }
  int eos() const { return bos() + 1; }
  int embedded_count() const { return eos() + 1; }  // rows of the token table
  int learnable_id(int i) const { return embedded_count() + i; }
  int fixed_id(int i) const { return embedded_count() + n_ctx_ + i; }
  int size() const { return embedded_count() + 2 * n_ctx_; }
  int n_ctx() const { return n_ctx_; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
  int n_ctx_ = 0;
};

std::vector<std::string> split_words(std::string_view text);

enum class SuffixKind { kLearnable, kFixed };

struct TextPromptSpec {
  std::string general_text = "a photo of a {}";
  std::string class_name;
  std::optional<std::string> state;
  int n_ctx = 0;
  SuffixKind suffix = SuffixKind::kLearnable;

  static TextPromptSpec normal(std::string general_text, std::string class_name);
  static TextPromptSpec abnormal(std::string general_text, std::string class_name, std::string state, int n_ctx,
                                 SuffixKind suffix);
};

/// [BOS] template words with the class name substituted, state words, suffix
/// slots, [EOS].
std::vector<int> tokenize(const TextPromptSpec& spec, const Vocabulary& vocab);

/// Toy text transformer. Frozen parts live under "text/", the learnable
/// suffix embeddings under "suffix/".
struct TextEncoder {
  TextConfig config;
  int vocab_rows = 0;
  nn::Parameter* token_embedding = nullptr;   // vocab_rows x width
  nn::Parameter* learnable_suffix = nullptr;  // n_ctx x width, absent when n_ctx = 0
  nn::Parameter* fixed_suffix = nullptr;      // n_ctx x width
  nn::Parameter* pos = nullptr;               // max_len x width
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm ln_final;
  nn::Linear proj;  // width -> embed_dim

  static TextEncoder init(nn::ParameterStore& store, const TextConfig& config, const Vocabulary& vocab, int embed_dim,
                          Rng& rng);
  static TextEncoder bind(nn::ParameterStore& store, const TextConfig& config, const Vocabulary& vocab);
};

inline constexpr const char* kLearnableSuffixName = "suffix/ctx";

/// Embeds ids, runs the blocks, takes the EOS (last) state, projects and
/// normalizes. 1 x embed_dim.
nn::Var encode_text(nn::Tape& tape, const TextEncoder& enc, std::span<const int> ids);

struct TextEmbeddingPair {
  nn::RowVector normal;
  nn::RowVector abnormal;

  double cosine() const { return normal.dot(abnormal); }
  bool degenerate() const { return cosine() >= 1.0 - 1e-4; }
};

struct TextPairVars {
  nn::Var normal;
  nn::Var abnormal;

  TextEmbeddingPair values() const { return {normal.value(), abnormal.value()}; }
};

/// normal: normalized mean over templates of the normal prompt.
/// abnormal: normalized mean over templates x states x suffix variants; with
/// n_ctx > 0 both fixed and learnable suffixes are included.
TextPairVars semantic_duality(nn::Tape& tape, const TextEncoder& enc, const Vocabulary& vocab,
                              const std::string& class_name, const PromptTemplates& prompts, int n_ctx);

/// Detached version; logs a warning when the pair is degenerate.
TextEmbeddingPair build_semantic_duality(const TextEncoder& enc, const Vocabulary& vocab,
                                         const std::string& class_name, const PromptTemplates& prompts, int n_ctx);

}  // namespace misdd
