#include "misdd/text_branch.h"

#include <spdlog/spdlog.h>

#include <array>
#include <cctype>
#include <set>
#include <sstream>

#include "misdd/tensor_io.h"

namespace misdd {

using nlohmann::json;
using nn::Matrix;
using nn::Var;

namespace {

const std::vector<std::string>& builtin_words() {
  static const std::vector<std::string> words = {
      "a",        "an",      "the",      "photo",   "of",          "close",      "up",       "picture",
      "image",    "cropped", "surface",  "object",  "with",        "without",    "crack",    "hole",
      "contamination",       "damaged",  "scratch", "dent",        "bump",       "stain",    "flawless",
      "perfect",  "normal",  "good",     "defect",  "anomalous",   "broken",     "tile",     "fabric",
      "plate",    "foam",    "widget",   "cable",   "bagel",       "carrot",     "cookie",   "dowel",
      "peach",    "potato",  "rope",     "tire",    "metal",       "wood",       "plastic",  "rubber",
      "texture",  "part",    "industrial",          "product",     "unblemished", "small",   "large",
      "on",       "in",      "and",      "for",     "this",        "is",         "there",    "sample"};
  return words;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

void to_json(json& j, const PromptTemplates& t) {
  j = json{{"templates", t.templates}, {"states", t.states}, {"extra_words", t.extra_words}};
}

void from_json(const json& j, PromptTemplates& t) {
  t = PromptTemplates{};
  if (j.contains("templates")) t.templates = j.at("templates").get<std::vector<std::string>>();
  if (j.contains("states")) t.states = j.at("states").get<std::vector<std::string>>();
  if (j.contains("extra_words")) t.extra_words = j.at("extra_words").get<std::vector<std::string>>();
  if (t.templates.empty()) throw std::invalid_argument("prompt templates: 'templates' must be nonempty");
  if (t.states.empty()) throw std::invalid_argument("prompt templates: 'states' must be nonempty");
  for (const auto& tpl : t.templates) {
    if (tpl.find("{}") == std::string::npos) {
      throw std::invalid_argument("prompt template '" + tpl + "' has no '{}' class slot");
    }
  }
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& path) {
  try {
    return json::parse(read_text_file(path)).get<PromptTemplates>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("cannot parse prompt template file " + path.string() + ": " + e.what());
  }
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(lower(w));
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> words, int n_ctx) : words_(std::move(words)), n_ctx_(n_ctx) {
  if (n_ctx < 0) throw std::invalid_argument("n_ctx must be nonnegative");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(const PromptTemplates& templates, const std::vector<std::string>& class_names,
                             int n_ctx) {
  std::vector<std::string> words = builtin_words();
  std::set<std::string> seen(words.begin(), words.end());
  auto admit = [&](std::string_view text) {
    for (auto& w : split_words(text)) {
      if (w == "{}") continue;
      if (seen.insert(w).second) words.push_back(w);
    }
  };
  for (const auto& t : templates.templates) admit(t);
  for (const auto& s : templates.states) admit(s);
  for (const auto& w : templates.extra_words) admit(w);
  for (const auto& c : class_names) admit(c);
  return Vocabulary(std::move(words), n_ctx);
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(lower(word));
  if (it == index_.end()) throw OutOfVocabularyError(std::string(word));
  return it->second;
}

TextPromptSpec TextPromptSpec::normal(std::string general_text, std::string class_name) {
  TextPromptSpec s;
  s.general_text = std::move(general_text);
  s.class_name = std::move(class_name);
  return s;
}

TextPromptSpec TextPromptSpec::abnormal(std::string general_text, std::string class_name, std::string state,
                                        int n_ctx, SuffixKind suffix) {
  TextPromptSpec s;
  s.general_text = std::move(general_text);
  s.class_name = std::move(class_name);
  s.state = std::move(state);
  s.n_ctx = n_ctx;
  s.suffix = suffix;
  return s;
}

std::vector<int> tokenize(const TextPromptSpec& spec, const Vocabulary& vocab) {
  if (spec.n_ctx < 0 || spec.n_ctx > vocab.n_ctx()) {
    throw std::invalid_argument("n_ctx " + std::to_string(spec.n_ctx) + " exceeds the vocabulary's " +
                                std::to_string(vocab.n_ctx()) + " suffix slots");
  }
  std::string text = spec.general_text;
  const auto slot = text.find("{}");
  if (slot == std::string::npos) throw std::invalid_argument("template '" + text + "' has no '{}' class slot");
  text.replace(slot, 2, spec.class_name);
  if (spec.state) text += " " + *spec.state;
  std::vector<int> ids{vocab.bos()};
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  for (int i = 0; i < spec.n_ctx; ++i) {
    ids.push_back(spec.suffix == SuffixKind::kLearnable ? vocab.learnable_id(i) : vocab.fixed_id(i));
  }
  ids.push_back(vocab.eos());
  return ids;
}

TextEncoder TextEncoder::init(nn::ParameterStore& store, const TextConfig& config, const Vocabulary& vocab,
                              int embed_dim, Rng& rng) {
  store.add("text/token_embedding", nn::normal_matrix(vocab.embedded_count(), config.width, 0.02, rng));
  store.add("text/pos", nn::normal_matrix(config.max_len, config.width, 0.01, rng));
  if (vocab.n_ctx() > 0) {
    store.add("text/fixed_suffix", nn::normal_matrix(vocab.n_ctx(), config.width, 0.02, rng));
    store.add(kLearnableSuffixName, nn::normal_matrix(vocab.n_ctx(), config.width, 0.02, rng));
  }
  for (int j = 0; j < config.layers; ++j) {
    nn::TransformerBlock::init(store, "text/block" + std::to_string(j), config.width, config.heads,
                               config.mlp_hidden, rng);
  }
  nn::LayerNorm::init(store, "text/ln_final", config.width);
  nn::Linear::init(store, "text/proj", config.width, embed_dim, rng);
  return bind(store, config, vocab);
}

TextEncoder TextEncoder::bind(nn::ParameterStore& store, const TextConfig& config, const Vocabulary& vocab) {
  TextEncoder e;
  e.config = config;
  e.vocab_rows = vocab.embedded_count();
  e.token_embedding = &store.at("text/token_embedding");
  if (e.token_embedding->value.rows() != vocab.embedded_count()) {
    throw std::invalid_argument("text token table does not match the vocabulary size");
  }
  e.pos = &store.at("text/pos");
  if (vocab.n_ctx() > 0) {
    e.fixed_suffix = &store.at("text/fixed_suffix");
    e.learnable_suffix = &store.at(kLearnableSuffixName);
    if (e.learnable_suffix->value.rows() != vocab.n_ctx()) {
      throw std::invalid_argument("suffix table does not match the vocabulary's n_ctx");
    }
  }
  for (int j = 0; j < config.layers; ++j) {
    e.blocks.push_back(nn::TransformerBlock::bind(store, "text/block" + std::to_string(j), config.heads));
  }
  e.ln_final = nn::LayerNorm::bind(store, "text/ln_final");
  e.proj = nn::Linear::bind(store, "text/proj");
  return e;
}

Var encode_text(nn::Tape& tape, const TextEncoder& enc, std::span<const int> ids) {
  if (ids.empty()) throw std::invalid_argument("encode_text: empty token sequence");
  if (static_cast<int>(ids.size()) > enc.config.max_len) {
    throw std::invalid_argument("encode_text: sequence of " + std::to_string(ids.size()) +
                                " tokens exceeds max_len " + std::to_string(enc.config.max_len));
  }
  const int n_ctx = enc.learnable_suffix != nullptr ? static_cast<int>(enc.learnable_suffix->value.rows()) : 0;
  const int total = enc.vocab_rows + 2 * n_ctx;
  std::vector<Var> tables{tape.param(*enc.token_embedding)};
  if (n_ctx > 0) {
    tables.push_back(tape.param(*enc.learnable_suffix));
    tables.push_back(tape.param(*enc.fixed_suffix));
  }
  for (int id : ids) {
    if (id < 0 || id >= total) throw std::invalid_argument("encode_text: token id " + std::to_string(id) + " invalid");
  }
  Var table = tables.size() == 1 ? tables[0] : nn::concat_rows(tables);
  Var x = nn::gather_rows(table, ids);
  x = nn::add(x, nn::slice_rows(tape.param(*enc.pos), 0, static_cast<Eigen::Index>(ids.size())));
  for (const auto& block : enc.blocks) x = block(tape, x);
  Var eos = nn::slice_rows(x, x.rows() - 1, 1);
  return nn::l2_normalize_rows(enc.proj(tape, enc.ln_final(tape, eos)));
}

TextPairVars semantic_duality(nn::Tape& tape, const TextEncoder& enc, const Vocabulary& vocab,
                              const std::string& class_name, const PromptTemplates& prompts, int n_ctx) {
  if (prompts.states.empty()) throw std::invalid_argument("semantic duality needs a nonempty state list");
  if (prompts.templates.empty()) throw std::invalid_argument("semantic duality needs at least one template");
  std::vector<Var> normals;
  std::vector<Var> abnormals;
  for (const auto& tpl : prompts.templates) {
    const auto n_ids = tokenize(TextPromptSpec::normal(tpl, class_name), vocab);
    normals.push_back(encode_text(tape, enc, n_ids));
    for (const auto& state : prompts.states) {
      for (SuffixKind kind : {SuffixKind::kFixed, SuffixKind::kLearnable}) {
        if (n_ctx == 0 && kind == SuffixKind::kLearnable) continue;
        const auto ids = tokenize(TextPromptSpec::abnormal(tpl, class_name, state, n_ctx, kind), vocab);
        abnormals.push_back(encode_text(tape, enc, ids));
      }
    }
  }
  auto mean_unit = [](const std::vector<Var>& rows) {
    Var m = rows.size() == 1 ? rows[0] : nn::mean_rows(nn::concat_rows(rows));
    return nn::l2_normalize_rows(m);
  };
  return {mean_unit(normals), mean_unit(abnormals)};
}

TextEmbeddingPair build_semantic_duality(const TextEncoder& enc, const Vocabulary& vocab,
                                         const std::string& class_name, const PromptTemplates& prompts, int n_ctx) {
  nn::Tape tape(false);
  TextEmbeddingPair pair = semantic_duality(tape, enc, vocab, class_name, prompts, n_ctx).values();
  if (pair.degenerate()) {
    spdlog::warn("text embeddings for class '{}' are degenerate: cosine(normal, abnormal) = {:.6f}", class_name,
                 pair.cosine());
  }
  return pair;
}

}  // namespace misdd
