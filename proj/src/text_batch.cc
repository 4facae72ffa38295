#include "misdd/text_batch.h"

#include <algorithm>
#include <stdexcept>

namespace misdd {

using nn::Var;

TextBatch::TextBatch(const Model& model, const std::vector<std::string>& classes, bool requires_grad)
    : classes_(classes), tape_(std::make_unique<nn::Tape>(requires_grad)) {
  if (classes_.empty()) throw std::invalid_argument("TextBatch: no classes");
  std::vector<Var> rows;
  for (const std::string& cls : classes_) {
    TextPairVars p = semantic_duality(*tape_, model.text(), model.vocab(), cls, model.templates(),
                                      model.config().text.n_ctx);
    rows.push_back(p.normal);
    rows.push_back(p.abnormal);
  }
  rows_ = nn::concat_rows(rows);
  leaf_.name = "text_batch";
  leaf_.value = rows_.value();
  leaf_.trainable = requires_grad && rows_.requires_grad();
}

std::size_t TextBatch::index_of(const std::string& class_name) const {
  const auto it = std::find(classes_.begin(), classes_.end(), class_name);
  if (it == classes_.end()) throw std::invalid_argument("TextBatch: unknown class '" + class_name + "'");
  return static_cast<std::size_t>(it - classes_.begin());
}

Var TextBatch::pair(nn::Tape& tape, const std::string& class_name) {
  return nn::slice_rows(tape.param(leaf_), static_cast<Eigen::Index>(2 * index_of(class_name)), 2);
}

Var TextBatch::stacked(nn::Tape& tape) {
  std::vector<int> order;
  for (std::size_t i = 0; i < classes_.size(); ++i) order.push_back(static_cast<int>(2 * i));
  for (std::size_t i = 0; i < classes_.size(); ++i) order.push_back(static_cast<int>(2 * i + 1));
  return nn::gather_rows(tape.param(leaf_), order);
}

TextEmbeddingPair TextBatch::values(const std::string& class_name) const {
  const auto i = static_cast<Eigen::Index>(2 * index_of(class_name));
  return {leaf_.value.row(i), leaf_.value.row(i + 1)};
}

void TextBatch::backward() {
  if (!leaf_.trainable || leaf_.grad.size() == 0) return;
  tape_->backward(nn::sum_all(nn::mul(rows_, tape_->constant(leaf_.grad))));
  leaf_.grad.resize(0, 0);
}

}  // namespace misdd
