#pragma once

#include <memory>
#include <string>
#include <vector>

#include "misdd/model.h"

namespace misdd {

/// Text pairs of a set of classes, encoded once on a private tape and exposed
/// to per-sample tapes as a shared leaf. Gradients collected on the leaf are
/// pushed through the text encoder by backward().
class TextBatch {
 public:
  TextBatch(const Model& model, const std::vector<std::string>& classes, bool requires_grad);

  // 2 x d rows (normal, abnormal) of `class_name` on `tape`.
  nn::Var pair(nn::Tape& tape, const std::string& class_name);
  // 2C x d: all normal rows, then all abnormal rows, in class order.
  nn::Var stacked(nn::Tape& tape);
  TextEmbeddingPair values(const std::string& class_name) const;
  const std::vector<std::string>& classes() const { return classes_; }

  void backward();

 private:
  std::size_t index_of(const std::string& class_name) const;

  std::vector<std::string> classes_;
  std::unique_ptr<nn::Tape> tape_;
  nn::Var rows_;  // (n0, a0, n1, a1, ...)
  nn::Parameter leaf_;
};

}  // namespace misdd
