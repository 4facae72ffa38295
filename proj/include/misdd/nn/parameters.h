#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "misdd/nn/tape.h"
#include "misdd/rng.h"

namespace misdd::nn {

/// Owns named parameters with stable addresses, in insertion order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Matrix value, bool trainable = true);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::size_t size() const { return params_.size(); }
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();
  std::vector<Parameter*> with_prefix(std::string_view prefix);
  std::vector<const Parameter*> with_prefix(std::string_view prefix) const;

  void set_trainable(std::string_view prefix, bool trainable);
  void zero_grad();
  std::size_t count(std::string_view prefix = {}) const;

  // Copies values of every parameter also present in `other` (same shape).
  void copy_values_from(const ParameterStore& other, std::string_view prefix = {});

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Initializers.
Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);
// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer default.
Matrix linear_init(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng);

/// Checkpoint container: `manifest.json` (names, shapes, dtype, trainable flags,
/// byte offsets, plus a free-form metadata object) and `tensors.bin`, a
/// concatenation of raw tensor records. The directory is written under a
/// temporary name and renamed into place.
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& dir,
                     const std::string& metadata_json = "{}");
ParameterStore load_checkpoint(const std::filesystem::path& dir, std::string* metadata_json = nullptr);

/// Largest relative disagreement between analytic and central-difference
/// gradients over all trainable entries, |a - n| / max(|a|, |n|, 1e-8).
/// Above `max_entries` trainable entries a seeded subsample is checked.
struct GradCheckOptions {
  double epsilon = 1e-6;
  std::size_t max_entries = 10000;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_entry;
};

// `loss_fn` builds the loss on the given tape from the store's current values.
using LossBuilder = std::function<Var(Tape&)>;
GradCheckResult finite_difference_check(const LossBuilder& loss_fn, ParameterStore& store,
                                        const GradCheckOptions& options = {});

class NondeterministicLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SGD with momentum and L2 weight decay (decay added to the gradient).
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const std::vector<Parameter*>& params, double lr, double grad_scale = 1.0);

 private:
  double momentum_;
  double weight_decay_;
  std::map<const Parameter*, Matrix> velocity_;
};

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(const std::vector<Parameter*>& params, double lr, double grad_scale = 1.0);

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::map<const Parameter*, std::pair<Matrix, Matrix>> moments_;
};

}  // namespace misdd::nn
