#include "misdd/nn/parameters.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "misdd/tensor_io.h"

namespace misdd::nn {

namespace fs = std::filesystem;
using nlohmann::json;

ParameterStore::ParameterStore(const ParameterStore& other) { *this = other; }

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this == &other) return *this;
  params_.clear();
  index_.clear();
  for (const auto& p : other.params_) {
    Parameter& q = add(p->name, p->value, p->trainable);
    q.grad = p->grad;
  }
  return *this;
}

Parameter& ParameterStore::add(std::string name, Matrix value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(value);
  p->trainable = trainable;
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

Parameter& ParameterStore::at(std::string_view name) {
  Parameter* p = find(name);
  if (p == nullptr) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return *p;
}

const Parameter& ParameterStore::at(std::string_view name) const {
  const Parameter* p = find(name);
  if (p == nullptr) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return *p;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p->trainable) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::with_prefix(std::string_view prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p->name.starts_with(prefix)) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::with_prefix(std::string_view prefix) const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_)
    if (p->name.starts_with(prefix)) out.push_back(p.get());
  return out;
}

void ParameterStore::set_trainable(std::string_view prefix, bool trainable) {
  for (auto* p : with_prefix(prefix)) p->trainable = trainable;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.resize(0, 0);
}

std::size_t ParameterStore::count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p->name.starts_with(prefix)) n += p->size();
  return n;
}

void ParameterStore::copy_values_from(const ParameterStore& other, std::string_view prefix) {
  for (auto& p : params_) {
    if (!p->name.starts_with(prefix)) continue;
    const Parameter* q = other.find(p->name);
    if (q == nullptr) continue;
    if (q->value.rows() != p->value.rows() || q->value.cols() != p->value.cols()) {
      throw std::invalid_argument("shape mismatch copying parameter '" + p->name + "'");
    }
    p->value = q->value;
  }
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
  return m;
}

Matrix linear_init(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

// ---- checkpoint -------------------------------------------------------------

void save_checkpoint(const ParameterStore& store, const fs::path& dir, const std::string& metadata_json) {
  fs::path tmp = dir;
  tmp += ".partial";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw std::runtime_error("cannot create checkpoint directory " + tmp.string() + ": " + ec.message());

  json params = json::array();
  std::ostringstream blob(std::ios::binary);
  for (const Parameter* p : store.all()) {
    const auto offset = static_cast<std::size_t>(blob.tellp());
    const std::array<std::uint32_t, 2> dims{static_cast<std::uint32_t>(p->value.rows()),
                                            static_cast<std::uint32_t>(p->value.cols())};
    write_tensor(blob, DType::kFloat64, dims,
                 std::as_bytes(std::span<const double>(p->value.data(), static_cast<std::size_t>(p->value.size()))));
    params.push_back(json{{"name", p->name},
                          {"shape", {p->value.rows(), p->value.cols()}},
                          {"dtype", "float64"},
                          {"trainable", p->trainable},
                          {"offset", offset}});
  }
  json manifest{{"format", "misdd-checkpoint"},
                {"version", 1},
                {"metadata", json::parse(metadata_json)},
                {"parameters", params}};
  const std::string bytes = blob.str();
  write_file_atomic(tmp / "tensors.bin", bytes);
  write_file_atomic(tmp / "manifest.json", manifest.dump(2) + "\n");
  fs::remove_all(dir, ec);
  fs::rename(tmp, dir);
}

ParameterStore load_checkpoint(const fs::path& dir, std::string* metadata_json) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw std::runtime_error("missing checkpoint manifest " + manifest_path.string());
  const json manifest = json::parse(read_text_file(manifest_path));
  if (manifest.at("format") != "misdd-checkpoint") throw std::runtime_error("not a checkpoint: " + dir.string());
  std::ifstream in(dir / "tensors.bin", std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint tensors in " + dir.string());
  ParameterStore store;
  for (const auto& rec : manifest.at("parameters")) {
    in.seekg(rec.at("offset").get<std::streamoff>());
    RawTensor t = read_tensor(in);
    const auto rows = rec.at("shape")[0].get<Eigen::Index>();
    const auto cols = rec.at("shape")[1].get<Eigen::Index>();
    if (t.dims.size() != 2 || t.dims[0] != rows || t.dims[1] != cols) {
      throw std::runtime_error("checkpoint shape mismatch for '" + rec.at("name").get<std::string>() + "'");
    }
    const std::vector<double> v = t.as<double>();
    Matrix m = Eigen::Map<const Matrix>(v.data(), rows, cols);
    store.add(rec.at("name").get<std::string>(), std::move(m), rec.at("trainable").get<bool>());
  }
  if (metadata_json != nullptr) *metadata_json = manifest.at("metadata").dump();
  return store;
}

// ---- gradient check ---------------------------------------------------------

GradCheckResult finite_difference_check(const LossBuilder& loss_fn, ParameterStore& store,
                                        const GradCheckOptions& options) {
  if (options.epsilon < 1e-6 || options.epsilon > 1e-3) {
    throw std::invalid_argument("finite_difference_check: epsilon must lie in [1e-6, 1e-3]");
  }
  auto evaluate = [&]() {
    Tape tape(false);
    return loss_fn(tape).item();
  };
  const double base = evaluate();
  if (evaluate() != base) throw NondeterministicLossError("loss function is not deterministic");

  store.zero_grad();
  {
    Tape tape(true);
    Var loss = loss_fn(tape);
    tape.backward(loss);
  }

  struct Entry {
    Parameter* p;
    Eigen::Index i;
  };
  std::vector<Entry> entries;
  for (Parameter* p : store.trainable()) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) entries.push_back({p, i});
  }
  if (entries.size() > options.max_entries) {
    Rng rng(derive_seed(options.seed, hash_string("grad-check")));
    rng.shuffle(entries);
    entries.resize(options.max_entries);
  }

  GradCheckResult result;
  for (const Entry& e : entries) {
    double& theta = e.p->value.data()[e.i];
    const double saved = theta;
    theta = saved + options.epsilon;
    const double up = evaluate();
    theta = saved - options.epsilon;
    const double down = evaluate();
    theta = saved;
    const double numeric = (up - down) / (2.0 * options.epsilon);
    const double analytic = e.p->grad.size() == 0 ? 0.0 : e.p->grad.data()[e.i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_entry = e.p->name + "[" + std::to_string(e.i) + "]";
    }
    ++result.entries_checked;
  }
  return result;
}

// ---- optimizers -------------------------------------------------------------

void Sgd::step(const std::vector<Parameter*>& params, double lr, double grad_scale) {
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    Matrix g = p->grad.size() == 0 ? Matrix::Zero(p->value.rows(), p->value.cols()) : Matrix(grad_scale * p->grad);
    if (weight_decay_ != 0.0) g += weight_decay_ * p->value;
    auto [it, fresh] = velocity_.try_emplace(p, Matrix::Zero(p->value.rows(), p->value.cols()));
    Matrix& v = it->second;
    v = momentum_ * v + g;
    p->value -= lr * v;
  }
}

void Adam::step(const std::vector<Parameter*>& params, double lr, double grad_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (Parameter* p : params) {
    if (!p->trainable || p->grad.size() == 0) continue;
    const Matrix g = grad_scale * p->grad;
    auto [it, fresh] = moments_.try_emplace(
        p, std::make_pair(Matrix::Zero(p->value.rows(), p->value.cols()), Matrix::Zero(p->value.rows(), p->value.cols())));
    auto& [m, v] = it->second;
    m = b1_ * m + (1.0 - b1_) * g;
    v = b2_ * v + (1.0 - b2_) * g.cwiseProduct(g);
    p->value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }
}

}  // namespace misdd::nn
