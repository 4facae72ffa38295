#include "misdd/training.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "misdd/tensor_io.h"
#include "misdd/text_batch.h"

namespace misdd {

using nlohmann::json;
using nn::RowVector;
using nn::Var;

double TrainConfig::lr_at(int epoch) const {
  if (epochs <= 1) return lr;
  const double t = static_cast<double>(std::clamp(epoch, 0, epochs - 1)) / (epochs - 1);
  return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(lr_min > 0.0 && lr_min < lr)) throw std::invalid_argument("lr_min must lie in (0, lr)");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (prompt_len < 1) throw std::invalid_argument("prompt_len must be >= 1");
  if (prompt_depth < 0) throw std::invalid_argument("prompt_depth must be non-negative");
}

PromptConfig TrainConfig::prompt_config() const {
  PromptConfig p;
  p.l_ccp = p.l_msp = p.l_map = prompt_len;
  p.use_ccp = use_ccp;
  p.use_msp = use_msp;
  p.use_map = use_map;
  return p;
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"lr_min", c.lr_min},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"image_size", c.image_size},
              {"prompt_depth", c.prompt_depth},
              {"prompt_len", c.prompt_len},
              {"seed", c.seed},
              {"use_ccp", c.use_ccp},
              {"use_msp", c.use_msp},
              {"use_map", c.use_map},
              {"use_scl", c.use_scl},
              {"skip_missing_terms", c.skip_missing_terms},
              {"level", std::string(to_string(c.level))}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.lr_min = j.at("lr_min").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.prompt_depth = j.at("prompt_depth").get<int>();
  c.prompt_len = j.at("prompt_len").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.use_ccp = j.at("use_ccp").get<bool>();
  c.use_msp = j.at("use_msp").get<bool>();
  c.use_map = j.at("use_map").get<bool>();
  c.use_scl = j.at("use_scl").get<bool>();
  c.skip_missing_terms = j.at("skip_missing_terms").get<bool>();
  c.level = parse_missing_level(j.at("level").get<std::string>());
  return c;
}

namespace {

void require_unit(const RowVector& v, const char* what) {
  if (std::abs(v.norm() - 1.0) > kUnitNormTolerance) {
    throw std::invalid_argument(std::string("contrastive_loss: ") + what + " is not unit-norm");
  }
}

void finish(LossBreakdown& b) { b.total = b.l_rgb_n + b.l_3d_n - b.l_rgb_an - b.l_3d_an; }

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kPromptStream = 0x5052;

}  // namespace

LossBreakdown contrastive_loss(const RowVector* f_rgb, const RowVector* f_3d, const TextEmbeddingPair& text) {
  require_unit(text.normal, "normal text embedding");
  require_unit(text.abnormal, "abnormal text embedding");
  LossBreakdown b;
  if (f_rgb != nullptr) {
    require_unit(*f_rgb, "RGB feature");
    b.l_rgb_n = (*f_rgb - text.normal).norm();
    b.l_rgb_an = (*f_rgb - text.abnormal).norm();
  }
  if (f_3d != nullptr) {
    require_unit(*f_3d, "3D feature");
    b.l_3d_n = (*f_3d - text.normal).norm();
    b.l_3d_an = (*f_3d - text.abnormal).norm();
  }
  finish(b);
  return b;
}

LossVars contrastive_loss(Var f_rgb, Var f_3d, Var normal, Var abnormal) {
  require_unit(normal.value(), "normal text embedding");
  require_unit(abnormal.value(), "abnormal text embedding");
  LossVars out;
  auto branch = [&](Var f, double& dn, double& da, const char* what) {
    if (!f.valid()) return;
    require_unit(f.value(), what);
    Var n = nn::row_distance(f, normal);
    Var a = nn::row_distance(f, abnormal);
    dn = n.item();
    da = a.item();
    Var term = nn::sub(n, a);
    out.total = out.total.valid() ? nn::add(out.total, term) : term;
  };
  branch(f_rgb, out.values.l_rgb_n, out.values.l_rgb_an, "RGB feature");
  branch(f_3d, out.values.l_3d_n, out.values.l_3d_an, "3D feature");
  if (!out.total.valid()) throw std::invalid_argument("contrastive_loss: no branch contributes");
  finish(out.values);
  return out;
}

bool branch_in_loss(Branch b, const ModalityIndicator& ind, const TrainConfig& config) {
  const bool present = b == Branch::kRgb ? ind.rgb : ind.three_d;
  if (present) return true;
  if (config.level == MissingLevel::kFeature) return false;
  return !config.skip_missing_terms;
}

TrainResult train(const Model& warm, const std::vector<PairedSample>& train_set, const MissingSchedule& schedule,
                  const TrainConfig& config, const std::vector<bool>* participates) {
  config.validate();
  if (schedule.size() != train_set.size()) throw std::invalid_argument("train: schedule/sample count mismatch");
  if (participates != nullptr && participates->size() != train_set.size()) {
    throw std::invalid_argument("train: participation mask has the wrong length");
  }
  if (warm.has_prompts()) throw std::invalid_argument("train: expected a backbone-only warmed model");
  if (config.image_size != warm.config().encoder.image_size) {
    throw std::invalid_argument("train: image_size " + std::to_string(config.image_size) +
                                " does not match the warmed encoder (" +
                                std::to_string(warm.config().encoder.image_size) + ")");
  }

  TrainResult result{warm, {}, {}};
  Model& model = result.model;
  const PromptConfig pc = config.prompt_config();
  if (pc.any()) model.add_prompts(pc, config.prompt_depth, derive_seed(config.seed, kPromptStream));
  model.freeze_backbone();

  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    if (participates != nullptr && !(*participates)[i]) continue;
    if (train_set[i].label != 0) throw std::invalid_argument("train: training samples must be normal");
    if (train_set[i].height() != config.image_size) {
      throw std::invalid_argument("train: sample " + train_set[i].id + " does not match image_size");
    }
    active.push_back(i);
  }
  if (active.empty()) throw std::runtime_error("train: empty effective training set");

  if (config.use_scl) {
    Rng rng(derive_seed(config.seed, kShuffleStream));
    nn::Sgd sgd(config.momentum, config.weight_decay);
    std::vector<nn::Parameter*> params = model.store().trainable();
    EncodeOptions eo;
    eo.export_tokens = false;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const double lr = config.lr_at(epoch);
      std::vector<std::size_t> order = active;
      rng.shuffle(order);
      LossBreakdown epoch_sum;
      int batches = 0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        const double inv_b = 1.0 / static_cast<double>(end - start);
        for (nn::Parameter* p : params) p->grad.resize(0, 0);
        std::set<std::string> class_set;
        for (std::size_t k = start; k < end; ++k) class_set.insert(train_set[order[k]].class_name);
        LossBreakdown batch;
        try {
          TextBatch text(model, {class_set.begin(), class_set.end()}, true);
          for (std::size_t k = start; k < end; ++k) {
            const PairedSample& s = train_set[order[k]];
            const ModalityIndicator& ind = schedule[order[k]];
            const ModalityPair input = config.level == MissingLevel::kInput ? apply_input_missing(s, ind)
                                                                            : ModalityPair{s.rgb, s.depth};
            nn::Tape tape;
            std::array<Var, 2> feats;
            for (Branch b : kBranches) {
              if (!branch_in_loss(b, ind, config)) continue;
              const BranchPrompts bp = model.branch_prompts(b);
              const Image& img = b == Branch::kRgb ? input.rgb : input.depth;
              feats[static_cast<int>(b)] = encode(tape, model.vision(b), img, model.has_prompts() ? &bp : nullptr, eo).pooled;
            }
            Var pair = text.pair(tape, s.class_name);
            LossVars lv = contrastive_loss(feats[0], feats[1], nn::slice_rows(pair, 0, 1),
                                           nn::slice_rows(pair, 1, 1));
            if (!std::isfinite(lv.values.total)) throw std::domain_error("non-finite loss");
            batch.l_rgb_n += inv_b * lv.values.l_rgb_n;
            batch.l_3d_n += inv_b * lv.values.l_3d_n;
            batch.l_rgb_an += inv_b * lv.values.l_rgb_an;
            batch.l_3d_an += inv_b * lv.values.l_3d_an;
            tape.backward(nn::scale(lv.total, inv_b));
          }
          text.backward();
        } catch (const std::domain_error& e) {
          throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(batches) + ": " + e.what());
        }
        sgd.step(params, lr);
        epoch_sum.l_rgb_n += batch.l_rgb_n;
        epoch_sum.l_3d_n += batch.l_3d_n;
        epoch_sum.l_rgb_an += batch.l_rgb_an;
        epoch_sum.l_3d_an += batch.l_3d_an;
        ++batches;
      }
      LossBreakdown mean{epoch_sum.l_rgb_n / batches, epoch_sum.l_3d_n / batches, epoch_sum.l_rgb_an / batches,
                         epoch_sum.l_3d_an / batches, 0.0};
      finish(mean);
      result.epoch_log.push_back(mean);
      spdlog::debug("train epoch {} lr {:.6g} total {:.6f}", epoch, lr, mean.total);
    }
    model.store().zero_grad();
  }

  std::vector<bool> in_gallery(train_set.size(), false);
  for (std::size_t i : active) in_gallery[i] = true;
  result.galleries = build_galleries(model, train_set, schedule, &in_gallery);
  return result;
}

void write_loss_log(const std::filesystem::path& path, const std::vector<LossBreakdown>& log,
                    const TrainConfig& config) {
  std::ostringstream out;
  out << "epoch,lr,l_rgb_n,l_3d_n,l_rgb_an,l_3d_an,total\n";
  char line[256];
  for (std::size_t e = 0; e < log.size(); ++e) {
    const LossBreakdown& b = log[e];
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9f,%.9f,%.9f,%.9f,%.9f\n", e, config.lr_at(static_cast<int>(e)),
                  b.l_rgb_n, b.l_3d_n, b.l_rgb_an, b.l_3d_an, b.total);
    out << line;
  }
  write_file_atomic(path, out.str());
}

std::vector<bool> few_shot_subset(const std::vector<PairedSample>& train_set, int k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("few-shot K must be >= 1");
  std::map<std::string, std::vector<std::size_t>> by_class;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    auto [it, fresh] = by_class.try_emplace(train_set[i].class_name);
    if (fresh) order.push_back(train_set[i].class_name);
    it->second.push_back(i);
  }
  std::vector<bool> keep(train_set.size(), false);
  for (const std::string& cls : order) {
    std::vector<std::size_t>& idx = by_class[cls];
    if (static_cast<std::size_t>(k) > idx.size()) {
      throw std::invalid_argument("few-shot K=" + std::to_string(k) + " exceeds the " + std::to_string(idx.size()) +
                                  " training samples of class '" + cls + "'");
    }
    Rng rng(derive_seed(seed, hash_string(cls)));
    rng.shuffle(idx);
    for (int j = 0; j < k; ++j) keep[idx[static_cast<std::size_t>(j)]] = true;
  }
  return keep;
}

}  // namespace misdd
