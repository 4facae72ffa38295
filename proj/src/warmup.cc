#include "misdd/warmup.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "misdd/text_batch.h"

namespace misdd {

using nn::Matrix;
using nn::Var;

namespace {

constexpr std::uint64_t kMimStream = 0x4d494d;
constexpr std::uint64_t kAlignStream = 0x414c4e;

// Cosine decay from base to floor * base.
double cosine_lr(double base, double floor, int epoch, int epochs) {
  const double t = epochs > 1 ? static_cast<double>(epoch) / (epochs - 1) : 0.0;
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  return order;
}

const Image& branch_image(const PairedSample& s, Branch b) { return b == Branch::kRgb ? s.rgb : s.depth; }

// Mean squared error over the masked patch rows.
Var reconstruction_loss(nn::Tape& tape, Var predicted, const Matrix& target, const std::vector<bool>& masked) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i]) rows.push_back(static_cast<int>(i));
  }
  Matrix picked(static_cast<Eigen::Index>(rows.size()), target.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) picked.row(static_cast<Eigen::Index>(i)) = target.row(rows[i]);
  return nn::mean_all(nn::square(nn::sub(nn::gather_rows(predicted, rows), tape.constant(std::move(picked)))));
}

// Two-way token loss with positives and negatives averaged separately.
Var balanced_token_loss(Var logits, const std::vector<int>& labels) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) pos.push_back(static_cast<int>(i));
    if (labels[i] == 0) neg.push_back(static_cast<int>(i));
  }
  Var loss;
  auto add_part = [&](const std::vector<int>& rows, int target) {
    if (rows.empty()) return;
    const std::vector<int> targets(rows.size(), target);
    Var part = nn::softmax_cross_entropy(nn::gather_rows(logits, rows), targets);
    loss = loss.valid() ? nn::add(loss, part) : part;
  };
  add_part(neg, 0);
  add_part(pos, 1);
  return loss;
}

void run_mim(Model& model, const std::vector<PairedSample>& normals, const WarmupConfig& cfg, WarmupLog& log) {
  const EncoderConfig& ec = model.config().encoder;
  Rng rng(derive_seed(cfg.seed, kMimStream));
  nn::ParameterStore aux;
  std::array<nn::Parameter*, 2> mask_token{};
  std::array<nn::Linear, 2> head;
  for (Branch b : kBranches) {
    const std::string tag = branch_tag(b);
    mask_token[static_cast<int>(b)] = &aux.add("mim." + tag + ".mask_token", nn::normal_matrix(1, ec.width, 0.02, rng));
    head[static_cast<int>(b)] = nn::Linear::init(aux, "mim." + tag + ".head", ec.width, ec.patch_dim(), rng);
  }
  std::vector<nn::Parameter*> params = aux.all();
  for (Branch b : kBranches) {
    for (nn::Parameter* p : model.store().with_prefix(vision_prefix(b))) params.push_back(p);
  }
  nn::Adam adam;
  const std::size_t n_mask =
      static_cast<std::size_t>(std::lround(cfg.mask_ratio * static_cast<double>(ec.num_patches())));
  EncodeOptions eo;
  eo.export_tokens = false;
  eo.keep_final_tokens = true;

  for (int epoch = 0; epoch < cfg.mim_epochs; ++epoch) {
    const auto order = shuffled_indices(normals.size(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      for (nn::Parameter* p : params) p->grad.resize(0, 0);
      for (std::size_t k = start; k < end; ++k) {
        const PairedSample& s = normals[order[k]];
        for (Branch b : kBranches) {
          const Matrix patches = patchify(branch_image(s, b), ec.patch_size);
          std::vector<std::size_t> perm = shuffled_indices(patches.rows(), rng);
          std::vector<bool> masked(patches.rows(), false);
          for (std::size_t i = 0; i < n_mask; ++i) masked[perm[i]] = true;
          nn::Tape tape;
          const VisionEncoder& enc = model.vision(b);
          Var emb = embed_patches(tape, enc, patches, &masked, mask_token[static_cast<int>(b)]);
          EncodedBranch e = encode(tape, enc, emb, nullptr, eo);
          Var pred = head[static_cast<int>(b)](tape, e.final_tokens);
          Var loss = reconstruction_loss(tape, pred, patches, masked);
          epoch_loss += loss.item();
          tape.backward(nn::scale(loss, 1.0 / static_cast<double>(end - start)));
        }
      }
      adam.step(params, cosine_lr(cfg.mim_lr, cfg.lr_floor, epoch, cfg.mim_epochs));
    }
    log.mim_loss.push_back(epoch_loss / static_cast<double>(normals.size()));
    spdlog::debug("warmup mim epoch {} loss {:.6f}", epoch, log.mim_loss.back());
  }
}

void run_alignment(Model& model, const std::vector<PairedSample>& normals, const WarmupConfig& cfg,
                   WarmupLog& log) {
  const EncoderConfig& ec = model.config().encoder;
  const std::vector<std::string>& classes = model.class_names();
  Rng rng(derive_seed(cfg.seed, kAlignStream));
  std::vector<nn::Parameter*> params = model.store().all();
  nn::Adam adam;
  const double inv_t = 1.0 / cfg.align_temperature;

  for (int epoch = 0; epoch < cfg.align_epochs; ++epoch) {
    const auto order = shuffled_indices(normals.size(), rng);
    double epoch_loss = 0.0;
    std::size_t terms = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      for (nn::Parameter* p : params) p->grad.resize(0, 0);
      TextBatch text(model, classes, true);
      const double weight = 1.0 / static_cast<double>(4 * (end - start));
      for (std::size_t k = start; k < end; ++k) {
        const PairedSample& s = normals[order[k]];
        const PairedSample& donor = normals[rng.index(normals.size())];
        if (std::find(classes.begin(), classes.end(), s.class_name) == classes.end()) {
          throw std::invalid_argument("warmup: unknown class " + s.class_name);
        }
        for (Branch b : kBranches) {
          const Mask mask = random_blob_mask(s.height(), rng);
          const Image corrupted = b == Branch::kRgb ? corrupt_rgb(s.rgb, mask, donor.rgb, rng)
                                                    : corrupt_depth(s.depth, mask, donor.depth, rng);
          const std::vector<int> corrupt_labels = patch_labels(mask, ec.patch_size);
          const std::vector<int> clean_labels(corrupt_labels.size(), 0);
          for (int abnormal = 0; abnormal < 2; ++abnormal) {
            nn::Tape tape;
            const Image& img = abnormal ? corrupted : branch_image(s, b);
            EncodedBranch e = encode(tape, model.vision(b), img, nullptr);
            Var pair = text.pair(tape, s.class_name);
            Var logits = nn::scale(nn::matmul_nt(e.pooled, pair), inv_t);
            Var loss = nn::softmax_cross_entropy(logits, std::vector<int>{abnormal});
            Var token_sum;
            for (const auto& [layer, tokens] : e.per_layer) {
              Var tl = balanced_token_loss(nn::scale(nn::matmul_nt(tokens, pair), inv_t),
                                           abnormal ? corrupt_labels : clean_labels);
              token_sum = token_sum.valid() ? nn::add(token_sum, tl) : tl;
            }
            loss = nn::add(loss, nn::scale(token_sum, cfg.token_weight / static_cast<double>(e.per_layer.size())));
            epoch_loss += loss.item();
            ++terms;
            tape.backward(nn::scale(loss, weight));
          }
        }
      }
      // Blank (dummy) inputs: neutral at image level, defect-free at token level.
      std::vector<std::string> batch_classes;
      for (std::size_t k = start; k < end; ++k) {
        const std::string& c = normals[order[k]].class_name;
        if (std::find(batch_classes.begin(), batch_classes.end(), c) == batch_classes.end()) batch_classes.push_back(c);
      }
      for (Branch b : kBranches) {
        if (cfg.blank_weight == 0.0) break;
        nn::Tape tape;
        const Image blank(ec.image_size, ec.image_size, b == Branch::kRgb ? 3 : 1);
        EncodedBranch e = encode(tape, model.vision(b), blank, nullptr);
        const std::vector<int> clean_labels(static_cast<std::size_t>(ec.num_patches()), 0);
        Var total;
        for (const std::string& c : batch_classes) {
          Var pair = text.pair(tape, c);
          Var logits = nn::scale(nn::matmul_nt(e.pooled, pair), inv_t);
          Var loss = nn::scale(nn::add(nn::softmax_cross_entropy(logits, std::vector<int>{0}),
                                       nn::softmax_cross_entropy(logits, std::vector<int>{1})),
                               0.5);
          Var token_sum;
          for (const auto& [layer, tokens] : e.per_layer) {
            Var tl = balanced_token_loss(nn::scale(nn::matmul_nt(tokens, pair), inv_t), clean_labels);
            token_sum = token_sum.valid() ? nn::add(token_sum, tl) : tl;
          }
          loss = nn::add(loss, nn::scale(token_sum, cfg.token_weight / static_cast<double>(e.per_layer.size())));
          total = total.valid() ? nn::add(total, loss) : loss;
        }
        tape.backward(nn::scale(total, cfg.blank_weight * weight / static_cast<double>(batch_classes.size())));
      }
      text.backward();
      adam.step(params, cosine_lr(cfg.align_lr, cfg.lr_floor, epoch, cfg.align_epochs));
    }
    log.align_loss.push_back(epoch_loss / static_cast<double>(terms));
    spdlog::debug("warmup alignment epoch {} loss {:.6f}", epoch, log.align_loss.back());
  }
}

}  // namespace

void WarmupConfig::validate() const {
  if (mim_epochs < 0 || align_epochs < 0) throw std::invalid_argument("warmup epochs must be non-negative");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("mask_ratio must lie in (0, 1)");
  if (!(mim_lr > 0.0) || !(align_lr > 0.0)) throw std::invalid_argument("warmup learning rates must be positive");
  if (!(align_temperature > 0.0)) throw std::invalid_argument("align_temperature must be positive");
  if (!(blank_weight >= 0.0)) throw std::invalid_argument("blank_weight must be non-negative");
  if (!(lr_floor > 0.0 && lr_floor <= 1.0)) throw std::invalid_argument("lr_floor must lie in (0, 1]");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

Mask random_blob_mask(int size, Rng& rng) {
  Mask m(size, size);
  const double base = size * rng.uniform(0.06, 0.14);
  const double cy = rng.uniform(base, size - base);
  const double cx = rng.uniform(base, size - base);
  const double aspect = rng.uniform(0.5, 1.0);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  // Radius modulated by a few low-frequency harmonics.
  std::array<double, 3> amp{}, phase{};
  for (int k = 0; k < 3; ++k) {
    amp[k] = rng.uniform(0.0, 0.25);
    phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double u = ca * dx + sa * dy;
      const double v = (-sa * dx + ca * dy) / aspect;
      const double theta = std::atan2(v, u);
      double r = base;
      for (int k = 0; k < 3; ++k) r *= 1.0 + amp[k] * std::sin((k + 2) * theta + phase[k]);
      if (std::hypot(u, v) <= r) m.at(y, x) = 1;
    }
  }
  if (m.count() == 0) m.at(static_cast<int>(cy), static_cast<int>(cx)) = 1;
  return m;
}

Image corrupt_rgb(const Image& rgb, const Mask& mask, const Image& donor, Rng& rng) {
  Image out = rgb;
  const int mode = static_cast<int>(rng.index(3));
  const int oy = static_cast<int>(rng.index(static_cast<std::size_t>(rgb.height)));
  const int ox = static_cast<int>(rng.index(static_cast<std::size_t>(rgb.width)));
  const std::array<double, 3> color{rng.uniform(), rng.uniform(), rng.uniform()};
  const double alpha = rng.uniform(0.4, 0.9);
  const double sigma = rng.uniform(0.1, 0.3);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        const double v = rgb.at(y, x, c);
        double r = v;
        if (mode == 0) {
          r = (1.0 - alpha) * v + alpha * color[c];
        } else if (mode == 1) {
          r = donor.at((y + oy) % rgb.height, (x + ox) % rgb.width, c) * (1.0 - 0.5 * alpha) + 0.5 * alpha * color[c];
        } else {
          r = v + rng.normal(0.0, sigma);
        }
        out.at(y, x, c) = clamp01(r);
      }
    }
  }
  return out;
}

Image corrupt_depth(const Image& depth, const Mask& mask, const Image& donor, Rng& rng) {
  Image out = depth;
  const int mode = static_cast<int>(rng.index(3));
  const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double amp = rng.uniform(0.05, 0.25);
  const int oy = static_cast<int>(rng.index(static_cast<std::size_t>(depth.height)));
  const int ox = static_cast<int>(rng.index(static_cast<std::size_t>(depth.width)));
  const double gy = rng.uniform(-1.0, 1.0), gx = rng.uniform(-1.0, 1.0);
  double cy = 0, cx = 0;
  const auto n = static_cast<double>(std::max<std::size_t>(mask.count(), 1));
  for (int y = 0; y < depth.height; ++y)
    for (int x = 0; x < depth.width; ++x)
      if (mask.at(y, x)) cy += y / n, cx += x / n;
  const double extent = std::max(1.0, std::sqrt(n));
  for (int y = 0; y < depth.height; ++y) {
    for (int x = 0; x < depth.width; ++x) {
      if (!mask.at(y, x)) continue;
      const double v = depth.at(y, x);
      const double ry = (y - cy) / extent, rx = (x - cx) / extent;
      double r = v;
      if (mode == 0) {
        r = v + sign * amp * std::exp(-2.0 * (ry * ry + rx * rx));
      } else if (mode == 1) {
        r = donor.at((y + oy) % depth.height, (x + ox) % depth.width) + sign * 0.5 * amp;
      } else {
        r = v + amp * (gy * ry + gx * rx) + sign * 0.3 * amp;
      }
      out.at(y, x) = clamp01(r);
    }
  }
  return out;
}

std::vector<int> patch_labels(const Mask& mask, int patch_size) {
  const int grid = mask.height / patch_size;
  std::vector<int> labels(static_cast<std::size_t>(grid) * grid, 0);
  const int area = patch_size * patch_size;
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      int hits = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x) hits += mask.at(gy * patch_size + y, gx * patch_size + x) != 0;
      labels[static_cast<std::size_t>(gy) * grid + gx] = hits == 0 ? 0 : (4 * hits >= area ? 1 : -1);
    }
  }
  return labels;
}

WarmupLog warmup_pretrain(Model& model, const std::vector<PairedSample>& normals, const WarmupConfig& config) {
  config.validate();
  if (model.has_prompts()) throw std::invalid_argument("warmup_pretrain expects a backbone-only model");
  if (normals.empty()) throw std::invalid_argument("warmup_pretrain: no training samples");
  for (const PairedSample& s : normals) {
    if (s.label != 0) throw std::invalid_argument("warmup_pretrain: training samples must be normal");
  }
  model.store().set_trainable("", true);
  WarmupLog log;
  run_mim(model, normals, config, log);
  run_alignment(model, normals, config, log);
  model.store().set_trainable("", false);
  model.store().zero_grad();
  return log;
}

}  // namespace misdd
