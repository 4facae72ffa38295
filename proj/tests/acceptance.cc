// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero if
// any selected criterion fails.

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "misdd/experiment.h"
#include "misdd/nn/parameters.h"
#include "oracles.h"

namespace fs = std::filesystem;
using namespace misdd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

// Small configuration shared by the structural criteria.
ModelConfig small_config(int width) {
  ModelConfig c;
  c.encoder.image_size = 16;
  c.encoder.patch_size = 8;
  c.encoder.depth = 3;
  c.encoder.width = width;
  c.encoder.heads = 2;
  c.encoder.mlp_hidden = 2 * width;
  c.encoder.embed_dim = width;
  c.encoder.prompt_depth = 2;
  c.encoder.feature_layers = {1, 3};
  c.prompts.l_ccp = c.prompts.l_msp = c.prompts.l_map = 2;
  c.text.width = width;
  c.text.layers = 1;
  c.text.heads = 2;
  c.text.mlp_hidden = 2 * width;
  c.text.n_ctx = 2;
  return c;
}

Dataset small_dataset(int size, int train, int test_normal, int test_anomalous, std::uint64_t seed) {
  DatasetSpec spec;
  spec.n_train_normal = train;
  spec.n_test_normal = test_normal;
  spec.n_test_anomalous = test_anomalous;
  spec.image_size = size;
  spec.seed = seed;
  return synthesize_dataset(spec);
}

// ------------------------------------------------------------------------ 1

Outcome metric_oracles() {
  Rng rng(2024);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const oracle::Instance inst = oracle::random_instance(rng);
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < inst.maps.size(); ++i) {
      s.insert(s.end(), inst.maps[i].values.begin(), inst.maps[i].values.end());
      y.insert(y.end(), inst.masks[i].pixels.begin(), inst.masks[i].pixels.end());
    }
    // Image-level AUROC on per-image maxima needs both labels; use pixels otherwise.
    const double a = auroc(s, y);
    worst = std::max(worst, std::abs(a - oracle::auroc(s, y)));
    worst = std::max(worst, std::abs(p_auroc(inst.maps, inst.masks) - oracle::auroc(s, y)));
    worst = std::max(worst, std::abs(aupro_paper(inst.maps, inst.masks) - oracle::aupro_paper(inst.maps, inst.masks)));
    worst = std::max(worst,
                     std::abs(aupro_standard(inst.maps, inst.masks) - oracle::aupro_standard(inst.maps, inst.masks)));
  }
  return {worst <= 1e-9, "1000 instances, max deviation " + fmt("%.3g", worst)};
}

// ------------------------------------------------------------------------ 2

Outcome gradient_check() {
  const ModelConfig cfg = small_config(16);
  const std::vector<std::string> classes = {"tile"};
  Model model = Model::create(cfg, PromptTemplates{}, classes, 11);
  model.add_prompts(cfg.prompts, cfg.encoder.prompt_depth, 12);
  model.freeze_backbone();
  Rng rng(13);
  std::vector<PairedSample> samples;
  for (int i = 0; i < 2; ++i) samples.push_back(render_normal("tile", 16, rng));
  // Sample 0 complete, sample 1 with its RGB replaced by the dummy input.
  const std::vector<ModalityIndicator> inds = {indicator_for(false, false), indicator_for(true, false)};
  EncodeOptions eo;
  eo.export_tokens = false;

  auto loss = [&](nn::Tape& tape) {
    const TextPairVars text = semantic_duality(tape, model.text(), model.vocab(), "tile", model.templates(),
                                               cfg.text.n_ctx);
    nn::Var total;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const ModalityPair in = apply_input_missing(samples[i], inds[i]);
      std::array<nn::Var, 2> f;
      for (Branch b : kBranches) {
        const BranchPrompts bp = model.branch_prompts(b);
        f[static_cast<int>(b)] =
            encode(tape, model.vision(b), b == Branch::kRgb ? in.rgb : in.depth, &bp, eo).pooled;
      }
      nn::Var l = contrastive_loss(f[0], f[1], text.normal, text.abnormal).total;
      total = total.valid() ? nn::add(total, l) : l;
    }
    return total;
  };

  std::size_t expected = 0;
  std::set<std::string> groups;
  for (nn::Parameter* p : model.store().trainable()) {
    expected += p->size();
    groups.insert(p->name.substr(0, p->name.find_first_of("/.")));
  }
  nn::GradCheckOptions o;
  o.max_entries = expected + 1;
  o.epsilon = 1e-5;
  const nn::GradCheckResult r = nn::finite_difference_check(loss, model.store(), o);
  const bool all_groups = groups == std::set<std::string>{"ccp", "msp", "map", "suffix"};
  return {r.max_relative_error < 1e-4 && r.entries_checked == expected && all_groups,
          std::to_string(r.entries_checked) + " entries (CCP, MSP, MAP, suffix), max relative error " +
              fmt("%.3g", r.max_relative_error) + " at " + r.worst_entry};
}

// ------------------------------------------------------------------------ 3

Outcome missing_conformance() {
  const std::size_t n = 1000;
  int cases = 0;
  std::string bad;
  for (MissingType t : {MissingType::kRgb, MissingType::kThreeD, MissingType::kBoth}) {
    for (double eta : {0.3, 0.5, 0.7}) {
      ++cases;
      const MissingSchedule s = sample_missing_schedule(n, t, eta, 99);
      const std::size_t full = static_cast<std::size_t>(std::llround(eta * n));
      const std::size_t half = static_cast<std::size_t>(std::llround(eta * n / 2));
      std::size_t want_rgb = 0, want_3d = 0;
      if (t == MissingType::kRgb) want_rgb = full;
      if (t == MissingType::kThreeD) want_3d = full;
      if (t == MissingType::kBoth) want_rgb = want_3d = half;
      bool ok = s.size() == n && s.rgb_missing_count() == want_rgb && s.three_d_missing_count() == want_3d;
      for (const ModalityIndicator& ind : s.assignments) {
        ok = ok && (ind.rgb || ind.three_d);
        ok = ok && (ind == indicator_for(!ind.rgb, !ind.three_d));
      }
      if (!ok) bad += " " + std::string(to_string(t)) + "/" + fmt("%.1f", eta);
    }
  }
  return {bad.empty(), std::to_string(cases) + " (type, eta) cases at n=1000" + (bad.empty() ? "" : "; bad:" + bad)};
}

// ------------------------------------------------------------------------ 4

Outcome invariants() {
  std::vector<std::string> failures;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) failures.push_back(what);
  };

  // Sequence lengths and prompt stripping on the default configuration.
  const ModelConfig def;
  {
    Model m = Model::create(def, PromptTemplates{}, {"tile"}, 1);
    m.add_prompts(def.prompts, def.encoder.prompt_depth, 2);
    Rng rng(3);
    const PairedSample s = render_normal("tile", def.encoder.image_size, rng);
    for (Branch b : kBranches) {
      const BranchPrompts bp = m.branch_prompts(b);
      nn::Tape tape(false);
      const EncodedBranch e = encode(tape, m.vision(b), b == Branch::kRgb ? s.rgb : s.depth, &bp);
      const Eigen::Index n = 1 + def.encoder.num_patches();
      for (int j = 0; j < def.encoder.depth; ++j) {
        const Eigen::Index want = j < def.encoder.prompt_depth ? n + def.prompts.total_len() : n;
        expect(e.sequence_lengths[static_cast<std::size_t>(j)] == want, "sequence length at layer " + std::to_string(j));
      }
      for (const auto& [layer, v] : e.per_layer) {
        expect(v.rows() == def.encoder.num_patches(), "exported token count at layer " + std::to_string(layer));
      }
    }
  }

  // Frozen backbone bytes and score ranges on a small trained model.
  const ModelConfig cfg = small_config(8);
  const Dataset data = small_dataset(16, 2, 1, 2, 5);
  Model warm = Model::create(cfg, PromptTemplates{}, data.spec().classes, 6);
  WarmupConfig wc;
  wc.mim_epochs = 1;
  wc.align_epochs = 1;
  warmup_pretrain(warm, data.train(), wc);
  TrainConfig tc;
  tc.image_size = 16;
  tc.prompt_depth = cfg.encoder.prompt_depth;
  tc.prompt_len = 2;
  tc.epochs = 2;
  tc.batch_size = 4;
  const MissingSchedule sched = sample_missing_schedule(data.train().size(), MissingType::kBoth, 0.5, 7);
  const TrainResult r = train(warm, data.train(), sched, tc);
  std::size_t frozen_checked = 0;
  for (const nn::Parameter* p : warm.store().all()) {
    if (Model::is_prompt_parameter(p->name)) continue;
    const nn::Parameter* q = r.model.store().find(p->name);
    const bool same = q != nullptr && q->value.size() == p->value.size() &&
                      std::memcmp(q->value.data(), p->value.data(), sizeof(double) * p->size()) == 0;
    expect(same, "frozen parameter changed: " + p->name);
    ++frozen_checked;
  }

  std::size_t maps = 0;
  for (const PairedSample& s : data.test()) {
    for (const ModalityIndicator ind : {indicator_for(false, false), indicator_for(true, false), indicator_for(false, true)}) {
      for (MissingLevel level : {MissingLevel::kInput, MissingLevel::kFeature}) {
        DetectOptions o;
        o.level = level;
        const ScorePair sp = detect(r.model, s, r.galleries, ind, o);
        auto in_range = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
        bool ok = in_range(sp.s_im) && in_range(sp.rgb.image) && in_range(sp.three_d.image);
        for (const ScoreMap* m : {&sp.s_px, &sp.rgb.pixel, &sp.three_d.pixel, &sp.rgb.fused, &sp.three_d.fused})
          for (double v : m->values) ok = ok && in_range(v);
        expect(ok, "score out of range for " + s.id);
        ++maps;
      }
    }
  }

  Rng rng(8);
  for (int t = 0; t < 1000; ++t) {
    const double a = rng.uniform();
    expect(harmonic(a, a) == a, "H(a,a) != a");
    expect(harmonic(0.0, a) == 0.0 && harmonic(a, 0.0) == 0.0, "H(0,b) != 0");
  }
  expect(harmonic(0.0, 0.0) == 0.0 && harmonic(1.0, 1.0) == 1.0, "H endpoints");

  std::string detail = "injection lengths, prompt stripping, " + std::to_string(frozen_checked) +
                       " frozen tensors, " + std::to_string(maps) + " score pairs, harmonic identities";
  if (!failures.empty()) detail += "; first failure: " + failures.front();
  return {failures.empty(), detail};
}

// ------------------------------------------------------------------------ 5

struct E2eCell {
  CellSpec spec;
  CellResult result;
};

const MetricsReport& mean_row(const CellResult& r) { return r.rows.back().report; }

// I-AUROC of one defect type against all normal test samples.
double defect_auroc(const std::vector<ScoredSample>& scored, DefectType type) {
  std::vector<double> s;
  std::vector<int> y;
  for (const ScoredSample& x : scored) {
    if (x.label == 1 && x.defect != type) continue;
    s.push_back(x.s_im);
    y.push_back(x.label);
  }
  return auroc(s, y);
}

Outcome end_to_end(const fs::path& work, const fs::path& golden, bool update_golden) {
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  constexpr std::uint64_t kSeed = 7;
  DatasetSpec spec;
  spec.seed = kSeed;
  const Dataset data = synthesize_dataset(spec);
  WarmupConfig wc;
  wc.seed = kSeed;
  const Model warm = build_warm_model(data, ModelConfig{}, PromptTemplates{}, wc);
  spdlog::info("warmup done at {:.0f}s", elapsed());

  auto cell = [&](MissingType type, double eta, bool full) {
    CellSpec c;
    c.type = type;
    c.eta = eta;
    c.train.seed = kSeed;
    if (!full) c.train.use_ccp = c.train.use_msp = c.train.use_map = c.train.use_scl = false;
    return c;
  };
  std::vector<E2eCell> cells;
  for (const CellSpec& c : {cell(MissingType::kNone, 0.0, true), cell(MissingType::kBoth, 0.3, true),
                            cell(MissingType::kBoth, 0.5, true), cell(MissingType::kBoth, 0.7, true),
                            cell(MissingType::kBoth, 0.5, false), cell(MissingType::kRgb, 0.7, true),
                            cell(MissingType::kThreeD, 0.7, true)}) {
    cells.push_back({c, run_cell(warm, data, c)});
    const MetricsReport& m = mean_row(cells.back().result);
    spdlog::info("{} {:.1f} {}: I {:.3f} P {:.3f} at {:.0f}s", to_string(c.type), c.eta, ablation_label(c), m.i_auroc,
                 m.p_auroc, elapsed());
  }
  const double seconds = elapsed();

  std::vector<CsvRow> all;
  for (const E2eCell& c : cells) all.insert(all.end(), c.result.rows.begin(), c.result.rows.end());
  const std::string csv = format_csv(all);
  write_csv(work / "e2e.csv", all);

  const MetricsReport& none = mean_row(cells[0].result);
  const double i3 = mean_row(cells[1].result).i_auroc, i5 = mean_row(cells[2].result).i_auroc,
               i7 = mean_row(cells[3].result).i_auroc;
  const double p_full = mean_row(cells[2].result).p_auroc, p_abl = mean_row(cells[4].result).p_auroc;
  const auto& no_rgb = cells[5].result.scored;
  const auto& no_3d = cells[6].result.scored;
  const double depth_no3d = defect_auroc(no_3d, DefectType::kDepthOnly);
  const double depth_norgb = defect_auroc(no_rgb, DefectType::kDepthOnly);
  const double rgb_norgb = defect_auroc(no_rgb, DefectType::kRgbOnly);
  const double rgb_no3d = defect_auroc(no_3d, DefectType::kRgbOnly);

  const bool a = none.i_auroc >= 0.90 && none.p_auroc >= 0.90;
  const bool b = i5 <= i3 + 0.02 && i7 <= i5 + 0.02;
  const bool c = p_full > p_abl;
  const bool d = depth_no3d < depth_norgb && rgb_norgb < rgb_no3d;
  const bool fast = seconds < 20 * 60;

  std::string golden_note;
  if (update_golden) {
    write_csv(golden, all);
    golden_note = "golden updated";
  } else if (fs::exists(golden)) {
    golden_note = slurp(golden) == csv ? "matches golden CSV" : "differs from golden CSV";
  } else {
    golden_note = "no golden CSV";
  }

  std::ostringstream detail;
  detail << "(a) " << (a ? "ok" : "FAIL") << " complete I " << fmt("%.3f", none.i_auroc) << " P "
         << fmt("%.3f", none.p_auroc) << "; (b) " << (b ? "ok" : "FAIL") << " both-missing I " << fmt("%.3f", i3)
         << " / " << fmt("%.3f", i5) << " / " << fmt("%.3f", i7) << "; (c) " << (c ? "ok" : "FAIL") << " P full "
         << fmt("%.3f", p_full) << " vs ablation " << fmt("%.3f", p_abl) << "; (d) " << (d ? "ok" : "FAIL")
         << " depth_only I no-3D " << fmt("%.3f", depth_no3d) << " vs no-RGB " << fmt("%.3f", depth_norgb)
         << ", rgb_only I no-RGB " << fmt("%.3f", rgb_norgb) << " vs no-3D " << fmt("%.3f", rgb_no3d) << "; "
         << fmt("%.0f", seconds) << "s; " << golden_note;
  return {a && b && c && d && fast, detail.str()};
}

// ------------------------------------------------------------------------ 6

Outcome determinism(const fs::path& work) {
  const Dataset data = small_dataset(32, 3, 2, 3, 21);
  auto run = [&](const fs::path& root) {
    WarmupConfig wc;
    wc.mim_epochs = 1;
    wc.align_epochs = 1;
    wc.seed = 21;
    ModelConfig mc;
    mc.encoder.image_size = 32;
    const Model warm = build_warm_model(data, mc, PromptTemplates{}, wc);
    save_model(warm, root / "warmup");
    std::vector<CsvRow> all;
    for (MissingType t : {MissingType::kRgb, MissingType::kThreeD, MissingType::kBoth}) {
      for (bool full : {true, false}) {
        CellSpec c;
        c.type = t;
        c.eta = 0.5;
        c.train.seed = 21;
        c.train.epochs = 2;
        c.train.image_size = 32;
        if (!full) c.train.use_ccp = c.train.use_msp = c.train.use_map = c.train.use_scl = false;
        const CellResult r =
            run_cell(warm, data, c, root / (std::string(to_string(t)) + "_" + ablation_label(c)));
        all.insert(all.end(), r.rows.begin(), r.rows.end());
      }
    }
    write_csv(root / "grid.csv", all);
    return tree(root);
  };
  fs::remove_all(work / "det_a");
  fs::remove_all(work / "det_b");
  const auto a = run(work / "det_a");
  const auto b = run(work / "det_b");
  std::size_t checkpoints = 0;
  for (const auto& [k, v] : a) checkpoints += k.find("checkpoint/") != std::string::npos && k.ends_with(".bin");
  return {a == b && !a.empty(), std::to_string(a.size()) + " files (" + std::to_string(checkpoints) +
                                    " checkpoint tensors, CSVs) " + (a == b ? "bit-identical" : "differ")};
}

// ------------------------------------------------------------------------ 7

Outcome parameter_accounting(const fs::path& work) {
  const ModelConfig cfg;
  Model m = Model::create(cfg, PromptTemplates{}, {"tile", "foam"}, 1);
  m.add_prompts(cfg.prompts, cfg.encoder.prompt_depth, 2);
  m.freeze_backbone();
  save_model(m, work / "params_model");
  const Model loaded = load_model(work / "params_model");
  std::size_t total = 0, trainable = 0;
  for (const nn::Parameter* p : loaded.store().all()) {
    total += p->size();
    trainable += p->trainable ? p->size() : 0;
  }
  const std::vector<ParamRow> rows = parameter_table(loaded);
  std::size_t sum = 0, learnable_sum = 0;
  bool frozen_clean = true;
  for (const ParamRow& r : rows) {
    sum += r.count;
    if (r.status == "frozen") frozen_clean = frozen_clean && r.trainable == 0;
    if (r.status == "learnable") learnable_sum += r.count;
  }
  const std::size_t ccp = rows[2].count;
  bool table_ok = true;
  try {
    format_param_table(rows, total);
  } catch (const std::exception&) {
    table_ok = false;
  }
  const bool ok = sum == total && frozen_clean && learnable_sum == trainable && table_ok &&
                  ccp == static_cast<std::size_t>(cfg.prompts.l_ccp * cfg.encoder.width) &&
                  rows[0].status == "frozen" && rows[1].status == "frozen";
  return {ok, "rows sum " + std::to_string(sum) + " / total " + std::to_string(total) + ", learnable " +
                  std::to_string(learnable_sum) + " = trainable " + std::to_string(trainable) + ", CCP " +
                  std::to_string(ccp)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "misdd_acceptance").string();
  std::string golden;
  bool update_golden = false;
  std::string log_level = "info";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work-dir", work);
  app.add_option("--golden", golden, "committed end-to-end CSV");
  app.add_flag("--update-golden", update_golden);
  app.add_option("--log-level", log_level);
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  fs::create_directories(work);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, metric_oracles},
      {2, gradient_check},
      {3, missing_conformance},
      {4, invariants},
      {5, [&] { return end_to_end(work, golden, update_golden); }},
      {6, [&] { return determinism(work); }},
      {7, [&] { return parameter_accounting(work); }},
  };
  bool all = true;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s  %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), s);
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
