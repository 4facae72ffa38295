#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "misdd/experiment.h"
#include "misdd/tensor_io.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace misdd;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SeedFlag {
  std::optional<std::uint64_t> value;

  std::uint64_t resolve() const {
    if (value) return *value;
    if (const char* env = std::getenv("MISDD_SEED")) {
      try {
        return std::stoull(env);
      } catch (const std::exception&) {
        throw UsageError(std::string("MISDD_SEED is not an unsigned integer: ") + env);
      }
    }
    return 0;
  }
};

struct CellFlags {
  std::string missing_type = "none";
  double eta = 0.0;
  std::string missing_level = "input";
  int epochs = 30;
  double lr = 0.02;
  std::optional<int> image_size;
  int prompt_depth = 6;
  int prompt_len = 8;
  bool no_ccp = false;
  bool no_msp = false;
  bool no_map = false;
  bool no_scl = false;
  bool skip_missing_terms = false;
  bool memory_bank = false;
  bool export_heatmaps = false;
  int k_shot = 0;

  void add_schedule(CLI::App* app) {
    app->add_option("--missing-type", missing_type, "rgb|3d|both|none")
        ->check(CLI::IsMember({"rgb", "3d", "both", "none"}));
    app->add_option("--eta", eta, "missing rate in [0, 1]")->check(CLI::Range(0.0, 1.0));
    app->add_option("--missing-level", missing_level, "input|feature")->check(CLI::IsMember({"input", "feature"}));
    app->add_flag("--memory-bank", memory_bank, "fuse the visual-gallery memory-bank map");
    app->add_flag("--export-heatmaps", export_heatmaps, "write one PNG per test sample");
  }

  void add_training(CLI::App* app) {
    add_schedule(app);
    app->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    app->add_option("--lr", lr)->check(CLI::PositiveNumber);
    app->add_option("--image-size", image_size)->check(CLI::PositiveNumber);
    app->add_option("--prompt-depth", prompt_depth)->check(CLI::NonNegativeNumber);
    app->add_option("--prompt-len", prompt_len)->check(CLI::PositiveNumber);
    app->add_flag("--no-ccp", no_ccp);
    app->add_flag("--no-msp", no_msp);
    app->add_flag("--no-map", no_map);
    app->add_flag("--no-scl", no_scl);
    app->add_flag("--skip-missing-terms", skip_missing_terms);
    app->add_option("--k-shot", k_shot, "K complete training samples per class (0: all)")
        ->check(CLI::NonNegativeNumber);
  }

  CellSpec cell(std::uint64_t seed, int dataset_image_size) const {
    if (image_size && *image_size != dataset_image_size) {
      throw std::invalid_argument("--image-size " + std::to_string(*image_size) +
                                  " does not match the dataset image_size " + std::to_string(dataset_image_size));
    }
    CellSpec c;
    c.type = parse_missing_type(missing_type);
    c.eta = c.type == MissingType::kNone ? 0.0 : eta;
    c.memory_bank = memory_bank;
    c.export_heatmaps = export_heatmaps;
    c.k_shot = k_shot;
    TrainConfig& t = c.train;
    t.lr = lr;
    t.epochs = epochs;
    t.image_size = dataset_image_size;
    t.prompt_depth = prompt_depth;
    t.prompt_len = prompt_len;
    t.seed = seed;
    t.use_ccp = !no_ccp;
    t.use_msp = !no_msp;
    t.use_map = !no_map;
    t.use_scl = !no_scl;
    t.skip_missing_terms = skip_missing_terms;
    t.level = parse_missing_level(missing_level);
    return c;
  }
};

struct WarmupFlags {
  int mim_epochs = WarmupConfig{}.mim_epochs;
  int align_epochs = WarmupConfig{}.align_epochs;
  std::string prompts_file;

  void add(CLI::App* app) {
    app->add_option("--mim-epochs", mim_epochs)->check(CLI::NonNegativeNumber);
    app->add_option("--align-epochs", align_epochs)->check(CLI::NonNegativeNumber);
    app->add_option("--prompts", prompts_file, "JSON prompt template file")->check(CLI::ExistingFile);
  }

  WarmupConfig config(std::uint64_t seed) const {
    WarmupConfig w;
    w.mim_epochs = mim_epochs;
    w.align_epochs = align_epochs;
    w.seed = seed;
    return w;
  }

  PromptTemplates templates() const { return prompts_file.empty() ? PromptTemplates{} : PromptTemplates::load(prompts_file); }
};

json warmup_extra(const WarmupConfig& w, const WarmupLog& log, const fs::path& dataset) {
  return json{{"warmup",
               {{"seed", w.seed},
                {"mim_epochs", w.mim_epochs},
                {"align_epochs", w.align_epochs},
                {"mask_ratio", w.mask_ratio},
                {"dataset", dataset.string()},
                {"mim_loss", log.mim_loss},
                {"align_loss", log.align_loss}}}};
}

Model obtain_warm_model(const Dataset& ds, const fs::path& dataset_dir, const std::string& warmup_dir,
                        const WarmupFlags& wf, std::uint64_t seed, const fs::path& out) {
  if (!warmup_dir.empty()) {
    Model m = load_model(warmup_dir);
    if (m.has_prompts()) throw std::invalid_argument("--warmup must point at a backbone-only warmup checkpoint");
    return m;
  }
  spdlog::info("no --warmup given; warming up the backbone in-process");
  ModelConfig mc;
  mc.encoder.image_size = ds.image_size();
  const WarmupConfig wc = wf.config(seed);
  WarmupLog log;
  Model m = build_warm_model(ds, mc, wf.templates(), wc, &log);
  save_model(m, out / "warmup", warmup_extra(wc, log, dataset_dir));
  return m;
}

void print_rows(const std::vector<CsvRow>& rows) { std::cout << format_csv(rows); }

int cmd_generate(const fs::path& out, std::uint64_t seed, int classes, int train_normals, int test_normals,
                 int test_anomalous, int image_size) {
  DatasetSpec spec;
  spec.seed = seed;
  const std::vector<std::string> builtin = spec.classes;
  spec.classes.clear();
  for (int i = 0; i < classes; ++i) {
    spec.classes.push_back(i < static_cast<int>(builtin.size()) ? builtin[static_cast<std::size_t>(i)]
                                                                : "class" + std::to_string(i));
  }
  spec.n_train_normal = train_normals;
  spec.n_test_normal = test_normals;
  spec.n_test_anomalous = test_anomalous;
  spec.image_size = image_size;
  const Dataset ds = generate_dataset(spec, out);
  spdlog::info("wrote {} training and {} test samples to {}", ds.train().size(), ds.test().size(), out.string());
  return 0;
}

int cmd_warmup(const fs::path& dataset_dir, const fs::path& out, std::uint64_t seed, const WarmupFlags& wf,
               std::optional<int> image_size) {
  const Dataset ds = load_dataset(dataset_dir);
  ModelConfig mc;
  mc.encoder.image_size = image_size.value_or(ds.image_size());
  const WarmupConfig wc = wf.config(seed);
  WarmupLog log;
  const Model m = build_warm_model(ds, mc, wf.templates(), wc, &log);
  save_model(m, out, warmup_extra(wc, log, dataset_dir));
  spdlog::info("warmup checkpoint written to {}", out.string());
  return 0;
}

int cmd_train(const fs::path& dataset_dir, const fs::path& out, const std::string& warmup_dir, std::uint64_t seed,
              const CellFlags& cf, const WarmupFlags& wf) {
  const Dataset ds = load_dataset(dataset_dir);
  const CellSpec cell = cf.cell(seed, ds.image_size());
  const Model warm = obtain_warm_model(ds, dataset_dir, warmup_dir, wf, seed, out);
  const json provenance{{"dataset", dataset_dir.string()}, {"warmup", warmup_dir}, {"command", "train"}};
  const CellResult r = run_cell(warm, ds, cell, out, provenance);
  print_rows(r.rows);
  return 0;
}

// Accepts a run directory (with checkpoint/ and galleries/) or a bare checkpoint.
fs::path checkpoint_dir(const fs::path& p) { return fs::exists(p / "checkpoint") ? p / "checkpoint" : p; }

int cmd_eval(const fs::path& dataset_dir, const fs::path& run_dir, const fs::path& out, std::uint64_t seed,
             bool seed_given, CellFlags cf, const std::vector<std::string>& explicit_flags) {
  const Dataset ds = load_dataset(dataset_dir);
  json extra;
  const Model model = load_model(checkpoint_dir(run_dir), &extra);
  if (!fs::exists(run_dir / "galleries")) throw std::invalid_argument("no galleries/ next to the checkpoint");
  const Galleries galleries = load_galleries(run_dir / "galleries");
  // Unspecified schedule and ablation settings default to the training run's.
  if (extra.contains("cell")) {
    const json& c = extra.at("cell");
    const TrainConfig t = train_config_from_json(c.at("train"));
    auto given = [&](const std::string& f) {
      return std::find(explicit_flags.begin(), explicit_flags.end(), f) != explicit_flags.end();
    };
    if (!given("--missing-type")) cf.missing_type = c.at("missing_type").get<std::string>();
    if (!given("--eta")) cf.eta = c.at("eta").get<double>();
    if (!given("--missing-level")) cf.missing_level = std::string(to_string(t.level));
    if (!given("--memory-bank")) cf.memory_bank = c.at("memory_bank").get<bool>();
    if (!seed_given) seed = t.seed;
    cf.no_ccp = !t.use_ccp;
    cf.no_msp = !t.use_msp;
    cf.no_map = !t.use_map;
    cf.no_scl = !t.use_scl;
    cf.skip_missing_terms = t.skip_missing_terms;
    cf.k_shot = c.at("k_shot").get<int>();
  }
  const CellSpec cell = cf.cell(seed, ds.image_size());
  const std::vector<CsvRow> rows = evaluate_cell(model, galleries, ds, cell, out);
  if (!out.empty()) write_csv(out / "metrics.csv", rows);
  print_rows(rows);
  return 0;
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> v;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) v.push_back(std::stod(item));
  return v;
}

std::vector<std::string> parse_strings(const std::string& csv) {
  std::vector<std::string> v;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) v.push_back(item);
  return v;
}

// Applies a named ablation ("full", "no-cpl-scl", or "no-<part>[-<part>...]").
void apply_ablation(const std::string& name, CellSpec& cell) {
  TrainConfig& t = cell.train;
  if (name == "full") return;
  if (name == "no-cpl-scl") {
    t.use_ccp = t.use_msp = t.use_map = t.use_scl = false;
    return;
  }
  if (!name.starts_with("no-")) throw UsageError("unknown ablation '" + name + "'");
  std::stringstream ss(name.substr(3));
  for (std::string part; std::getline(ss, part, '-');) {
    if (part == "ccp") t.use_ccp = false;
    else if (part == "msp") t.use_msp = false;
    else if (part == "map") t.use_map = false;
    else if (part == "scl") t.use_scl = false;
    else if (part == "cpl") t.use_ccp = t.use_msp = t.use_map = false;
    else throw UsageError("unknown ablation part '" + part + "'");
  }
}

std::string cell_dir_name(const CellSpec& c) {
  char eta[16];
  std::snprintf(eta, sizeof eta, "%.2f", c.eta);
  return std::string(to_string(c.type)) + "_eta" + eta + "_" + ablation_label(c);
}

int cmd_grid(const fs::path& dataset_dir, const fs::path& out, const std::string& warmup_dir, std::uint64_t seed,
             const CellFlags& cf, const WarmupFlags& wf, const std::string& types, const std::string& etas,
             const std::string& ablations) {
  const Dataset ds = load_dataset(dataset_dir);
  const Model warm = obtain_warm_model(ds, dataset_dir, warmup_dir, wf, seed, out);
  std::vector<CsvRow> all;
  const std::vector<std::string> type_list = parse_strings(types);
  const std::vector<double> eta_list = parse_doubles(etas);
  const std::vector<std::string> ablation_list = parse_strings(ablations);
  if (type_list.empty() || eta_list.empty() || ablation_list.empty()) throw UsageError("grid axes must be nonempty");
  for (const std::string& abl : ablation_list) {
    for (const std::string& type : type_list) {
      for (double eta : eta_list) {
        CellFlags f = cf;
        f.missing_type = type;
        f.eta = eta;
        CellSpec cell = f.cell(seed, ds.image_size());
        apply_ablation(abl, cell);
        const fs::path dir = out / "cells" / cell_dir_name(cell);
        spdlog::info("grid cell {}", dir.filename().string());
        const json provenance{{"dataset", dataset_dir.string()}, {"warmup", warmup_dir}, {"command", "grid"}};
        CellResult r = run_cell(warm, ds, cell, dir, provenance);
        all.insert(all.end(), r.rows.begin(), r.rows.end());
      }
    }
  }
  write_csv(out / "grid.csv", all);
  print_rows(all);
  return 0;
}

int cmd_params(const fs::path& path) {
  const Model m = load_model(checkpoint_dir(path));
  const std::vector<ParamRow> rows = parameter_table(m);
  std::cout << format_param_table(rows, m.store().count());
  return 0;
}

int cmd_fewshot(const fs::path& dataset_dir, const fs::path& out, const std::string& warmup_dir, std::uint64_t seed,
                const CellFlags& cf, const WarmupFlags& wf, const std::string& shots) {
  const Dataset ds = load_dataset(dataset_dir);
  const Model warm = obtain_warm_model(ds, dataset_dir, warmup_dir, wf, seed, out);
  std::vector<CsvRow> all;
  for (const std::string& k : parse_strings(shots)) {
    CellFlags f = cf;
    f.k_shot = k == "full" ? 0 : std::stoi(k);
    if (k != "full" && f.k_shot < 1) throw UsageError("shot counts must be >= 1 or 'full'");
    const CellSpec cell = f.cell(seed, ds.image_size());
    const fs::path dir = out / ("shot_" + k);
    const json provenance{{"dataset", dataset_dir.string()}, {"warmup", warmup_dir}, {"command", "fewshot"}};
    CellResult r = run_cell(warm, ds, cell, dir, provenance);
    all.insert(all.end(), r.rows.begin(), r.rows.end());
  }
  write_csv(out / "fewshot.csv", all);
  print_rows(all);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Missing-modality multimodal surface defect detection toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level)->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  SeedFlag seed;
  std::string dataset, out, warmup_dir, checkpoint;
  CellFlags cf;
  WarmupFlags wf;
  int classes = 4, train_normals = 50, test_normals = 10, test_anomalous = 20, gen_image_size = 64;
  std::string types = "rgb,3d,both", etas = "0.3,0.5,0.7", ablations = "full", shots = "1,2,4";

  auto* gen = app.add_subcommand("generate", "synthesize a paired RGB/depth dataset");
  gen->add_option("--out", out)->required();
  gen->add_option("--seed", seed.value);
  gen->add_option("--classes", classes)->check(CLI::PositiveNumber);
  gen->add_option("--train-normals", train_normals)->check(CLI::PositiveNumber);
  gen->add_option("--test-normals", test_normals)->check(CLI::NonNegativeNumber);
  gen->add_option("--test-anomalous", test_anomalous)->check(CLI::NonNegativeNumber);
  gen->add_option("--image-size", gen_image_size)->check(CLI::PositiveNumber);

  std::optional<int> warm_image_size;
  auto* warm = app.add_subcommand("warmup", "pretrain and freeze the backbone");
  warm->add_option("--dataset", dataset)->required()->check(CLI::ExistingDirectory);
  warm->add_option("--out", out)->required();
  warm->add_option("--seed", seed.value);
  warm->add_option("--image-size", warm_image_size)->check(CLI::PositiveNumber);
  wf.add(warm);

  auto* tr = app.add_subcommand("train", "train prompts on one missing configuration and evaluate");
  tr->add_option("--dataset", dataset)->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out)->required();
  tr->add_option("--warmup", warmup_dir)->check(CLI::ExistingDirectory);
  tr->add_option("--seed", seed.value);
  cf.add_training(tr);
  wf.add(tr);

  auto* ev = app.add_subcommand("eval", "evaluate a trained run");
  ev->add_option("--dataset", dataset)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", out);
  ev->add_option("--seed", seed.value);
  cf.add_schedule(ev);

  auto* grid = app.add_subcommand("grid", "train and evaluate every (type, eta, ablation) cell");
  grid->add_option("--dataset", dataset)->required()->check(CLI::ExistingDirectory);
  grid->add_option("--out", out)->required();
  grid->add_option("--warmup", warmup_dir)->check(CLI::ExistingDirectory);
  grid->add_option("--seed", seed.value);
  grid->add_option("--types", types, "comma list of rgb,3d,both,none");
  grid->add_option("--etas", etas, "comma list of missing rates");
  grid->add_option("--ablations", ablations, "comma list: full, no-cpl-scl, no-ccp, no-msp-map, ...");
  cf.add_training(grid);
  wf.add(grid);

  auto* params = app.add_subcommand("params", "parameter-count table of a checkpoint");
  params->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingDirectory);

  auto* few = app.add_subcommand("fewshot", "K-shot training and evaluation");
  few->add_option("--dataset", dataset)->required()->check(CLI::ExistingDirectory);
  few->add_option("--out", out)->required();
  few->add_option("--warmup", warmup_dir)->check(CLI::ExistingDirectory);
  few->add_option("--seed", seed.value);
  few->add_option("--shots", shots, "comma list of K values or 'full'");
  cf.add_training(few);
  wf.add(few);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    const std::uint64_t s = seed.resolve();
    if (*gen) return cmd_generate(out, s, classes, train_normals, test_normals, test_anomalous, gen_image_size);
    if (*warm) return cmd_warmup(dataset, out, s, wf, warm_image_size);
    if (*tr) return cmd_train(dataset, out, warmup_dir, s, cf, wf);
    if (*ev) {
      std::vector<std::string> explicit_flags;
      for (const char* f : {"--missing-type", "--eta", "--missing-level", "--memory-bank"}) {
        if (ev->count(f) > 0) explicit_flags.emplace_back(f);
      }
      return cmd_eval(dataset, checkpoint, out, s, seed.value.has_value() || std::getenv("MISDD_SEED") != nullptr,
                      cf, explicit_flags);
    }
    if (*grid) return cmd_grid(dataset, out, warmup_dir, s, cf, wf, types, etas, ablations);
    if (*params) return cmd_params(checkpoint);
    if (*few) return cmd_fewshot(dataset, out, warmup_dir, s, cf, wf, shots);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
