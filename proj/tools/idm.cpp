// idm: command-line front end for data generation, training, evaluation and
// dry-run inspection of the individual pipeline stages.
#include <CLI11.hpp>

#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "idm/datagen.hpp"
#include "idm/experiment.hpp"
#include "idm/image_io.hpp"
#include "idm/metrics.hpp"
#include "idm/mixing.hpp"
#include "idm/selection.hpp"
#include "idm/styletx.hpp"
#include "idm/trainer.hpp"

namespace fs = std::filesystem;
using namespace idm;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  bool verbose = false;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
  if (g.seed) {
    cfg.train.seed = *g.seed;
    cfg.adapt_seeds = {*g.seed};
  }
  return cfg;
}

fs::path label_dir(const fs::path& dir) { return fs::is_directory(dir / "labels") ? dir / "labels" : dir; }

/// Label maps keyed by file stem.
std::map<std::string, LabelMap> read_label_dir(const fs::path& dir) {
  const fs::path d = label_dir(dir);
  if (!fs::is_directory(d)) throw IngestError("not a directory: " + dir.string());
  std::map<std::string, LabelMap> out;
  for (const auto& e : fs::directory_iterator(d)) {
    if (e.path().extension() == ".png") out.emplace(e.path().stem().string(), read_label_png(e.path()));
  }
  return out;
}

void print_report(const EvalReport& r) {
  nlohmann::json j{{"miou", r.miou}, {"pixel_acc", r.pixel_acc}, {"num_images", r.num_images}};
  auto& per = j["per_class_iou"] = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    per.push_back(r.present[c] ? nlohmann::json(r.per_class_iou[c]) : nlohmann::json(nullptr));
  }
  std::cout << j.dump(2) << "\n";
}

const LabeledSample& find_sample(const std::vector<LabeledSample>& data, const std::string& id) {
  for (const auto& s : data) {
    if (s.id == id) return s;
  }
  throw ConfigError("no sample with id '" + id + "'");
}

/// The one-shot target: an explicit image file, or an id / seed pick from a dataset.
OneShotTarget load_target(const std::string& image, const std::string& dir, const std::string& id,
                          std::uint64_t seed) {
  if (!image.empty()) return OneShotTarget(read_image(image), fs::path(image).stem().string());
  if (dir.empty()) throw ConfigError("give --target IMAGE or --target-dir DIR");
  const auto data = read_dataset(dir);
  if (data.empty()) throw ConfigError("target dataset is empty: " + dir);
  const auto& pick = id.empty() ? data[pick_target(data.size(), seed)] : find_sample(data, id);
  return OneShotTarget(pick.image, pick.id);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot domain-adaptive segmentation with uncertainty-based sample selection"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "seed overriding the config");
  app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();
  app.add_flag("-v,--verbose", g.verbose, "debug logging");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write the synthetic source / target datasets");

  // pretrain
  std::string source_dir;
  auto* pre = app.add_subcommand("pretrain", "train the source model");
  pre->add_option("--source-dir", source_dir, "source dataset (default OUT/data/source)");

  // adapt
  std::string model_path, target_image, target_dir, target_id;
  auto* adapt = app.add_subcommand("adapt", "one-shot adaptation of a source model");
  adapt->add_option("--model", model_path, "source checkpoint")->required()->check(CLI::ExistingFile);
  adapt->add_option("--source-dir", source_dir, "source dataset (default OUT/data/source)");
  adapt->add_option("--target", target_image, "target image file");
  adapt->add_option("--target-dir", target_dir, "dataset to pick the target from");
  adapt->add_option("--target-id", target_id, "id of the target image in --target-dir");
  std::string eval_dir;
  adapt->add_option("--eval-dir", eval_dir, "labeled target data for snapshots");

  // eval
  std::string pred_dir, truth_dir, data_dir;
  int num_classes = 0;
  auto* eval = app.add_subcommand("eval", "mIoU of predictions or of a model");
  eval->add_option("--pred-dir", pred_dir, "predicted label PNGs");
  eval->add_option("--truth-dir", truth_dir, "ground-truth label PNGs");
  eval->add_option("--num-classes", num_classes, "class count for --pred-dir mode (default from config)");
  eval->add_option("--model", model_path, "checkpoint to evaluate")->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "labeled dataset for --model mode");

  // select / mix / stylize dry runs
  bool dry = false;
  std::string csv_path;
  auto* sel = app.add_subcommand("select", "score candidates and print selection records");
  sel->add_flag("--dry-run", dry, "required; selection has no side effects")->required();
  sel->add_option("--model", model_path, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  sel->add_option("--source-dir", source_dir, "candidate source dataset")->required();
  sel->add_option("--target", target_image, "target image file");
  sel->add_option("--target-dir", target_dir, "dataset to pick the target from");
  sel->add_option("--target-id", target_id, "id of the target image in --target-dir");
  sel->add_option("--csv", csv_path, "write CSV here instead of stdout");

  auto* mix = app.add_subcommand("mix", "write PatchMix image / label / mask triples");
  mix->add_flag("--dry-run", dry, "required")->required();
  mix->add_option("--model", model_path, "teacher checkpoint for the pseudo label")->check(CLI::ExistingFile);
  mix->add_option("--source-dir", source_dir, "source dataset")->required();
  mix->add_option("--target", target_image, "target image file");
  mix->add_option("--target-dir", target_dir, "dataset to pick the target from");
  mix->add_option("--target-id", target_id, "id of the target image in --target-dir");
  int count = 4;
  mix->add_option("--count", count, "number of mixed samples")->capture_default_str();

  auto* sty = app.add_subcommand("stylize", "write stylized source images");
  sty->add_flag("--dry-run", dry, "required")->required();
  sty->add_option("--source-dir", source_dir, "source dataset")->required();
  sty->add_option("--target", target_image, "target image file");
  sty->add_option("--target-dir", target_dir, "dataset to pick the target from");
  sty->add_option("--target-id", target_id, "id of the target image in --target-dir");
  sty->add_option("--count", count, "number of stylized samples")->capture_default_str();

  // experiments
  auto* run = app.add_subcommand("run", "gen-data, pretrain, adapt and eval from --config");
  auto* sweep = app.add_subcommand("sweep", "like run, requires a sweep section in --config");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed_value;
  spdlog::set_level(g.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    const fs::path out = g.out_dir;
    const ExperimentConfig cfg = load_config(g);
    const int C = cfg.data.scene.num_classes;
    auto source_or_default = [&] { return source_dir.empty() ? out / "data" / "source" : fs::path(source_dir); };

    if (*gen) {
      const Benchmark b = make_benchmark(cfg.data);
      write_dataset(out / "data" / "source", b.source, C);
      write_dataset(out / "data" / "target_pool", b.target_pool, C);
      write_dataset(out / "data" / "target_test", b.target_test, C);
      std::ofstream(out / "config.json") << to_json(cfg).dump(2) << "\n";
      spdlog::info("wrote {} source, {} target, {} test images under {}", b.source.size(), b.target_pool.size(),
                   b.target_test.size(), (out / "data").string());
    } else if (*pre) {
      const auto data = read_dataset(source_or_default());
      TrainConfig t = cfg.train;
      t.seed = g.seed.value_or(cfg.pretrain_seed);
      const auto res = pretrain_source(data, cfg.arch, t);
      fs::create_directories(out);
      save_checkpoint(out / "source.idmc", res.model);
      const auto rep = evaluate_model(res.model, data);
      spdlog::info("source mIoU {:.4f}; checkpoint {}", rep.miou, (out / "source.idmc").string());
    } else if (*adapt) {
      const auto ck = load_checkpoint(model_path);
      const auto data = read_dataset(source_or_default());
      const auto target = load_target(target_image, target_dir, target_id, cfg.train.seed);
      std::vector<LabeledSample> eval_set;
      if (!eval_dir.empty()) eval_set = read_dataset(eval_dir);
      AdaptHooks hooks;
      hooks.eval_set = eval_set;
      hooks.on_row = [](const MetricsRow& r) {
        if (std::isfinite(r.miou)) spdlog::info("iteration {}: mIoU {:.4f}", r.iteration + 1, r.miou);
      };
      const auto res = adapt_one_shot(ck.student, data, target, cfg.train, hooks);
      fs::create_directories(out);
      save_checkpoint(out / "adapted.idmc", res.student, &res.teacher);
      std::ofstream(out / "manifest.json") << res.manifest.to_json().dump(2) << "\n";
      std::ofstream csv(out / "metrics.csv");
      write_metrics_csv(csv, res.metrics);
      spdlog::info("adapted on target '{}'; wrote {}", target.id(), out.string());
    } else if (*eval) {
      if (!pred_dir.empty() || !truth_dir.empty()) {
        if (pred_dir.empty() || truth_dir.empty()) throw ConfigError("--pred-dir and --truth-dir go together");
        const auto preds = read_label_dir(pred_dir);
        const auto truths = read_label_dir(truth_dir);
        ConfusionMatrix cm(num_classes > 0 ? num_classes : C);
        for (const auto& [id, truth] : truths) {
          const auto it = preds.find(id);
          if (it == preds.end()) throw IngestError("no prediction for '" + id + "'");
          cm.accumulate(it->second, truth);
        }
        print_report(miou(cm, static_cast<int>(truths.size())));
      } else {
        if (model_path.empty() || data_dir.empty()) throw ConfigError("eval needs --pred-dir/--truth-dir or --model/--data");
        const auto ck = load_checkpoint(model_path);
        const auto data = read_dataset(data_dir);
        print_report(evaluate_model(ck.student, data));
      }
    } else if (*sel) {
      const auto ck = load_checkpoint(model_path);
      const auto data = read_dataset(source_dir);
      const auto target = load_target(target_image, target_dir, target_id, cfg.train.seed);
      std::vector<StylizedSample> cands;
      for (std::size_t i = 0; i < data.size(); ++i) {
        cands.push_back(stylize(data[i], target.image(), mix_seed(cfg.train.seed, i), cfg.train.gap_norm));
      }
      const auto res = select_batch(cands, ck.student, MemoryBank{}, cfg.train.selection);
      if (csv_path.empty()) {
        write_selection_csv(std::cout, res.records);
      } else {
        std::ofstream os(csv_path);
        write_selection_csv(os, res.records);
      }
    } else if (*mix || *sty) {
      const auto data = read_dataset(source_dir);
      if (data.empty()) throw ConfigError("source dataset is empty");
      const auto target = load_target(target_image, target_dir, target_id, cfg.train.seed);
      const auto& x_t = target.image();
      LabelMap pseudo(x_t.height, x_t.width, kIgnoreLabel);
      if (*mix && !model_path.empty()) {
        pseudo = pseudo_label(load_checkpoint(model_path).student, x_t, cfg.train.pseudo_confidence);
      }
      const PatchGrid grid = choose_grid(x_t.height, x_t.width, cfg.train.patches);
      const fs::path dir = out / (*mix ? "mix" : "stylize");
      fs::create_directories(dir);
      for (int i = 0; i < count; ++i) {
        const auto& s = data[static_cast<std::size_t>(i) % data.size()];
        const auto st = stylize(s, x_t, mix_seed(cfg.train.seed, i), cfg.train.gap_norm);
        const std::string stem = dir.string() + "/" + std::to_string(i) + "_" + s.id;
        if (*sty) {
          write_png(stem + ".png", st.image);
          spdlog::info("{}: delta_mu {:.3f} delta_sigma {:.3f}", s.id, st.offsets.delta_mu, st.offsets.delta_sigma);
          continue;
        }
        const auto m = patch_mix(st, x_t, pseudo, grid, cfg.train.mix_ratio, mix_seed(cfg.train.seed, 1000 + i));
        write_png(stem + "_image.png", m.image);
        write_label_png(stem + "_label.png", m.label);
        LabelMap mask(x_t.height, x_t.width);
        for (int r = 0; r < grid.rows; ++r) {
          for (int c = 0; c < grid.cols; ++c) {
            const auto b = cell_bounds(grid, x_t.height, x_t.width, r, c);
            const std::uint8_t v = m.mask.take_target[r * grid.cols + c] ? 255 : 0;
            for (int y = b.y0; y < b.y1; ++y) {
              for (int x = b.x0; x < b.x1; ++x) mask.at(y, x) = v;
            }
          }
        }
        write_label_png(stem + "_mask.png", mask);
      }
      spdlog::info("wrote {} samples to {}", count, dir.string());
    } else if (*run || *sweep) {
      if (g.config.empty()) throw ConfigError("--config is required");
      if (*sweep && cfg.sweep.parameter.empty()) throw ConfigError("config has no sweep section");
      if (g.seed) {
        // Re-serialize so the override lands in the experiment directory.
        fs::create_directories(out);
        const fs::path tmp = out / "config.override.json";
        std::ofstream(tmp) << to_json(cfg).dump(2) << "\n";
        return run_experiment(tmp, out);
      }
      return run_experiment(g.config, out);
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
