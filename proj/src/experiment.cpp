#include "idm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <spdlog/spdlog.h>

namespace idm {

namespace fs = std::filesystem;

DomainShift BenchmarkSpec::default_shift() {
  DomainShift s;
  s.mean_offset = {0.3f, -0.2f, 0.15f};
  s.std_scale = {0.5f, 1.4f, 0.6f};
  s.texture_noise = 0.03f;
  return s;
}

void BenchmarkSpec::validate() const {
  scene.validate();
  shift.validate();
  if (source_count < 1) throw ConfigError("data.source_count must be >= 1");
  if (target_pool < 1) throw ConfigError("data.target_pool must be >= 1");
  if (target_test < 1) throw ConfigError("data.target_test must be >= 1");
}

namespace {

std::vector<LabeledSample> shifted_scenes(const BenchmarkSpec& spec, int n, const std::string& prefix,
                                          int first_index, std::uint64_t stream) {
  auto scenes = generate_scenes(spec.scene, n, prefix, first_index);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    scenes[i] = apply_domain_shift(scenes[i], spec.shift, mix_seed(spec.shift_seed ^ stream, i));
  }
  return scenes;
}

}  // namespace

Benchmark make_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  Benchmark b;
  b.source = generate_source(spec.scene, spec.source_count);
  b.target_pool = shifted_scenes(spec, spec.target_pool, "tgt", 1 << 20, 1);
  b.target_test = shifted_scenes(spec, spec.target_test, "test", 1 << 21, 2);
  return b;
}

std::size_t pick_target(std::size_t pool_size, std::uint64_t seed) {
  if (pool_size == 0) throw ContractError("pick_target: empty pool");
  // Fixed pseudo-random offset, then consecutive seeds take consecutive images.
  return static_cast<std::size_t>((mix_seed(0x7a72, 0) % pool_size + seed) % pool_size);
}

void ExperimentConfig::validate() const {
  std::vector<std::string> errs;
  auto collect = [&errs](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      errs.emplace_back(e.what());
    }
  };
  collect([&] { data.validate(); });
  collect([&] { arch.validate(); });
  collect([&] { train.validate(); });
  if (arch.num_classes != data.scene.num_classes) errs.emplace_back("arch.num_classes must equal data.num_classes");
  if (adapt_seeds.empty()) errs.emplace_back("adapt_seeds must not be empty");
  static const std::vector<std::string> numeric{"lambda_ent", "lambda_sim", "k", "patches", "tau", "mix_ratio"};
  if (!sweep.parameter.empty() && sweep.parameter != "ablation") {
    if (std::find(numeric.begin(), numeric.end(), sweep.parameter) == numeric.end()) {
      errs.push_back("sweep.parameter: unknown parameter '" + sweep.parameter + "'");
    } else if (sweep.values.empty()) {
      errs.emplace_back("sweep.values must not be empty");
    } else {
      for (const double v : sweep.values) {
        collect([&] { sweep_variants(train, {sweep.parameter, {v}}).front().second.validate(); });
      }
    }
  }
  if (!errs.empty()) {
    std::string msg = "invalid experiment config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& s = c.data.scene;
  const auto& sh = c.data.shift;
  return {
      {"data",
       {{"width", s.width},
        {"height", s.height},
        {"num_classes", s.num_classes},
        {"shapes_per_image", s.shapes_per_image},
        {"scene_seed", s.rng_seed},
        {"source_count", c.data.source_count},
        {"target_pool", c.data.target_pool},
        {"target_test", c.data.target_test},
        {"shift",
         {{"mean_offset", sh.mean_offset},
          {"std_scale", sh.std_scale},
          {"texture_noise", sh.texture_noise},
          {"seed", c.data.shift_seed}}}}},
      {"arch",
       {{"in_channels", c.arch.in_channels},
        {"width1", c.arch.width1},
        {"width2", c.arch.width2},
        {"width3", c.arch.width3},
        {"feature_dim", c.arch.feature_dim},
        {"num_classes", c.arch.num_classes}}},
      {"train", to_json(c.train)},
      {"pretrain_seed", c.pretrain_seed},
      {"adapt_seeds", c.adapt_seeds},
      {"sweep", {{"parameter", c.sweep.parameter}, {"values", c.sweep.values}}},
      {"plot", c.plot},
  };
}

namespace {

template <typename V>
void get_to(const nlohmann::json& j, const char* key, V& out, std::vector<std::string>& errs,
            const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    errs.push_back(where + key + ": wrong type");
  }
}

void known_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where,
                std::vector<std::string>& errs) {
  if (!j.is_object()) {
    errs.push_back(where + ": expected an object");
    return;
  }
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* n) { return k == n; })) {
      errs.push_back("unknown key " + where + k);
    }
  }
}

}  // namespace

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  std::vector<std::string> errs;
  known_keys(j, {"data", "arch", "train", "pretrain_seed", "adapt_seeds", "sweep", "plot"}, "", errs);
  if (!errs.empty()) throw ConfigError("invalid experiment config:\n  " + errs.front());
  if (j.contains("data")) {
    const auto& d = j.at("data");
    known_keys(d,
               {"width", "height", "num_classes", "shapes_per_image", "scene_seed", "source_count",
                "target_pool", "target_test", "shift"},
               "data.", errs);
    get_to(d, "width", c.data.scene.width, errs, "data.");
    get_to(d, "height", c.data.scene.height, errs, "data.");
    get_to(d, "num_classes", c.data.scene.num_classes, errs, "data.");
    get_to(d, "shapes_per_image", c.data.scene.shapes_per_image, errs, "data.");
    get_to(d, "scene_seed", c.data.scene.rng_seed, errs, "data.");
    get_to(d, "source_count", c.data.source_count, errs, "data.");
    get_to(d, "target_pool", c.data.target_pool, errs, "data.");
    get_to(d, "target_test", c.data.target_test, errs, "data.");
    if (d.contains("shift")) {
      const auto& sh = d.at("shift");
      known_keys(sh, {"mean_offset", "std_scale", "texture_noise", "seed"}, "data.shift.", errs);
      get_to(sh, "mean_offset", c.data.shift.mean_offset, errs, "data.shift.");
      get_to(sh, "std_scale", c.data.shift.std_scale, errs, "data.shift.");
      get_to(sh, "texture_noise", c.data.shift.texture_noise, errs, "data.shift.");
      get_to(sh, "seed", c.data.shift_seed, errs, "data.shift.");
    }
  }
  c.arch.num_classes = c.data.scene.num_classes;
  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    known_keys(a, {"in_channels", "width1", "width2", "width3", "feature_dim", "num_classes"}, "arch.", errs);
    get_to(a, "in_channels", c.arch.in_channels, errs, "arch.");
    get_to(a, "width1", c.arch.width1, errs, "arch.");
    get_to(a, "width2", c.arch.width2, errs, "arch.");
    get_to(a, "width3", c.arch.width3, errs, "arch.");
    get_to(a, "feature_dim", c.arch.feature_dim, errs, "arch.");
    get_to(a, "num_classes", c.arch.num_classes, errs, "arch.");
  }
  if (j.contains("train")) {
    try {
      c.train = train_config_from_json(j.at("train"), c.train);
    } catch (const ConfigError& e) {
      errs.emplace_back(e.what());
    }
  }
  get_to(j, "pretrain_seed", c.pretrain_seed, errs, "");
  get_to(j, "adapt_seeds", c.adapt_seeds, errs, "");
  get_to(j, "plot", c.plot, errs, "");
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    known_keys(s, {"parameter", "values"}, "sweep.", errs);
    get_to(s, "parameter", c.sweep.parameter, errs, "sweep.");
    get_to(s, "values", c.sweep.values, errs, "sweep.");
  }
  if (!errs.empty()) {
    std::string msg = "invalid experiment config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  c.validate();
  return c;
}

nlohmann::json config_json_from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return experiment_config_from_json(config_json_from_file(path));
}

double VariantResult::mean_adapted() const {
  double s = 0.0;
  for (const auto& r : seeds) s += r.adapted_miou;
  return seeds.empty() ? NAN : s / static_cast<double>(seeds.size());
}

double VariantResult::mean_source() const {
  double s = 0.0;
  for (const auto& r : seeds) s += r.source_miou;
  return seeds.empty() ? NAN : s / static_cast<double>(seeds.size());
}

VariantResult run_variant(const std::string& label, const ModelState& source_model, const Benchmark& bench,
                          const TrainConfig& train, std::span<const std::uint64_t> seeds,
                          const std::optional<fs::path>& run_dir) {
  VariantResult v{label, train, {}};
  for (const auto seed : seeds) {
    TrainConfig cfg = train;
    cfg.seed = seed;
    const auto& pick = bench.target_pool[pick_target(bench.target_pool.size(), seed)];
    const OneShotTarget target(pick.image, pick.id);
    AdaptHooks hooks;
    hooks.eval_set = bench.target_test;
    const auto res = adapt_one_shot(source_model, bench.source, target, cfg, hooks);
    SeedResult r;
    r.seed = seed;
    r.target_id = pick.id;
    r.snapshots = res.snapshots;
    r.source_miou = res.snapshots.front().second;
    r.adapted_miou = res.snapshots.back().second;
    spdlog::info("{} seed {}: target {} mIoU {:.4f} -> {:.4f}", label, seed, pick.id, r.source_miou,
                 r.adapted_miou);
    if (run_dir) {
      const fs::path dir = *run_dir / (label + "_seed" + std::to_string(seed));
      fs::create_directories(dir);
      std::ofstream(dir / "manifest.json") << res.manifest.to_json().dump(2) << "\n";
      std::ofstream csv(dir / "metrics.csv");
      write_metrics_csv(csv, res.metrics);
      save_checkpoint(dir / "student.idmc", res.student, &res.teacher);
    }
    v.seeds.push_back(std::move(r));
  }
  return v;
}

namespace {

std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

std::vector<std::pair<std::string, TrainConfig>> sweep_variants(const TrainConfig& base, const SweepSpec& sweep) {
  if (sweep.parameter.empty()) return {{"default", base}};
  if (sweep.parameter == "ablation") return ablation_variants(base);
  std::vector<std::pair<std::string, TrainConfig>> out;
  for (const double v : sweep.values) {
    TrainConfig c = base;
    const auto& p = sweep.parameter;
    if (p == "lambda_ent") {
      c.selection.lambda_ent = v;
    } else if (p == "lambda_sim") {
      c.selection.lambda_sim = v;
    } else if (p == "k") {
      c.selection.k = static_cast<int>(std::lround(v));
    } else if (p == "patches") {
      c.patches = static_cast<int>(std::lround(v));
    } else if (p == "tau") {
      c.tau = v;
    } else if (p == "mix_ratio") {
      c.mix_ratio = v;
    } else {
      throw ConfigError("unknown sweep parameter '" + p + "'");
    }
    out.emplace_back(p + "=" + format_value(v), c);
  }
  return out;
}

std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& base) {
  std::vector<std::pair<std::string, TrainConfig>> out;
  for (int mask = 0; mask < 8; ++mask) {
    TrainConfig c = base;
    c.components = {(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
    std::string label;
    if (c.components.ssm) label += "ssm+";
    if (c.components.patchmix) label += "patchmix+";
    if (c.components.pim) label += "pim+";
    label = label.empty() ? "baseline" : label.substr(0, label.size() - 1);
    out.emplace_back(label, c);
  }
  return out;
}

void write_results_csv(const fs::path& path, std::span<const VariantResult> results) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << "variant,seed,target_id,source_miou,adapted_miou,gain\n";
  os << std::setprecision(6);
  for (const auto& v : results) {
    for (const auto& r : v.seeds) {
      os << v.label << ',' << r.seed << ',' << r.target_id << ',' << r.source_miou << ',' << r.adapted_miou << ','
         << r.adapted_miou - r.source_miou << '\n';
    }
    os << v.label << ",mean,," << v.mean_source() << ',' << v.mean_adapted() << ','
       << v.mean_adapted() - v.mean_source() << '\n';
  }
}

void write_convergence_svg(const fs::path& path, std::span<const VariantResult> results) {
  constexpr double W = 640, H = 400, L = 60, R = 160, T = 20, B = 50;
  int max_it = 1;
  double lo = 1.0, hi = 0.0;
  for (const auto& v : results) {
    for (const auto& s : v.seeds) {
      for (const auto& [it, m] : s.snapshots) {
        max_it = std::max(max_it, it);
        lo = std::min(lo, m);
        hi = std::max(hi, m);
      }
    }
  }
  if (hi <= lo) {
    lo = std::max(0.0, lo - 0.05);
    hi = std::min(1.0, hi + 0.05);
  }
  auto px = [&](int it) { return L + (W - L - R) * it / max_it; };
  auto py = [&](double m) { return H - B - (H - T - B) * (m - lo) / (hi - lo); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                 "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double m = lo + (hi - lo) * k / 4;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(m) + 4 << "\" text-anchor=\"end\">" << m << "</text>\n";
    const int it = max_it * k / 4;
    os << "<text x=\"" << px(it) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << it << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">iteration</text>\n";
  os << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 14 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\">target mIoU</text>\n";
  int line = 0;
  for (const auto& v : results) {
    for (const auto& s : v.seeds) {
      const char* color = colors[line % 8];
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& [it, m] : s.snapshots) os << px(it) << ',' << py(m) << ' ';
      os << "\"/>\n";
      os << "<text x=\"" << W - R + 8 << "\" y=\"" << T + 14 * line + 10 << "\" fill=\"" << color << "\">"
         << v.label << " s" << s.seed << "</text>\n";
      ++line;
    }
  }
  os << "</svg>\n";
}

int run_experiment(const fs::path& config_path, const fs::path& out_dir) {
  const ExperimentConfig cfg = load_experiment_config(config_path);
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "config.json") << to_json(cfg).dump(2) << "\n";

  spdlog::info("generating benchmark data");
  const Benchmark bench = make_benchmark(cfg.data);
  write_dataset(out_dir / "data" / "source", bench.source, cfg.data.scene.num_classes);
  write_dataset(out_dir / "data" / "target_pool", bench.target_pool, cfg.data.scene.num_classes);
  write_dataset(out_dir / "data" / "target_test", bench.target_test, cfg.data.scene.num_classes);

  const fs::path ckpt = out_dir / "source.idmc";
  ModelState source_model;
  TrainConfig pre = cfg.train;
  pre.seed = cfg.pretrain_seed;
  spdlog::info("pretraining on {} source images for {} iterations", bench.source.size(), pre.source_iters);
  source_model = pretrain_source(bench.source, cfg.arch, pre).model;
  save_checkpoint(ckpt, source_model);
  const auto src_report = evaluate_model(source_model, bench.source);
  const auto tgt_report = evaluate_model(source_model, bench.target_test);
  spdlog::info("source model: source mIoU {:.4f}, target mIoU {:.4f}", src_report.miou, tgt_report.miou);
  std::ofstream(out_dir / "source_eval.json")
      << nlohmann::json{{"source_miou", src_report.miou}, {"target_miou", tgt_report.miou}}.dump(2) << "\n";

  std::vector<VariantResult> results;
  for (const auto& [label, train] : sweep_variants(cfg.train, cfg.sweep)) {
    results.push_back(run_variant(label, source_model, bench, train, cfg.adapt_seeds, out_dir / "runs"));
  }
  write_results_csv(out_dir / "results.csv", results);
  if (cfg.plot) write_convergence_svg(out_dir / "convergence.svg", results);
  for (const auto& v : results) {
    spdlog::info("{}: mean target mIoU {:.4f} (source-only {:.4f})", v.label, v.mean_adapted(), v.mean_source());
  }
  return 0;
}

}  // namespace idm
