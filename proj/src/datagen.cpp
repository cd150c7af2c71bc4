#include "idm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include <nlohmann/json.hpp>

#include "idm/image_io.hpp"

namespace idm {
namespace fs = std::filesystem;

void validate_sample(const LabeledSample& sample, int num_classes) {
  if (sample.image.height != sample.label.height || sample.image.width != sample.label.width) {
    throw ContractError("sample '" + sample.id + "': image and label sizes differ");
  }
  for (const auto v : sample.label.data) {
    if (v != kIgnoreLabel && v >= num_classes) {
      throw ContractError("sample '" + sample.id + "': label value out of range");
    }
  }
}

void SceneSpec::validate() const {
  if (width < 16 || height < 16) throw ConfigError("SceneSpec: width and height must be >= 16");
  if (num_classes < 2 || num_classes > kMaxClasses) {
    throw ConfigError("SceneSpec: num_classes must be in [2, 32]");
  }
  if (shapes_per_image < 0) throw ConfigError("SceneSpec: shapes_per_image must be >= 0");
}

void DomainShift::validate() const {
  for (const float s : std_scale) {
    if (!(s > 0.0f)) throw ConfigError("DomainShift: std_scale must be positive");
  }
  if (!(texture_noise >= 0.0f)) throw ConfigError("DomainShift: texture_noise must be >= 0");
}

bool DomainShift::is_identity() const {
  return mean_offset == std::array<float, 3>{0, 0, 0} && std_scale == std::array<float, 3>{1, 1, 1} &&
         texture_noise == 0.0f;
}

namespace {

using Color = std::array<float, 3>;

Color hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(i) % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

enum class ShapeKind { kRect, kEllipse, kStripes };

// Class identity = (shape kind, hue). Class 0 is the textured background.
ShapeKind kind_of(int cls) { return static_cast<ShapeKind>((cls - 1) % 3); }


struct Shape {
  int cls;
  double cx, cy, half_w, half_h;
  double stripe_angle, stripe_period;
  Color color;
};

bool covers(const Shape& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (kind_of(s.cls)) {
    case ShapeKind::kRect:
      return std::abs(dx) <= s.half_w && std::abs(dy) <= s.half_h;
    case ShapeKind::kEllipse:
      return (dx * dx) / (s.half_w * s.half_w) + (dy * dy) / (s.half_h * s.half_h) <= 1.0;
    case ShapeKind::kStripes: {
      if (std::abs(dx) > s.half_w || std::abs(dy) > s.half_h) return false;
      const double u = dx * std::cos(s.stripe_angle) + dy * std::sin(s.stripe_angle);
      const double phase = u / s.stripe_period - std::floor(u / s.stripe_period);
      return phase < 0.55;
    }
  }
  return false;
}

LabeledSample render_scene(const SceneSpec& spec, int index, const std::string& prefix) {
  Rng rng(mix_seed(spec.rng_seed, static_cast<std::uint64_t>(index)));
  std::normal_distribution<double> jitter(0.0, 1.0);
  const int w = spec.width, h = spec.height, C = spec.num_classes;

  // Background: muted two-tone sinusoidal texture.
  const double bg_hue = uniform01(rng);
  const Color bg_a = hsv_to_rgb(bg_hue, 0.15, 0.45);
  const Color bg_b = hsv_to_rgb(bg_hue + 0.1, 0.2, 0.6);
  const double fx = 0.05 + 0.15 * uniform01(rng), fy = 0.05 + 0.15 * uniform01(rng);
  const double phase = 2.0 * std::numbers::pi * uniform01(rng);

  std::vector<Shape> shapes;
  shapes.reserve(spec.shapes_per_image);
  for (int k = 0; k < spec.shapes_per_image; ++k) {
    Shape s{};
    // The last (topmost) shape cycles through the classes so that a corpus of
    // n >= C scenes contains every class.
    if (k == spec.shapes_per_image - 1) {
      s.cls = 1 + index % (C - 1);
    } else {
      s.cls = 1 + static_cast<int>(uniform01(rng) * (C - 1));
    }
    s.half_w = (0.08 + 0.16 * uniform01(rng)) * w;
    s.half_h = (0.08 + 0.16 * uniform01(rng)) * h;
    s.cx = uniform01(rng) * w;
    s.cy = uniform01(rng) * h;
    s.stripe_angle = std::numbers::pi * uniform01(rng);
    s.stripe_period = 4.0 + 3.0 * uniform01(rng);
    Color c = class_color(s.cls, C);
    for (auto& v : c) v = std::clamp(static_cast<float>(v + 0.03 * jitter(rng)), 0.0f, 1.0f);
    s.color = c;
    shapes.push_back(s);
  }

  LabeledSample out;
  out.id = prefix + "_" + std::to_string(index);
  out.image = ImageTensor(h, w, 3);
  out.label = LabelMap(h, w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      int top = -1;
      for (int k = static_cast<int>(shapes.size()) - 1; k >= 0; --k) {
        if (covers(shapes[k], px, py)) {
          top = k;
          break;
        }
      }
      const double grain = 0.02 * jitter(rng);
      Color c;
      if (top < 0) {
        const double t = 0.5 + 0.5 * std::sin(fx * px + fy * py + phase);
        for (int ch = 0; ch < 3; ++ch) c[ch] = static_cast<float>(bg_a[ch] * (1 - t) + bg_b[ch] * t);
      } else {
        c = shapes[top].color;
        out.label.at(y, x) = static_cast<std::uint8_t>(shapes[top].cls);
      }
      for (int ch = 0; ch < 3; ++ch) {
        out.image.at(y, x, ch) = std::clamp(static_cast<float>(c[ch] + grain), 0.0f, 1.0f);
      }
    }
  }
  return out;
}

}  // namespace

std::array<float, 3> class_color(int cls, int num_classes) {
  const double hue = static_cast<double>(cls - 1) / (num_classes - 1);
  return hsv_to_rgb(hue, 0.75, 0.9);
}

std::vector<LabeledSample> generate_scenes(const SceneSpec& spec, int n, const std::string& id_prefix,
                                           int first_index) {
  spec.validate();
  if (n < 1) throw ConfigError("generate_scenes: n must be >= 1");
  std::vector<LabeledSample> out(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) out[i] = render_scene(spec, first_index + i, id_prefix);
  return out;
}

std::vector<LabeledSample> generate_source(const SceneSpec& spec, int n) {
  return generate_scenes(spec, n, "src", 0);
}

LabeledSample apply_domain_shift(const LabeledSample& sample, const DomainShift& shift,
                                 std::uint64_t seed) {
  shift.validate();
  if (sample.image.channels != 3) throw ContractError("apply_domain_shift: expected 3 channels");
  LabeledSample out = sample;
  Rng rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  const std::size_t px = sample.image.pixels();
  for (std::size_t i = 0; i < px; ++i) {
    for (int c = 0; c < 3; ++c) {
      float v = shift.std_scale[c] * sample.image.data[i * 3 + c] + shift.mean_offset[c];
      if (shift.texture_noise > 0.0f) v += shift.texture_noise * noise(rng);
      out.image.data[i * 3 + c] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

ClassMap identity_class_map(int num_classes) {
  ClassMap m;
  for (int c = 0; c < num_classes; ++c) m[c] = c;
  return m;
}

std::vector<LabeledSample> ingest_folder(const fs::path& root, const ClassMap& class_map) {
  std::vector<LabeledSample> out;
  const fs::path images = root / "images";
  if (!fs::exists(images)) return out;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::array<std::uint8_t, 256> lut;
  lut.fill(kIgnoreLabel);
  for (const auto& [raw, cls] : class_map) {
    if (raw < 0 || raw > 255 || cls < 0 || cls >= kMaxClasses) {
      throw ConfigError("class map entry out of range");
    }
    lut[raw] = static_cast<std::uint8_t>(cls);
  }

  for (const auto& file : files) {
    const std::string id = file.stem().string();
    const fs::path label_path = root / "labels" / (id + ".png");
    if (!fs::exists(label_path)) throw IngestError("missing label file: " + label_path.string());
    LabeledSample s;
    s.id = id;
    s.image = read_image(file);
    LabelMap raw = read_label_png(label_path);
    if (raw.height != s.image.height || raw.width != s.image.width) {
      throw IngestError("size mismatch between " + file.string() + " and " + label_path.string());
    }
    for (auto& v : raw.data) v = lut[v];
    s.label = std::move(raw);
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const fs::path& root, const std::vector<LabeledSample>& samples, int num_classes) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["num_classes"] = num_classes;
  manifest["height"] = samples.empty() ? 0 : samples.front().image.height;
  manifest["width"] = samples.empty() ? 0 : samples.front().image.width;
  auto ids = nlohmann::json::array();
  for (const auto& s : samples) {
    validate_sample(s, num_classes);
    write_png(root / "images" / (s.id + ".png"), s.image);
    write_label_png(root / "labels" / (s.id + ".png"), s.label);
    ids.push_back(s.id);
  }
  manifest["ids"] = ids;
  std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
}

DatasetManifest read_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw IngestError("missing manifest: " + (root / "manifest.json").string());
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.format_version = j.at("format_version").get<int>();
    m.num_classes = j.at("num_classes").get<int>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.ids = j.at("ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IngestError("malformed manifest in " + root.string() + ": " + e.what());
  }
  if (m.format_version != 1) throw IngestError("unsupported dataset format version");
  return m;
}

std::vector<LabeledSample> read_dataset(const fs::path& root) {
  const DatasetManifest m = read_manifest(root);
  auto samples = ingest_folder(root, identity_class_map(m.num_classes));
  std::set<std::string> listed(m.ids.begin(), m.ids.end());
  if (listed.size() != samples.size()) {
    throw IngestError(root.string() + ": manifest lists " + std::to_string(listed.size()) +
                      " ids but folder holds " + std::to_string(samples.size()));
  }
  for (const auto& s : samples) {
    if (!listed.count(s.id)) throw IngestError(root.string() + ": id not in manifest: " + s.id);
  }
  // Restore manifest order.
  std::map<std::string, std::size_t> order;
  for (std::size_t i = 0; i < m.ids.size(); ++i) order[m.ids[i]] = i;
  std::sort(samples.begin(), samples.end(),
            [&](const LabeledSample& a, const LabeledSample& b) { return order[a.id] < order[b.id]; });
  return samples;
}

}  // namespace idm
