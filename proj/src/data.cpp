#include "simprop/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "simprop/parallel.hpp"

namespace simprop {

namespace fs = std::filesystem;

namespace {

constexpr int kMaxPlacementRetries = 200;

std::string format_float(float v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

float parse_float(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const float v = std::stof(s, &pos);
    if (pos == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError("manifest: bad value for " + key + ": '" + s + "'");
}

int parse_int(const std::string& s, const std::string& key) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ValidationError("bad integer for " + key + ": '" + s + "'");
  }
  return v;
}

bool inside_shape(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::kDisk:
      return u * u + v * v <= 1.0;
    case ShapeKind::kSquare:
      return std::abs(u) <= 0.7 && std::abs(v) <= 0.7;
    case ShapeKind::kTriangle: {
      // equilateral, circumradius 1, inradius 0.5
      for (double deg : {270.0, 30.0, 150.0}) {
        const double a = deg * std::numbers::pi / 180.0;
        if (u * std::cos(a) + v * std::sin(a) > 0.5) return false;
      }
      return true;
    }
    case ShapeKind::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case ShapeKind::kCross:
      return (std::abs(u) <= 0.95 && std::abs(v) <= 0.32) || (std::abs(v) <= 0.95 && std::abs(u) <= 0.32);
  }
  return false;
}

// Box blur with clamped borders, one channel.
void box_blur(std::vector<float>& plane, int size, int radius) {
  if (radius <= 0) return;
  std::vector<float> tmp(plane.size());
  const float inv = 1.0f / static_cast<float>(2 * radius + 1);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float s = 0.0f;
      for (int d = -radius; d <= radius; ++d) s += plane[static_cast<std::size_t>(y * size + std::clamp(x + d, 0, size - 1))];
      tmp[static_cast<std::size_t>(y * size + x)] = s * inv;
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float s = 0.0f;
      for (int d = -radius; d <= radius; ++d) s += tmp[static_cast<std::size_t>(std::clamp(y + d, 0, size - 1) * size + x)];
      plane[static_cast<std::size_t>(y * size + x)] = s * inv;
    }
  }
}

std::array<float, 3> class_tint(std::uint64_t seed, int class_id) {
  Rng rng(mix_seed(seed ^ 0x7A1C0FFEEull, static_cast<std::uint64_t>(class_id)));
  return {static_cast<float>(rng.uniform(0.2, 0.8)), static_cast<float>(rng.uniform(0.2, 0.8)),
          static_cast<float>(rng.uniform(0.2, 0.8))};
}

std::string sample_stem(int sample_id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", sample_id);
  return buf;
}

// PNM header: magic, width, height, maxval; '#' comments allowed.
struct PnmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& in, const fs::path& path) {
  PnmHeader h;
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    if (t.empty()) throw ValidationError("malformed PNM header in " + path.string());
    return t;
  };
  h.magic = token();
  h.width = parse_int(token(), "PNM width");
  h.height = parse_int(token(), "PNM height");
  h.maxval = parse_int(token(), "PNM maxval");
  if (h.width <= 0 || h.height <= 0 || h.maxval != 255) {
    throw ValidationError("unsupported PNM geometry or maxval in " + path.string());
  }
  return h;
}

std::vector<unsigned char> read_exact(std::istream& in, std::size_t n, const fs::path& path) {
  std::vector<unsigned char> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw ValidationError("truncated pixel data in " + path.string());
  return buf;
}

void write_file(const fs::path& path, const std::string& header, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << header;
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("write failed for " + path.string());
}

}  // namespace

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kCross: return "cross";
  }
  return "unknown";
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_int(item, "integer list"));
  }
  return out;
}

void SyntheticConfig::validate() const {
  if (image_size < 8) throw ValidationError("image_size must be at least 8");
  if (n_classes < 2) throw ValidationError("n_classes must be at least 2");
  if (samples_per_class < 2) throw ValidationError("samples_per_class must be at least 2");
  std::vector<int> all = train_classes;
  all.insert(all.end(), test_classes.begin(), test_classes.end());
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
    throw ValidationError("train and test classes must be disjoint");
  }
  if (static_cast<int>(all.size()) != n_classes || all.front() != 0 || all.back() != n_classes - 1) {
    throw ValidationError("train and test classes must together cover every class id 0.." +
                          std::to_string(n_classes - 1));
  }
  if (!(min_radius > 0.0f) || max_radius < min_radius || max_radius >= 0.5f) {
    throw ValidationError("object radius range must satisfy 0 < min <= max < 0.5");
  }
  if (bg_noise < 0.0f || fg_noise < 0.0f || bg_blur_radius < 0) throw ValidationError("noise parameters must be >= 0");
}

std::pair<std::vector<int>, std::vector<int>> SyntheticConfig::fold_split(int n_classes, int n_test, int fold) {
  if (n_test < 1 || n_test >= n_classes) throw ValidationError("test class count must be in [1, n_classes)");
  if (fold < 0) throw ValidationError("fold must be >= 0");
  std::vector<int> test, train;
  for (int i = 0; i < n_test; ++i) test.push_back((fold * n_test + i) % n_classes);
  std::sort(test.begin(), test.end());
  test.erase(std::unique(test.begin(), test.end()), test.end());
  for (int c = 0; c < n_classes; ++c) {
    if (!std::binary_search(test.begin(), test.end(), c)) train.push_back(c);
  }
  return {train, test};
}

ImageSample render_sample(const SyntheticConfig& cfg, std::uint64_t seed, int class_id, int sample_id) {
  const int n = cfg.image_size;
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(sample_id)));

  std::array<float, 3> tint{};
  if (cfg.correlated_bg) {
    tint = class_tint(seed, class_id);
    for (float& t : tint) t = std::clamp(t + static_cast<float>(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
  } else {
    for (float& t : tint) t = static_cast<float>(rng.uniform(0.25, 0.75));
  }
  std::array<float, 3> color{};
  for (int attempt = 0;; ++attempt) {
    float dist = 0.0f;
    for (int c = 0; c < 3; ++c) {
      color[static_cast<std::size_t>(c)] = static_cast<float>(rng.uniform());
      dist += std::abs(color[static_cast<std::size_t>(c)] - tint[static_cast<std::size_t>(c)]);
    }
    if (dist >= 0.3f || attempt >= kMaxPlacementRetries) break;
  }

  ImageSample s;
  s.class_id = class_id;
  s.sample_id = sample_id;
  s.image = Tensor({3, n, n});
  s.mask = Tensor({n, n});
  const ShapeKind kind = cfg.shape_of(class_id);
  bool placed = false;
  for (int attempt = 0; attempt < kMaxPlacementRetries && !placed; ++attempt) {
    const double r = rng.uniform(cfg.min_radius, cfg.max_radius) * n;
    const double lo = r + 1.0, hi = n - r - 1.0;
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (hi <= lo) continue;
    const double cx = rng.uniform(lo, hi), cy = rng.uniform(lo, hi);
    const double ct = std::cos(theta), st = std::sin(theta);
    double area = 0.0;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (dx * ct + dy * st) / r, v = (-dx * st + dy * ct) / r;
        const bool in = inside_shape(kind, u, v);
        s.mask[static_cast<std::size_t>(y * n + x)] = in ? 1.0f : 0.0f;
        area += in;
      }
    }
    placed = area >= 1.0 && area < static_cast<double>(n) * n;
  }
  if (!placed) {
    throw ValidationError("could not place a " + shape_name(kind) + " in a " + std::to_string(n) + "px image");
  }

  const std::size_t hw = static_cast<std::size_t>(n) * n;
  for (int c = 0; c < 3; ++c) {
    std::vector<float> bg(hw);
    for (float& v : bg) v = static_cast<float>(rng.uniform(-0.5, 0.5)) * cfg.bg_noise;
    box_blur(bg, n, cfg.bg_blur_radius);
    float* dst = s.image.ptr() + c * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const float fg = color[static_cast<std::size_t>(c)] + static_cast<float>(rng.uniform(-0.5, 0.5)) * cfg.fg_noise;
      const float value = s.mask[i] > 0.5f ? fg : tint[static_cast<std::size_t>(c)] + bg[i];
      dst[i] = std::clamp(value, 0.0f, 1.0f);
    }
  }
  // Quantize to what the 8-bit files store so in-memory and on-disk samples agree.
  for (float& v : s.image.data()) v = std::round(v * 255.0f) / 255.0f;
  return s;
}

// --- manifest --------------------------------------------------------------------

const std::string* DatasetManifest::find(const std::string& key) const {
  for (const auto& [k, v] : header) {
    if (k == key) return &v;
  }
  return nullptr;
}

SyntheticConfig DatasetManifest::config() const {
  auto get = [&](const std::string& key) -> const std::string& {
    const std::string* v = find(key);
    if (!v) throw ValidationError("manifest header lacks '" + key + "'");
    return *v;
  };
  SyntheticConfig c;
  c.image_size = parse_int(get("image_size"), "image_size");
  c.n_classes = parse_int(get("n_classes"), "n_classes");
  c.samples_per_class = parse_int(get("samples_per_class"), "samples_per_class");
  c.train_classes = parse_ints(get("train_classes"));
  c.test_classes = parse_ints(get("test_classes"));
  c.bg_noise = parse_float(get("bg_noise"), "bg_noise");
  c.bg_blur_radius = parse_int(get("bg_blur_radius"), "bg_blur_radius");
  c.fg_noise = parse_float(get("fg_noise"), "fg_noise");
  c.min_radius = parse_float(get("min_radius"), "min_radius");
  c.max_radius = parse_float(get("max_radius"), "max_radius");
  c.correlated_bg = get("correlated_bg") == "1";
  return c;
}

DatasetManifest generate_dataset(const SyntheticConfig& cfg, std::uint64_t seed, const fs::path& out_dir,
                                 int threads) {
  cfg.validate();
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");

  DatasetManifest m;
  m.seed = seed;
  m.root = out_dir;
  m.header = {
      {"format", "simprop-synthetic-v1"},
      {"seed", std::to_string(seed)},
      {"image_size", std::to_string(cfg.image_size)},
      {"n_classes", std::to_string(cfg.n_classes)},
      {"samples_per_class", std::to_string(cfg.samples_per_class)},
      {"train_classes", join_ints(cfg.train_classes)},
      {"test_classes", join_ints(cfg.test_classes)},
      {"bg_noise", format_float(cfg.bg_noise)},
      {"bg_blur_radius", std::to_string(cfg.bg_blur_radius)},
      {"fg_noise", format_float(cfg.fg_noise)},
      {"min_radius", format_float(cfg.min_radius)},
      {"max_radius", format_float(cfg.max_radius)},
      {"correlated_bg", cfg.correlated_bg ? "1" : "0"},
  };
  const int total = cfg.n_classes * cfg.samples_per_class;
  for (int id = 0; id < total; ++id) {
    const std::string stem = sample_stem(id);
    m.records.push_back({id, id / cfg.samples_per_class, "images/" + stem + ".ppm", "masks/" + stem + ".pgm"});
  }
  parallel_for(m.records.size(), threads, [&](std::size_t i) {
    const ManifestRecord& r = m.records[i];
    const ImageSample s = render_sample(cfg, seed, r.class_id, r.sample_id);
    save_sample(s, out_dir / r.image_path, out_dir / r.mask_path);
  });
  write_manifest(m, out_dir / "manifest.txt");
  return m;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ostringstream os;
  for (const auto& [k, v] : manifest.header) os << k << '=' << v << '\n';
  os << '\n';
  for (const ManifestRecord& r : manifest.records) {
    os << r.sample_id << '\t' << r.class_id << '\t' << r.image_path << '\t' << r.mask_path << '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write manifest " + path.string());
  out << os.str();
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  bool in_header = true;
  std::vector<int> seen;
  while (std::getline(in, line)) {
    if (in_header) {
      if (line.empty()) {
        in_header = false;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ValidationError("manifest header line without '=': " + line);
      m.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4) throw ValidationError("manifest record needs 4 tab-separated fields: " + line);
    ManifestRecord r{parse_int(fields[0], "sample_id"), parse_int(fields[1], "class_id"), fields[2], fields[3]};
    seen.push_back(r.sample_id);
    m.records.push_back(std::move(r));
  }
  if (in_header) throw ValidationError("manifest " + path.string() + " has no record section");
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    throw ValidationError("manifest contains duplicate sample ids");
  }
  if (const std::string* s = m.find("seed")) m.seed = std::stoull(*s);
  return m;
}

// --- dataset -----------------------------------------------------------------------

Dataset::Dataset(DatasetManifest manifest, int threads) : manifest_(std::move(manifest)) {
  samples_.resize(manifest_.records.size());
  parallel_for(samples_.size(), threads, [&](std::size_t i) {
    const ManifestRecord& r = manifest_.records[i];
    const fs::path img = manifest_.root / r.image_path;
    const fs::path msk = manifest_.root / r.mask_path;
    if (!fs::exists(img) || !fs::exists(msk)) {
      throw ValidationError("manifest entry " + std::to_string(r.sample_id) + " points to a missing file");
    }
    samples_[i] = load_sample(img, msk);
    samples_[i].class_id = r.class_id;
    samples_[i].sample_id = r.sample_id;
  });
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const int c = samples_[i].class_id;
    if (c < 0) throw ValidationError("negative class id in manifest");
    if (static_cast<std::size_t>(c) >= by_class_.size()) by_class_.resize(static_cast<std::size_t>(c) + 1);
    by_class_[static_cast<std::size_t>(c)].push_back(i);
    if (samples_[i].image.shape() != samples_.front().image.shape()) {
      throw ValidationError("dataset images differ in size");
    }
  }
}

const std::vector<std::size_t>& Dataset::class_indices(int class_id) const {
  static const std::vector<std::size_t> kEmpty;
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= by_class_.size()) return kEmpty;
  return by_class_[static_cast<std::size_t>(class_id)];
}

int Dataset::image_size() const { return samples_.empty() ? 0 : samples_.front().image.dim(1); }

Dataset load_dataset(const fs::path& manifest_path, int threads) {
  return Dataset(read_manifest(manifest_path), threads);
}

Episode sample_episode(const Dataset& data, const std::vector<int>& class_set, int k, Rng& rng) {
  if (class_set.empty()) throw ValidationError("sample_episode: empty class set");
  if (k < 1) throw ValidationError("sample_episode: k must be >= 1");
  const int cls = class_set[rng.below(class_set.size())];
  std::vector<std::size_t> pool = data.class_indices(cls);
  if (pool.size() < static_cast<std::size_t>(k) + 1) {
    throw ValidationError("class " + std::to_string(cls) + " has " + std::to_string(pool.size()) +
                          " samples, need " + std::to_string(k + 1));
  }
  // partial Fisher-Yates
  for (int i = 0; i <= k; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.below(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  Episode e;
  e.class_id = cls;
  e.query = data.samples()[pool[0]];
  for (int i = 1; i <= k; ++i) e.supports.push_back(data.samples()[pool[static_cast<std::size_t>(i)]]);
  return e;
}

bool ica_augment(Tensor& image, float switch_prob, Rng& rng) {
  if (switch_prob < 0.0f || switch_prob > 1.0f) throw ValidationError("switch probability must be in [0, 1]");
  require_rank(image, 3, "ica_augment image");
  if (image.dim(0) != 3) throw ValidationError("ica_augment expects 3 channels");
  // draw unconditionally so the stream advances identically for any probability
  const bool fire = rng.uniform() < static_cast<double>(switch_prob);
  if (!fire) return false;
  const std::size_t hw = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  float* r = image.ptr();
  float* g = r + hw;
  float* b = g + hw;
  for (std::size_t i = 0; i < hw; ++i) {
    const float m = (r[i] + g[i] + b[i]) / 3.0f;
    r[i] = g[i] = b[i] = m;
  }
  return true;
}

float switch_prob_schedule(int epoch, float p0, int half_life) {
  if (epoch < 0) throw ValidationError("epoch must be >= 0");
  if (half_life < 1) throw ValidationError("half_life must be >= 1");
  return static_cast<float>(p0 * std::exp2(-static_cast<double>(epoch) / half_life));
}

// --- PPM / PGM -------------------------------------------------------------------------

void save_image_ppm(const Tensor& image, const fs::path& path) {
  require_rank(image, 3, "PPM image");
  if (image.dim(0) != 3) throw ValidationError("PPM image must have 3 channels");
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> bytes(hw * 3);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * hw + i], 0.0f, 1.0f);
      bytes[i * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  }
  write_file(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", bytes);
}

Tensor load_image_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  const PnmHeader h = read_pnm_header(in, path);
  if (h.magic != "P6") throw ValidationError(path.string() + " is not a binary PPM (P6)");
  const std::size_t hw = static_cast<std::size_t>(h.width) * h.height;
  const auto bytes = read_exact(in, hw * 3, path);
  Tensor img({3, h.height, h.width});
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img[c * hw + i] = static_cast<float>(bytes[i * 3 + c]) / 255.0f;
  }
  return img;
}

void save_mask_pgm(const Tensor& mask, const fs::path& path) {
  require_rank(mask, 2, "PGM mask");
  std::vector<unsigned char> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0f && mask[i] != 1.0f) throw ValidationError("mask values must be 0 or 1");
    bytes[i] = mask[i] == 1.0f ? 255 : 0;
  }
  write_file(path, "P5\n" + std::to_string(mask.dim(1)) + " " + std::to_string(mask.dim(0)) + "\n255\n", bytes);
}

Tensor load_mask_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  const PnmHeader h = read_pnm_header(in, path);
  if (h.magic != "P5") throw ValidationError(path.string() + " is not a binary PGM (P5)");
  const auto bytes = read_exact(in, static_cast<std::size_t>(h.width) * h.height, path);
  Tensor mask({h.height, h.width});
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] != 0 && bytes[i] != 255) {
      throw ValidationError(path.string() + ": mask value " + std::to_string(bytes[i]) + " is not 0 or 255");
    }
    mask[i] = bytes[i] == 255 ? 1.0f : 0.0f;
  }
  return mask;
}

void save_sample(const ImageSample& sample, const fs::path& image_path, const fs::path& mask_path) {
  save_image_ppm(sample.image, image_path);
  save_mask_pgm(sample.mask, mask_path);
}

ImageSample load_sample(const fs::path& image_path, const fs::path& mask_path) {
  ImageSample s;
  s.image = load_image_ppm(image_path);
  s.mask = load_mask_pgm(mask_path);
  if (s.mask.dim(0) != s.image.dim(1) || s.mask.dim(1) != s.image.dim(2)) {
    throw ValidationError("image " + image_path.string() + " and mask " + mask_path.string() + " differ in size");
  }
  return s;
}

}  // namespace simprop
