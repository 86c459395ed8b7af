#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "simprop/rng.hpp"
#include "simprop/tensor.hpp"

namespace simprop {

enum class ShapeKind { kDisk, kSquare, kTriangle, kRing, kCross };

std::string shape_name(ShapeKind kind);

/// Synthetic benchmark: one shape class per class id, a single object on a
/// smoothed-noise background.
struct SyntheticConfig {
  int image_size = 64;
  int n_classes = 5;
  int samples_per_class = 200;
  std::vector<int> train_classes{2, 3, 4};
  std::vector<int> test_classes{0, 1};
  /// Peak-to-peak amplitude of the background noise before smoothing.
  float bg_noise = 0.6f;
  int bg_blur_radius = 2;
  /// Peak-to-peak amplitude of the per-pixel foreground noise.
  float fg_noise = 0.1f;
  /// Object circumradius as a fraction of the image size.
  float min_radius = 0.14f;
  float max_radius = 0.30f;
  /// Per-class background tints instead of per-sample ones.
  bool correlated_bg = false;

  ShapeKind shape_of(int class_id) const { return static_cast<ShapeKind>(class_id % 5); }
  void validate() const;

  /// Rotating split: fold f holds out classes {n_test*f, ..., n_test*f + n_test - 1} mod n_classes.
  static std::pair<std::vector<int>, std::vector<int>> fold_split(int n_classes, int n_test, int fold);
};

struct ImageSample {
  Tensor image;  // 3 x H x W in [0, 1]
  Tensor mask;   // H x W in {0, 1}
  int class_id = -1;
  int sample_id = -1;
};

struct Episode {
  ImageSample query;
  std::vector<ImageSample> supports;
  int class_id = -1;
};

struct ManifestRecord {
  int sample_id = 0;
  int class_id = 0;
  std::string image_path;  // relative to the manifest directory
  std::string mask_path;
};

struct DatasetManifest {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<ManifestRecord> records;
  std::uint64_t seed = 0;
  std::filesystem::path root;  // directory the relative paths resolve against

  const std::string* find(const std::string& key) const;
  /// Reconstructs the generating configuration from the header echo.
  SyntheticConfig config() const;
};

/// Renders one sample. Deterministic in (config, seed, sample_id).
ImageSample render_sample(const SyntheticConfig& cfg, std::uint64_t seed, int class_id, int sample_id);

/// Writes images/, masks/ and manifest.txt under out_dir.
DatasetManifest generate_dataset(const SyntheticConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir,
                                 int threads = 1);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// All samples of a manifest, loaded in memory and indexed by class.
class Dataset {
 public:
  explicit Dataset(DatasetManifest manifest, int threads = 1);

  const DatasetManifest& manifest() const { return manifest_; }
  const std::vector<ImageSample>& samples() const { return samples_; }
  /// Indices into samples() for a class; empty if unknown.
  const std::vector<std::size_t>& class_indices(int class_id) const;
  int image_size() const;

 private:
  DatasetManifest manifest_;
  std::vector<ImageSample> samples_;
  std::vector<std::vector<std::size_t>> by_class_;
};

Dataset load_dataset(const std::filesystem::path& manifest_path, int threads = 1);

/// Picks a class uniformly from class_set, then k + 1 distinct samples of it;
/// the first is the query.
Episode sample_episode(const Dataset& data, const std::vector<int>& class_set, int k, Rng& rng);

/// With probability switch_prob replaces every channel by the per-pixel
/// channel mean. Returns whether the switch fired.
bool ica_augment(Tensor& image, float switch_prob, Rng& rng);

/// p0 * 2^(-epoch / half_life)
float switch_prob_schedule(int epoch, float p0, int half_life);

// --- PPM / PGM -----------------------------------------------------------------

void save_image_ppm(const Tensor& image, const std::filesystem::path& path);
Tensor load_image_ppm(const std::filesystem::path& path);
void save_mask_pgm(const Tensor& mask, const std::filesystem::path& path);
Tensor load_mask_pgm(const std::filesystem::path& path);

void save_sample(const ImageSample& sample, const std::filesystem::path& image_path,
                 const std::filesystem::path& mask_path);
ImageSample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path);

std::string join_ints(const std::vector<int>& v);
std::vector<int> parse_ints(const std::string& s);

}  // namespace simprop
