#pragma once

#include <filesystem>
#include <string>

#include "simprop/model.hpp"
#include "simprop/rng.hpp"

namespace simprop::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

/// Small architecture for fast tests (32 x 32 input, 4 x 4 features).
inline ModelConfig tiny_config(int input_size = 32) {
  ModelConfig c;
  c.input_size = input_size;
  c.feature_channels = 8;
  c.fusion_channels = 16;
  c.decoder_channels = 8;
  c.encoder_channels = {4, 8, 8};
  c.aspp_rates = {1, 2};
  return c;
}

inline bool params_equal(const ModelParams& a, const ModelParams& b) {
  std::vector<const Tensor*> xs;
  visit_params(a, [&](const std::string&, const Tensor& t) { xs.push_back(&t); });
  std::size_t i = 0;
  bool eq = true;
  visit_params(b, [&](const std::string&, const Tensor& t) {
    if (i >= xs.size() || !(*xs[i] == t)) eq = false;
    ++i;
  });
  return eq && i == xs.size();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("simprop_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace simprop::testing
