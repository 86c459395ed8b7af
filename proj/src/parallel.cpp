#include "simprop/parallel.hpp"

#include <cstdlib>
#include <string>

#include "simprop/tensor.hpp"

namespace simprop {

int resolve_threads(int requested) {
  if (const char* env = std::getenv("SIMPROP_THREADS"); env && *env) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError(std::string("SIMPROP_THREADS must be a positive integer, got '") + env + "'");
  }
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace simprop
