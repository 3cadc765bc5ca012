#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "uformer/random.hpp"
#include "uformer/tensor.hpp"

namespace testing {

template <typename T>
uformer::Tensor<T> random_tensor(uformer::Shape shape, uformer::Rng& rng, double scale = 1.0,
                                 bool requires_grad = false) {
  std::vector<T> v(static_cast<std::size_t>(uformer::numel(shape)));
  for (auto& e : v) e = static_cast<T>(scale * (2.0 * rng.uniform() - 1.0));
  return uformer::Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
std::vector<double> to_doubles(std::span<const T> s) {
  return std::vector<double>(s.begin(), s.end());
}

/// Owning copy, safe to take from a temporary.
template <typename T>
std::vector<T> copy_data(const uformer::Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <typename T>
bool bitwise_equal(const uformer::Tensor<T>& a, const uformer::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) return false;
  return true;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("uformer_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
