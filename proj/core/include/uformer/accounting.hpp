#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "uformer/model.hpp"

namespace uformer {

// Closed-form parameter and multiply-accumulate counts. One MAC is one
// multiply-add; normalization, softmax, activations, bias and residual adds
// are not counted.

struct CostRow {
  std::string name;
  std::string group;  // stage the row belongs to, e.g. "encoder.1"
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct CostReport {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<CostRow> rows;
  std::vector<std::string> assumptions;

  std::int64_t total_params() const;
  std::int64_t total_macs() const;
  /// Rows summed per group, in first-appearance order.
  std::vector<CostRow> group_totals() const;
};

/// Reference resolution used when only parameter counts are requested.
inline constexpr std::int64_t kReferenceExtent = 256;

CostReport count_params(const UformerConfig& config);
CostReport count_macs(const UformerConfig& config, std::int64_t height, std::int64_t width);

std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias);
std::int64_t conv_params(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t groups = 1);
std::int64_t conv_macs(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t out_h, std::int64_t out_w,
                       std::int64_t groups = 1);

/// Q, K, V and output projections over hw tokens: 4 * hw * C^2.
std::int64_t wmsa_projection_macs(std::int64_t hw, std::int64_t channels);
/// QK^T and AV inside M x M windows: 2 * hw * M^2 * C.
std::int64_t wmsa_window_macs(std::int64_t hw, std::int64_t window, std::int64_t channels);
/// Full W-MSA term on an h x w map.
std::int64_t wmsa_macs(std::int64_t h, std::int64_t w, std::int64_t window, std::int64_t channels);
/// Same layer with one window spanning the whole map: 4 hw C^2 + 2 (hw)^2 C.
std::int64_t global_attention_macs(std::int64_t h, std::int64_t w, std::int64_t channels);

void write_csv(std::ostream& out, const CostReport& report);
void print_table(std::ostream& out, const CostReport& report);

}  // namespace uformer
