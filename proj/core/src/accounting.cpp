#include "uformer/accounting.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <ostream>

#include "uformer/error.hpp"
#include "uformer/windowing.hpp"

namespace uformer {

std::int64_t CostReport::total_params() const {
  std::int64_t t = 0;
  for (const auto& r : rows) t += r.params;
  return t;
}

std::int64_t CostReport::total_macs() const {
  std::int64_t t = 0;
  for (const auto& r : rows) t += r.macs;
  return t;
}

std::vector<CostRow> CostReport::group_totals() const {
  std::vector<CostRow> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const CostRow& g) { return g.name == r.group; });
    if (it == out.end()) {
      out.push_back({r.group, r.group, 0, 0});
      it = out.end() - 1;
    }
    it->params += r.params;
    it->macs += r.macs;
  }
  return out;
}

std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias) { return in * out + (bias ? out : 0); }

std::int64_t conv_params(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t groups) {
  return out * (in / groups) * kernel * kernel + out;
}

std::int64_t conv_macs(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t out_h, std::int64_t out_w,
                       std::int64_t groups) {
  return out * (in / groups) * kernel * kernel * out_h * out_w;
}

std::int64_t wmsa_projection_macs(std::int64_t hw, std::int64_t channels) { return 4 * hw * channels * channels; }

std::int64_t wmsa_window_macs(std::int64_t hw, std::int64_t window, std::int64_t channels) {
  return 2 * hw * window * window * channels;
}

std::int64_t wmsa_macs(std::int64_t h, std::int64_t w, std::int64_t window, std::int64_t channels) {
  return wmsa_projection_macs(h * w, channels) + wmsa_window_macs(h * w, window, channels);
}

std::int64_t global_attention_macs(std::int64_t h, std::int64_t w, std::int64_t channels) {
  return wmsa_projection_macs(h * w, channels) + 2 * (h * w) * (h * w) * channels;
}

namespace {

struct BlockShape {
  std::int64_t dim = 0;
  std::int64_t heads = 1;
  bool modulator = false;
  SkipMode skip = SkipMode::concat;  // concat means no skip attention inside the block
  std::int64_t skip_channels = 0;
};

std::int64_t attention_params(std::int64_t dim, std::int64_t kv, std::int64_t heads, std::int64_t window) {
  const auto span = 2 * window - 1;
  return dim * dim + 2 * kv * dim + linear_params(dim, dim, true) + heads * span * span;
}

std::int64_t attention_macs(std::int64_t tokens, std::int64_t dim, std::int64_t kv, std::int64_t window) {
  return tokens * dim * dim + 2 * tokens * kv * dim + tokens * dim * dim + wmsa_window_macs(tokens, window, dim);
}

CostRow block_cost(const std::string& name, const std::string& group, const BlockShape& b, const UformerConfig& c,
                   std::int64_t h, std::int64_t w) {
  const auto m = c.window;
  const auto grid = make_window_grid(h, w, m);
  const auto padded_tokens = grid.padded_height() * grid.padded_width();
  const auto tokens = h * w;
  const auto hidden = b.dim * c.ffn_expansion;
  const auto kv = b.skip == SkipMode::concat_cross ? b.dim + b.skip_channels : b.dim;

  CostRow r{name, group, 0, 0};
  r.params += 4 * b.dim;  // norm1, norm2
  r.params += attention_params(b.dim, kv, b.heads, m);
  r.macs += attention_macs(padded_tokens, b.dim, kv, m);
  if (b.skip == SkipMode::concat_cross) r.params += 2 * kv;
  if (b.skip == SkipMode::cross) {
    r.params += 2 * b.dim + 2 * b.skip_channels + attention_params(b.dim, b.skip_channels, b.heads, m);
    r.macs += attention_macs(padded_tokens, b.dim, b.skip_channels, m);
  }
  r.params += linear_params(b.dim, hidden, true) + conv_params(hidden, hidden, 3, hidden) +
              linear_params(hidden, b.dim, true);
  r.macs += tokens * b.dim * hidden + conv_macs(hidden, hidden, 3, h, w, hidden) + tokens * hidden * b.dim;
  if (b.modulator) r.params += m * m * b.dim;
  return r;
}

std::int64_t ceil_half(std::int64_t v) { return (v + 1) / 2; }

}  // namespace

CostReport count_macs(const UformerConfig& config, std::int64_t height, std::int64_t width) {
  config.validate();
  if (height < config.min_extent() || width < config.min_extent()) {
    throw ConfigError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                      " is below the model minimum");
  }
  const auto k = config.stages;
  const auto dk = config.effective_head_dim();
  CostReport rep;
  rep.height = height;
  rep.width = width;

  std::vector<std::int64_t> hs{height}, ws{width};
  for (std::int64_t l = 0; l < k; ++l) {
    hs.push_back(ceil_half(hs.back()));
    ws.push_back(ceil_half(ws.back()));
  }
  auto hl = [&](std::int64_t l) { return hs[static_cast<std::size_t>(l)]; };
  auto wl = [&](std::int64_t l) { return ws[static_cast<std::size_t>(l)]; };

  rep.rows.push_back({"input_proj", "input_proj", conv_params(config.in_channels, config.base_channels, 3),
                      conv_macs(config.in_channels, config.base_channels, 3, height, width)});
  for (std::int64_t l = 0; l < k; ++l) {
    const auto group = "encoder." + std::to_string(l);
    const auto width_l = config.stage_channels(l);
    for (std::int64_t b = 0; b < config.encoder_depths[static_cast<std::size_t>(l)]; ++b) {
      rep.rows.push_back(block_cost(group + "." + std::to_string(b), group, {width_l, width_l / dk}, config, hl(l),
                                    wl(l)));
    }
    rep.rows.push_back({"downsample." + std::to_string(l), group, conv_params(width_l, 2 * width_l, 4),
                        conv_macs(width_l, 2 * width_l, 4, hl(l + 1), wl(l + 1))});
  }
  const auto bw = config.stage_channels(k);
  for (std::int64_t b = 0; b < config.bottleneck_depth; ++b) {
    rep.rows.push_back(
        block_cost("bottleneck." + std::to_string(b), "bottleneck", {bw, bw / dk}, config, hl(k), wl(k)));
  }
  for (std::int64_t l = k - 1; l >= 0; --l) {
    const auto group = "decoder." + std::to_string(l);
    const auto in = l == k - 1 ? bw : config.decoder_channels(l + 1);
    const auto out = config.stage_channels(l);
    // The transposed conv runs on the coarse grid; its extra row/column is cropped later.
    rep.rows.push_back({"upsample." + std::to_string(l), group, in * out * 4 + out, in * out * 4 * hl(l + 1) * wl(l + 1)});
    const auto dw = config.decoder_channels(l);
    for (std::int64_t b = 0; b < config.decoder_depths()[static_cast<std::size_t>(l)]; ++b) {
      BlockShape s{dw, dw / dk, config.use_modulator};
      if (b == 0 && config.skip_mode != SkipMode::concat) {
        s.skip = config.skip_mode;
        s.skip_channels = out;
      }
      rep.rows.push_back(block_cost(group + "." + std::to_string(b), group, s, config, hl(l), wl(l)));
    }
  }
  rep.rows.push_back({"output_proj", "output_proj", conv_params(config.decoder_channels(0), config.in_channels, 3),
                      conv_macs(config.decoder_channels(0), config.in_channels, 3, height, width)});

  rep.assumptions = {
      "1 MAC = one multiply-add; norms, softmax, activations, bias and residual adds excluded",
      "Q/K/V projections without bias, output projection with bias",
      "relative position bias: one (2M-1)^2 table per head",
      "LeFF expansion " + std::to_string(config.ffn_expansion) + ", 3x3 depth-wise conv with bias",
      "skip mode " + to_string(config.skip_mode) +
          (config.skip_mode == SkipMode::concat ? ": decoder stage l runs at width 2 * 2^l * C" : ""),
      std::string("modulators ") + (config.use_modulator ? "on every decoder block, M*M*C each" : "disabled"),
      "bottleneck depth " + std::to_string(config.bottleneck_depth) + " at width 2^K * C",
      "attention MACs counted over window-padded token grids",
      "resolution " + std::to_string(height) + "x" + std::to_string(width),
  };
  return rep;
}

CostReport count_params(const UformerConfig& config) {
  return count_macs(config, std::max(kReferenceExtent, config.min_extent()),
                    std::max(kReferenceExtent, config.min_extent()));
}

void write_csv(std::ostream& out, const CostReport& report) {
  out << "name,params,macs\n";
  for (const auto& r : report.rows) out << r.name << ',' << r.params << ',' << r.macs << '\n';
  out << "total," << report.total_params() << ',' << report.total_macs() << '\n';
}

void print_table(std::ostream& out, const CostReport& report) {
  std::size_t width = 5;
  for (const auto& r : report.rows) width = std::max(width, r.name.size());
  auto line = [&](const std::string& name, std::int64_t params, std::int64_t macs) {
    out << std::left << std::setw(static_cast<int>(width) + 2) << name << std::right << std::setw(14) << params
        << std::setw(18) << macs << '\n';
  };
  out << std::left << std::setw(static_cast<int>(width) + 2) << "layer" << std::right << std::setw(14) << "params"
      << std::setw(18) << "macs" << '\n';
  for (const auto& r : report.rows) line(r.name, r.params, r.macs);
  out << '\n';
  for (const auto& g : report.group_totals()) line(g.name, g.params, g.macs);
  line("total", report.total_params(), report.total_macs());
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.3fM params, %.3fG MACs at %lldx%lld\n", report.total_params() / 1e6,
                report.total_macs() / 1e9, static_cast<long long>(report.height),
                static_cast<long long>(report.width));
  out << buf << "assumptions:\n";
  for (const auto& a : report.assumptions) out << "  - " << a << '\n';
}

}  // namespace uformer
