#include "uformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "uformer/error.hpp"
#include "uformer/lewin.hpp"
#include "uformer/train.hpp"
#include "uformer/windowing.hpp"

namespace uformer {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

GradcheckResult check_gradient(const std::string& name, const ScalarFn& f, std::vector<Tensor<double>> inputs,
                               double tolerance, const GradcheckOptions& options) {
  for (auto& x : inputs) {
    if (!x.node()->is_leaf()) throw UsageError("check_gradient: inputs must be leaves");
    x.set_requires_grad(true);
    x.zero_grad();
  }
  const auto loss = f(inputs);
  loss.backward();

  Rng rng(options.seed ^ std::hash<std::string>{}(name));
  std::vector<double> analytic, numeric;
  for (auto& x : inputs) {
    const auto n = static_cast<std::size_t>(x.numel());
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries > 0 && n > static_cast<std::size_t>(options.max_entries)) {
      const auto k = static_cast<std::size_t>(options.max_entries);
      for (std::size_t i = 0; i < k; ++i) std::swap(entries[i], entries[i + rng.below(n - i)]);
      entries.resize(k);
    }
    std::vector<double> grad(n, 0.0);
    if (x.has_grad()) std::ranges::copy(x.grad(), grad.begin());
    for (auto j : entries) {
      auto values = x.mutable_data();
      const double orig = values[j];
      double fp, fm;
      {
        NoGradGuard guard;
        values[j] = orig + options.step;
        fp = f(inputs).item();
        values[j] = orig - options.step;
        fm = f(inputs).item();
        values[j] = orig;
      }
      analytic.push_back(grad[j] * (1.0 + options.inject_fault));
      numeric.push_back((fp - fm) / (2.0 * options.step));
    }
  }
  return {name, relative_error(analytic, numeric), tolerance, static_cast<std::int64_t>(analytic.size())};
}

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor<double>(std::move(shape), std::move(v));
}

// Fixed random projection to a scalar, so no output entry has a trivial adjoint.
Tensor<double> probe(const Tensor<double>& out) {
  Rng r(0x9e0be);
  std::vector<double> w(static_cast<std::size_t>(out.numel()));
  for (auto& x : w) x = 2.0 * r.uniform() - 1.0;
  return sum(mul(out, Tensor<double>(out.shape(), std::move(w))));
}

std::vector<Tensor<double>> tensors_of(const ParamList<double>& params) {
  std::vector<Tensor<double>> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

void randomize(const ParamList<double>& params, Rng& rng, double scale) {
  for (auto p : params)
    for (auto& v : p.tensor.mutable_data()) v = scale * (2.0 * rng.uniform() - 1.0);
}

}  // namespace

std::vector<GradcheckResult> primitive_suite(const GradcheckOptions& options) {
  Rng rng(options.seed);
  std::vector<GradcheckResult> out;
  const double tol = kPrimitiveTolerance;
  using V = std::vector<Tensor<double>>;
  auto run = [&](const std::string& name, const ScalarFn& f, V inputs) {
    out.push_back(check_gradient(name, f, std::move(inputs), tol, options));
  };

  run("add", [](const V& in) { return probe(add(in[0], in[1])); }, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("sub", [](const V& in) { return probe(sub(in[0], in[1])); }, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("mul", [](const V& in) { return probe(mul(in[0], in[1])); }, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("scale", [](const V& in) { return probe(add_scalar(scale(in[0], 1.7), 0.3)); }, {random_tensor({5}, rng)});
  run("sqrt", [](const V& in) { return probe(sqrt(in[0])); }, {random_tensor({6}, rng, 0.5, 2.0)});
  run("add_broadcast", [](const V& in) { return probe(add_broadcast(in[0], in[1])); },
      {random_tensor({2, 3, 4}, rng), random_tensor({3, 4}, rng)});
  run("sum_mean", [](const V& in) { return add(sum(mul(in[0], in[0])), scale(mean(in[0]), 3.0)); },
      {random_tensor({3, 5}, rng)});
  run("matmul", [](const V& in) { return probe(matmul(in[0], in[1])); },
      {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)});
  run("matmul_shared_rhs", [](const V& in) { return probe(matmul(in[0], in[1])); },
      {random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)});
  run("matmul_batched", [](const V& in) { return probe(matmul(in[0], in[1])); },
      {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)});
  run("softmax", [](const V& in) { return add(probe(softmax(in[0], 1)), probe(softmax(in[0], 0))); },
      {random_tensor({3, 5}, rng, -2.0, 2.0)});
  run("layer_norm", [](const V& in) { return probe(layer_norm(in[0], in[1], in[2])); },
      {random_tensor({4, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  run("gelu", [](const V& in) { return probe(gelu(in[0])); }, {random_tensor({8}, rng, -3.0, 3.0)});
  run("leaky_relu", [](const V& in) { return probe(leaky_relu(in[0], 0.2)); }, {random_tensor({8}, rng)});
  run("reshape_permute", [](const V& in) { return probe(permute(reshape(in[0], Shape{4, 6}), {1, 0})); },
      {random_tensor({2, 3, 4}, rng)});
  run("conv2d", [](const V& in) { return probe(conv2d(in[0], in[1], in[2], {1, 1, 1})); },
      {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  run("conv2d_strided", [](const V& in) { return probe(conv2d(in[0], in[1], in[2], {2, 1, 1})); },
      {random_tensor({2, 6, 6}, rng), random_tensor({4, 2, 4, 4}, rng), random_tensor({4}, rng)});
  run("conv2d_depthwise", [](const V& in) { return probe(conv2d(in[0], in[1], in[2], {1, 1, 4})); },
      {random_tensor({4, 5, 5}, rng), random_tensor({4, 1, 3, 3}, rng), random_tensor({4}, rng)});
  run("conv_transpose2d", [](const V& in) { return probe(conv_transpose2d(in[0], in[1], in[2], 2)); },
      {random_tensor({3, 4, 4}, rng), random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng)});
  {
    auto idx = std::make_shared<std::vector<std::int64_t>>(10);
    for (auto& v : *idx) v = static_cast<std::int64_t>(rng.below(6));
    const IndexMap map = idx;
    run("take", [map](const V& in) { return probe(take(in[0], map, Shape{2, 5})); }, {random_tensor({6}, rng)});
  }
  run("concat", [](const V& in) { return add(probe(concat(V{in[0], in[1]}, 0)), probe(concat(V{in[0], in[0]}, 2))); },
      {random_tensor({2, 3, 3}, rng), random_tensor({1, 3, 3}, rng)});
  run("window_partition_reverse",
      [](const V& in) {
        auto [w, grid] = window_partition(cyclic_shift(in[0], 1), 4);
        return add(probe(w), probe(cyclic_unshift(window_reverse(scale(w, 2.0), grid), 1)));
      },
      {random_tensor({2, 6, 6}, rng)});
  run("charbonnier", [](const V& in) { return charbonnier_loss(in[0], in[1], 1e-3); },
      {random_tensor({2, 4, 4}, rng), random_tensor({2, 4, 4}, rng)});

  {
    auto p = WMSAParams<double>::make(8, 2, 4, rng);
    ParamList<double> pl;
    p.collect("attn", pl);
    randomize(pl, rng, 0.5);
    auto mod = Modulator<double>{random_tensor({4, 4, 8}, rng, -0.3, 0.3)};
    auto inputs = tensors_of(pl);
    inputs.push_back(mod.bias);
    inputs.push_back(random_tensor({8, 8, 8}, rng));
    run("wmsa_shifted",
        [p, mod](const V& in) { return probe(wmsa_forward(in.back(), p, 4, WMSAOptions{true, false}, &mod)); },
        inputs);
    inputs.back() = random_tensor({8, 6, 7}, rng);
    run("wmsa_padded", [p](const V& in) { return probe(wmsa_forward(in.back(), p, 4)); }, inputs);
  }
  {
    auto p = LeFFParams<double>::make(4, 3, rng);
    ParamList<double> pl;
    p.collect("leff", pl);
    randomize(pl, rng, 0.5);
    auto inputs = tensors_of(pl);
    inputs.push_back(random_tensor({4, 5, 5}, rng));
    run("leff", [p](const V& in) { return probe(leff_forward(in.back(), p)); }, inputs);
  }
  for (auto skip : {SkipAttention::none, SkipAttention::cross, SkipAttention::concat_cross}) {
    LeWinBlockSpec spec;
    spec.dim = 8;
    spec.heads = 2;
    spec.window = 4;
    spec.ffn_expansion = 2;
    spec.shifted = true;
    spec.modulator = true;
    spec.skip = skip;
    spec.skip_channels = skip == SkipAttention::none ? 0 : 4;
    auto p = make_lewin_block<double>(spec, rng);
    ParamList<double> pl;
    p.collect("block", pl);
    randomize(pl, rng, 0.3);
    auto inputs = tensors_of(pl);
    inputs.push_back(random_tensor({4, 8, 8}, rng));
    inputs.push_back(random_tensor({8, 8, 8}, rng));
    const auto name = skip == SkipAttention::none    ? std::string("lewin_block")
                      : skip == SkipAttention::cross ? std::string("lewin_block_cross")
                                                     : std::string("lewin_block_concat_cross");
    run(name,
        [p, skip](const V& in) {
          const auto& x = in[in.size() - 1];
          const auto& enc = in[in.size() - 2];
          return probe(lewin_block_forward(x, p, skip == SkipAttention::none ? nullptr : &enc));
        },
        inputs);
  }
  return out;
}

GradcheckResult model_check(const UformerConfig& config, std::int64_t extent, const GradcheckOptions& options) {
  auto model = build<double>(config, options.seed);
  const auto params = model.parameters();
  Rng rng(options.seed + 17);
  for (auto p : params) {
    // Move every parameter off its initial value (zeros, ones) so each one
    // participates with a generic gradient.
    for (auto& v : p.tensor.mutable_data()) v += 0.05 * (2.0 * rng.uniform() - 1.0);
  }
  auto input = random_tensor({config.in_channels, extent, extent}, rng, 0.0, 1.0);
  auto target = random_tensor({config.in_channels, extent, extent}, rng, 0.0, 1.0);
  auto inputs = tensors_of(params);
  inputs.push_back(input);
  auto opts = options;
  if (opts.max_entries == 0) opts.max_entries = 4;
  return check_gradient(
      "uformer_end_to_end",
      [&model, target](const std::vector<Tensor<double>>& in) {
        return charbonnier_loss(forward(in.back(), model), target, 1e-3);
      },
      inputs, kModelTolerance, opts);
}

}  // namespace uformer
