#include "uformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>

#include "uformer/checkpoint.hpp"
#include "uformer/error.hpp"
#include "uformer/metrics.hpp"
#include "uformer/windowing.hpp"

namespace uformer {

std::string to_string(DegradationSpec::Kind kind) {
  switch (kind) {
    case DegradationSpec::Kind::gaussian_noise: return "gaussian_noise";
    case DegradationSpec::Kind::box_blur: return "box_blur";
    case DegradationSpec::Kind::rain_streaks: return "rain_streaks";
  }
  return "gaussian_noise";
}

DegradationSpec::Kind parse_degradation(const std::string& text) {
  if (text == "gaussian_noise") return DegradationSpec::Kind::gaussian_noise;
  if (text == "box_blur") return DegradationSpec::Kind::box_blur;
  if (text == "rain_streaks") return DegradationSpec::Kind::rain_streaks;
  throw ConfigError("unknown degradation '" + text + "' (expected gaussian_noise, box_blur or rain_streaks)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid training config: " + what); };
  if (!(epsilon > 0)) fail("train.epsilon must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("train.beta1/beta2 must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("train.adam_eps must be positive");
  if (!(lr_end > 0 && lr_end <= lr_start)) fail("need 0 < train.lr_end <= train.lr_start");
  if (!(weight_decay >= 0)) fail("train.weight_decay must be non-negative");
  if (total_steps < 0) fail("train.steps must be non-negative");
  if (batch_size < 1) fail("train.batch must be positive");
  if (patch_size < 1) fail("train.patch must be positive");
  if (!(grad_clip >= 0)) fail("train.grad_clip must be non-negative");
  if (train_images < 1) fail("train.train_images must be positive");
  if (val_images < 0) fail("train.val_images must be non-negative");
  if (log_every < 1) fail("train.log_every must be positive");
  if (checkpoint_every < 0) fail("train.checkpoint_every must be non-negative");
  if (!(degradation.sigma >= 0)) fail("train.sigma must be non-negative");
  if (degradation.blur_kernel < 1 || degradation.blur_kernel % 2 == 0) fail("train.blur_kernel must be odd and positive");
  if (degradation.rain_count < 0 || !(degradation.rain_length >= 0) || !(degradation.rain_intensity >= 0 &&
                                                                        degradation.rain_intensity <= 1)) {
    fail("rain streak parameters out of range");
  }
}

template <typename T>
Tensor<T> charbonnier_loss(const Tensor<T>& pred, const Tensor<T>& target, double epsilon) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("charbonnier_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const T eps = static_cast<T>(epsilon);
  const auto d = sub(pred, target);
  // sqrt(eps * eps) == eps in IEEE arithmetic, so equal inputs leave only zeros in the mean.
  const auto r = add_scalar(sqrt(add_scalar(mul(d, d), eps * eps)), -eps);
  return add_scalar(mean(r), eps);
}

double cosine_lr(std::int64_t step, const TrainConfig& config) {
  if (step < 0) throw UsageError("cosine_lr: negative step");
  if (step >= config.total_steps) return config.lr_end;
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                         static_cast<double>(config.total_steps)));
  return w * config.lr_start + (1.0 - w) * config.lr_end;
}

template <typename T>
OptimizerState<T> OptimizerState<T>::init(const ParamList<T>& params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
    s.v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
  return s;
}

template <typename T>
double grad_norm(const ParamList<T>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

template <typename T>
void adamw_step(const ParamList<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& config) {
  if (state.m.size() != params.size()) throw UsageError("adamw_step: optimizer state does not match parameters");
  if (lr < 0) throw UsageError("adamw_step: negative learning rate");
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad())
      if (!std::isfinite(static_cast<double>(g))) throw TrainingError("non-finite gradient in " + p.name);
  }
  state.step += 1;
  const double b1 = config.beta1, b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].tensor;
    auto values = tensor.mutable_data();
    if (state.m[i].size() != values.size()) throw UsageError("adamw_step: moment size mismatch for " + params[i].name);
    const bool has_grad = tensor.has_grad();
    const auto grad = has_grad ? tensor.grad() : std::span<const T>{};
    const double decay = params[i].decay ? 1.0 - lr * config.weight_decay : 1.0;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      double pv = static_cast<double>(values[j]);
      if (params[i].decay) pv *= decay;
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      pv -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + config.adam_eps);
      values[j] = static_cast<T>(pv);
    }
  }
}

Image dihedral(const Image& img, int k) {
  if (k < 0 || k > 7) throw UsageError("dihedral index must lie in [0, 8)");
  const int turns = k & 3;
  if (turns != 0 && img.height != img.width) throw ConfigError("rotations need square patches");
  Image cur = img;
  for (int t = 0; t < turns; ++t) {
    // Counter-clockwise quarter turn: out(y, x) = in(x, W - 1 - y).
    std::vector<double> out(cur.data.size());
    const auto h = cur.height, w = cur.width;
    for (std::int64_t c = 0; c < cur.channels; ++c)
      for (std::int64_t y = 0; y < w; ++y)
        for (std::int64_t x = 0; x < h; ++x)
          out[static_cast<std::size_t>((c * w + y) * h + x)] = cur.at(c, x, w - 1 - y);
    cur = Image(cur.channels, w, h, std::move(out));
  }
  if (k & 4) {
    std::vector<double> out(cur.data.size());
    for (std::int64_t c = 0; c < cur.channels; ++c)
      for (std::int64_t y = 0; y < cur.height; ++y)
        for (std::int64_t x = 0; x < cur.width; ++x) out[cur.offset(c, y, x)] = cur.at(c, y, cur.width - 1 - x);
    cur.data = std::move(out);
  }
  return cur;
}

std::pair<Image, Image> augment(const Image& clean, const Image& degraded, Rng& rng) {
  if (!clean.same_shape(degraded)) throw DimensionError("augment: pair differs in shape");
  const int k = static_cast<int>(rng.below(8));
  return {dihedral(clean, k), dihedral(degraded, k)};
}

Image gaussian_noise(const Image& img, double sigma, Rng& rng) {
  if (sigma < 0) throw ConfigError("noise sigma must be non-negative");
  Image out = img;
  if (sigma == 0) return out;
  for (auto& v : out.data) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
  return out;
}

Image box_blur(const Image& img, std::int64_t kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("box blur kernel must be odd and positive");
  if (kernel == 1) return img;
  const auto r = kernel / 2;
  std::vector<double> out(img.data.size());
  for (std::int64_t c = 0; c < img.channels; ++c)
    for (std::int64_t y = 0; y < img.height; ++y)
      for (std::int64_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (std::int64_t dy = -r; dy <= r; ++dy)
          for (std::int64_t dx = -r; dx <= r; ++dx)
            acc += img.at(c, index_maps::reflect(y + dy, img.height), index_maps::reflect(x + dx, img.width));
        out[img.offset(c, y, x)] = acc / static_cast<double>(kernel * kernel);
      }
  return Image(img.channels, img.height, img.width, std::move(out));
}

Image rain_streaks(const Image& img, std::int64_t count, double length, double angle_deg, double intensity, Rng& rng) {
  std::vector<double> mask(static_cast<std::size_t>(img.height * img.width), 0.0);
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double dx = std::cos(a), dy = -std::sin(a);
  for (std::int64_t s = 0; s < count; ++s) {
    const double x0 = rng.uniform() * static_cast<double>(img.width);
    const double y0 = rng.uniform() * static_cast<double>(img.height);
    for (double t = 0.0; t <= length; t += 0.5) {
      const auto x = static_cast<std::int64_t>(std::floor(x0 + t * dx));
      const auto y = static_cast<std::int64_t>(std::floor(y0 + t * dy));
      if (x >= 0 && x < img.width && y >= 0 && y < img.height) mask[static_cast<std::size_t>(y * img.width + x)] = 1.0;
    }
  }
  Image out = img;
  const auto plane = mask.size();
  for (std::int64_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      auto& v = out.data[static_cast<std::size_t>(c) * plane + i];
      v += intensity * mask[i] * (1.0 - v);
    }
  return out;
}

Image synth_degrade(const Image& clean, const DegradationSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case DegradationSpec::Kind::gaussian_noise: return gaussian_noise(clean, spec.sigma, rng);
    case DegradationSpec::Kind::box_blur: return box_blur(clean, spec.blur_kernel);
    case DegradationSpec::Kind::rain_streaks:
      return rain_streaks(clean, spec.rain_count, spec.rain_length, spec.rain_angle, spec.rain_intensity, rng);
  }
  throw ConfigError("unknown degradation kind");
}

Image synthetic_image(std::int64_t channels, std::int64_t height, std::int64_t width, Rng& rng) {
  constexpr int kWaves = 3;
  struct Wave {
    double fy, fx, phase;
  };
  Wave waves[kWaves];
  for (auto& w : waves) w = {rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 * std::numbers::pi};
  std::vector<double> v(static_cast<std::size_t>(channels * height * width));
  for (std::int64_t c = 0; c < channels; ++c) {
    double amp[kWaves];
    for (auto& a : amp) a = rng.uniform();
    const double gy = rng.uniform() - 0.5, gx = rng.uniform() - 0.5, base = rng.uniform();
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) {
        const double u = static_cast<double>(y) / static_cast<double>(height);
        const double t = static_cast<double>(x) / static_cast<double>(width);
        double s = base + gy * u + gx * t;
        for (int k = 0; k < kWaves; ++k)
          s += amp[k] * std::sin(2.0 * std::numbers::pi * (waves[k].fy * u + waves[k].fx * t) + waves[k].phase);
        v[static_cast<std::size_t>((c * height + y) * width + x)] = s;
      }
  }
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double lo_v = *lo, span = std::max(*hi - *lo, 1e-12);
  for (auto& x : v) x = 0.05 + 0.9 * (x - lo_v) / span;
  return Image(channels, height, width, std::move(v));
}

TrainingData make_synthetic_data(const TrainConfig& config, std::int64_t channels) {
  Rng rng(config.seed ^ 0x5eedda7aULL);
  TrainingData d;
  const auto p = config.patch_size;
  for (std::int64_t i = 0; i < config.train_images + config.val_images; ++i) {
    auto clean = synthetic_image(channels, p, p, rng);
    auto degraded = synth_degrade(clean, config.degradation, rng);
    if (i < config.train_images) {
      d.train_clean.push_back(std::move(clean));
      d.train_degraded.push_back(std::move(degraded));
    } else {
      d.val_clean.push_back(std::move(clean));
      d.val_degraded.push_back(std::move(degraded));
    }
  }
  return d;
}

TrainingData load_training_data(const std::filesystem::path& dir, const TrainConfig& config) {
  namespace fs = std::filesystem;
  const auto clean_dir = dir / "clean", degraded_dir = dir / "degraded";
  if (!fs::is_directory(clean_dir) || !fs::is_directory(degraded_dir)) {
    throw ConfigError(dir.string() + " must contain clean/ and degraded/ directories");
  }
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(clean_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename());
  std::sort(names.begin(), names.end());
  if (static_cast<std::int64_t>(names.size()) <= config.val_images) {
    throw ConfigError(dir.string() + " holds " + std::to_string(names.size()) + " pairs, need more than " +
                      std::to_string(config.val_images));
  }
  Rng rng(config.seed ^ 0xc409ULL);
  TrainingData d;
  const auto p = config.patch_size;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!fs::exists(degraded_dir / names[i])) throw ConfigError("no degraded counterpart for " + names[i].string());
    const auto clean = read_png(clean_dir / names[i]);
    const auto degraded = read_png(degraded_dir / names[i]);
    if (!clean.same_shape(degraded)) throw ConfigError("pair " + names[i].string() + " differs in shape");
    if (clean.height < p || clean.width < p) throw ConfigError(names[i].string() + " is smaller than the patch size");
    const auto y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(clean.height - p + 1)));
    const auto x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(clean.width - p + 1)));
    const bool held_out = static_cast<std::int64_t>(i) >= static_cast<std::int64_t>(names.size()) - config.val_images;
    (held_out ? d.val_clean : d.train_clean).push_back(clean.crop(y0, x0, p, p));
    (held_out ? d.val_degraded : d.train_degraded).push_back(degraded.crop(y0, x0, p, p));
  }
  return d;
}

template <typename T>
double mean_psnr(const UformerParams<T>& model, const std::vector<Image>& degraded, const std::vector<Image>& clean) {
  if (degraded.empty()) return 0.0;
  const auto restore = make_restorer(model);
  double total = 0.0;
  for (std::size_t i = 0; i < degraded.size(); ++i) total += psnr(restore(degraded[i]), clean[i]);
  return total / static_cast<double>(degraded.size());
}

namespace {

std::string format_row(std::int64_t step, double lr, double loss, double val_psnr, bool has_val) {
  char buf[128];
  if (has_val) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.6f\n", static_cast<long long>(step), lr, loss, val_psnr);
  } else {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,\n", static_cast<long long>(step), lr, loss);
  }
  return buf;
}

}  // namespace

template <typename T>
TrainResult train_loop(UformerParams<T>& model, OptimizerState<T>& state, const TrainConfig& config,
                       const TrainingData& data, const TrainIo& io) {
  config.validate();
  if (data.train_clean.empty()) throw ConfigError("no training pairs");
  const auto params = model.parameters();
  if (state.m.empty()) state = OptimizerState<T>::init(params);
  if (state.step > config.total_steps) {
    throw ConfigError("checkpoint step " + std::to_string(state.step) + " is past train.steps");
  }
  if (io.log && state.step == 0) *io.log << "step,lr,loss,val_psnr\n";
  const auto save = [&] {
    if (!io.checkpoint.empty()) save_checkpoint(io.checkpoint, io.config_text, model, &state);
  };
  // On failure the pre-step state is kept only if it is itself finite;
  // otherwise whatever checkpoint is already on disk stays untouched.
  const auto save_if_finite = [&] {
    for (const auto& p : params)
      for (const T v : p.tensor.data())
        if (!std::isfinite(v)) return;
    save();
  };

  TrainResult result;
  const auto n = static_cast<std::uint64_t>(data.train_clean.size());
  const T inv_batch = static_cast<T>(1.0 / static_cast<double>(config.batch_size));
  bool first = true;
  const auto end = io.stop_at > 0 ? std::min(io.stop_at, config.total_steps) : config.total_steps;
  while (state.step < end) {
    const auto step = state.step;
    const double lr = cosine_lr(step, config);
    Rng rng(config.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(step) + 1);
    for (auto p : params) p.tensor.zero_grad();

    double loss_sum = 0.0;
    for (std::int64_t b = 0; b < config.batch_size; ++b) {
      const auto idx = static_cast<std::size_t>(rng.below(n));
      Image clean = data.train_clean[idx], degraded = data.train_degraded[idx];
      if (config.augment) std::tie(clean, degraded) = augment(clean, degraded, rng);
      const auto out = forward(degraded.to_tensor<T>(), model);
      const auto loss = charbonnier_loss(out, clean.to_tensor<T>(), config.epsilon);
      loss_sum += static_cast<double>(loss.item());
      scale(loss, inv_batch).backward();
    }
    const double loss = loss_sum / static_cast<double>(config.batch_size);
    if (!std::isfinite(loss)) {
      save_if_finite();
      throw TrainingError("non-finite loss at step " + std::to_string(step));
    }
    if (config.grad_clip > 0) {
      const double norm = grad_norm(params);
      if (norm > config.grad_clip) {
        const T f = static_cast<T>(config.grad_clip / norm);
        for (auto p : params)
          if (p.tensor.has_grad())
            for (auto& g : p.tensor.mutable_grad()) g *= f;
      }
    }
    try {
      adamw_step(params, state, lr, config);
    } catch (const TrainingError&) {
      save_if_finite();
      throw;
    }
    if (first) result.first_loss = loss;
    first = false;
    result.last_loss = loss;
    ++result.steps;

    const bool last = state.step == config.total_steps;
    if (io.log && (step % config.log_every == 0 || last)) {
      const bool has_val = !data.val_clean.empty();
      const double vp = has_val ? mean_psnr(model, data.val_degraded, data.val_clean) : 0.0;
      *io.log << format_row(step, lr, loss, vp, has_val);
      io.log->flush();
    }
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && !last) save();
  }
  save();
  result.train_psnr = mean_psnr(model, data.train_degraded, data.train_clean);
  if (!data.val_clean.empty()) {
    result.val_psnr = mean_psnr(model, data.val_degraded, data.val_clean);
    double base = 0.0;
    for (std::size_t i = 0; i < data.val_clean.size(); ++i) base += psnr(data.val_degraded[i], data.val_clean[i]);
    result.val_input_psnr = base / static_cast<double>(data.val_clean.size());
  }
  return result;
}

#define UFORMER_INSTANTIATE_TRAIN(T)                                                                     \
  template Tensor<T> charbonnier_loss(const Tensor<T>&, const Tensor<T>&, double);                      \
  template struct OptimizerState<T>;                                                                     \
  template double grad_norm(const ParamList<T>&);                                                        \
  template void adamw_step(const ParamList<T>&, OptimizerState<T>&, double, const TrainConfig&);         \
  template double mean_psnr(const UformerParams<T>&, const std::vector<Image>&, const std::vector<Image>&); \
  template TrainResult train_loop(UformerParams<T>&, OptimizerState<T>&, const TrainConfig&, const TrainingData&, \
                                  const TrainIo&);

UFORMER_INSTANTIATE_TRAIN(float)
UFORMER_INSTANTIATE_TRAIN(double)

}  // namespace uformer
