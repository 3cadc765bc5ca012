#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "uformer/image.hpp"
#include "uformer/layers.hpp"
#include "uformer/model.hpp"
#include "uformer/random.hpp"

namespace uformer {

struct DegradationSpec {
  enum class Kind { gaussian_noise, box_blur, rain_streaks };
  Kind kind = Kind::gaussian_noise;
  double sigma = 0.1;
  std::int64_t blur_kernel = 3;
  std::int64_t rain_count = 12;
  double rain_length = 10.0;
  double rain_angle = 75.0;  // degrees from the horizontal
  double rain_intensity = 0.5;

  bool operator==(const DegradationSpec&) const = default;
};

std::string to_string(DegradationSpec::Kind kind);
DegradationSpec::Kind parse_degradation(const std::string& text);

struct TrainConfig {
  double epsilon = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.02;
  double lr_start = 2e-4;
  double lr_end = 1e-6;
  std::int64_t total_steps = 1000;
  std::int64_t batch_size = 4;
  std::int64_t patch_size = 32;
  std::uint64_t seed = 0;
  DegradationSpec degradation;
  bool augment = true;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  std::int64_t train_images = 16;
  std::int64_t val_images = 4;
  std::int64_t log_every = 50;
  std::int64_t checkpoint_every = 0;  // 0: only at the end

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// mean over elements of sqrt((pred - target)^2 + eps^2), evaluated as
/// eps + mean(sqrt(d^2 + eps^2) - eps) so identical inputs give eps exactly.
template <typename T>
Tensor<T> charbonnier_loss(const Tensor<T>& pred, const Tensor<T>& target, double epsilon = 1e-3);

/// lr_end + (lr_start - lr_end) (1 + cos(pi step / T)) / 2, written as a
/// convex combination so both endpoints are exact. Steps past T give lr_end.
double cosine_lr(std::int64_t step, const TrainConfig& config);

template <typename T>
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static OptimizerState init(const ParamList<T>& params);
};

/// One decoupled-weight-decay Adam update from the gradients stored on the
/// parameters. Decay applies only to entries flagged `decay`. A non-finite
/// gradient throws TrainingError naming the parameter.
template <typename T>
void adamw_step(const ParamList<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& config);

/// Global L2 norm of all parameter gradients.
template <typename T>
double grad_norm(const ParamList<T>& params);

/// The 8 symmetries of the square: k & 3 quarter turns counter-clockwise,
/// then a horizontal flip when k & 4. Non-square images only allow k in {0, 4}.
Image dihedral(const Image& img, int k);

/// Applies one random dihedral transform to both images.
std::pair<Image, Image> augment(const Image& clean, const Image& degraded, Rng& rng);

Image gaussian_noise(const Image& img, double sigma, Rng& rng);
Image box_blur(const Image& img, std::int64_t kernel);
Image rain_streaks(const Image& img, std::int64_t count, double length, double angle_deg, double intensity, Rng& rng);
Image synth_degrade(const Image& clean, const DegradationSpec& spec, Rng& rng);

/// Smooth random image: a few low-frequency sinusoids and a gradient per
/// channel, mapped into [0.05, 0.95].
Image synthetic_image(std::int64_t channels, std::int64_t height, std::int64_t width, Rng& rng);

struct TrainingData {
  std::vector<Image> train_clean, train_degraded;
  std::vector<Image> val_clean, val_degraded;
};

/// Fixed synthetic pairs drawn from the config seed.
TrainingData make_synthetic_data(const TrainConfig& config, std::int64_t channels);

/// Clean/degraded pairs from <dir>/clean and <dir>/degraded, random-cropped
/// to patch_size; the last val_images files are held out.
TrainingData load_training_data(const std::filesystem::path& dir, const TrainConfig& config);

struct TrainIo {
  std::filesystem::path checkpoint;  // empty: no checkpoints
  std::ostream* log = nullptr;       // CSV step,lr,loss,val_psnr
  std::string config_text;           // stored in checkpoint headers
  std::int64_t stop_at = 0;          // > 0: checkpoint and return once this step is reached
};

struct TrainResult {
  std::int64_t steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  double train_psnr = 0.0;
  double val_psnr = 0.0;
  double val_input_psnr = 0.0;
};

/// Mean PSNR of the model's output against the clean images.
template <typename T>
double mean_psnr(const UformerParams<T>& model, const std::vector<Image>& degraded, const std::vector<Image>& clean);

/// Runs steps state.step .. total_steps - 1 (or io.stop_at - 1). Each step draws its batch from a
/// generator seeded by (seed, step), so resumed runs replay the same stream.
/// A non-finite loss writes the pre-step parameters as the last good
/// checkpoint and throws TrainingError.
template <typename T>
TrainResult train_loop(UformerParams<T>& model, OptimizerState<T>& state, const TrainConfig& config,
                       const TrainingData& data, const TrainIo& io = {});

}  // namespace uformer
