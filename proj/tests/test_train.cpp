#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "uformer/checkpoint.hpp"
#include "uformer/error.hpp"
#include "uformer/metrics.hpp"
#include "uformer/run_config.hpp"
#include "uformer/train.hpp"

using namespace uformer;

namespace {

TrainConfig short_run(std::int64_t steps) {
  TrainConfig t;
  t.total_steps = steps;
  t.batch_size = 2;
  t.patch_size = 16;
  t.train_images = 4;
  t.val_images = 1;
  t.log_every = 1;
  t.degradation.sigma = 0.1;
  return t;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const UformerParams<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

Tensor<double> leaf(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor<double>({n}, std::move(v), true);
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("charbonnier loss") {
  Rng rng(1);
  const auto a = testing::random_tensor<double>({2, 3, 5, 4}, rng);
  for (double eps : {1e-3, 1e-6, 0.5}) CHECK(charbonnier_loss(a, a, eps).item() == eps);
  CHECK(charbonnier_loss(testing::random_tensor<float>({7}, rng), testing::random_tensor<float>({7}, rng)).item() > 0);

  const auto b = testing::random_tensor<double>({2, 3, 5, 4}, rng);
  double want = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    want += std::sqrt(d * d + 1e-6);
  }
  want /= static_cast<double>(a.data().size());
  CHECK(std::abs(charbonnier_loss(a, b).item() - want) < 1e-15);

  // Tends to the mean absolute error as eps shrinks.
  const auto c = Tensor<double>::full({10}, 0.3);
  CHECK(std::abs(charbonnier_loss(c, Tensor<double>::zeros({10}), 1e-9).item() - 0.3) < 1e-12);
  CHECK_THROWS_AS(charbonnier_loss(a, Tensor<double>::zeros({3})), DimensionError);
}

TEST_CASE("cosine schedule") {
  TrainConfig t;
  t.total_steps = 1000;
  CHECK(cosine_lr(0, t) == t.lr_start);
  CHECK(cosine_lr(1000, t) == t.lr_end);
  CHECK(cosine_lr(5000, t) == t.lr_end);
  CHECK(std::abs(cosine_lr(500, t) - 0.5 * (t.lr_start + t.lr_end)) < 1e-18);
  for (std::int64_t s = 1; s <= 1000; ++s) CHECK(cosine_lr(s, t) <= cosine_lr(s - 1, t));
  // Symmetric about the midpoint.
  CHECK(std::abs(cosine_lr(250, t) + cosine_lr(750, t) - (t.lr_start + t.lr_end)) < 1e-18);
  CHECK_THROWS_AS(cosine_lr(-1, t), UsageError);
}

TEST_CASE("adamw") {
  TrainConfig t;

  SUBCASE("zero gradient and no decay leaves parameters unchanged") {
    t.weight_decay = 0.0;
    auto w = leaf({0.5, -1.0, 2.0});
    ParamList<double> params{{"w", w, true}};
    auto st = OptimizerState<double>::init(params);
    for (auto& g : params[0].tensor.mutable_grad()) g = 0.0;
    for (int i = 0; i < 5; ++i) adamw_step(params, st, 1e-2, t);
    CHECK(std::vector<double>(w.data().begin(), w.data().end()) == std::vector<double>{0.5, -1.0, 2.0});
    CHECK(st.step == 5);
  }

  SUBCASE("two steps match the closed form") {
    t.weight_decay = 0.01;
    const double lr = 0.1;
    auto w = leaf({0.5});
    ParamList<double> params{{"w", w, true}};
    auto st = OptimizerState<double>::init(params);
    double p = 0.5, m = 0.0, v = 0.0;
    int k = 0;
    for (double g : {0.2, -0.1}) {
      ++k;
      w.mutable_grad()[0] = g;
      adamw_step(params, st, lr, t);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, k)), vh = v / (1 - std::pow(0.999, k));
      p = p * (1 - lr * 0.01) - lr * mh / (std::sqrt(vh) + 1e-8);
      CHECK(std::abs(w.data()[0] - p) < 1e-15);
    }
  }

  SUBCASE("decay shrinks flagged parameters only") {
    t.weight_decay = 0.5;
    auto w = leaf({1.0, -2.0});
    auto b = leaf({1.0, -2.0});
    ParamList<double> params{{"w", w, true}, {"b", b, false}};
    auto st = OptimizerState<double>::init(params);
    for (int i = 0; i < 3; ++i) {
      w.zero_grad();
      std::ignore = w.mutable_grad();
      std::ignore = b.mutable_grad();
      adamw_step(params, st, 0.1, t);
    }
    CHECK(std::abs(w.data()[0]) < 1.0);
    CHECK(std::abs(w.data()[1]) < 2.0);
    CHECK(std::abs(w.data()[0] - std::pow(0.95, 3)) < 1e-15);
    CHECK(std::vector<double>(b.data().begin(), b.data().end()) == std::vector<double>{1.0, -2.0});
  }

  SUBCASE("non-finite gradient is reported by name") {
    auto w = leaf({1.0});
    ParamList<double> params{{"layer.w", w, true}};
    auto st = OptimizerState<double>::init(params);
    w.mutable_grad()[0] = std::nan("");
    try {
      adamw_step(params, st, 0.1, t);
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("layer.w") != std::string::npos);
    }
    CHECK(w.data()[0] == 1.0);
    CHECK(st.step == 0);
  }

  SUBCASE("model registry flags") {
    const auto model = build<float>(UformerConfig::tiny(), 0);
    for (const auto& p : model.parameters()) {
      const bool exempt = p.name.ends_with(".bias") || p.name.ends_with(".gamma") || p.name.ends_with(".beta") ||
                          p.name.find("modulator") != std::string::npos || p.name.find("bias_table") != std::string::npos;
      INFO(p.name);
      CHECK(p.decay == !exempt);
    }
  }
}

TEST_CASE("grad norm") {
  auto a = leaf({3.0});
  auto b = leaf({0.0, 4.0});
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[1] = 4.0;
  CHECK(grad_norm(ParamList<double>{{"a", a, true}, {"b", b, true}}) == 5.0);
}

TEST_CASE("dihedral transforms") {
  Rng rng(2);
  const auto img = synthetic_image(3, 8, 8, rng);
  CHECK(dihedral(img, 0) == img);
  // Four quarter turns and two flips are the identity.
  auto r = img;
  for (int i = 0; i < 4; ++i) r = dihedral(r, 1);
  CHECK(r == img);
  CHECK(dihedral(dihedral(img, 4), 4) == img);
  // A quarter turn moves the top-right corner to the top-left.
  CHECK(dihedral(img, 1).at(0, 0, 0) == img.at(0, 0, 7));
  // All eight are distinct for a generic image.
  for (int i = 0; i < 8; ++i)
    for (int j = i + 1; j < 8; ++j) CHECK(dihedral(img, i) != dihedral(img, j));

  const auto other = synthetic_image(3, 8, 8, rng);
  // Same pixels in a different order: equal up to summation rounding.
  for (int k = 0; k < 8; ++k) CHECK(std::abs(psnr(dihedral(img, k), dihedral(other, k)) - psnr(img, other)) < 1e-12);

  const auto wide = synthetic_image(1, 4, 6, rng);
  CHECK(dihedral(dihedral(wide, 4), 4) == wide);
  CHECK_THROWS_AS(dihedral(wide, 1), ConfigError);
  CHECK_THROWS_AS(dihedral(img, 8), UsageError);
}

TEST_CASE("augment applies one transform to both images") {
  Rng rng(3);
  const auto clean = synthetic_image(3, 8, 8, rng);
  const auto degraded = gaussian_noise(clean, 0.1, rng);
  for (int i = 0; i < 20; ++i) {
    const auto [c, d] = augment(clean, degraded, rng);
    int matches = 0;
    for (int k = 0; k < 8; ++k)
      if (c == dihedral(clean, k) && d == dihedral(degraded, k)) ++matches;
    CHECK(matches == 1);
  }
}

TEST_CASE("degradations") {
  Rng rng(4);
  const auto img = synthetic_image(3, 24, 24, rng);
  CHECK(gaussian_noise(img, 0.0, rng) == img);
  CHECK(box_blur(img, 1) == img);
  CHECK_THROWS_AS(box_blur(img, 4), ConfigError);
  CHECK_THROWS_AS(gaussian_noise(img, -1.0, rng), ConfigError);

  // Far from the clip bounds the noise keeps its standard deviation.
  const auto flat = Image::filled(1, 64, 64, 0.5);
  const auto noisy = gaussian_noise(flat, 0.05, rng);
  double s = 0.0, s2 = 0.0;
  for (double v : noisy.data) s += v - 0.5, s2 += (v - 0.5) * (v - 0.5);
  const double n = static_cast<double>(noisy.data.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(std::abs(sd / 0.05 - 1.0) < 0.1);

  // A box blur preserves constants and lowers variation.
  CHECK(box_blur(flat, 5) == flat);
  const auto blurred = box_blur(noisy, 3);
  double b2 = 0.0;
  for (double v : blurred.data) b2 += (v - 0.5) * (v - 0.5);
  CHECK(b2 < s2 / 4);

  const auto rain = rain_streaks(img, 10, 8.0, 75.0, 0.5, rng);
  bool changed = false;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    CHECK(rain.data[i] >= img.data[i]);
    changed = changed || rain.data[i] != img.data[i];
  }
  CHECK(changed);

  DegradationSpec spec;
  spec.kind = DegradationSpec::Kind::box_blur;
  spec.blur_kernel = 3;
  CHECK(synth_degrade(img, spec, rng) == box_blur(img, 3));
  CHECK(parse_degradation(to_string(DegradationSpec::Kind::rain_streaks)) == DegradationSpec::Kind::rain_streaks);
  CHECK_THROWS_AS(parse_degradation("snow"), ConfigError);
}

TEST_CASE("synthetic data is deterministic and in range") {
  const auto t = short_run(1);
  const auto a = make_synthetic_data(t, 3), b = make_synthetic_data(t, 3);
  CHECK(a.train_clean.size() == 4);
  CHECK(a.val_clean.size() == 1);
  CHECK(a.train_clean == b.train_clean);
  CHECK(a.train_degraded == b.train_degraded);
  for (const auto& img : a.train_clean)
    for (double v : img.data) CHECK((v >= 0.05 - 1e-12 && v <= 0.95 + 1e-12));
}

TEST_CASE("training data from a directory") {
  const auto dir = testing::scratch_dir("train_data");
  std::filesystem::create_directories(dir / "clean");
  std::filesystem::create_directories(dir / "degraded");
  Rng rng(5);
  for (const char* name : {"a.png", "b.png", "c.png"}) {
    const auto clean = synthetic_image(3, 20, 24, rng);
    write_png(dir / "clean" / name, clean);
    write_png(dir / "degraded" / name, gaussian_noise(clean, 0.1, rng));
  }
  auto t = short_run(1);
  t.val_images = 1;
  const auto d = load_training_data(dir, t);
  CHECK(d.train_clean.size() == 2);
  CHECK(d.val_clean.size() == 1);
  CHECK(d.train_clean[0].height == 16);
  CHECK(d.train_clean[0].width == 16);

  t.val_images = 3;
  CHECK_THROWS_AS(load_training_data(dir, t), ConfigError);
  t.val_images = 1;
  std::filesystem::remove(dir / "degraded" / "b.png");
  CHECK_THROWS_AS(load_training_data(dir, t), ConfigError);
  CHECK_THROWS_AS(load_training_data(dir / "nowhere", t), ConfigError);
}

TEST_CASE("training loop") {
  const auto dir = testing::scratch_dir("train_loop");
  const auto cfg = UformerConfig::tiny();

  SUBCASE("zero steps leaves the initialization") {
    auto t = short_run(0);
    auto model = build<float>(cfg, 7);
    OptimizerState<float> st;
    TrainIo io;
    io.checkpoint = dir / "t0.ckpt";
    const auto r = train_loop(model, st, t, make_synthetic_data(t, 3), io);
    CHECK(r.steps == 0);
    auto fresh = build<float>(cfg, 7);
    CHECK(snapshot(model) == snapshot(fresh));
    auto loaded = build<float>(cfg, 99);
    restore(read_checkpoint<float>(io.checkpoint), loaded);
    CHECK(snapshot(loaded) == snapshot(fresh));
  }

  SUBCASE("runs are reproducible and reduce the loss") {
    const auto t = short_run(6);
    const auto data = make_synthetic_data(t, 3);
    std::string logs[2];
    std::vector<std::vector<float>> params[2];
    for (int i = 0; i < 2; ++i) {
      auto model = build<float>(cfg, 0);
      OptimizerState<float> st;
      std::ostringstream log;
      TrainIo io;
      io.log = &log;
      const auto r = train_loop(model, st, t, data, io);
      CHECK(r.steps == 6);
      CHECK(st.step == 6);
      logs[i] = log.str();
      params[i] = snapshot(model);
    }
    CHECK(logs[0] == logs[1]);
    CHECK(params[0] == params[1]);
    CHECK(logs[0].rfind("step,lr,loss,val_psnr\n", 0) == 0);
    CHECK(std::count(logs[0].begin(), logs[0].end(), '\n') == 7);
  }

  SUBCASE("interrupted and resumed runs match an uninterrupted one") {
    auto t = short_run(6);
    t.augment = true;
    const auto data = make_synthetic_data(t, 3);

    auto whole = build<double>(cfg, 0);
    OptimizerState<double> ws;
    std::ostringstream whole_log;
    train_loop(whole, ws, t, data, TrainIo{dir / "whole.ckpt", &whole_log, "", 0});

    std::ostringstream part_log;
    {
      auto m = build<double>(cfg, 0);
      OptimizerState<double> st;
      train_loop(m, st, t, data, TrainIo{dir / "part.ckpt", &part_log, "", 3});
      CHECK(st.step == 3);
    }
    auto m = build<double>(cfg, 0);
    OptimizerState<double> st;
    restore(read_checkpoint<double>(dir / "part.ckpt"), m, &st);
    CHECK(st.step == 3);
    const auto r = train_loop(m, st, t, data, TrainIo{dir / "part.ckpt", &part_log, "", 0});
    CHECK(r.steps == 3);
    CHECK(snapshot(m) == snapshot(whole));
    CHECK(part_log.str() == whole_log.str());
  }

  SUBCASE("a non-finite loss aborts and keeps the last good state") {
    const auto t = short_run(4);
    const auto data = make_synthetic_data(t, 3);
    auto model = build<float>(cfg, 0);
    OptimizerState<float> st;
    const auto path = dir / "bad.ckpt";
    train_loop(model, st, t, data, TrainIo{path, nullptr, "", 2});
    const auto good = snapshot(model);

    // Finite but huge weights overflow the forward pass: the pre-step state is written.
    auto params = model.parameters();
    params.front().tensor.mutable_data()[0] = 1e30f;
    CHECK_THROWS_AS(train_loop(model, st, t, data, TrainIo{path, nullptr, "", 0}), TrainingError);
    auto reloaded = build<float>(cfg, 0);
    OptimizerState<float> rs;
    restore(read_checkpoint<float>(path), reloaded, &rs);
    CHECK(rs.step == 2);
    CHECK(reloaded.parameters().front().tensor.data()[0] == 1e30f);

    // Non-finite weights are never written over an existing checkpoint.
    restore(read_checkpoint<float>(path), model, &st);
    params.front().tensor.mutable_data()[0] = good.front()[0];
    save_checkpoint(path, "", model, &st);
    params.front().tensor.mutable_data()[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(train_loop(model, st, t, data, TrainIo{path, nullptr, "", 0}), TrainingError);
    restore(read_checkpoint<float>(path), reloaded, &rs);
    CHECK(snapshot(reloaded) == good);
  }

  SUBCASE("gradient clipping bounds the update") {
    auto t = short_run(2);
    t.grad_clip = 1e-3;
    auto model = build<float>(cfg, 0);
    OptimizerState<float> st;
    CHECK(train_loop(model, st, t, make_synthetic_data(t, 3)).steps == 2);
  }

  SUBCASE("bad configs") {
    auto t = short_run(2);
    auto model = build<float>(cfg, 0);
    OptimizerState<float> st;
    t.lr_end = 1.0;
    CHECK_THROWS_AS(train_loop(model, st, t, make_synthetic_data(short_run(2), 3)), ConfigError);
    t = short_run(2);
    st.step = 5;
    st.m.assign(model.parameters().size(), {});
    CHECK_THROWS_AS(train_loop(model, st, t, make_synthetic_data(t, 3)), ConfigError);
  }
}

TEST_CASE("checkpoint files") {
  const auto dir = testing::scratch_dir("checkpoint");
  const auto cfg = UformerConfig::tiny();
  auto model = build<float>(cfg, 3);
  auto params = model.parameters();
  auto st = OptimizerState<float>::init(params);
  st.step = 11;
  for (auto& m : st.m) std::fill(m.begin(), m.end(), 0.25f);
  for (auto& v : st.v) std::fill(v.begin(), v.end(), 0.5f);
  const auto path = dir / "a.ckpt";
  save_checkpoint(path, "model.c = 8\n", model, &st);
  CHECK(read_checkpoint_config(path) == "model.c = 8\n");

  SUBCASE("round trip with optimizer state") {
    auto other = build<float>(cfg, 4);
    OptimizerState<float> os;
    restore(read_checkpoint<float>(path), other, &os);
    CHECK(snapshot(other) == snapshot(model));
    CHECK(os.step == 11);
    CHECK(os.m == st.m);
    CHECK(os.v == st.v);
    // Loading without an optimizer ignores the moments.
    auto third = build<float>(cfg, 5);
    restore(read_checkpoint<float>(path), third);
    CHECK(snapshot(third) == snapshot(model));
  }

  SUBCASE("a float checkpoint loads into a double model") {
    auto d = build<double>(cfg, 0);
    restore(read_checkpoint<double>(path), d);
    CHECK(d.parameters().front().tensor.data()[0] == static_cast<double>(params.front().tensor.data()[0]));
  }

  SUBCASE("structural mismatches") {
    auto ck = read_checkpoint<float>(path);
    auto other = build<float>(cfg, 0);
    {
      auto c = ck;
      c.tensors.erase(c.tensors.begin());
      CHECK_THROWS_AS(restore(c, other), FormatError);
    }
    {
      auto c = ck;
      c.tensors.push_back(c.tensors.front());
      CHECK_THROWS_AS(restore(c, other), FormatError);
    }
    {
      auto c = ck;
      c.tensors.emplace_back("stray", Tensor<float>::zeros({1}));
      CHECK_THROWS_AS(restore(c, other), FormatError);
    }
    {
      auto c = ck;
      c.tensors.front().second = Tensor<float>::zeros({1, 2});
      CHECK_THROWS_AS(restore(c, other), FormatError);
    }
    auto bigger = cfg;
    bigger.base_channels = 16;
    auto wrong = build<float>(bigger, 0);
    CHECK_THROWS_AS(restore(ck, wrong), FormatError);
  }

  SUBCASE("damaged files") {
    std::ifstream in(path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(read_checkpoint<float>(dir / "short.ckpt"), FormatError);
    std::ofstream(dir / "magic.ckpt", std::ios::binary) << "XXXX" << bytes.substr(4);
    CHECK_THROWS_AS(read_checkpoint<float>(dir / "magic.ckpt"), FormatError);
    CHECK_THROWS_AS(read_checkpoint_config(dir / "magic.ckpt"), FormatError);
    CHECK_THROWS_AS(read_checkpoint<float>(dir / "missing.ckpt"), FormatError);
  }
}

TEST_CASE("run config text") {
  CHECK(parse_run_config("") == RunConfig{});
  CHECK(parse_run_config(serialize(RunConfig{})) == RunConfig{});

  RunConfig c;
  c.model = UformerConfig::uformer_b();
  c.model.skip_mode = SkipMode::concat_cross;
  c.model.modulator_before_shift = true;
  c.model.leaky_slope = 0.1;
  c.train.lr_start = 3e-4;
  c.train.epsilon = 1e-4;
  c.train.seed = 12345678901ULL;
  c.train.augment = false;
  c.train.degradation.kind = DegradationSpec::Kind::rain_streaks;
  c.train.degradation.rain_angle = 60.5;
  c.train.grad_clip = 0.1;
  c.paths = {"data dir", "a.ckpt", "out"};
  c.deterministic = true;
  c.f64 = true;
  CHECK(parse_run_config(serialize(c)) == c);

  const auto d = parse_run_config("# comment\n\n  model.c = 24   # trailing\ntrain.augment = false\n");
  CHECK(d.model.base_channels == 24);
  CHECK(!d.train.augment);

  for (const char* name : {"tiny", "smoke", "uformer-t", "uformer-s", "uformer-b"}) {
    const auto path = std::filesystem::path(UFORMER_CONFIG_DIR) / (std::string(name) + ".cfg");
    INFO(name);
    const auto rc = load_run_config(path);
    CHECK_NOTHROW(rc.validate());
    CHECK(parse_run_config(serialize(rc)) == rc);
  }
  CHECK(load_run_config(std::filesystem::path(UFORMER_CONFIG_DIR) / "uformer-b.cfg").model ==
        UformerConfig::uformer_b());
  CHECK(load_run_config(std::filesystem::path(UFORMER_CONFIG_DIR) / "tiny.cfg").model == UformerConfig::tiny());

  auto message = [](const std::string& text) {
    try {
      parse_run_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("model.c = 8\nmodel.colour = 3\n").find("line 2") != std::string::npos);
  CHECK(message("model.c = 8\nmodel.c = 9\n").find("duplicate") != std::string::npos);
  CHECK(message("model.c = eight\n").find("model.c") != std::string::npos);
  CHECK(message("model.c = 8.5\n") != "");
  CHECK(message("train.augment = maybe\n") != "");
  CHECK(message("just words\n").find("line 1") != std::string::npos);
  CHECK(message("model.skip = sideways\n") != "");
  CHECK_THROWS_AS(load_run_config("/nonexistent/x.cfg"), ConfigError);

  RunConfig bad;
  bad.train.beta1 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.train.epsilon = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.model.window = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

}
