#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "doctest.h"
#include "support.hpp"
#include "upm/error.hpp"
#include "upm/ops.hpp"
#include "upm/trainer.hpp"

using namespace upm;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.image_size = 16;
  e.patch_size = 8;
  e.embed_dim = 16;
  e.num_blocks = 1;
  e.num_heads = 2;
  e.mlp_ratio = 2;
  return e;
}

std::vector<Scene> tiny_scenes(std::size_t n, std::uint64_t base = 100) {
  SceneSpec s = SceneSpec::desk();
  s.image_size = 16;
  s.ring.view_count = 4;
  s.min_points = 4;
  std::vector<Scene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(s, base + i));
  return out;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 1;
  t.scenes_per_batch = 2;
  t.views_per_scene = 4;
  t.min_points = 4;
  t.chamfer_points = 64;
  t.learning_rate = 1e-3;
  t.seed = 3;
  return t;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Textbook AdamW on one scalar, written out by hand.
double adamw_oracle(double w, const std::vector<double>& grads, double lr, const AdamWConfig& c) {
  double m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t)), vh = v / (1 - std::pow(c.beta2, t));
    w = w - lr * mh / (std::sqrt(vh) + c.eps) - lr * c.weight_decay * w;
  }
  return w;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 1.0, 0.1) == 0.0);
    CHECK(cosine_lr(5, 100, 1.0, 0.1) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(cosine_lr(10, 100, 1.0, 0.1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_lr(55, 100, 1.0, 0.1) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(std::abs(cosine_lr(100, 100, 1.0, 0.1)) <= 1e-15);
    CHECK(cosine_lr(0, 1, 2.0, 0.0) == 2.0);
    CHECK(cosine_lr(1, 1, 2.0, 0.0) == 0.0);
    const double q = cosine_lr(32, 100, 3.0, 0.1);
    CHECK(q == doctest::Approx(3.0 * 0.5 * (1 + std::cos(std::numbers::pi * 22.0 / 90.0))).epsilon(1e-14));
    CHECK_THROWS_AS(cosine_lr(101, 100, 1.0, 0.1), ContractError);
  }

  TEST_CASE("adamw matches a scalar oracle") {
    const AdamWConfig c{0.9, 0.98, 0.05, 1e-8};
    const std::vector<double> grads{0.3, -1.2, 0.05, 2.0, -0.4};
    Tensor w = Tensor::scalar(0.8, true);
    std::vector<Parameter> params{{"w", w, true}};
    OptimizerState st;
    for (const double g : grads) {
      w.zero_grad();
      backward(w * g);
      adamw_step(params, st, 0.01, c);
    }
    CHECK(w.at(0) == doctest::Approx(adamw_oracle(0.8, grads, 0.01, c)).epsilon(1e-14));
    CHECK(st.step == grads.size());
  }

  TEST_CASE("zero gradient applies only the decoupled decay") {
    const AdamWConfig c{0.9, 0.98, 0.05, 1e-8};
    Tensor w = Tensor::vector({2.0, -3.0}, true);
    Tensor nd = Tensor::vector({2.0}, true);
    std::vector<Parameter> params{{"w", w, true}, {"nd", nd, false}};
    OptimizerState st;
    adamw_step(params, st, 0.1, c);
    CHECK(w.at(0) == doctest::Approx(2.0 * (1 - 0.1 * 0.05)).epsilon(1e-15));
    CHECK(w.at(1) == doctest::Approx(-3.0 * (1 - 0.1 * 0.05)).epsilon(1e-15));
    CHECK(nd.at(0) == 2.0);
  }

  TEST_CASE("non-finite gradient names the parameter and updates nothing") {
    Tensor a = Tensor::vector({1.0, 1.0}, true), b = Tensor::vector({1.0}, true);
    backward(sum(a));
    backward(sum(b * std::numeric_limits<double>::infinity()));
    std::vector<Parameter> params{{"alpha", a, true}, {"beta.w", b, true}};
    OptimizerState st;
    try {
      adamw_step(params, st, 0.1, AdamWConfig{});
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("beta.w") != std::string::npos);
    }
    CHECK(a.at(0) == 1.0);
    CHECK(b.at(0) == 1.0);
  }

  TEST_CASE("gradient clipping rescales to the cap") {
    Tensor a = Tensor::vector({0.0, 0.0}, true), b = Tensor::vector({0.0}, true);
    backward(dot(a, Tensor::vector({3.0, 0.0})) + sum(b * 4.0));
    std::vector<Parameter> params{{"a", a, true}, {"b", b, true}};
    CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(b.grad()[0] == doctest::Approx(0.8));
    CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(1.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
  }

  TEST_CASE("config validation") {
    TrainConfig t = tiny_train();
    CHECK_NOTHROW(t.validate());
    t.scenes_per_batch = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = tiny_train();
    t.use_geo = t.use_ground = t.use_view = t.use_scene = false;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = tiny_train();
    t.learning_rate = -1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    const TrainConfig p = TrainConfig::paper();
    CHECK(p.scenes_per_batch == 64);
    CHECK(p.views_per_scene == 32);
    CHECK(p.epochs == 80);
    CHECK(p.learning_rate == 1e-4);
  }

  TEST_CASE("one epoch smoke run logs consistent rows") {
    testing::TempDir tmp("train");
    const auto scenes = tiny_scenes(4);
    const auto val = tiny_scenes(2, 500);
    const TrainConfig t = tiny_train();
    const TrainResult r = train(scenes, val, t, tiny_encoder(), TrainOutputs::in(tmp.path()));
    REQUIRE(r.steps.size() == 2);
    CHECK(fs::exists(tmp / "final.ckpt"));
    CHECK(fs::exists(tmp / "best.ckpt"));
    const auto rows = read_metrics_log(tmp / "metrics.tsv");
    REQUIRE(rows.size() == 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& m = rows[i];
      CHECK(m.step == i + 1);
      const double again = combine_terms(m.loss.l_geo, m.loss.l_ground, m.loss.l_view, m.loss.l_scene, t.loss_lambda);
      CHECK(std::abs(again - m.loss.total) <= 1e-12);
      CHECK(m.loss.total == r.steps[i].loss.total);
      CHECK(m.tau >= Temperature::kMin);
      CHECK(m.tau <= Temperature::kMax);
      CHECK(std::isfinite(m.loss.total));
    }
    CHECK(r.epoch_val_loss.size() == 1);
  }

  TEST_CASE("training is deterministic down to checkpoint bytes") {
    testing::TempDir a("det_a"), b("det_b");
    const auto scenes = tiny_scenes(4);
    const TrainConfig t = tiny_train();
    train(scenes, {}, t, tiny_encoder(), TrainOutputs::in(a.path()));
    train(scenes, {}, t, tiny_encoder(), TrainOutputs::in(b.path()));
    CHECK(bytes(a / "final.ckpt") == bytes(b / "final.ckpt"));
    CHECK(bytes(a / "metrics.tsv") == bytes(b / "metrics.tsv"));
    TrainConfig other = t;
    other.seed = 4;
    testing::TempDir c("det_c");
    train(scenes, {}, other, tiny_encoder(), TrainOutputs::in(c.path()));
    CHECK(bytes(a / "final.ckpt") != bytes(c / "final.ckpt"));
  }

  TEST_CASE("disabled geometric term logs zero") {
    TrainConfig t = tiny_train();
    t.use_geo = false;
    const TrainResult r = train(tiny_scenes(4), {}, t, tiny_encoder());
    for (const auto& m : r.steps) {
      CHECK(m.loss.l_geo == 0.0);
      CHECK(m.loss.total == doctest::Approx(m.loss.l_ground + m.loss.l_view + m.loss.l_scene).epsilon(1e-14));
    }
  }

  TEST_CASE("loss falls when overfitting a few scenes") {
    TrainConfig t = tiny_train();
    t.epochs = 40;
    t.warmup_fraction = 0.0;
    const TrainResult r = train(tiny_scenes(2), {}, t, tiny_encoder());
    REQUIRE(r.steps.size() == 40);
    CHECK(r.steps.back().loss.total < 0.7 * r.steps.front().loss.total);
  }

  TEST_CASE("checkpoint round trip restores the model") {
    const TrainResult r = train(tiny_scenes(2), {}, tiny_train(), tiny_encoder());
    const Checkpoint ck = make_checkpoint(r.final_model, tiny_train(), r.steps.size());
    const TrainedModel m = model_from_checkpoint(ck);
    CHECK(m.config == r.final_model.config);
    REQUIRE(m.temperatures.size() == r.final_model.temperatures.size());
    CHECK(m.temperatures[0].value() == r.final_model.temperatures[0].value());
    const auto x = m.params.named(), y = r.final_model.params.named();
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(x[i].name == y[i].name);
      CHECK(std::equal(x[i].tensor.data().begin(), x[i].tensor.data().end(), y[i].tensor.data().begin()));
    }
  }

  TEST_CASE("per-loss temperatures and frozen text") {
    TrainConfig t = tiny_train();
    t.per_loss_temperature = true;
    t.freeze_text = true;
    const auto init = EncoderParams::init(tiny_encoder(), t.seed);
    const TrainResult r = train(tiny_scenes(2), {}, t, tiny_encoder());
    CHECK(r.final_model.temperatures.size() == 4);
    const auto before = init.named_text(), after = r.final_model.params.named_text();
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      CHECK(std::equal(before[i].tensor.data().begin(), before[i].tensor.data().end(), after[i].tensor.data().begin()));
    }
  }

  TEST_CASE("evaluate_loss is finite and repeatable") {
    const auto scenes = tiny_scenes(2);
    const TrainResult r = train(scenes, {}, tiny_train(), tiny_encoder());
    const double a = evaluate_loss(r.final_model, scenes, tiny_train());
    CHECK(std::isfinite(a));
    CHECK(evaluate_loss(r.final_model, scenes, tiny_train()) == a);
  }
}
