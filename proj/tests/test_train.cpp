#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "treenet/synth.hpp"
#include "treenet/train.hpp"

using namespace treenet;
using namespace treenet::testing;

namespace {

const ModelConfig kTiny{8, 8, 8, 4, 5};

TrainConfig tiny_config(const std::string& data, const std::string& out) {
  TrainConfig cfg;
  cfg.model = kTiny;
  cfg.batch = 4;
  cfg.crop = 64;
  cfg.data_dir = data;
  cfg.out_dir = out;
  cfg.seed = 5;
  return cfg;
}

Tensor<float> batch_of(uint64_t seed, int64_t n) {
  Rng rng(seed);
  Tensor<float> out(Shape{n, 3, 64, 64});
  for (int64_t b = 0; b < n; ++b) {
    const Tensor<float> img = synth_image(rng, 64, 64);
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + b * img.numel());
  }
  return out;
}

int count_lines(const std::string& path) {
  const std::vector<uint8_t> bytes = file_bytes(path);
  return static_cast<int>(std::count(bytes.begin(), bytes.end(), '\n'));
}

}  // namespace

TEST_SUITE("train_engine") {

TEST_CASE("config files") {
  TrainConfig cfg;
  apply_config(parse_key_values("", "empty.cfg"), cfg);
  CHECK(cfg.lambda1 == 0.01);
  CHECK(cfg.lambda2 == 2.4);
  CHECK(cfg.batch == 16);
  CHECK(cfg.model == ModelConfig{});

  const auto kv = parse_key_values("# comment\n\nbatch = 8\n  lr=0.001  # trailing\nchannels = 16\n", "a.cfg");
  CHECK(kv.size() == 3);
  apply_config(kv, cfg);
  CHECK(cfg.batch == 8);
  CHECK(cfg.lr == 0.001);
  CHECK(cfg.model.channels == 16);

  apply_config({{"batch", "2"}}, cfg);
  CHECK(cfg.batch == 2);

  CHECK_THROWS_WITH_AS(parse_key_values("batch = 1\nlr = 2\nbatch = 3\n", "dup.cfg"), doctest::Contains("dup.cfg:3"), Error);
  CHECK_THROWS_WITH_AS(parse_key_values("batch = 1\njust words\n", "bad.cfg"), doctest::Contains("bad.cfg:2"), Error);
  CHECK_THROWS_WITH_AS(parse_key_values("= 4\n", "bad.cfg"), doctest::Contains("bad.cfg:1"), Error);

  TrainConfig other;
  try {
    apply_config({{"bogus", "1"}, {"nonsense", "2"}}, other);
    FAIL("unknown keys accepted");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    CHECK(std::string(e.what()).find("nonsense") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_config({{"batch", "many"}}, other), Error);
  CHECK_THROWS_AS(apply_config({{"batch", "4x"}}, other), Error);
  for (const std::string& key : config_keys()) CHECK(describe(TrainConfig{}).find(key) != std::string::npos);
}

TEST_CASE("lambda index selects its pair") {
  for (int i = 0; i < 4; ++i) {
    TrainConfig cfg;
    apply_config({{"lambda_index", std::to_string(i)}}, cfg);
    CHECK(cfg.lambda1 == kLambdaPairs[i].first);
    CHECK(cfg.lambda2 == kLambdaPairs[i].second);
  }
  TrainConfig cfg;
  apply_config({{"lambda_index", "2"}, {"lambda2", "0"}}, cfg);
  CHECK(cfg.lambda1 == kLambdaPairs[2].first);
  CHECK(cfg.lambda2 == 0);
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda1 = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  TrainConfig bad;
  bad.crop = 100;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = TrainConfig{};
  bad.lambda_index = 4;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("loss decomposition") {
  const TreeNet<float> model(kTiny, 1);
  const Tensor<float> batch = batch_of(1, 2);
  Rng r1(9), r2(9);
  Tape<float> t1, t2;
  const LossGraph a = loss_eval(model, batch, 0.01, 2.4, r1, t1);
  const LossGraph b = loss_eval(model, batch, 0.01, 2.4, r2, t2);
  CHECK(a.report.total == b.report.total);
  CHECK(a.loss.value()[0] == doctest::Approx(a.report.recomposed()).epsilon(1e-5));
  CHECK(a.report.total == doctest::Approx(a.report.recomposed()).epsilon(1e-12));
  CHECK(a.report.bpp_y > 0);
  CHECK(a.report.bpp_z > 0);
  CHECK(a.report.mse > 0);
  CHECK((a.report.msssim_term > 0 && a.report.msssim_term < 2));

  Rng r3(9);
  Tape<float> t3;
  const LossGraph plain = loss_eval(model, batch, 0.01, 0.0, r3, t3);
  CHECK(plain.report.total == doctest::Approx(plain.report.bpp() + 0.01 * plain.report.mse).epsilon(1e-9));
  CHECK(plain.report.mse == doctest::Approx(a.report.mse).epsilon(1e-9));
  CHECK(plain.report.bpp() == doctest::Approx(a.report.bpp()).epsilon(1e-9));

  Rng r4(10);
  Tape<float> t4;
  CHECK(loss_eval(model, batch, 0.01, 2.4, r4, t4).report.total != a.report.total);
}

TEST_CASE("every parameter receives gradient") {
  TreeNet<float> model(ModelConfig{}, 2);
  ParamList<float> params = model.parameters();
  std::vector<Var<float>> vars;
  for (auto* p : params) vars.push_back(p->var);
  Rng rng(3);
  Tape<float> tape;
  tape.backward(loss_eval(model, batch_of(2, 2), 0.01, 2.4, rng, tape).loss, vars);
  int dead = 0;
  for (auto* p : params) {
    double norm = 0;
    for (float g : p->grad().data()) norm += static_cast<double>(g) * g;
    if (!(norm > 0) || !std::isfinite(norm)) {
      ++dead;
      MESSAGE("no gradient for " << p->name);
    }
  }
  CHECK(dead == 0);
}

TEST_CASE("data pipeline") {
  Rng rng(4);
  std::vector<Tensor<float>> images;
  for (int i = 0; i < 10; ++i) images.push_back(synth_image(rng, 80, 96));
  const DataPipeline data(images, 3, 64, 7);
  CHECK(data.batches_per_epoch() == 3);
  CHECK(data.batch(1, 2).shape() == Shape{3, 3, 64, 64});
  CHECK(bit_equal(data.batch(1, 2), data.batch(1, 2)));
  CHECK_FALSE(bit_equal(data.batch(1, 2), data.batch(2, 2)));
  std::vector<size_t> order = data.order(3);
  std::sort(order.begin(), order.end());
  for (size_t i = 0; i < order.size(); ++i) CHECK(order[i] == i);
  CHECK(data.order(3) != data.order(4));
  CHECK_THROWS_AS(data.batch(0, 3), Error);

  std::vector<Tensor<float>> small = {synth_image(rng, 32, 32)};
  CHECK_THROWS_AS(DataPipeline(small, 1, 64, 1), Error);
  CHECK_THROWS_AS(DataPipeline({}, 1, 64, 1), Error);

  TempDir empty("empty_corpus");
  CHECK_THROWS_WITH_AS(DataPipeline::from_directory(empty.str(), 1, 64, 1), doctest::Contains("no readable images"), Error);
  write_text(empty / "broken.png", "not a png");
  CHECK_THROWS_AS(DataPipeline::from_directory(empty.str(), 1, 64, 1), Error);
  TrainConfig cfg = tiny_config(empty.str(), empty / "out");
  cfg.steps = 1;
  CHECK_THROWS_AS(train_loop(cfg), Error);
}

TEST_CASE("train step determinism") {
  TrainConfig cfg = tiny_config("", "");
  const Tensor<float> batch = batch_of(5, 2);
  TreeNet<float> a(kTiny, 3), b(kTiny, 3);
  for (uint64_t step = 0; step < 3; ++step) {
    const StepResult ra = train_step(a, batch, cfg, step);
    const StepResult rb = train_step(b, batch, cfg, step);
    CHECK(ra.report.total == rb.report.total);
    CHECK(ra.grad_norm == rb.grad_norm);
    CHECK_FALSE(ra.skipped);
  }
  const StateDict sa = model_state(a), sb = model_state(b);
  for (size_t i = 0; i < sa.size(); ++i) CHECK(bit_equal(sa[i].second, sb[i].second));
  const TreeNet<float> fresh(kTiny, 3);
  CHECK_FALSE(bit_equal(model_state(a)[0].second, model_state(const_cast<TreeNet<float>&>(fresh))[0].second));
}

TEST_CASE("resume reproduces an uninterrupted run") {
  TempDir dir("resume");
  make_corpus(dir / "data", 8, 64, 64, 3);
  TrainConfig whole = tiny_config(dir / "data", dir / "whole");
  whole.steps = 6;
  whole.checkpoint_every = 3;
  train_loop(whole);

  TrainConfig first = whole;
  first.out_dir = dir / "split";
  first.steps = 3;
  train_loop(first);
  CHECK(count_lines(dir / "split/train_log.csv") == 1 + 3);
  TrainConfig second = first;
  second.steps = 6;
  TrainOptions opts;
  opts.resume_from = dir / "split/checkpoint.tnwt";
  int seen = 0;
  opts.on_step = [&](int64_t step, const StepResult&) {
    CHECK(step >= 3);
    ++seen;
  };
  train_loop(second, opts);
  CHECK(seen == 3);

  CHECK(file_bytes(dir / "whole/model.tnwt") == file_bytes(dir / "split/model.tnwt"));
  CHECK(file_bytes(dir / "whole/train_log.csv") == file_bytes(dir / "split/train_log.csv"));
  CHECK(count_lines(dir / "whole/train_log.csv") == 1 + 6);

  const TrainedModel loaded = load_trained_model(dir / "whole/model.tnwt");
  CHECK(loaded.model.config() == kTiny);
  TrainConfig other = second;
  other.model.channels = 16;
  opts.on_step = nullptr;
  CHECK_THROWS_WITH_AS(train_loop(other, opts), doctest::Contains("config differs"), Error);
}

TEST_CASE("lambda index is stored with the weights") {
  TempDir dir("lambda");
  make_corpus(dir / "data", 4, 64, 64, 4);
  TrainConfig cfg = tiny_config(dir / "data", dir / "out");
  cfg.steps = 1;
  cfg.batch = 2;
  apply_config({{"lambda_index", "3"}}, cfg);
  const TrainedModel m = load_trained_model(train_loop(cfg));
  CHECK(m.lambda_index == 3);
}

TEST_CASE("loss decreases on a small corpus") {
  TempDir dir("descent");
  make_corpus(dir / "data", 16, 64, 64, 8);
  TrainConfig cfg = tiny_config(dir / "data", dir / "out");
  cfg.steps = 200;
  cfg.lr = 1e-3;
  cfg.checkpoint_every = 0;
  std::vector<double> losses;
  TrainOptions opts;
  opts.on_step = [&](int64_t, const StepResult& r) {
    CHECK_FALSE(r.skipped);
    losses.push_back(r.report.total);
  };
  train_loop(cfg, opts);
  REQUIRE(losses.size() == 200);
  auto mean = [&](size_t from) { return std::accumulate(losses.begin() + static_cast<long>(from), losses.begin() + static_cast<long>(from + 50), 0.0) / 50; };
  MESSAGE("moving averages " << mean(0) << " " << mean(50) << " " << mean(100) << " " << mean(150));
  CHECK(mean(150) < mean(0));
  CHECK(mean(150) < mean(50));
  CHECK(mean(100) < mean(0));
}

}
