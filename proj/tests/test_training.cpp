#include <cmath>
#include <functional>
#include <numbers>

#include "doctest.h"

#include "bsa/errors.hpp"
#include "bsa/training.hpp"
#include "support.hpp"

using namespace bsa;
using testing::max_abs_diff;
using testing::random_matrix;

namespace {

double param_hash(Pipeline& p) {
  double h = 0.0;
  double k = 1.0;
  for (auto* m : p.model->parameters()) {
    for (Eigen::Index i = 0; i < m->size(); ++i) h += (k += 0.618) * m->data()[i];
  }
  if (p.attention) {
    h += 3.1 * p.attention->sa_matrix().sum() + 7.3 * p.attention->raw_smoothing().sum();
  }
  return h;
}

// Two incommensurate sines: every future value is a fixed linear function of
// the previous four, so a linear forecaster can fit it exactly.
Matrix two_sines(long T, int channels) {
  Matrix v(T, channels);
  for (long t = 0; t < T; ++t) {
    for (int n = 0; n < channels; ++n) {
      v(t, n) = std::sin(2 * std::numbers::pi * t / 23.0 + n) +
                0.5 * std::sin(2 * std::numbers::pi * t / 7.0 + 0.3 * n);
    }
  }
  return v;
}

struct Setup {
  Matrix values;
  ConsecutiveSplit split;
  WindowSpec spec;
};

Setup noise_setup(std::uint64_t seed, long T = 400, int channels = 2, WindowSpec spec = {16, 4, 32}) {
  std::mt19937_64 rng(seed);
  Setup s;
  s.values = random_matrix(rng, T, channels);
  s.spec = spec;
  s.split = consecutive_split(T, SplitRatios{}, spec);
  return s;
}

}  // namespace

TEST_CASE("adam with a zero gradient keeps parameters and decays moments") {
  std::vector<double> w{1.0, -2.0};
  std::vector<double> g{0.5, 0.25};
  AdamState st;
  adam_step({std::span<double>(w)}, {std::span<const double>(g)}, st, 0.1);
  const auto before = w;
  const auto m = st.first_moment[0];
  const auto v = st.second_moment[0];
  std::vector<double> zero{0.0, 0.0};
  adam_step({std::span<double>(w)}, {std::span<const double>(zero)}, st, 0.0);
  CHECK(w == before);
  CHECK(st.first_moment[0][0] == doctest::Approx(0.9 * m[0]));
  CHECK(st.second_moment[0][1] == doctest::Approx(0.999 * v[1]));

  std::vector<double> fresh{3.0};
  std::vector<double> z{0.0};
  AdamState s2;
  adam_step({std::span<double>(fresh)}, {std::span<const double>(z)}, s2, 0.1);
  CHECK(fresh[0] == 3.0);
}

TEST_CASE("adam minimises a scalar quadratic") {
  std::vector<double> w{1.0};
  AdamState st;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> g{2.0 * w[0]};
    adam_step({std::span<double>(w)}, {std::span<const double>(g)}, st, 0.1);
  }
  CHECK(w[0] * w[0] < 1e-3);
}

TEST_CASE("adam first step has magnitude lr") {
  std::vector<double> w{0.0, 0.0, 0.0};
  std::vector<double> g{3.0, -1e-3, 250.0};
  AdamState st;
  adam_step({std::span<double>(w)}, {std::span<const double>(g)}, st, 0.01);
  CHECK(w[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(w[1] == doctest::Approx(0.01).epsilon(1e-4));
  CHECK(w[2] == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adam rejects non-finite gradients with the tensor name") {
  std::vector<double> w{0.0, 0.0};
  std::vector<double> g{0.0, NAN};
  AdamState st;
  try {
    adam_step({std::span<double>(w)}, {std::span<const double>(g)}, st, 0.1, {}, {"trend_weight[0]"});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("trend_weight[0]") != std::string::npos);
    CHECK(msg.find("element 1") != std::string::npos);
  }
  CHECK(w[0] == 0.0);
}

TEST_CASE("warm-up schedule") {
  const Vector a{{0.9, 0.99, 0.999}};
  CHECK(warmup_timesteps(a) == 1000);
  CHECK(warmup_timesteps(Vector{{0.9}}) == 10);
  CHECK(warmup_timesteps(Vector{{0.99}}) == 100);
  CHECK(warmup_steps(a, 250) == 4);
  CHECK(warmup_steps(a, 256) == 4);
  CHECK(warmup_steps(a, 1) == 1000);
  CHECK(warmup_schedule(a, 0.1, 0, 250) == doctest::Approx(0.025));
  CHECK(warmup_schedule(a, 0.1, 2, 250) == doctest::Approx(0.075));
  CHECK(warmup_schedule(a, 0.1, 3, 250) == 0.1);
  CHECK(warmup_schedule(a, 0.1, 50, 250) == 0.1);
  CHECK(warmup_schedule(a, 0.1, 999, 1) == 0.1);
  CHECK(warmup_schedule(a, 0.1, 998, 1) < 0.1);
}

TEST_CASE("weighted validation") {
  CHECK(validation_weight(0, 37) == 0.5);
  CHECK(validation_weight(37, 37) == 1.0);
  std::vector<double> flat(11, 2.5);
  CHECK(weighted_validation(flat, 10) == doctest::Approx(2.5).epsilon(1e-15));
  std::vector<double> two{1.0, 0.0};
  CHECK(weighted_validation(two, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  std::vector<double> late{0.0, 0.0, 1.0};
  std::vector<double> early{1.0, 0.0, 0.0};
  CHECK(weighted_validation(late, 2) > weighted_validation(early, 2));
}

TEST_CASE("mse helpers") {
  ChannelBatch p{Matrix::Constant(2, 3, 1.0)};
  ChannelBatch t{Matrix::Zero(2, 3)};
  t[0](1, 2) = 4.0;
  CHECK(mse_loss(p, t) == doctest::Approx((5.0 + 9.0) / 6.0));
  const auto per = per_sample_mse(p, t);
  CHECK(per[0] == doctest::Approx(1.0));
  CHECK(per[1] == doctest::Approx((2.0 + 9.0) / 3.0));
  const auto g = mse_gradient(p, t);
  CHECK(g[0](0, 0) == doctest::Approx(2.0 / 6.0));
  CHECK(g[0](1, 2) == doctest::Approx(-6.0 / 6.0));
}

TEST_CASE("frozen identity attention trains like the bare model") {
  const auto s = noise_setup(1);
  std::mt19937_64 rng(2);
  Pipeline bare(make_forecaster(ModelKind::dlinear, {16, 4, 2}, 5));
  bare.model->init_parameters(rng);
  Pipeline wrapped = bare;
  attach_attention(wrapped, Vector{{0.9, 0.99, 0.999}});

  TrainConfig cfg;
  cfg.lr_model = 1e-2;
  cfg.lr_sa_matrix = 0.0;
  cfg.lr_smoothing = 0.0;
  cfg.warmup = false;
  cfg.epochs = 2;
  const auto ra = fit(bare, s.values, s.split, s.spec, cfg);
  const auto rb = fit(wrapped, s.values, s.split, s.spec, cfg);
  auto pa = bare.model->parameters();
  auto pb = wrapped.model->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(max_abs_diff(*pa[i], *pb[i]) <= 1e-12);
  CHECK(ra.epochs[1].train_loss == doctest::Approx(rb.epochs[1].train_loss).epsilon(1e-12));
}

TEST_CASE("a realizable target is fitted") {
  const Matrix v = two_sines(600, 1);
  const WindowSpec spec{16, 4, 16};
  const auto split = consecutive_split(600, SplitRatios{}, spec);
  std::mt19937_64 rng(3);
  Pipeline p(make_forecaster(ModelKind::dlinear, {16, 4, 1}, 5));
  p.model->init_parameters(rng);
  TrainConfig cfg;
  cfg.lr_model = 3e-3;
  cfg.epochs = 50;
  const auto run = fit(p, v, split, spec, cfg);
  INFO("final train loss ", run.epochs.back().train_loss);
  CHECK(run.epochs.back().train_loss < 1e-6);
}

TEST_CASE("epochs restart the momentum from the first training window") {
  const auto s = noise_setup(4);
  std::mt19937_64 rng(5);
  Pipeline p(make_forecaster(ModelKind::rlinear, {16, 4, 2}));
  p.model->init_parameters(rng);
  attach_attention(p, Vector{{0.9, 0.99}});

  init_epoch_momentum(p, s.values, s.split, s.spec);
  const auto first = make_batch(s.values, IndexRange{s.split.train.first, s.split.train.first}, s.spec);
  const Vector seed = p.momentum_seed(first.inputs);
  for (int k = 0; k < 2; ++k) CHECK(p.attention->momentum().row(k) == seed.transpose());

  TrainConfig cfg;
  TrainRun run_a;
  std::mt19937_64 ra(0);
  train_epoch(p, s.values, s.split, s.spec, cfg, run_a, ra);
  Pipeline q = p;
  TrainRun run_b = run_a;
  std::mt19937_64 rb = ra;
  q.attention->set_momentum(random_matrix(rng, 2, 2, 50.0));
  const auto ea = train_epoch(p, s.values, s.split, s.spec, cfg, run_a, ra);
  const auto eb = train_epoch(q, s.values, s.split, s.spec, cfg, run_b, rb);
  CHECK(ea.train_loss == eb.train_loss);
  CHECK(max_abs_diff(p.attention->momentum(), q.attention->momentum()) == 0.0);
}

TEST_CASE("gap samples only move the momentum") {
  const auto s = noise_setup(6);
  std::mt19937_64 rng(7);
  Pipeline p(make_forecaster(ModelKind::dlinear, {16, 4, 2}, 5));
  p.model->init_parameters(rng);
  attach_attention(p, Vector{{0.9, 0.99}});
  init_epoch_momentum(p, s.values, s.split, s.spec);
  const double h = param_hash(p);
  const Matrix before = p.attention->momentum();
  forward_momentum_only(p, s.values, s.split.gap_train_val, s.spec);
  CHECK(param_hash(p) == h);
  CHECK(max_abs_diff(before, p.attention->momentum()) > 0.0);

  TrainConfig cfg;
  TrainRun run;
  std::mt19937_64 r(0);
  const auto rec = train_epoch(p, s.values, s.split, s.spec, cfg, run, r);
  CHECK(rec.train_samples == s.split.train.size());
  CHECK(rec.val_samples == s.split.val.size());
  CHECK(rec.momentum_only_samples == s.split.gap_train_val.size());
}

TEST_CASE("evaluation") {
  SUBCASE("perfect predictor") {
    Matrix v = Matrix::Constant(200, 2, 1.5);
    const WindowSpec spec{10, 3, 16};
    const auto split = consecutive_split(200, SplitRatios{}, spec);
    auto model = std::make_unique<DLinearModel>(ForecastShape{10, 3, 2}, 3);
    for (auto& w : model->trend_weights()) w.setConstant(0.1);
    Pipeline p(std::move(model));
    const auto m = evaluate(p, v, split, spec, SplitPart::test);
    CHECK(m.mse <= 1e-28);
    CHECK(m.mae <= 1e-14);
    CHECK(m.samples == split.test.size());
  }
  SUBCASE("zero predictor on standardised noise") {
    std::mt19937_64 rng(8);
    const Matrix v = random_matrix(rng, 4000, 2);
    const WindowSpec spec{8, 4, 64};
    const auto split = consecutive_split(4000, SplitRatios{}, spec);
    const auto stats = train_statistics(v, split.boundaries.train_end);
    const Matrix z = (v.rowwise() - stats.mean.transpose()).array().rowwise() / stats.stdev.transpose().array();
    Pipeline p(make_forecaster(ModelKind::dlinear, {8, 4, 2}, 3));
    const auto m = evaluate(p, z, split, spec, SplitPart::test);
    CHECK(m.mse == doctest::Approx(1.0).epsilon(0.1));
  }
  SUBCASE("two samples by hand") {
    // L = 1, S = 2, one channel, zero weights and bias [1, -1].
    Matrix v(8, 1);
    v << 0, 1, 2, 3, 4, 5, 6, 7;
    const WindowSpec spec{1, 2, 4};
    const auto split = consecutive_split(SplitBoundaries{3, 5, 8}, spec);
    REQUIRE(split.test == IndexRange{5, 6});
    auto d = std::make_unique<DLinearModel>(ForecastShape{1, 2, 1}, 1);
    d->biases()[0] << 1.0, -1.0;
    Pipeline p(std::move(d));
    const auto m = evaluate(p, v, split, spec, SplitPart::test);
    // sample 5 targets (5, 6), sample 6 targets (6, 7); prediction (1, -1).
    CHECK(m.mse_per_step[0] == doctest::Approx((16.0 + 25.0) / 2));
    CHECK(m.mse_per_step[1] == doctest::Approx((49.0 + 64.0) / 2));
    CHECK(m.mse == doctest::Approx((16.0 + 25.0 + 49.0 + 64.0) / 4));
    CHECK(m.mae == doctest::Approx((4.0 + 5.0 + 7.0 + 8.0) / 4));
    CHECK(m.samples == 2);
  }
}

TEST_CASE("evaluation replays the momentum stream") {
  const auto s = noise_setup(9);
  std::mt19937_64 rng(10);
  Pipeline p(make_forecaster(ModelKind::dlinear, {16, 4, 2}, 5));
  p.model->init_parameters(rng);
  attach_attention(p, Vector{{0.8, 0.97}});
  p.attention->sa_matrix() = random_matrix(rng, 5, 2);
  const auto m = evaluate(p, s.values, s.split, s.spec, SplitPart::test);

  Pipeline q = p;
  init_epoch_momentum(q, s.values, s.split, s.spec);
  forward_momentum_only(q, s.values, {s.split.train.first, s.split.test.first - 1}, s.spec);
  double acc = 0.0;
  for (long t = s.split.test.first; t <= s.split.test.last; ++t) {
    const auto b = make_batch(s.values, IndexRange{t, t}, s.spec);
    acc += mse_loss(q.forward(b.inputs, false).prediction, b.targets);
  }
  CHECK(m.mse == doctest::Approx(acc / s.split.test.size()).epsilon(1e-12));
}

TEST_CASE("fine-tuning starts from the base predictions") {
  const auto s = noise_setup(11);
  std::mt19937_64 rng(12);
  for (auto kind : {ModelKind::dlinear, ModelKind::rlinear}) {
    Pipeline base(make_forecaster(kind, {16, 4, 2}, 5));
    base.model->init_parameters(rng);
    Pipeline bsa = base;
    attach_attention(bsa, Vector{{0.9, 0.99, 0.999}});
    const auto a = evaluate(base, s.values, s.split, s.spec, SplitPart::test);
    const auto b = evaluate(bsa, s.values, s.split, s.spec, SplitPart::test);
    CHECK(std::abs(a.mse - b.mse) <= 1e-12);
    for (std::size_t i = 0; i < a.sample_mse.size(); ++i) {
      CHECK(std::abs(a.sample_mse[i] - b.sample_mse[i]) <= 1e-12);
    }
  }
}

TEST_CASE("training is deterministic") {
  const auto s = noise_setup(13);
  auto once = [&] {
    std::mt19937_64 rng(14);
    Pipeline p(make_forecaster(ModelKind::dlinear, {16, 4, 2}, 5));
    p.model->init_parameters(rng);
    attach_attention(p, Vector{{0.9, 0.99}});
    TrainConfig cfg;
    cfg.epochs = 3;
    std::vector<double> losses;
    fit(p, s.values, s.split, s.spec, cfg,
        [&](const EpochRecord& r) { losses.push_back(r.train_loss); losses.push_back(r.weighted_val_loss); });
    return losses;
  };
  CHECK(once() == once());
}

TEST_CASE("fit keeps the best epoch") {
  const auto s = noise_setup(15);
  std::mt19937_64 rng(16);
  Pipeline p(make_forecaster(ModelKind::rlinear, {16, 4, 2}));
  p.model->init_parameters(rng);
  TrainConfig cfg;
  cfg.lr_model = 0.03;
  cfg.epochs = 6;
  const auto run = fit(p, s.values, s.split, s.spec, cfg);
  double best = run.epochs.front().weighted_val_loss;
  int at = 0;
  for (const auto& r : run.epochs) {
    if (r.weighted_val_loss < best) {
      best = r.weighted_val_loss;
      at = r.epoch;
    }
  }
  CHECK(run.best_epoch == at);
  CHECK(run.best_weighted_val == best);
  // The returned pipeline is the best snapshot.
  TrainRun probe;
  Pipeline copy = p;
  const auto vm = evaluate(copy, s.values, s.split, s.spec, SplitPart::val);
  CHECK(vm.mse == doctest::Approx(run.epochs[static_cast<std::size_t>(at)].val_loss).epsilon(1e-10));
  CHECK_THROWS_AS(fit(p, s.values, s.split, s.spec, TrainConfig{.epochs = 0}), DomainError);
}

TEST_CASE("learning-rate search keeps the best validation run") {
  const auto s = noise_setup(17);
  std::mt19937_64 rng(18);
  Pipeline p(make_forecaster(ModelKind::dlinear, {16, 4, 2}, 5));
  p.model->init_parameters(rng);
  TrainConfig cfg;
  cfg.epochs = 2;
  const auto search = search_learning_rate(p, s.values, s.split, s.spec, cfg, {0.03, 0.001});
  REQUIRE(search.trials.size() == 2);
  const auto& best = search.trials[0].best_weighted_val < search.trials[1].best_weighted_val
                         ? search.trials[0] : search.trials[1];
  CHECK(search.lr == best.lr);
  CHECK(search.run.best_weighted_val == best.best_weighted_val);
  CHECK_THROWS_AS(search_learning_rate(p, s.values, s.split, s.spec, cfg, {}), DomainError);
}

TEST_CASE("gradient check on the composed pipeline") {
  std::mt19937_64 rng(19);
  const ForecastShape shape{12, 4, 2};
  ForecastBatch batch;
  batch.inputs = testing::random_batch(rng, 2, 4, 12);
  batch.targets = testing::random_batch(rng, 2, 4, 4);
  batch.timestamps = {0, 1, 2, 3};
  const Matrix M0 = random_matrix(rng, 3, 2);

  Pipeline p(make_forecaster(ModelKind::dlinear, shape, 5));
  p.model->init_parameters(rng);
  attach_attention(p, Vector{{0.9, 0.99, 0.999}});
  const auto ok = gradcheck(p, batch, &M0, 1e-6, 1e-5);
  CHECK(ok.pass);
  CHECK(ok.coordinates > 0);

  p.attention->sa_matrix() = random_matrix(rng, 7, 2);
  const auto learn = gradcheck(p, batch, &M0, 1e-6, 1e-5);
  INFO("worst ", learn.worst_name, "[", learn.worst_index, "] ", learn.max_rel_error);
  CHECK(learn.pass);

  const auto bad = gradcheck(p, batch, &M0, 1e-6, 1e-5, [](ForecastGradients& g) {
    g.parameters[1](2, 3) = -g.parameters[1](2, 3);
  });
  CHECK_FALSE(bad.pass);
  CHECK(bad.worst_name == "trend_weight[0]");
  CHECK(bad.worst_index == 2 + 3 * 12);

  CHECK_THROWS_AS(gradcheck(p, batch, nullptr, 1e-6, 1e-5), StateError);
}
