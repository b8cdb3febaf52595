#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "fusionq/errors.hpp"
#include "fusionq/training/training.hpp"
#include "tiny_world.hpp"

using namespace fusionq;
using nn::Tensor;
using nn::Var;
using train::LossWeights;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

using testutil::brute_force_min;
using testutil::make_gt;
using testutil::match_total;
using testutil::tiny_model;
using testutil::TinyWorld;

TEST_CASE("hungarian: small cases") {
  const auto diag = Tensor::matrix({{0, 5, 5}, {5, 0, 5}, {5, 5, 0}});
  const auto r = train::hungarian_match(diag);
  REQUIRE(r.pairs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(r.pairs[i] == std::make_pair(i, i));
  CHECK(r.unmatched.empty());

  const auto one = train::hungarian_match(Tensor::matrix({{3.5}}));
  REQUIRE(one.pairs.size() == 1);
  CHECK(one.pairs[0] == std::make_pair<std::size_t, std::size_t>(0, 0));

  CHECK(train::hungarian_match(Tensor({0, 0})).pairs.empty());
  const auto no_gt = train::hungarian_match(Tensor({3, 0}));
  CHECK(no_gt.pairs.empty());
  CHECK(no_gt.unmatched.size() == 3);

  // greedy would take (0,0)=1 and pay 100 for the rest
  const auto trap = Tensor::matrix({{1, 2}, {2, 100}});
  CHECK(match_total(trap, train::hungarian_match(trap)) == 4.0);

  CHECK_THROWS_AS(train::hungarian_match(Tensor::matrix({{1.0, std::nan("")}})), DomainError);
}

TEST_CASE("hungarian equals brute force on random matrices up to 6x6") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = dim(rng), g = dim(rng);
    const Tensor cost = testutil::random_tensor({m, g}, rng, -5.0, 5.0);
    const auto r = train::hungarian_match(cost);
    CHECK(r.pairs.size() == std::min(m, g));
    CHECK(r.pairs.size() + r.unmatched.size() == m);
    std::set<std::size_t> rows, cols;
    for (const auto& [i, j] : r.pairs) {
      CHECK(rows.insert(i).second);
      CHECK(cols.insert(j).second);
    }
    CHECK(match_total(cost, r) == brute_force_min(cost));
  }
}

TEST_CASE("match cost") {
  const std::vector<sim::GroundTruth> gts = {make_gt(0, {10, 2, 0.8}, {2, 4.5, 1.6}, 0.2),
                                             make_gt(1, {-5, 7, 1.5}, {2.5, 8, 3}, -1.0, {2, 1})};
  LossWeights w;
  Tensor logits = Tensor::matrix({{0.3, -1.0, 0.2}, {-0.5, 1.5, 0.0}});
  Tensor reg({2, 10}, 0.0);
  for (std::size_t c = 0; c < 10; ++c) {
    reg(0, c) = 0.1 * c;
    reg(1, c) = -0.2 * c + 1.0;
  }
  const Tensor cost = train::match_cost(logits, reg, gts, w);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const double x = logits(i, gts[j].cls);
      const double p = sigmoid(x);
      const double focal = 0.25 * (1 - p) * (1 - p) * -std::log(p) - 0.75 * p * p * -std::log(1 - p);
      const auto t = dec::encode_box(gts[j].box);
      double l1 = 0.0;
      for (std::size_t c = 0; c < 10; ++c) l1 += std::fabs(reg(i, c) - t[c]);
      CHECK(cost(i, j) == doctest::Approx(2.0 * focal + l1).epsilon(1e-12));
    }
  }

  // an exact, confident prediction has the strictly smallest cost in its column
  Tensor reg3({3, 10}, 0.0);
  Tensor logits3({3, 3}, -2.0);
  const auto t0 = dec::encode_box(gts[0].box);
  std::copy(t0.begin(), t0.end(), reg3.row(1).begin());
  logits3(1, 0) = 6.0;
  for (std::size_t c = 0; c < 10; ++c) reg3(0, c) = t0[c] + 0.5, reg3(2, c) = t0[c] - 0.3;
  const Tensor c3 = train::match_cost(logits3, reg3, gts, w);
  CHECK(c3(1, 0) < c3(0, 0));
  CHECK(c3(1, 0) < c3(2, 0));

  Tensor same_logits = Tensor::matrix({{0.1, 0.2, 0.3}, {0.1, 0.2, 0.3}});
  Tensor same_reg({2, 10}, 0.7);
  const Tensor c2 = train::match_cost(same_logits, same_reg, gts, w);
  CHECK(c2(0, 0) == c2(1, 0));
  CHECK(c2(0, 1) == c2(1, 1));
}

TEST_CASE("focal loss") {
  const Var x(Tensor::matrix({{0.0}}));
  const std::vector<int> pos = {0};
  CHECK(train::focal_loss(x, pos, 0.25, 2.0).value()[0] == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(train::focal_loss(x, pos, 0.25, 2.0).value()[0] == doctest::Approx(0.04332).epsilon(1e-4));

  CHECK(train::focal_loss(Var(Tensor::matrix({{30.0}})), pos, 0.25, 2.0).value()[0] < 1e-12);

  // direct formula for a 2x3 mixed case, mean over rows
  const Tensor z = Tensor::matrix({{0.4, -1.2, 2.0}, {-0.3, 0.7, 0.1}});
  const std::vector<int> t = {2, -1};
  double expected = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double p = sigmoid(z(i, c));
      expected += t[i] == static_cast<int>(c) ? 0.25 * std::pow(1 - p, 2) * -std::log(p)
                                              : 0.75 * std::pow(p, 2) * -std::log(1 - p);
    }
  }
  CHECK(train::focal_loss(Var(z), t, 0.25, 2.0).value()[0] == doctest::Approx(expected / 2).epsilon(1e-12));

  // non-negative and decreasing in the probability of the true target
  double prev_pos = std::numeric_limits<double>::infinity();
  double prev_neg = std::numeric_limits<double>::infinity();
  for (double p = 0.01; p < 1.0; p += 0.01) {
    const double logit = std::log(p / (1 - p));
    const double lp = train::focal_loss(Var(Tensor::matrix({{logit}})), pos, 0.25, 2.0).value()[0];
    const std::vector<int> bg = {-1};
    // background: true target is "negative", its probability is 1 - p
    const double ln = train::focal_loss(Var(Tensor::matrix({{-logit}})), bg, 0.25, 2.0).value()[0];
    CHECK(lp >= 0.0);
    CHECK(ln >= 0.0);
    CHECK(lp < prev_pos);
    CHECK(ln < prev_neg);
    prev_pos = lp;
    prev_neg = ln;
  }
  CHECK(train::focal_loss(Var(Tensor({0, 3})), std::vector<int>{}, 0.25, 2.0).value()[0] == 0.0);
  CHECK_THROWS_AS(train::focal_loss(x, pos, 1.5, 2.0), DomainError);
}

TEST_CASE("box regression loss") {
  const std::vector<sim::GroundTruth> gts = {make_gt(0, {10, 2, 0.8}, {2, 4.5, 1.6}, 0.2, {1, -1}),
                                             make_gt(2, {4, -3, 0.9}, {0.6, 0.6, 1.8}, 2.0)};
  Tensor reg({2, 10});
  for (std::size_t i = 0; i < 2; ++i) {
    const auto t = dec::encode_box(gts[i].box);
    std::copy(t.begin(), t.end(), reg.row(i).begin());
  }
  using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(train::box_reg_loss(Var(reg), Pairs{{0, 0}, {1, 1}}, gts).value()[0] == 0.0);

  Tensor off = reg;
  off(0, 0) += 1.0;
  CHECK(train::box_reg_loss(Var(off), Pairs{{0, 0}}, gts).value()[0] == doctest::Approx(0.1));
  CHECK(train::box_reg_loss(Var(off), Pairs{{0, 0}, {1, 1}}, gts).value()[0] == doctest::Approx(0.05));
  CHECK(train::box_reg_loss(Var(off), Pairs{{1, 1}, {0, 0}}, gts).value()[0] ==
        train::box_reg_loss(Var(off), Pairs{{0, 0}, {1, 1}}, gts).value()[0]);
  CHECK(train::box_reg_loss(Var(off), Pairs{}, gts).value()[0] == 0.0);
}

TEST_CASE("auxiliary 2D assignment") {
  using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;
  const geo::Box2D a{0, 0, 10, 10};
  const geo::Box2D b{0, 0, 10, 9};  // IoU 0.9 with a
  CHECK(train::aux_assign_2d(std::vector{a}, std::vector{b}, 0.3) == Pairs{{0, 0}});
  const geo::Box2D far{50, 50, 60, 60};
  CHECK(train::aux_assign_2d(std::vector{a}, std::vector{far}, 0.3).empty());

  CHECK(train::aux_assign_iou(Tensor::matrix({{0.6, 0.5}, {0.7, 0.2}}), 0.3) == Pairs{{1, 0}});
  // ties go to the lowest index on both sides
  CHECK(train::aux_assign_iou(Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}}), 0.3) == Pairs{{0, 0}});

  // geometric instance: both predictions prefer g0, which prefers p1
  const geo::Box2D g0{0, 0, 60, 1};
  const geo::Box2D g1{200, 0, 300, 1};
  const geo::Box2D p0{0, 0, 100, 1};
  const geo::Box2D p1{0, 0, 42, 1};
  CHECK(geo::iou_2d(p0, g0) == doctest::Approx(0.6));
  CHECK(geo::iou_2d(p1, g0) == doctest::Approx(0.7));
  CHECK(train::aux_assign_2d(std::vector{p0, p1}, std::vector{g0, g1}, 0.3) == Pairs{{1, 0}});

  // property: output is a partial matching
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<geo::Box2D> pred, gt;
    for (int i = 0; i < 6; ++i) {
      const double x = u(rng), y = u(rng);
      pred.push_back({x, y, x + 5 + 0.3 * u(rng), y + 5 + 0.3 * u(rng)});
      const double gx = u(rng), gy = u(rng);
      gt.push_back({gx, gy, gx + 5 + 0.3 * u(rng), gy + 5 + 0.3 * u(rng)});
    }
    std::set<std::size_t> rows, cols;
    for (const auto& [i, j] : train::aux_assign_2d(pred, gt, 0.0)) {
      CHECK(rows.insert(i).second);
      CHECK(cols.insert(j).second);
      CHECK(geo::iou_2d(pred[i], gt[j]) > 0.0);
    }
  }
}

TEST_CASE("auxiliary depth loss") {
  const auto bins = qgen::make_depth_bins(2.0, 8.0, 4);  // 2, 4, 6, 8
  const std::vector<std::size_t> row0 = {0};
  const std::vector<double> depth = {6.2};
  const Var onehot(Tensor::matrix({{0, 0, 1, 0}}));
  CHECK(train::aux_depth_loss(onehot, row0, depth, bins).value()[0] <= 1e-9);
  const Var uniform(Tensor::matrix({{0.25, 0.25, 0.25, 0.25}}));
  CHECK(train::aux_depth_loss(uniform, row0, depth, bins).value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(train::aux_depth_loss(uniform, {}, {}, bins).value()[0] == 0.0);

  // beyond the range clamps to the last bin; wrong bin with zero mass hits the floor
  const std::vector<double> far = {100.0};
  CHECK(train::aux_depth_loss(Var(Tensor::matrix({{0, 0, 0, 1}})), row0, far, bins).value()[0] <= 1e-9);
  CHECK(train::aux_depth_loss(onehot, row0, far, bins).value()[0] == doctest::Approx(-std::log(1e-12)));

  double prev = std::numeric_limits<double>::infinity();
  for (double p = 0.05; p < 1.0; p += 0.05) {
    const double q = (1.0 - p) / 3.0;
    const double l = train::aux_depth_loss(Var(Tensor::matrix({{q, q, p, q}})), row0, depth, bins).value()[0];
    CHECK(l >= 0.0);
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("loss composition") {
  LossWeights w;
  const auto zero = train::compose_loss(0, 0, 0, w);
  CHECK(zero.total == 0.0);
  const auto b = train::compose_loss(1.0, 0.5, 0.2, w);
  CHECK(b.out == doctest::Approx(2.0 * 1.0 + 0.5));
  CHECK(b.total == doctest::Approx(1.0 * 2.5 + 0.5 * 0.2));
  LossWeights w2 = w;
  w2.aux = 1.0;
  const auto b2 = train::compose_loss(1.0, 0.5, 0.2, w2);
  CHECK(b2.total - b2.out * w2.out == doctest::Approx(2.0 * (b.total - b.out * w.out)));
  w2.cls = -1.0;
  CHECK_THROWS_AS(train::compose_loss(1, 1, 1, w2), ConfigError);
}

TEST_CASE("modality mix") {
  nn::Rng rng(3);
  const std::array<double, 3> both = {0, 0, 1}, cam = {1, 0, 0};
  for (int i = 0; i < 100; ++i) {
    CHECK(train::sample_modality_mix(rng, both) == train::Modality::kBoth);
    CHECK(train::sample_modality_mix(rng, cam) == train::Modality::kCamera);
  }
  const std::array<double, 3> mix = {0.2, 0.1, 0.7};
  std::array<int, 3> counts{};
  for (int i = 0; i < 10000; ++i) ++counts[static_cast<int>(train::sample_modality_mix(rng, mix))];
  for (int k = 0; k < 3; ++k) CHECK(std::fabs(counts[k] / 10000.0 - mix[k]) < 0.02);
  CHECK_THROWS_AS(train::sample_modality_mix(rng, std::array<double, 3>{0.5, 0.5, 0.5}), ConfigError);
  CHECK_THROWS_AS(train::sample_modality_mix(rng, std::array<double, 3>{-0.1, 0.1, 1.0}), ConfigError);
  CHECK_THROWS_AS(train::sample_modality_mix(rng, std::array<double, 2>{0.5, 0.5}), ConfigError);
}

TEST_CASE("model forward over every modality") {
  TinyWorld world;
  train::Model model(tiny_model(), 5);
  for (auto m : {train::Modality::kCamera, train::Modality::kLidar, train::Modality::kBoth}) {
    const auto fwd = model.forward(world.frame, world.obs, m);
    const std::size_t expected_pc = m == train::Modality::kCamera ? 0 : 1;
    const std::size_t expected_img = m == train::Modality::kLidar ? 0 : 2;
    CHECK(fwd.out.num_pc == expected_pc);
    CHECK(fwd.out.num_img == expected_img);
    CHECK(fwd.out.layers.size() == 2);
    const auto loss = train::compute_loss(fwd, world.frame, model.depth_bins(), LossWeights{});
    CHECK(std::isfinite(loss.breakdown.total));
    CHECK(loss.breakdown.total == doctest::Approx(loss.total.value()[0]).epsilon(1e-12));
    CHECK(loss.matches.size() == 2);
    if (m != train::Modality::kLidar) CHECK(loss.breakdown.aux > 0.0);
  }
}

TEST_CASE("total loss gradient matches finite differences") {
  const auto t0 = std::chrono::steady_clock::now();
  TinyWorld world;
  train::Model model(tiny_model(), 9);
  auto f = [&] {
    const auto fwd = model.forward(world.frame, world.obs, train::Modality::kBoth);
    REQUIRE(fwd.out.size() == 3);
    return train::compute_loss(fwd, world.frame, model.depth_bins(), LossWeights{}).total;
  };
  const auto r = nn::grad_check(f, model.params(), 1e-5);
  INFO("worst " << r.worst_parameter << "[" << r.worst_index << "] analytic " << r.analytic << " numeric "
                << r.numeric);
  CHECK(r.checked == model.params().scalar_count());
  CHECK(r.max_relative_error < 1e-5);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60.0);
}

TEST_CASE("train step: zero lr, determinism, overfit") {
  TinyWorld world(16);
  train::ModelConfig cfg = tiny_model();
  cfg.decoder.width = 16;
  train::TrainConfig tc;
  tc.weight_decay = 0.0;
  std::pair<const sim::SceneFrame*, const sim::FrameObservation*> item{&world.frame, &world.obs};
  const std::array<train::Modality, 1> both = {train::Modality::kBoth};

  {
    train::Model model(cfg, 1);
    std::vector<Tensor> before;
    for (const auto& e : model.params().entries()) before.push_back(e.var.value());
    nn::AdamState state;
    const auto r = train::train_step(model, state, std::span(&item, 1), both, tc, 0.0);
    CHECK(r.loss.total > 0.0);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(model.params().entries()[i].var.value() == before[i]);
  }

  auto run = [&](std::size_t steps) {
    train::Model model(cfg, 2);
    nn::AdamState state;
    std::vector<train::LossBreakdown> out;
    for (std::size_t s = 0; s < steps; ++s)
      out.push_back(train::train_step(model, state, std::span(&item, 1), both, tc, 3e-3).loss);
    return out;
  };
  const auto a = run(3);
  const auto b = run(3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].total == b[i].total);
    CHECK(a[i].cls == b[i].cls);
    CHECK(a[i].aux == b[i].aux);
  }

  // a fixed 5-object desk frame
  sim::SceneConfig sc = sim::SceneConfig::desk();
  sc.min_objects = sc.max_objects = 5;
  sc.frames = 1;
  sc.seed = 21;
  const auto seq = sim::generate_sequence(sc);
  sim::ObservationConfig oc;
  oc.oracle.feature_dim = 16;
  const auto obs = sim::observe(seq[0], oc, 4);
  std::pair<const sim::SceneFrame*, const sim::FrameObservation*> desk{&seq[0], &obs};
  train::Model model(cfg, 3);
  nn::AdamState state;
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 200; ++s) {
    const auto r = train::train_step(model, state, std::span(&desk, 1), both, tc, 3e-3);
    if (s == 0) first = r.loss.out;
    last = r.loss.out;
  }
  INFO("L_out " << first << " -> " << last);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("trainer streams sequences with history") {
  sim::SceneConfig sc = sim::SceneConfig::desk();
  sc.frames = 3;
  sc.min_objects = sc.max_objects = 4;
  sim::ObservationConfig oc;
  oc.oracle.feature_dim = 8;
  const auto data = train::Dataset::build(sim::generate_dataset(sc, 2), oc, 5);
  CHECK(data.frame_count() == 6);
  train::ModelConfig cfg = tiny_model();
  cfg.history_frames = 2;
  cfg.history_top_k = 3;
  train::TrainConfig tc;
  tc.steps = 8;
  tc.modality_mix = {0.2, 0.1, 0.7};
  auto run = [&] {
    train::Model model(cfg, 4);
    train::Trainer trainer(model, tc, data);
    std::vector<double> totals;
    for (int s = 0; s < 8; ++s) totals.push_back(trainer.step().loss.total);
    CHECK(trainer.steps_done() == 8);
    return totals;
  };
  const auto a = run();
  CHECK(a == run());
  for (double t : a) CHECK(std::isfinite(t));

  train::TrainConfig bad = tc;
  bad.modality_mix = {0.5, 0.5, 0.5};
  train::Model model(cfg, 4);
  CHECK_THROWS_AS(train::Trainer(model, bad, data), ConfigError);
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  TinyWorld world;
  train::Model model(tiny_model(), 6);
  nn::AdamState state;
  std::pair<const sim::SceneFrame*, const sim::FrameObservation*> item{&world.frame, &world.obs};
  const std::array<train::Modality, 1> both = {train::Modality::kBoth};
  for (int s = 0; s < 2; ++s) train::train_step(model, state, std::span(&item, 1), both, train::TrainConfig{}, 1e-3);
  nn::Rng rng(42);
  rng.discard(17);
  const auto path = std::filesystem::temp_directory_path() / "fusionq_test_ckpt.bin";
  train::save_checkpoint(path, model.params(), state, rng);

  train::Model other(tiny_model(), 99);
  nn::AdamState other_state;
  nn::Rng other_rng(1);
  train::load_checkpoint(path, other.params(), other_state, other_rng);
  for (std::size_t i = 0; i < model.params().entries().size(); ++i)
    CHECK(other.params().entries()[i].var.value() == model.params().entries()[i].var.value());
  CHECK(other_state.step == state.step);
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    CHECK(other_state.m[i] == state.m[i]);
    CHECK(other_state.v[i] == state.v[i]);
  }
  CHECK(other_rng == rng);
  CHECK(other_rng() == rng());

  train::ModelConfig wider = tiny_model();
  wider.decoder.width = 16;
  train::Model mismatched(wider, 1);
  CHECK_THROWS_AS(train::load_checkpoint(path, mismatched.params(), other_state, other_rng), ParseError);
  const auto junk = std::filesystem::temp_directory_path() / "fusionq_test_junk.bin";
  std::ofstream(junk) << "nope";
  CHECK_THROWS_AS(train::load_checkpoint(junk, other.params(), other_state, other_rng), ParseError);
}
