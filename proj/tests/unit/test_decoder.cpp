#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Geometry>

#include "doctest.h"
#include "fusionq/decoder/decoder.hpp"
#include "fusionq/errors.hpp"
#include "fusionq/numerics/optim.hpp"
#include "test_util.hpp"

using namespace fusionq;
using namespace fusionq::dec;
using nn::Tensor;
using nn::Var;
using testutil::random_tensor;

namespace {

void fill_mlp(const nn::Mlp& m, double v) {
  for (auto w : m.weights()) w.mutable_value().fill(v);
  for (auto b : m.biases()) b.mutable_value().fill(v);
}

void randomize(nn::ParamStore& store, std::mt19937_64& rng, double scale = 0.5) {
  for (auto& e : store.entries()) e.var.mutable_value() = random_tensor(e.var.value().shape(), rng, -scale, scale);
}

std::vector<double> row_of(const Tensor& t, std::size_t r) { return {t.row(r).begin(), t.row(r).end()}; }

std::vector<double> ln(const std::vector<double>& x, double eps = 1e-5) {
  double mu = 0.0, var = 0.0;
  for (double v : x) mu += v / x.size();
  for (double v : x) var += (v - mu) * (v - mu) / x.size();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + eps);
  return y;
}

std::vector<double> affine(const std::vector<double>& x, const Var& w, const Var* b) {
  const Tensor& W = w.value();
  std::vector<double> y(W.cols(), 0.0);
  for (std::size_t j = 0; j < W.cols(); ++j) {
    double s = b ? b->value()[j] : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * W(i, j);
    y[j] = s;
  }
  return y;
}

std::vector<double> mlp_oracle(const nn::Mlp& m, std::vector<double> x) {
  for (std::size_t l = 0; l < m.weights().size(); ++l) {
    x = affine(x, m.weights()[l], &m.biases()[l]);
    if (l + 1 < m.weights().size())
      for (auto& v : x) v = std::max(0.0, v);
  }
  return x;
}

std::vector<double> add(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// Single-head attention oracle with explicit softmax.
std::vector<double> attention_oracle(const nn::Attention& att, const std::vector<double>& q,
                                     const std::vector<std::vector<double>>& keys,
                                     const std::vector<std::vector<double>>& values) {
  const auto Q = affine(q, att.wq, &att.bq);
  std::vector<double> scores;
  for (const auto& k : keys) {
    const auto K = affine(k, att.wk, &att.bk);
    double s = 0.0;
    for (std::size_t i = 0; i < Q.size(); ++i) s += Q[i] * K[i];
    scores.push_back(s / std::sqrt(static_cast<double>(Q.size())));
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (auto& s : scores) z += (s = std::exp(s - mx));
  std::vector<double> o(Q.size(), 0.0);
  for (std::size_t j = 0; j < values.size(); ++j) {
    const auto V = affine(values[j], att.wv, &att.bv);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += scores[j] / z * V[i];
  }
  return affine(o, att.wo, &att.bo);
}

geo::Mat4 camera_looking(double yaw) {
  geo::Mat3 ego_to_cam;
  ego_to_cam << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  geo::Mat4 c2w = geo::Mat4::Identity();
  c2w.block<3, 3>(0, 0) = Eigen::AngleAxisd(yaw, geo::Vec3::UnitZ()).matrix() * ego_to_cam.transpose();
  c2w.block<3, 1>(0, 3) = geo::Vec3(0.3, 0.0, 1.5);
  return geo::rigid_inverse(c2w);
}

DecoderConfig small_config() {
  DecoderConfig cfg;
  cfg.layers = 2;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.samples = 3;
  cfg.depth_bins = 4;
  cfg.feature_channels = 3;
  cfg.sinpos_channels = 4;
  cfg.history_sinpos_channels = 2;
  return cfg;
}

struct Scene {
  std::vector<geo::CameraModel> cams;
  std::vector<Tensor> maps;
  std::vector<ImageView> views;
  qgen::PointCloudQuerySet pc;
  qgen::ImageQuerySet img;
  PillarFeatureSet pillars;

  Scene(const DecoderConfig& cfg, std::size_t n_pc, std::size_t n_img, std::mt19937_64& rng) {
    for (int v = 0; v < 3; ++v) {
      cams.emplace_back(120, 120, 80, 48, camera_looking(v * 2.0944), 160, 96);
      maps.push_back(random_tensor({12, 20, cfg.feature_channels}, rng));
    }
    for (int v = 0; v < 3; ++v) views.push_back({&cams[v], &maps[v]});
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    pc.contents = Var(random_tensor({n_pc, cfg.width}, rng));
    pc.positions = Tensor({n_pc, 3}, 0.0);
    for (std::size_t i = 0; i < n_pc; ++i) {
      pc.positions(i, 0) = 10 * u(rng);
      pc.positions(i, 1) = 10 * u(rng);
      pc.positions(i, 2) = 0.5 * u(rng);
      pc.source_index.push_back(i);
    }
    img.contents = Var(random_tensor({n_img, cfg.width}, rng));
    img.samples = Var(random_tensor({n_img, 3 * cfg.depth_bins}, rng, -12, 12));
    Tensor p = random_tensor({n_img, cfg.depth_bins}, rng, 0.1, 1.0);
    for (std::size_t i = 0; i < n_img; ++i) {
      double s = 0.0;
      for (double v : p.row(i)) s += v;
      for (auto& v : p.row(i)) v /= s;
      img.boxes.push_back({0, 0, 1, 1});
      img.views.push_back(0);
    }
    img.probs = Var(p);
    pillars.positions = random_tensor({6, 2}, rng, -10, 10);
    pillars.contents = random_tensor({6, cfg.width}, rng);
  }

  DecoderInputs inputs(const HistoryTokens* h = nullptr) const {
    DecoderInputs in;
    in.pc = &pc;
    in.img = &img;
    in.views = views;
    in.pillars = &pillars;
    in.history = h;
    return in;
  }
};

}  // namespace

TEST_CASE("box encoding round trip") {
  geo::Box3D b;
  b.center = geo::Vec3(1, -2, 0.3);
  b.size = geo::Vec3(1.8, 4.4, 1.5);
  b.yaw = -2.5;
  b.velocity = geo::Vec2(3, -1);
  const auto r = encode_box(b);
  const auto d = decode_box(r);
  CHECK((d.center - b.center).norm() < 1e-15);
  CHECK((d.size - b.size).norm() < 1e-14);
  CHECK(d.yaw == doctest::Approx(b.yaw));
  CHECK(d.velocity == b.velocity);
}

TEST_CASE("positional encoding") {
  nn::ParamStore store;
  nn::Rng rng(1);
  const auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  const auto& pe = dec.pe();
  const Tensor pts = Tensor::matrix({{1, 2, 3}, {1, 2, 3}, {-4, 0.5, 0}});
  const Tensor e = pe.apply(Var(pts)).value();
  for (std::size_t j = 0; j < cfg.width; ++j) CHECK(e(0, j) == e(1, j));

  const double x[] = {-4, 0.5, 0};
  const Tensor s = nn::sinpos_encode(x, cfg.sinpos_channels, cfg.temperature);
  const auto oracle = mlp_oracle(pe.mlp, {s.values().begin(), s.values().end()});
  for (std::size_t j = 0; j < cfg.width; ++j) CHECK(e(2, j) == doctest::Approx(oracle[j]).epsilon(1e-13));

  fill_mlp(pe.mlp, 0.0);
  Var bias = pe.mlp.biases().back();
  for (std::size_t j = 0; j < cfg.width; ++j) bias.mutable_value()[j] = 0.25 * j;
  const Tensor z = pe.apply(Var(pts)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < cfg.width; ++j) CHECK(z(i, j) == 0.25 * j);
}

TEST_CASE("uncertainty-aware positional encoding") {
  nn::ParamStore store;
  nn::Rng rng(2);
  const auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  const auto& upe = dec.upe();
  std::mt19937_64 r(3);
  const Tensor s = random_tensor({1, 12}, r, -10, 10);
  const Tensor u = Tensor::matrix({{0.1, 0.2, 0.3, 0.4}});

  // oracle: out(pos(s * scale) * sigmoid(gate(u)))
  std::vector<double> sv(s.values().begin(), s.values().end());
  for (auto& v : sv) v *= upe.position_scale;
  const auto base = mlp_oracle(upe.position, sv);
  const auto g = mlp_oracle(upe.gate, {0.1, 0.2, 0.3, 0.4});
  std::vector<double> h(base.size());
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = base[i] / (1.0 + std::exp(-g[i]));
  const auto expect = mlp_oracle(upe.out, h);
  const Tensor got = upe.apply(Var(s), Var(u)).value();
  for (std::size_t j = 0; j < cfg.width; ++j) CHECK(got(0, j) == doctest::Approx(expect[j]).epsilon(1e-13));

  Tensor s2({2, 12}, 0.0), u2({2, 4}, 0.25);
  for (std::size_t j = 0; j < 12; ++j) s2(0, j) = s2(1, j) = s(0, j);
  const Tensor same = upe.apply(Var(s2), Var(u2)).value();
  for (std::size_t j = 0; j < cfg.width; ++j) CHECK(same(0, j) == same(1, j));

  // zero inner weights: gate is 0.5 and the base is its bias
  for (auto w : upe.position.weights()) w.mutable_value().fill(0.0);
  for (auto w : upe.gate.weights()) w.mutable_value().fill(0.0);
  for (auto b : upe.gate.biases()) b.mutable_value().fill(0.0);
  Var bb = upe.position.biases().back();
  bb.mutable_value() = random_tensor({cfg.width}, r);
  std::vector<double> half(cfg.width);
  for (std::size_t j = 0; j < cfg.width; ++j) half[j] = 0.5 * bb.value()[j];
  const auto zexp = mlp_oracle(upe.out, half);
  const Tensor zg = upe.apply(Var(s), Var(u)).value();
  for (std::size_t j = 0; j < cfg.width; ++j) CHECK(zg(0, j) == doctest::Approx(zexp[j]).epsilon(1e-14));

  CHECK_THROWS_AS(upe.apply(Var(s), Var(Tensor::matrix({{0.1, 0.2, 0.3, 0.3}}))), DomainError);
}

TEST_CASE("self-attention block") {
  nn::ParamStore store;
  nn::Rng rng(3);
  auto cfg = small_config();
  cfg.heads = 1;
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(4);
  randomize(store, r);
  const auto& blk = dec.layers()[0].self;
  for (auto& e : store.entries())
    if (e.name.find("self.norm") != std::string::npos) e.var.mutable_value().fill(e.name.ends_with("gain") ? 1.0 : 0.0);

  const Tensor c = random_tensor({3, 8}, r);
  const Tensor p = random_tensor({3, 8}, r);
  const Tensor hc = random_tensor({2, 8}, r);
  const Tensor hp = random_tensor({2, 8}, r);
  HistoryTokens hist{Var(hc), Var(hp)};
  const Tensor got = blk.apply(Var(c), Var(p), &hist).value();

  std::vector<std::vector<double>> keys;
  for (std::size_t i = 0; i < 3; ++i) keys.push_back(add(row_of(c, i), row_of(p, i)));
  for (std::size_t i = 0; i < 2; ++i) keys.push_back(add(row_of(hc, i), row_of(hp, i)));
  for (std::size_t i = 0; i < 3; ++i) {
    const auto a = attention_oracle(blk.attn, keys[i], keys, keys);
    const auto expect = ln(add(row_of(c, i), a));
    for (std::size_t j = 0; j < 8; ++j) CHECK(got(i, j) == doctest::Approx(expect[j]).epsilon(1e-12));
  }

  const Tensor plain = blk.apply(Var(c), Var(p), nullptr).value();
  HistoryTokens none;
  CHECK(blk.apply(Var(c), Var(p), &none).value() == plain);

  // single live query: softmax weight one
  const Tensor c1 = random_tensor({1, 8}, r);
  const Tensor p1 = random_tensor({1, 8}, r);
  const auto x = add(row_of(c1, 0), row_of(p1, 0));
  const auto vproj = affine(affine(x, blk.attn.wv, &blk.attn.bv), blk.attn.wo, &blk.attn.bo);
  const auto expect = ln(add(row_of(c1, 0), vproj));
  const Tensor one = blk.apply(Var(c1), Var(p1), nullptr).value();
  for (std::size_t j = 0; j < 8; ++j) CHECK(one(0, j) == doctest::Approx(expect[j]).epsilon(1e-12));
}

TEST_CASE("deformable image cross-attention") {
  std::mt19937_64 r(5);
  const geo::CameraModel cam(100, 100, 64, 40, camera_looking(0.0), 128, 80);
  const geo::CameraModel back(100, 100, 64, 40, camera_looking(3.14159), 128, 80);

  SUBCASE("constant maps give the projected constant") {
    Tensor f1({10, 16, 3}, 0.0);
    for (std::size_t i = 0; i < f1.size(); ++i) f1[i] = static_cast<double>(i % 3) - 0.5;
    const ImageView views[] = {{&cam, &f1}, {&back, &f1}};
    Tensor pts({2, 6}, 0.0);
    for (std::size_t k = 0; k < 2; ++k) {
      pts(0, 3 * k) = 10 + k;
      pts(0, 3 * k + 1) = 0.5 * k;
      pts(1, 3 * k) = -8 - k;
      pts(1, 3 * k + 2) = 0.3;
    }
    const Tensor agg = deformable_sample(Var(pts), Var(random_tensor({2, 2}, r, -3, 3)), views, 8.0).value();
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < 3; ++c) CHECK(agg(i, c) == doctest::Approx(static_cast<double>(c) - 0.5).epsilon(1e-14));
  }

  SUBCASE("no valid sample aggregates to zero") {
    const Tensor f = random_tensor({10, 16, 3}, r);
    const ImageView views[] = {{&cam, &f}};
    const Tensor pts = Tensor::matrix({{-10, 0, 0}});
    const Tensor agg = deformable_sample(Var(pts), Var(Tensor::matrix({{0.3}})), views, 8.0).value();
    for (double v : agg.values()) CHECK(v == 0.0);

    nn::ParamStore store;
    nn::Rng rng(6);
    auto cfg = small_config();
    cfg.feature_channels = 3;
    FusionDecoder dec(store, cfg, rng);
    const Tensor c = random_tensor({1, 8}, r);
    const Tensor out = dec.layers()[0].image.apply(Var(c), Var(Tensor::matrix({{-30, 0, 0}})), views).value();
    const auto expect = ln(row_of(c, 0));
    for (std::size_t j = 0; j < 8; ++j) CHECK(out(0, j) == doctest::Approx(expect[j]).epsilon(1e-12));
  }

  SUBCASE("single view, single sample at the anchor matches a bilinear oracle") {
    const Tensor f = random_tensor({10, 16, 3}, r);
    const ImageView views[] = {{&cam, &f}};
    const geo::Vec3 a(12.0, 1.3, -0.4);
    const Tensor pts = Tensor::matrix({{a.x(), a.y(), a.z()}});
    const Tensor agg = deformable_sample(Var(pts), Var(Tensor::matrix({{0.0}})), views, 8.0).value();
    const auto px = geo::project_world_to_pixel(cam, a);
    double expect[3];
    geo::bilinear_sample(f, px.pixel.x() / 8.0 - 0.5, px.pixel.y() / 8.0 - 0.5, expect);
    for (std::size_t c = 0; c < 3; ++c) CHECK(agg(0, c) == doctest::Approx(expect[c]).epsilon(1e-14));
  }

  SUBCASE("view order does not matter") {
    std::vector<geo::CameraModel> cams;
    std::vector<Tensor> maps;
    for (int v = 0; v < 4; ++v) {
      cams.emplace_back(90, 90, 64, 40, camera_looking(v * 1.5708), 128, 80);
      maps.push_back(random_tensor({10, 16, 3}, r));
    }
    std::vector<ImageView> views, rev;
    for (int v = 0; v < 4; ++v) views.push_back({&cams[v], &maps[v]});
    rev.assign(views.rbegin(), views.rend());
    const Tensor pts = random_tensor({6, 12}, r, -15, 15);
    const Tensor lg = random_tensor({6, 4}, r, -2, 2);
    const Tensor a = deformable_sample(Var(pts), Var(lg), views, 8.0).value();
    const Tensor b = deformable_sample(Var(pts), Var(lg), rev, 8.0).value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
  }

  SUBCASE("gradients with respect to points and logits") {
    std::vector<geo::CameraModel> cams;
    std::vector<Tensor> maps;
    for (int v = 0; v < 3; ++v) {
      cams.emplace_back(90, 90, 64, 40, camera_looking(v * 2.0944), 128, 80);
      maps.push_back(random_tensor({10, 16, 3}, r));
    }
    std::vector<ImageView> views;
    for (int v = 0; v < 3; ++v) views.push_back({&cams[v], &maps[v]});
    for (int trial = 0; trial < 20; ++trial) {
      nn::ParamStore store;
      Var pts = store.add("pts", random_tensor({4, 6}, r, -12, 12));
      Var lg = store.add("lg", random_tensor({4, 2}, r, -2, 2));
      const Tensor w = random_tensor({4, 3}, r);
      auto f = [&] { return nn::sum(nn::mul(deformable_sample(pts, lg, views, 8.0), Var(w))); };
      CHECK(nn::grad_check(f, store).max_relative_error < 1e-6);
    }
  }
}

TEST_CASE("pillar cross-attention") {
  nn::ParamStore store;
  nn::Rng rng(7);
  auto cfg = small_config();
  cfg.heads = 1;
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(8);
  randomize(store, r);
  for (auto& e : store.entries())
    if (e.name.find("pillar.norm") != std::string::npos)
      e.var.mutable_value().fill(e.name.ends_with("gain") ? 1.0 : 0.0);
  const auto& blk = dec.layers()[1].pillar;
  const Tensor c = random_tensor({3, 8}, r);
  const Tensor p = random_tensor({3, 8}, r);
  const Tensor pc = random_tensor({2, 8}, r);
  const Tensor pp = random_tensor({2, 8}, r);
  const Tensor got = blk.apply(Var(c), Var(p), Var(pc), Var(pp)).value();
  std::vector<std::vector<double>> keys = {add(row_of(pc, 0), row_of(pp, 0)), add(row_of(pc, 1), row_of(pp, 1))};
  std::vector<std::vector<double>> vals = {row_of(pc, 0), row_of(pc, 1)};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto expect = ln(add(row_of(c, i), attention_oracle(blk.attn, add(row_of(c, i), row_of(p, i)), keys, vals)));
    for (std::size_t j = 0; j < 8; ++j) CHECK(got(i, j) == doctest::Approx(expect[j]).epsilon(1e-12));
  }

  Tensor pc2({2, 8}, 0.0), pp2({2, 8}, 0.0);
  for (std::size_t j = 0; j < 8; ++j) {
    pc2(0, j) = pc(1, j);
    pc2(1, j) = pc(0, j);
    pp2(0, j) = pp(1, j);
    pp2(1, j) = pp(0, j);
  }
  const Tensor perm = blk.apply(Var(c), Var(p), Var(pc2), Var(pp2)).value();
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::fabs(perm[i] - got[i]) < 1e-12);

  // one pillar: every query receives its value projection
  const Tensor one_c = random_tensor({1, 8}, r);
  const Tensor single = blk.apply(Var(c), Var(p), Var(one_c), Var(random_tensor({1, 8}, r))).value();
  const auto vproj = affine(affine(row_of(one_c, 0), blk.attn.wv, &blk.attn.bv), blk.attn.wo, &blk.attn.bo);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto expect = ln(add(row_of(c, i), vproj));
    for (std::size_t j = 0; j < 8; ++j) CHECK(single(i, j) == doctest::Approx(expect[j]).epsilon(1e-12));
  }

  const Tensor empty = blk.apply(Var(c), Var(p), Var(Tensor({0, 8})), Var(Tensor({0, 8}))).value();
  const auto expect0 = ln(row_of(c, 0));
  for (std::size_t j = 0; j < 8; ++j) CHECK(empty(0, j) == doctest::Approx(expect0[j]).epsilon(1e-12));
}

TEST_CASE("calibration") {
  nn::ParamStore store;
  nn::Rng rng(9);
  nn::Mlp mlp(store, "cal", {4, 4, 2}, rng);
  fill_mlp(mlp, 0.0);
  const Tensor c = Tensor::matrix({{1, 2, 3, 4}});
  const Tensor u = Tensor::matrix({{0.3, 0.7}});
  const Tensor same = calibrate(Var(u), Var(c), mlp).value();
  CHECK(std::fabs(same[0] - 0.3) < 1e-12);
  CHECK(std::fabs(same[1] - 0.7) < 1e-12);

  Var b = mlp.biases().back();
  b.mutable_value() = Tensor::vector({std::log(3.0), 0.0});
  const Tensor third = calibrate(Var(Tensor::matrix({{0.5, 0.5}})), Var(c), mlp).value();
  CHECK(third[0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(third[1] == doctest::Approx(0.25).epsilon(1e-15));

  b.mutable_value() = Tensor::vector({0.0, 40.0});
  const Tensor sat = calibrate(Var(u), Var(c), mlp).value();
  CHECK(sat[1] > 1.0 - 1e-9);
}

TEST_CASE("output heads") {
  nn::ParamStore store;
  nn::Rng rng(10);
  const auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(11);
  const auto& heads = dec.heads();
  const Tensor c = random_tensor({2, 8}, r);
  const Tensor a = random_tensor({2, 3}, r, -5, 5);
  auto [cls, reg] = heads.apply(Var(c), Var(a));
  for (std::size_t i = 0; i < 2; ++i) {
    const auto zc = mlp_oracle(heads.cls, row_of(c, i));
    auto zr = mlp_oracle(heads.reg, row_of(c, i));
    for (int k = 0; k < 3; ++k) zr[k] += a(i, k);
    for (std::size_t j = 0; j < 3; ++j) CHECK(cls.value()(i, j) == doctest::Approx(zc[j]).epsilon(1e-13));
    for (std::size_t j = 0; j < kRegChannels; ++j) CHECK(reg.value()(i, j) == doctest::Approx(zr[j]).epsilon(1e-13));
  }

  Tensor shifted = a;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.75;
  const Tensor reg2 = heads.apply(Var(c), Var(shifted)).second.value();
  for (std::size_t i = 0; i < 2; ++i) {
    for (int k = 0; k < 3; ++k) CHECK(reg2(i, k) - reg.value()(i, k) == doctest::Approx(0.75).epsilon(1e-12));
    for (std::size_t k = 3; k < kRegChannels; ++k) CHECK(reg2(i, k) == reg.value()(i, k));
  }

  fill_mlp(heads.reg, 0.0);
  const Tensor z = heads.apply(Var(c), Var(a)).second.value();
  const auto box = decode_box(z.row(0));
  CHECK(box.center == geo::Vec3(a(0, 0), a(0, 1), a(0, 2)));
  CHECK(box.size == geo::Vec3(1, 1, 1));
  CHECK(box.velocity == geo::Vec2(0, 0));
}

TEST_CASE("decoder: single layer with zeroed blocks") {
  nn::ParamStore store;
  nn::Rng rng(12);
  auto cfg = small_config();
  cfg.layers = 1;
  FusionDecoder dec(store, cfg, rng);
  for (auto& e : store.entries()) {
    const bool norm = e.name.find("norm") != std::string::npos;
    const bool shared = e.name.starts_with("dec.pe") || e.name.starts_with("dec.upe") ||
                        e.name.starts_with("dec.cls") || e.name.starts_with("dec.reg") ||
                        e.name.starts_with("dec.pillar_pe");
    if (!norm && !shared) e.var.mutable_value().fill(0.0);
  }
  std::mt19937_64 r(13);
  Scene scene(cfg, 2, 3, r);
  const auto out = dec.run(scene.inputs());
  REQUIRE(out.layers.size() == 1);
  const auto& last = out.final_layer();
  const Tensor c0 = [&] {
    const Var parts[] = {scene.pc.contents, scene.img.contents};
    return nn::concat_rows(parts).value();
  }();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // four residual blocks with zero updates: LN applied four times
    auto x = row_of(c0, i);
    for (int k = 0; k < 4; ++k) x = ln(x);
    for (std::size_t j = 0; j < 8; ++j) CHECK(last.contents.value()(i, j) == doctest::Approx(x[j]).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < out.initial_anchors.value().size(); ++i)
    CHECK(std::fabs(last.anchors.value()[i] - out.initial_anchors.value()[i]) < 1e-12);
  const auto [cls, reg] = dec.heads().apply(last.contents, last.anchors);
  CHECK(cls.value() == last.cls.value());
  CHECK(reg.value() == last.reg.value());
}

TEST_CASE("decoder: two layers equal chained block calls") {
  nn::ParamStore store;
  nn::Rng rng(14);
  const auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(15);
  randomize(store, r, 0.4);
  Scene scene(cfg, 2, 3, r);
  const auto out = dec.run(scene.inputs());

  const Var pc_anchor(scene.pc.positions);
  const Var pc_enc = dec.pe().apply(pc_anchor);
  Var probs = scene.img.probs;
  auto stack = [](const Var& a, const Var& b) {
    const Var parts[] = {a, b};
    return nn::concat_rows(parts);
  };
  Var c = stack(scene.pc.contents, scene.img.contents);
  Var anchors = stack(pc_anchor, nn::expected_positions(probs, scene.img.samples));
  Var enc = stack(pc_enc, dec.upe().apply(scene.img.samples, probs));
  const Var pil_c(scene.pillars.contents);
  const Var pil_p = dec.pillar_pe().apply(Var(scene.pillars.positions));
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& layer = dec.layers()[l];
    c = layer.self.apply(c, enc, nullptr);
    c = layer.image.apply(c, anchors, scene.views);
    c = layer.pillar.apply(c, enc, pil_c, pil_p);
    c = layer.ffn.apply(c);
    probs = calibrate(probs, nn::slice_rows(c, 2, 5), layer.calibration);
    anchors = stack(pc_anchor, nn::expected_positions(probs, scene.img.samples));
    enc = stack(pc_enc, dec.upe().apply(scene.img.samples, probs));
    CHECK(out.layers[l].contents.value() == c.value());
    CHECK(out.layers[l].anchors.value() == anchors.value());
    CHECK(out.layers[l].probs.value() == probs.value());
  }
  // pc anchors never move
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) CHECK(out.final_layer().anchors.value()(i, k) == scene.pc.positions(i, k));
  for (const auto& st : out.layers)
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (double v : st.probs.value().row(i)) s += v;
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("decoder: modality-missing paths, history equivalence and determinism") {
  nn::ParamStore store;
  nn::Rng rng(16);
  const auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(17);
  Scene scene(cfg, 3, 2, r);

  DecoderInputs img_only = scene.inputs();
  img_only.pc = nullptr;
  img_only.pillars = nullptr;
  const auto a = dec.run(img_only);
  CHECK(a.size() == 2);
  CHECK(a.final_layer().cls.rows() == 2);
  CHECK(a.final_layer().reg.value().all_finite());

  DecoderInputs pc_only = scene.inputs();
  pc_only.img = nullptr;
  pc_only.views = {};
  const auto b = dec.run(pc_only);
  CHECK(b.size() == 3);
  CHECK(b.final_layer().reg.value().all_finite());

  DecoderInputs none = scene.inputs();
  none.pc = nullptr;
  none.img = nullptr;
  CHECK(dec.run(none).size() == 0);

  HistoryTokens empty_tokens{Var(Tensor({0, 8})), Var(Tensor({0, 8}))};
  const auto plain = dec.run(scene.inputs());
  const auto with_empty = dec.run(scene.inputs(&empty_tokens));
  for (std::size_t l = 0; l < plain.layers.size(); ++l) {
    CHECK(plain.layers[l].contents.value() == with_empty.layers[l].contents.value());
    CHECK(plain.layers[l].reg.value() == with_empty.layers[l].reg.value());
  }
  const auto again = dec.run(scene.inputs());
  CHECK(again.final_layer().cls.value() == plain.final_layer().cls.value());
  CHECK(again.final_layer().reg.value() == plain.final_layer().reg.value());

  auto no_cross = cfg;
  no_cross.use_cross_attention = false;
  nn::ParamStore s2;
  nn::Rng rng2(16);
  FusionDecoder dec2(s2, no_cross, rng2);
  CHECK(dec2.run(scene.inputs()).final_layer().cls.value().all_finite());

  auto point = cfg;
  point.uncertainty_aware = false;
  nn::ParamStore s3;
  nn::Rng rng3(16);
  FusionDecoder dec3(s3, point, rng3);
  const auto pf = dec3.run(scene.inputs());
  for (const auto& st : pf.layers) CHECK(st.anchors.value() == pf.initial_anchors.value());
}

TEST_CASE("decoder: gradients through the full stack") {
  nn::ParamStore store;
  nn::Rng rng(18);
  auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(19);
  Scene scene(cfg, 2, 2, r);
  // the queries themselves are leaves too
  Var img_logits = store.add("img_logits", random_tensor({2, 4}, r));
  Var img_samples = store.add("img_samples", random_tensor({2, 12}, r, -12, 12));
  Var pc_contents = store.add("pc_contents", random_tensor({2, 8}, r));
  const Tensor wc = random_tensor({4, 3}, r);
  const Tensor wr = random_tensor({4, 10}, r);
  HistoryQueue queue(2, 2);
  {
    scene.img.probs = nn::softmax_rows(img_logits);
    scene.img.samples = img_samples;
    queue.push_topk(dec.run(scene.inputs()), geo::make_pose(-1, 0, 0, 0.1), 0.0);
  }
  auto f = [&] {
    scene.img.probs = nn::softmax_rows(img_logits);
    scene.img.samples = img_samples;
    scene.pc.contents = pc_contents;
    const auto h = history_transform(queue, geo::Mat4::Identity(), 0.5, dec);
    const auto out = dec.run(scene.inputs(&h));
    std::vector<Var> terms;
    for (const auto& st : out.layers) {
      terms.push_back(nn::sum(nn::mul(st.cls, Var(wc))));
      terms.push_back(nn::sum(nn::mul(st.reg, Var(wr))));
    }
    const std::vector<double> w(terms.size(), 0.1);
    return nn::weighted_sum(terms, w);
  };
  const auto res = nn::grad_check(f, store);
  INFO(res.worst_parameter, " ", res.analytic, " ", res.numeric);
  CHECK(res.max_relative_error < 1e-5);
}

TEST_CASE("history queue") {
  nn::ParamStore store;
  nn::Rng rng(20);
  auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(21);
  Scene scene(cfg, 2, 1, r);
  const auto out = dec.run(scene.inputs());

  HistoryQueue big(4, 10);
  CHECK(big.push_topk(out, geo::Mat4::Identity(), 0.0).size() == 3);
  CHECK(big.size() == 3);

  const double s[] = {0.9, 0.1, 0.5};
  CHECK(topk_indices(s, 2) == std::vector<std::size_t>{0, 2});

  HistoryQueue q(2, 1);
  auto entry = [](double t) {
    HistoryEntry e;
    e.content = Tensor({8}, t);
    e.timestamp = t;
    return std::vector<HistoryEntry>{e};
  };
  q.push_frame(entry(0.0));
  q.push_frame(entry(1.0));
  CHECK(q.frame_count() == 2);
  q.push_frame(entry(2.0));
  CHECK(q.frame_count() == 2);
  CHECK(q.frames().front().front().timestamp == 2.0);
  CHECK(q.frames().back().front().timestamp == 1.0);
  CHECK(q.size() <= q.capacity());
}

TEST_CASE("history transform") {
  nn::ParamStore store;
  nn::Rng rng(22);
  auto cfg = small_config();
  FusionDecoder dec(store, cfg, rng);
  std::mt19937_64 r(23);
  fill_mlp(dec.history_mlp(), 0.0);

  HistoryEntry e;
  e.content = random_tensor({8}, r);
  e.position = geo::Vec3(5, -2, 0.5);
  HistoryQueue q(4, 4);

  SUBCASE("identity") {
    q.push_frame({e});
    const auto h = history_transform(q, geo::Mat4::Identity(), 0.0, dec);
    REQUIRE(h.size() == 1);
    for (std::size_t j = 0; j < 8; ++j) CHECK(h.contents.value()(0, j) == e.content[j]);
    const Tensor pe = dec.pe().apply(Var(Tensor::matrix({{5, -2, 0.5}}))).value();
    CHECK(h.encodings.value() == pe);
  }
  SUBCASE("ego translation") {
    q.push_frame({e});
    const geo::Vec3 t(2.5, -1.0, 0.0);
    const auto h = history_transform(q, geo::make_pose(t.x(), t.y(), t.z(), 0.0), 0.0, dec);
    const Tensor pe = dec.pe().apply(Var(Tensor::matrix({{5 - 2.5, -2 + 1.0, 0.5}}))).value();
    for (std::size_t j = 0; j < 8; ++j) CHECK(h.encodings.value()(0, j) == doctest::Approx(pe(0, j)).epsilon(1e-14));
  }
  SUBCASE("ego rotation against a matrix oracle") {
    e.ego_pose = geo::make_pose(1, 2, 0, 0.3);
    q.push_frame({e});
    const geo::Mat4 cur = geo::make_pose(4, -1, 0, -0.4);
    const auto h = history_transform(q, cur, 0.0, dec);
    const Eigen::Vector4d p = cur.inverse() * e.ego_pose * Eigen::Vector4d(5, -2, 0.5, 1);
    const Tensor pe = dec.pe().apply(Var(Tensor::matrix({{p.x(), p.y(), p.z()}}))).value();
    for (std::size_t j = 0; j < 8; ++j) CHECK(h.encodings.value()(0, j) == doctest::Approx(pe(0, j)).epsilon(1e-12));
  }
  SUBCASE("constant velocity") {
    e.velocity = geo::Vec2(1, 0);
    q.push_frame({e});
    const auto h = history_transform(q, geo::Mat4::Identity(), 0.5, dec);
    const Tensor pe = dec.pe().apply(Var(Tensor::matrix({{5.5, -2, 0.5}}))).value();
    for (std::size_t j = 0; j < 8; ++j) CHECK(h.encodings.value()(0, j) == doctest::Approx(pe(0, j)).epsilon(1e-14));
  }
  SUBCASE("non-rigid pose is skipped") {
    e.ego_pose(0, 0) = 0.0;
    q.push_frame({e});
    HistoryEntry ok;
    ok.content = random_tensor({8}, r);
    q.push_frame({ok});
    const auto h = history_transform(q, geo::Mat4::Identity(), 0.0, dec);
    CHECK(h.size() == 1);
    CHECK(h.skipped_frames == 1);
  }
}
