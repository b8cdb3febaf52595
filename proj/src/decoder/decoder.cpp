#include "fusionq/decoder/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <tuple>

#include <Eigen/LU>

#include "fusionq/errors.hpp"

namespace fusionq::dec {

using nn::Tensor;
using nn::Var;

void DecoderConfig::validate() const {
  if (layers == 0) throw ConfigError("decoder: need at least one layer");
  if (samples == 0) throw ConfigError("decoder: need at least one deformable sample");
  if (heads == 0 || width % heads != 0) throw ConfigError("decoder: width must be divisible by heads");
  if (num_classes == 0) throw ConfigError("decoder: need at least one class");
  if (depth_bins < 2) throw ConfigError("decoder: need at least two depth bins");
  if (sinpos_channels == 0 || sinpos_channels % 2 != 0 || history_sinpos_channels == 0 ||
      history_sinpos_channels % 2 != 0)
    throw ConfigError("decoder: sinusoidal channel counts must be even and positive");
  if (!(feature_stride > 0.0) || !(offset_range >= 0.0) || !(upe_position_scale > 0.0))
    throw ConfigError("decoder: stride, offset range and position scale must be positive");
}

geo::Box3D decode_box(std::span<const double> reg) {
  if (reg.size() < kRegChannels) throw ShapeError("decode_box: need 10 regression channels");
  geo::Box3D b;
  b.center = geo::Vec3(reg[kX], reg[kY], reg[kZ]);
  b.size = geo::Vec3(std::exp(reg[kLogW]), std::exp(reg[kLogL]), std::exp(reg[kLogH]));
  b.yaw = std::atan2(reg[kSin], reg[kCos]);
  b.velocity = geo::Vec2(reg[kVx], reg[kVy]);
  return b;
}

std::array<double, kRegChannels> encode_box(const geo::Box3D& b) {
  return {b.center.x(),         b.center.y(),         b.center.z(),  std::log(b.size.x()), std::log(b.size.y()),
          std::log(b.size.z()), std::sin(b.yaw),      std::cos(b.yaw), b.velocity.x(),      b.velocity.y()};
}

// ---------------------------------------------------------------------------
// deformable sampling

namespace {

struct Sample {
  std::size_t k = 0;
  std::vector<double> f;       // C_f features
  std::vector<double> dfdx;    // d f / d feature-map x
  std::vector<double> dfdy;
  Eigen::Matrix<double, 2, 3> jac;  // d (x_f, y_f) / d world point
};

// Bilinear read with border clamp; derivatives are zero along a clamped axis.
void bilinear_with_grad(const Tensor& fm, double x, double y, Sample& s) {
  const auto h = static_cast<long>(fm.dim(0));
  const auto w = static_cast<long>(fm.dim(1));
  const std::size_t c = fm.dim(2);
  const bool cx = x < 0.0 || x > static_cast<double>(w - 1);
  const bool cy = y < 0.0 || y > static_cast<double>(h - 1);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const long x0 = std::min(static_cast<long>(std::floor(x)), w - 1);
  const long y0 = std::min(static_cast<long>(std::floor(y)), h - 1);
  const long x1 = std::min(x0 + 1, w - 1);
  const long y1 = std::min(y0 + 1, h - 1);
  const double ax = x - static_cast<double>(x0);
  const double ay = y - static_cast<double>(y0);
  const double* p00 = fm.data() + (y0 * w + x0) * static_cast<long>(c);
  const double* p01 = fm.data() + (y0 * w + x1) * static_cast<long>(c);
  const double* p10 = fm.data() + (y1 * w + x0) * static_cast<long>(c);
  const double* p11 = fm.data() + (y1 * w + x1) * static_cast<long>(c);
  s.f.resize(c);
  s.dfdx.assign(c, 0.0);
  s.dfdy.assign(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    s.f[i] = (1.0 - ay) * ((1.0 - ax) * p00[i] + ax * p01[i]) + ay * ((1.0 - ax) * p10[i] + ax * p11[i]);
    if (!cx && x1 != x0) s.dfdx[i] = (1.0 - ay) * (p01[i] - p00[i]) + ay * (p11[i] - p10[i]);
    if (!cy && y1 != y0) s.dfdy[i] = (1.0 - ax) * (p10[i] - p00[i]) + ax * (p11[i] - p01[i]);
  }
}

}  // namespace

Var deformable_sample(const Var& points, const Var& logits, std::span<const ImageView> views, double stride) {
  const std::size_t m = points.rows();
  const std::size_t k = logits.cols();
  if (points.cols() != 3 * k || logits.rows() != m) throw ShapeError("deformable_sample: points [M,3K], logits [M,K]");
  std::size_t cf = 0;
  for (const auto& v : views) {
    if (v.camera == nullptr || v.features == nullptr || v.features->rank() != 3)
      throw ShapeError("deformable_sample: view needs a camera and an [H, W, C] map");
    if (cf != 0 && v.features->dim(2) != cf) throw ShapeError("deformable_sample: channel count differs across views");
    cf = v.features->dim(2);
  }
  if (views.empty()) return Var(Tensor({m, 0}, 0.0));

  auto samples = std::make_shared<std::vector<std::vector<Sample>>>(m);
  auto weights = std::make_shared<std::vector<std::vector<double>>>(m);
  Tensor out({m, cf}, 0.0);
  const Tensor& P = points.value();
  const Tensor& L = logits.value();
  for (std::size_t i = 0; i < m; ++i) {
    auto& row = (*samples)[i];
    for (const auto& view : views) {
      const auto& cam = *view.camera;
      const geo::Mat3 r = cam.extrinsic().block<3, 3>(0, 0);
      const geo::Vec3 t = cam.extrinsic().block<3, 1>(0, 3);
      for (std::size_t j = 0; j < k; ++j) {
        const geo::Vec3 p(P(i, 3 * j), P(i, 3 * j + 1), P(i, 3 * j + 2));
        const geo::Vec3 pc = r * p + t;
        if (!(pc.z() > geo::kMinDepth)) continue;
        const double u = cam.fx() * pc.x() / pc.z() + cam.ox();
        const double v = cam.fy() * pc.y() / pc.z() + cam.oy();
        if (!(u >= 0.0 && u < cam.width() && v >= 0.0 && v < cam.height())) continue;
        Sample s;
        s.k = j;
        bilinear_with_grad(*view.features, u / stride - 0.5, v / stride - 0.5, s);
        Eigen::Matrix<double, 2, 3> dp;
        dp << cam.fx() / pc.z(), 0.0, -cam.fx() * pc.x() / (pc.z() * pc.z()), 0.0, cam.fy() / pc.z(),
            -cam.fy() * pc.y() / (pc.z() * pc.z());
        s.jac = dp * r / stride;
        row.push_back(std::move(s));
      }
    }
    if (row.empty()) continue;
    auto& a = (*weights)[i];
    a.resize(row.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& s : row) mx = std::max(mx, L(i, s.k));
    double z = 0.0;
    for (std::size_t q = 0; q < row.size(); ++q) z += (a[q] = std::exp(L(i, row[q].k) - mx));
    for (std::size_t q = 0; q < row.size(); ++q) {
      a[q] /= z;
      for (std::size_t c = 0; c < cf; ++c) out(i, c) += a[q] * row[q].f[c];
    }
  }

  return nn::make_result(std::move(out), {points, logits}, [samples, weights](nn::detail::Node& n) {
    auto& pp = *n.parents[0];
    auto& pl = *n.parents[1];
    const std::size_t cf = n.value.cols();
    Tensor* gp = pp.requires_grad ? &pp.grad_buffer() : nullptr;
    Tensor* gl = pl.requires_grad ? &pl.grad_buffer() : nullptr;
    for (std::size_t i = 0; i < samples->size(); ++i) {
      const auto& row = (*samples)[i];
      const auto& a = (*weights)[i];
      if (row.empty()) continue;
      const double* g = n.grad.data() + i * cf;
      double mean_gf = 0.0;
      std::vector<double> gf(row.size());
      for (std::size_t q = 0; q < row.size(); ++q) {
        double s = 0.0;
        for (std::size_t c = 0; c < cf; ++c) s += g[c] * row[q].f[c];
        gf[q] = s;
        mean_gf += a[q] * s;
      }
      for (std::size_t q = 0; q < row.size(); ++q) {
        const auto& s = row[q];
        if (gl) (*gl)(i, s.k) += a[q] * (gf[q] - mean_gf);
        if (gp) {
          double gx = 0.0, gy = 0.0;
          for (std::size_t c = 0; c < cf; ++c) {
            gx += g[c] * s.dfdx[c];
            gy += g[c] * s.dfdy[c];
          }
          const Eigen::RowVector3d d = a[q] * (gx * s.jac.row(0) + gy * s.jac.row(1));
          for (int e = 0; e < 3; ++e) (*gp)(i, 3 * s.k + e) += d[e];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// blocks

Var SelfAttentionBlock::apply(const Var& contents, const Var& encodings, const HistoryTokens* history) const {
  const Var q = nn::add(contents, encodings);
  Var kv = q;
  if (history != nullptr && history->size() > 0) {
    const Var parts[] = {q, nn::add(history->contents, history->encodings)};
    kv = nn::concat_rows(parts);
  }
  return norm.apply(nn::add(contents, attn.forward(q, kv, kv)));
}

Var ImageCrossBlock::apply(const Var& contents, const Var& anchors, std::span<const ImageView> views) const {
  if (views.empty()) return norm.apply(contents);
  const Var off = nn::scale(nn::tanh(offsets.apply(contents)), offset_range);
  const Var pts = nn::add_anchor_offsets(anchors, off);
  const Var agg = deformable_sample(pts, logits.apply(contents), views, stride);
  return norm.apply(nn::add(contents, nn::matmul(agg, value)));
}

Var PillarCrossBlock::apply(const Var& contents, const Var& encodings, const Var& pillar_contents,
                            const Var& pillar_encodings) const {
  if (!pillar_contents.defined() || pillar_contents.rows() == 0) return norm.apply(contents);
  const Var q = nn::add(contents, encodings);
  const Var k = nn::add(pillar_contents, pillar_encodings);
  return norm.apply(nn::add(contents, attn.forward(q, k, pillar_contents)));
}

Var calibrate(const Var& probs, const Var& contents, const nn::Mlp& mlp) {
  return nn::softmax_rows(nn::add(nn::log_floor(probs, 1e-12), mlp.forward(contents)));
}

Var UncertaintyEncoder::apply(const Var& samples, const Var& probs) const {
  const Tensor& u = probs.value();
  for (std::size_t i = 0; i < u.rows(); ++i) {
    double s = 0.0;
    for (const double v : u.row(i)) s += v;
    if (std::fabs(s - 1.0) > 1e-6) throw DomainError("U-PE: probability row " + std::to_string(i) + " not normalized");
  }
  const Var base = position.forward(nn::scale(samples, position_scale));
  return out.forward(nn::mul(base, nn::sigmoid(gate.forward(probs))));
}

std::pair<Var, Var> OutputHeads::apply(const Var& contents, const Var& anchors) const {
  const std::size_t m = contents.rows();
  const Var pad(Tensor({m, kRegChannels - 3}, 0.0));
  const Var parts[] = {anchors, pad};
  return {cls.forward(contents), nn::add(reg.forward(contents), nn::concat_cols(parts))};
}

// ---------------------------------------------------------------------------

FusionDecoder::FusionDecoder(nn::ParamStore& store, const DecoderConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.width;
  const std::size_t ch = cfg.sinpos_channels;
  pe_ = {nn::Mlp(store, "dec.pe", {3 * ch, c, c}, rng), ch, cfg.temperature};
  upe_ = {nn::Mlp(store, "dec.upe.pos", {3 * cfg.depth_bins, c, c}, rng),
          nn::Mlp(store, "dec.upe.gate", {cfg.depth_bins, c}, rng), nn::Mlp(store, "dec.upe.out", {c, c}, rng),
          cfg.upe_position_scale};
  pillar_pe_ = {nn::Mlp(store, "dec.pillar_pe", {2 * ch, c, c}, rng), ch, cfg.temperature};
  heads_ = {nn::Mlp(store, "dec.cls", {c, c, cfg.num_classes}, rng), nn::Mlp(store, "dec.reg", {c, c, kRegChannels}, rng)};
  // prior probability 0.1 on every class
  Var cls_bias = heads_.cls.biases().back();
  cls_bias.mutable_value().fill(-std::log(9.0));
  history_ = nn::Mlp(store, "dec.hist", {15 * cfg.history_sinpos_channels, c, c}, rng);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "dec.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.self = {nn::Attention(store, p + ".self", c, cfg.heads, rng), nn::NormParams(store, p + ".self.norm", c)};
    layer.image.offsets = nn::LinearParams(store, p + ".img.offsets", c, 3 * cfg.samples, rng);
    layer.image.logits = nn::LinearParams(store, p + ".img.logits", c, cfg.samples, rng);
    layer.image.value = store.add_xavier(p + ".img.value", cfg.feature_channels, c, rng);
    layer.image.norm = nn::NormParams(store, p + ".img.norm", c);
    layer.image.offset_range = cfg.offset_range;
    layer.image.stride = cfg.feature_stride;
    layer.pillar = {nn::Attention(store, p + ".pillar", c, cfg.heads, rng),
                    nn::NormParams(store, p + ".pillar.norm", c)};
    layer.ffn = {nn::Mlp(store, p + ".ffn", {c, 2 * c, c}, rng), nn::NormParams(store, p + ".ffn.norm", c)};
    layer.calibration = nn::Mlp(store, p + ".calib", {c, c, cfg.depth_bins}, rng);
    layers_.push_back(std::move(layer));
  }
}

namespace {

Var stack_rows(const Var& a, const Var& b) {
  if (!a.defined() || a.rows() == 0) return b;
  if (!b.defined() || b.rows() == 0) return a;
  const Var parts[] = {a, b};
  return nn::concat_rows(parts);
}

}  // namespace

DecoderOutput FusionDecoder::run(const DecoderInputs& in) const {
  DecoderOutput out;
  out.num_pc = in.pc != nullptr ? in.pc->size() : 0;
  out.num_img = in.img != nullptr ? in.img->size() : 0;
  if (out.size() == 0) return out;

  Var pc_contents, pc_anchors, pc_enc;
  if (out.num_pc > 0) {
    if (in.pc->contents.cols() != cfg_.width) throw ShapeError("decoder: point-cloud query width");
    pc_contents = in.pc->contents;
    pc_anchors = Var(in.pc->positions);
    pc_enc = pe_.apply(pc_anchors);
  }
  Var samples, probs, img_contents, img_anchors, img_enc;
  if (out.num_img > 0) {
    if (in.img->contents.cols() != cfg_.width) throw ShapeError("decoder: image query width");
    if (in.img->probs.cols() != cfg_.depth_bins) throw ShapeError("decoder: depth bin count");
    img_contents = in.img->contents;
    samples = in.img->samples;
    probs = in.img->probs;
    img_anchors = nn::expected_positions(probs, samples);
    img_enc = cfg_.uncertainty_aware ? upe_.apply(samples, probs) : pe_.apply(img_anchors);
  }

  Var contents = stack_rows(pc_contents, img_contents);
  Var anchors = stack_rows(pc_anchors, img_anchors);
  Var enc = stack_rows(pc_enc, img_enc);
  out.initial_anchors = anchors;

  Var pillar_contents, pillar_enc;
  if (cfg_.use_cross_attention && in.pillars != nullptr && in.pillars->size() > 0) {
    if (in.pillars->contents.cols() != cfg_.width || in.pillars->positions.cols() != 2)
      throw ShapeError("decoder: pillars need [P,2] positions and [P,C] contents");
    pillar_contents = Var(in.pillars->contents);
    pillar_enc = pillar_pe_.apply(Var(in.pillars->positions));
  }
  const std::span<const ImageView> views = cfg_.use_cross_attention ? in.views : std::span<const ImageView>{};

  for (const auto& layer : layers_) {
    contents = layer.self.apply(contents, enc, in.history);
    if (cfg_.use_cross_attention) {
      contents = layer.image.apply(contents, anchors, views);
      contents = layer.pillar.apply(contents, enc, pillar_contents, pillar_enc);
    }
    contents = layer.ffn.apply(contents);

    if (out.num_img > 0 && cfg_.uncertainty_aware) {
      const Var c_img = nn::slice_rows(contents, out.num_pc, out.size());
      probs = calibrate(probs, c_img, layer.calibration);
      img_anchors = nn::expected_positions(probs, samples);
      img_enc = upe_.apply(samples, probs);
      anchors = stack_rows(pc_anchors, img_anchors);
      enc = stack_rows(pc_enc, img_enc);
    }

    LayerState st;
    st.contents = contents;
    st.anchors = anchors;
    st.probs = probs;
    std::tie(st.cls, st.reg) = heads_.apply(contents, anchors);
    out.layers.push_back(std::move(st));
  }
  return out;
}

// ---------------------------------------------------------------------------
// history

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
  return qgen::top_k_by_score(scores, k);
}

std::size_t HistoryQueue::size() const noexcept {
  std::size_t n = 0;
  for (const auto& f : queue_) n += f.size();
  return n;
}

void HistoryQueue::push_frame(std::vector<HistoryEntry> entries) {
  if (frames_ == 0) return;
  if (entries.size() > top_k_) entries.resize(top_k_);
  queue_.push_front(std::move(entries));
  while (queue_.size() > frames_) queue_.pop_back();
}

std::vector<std::size_t> HistoryQueue::push_topk(const DecoderOutput& out, const geo::Mat4& ego_pose,
                                                 double timestamp) {
  if (!queue_.empty() && !queue_.front().empty() && timestamp < queue_.front().front().timestamp)
    throw DomainError("history: timestamps must not decrease");
  std::vector<HistoryEntry> entries;
  std::vector<std::size_t> idx;
  if (out.size() > 0) {
    const auto& last = out.final_layer();
    const Tensor& cls = last.cls.value();
    const Tensor& reg = last.reg.value();
    const Tensor& c = last.contents.value();
    std::vector<double> scores(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto row = cls.row(i);
      const double z = *std::max_element(row.begin(), row.end());
      scores[i] = 1.0 / (1.0 + std::exp(-z));
    }
    idx = topk_indices(scores, top_k_);
    for (const std::size_t i : idx) {
      HistoryEntry e;
      e.content = Tensor({c.cols()}, std::vector<double>(c.row(i).begin(), c.row(i).end()));
      e.position = geo::Vec3(reg(i, kX), reg(i, kY), reg(i, kZ));
      e.velocity = geo::Vec2(reg(i, kVx), reg(i, kVy));
      e.score = scores[i];
      e.ego_pose = ego_pose;
      e.timestamp = timestamp;
      entries.push_back(std::move(e));
    }
  }
  push_frame(std::move(entries));
  return idx;
}

HistoryTokens history_transform(const HistoryQueue& queue, const geo::Mat4& current_pose, double now,
                                const FusionDecoder& decoder) {
  HistoryTokens tokens;
  const std::size_t c = decoder.config().width;
  const geo::Mat4 inv_cur = geo::rigid_inverse(current_pose);
  std::vector<double> contents, scalars, positions;
  std::size_t n = 0;
  for (const auto& frame : queue.frames()) {
    if (frame.empty()) continue;
    const geo::Mat4 rel = inv_cur * frame.front().ego_pose;
    const geo::Mat3 r = rel.block<3, 3>(0, 0);
    const bool rigid = rel.allFinite() && (r * r.transpose() - geo::Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6 &&
                       r.determinant() > 0.0;
    if (!rigid) {
      ++tokens.skipped_frames;
      continue;
    }
    for (const auto& e : frame) {
      if (e.content.size() != c) throw ShapeError("history: stored content width differs from decoder width");
      const double dt = now - e.timestamp;
      const geo::Vec3 v = r * geo::Vec3(e.velocity.x(), e.velocity.y(), 0.0);
      const geo::Vec3 p = geo::transform_point(rel, e.position) + v * dt;
      contents.insert(contents.end(), e.content.values().begin(), e.content.values().end());
      scalars.push_back(dt);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) scalars.push_back(rel(i, j));
      scalars.push_back(v.x());
      scalars.push_back(v.y());
      positions.insert(positions.end(), {p.x(), p.y(), p.z()});
      ++n;
    }
  }
  if (n == 0) return tokens;
  const auto& cfg = decoder.config();
  const Var stored(Tensor({n, c}, std::move(contents)));
  const Var enc = nn::sinpos_rows(Var(Tensor({n, 15}, std::move(scalars))), cfg.history_sinpos_channels,
                                  cfg.temperature);
  tokens.contents = nn::add(stored, decoder.history_mlp().forward(enc));
  tokens.encodings = decoder.pe().apply(Var(Tensor({n, 3}, std::move(positions))));
  return tokens;
}

}  // namespace fusionq::dec
