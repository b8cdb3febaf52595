#include "fusionq/query_gen/query_gen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fusionq/errors.hpp"

namespace fusionq::qgen {

using nn::Tensor;
using nn::Var;

DepthBins make_depth_bins(double d_min, double d_max, std::size_t n) {
  if (n < 2) throw ConfigError("depth bins: need at least two bins");
  if (!(d_min > 0.0)) throw ConfigError("depth bins: d_min must be positive");
  if (!(d_min < d_max) || !std::isfinite(d_max)) throw ConfigError("depth bins: need d_min < d_max");
  DepthBins bins;
  bins.d_min = d_min;
  bins.d_max = d_max;
  bins.values.resize(n);
  const double gap = (d_max - d_min) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) bins.values[i] = d_min + gap * static_cast<double>(i);
  bins.values.back() = d_max;
  return bins;
}

std::size_t DepthBins::nearest(double depth) const {
  if (values.empty()) throw DomainError("depth bins: empty");
  auto it = std::lower_bound(values.begin(), values.end(), depth);
  if (it == values.begin()) return 0;
  if (it == values.end()) return values.size() - 1;
  const auto hi = static_cast<std::size_t>(it - values.begin());
  return (depth - values[hi - 1] <= values[hi] - depth) ? hi - 1 : hi;
}

std::vector<std::size_t> top_k_by_score(std::span<const double> scores, std::size_t cap) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (idx.size() > cap) idx.resize(cap);
  return idx;
}

// ---------------------------------------------------------------------------

std::array<double, 7> box_scalars(const geo::Box3D& b) {
  return {b.center.x(), b.center.y(), b.center.z(), b.size.x(), b.size.y(), b.size.z(), b.yaw};
}

PointCloudQueryGenerator::PointCloudQueryGenerator(nn::ParamStore& store, const PcQueryConfig& cfg, nn::Rng& rng)
    : cfg_(cfg),
      inner_(store, "pcq.inner", {7 * cfg.sinpos_channels, cfg.width, cfg.width}, rng),
      outer_(store, "pcq.outer", {cfg.width, cfg.width, cfg.width}, rng) {
  if (cfg.sinpos_channels == 0 || cfg.sinpos_channels % 2 != 0)
    throw ConfigError("pc queries: sinpos channels must be even and positive");
}

PointCloudQueryGenerator::PointCloudQueryGenerator(const PcQueryConfig& cfg, nn::Mlp inner, nn::Mlp outer)
    : cfg_(cfg), inner_(std::move(inner)), outer_(std::move(outer)) {
  if (inner_.in_width() != 7 * cfg.sinpos_channels) throw ConfigError("pc queries: inner MLP input width");
  if (inner_.out_width() != outer_.in_width()) throw ConfigError("pc queries: inner/outer width mismatch");
}

PointCloudQuerySet PointCloudQueryGenerator::generate(std::span<const ScoredBox3D> detections,
                                                      const Tensor& appearance) const {
  const std::size_t c = inner_.out_width();
  if (appearance.rows() != detections.size() || (!detections.empty() && appearance.cols() != c))
    throw ShapeError("pc queries: appearance rows must match detections and have width C");

  std::vector<double> scores;
  scores.reserve(detections.size());
  for (const auto& d : detections) scores.push_back(d.score);
  PointCloudQuerySet out;
  out.source_index = top_k_by_score(scores, cfg_.cap);
  const std::size_t m = out.source_index.size();

  out.positions = Tensor({m, 3}, 0.0);
  out.boxes = Tensor({m, 7}, 0.0);
  out.appearance = Tensor({m, c}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t s = out.source_index[i];
    const auto b = box_scalars(detections[s].box);
    std::copy(b.begin(), b.end(), out.boxes.row(i).begin());
    std::copy(b.begin(), b.begin() + 3, out.positions.row(i).begin());
    const auto a = appearance.row(s);
    std::copy(a.begin(), a.end(), out.appearance.row(i).begin());
  }
  if (m == 0) {
    out.contents = Var(Tensor({0, outer_.out_width()}, 0.0));
    return out;
  }
  const Var enc = nn::sinpos_rows(Var(out.boxes), cfg_.sinpos_channels, cfg_.temperature);
  out.contents = outer_.forward(nn::add(Var(out.appearance), inner_.forward(enc)));
  return out;
}

// ---------------------------------------------------------------------------

std::array<double, kIntrinsicEntries> flatten_intrinsics(const geo::Mat4& k, const geo::CameraModel& cam,
                                                         const geo::Box2D& box, geo::RoiSize roi, double scale) {
  const double rx = roi.width / box.width();
  const double ry = roi.height / box.height();
  return {k(0, 0) / scale,
          k(1, 1) / scale,
          k(0, 2) / scale,
          k(1, 2) / scale,
          cam.width() * rx / scale,
          cam.height() * ry / scale,
          roi.width / scale,
          roi.height / scale};
}

ImageQueryGenerator::ImageQueryGenerator(nn::ParamStore& store, const ImgQueryConfig& cfg, std::size_t depth_bins,
                                         nn::Rng& rng)
    : cfg_(cfg),
      conv_(store, "imgq.conv", cfg.feature_channels, cfg.width, rng),
      content_(store, "imgq.content", {cfg.width + kIntrinsicEntries, cfg.width, cfg.width}, rng),
      head_(store, "imgq.head", {cfg.width, cfg.width, 3 * depth_bins}, rng) {
  if (depth_bins < 2) throw ConfigError("img queries: need at least two depth bins");
}

ImageQueryGenerator::ImageQueryGenerator(const ImgQueryConfig& cfg, nn::LinearParams conv, nn::Mlp content,
                                         nn::Mlp head)
    : cfg_(cfg), conv_(std::move(conv)), content_(std::move(content)), head_(std::move(head)) {
  if (content_.in_width() != conv_.weight.cols() + kIntrinsicEntries)
    throw ConfigError("img queries: content MLP input width");
  if (head_.in_width() != content_.out_width() || head_.out_width() % 3 != 0)
    throw ConfigError("img queries: head MLP widths");
}

ImageQuerySet ImageQueryGenerator::generate(std::span<const ViewDetections> views, const DepthBins& bins) const {
  const std::size_t nd = bins.count();
  if (head_.out_width() != 3 * nd) throw ShapeError("img queries: head width does not match depth bins");
  const std::size_t cf = conv_.weight.rows();
  const std::size_t cells = static_cast<std::size_t>(cfg_.roi.width) * cfg_.roi.height;

  ImageQuerySet out;
  std::vector<const geo::CameraModel*> cams;
  std::vector<double> roi_values;
  std::vector<double> intr_values;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const auto& view = views[v];
    if (view.detections.empty()) continue;
    if (view.camera == nullptr || view.features == nullptr) throw ConfigError("img queries: view without inputs");
    if (view.features->rank() != 3 || view.features->dim(2) != cf)
      throw ShapeError("img queries: feature map must be [H, W, C_f]");
    const geo::Box2D image = view.camera->image_box();

    std::vector<double> scores;
    std::vector<std::size_t> kept;
    std::vector<geo::Box2D> clipped;
    for (std::size_t i = 0; i < view.detections.size(); ++i) {
      const auto& b = view.detections[i].box;
      const geo::Box2D c{std::max(b.x_min, image.x_min), std::max(b.y_min, image.y_min),
                         std::min(b.x_max, image.x_max), std::min(b.y_max, image.y_max)};
      if (!b.valid() || !c.valid()) continue;
      scores.push_back(view.detections[i].score);
      kept.push_back(i);
      clipped.push_back(c);
    }
    for (const std::size_t k : top_k_by_score(scores, cfg_.cap_per_view)) {
      const geo::Box2D& box = clipped[k];
      const geo::Box2D fbox{box.x_min / cfg_.feature_stride, box.y_min / cfg_.feature_stride,
                            box.x_max / cfg_.feature_stride, box.y_max / cfg_.feature_stride};
      const Tensor roi = geo::roi_align(*view.features, fbox, cfg_.roi);
      roi_values.insert(roi_values.end(), roi.values().begin(), roi.values().end());
      const geo::Mat4 k_eq = geo::equivalent_intrinsics(*view.camera, box, cfg_.roi);
      const auto flat = flatten_intrinsics(k_eq, *view.camera, box, cfg_.roi, cfg_.intrinsics_scale);
      intr_values.insert(intr_values.end(), flat.begin(), flat.end());
      out.boxes.push_back(box);
      out.views.push_back(v);
      out.source_index.push_back(kept[k]);
      out.intrinsics.push_back(k_eq);
      cams.push_back(view.camera);
    }
  }

  const std::size_t m = out.boxes.size();
  if (m == 0) {
    out.contents = Var(Tensor({0, content_.out_width()}, 0.0));
    out.samples = Var(Tensor({0, 3 * nd}, 0.0));
    out.probs = Var(Tensor({0, nd}, 0.0));
    out.pixels = Var(Tensor({0, 2 * nd}, 0.0));
    return out;
  }

  const Var roi_feats(Tensor({m * cells, cf}, std::move(roi_values)));
  const Var pooled = nn::group_mean_rows(nn::relu(conv_.apply(roi_feats)), cells);
  const Var intr(Tensor({m, kIntrinsicEntries}, std::move(intr_values)));
  const Var parts[] = {pooled, intr};
  out.contents = content_.forward(nn::concat_cols(parts));

  const Var head = head_.forward(out.contents);
  const Var raw = nn::slice_cols(head, 0, 2 * nd);
  out.probs = nn::softmax_rows(nn::slice_cols(head, 2 * nd, 3 * nd));

  Tensor origin({m, 2 * nd}, 0.0);
  Tensor extent({m, 2 * nd}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& b = out.boxes[i];
    for (std::size_t j = 0; j < nd; ++j) {
      origin(i, 2 * j) = b.x_min;
      origin(i, 2 * j + 1) = b.y_min;
      extent(i, 2 * j) = b.width();
      extent(i, 2 * j + 1) = b.height();
    }
  }
  out.pixels = nn::add(nn::mul(nn::sigmoid(raw), Var(std::move(extent))), Var(std::move(origin)));
  out.samples = unproject_pixels(out.pixels, cams, bins.values);
  return out;
}

// ---------------------------------------------------------------------------

Var unproject_pixels(const Var& pixels, std::span<const geo::CameraModel* const> cameras,
                     std::span<const double> depths) {
  const std::size_t m = pixels.rows();
  const std::size_t nd = depths.size();
  if (pixels.cols() != 2 * nd || cameras.size() != m) throw ShapeError("unproject_pixels: shape mismatch");
  for (const double d : depths)
    if (!(d > 0.0)) throw DomainError("unproject_pixels: depth must be positive");

  Tensor out({m, 3 * nd}, 0.0);
  const Tensor& px = pixels.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < nd; ++j) {
      const geo::Vec3 p = geo::unproject_pixel_at_depth(*cameras[i], {px(i, 2 * j), px(i, 2 * j + 1)}, depths[j]);
      for (int k = 0; k < 3; ++k) out(i, 3 * j + k) = p[k];
    }
  }
  std::vector<const geo::CameraModel*> cams(cameras.begin(), cameras.end());
  std::vector<double> ds(depths.begin(), depths.end());
  return nn::make_result(std::move(out), {pixels}, [cams = std::move(cams), ds = std::move(ds)](nn::detail::Node& n) {
    auto& parent = *n.parents[0];
    if (!parent.requires_grad) return;
    Tensor& g = parent.grad_buffer();
    const std::size_t nd = ds.size();
    for (std::size_t i = 0; i < cams.size(); ++i) {
      const geo::Mat4& t = cams[i]->camera_to_world();
      for (std::size_t j = 0; j < nd; ++j) {
        double gx = 0.0, gy = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double go = n.grad(i, 3 * j + k);
          gx += go * t(k, 0);
          gy += go * t(k, 1);
        }
        g(i, 2 * j) += gx * ds[j] / cams[i]->fx();
        g(i, 2 * j + 1) += gy * ds[j] / cams[i]->fy();
      }
    }
  });
}

geo::Vec3 anchor_from_distribution(std::span<const double> samples, std::span<const double> probs) {
  if (samples.size() != 3 * probs.size() || probs.empty()) throw ShapeError("anchor: samples must be n_d x 3");
  double total = 0.0;
  for (const double u : probs) {
    if (!(u >= 0.0)) throw DomainError("anchor: negative probability");
    total += u;
  }
  if (std::fabs(total - 1.0) > 1e-6) throw DomainError("anchor: probabilities do not sum to one");
  geo::Vec3 a = geo::Vec3::Zero();
  for (std::size_t j = 0; j < probs.size(); ++j)
    a += probs[j] * geo::Vec3(samples[3 * j], samples[3 * j + 1], samples[3 * j + 2]);
  return a;
}

}  // namespace fusionq::qgen
