#include <algorithm>
#include <cmath>

#include "fusionq/errors.hpp"
#include "fusionq/harness/harness.hpp"

namespace fusionq::harness {

double average_precision(const std::vector<FrameResult>& frames, int cls, double threshold) {
  struct Candidate {
    double score;
    std::size_t frame;
    std::size_t index;
  };
  std::vector<Candidate> cands;
  std::size_t n_gt = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (std::size_t i = 0; i < frames[f].predictions.size(); ++i)
      if (frames[f].predictions[i].cls == cls) cands.push_back({frames[f].predictions[i].score, f, i});
    for (const auto& g : frames[f].gts) n_gt += g.cls == cls;
  }
  if (n_gt == 0) return 0.0;
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

  std::vector<std::vector<char>> taken(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) taken[f].assign(frames[f].gts.size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const auto& c = cands[k];
    const auto& p = frames[c.frame].predictions[c.index];
    const auto& gts = frames[c.frame].gts;
    double best = threshold;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gts[j].cls != cls || taken[c.frame][j]) continue;
      const double d = (gts[j].box.center.head<2>() - p.center).norm();
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    if (best_j < gts.size()) {
      taken[c.frame][best_j] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

ApTable evaluate_center_ap(const std::vector<FrameResult>& frames, const std::vector<double>& thresholds,
                           std::size_t num_classes) {
  if (thresholds.empty()) throw ConfigError("at least one distance threshold is required");
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    if (!(thresholds[t] > 0.0)) throw ConfigError("distance thresholds must be positive");
    if (t > 0 && !(thresholds[t] > thresholds[t - 1])) throw ConfigError("distance thresholds must ascend");
  }
  ApTable table;
  table.thresholds = thresholds;
  table.ap.assign(num_classes, std::vector<double>(thresholds.size(), 0.0));
  table.gt_counts.assign(num_classes, 0);
  for (const auto& f : frames)
    for (const auto& g : f.gts)
      if (g.cls >= 0 && static_cast<std::size_t>(g.cls) < num_classes) ++table.gt_counts[g.cls];
  table.mean_per_threshold.assign(thresholds.size(), 0.0);
  std::size_t classes = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (table.gt_counts[c] == 0) continue;
    ++classes;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      table.ap[c][t] = average_precision(frames, static_cast<int>(c), thresholds[t]);
      table.mean_per_threshold[t] += table.ap[c][t];
    }
  }
  if (classes == 0) return table;
  double total = 0.0;
  for (double& m : table.mean_per_threshold) {
    m /= static_cast<double>(classes);
    total += m;
  }
  table.mean = total / static_cast<double>(thresholds.size());
  return table;
}

namespace {

void add_curve_point(const nn::Tensor& anchors, std::size_t first_img, const std::vector<sim::GroundTruth>& gts,
                     double& sum, std::size_t& count) {
  const std::size_t m = anchors.rows() - first_img;
  if (m == 0 || gts.empty()) return;
  nn::Tensor cost({m, gts.size()});
  for (std::size_t i = 0; i < m; ++i) {
    const geo::Vec3 a(anchors(first_img + i, 0), anchors(first_img + i, 1), anchors(first_img + i, 2));
    for (std::size_t j = 0; j < gts.size(); ++j) cost(i, j) = (a - gts[j].box.center).squaredNorm();
  }
  for (const auto& [i, j] : train::hungarian_match(cost).pairs) {
    sum += cost(i, j);
    ++count;
  }
}

}  // namespace

void MseAccumulator::add(const dec::DecoderOutput& out, const std::vector<sim::GroundTruth>& gts) {
  if (out.num_img == 0) return;
  const std::size_t points = out.layers.size() + 1;
  if (sum.size() != points) {
    sum.assign(points, 0.0);
    count.assign(points, 0);
  }
  add_curve_point(out.initial_anchors.value(), out.num_pc, gts, sum[0], count[0]);
  for (std::size_t l = 0; l < out.layers.size(); ++l)
    add_curve_point(out.layers[l].anchors.value(), out.num_pc, gts, sum[l + 1], count[l + 1]);
}

std::vector<double> MseAccumulator::curve() const {
  std::vector<double> c;
  for (std::size_t i = 0; i < sum.size(); ++i) c.push_back(count[i] > 0 ? sum[i] / static_cast<double>(count[i]) : 0.0);
  return c;
}

std::vector<double> per_layer_image_query_mse(const dec::DecoderOutput& out, const std::vector<sim::GroundTruth>& gts) {
  MseAccumulator acc;
  acc.add(out, gts);
  return acc.curve();
}

std::vector<Prediction> extract_predictions(const dec::DecoderOutput& out) {
  std::vector<Prediction> preds;
  if (out.size() == 0) return preds;
  const auto& last = out.final_layer();
  const nn::Tensor& cls = last.cls.value();
  const nn::Tensor& reg = last.reg.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = cls.row(i);
    const auto best = std::max_element(row.begin(), row.end());
    Prediction p;
    p.cls = static_cast<int>(best - row.begin());
    p.score = 1.0 / (1.0 + std::exp(-*best));
    p.center = {reg(i, dec::kX), reg(i, dec::kY)};
    preds.push_back(p);
  }
  return preds;
}

std::size_t dense_grid_count(double extent_x, double extent_y, double cell) {
  if (!(cell > 0.0) || !(extent_x > 0.0) || !(extent_y > 0.0)) throw ConfigError("dense grid needs positive extents");
  // 408 / 0.6 lands a hair above 680 in binary
  auto cells = [&](double e) { return static_cast<std::size_t>(std::ceil(e / cell - 1e-9)); };
  return cells(extent_x) * cells(extent_y);
}

SparsityStats bench_sparsity(const std::vector<sim::Sequence>& sequences, double pillar_cell, double half_extent,
                             double dense_cell, double dense_extent) {
  if (!(pillar_cell > 0.0) || !(half_extent > 0.0)) throw ConfigError("pillar cell and extent must be positive");
  SparsityStats s;
  s.dense_grid_count = dense_grid_count(dense_extent, dense_extent, dense_cell);
  double total = 0.0;
  for (const auto& seq : sequences) {
    for (const auto& frame : seq) {
      const nn::Tensor feats({frame.points.size(), 1}, 0.0);
      total += static_cast<double>(sim::pillarize(frame.points, feats, pillar_cell, half_extent).size());
      ++s.frames;
    }
  }
  s.pillar_count_mean = s.frames > 0 ? total / static_cast<double>(s.frames) : 0.0;
  s.ratio = s.pillar_count_mean / static_cast<double>(s.dense_grid_count);
  return s;
}

}  // namespace fusionq::harness
