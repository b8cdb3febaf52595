#include "fusionq/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "fusionq/errors.hpp"

namespace fusionq::train {

using nn::Tensor;
using nn::Var;

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Var scalar_zero() { return Var(Tensor({1}, 0.0)); }

}  // namespace

// ---------------------------------------------------------------------------

MatchResult hungarian_match(const Tensor& cost) {
  MatchResult result;
  const std::size_t rows = cost.rank() == 2 ? cost.dim(0) : 0;
  const std::size_t cols = cost.rank() == 2 ? cost.dim(1) : 0;
  if (!cost.all_finite()) throw DomainError("hungarian_match: non-finite cost");
  if (rows == 0 || cols == 0) {
    for (std::size_t i = 0; i < rows; ++i) result.unmatched.push_back(i);
    return result;
  }
  // potentials method on an n x m matrix with n <= m
  const bool transposed = rows > cols;
  const std::size_t n = transposed ? cols : rows;
  const std::size_t m = transposed ? rows : cols;
  auto a = [&](std::size_t i, std::size_t j) { return transposed ? cost(j - 1, i - 1) : cost(i - 1, j - 1); };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<long> match(rows, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const std::size_t r = transposed ? j - 1 : p[j] - 1;
    const std::size_t c = transposed ? p[j] - 1 : j - 1;
    match[r] = static_cast<long>(c);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (match[r] >= 0)
      result.pairs.emplace_back(r, static_cast<std::size_t>(match[r]));
    else
      result.unmatched.push_back(r);
  }
  return result;
}

Tensor match_cost(const Tensor& cls_logits, const Tensor& reg, std::span<const sim::GroundTruth> gts,
                  const LossWeights& w) {
  const std::size_t m = cls_logits.rows();
  if (reg.rows() != m || reg.cols() != dec::kRegChannels) throw ShapeError("match_cost: reg must be [M, 10]");
  Tensor cost({m, gts.size()}, 0.0);
  std::vector<std::array<double, dec::kRegChannels>> targets;
  for (const auto& g : gts) {
    if (g.cls < 0 || static_cast<std::size_t>(g.cls) >= cls_logits.cols())
      throw DomainError("match_cost: class index out of range");
    targets.push_back(dec::encode_box(g.box));
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double x = cls_logits(i, gts[j].cls);
      const double p = 1.0 / (1.0 + std::exp(-x));
      const double pos = w.focal_alpha * std::pow(1.0 - p, w.focal_gamma) * softplus(-x);
      const double neg = (1.0 - w.focal_alpha) * std::pow(p, w.focal_gamma) * softplus(x);
      double l1 = 0.0;
      for (std::size_t c = 0; c < dec::kRegChannels; ++c) l1 += std::fabs(reg(i, c) - targets[j][c]);
      cost(i, j) = w.cls * (pos - neg) + l1;
    }
  }
  return cost;
}

// ---------------------------------------------------------------------------

Var focal_loss(const Var& logits, std::span<const int> targets, double alpha, double gamma) {
  if (!(alpha > 0.0 && alpha < 1.0) || !(gamma >= 0.0)) throw DomainError("focal_loss: alpha in (0,1), gamma >= 0");
  const std::size_t m = logits.rows();
  const std::size_t k = logits.cols();
  if (targets.size() != m) throw ShapeError("focal_loss: one target per prediction");
  if (m == 0) return scalar_zero();
  const Tensor& x = logits.value();
  auto grad = std::make_shared<Tensor>(x.shape(), 0.0);
  double total = 0.0;
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= static_cast<int>(k)) throw DomainError("focal_loss: class index out of range");
    for (std::size_t c = 0; c < k; ++c) {
      const double z = x(i, c);
      const double p = 1.0 / (1.0 + std::exp(-z));
      if (targets[i] == static_cast<int>(c)) {
        const double nlp = softplus(-z);  // -ln p
        const double q = 1.0 - p;
        total += alpha * std::pow(q, gamma) * nlp;
        (*grad)(i, c) = alpha * (-gamma * std::pow(q, gamma) * p * nlp - std::pow(q, gamma + 1.0)) * inv_m;
      } else {
        const double nlq = softplus(z);  // -ln(1-p)
        total += (1.0 - alpha) * std::pow(p, gamma) * nlq;
        (*grad)(i, c) = (1.0 - alpha) * (gamma * std::pow(p, gamma) * (1.0 - p) * nlq + std::pow(p, gamma + 1.0)) * inv_m;
      }
    }
  }
  return nn::make_result(Tensor({1}, total * inv_m), {logits}, [grad](nn::detail::Node& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    Tensor& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * (*grad)[i];
  });
}

Var box_reg_loss(const Var& reg, std::span<const std::pair<std::size_t, std::size_t>> pairs,
                 std::span<const sim::GroundTruth> gts) {
  if (pairs.empty()) return scalar_zero();
  if (reg.cols() != dec::kRegChannels) throw ShapeError("box_reg_loss: reg must have 10 channels");
  std::vector<std::size_t> rows;
  Tensor target({pairs.size(), dec::kRegChannels});
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    rows.push_back(pairs[p].first);
    const auto t = dec::encode_box(gts[pairs[p].second].box);
    std::copy(t.begin(), t.end(), target.row(p).begin());
  }
  return nn::mean(nn::abs(nn::sub(nn::gather_rows(reg, rows), Var(std::move(target)))));
}

std::vector<std::pair<std::size_t, std::size_t>> aux_assign_iou(const Tensor& iou, double threshold) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (iou.rank() != 2 || iou.dim(0) == 0 || iou.dim(1) == 0) return out;
  const std::size_t n = iou.dim(0);
  const std::size_t g = iou.dim(1);
  std::vector<std::size_t> row_best(n, 0), col_best(g, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 1; j < g; ++j)
      if (iou(i, j) > iou(i, row_best[i])) row_best[i] = j;
  for (std::size_t j = 0; j < g; ++j)
    for (std::size_t i = 1; i < n; ++i)
      if (iou(i, j) > iou(col_best[j], j)) col_best[j] = i;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = row_best[i];
    if (col_best[j] == i && iou(i, j) > threshold) out.emplace_back(i, j);
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> aux_assign_2d(std::span<const geo::Box2D> predicted,
                                                               std::span<const geo::Box2D> projected,
                                                               double threshold) {
  Tensor iou({predicted.size(), projected.size()}, 0.0);
  for (std::size_t i = 0; i < predicted.size(); ++i)
    for (std::size_t j = 0; j < projected.size(); ++j) iou(i, j) = geo::iou_2d(predicted[i], projected[j]);
  return aux_assign_iou(iou, threshold);
}

Var aux_depth_loss(const Var& probs, std::span<const std::size_t> rows, std::span<const double> depths,
                   const qgen::DepthBins& bins) {
  if (rows.size() != depths.size()) throw ShapeError("aux_depth_loss: one depth per assigned row");
  if (rows.empty()) return scalar_zero();
  if (probs.cols() != bins.count()) throw ShapeError("aux_depth_loss: probabilities must have one column per bin");
  Tensor onehot({rows.size(), bins.count()}, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (!(depths[r] > 0.0)) throw DomainError("aux_depth_loss: target depth must be positive");
    onehot(r, bins.nearest(depths[r])) = 1.0;
  }
  const Var picked = nn::mul(nn::log_floor(nn::gather_rows(probs, rows), 1e-12), Var(std::move(onehot)));
  return nn::scale(nn::sum(picked), -1.0 / static_cast<double>(rows.size()));
}

LossBreakdown compose_loss(double cls, double reg, double aux, const LossWeights& w) {
  if (w.cls < 0.0 || w.out < 0.0 || w.aux < 0.0) throw ConfigError("loss weights must be non-negative");
  LossBreakdown b;
  b.weights = w;
  b.cls = cls;
  b.reg = reg;
  b.aux = aux;
  b.out = w.cls * cls + reg;
  b.total = w.out * b.out + w.aux * aux;
  return b;
}

// ---------------------------------------------------------------------------

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kCamera:
      return "camera";
    case Modality::kLidar:
      return "lidar";
    case Modality::kBoth:
      return "both";
  }
  return "?";
}

Modality sample_modality_mix(nn::Rng& rng, std::span<const double> probabilities) {
  if (probabilities.size() != 3) throw ConfigError("modality mix needs three probabilities");
  double total = 0.0;
  for (double p : probabilities) {
    if (!(p >= 0.0)) throw ConfigError("modality probabilities must be non-negative");
    total += p;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("modality probabilities must sum to 1");
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < probabilities[0]) return Modality::kCamera;
  if (u < probabilities[0] + probabilities[1]) return Modality::kLidar;
  return Modality::kBoth;
}

void ModelConfig::finalize() {
  pc.width = decoder.width;
  img.width = decoder.width;
  img.feature_channels = decoder.feature_channels;
  img.feature_stride = decoder.feature_stride;
  decoder.validate();
  if (!(depth_min > 0.0) || !(depth_max > depth_min)) throw ConfigError("depth range must satisfy 0 < min < max");
  if (history_frames > 0 && history_top_k == 0) throw ConfigError("history top_k must be positive");
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.finalize();
  nn::Rng rng(seed);
  bins_ = qgen::make_depth_bins(cfg_.depth_min, cfg_.depth_max, cfg_.decoder.depth_bins);
  pc_gen_ = qgen::PointCloudQueryGenerator(store_, cfg_.pc, rng);
  img_gen_ = qgen::ImageQueryGenerator(store_, cfg_.img, cfg_.decoder.depth_bins, rng);
  decoder_ = dec::FusionDecoder(store_, cfg_.decoder, rng);
}

ForwardResult Model::forward(const sim::SceneFrame& frame, const sim::FrameObservation& obs, Modality modality,
                             const dec::HistoryQueue* history) const {
  ForwardResult r;
  r.modality = modality;
  const bool camera = modality != Modality::kLidar;
  const bool lidar = modality != Modality::kCamera;

  if (lidar) r.pc = pc_gen_.generate(obs.detections_3d.boxes, obs.detections_3d.appearance);

  std::vector<dec::ImageView> views;
  if (camera) {
    if (obs.feature_maps.size() != frame.cameras.size() || obs.detections_2d.size() != frame.cameras.size())
      throw ShapeError("forward: observation does not match the camera rig");
    std::vector<qgen::ViewDetections> per_view;
    for (std::size_t v = 0; v < frame.cameras.size(); ++v) {
      qgen::ViewDetections vd{&frame.cameras[v], &obs.feature_maps[v], {}};
      for (const auto& d : obs.detections_2d[v]) vd.detections.push_back({d.box, d.score});
      per_view.push_back(std::move(vd));
      views.push_back({&frame.cameras[v], &obs.feature_maps[v]});
    }
    r.img = img_gen_.generate(per_view, bins_);
    r.img_detection = r.img.source_index;
  }

  if (history != nullptr && history->frame_count() > 0)
    r.history = dec::history_transform(*history, frame.ego_pose, frame.timestamp, decoder_);

  dec::DecoderInputs in;
  in.pc = lidar ? &r.pc : nullptr;
  in.img = camera ? &r.img : nullptr;
  in.views = views;
  in.pillars = lidar ? &obs.pillars : nullptr;
  in.history = r.history.size() > 0 ? &r.history : nullptr;
  r.out = decoder_.run(in);
  return r;
}

ViewTargets project_targets(const sim::SceneFrame& frame, std::size_t view) {
  ViewTargets t;
  const auto& cam = frame.cameras.at(view);
  for (std::size_t i = 0; i < frame.gts.size(); ++i) {
    const auto box = geo::project_box3d_to_box2d(cam, frame.gts[i].box);
    if (!box) continue;
    const auto c = geo::project_world_to_pixel(cam, frame.gts[i].box.center);
    if (!c.valid) continue;
    t.boxes.push_back(*box);
    t.depths.push_back(c.depth);
    t.gt_index.push_back(i);
  }
  return t;
}

LossResult compute_loss(const ForwardResult& fwd, const sim::SceneFrame& frame, const qgen::DepthBins& bins,
                        const LossWeights& w) {
  LossResult res;
  const std::span<const sim::GroundTruth> gts = frame.gts;
  std::vector<Var> terms;
  std::vector<double> weights;
  double cls_sum = 0.0, reg_sum = 0.0;
  for (const auto& layer : fwd.out.layers) {
    MatchResult match = hungarian_match(match_cost(layer.cls.value(), layer.reg.value(), gts, w));
    std::vector<int> targets(layer.cls.rows(), -1);
    for (const auto& [i, j] : match.pairs) targets[i] = gts[j].cls;
    const Var lc = focal_loss(layer.cls, targets, w.focal_alpha, w.focal_gamma);
    const Var lr = box_reg_loss(layer.reg, match.pairs, gts);
    cls_sum += lc.value()[0];
    reg_sum += lr.value()[0];
    terms.push_back(lc);
    weights.push_back(w.out * w.cls);
    terms.push_back(lr);
    weights.push_back(w.out);
    res.matches.push_back(std::move(match));
  }

  double aux_value = 0.0;
  if (fwd.img.size() > 0) {
    std::vector<std::size_t> rows;
    std::vector<double> depths;
    for (std::size_t v = 0; v < frame.cameras.size(); ++v) {
      std::vector<std::size_t> view_rows;
      std::vector<geo::Box2D> boxes;
      for (std::size_t r = 0; r < fwd.img.size(); ++r) {
        if (fwd.img.views[r] != v) continue;
        view_rows.push_back(r);
        boxes.push_back(fwd.img.boxes[r]);
      }
      if (view_rows.empty()) continue;
      const ViewTargets t = project_targets(frame, v);
      for (const auto& [i, j] : aux_assign_2d(boxes, t.boxes, w.iou_threshold)) {
        rows.push_back(view_rows[i]);
        depths.push_back(t.depths[j]);
      }
    }
    std::vector<Var> dists = {fwd.img.probs};
    if (w.aux_all_layers)
      for (const auto& layer : fwd.out.layers)
        if (layer.probs.defined() && layer.probs.rows() == fwd.img.size()) dists.push_back(layer.probs);
    for (const auto& probs : dists) {
      const Var aux = aux_depth_loss(probs, rows, depths, bins);
      aux_value += aux.value()[0];
      terms.push_back(aux);
      weights.push_back(w.aux);
    }
  }

  res.breakdown = compose_loss(cls_sum, reg_sum, aux_value, w);
  res.total = terms.empty() ? scalar_zero() : nn::weighted_sum(terms, weights);
  const auto& b = res.breakdown;
  if (!std::isfinite(b.total) || !std::isfinite(res.total.value()[0])) {
    std::ostringstream msg;
    msg << "non-finite loss at frame " << frame.index << " (t=" << frame.timestamp << "): L_cls=" << b.cls
        << " L_reg=" << b.reg << " L_aux=" << b.aux << " queries=" << fwd.out.size() << " gts=" << gts.size();
    throw TrainingError(msg.str());
  }
  return res;
}

double clip_grad_norm(nn::ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& e : store.entries())
    for (double g : e.var.grad().values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (auto& e : store.entries()) {
      auto* node = e.var.node();
      for (double& g : node->grad.values()) g *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

std::size_t Dataset::frame_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

Dataset Dataset::build(std::vector<sim::Sequence> sequences, const sim::ObservationConfig& obs, std::uint64_t seed) {
  Dataset d;
  d.sequences = std::move(sequences);
  for (std::size_t s = 0; s < d.sequences.size(); ++s) {
    std::vector<sim::FrameObservation> per;
    for (std::size_t k = 0; k < d.sequences[s].size(); ++k)
      per.push_back(sim::observe(d.sequences[s][k], obs, sim::derive_seed(seed, s, k)));
    d.observations.push_back(std::move(per));
  }
  return d;
}

namespace {

TrainStepResult finish_step(Model& model, nn::AdamState& state, std::vector<LossResult>& losses,
                            const TrainConfig& cfg, double lr) {
  TrainStepResult out;
  out.lr = lr;
  std::vector<Var> totals;
  std::vector<double> weights;
  const double inv = 1.0 / static_cast<double>(losses.size());
  double cls = 0.0, reg = 0.0, aux = 0.0;
  for (auto& l : losses) {
    totals.push_back(l.total);
    weights.push_back(inv);
    cls += inv * l.breakdown.cls;
    reg += inv * l.breakdown.reg;
    aux += inv * l.breakdown.aux;
  }
  out.loss = compose_loss(cls, reg, aux, cfg.weights);
  model.params().zero_grad();
  nn::backward(nn::weighted_sum(totals, weights));
  out.grad_norm = clip_grad_norm(model.params(), cfg.max_grad_norm);
  if (!std::isfinite(out.grad_norm)) {
    std::ostringstream msg;
    msg << "non-finite gradient at step " << state.step << ": L_cls=" << cls << " L_reg=" << reg << " L_aux=" << aux;
    throw TrainingError(msg.str());
  }
  nn::AdamConfig adam;
  adam.lr = lr;
  adam.weight_decay = cfg.weight_decay;
  nn::adam_step(model.params(), state, adam);
  return out;
}

}  // namespace

TrainStepResult train_step(Model& model, nn::AdamState& state,
                           std::span<const std::pair<const sim::SceneFrame*, const sim::FrameObservation*>> batch,
                           std::span<const Modality> modalities, const TrainConfig& cfg, double lr) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  if (modalities.size() != batch.size()) throw ShapeError("train_step: one modality per batch item");
  std::vector<LossResult> losses;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const ForwardResult fwd = model.forward(*batch[b].first, *batch[b].second, modalities[b]);
    losses.push_back(compute_loss(fwd, *batch[b].first, model.depth_bins(), cfg.weights));
  }
  return finish_step(model, state, losses, cfg, lr);
}

Trainer::Trainer(Model& model, const TrainConfig& cfg, const Dataset& data)
    : model_(model),
      cfg_(cfg),
      data_(data),
      rng_(cfg.seed),
      history_(std::max<std::size_t>(model.config().history_frames, 1), model.config().history_top_k) {
  if (data.sequences.empty() || data.frame_count() == 0) throw ConfigError("trainer: empty dataset");
  if (cfg.batch == 0) throw ConfigError("trainer: batch must be positive");
  if (data.observations.size() != data.sequences.size()) throw ConfigError("trainer: observations missing");
  sample_modality_mix(rng_, cfg.modality_mix);  // validates the mix up front
  rng_.seed(cfg.seed);
}

std::pair<std::size_t, std::size_t> Trainer::next_frame() {
  while (true) {
    if (order_pos_ >= order_.size()) {
      order_.resize(data_.sequences.size());
      std::iota(order_.begin(), order_.end(), 0);
      nn::Rng shuffle(sim::derive_seed(cfg_.seed, 0x5EED, epoch_++));
      std::shuffle(order_.begin(), order_.end(), shuffle);
      order_pos_ = 0;
      frame_pos_ = 0;
    }
    const std::size_t s = order_[order_pos_];
    if (frame_pos_ < data_.sequences[s].size()) return {s, frame_pos_++};
    ++order_pos_;
    frame_pos_ = 0;
  }
}

TrainStepResult Trainer::step() {
  const double lr = nn::cosine_lr(cfg_.lr, cfg_.min_lr, adam_.step, cfg_.steps);
  const bool temporal = model_.config().history_frames > 0;
  std::vector<LossResult> losses;
  for (std::size_t b = 0; b < cfg_.batch; ++b) {
    const auto [s, k] = next_frame();
    if (k == 0) history_.clear();
    const auto& frame = data_.sequences[s][k];
    const auto& obs = data_.observations[s][k];
    const Modality modality = sample_modality_mix(rng_, cfg_.modality_mix);
    const ForwardResult fwd = model_.forward(frame, obs, modality, temporal ? &history_ : nullptr);
    losses.push_back(compute_loss(fwd, frame, model_.depth_bins(), cfg_.weights));
    if (temporal) history_.push_topk(fwd.out, frame.ego_pose, frame.timestamp);
  }
  return finish_step(model_, adam_, losses, cfg_, lr);
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'Q', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError("checkpoint: truncated file");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1u << 26)) throw ParseError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw ParseError("checkpoint: truncated file");
  return s;
}

void put_tensor(std::ostream& os, const Tensor& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor get_tensor(std::istream& is) {
  const auto rank = get<std::uint32_t>(is);
  if (rank > 8) throw ParseError("checkpoint: implausible tensor rank");
  Tensor::Shape shape;
  for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint64_t>(is));
  if (nn::shape_product(shape) > (1u << 28)) throw ParseError("checkpoint: implausible tensor size");
  Tensor t(shape, 0.0);
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!is) throw ParseError("checkpoint: truncated file");
  return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nn::ParamStore& params, const nn::AdamState& adam,
                     const nn::Rng& rng, const std::string& metadata) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  const auto& entries = params.entries();
  put<std::uint64_t>(os, entries.size());
  for (const auto& e : entries) {
    put_string(os, e.name);
    put_tensor(os, e.var.value());
  }
  put<std::uint64_t>(os, adam.step);
  const bool moments = adam.m.size() == entries.size();
  put<std::uint8_t>(os, moments ? 1 : 0);
  if (moments) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      put_tensor(os, adam.m[i]);
      put_tensor(os, adam.v[i]);
    }
  }
  std::ostringstream rs;
  rs << rng;
  put_string(os, rs.str());
  put_string(os, metadata);
  if (!os) throw std::runtime_error("checkpoint write failed: " + path.string());
}

std::string load_checkpoint(const std::filesystem::path& path, nn::ParamStore& params, nn::AdamState& adam,
                            nn::Rng& rng) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ParseError("not a fusionq checkpoint");
  if (get<std::uint32_t>(is) != kVersion) throw ParseError("unsupported checkpoint version");
  auto& entries = params.entries();
  if (get<std::uint64_t>(is) != entries.size()) throw ParseError("checkpoint parameter count differs from the model");
  std::vector<Tensor> values;
  for (const auto& e : entries) {
    if (get_string(is) != e.name) throw ParseError("checkpoint parameter order differs at " + e.name);
    Tensor t = get_tensor(is);
    if (t.shape() != e.var.value().shape()) throw ParseError("checkpoint shape differs for " + e.name);
    values.push_back(std::move(t));
  }
  nn::AdamState state;
  state.step = get<std::uint64_t>(is);
  if (get<std::uint8_t>(is) != 0) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      state.m.push_back(get_tensor(is));
      state.v.push_back(get_tensor(is));
      if (state.m.back().shape() != values[i].shape() || state.v.back().shape() != values[i].shape())
        throw ParseError("checkpoint optimizer state shape differs for " + entries[i].name);
    }
  }
  std::istringstream rs(get_string(is));
  nn::Rng restored;
  rs >> restored;
  if (!rs) throw ParseError("checkpoint: bad rng state");
  std::string metadata = get_string(is);

  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].var.mutable_value() = std::move(values[i]);
  adam = std::move(state);
  rng = restored;
  return metadata;
}

}  // namespace fusionq::train
