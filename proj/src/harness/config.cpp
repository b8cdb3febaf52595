#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "fusionq/errors.hpp"
#include "fusionq/harness/harness.hpp"

namespace fusionq::harness {

namespace {

// Reads keys off one JSON object and rejects anything it did not consume.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(where() + "expected an object");
  }

  bool has(const char* key) const { return doc_.contains(key); }

  Section child(const char* key) {
    seen_.insert(key);
    return Section(doc_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + "expected a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<long long>() < 0))
        throw ConfigError(where(key) + "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, std::uint64_t& out, int) {
    std::size_t tmp = out;
    read(key, tmp);
    out = tmp;
  }
  void read(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + "expected an integer");
      out = v->get<int>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + "expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void read(const char* key, std::optional<T>& out) {
    if (!has(key)) return;
    T tmp{};
    read(key, tmp);
    out = tmp;
  }
  template <typename T>
  void read(const char* key, std::vector<T>& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_array()) throw ConfigError(where(key) + "expected an array");
    out.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      json wrap = {{"v", (*v)[i]}};
      Section item(wrap, path_ + "." + key + "[" + std::to_string(i) + "]");
      T tmp{};
      item.read("v", tmp);
      out.push_back(tmp);
    }
  }
  void read(const char* key, std::vector<bool>& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_array()) throw ConfigError(where(key) + "expected an array");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_boolean()) throw ConfigError(where(key) + "expected booleans");
      out.push_back(e.get<bool>());
    }
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + (path_.empty() ? "" : path_ + ".") + it.key() + "'");
  }

 private:
  const json* take(const char* key) {
    if (!doc_.contains(key)) return nullptr;
    seen_.insert(key);
    return &doc_.at(key);
  }
  std::string where(const char* key = nullptr) const {
    std::string p = path_;
    if (key != nullptr) p = p.empty() ? key : p + "." + key;
    return p.empty() ? "" : p + ": ";
  }

  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_scene(Section s, SceneSection& out) {
  s.read("preset", out.preset);
  s.read("train_sequences", out.train_sequences);
  s.read("eval_sequences", out.eval_sequences);
  s.read("frames", out.frames);
  s.read("min_objects", out.min_objects);
  s.read("max_objects", out.max_objects);
  s.read("extent", out.extent);
  s.read("ego_speed", out.ego_speed);
  s.read("ego_yaw_rate", out.ego_yaw_rate);
  s.read("speed_scale", out.speed_scale);
  s.read("points_per_steradian", out.points_per_steradian);
  s.read("max_range", out.max_range);
  s.read("dropout", out.dropout);
  s.read("ground_points", out.ground_points);
  s.read("eval_split", out.eval_split);
  s.read("scene_file", out.scene_file);
  s.finish();
}

void parse_observation(Section s, sim::ObservationConfig& out) {
  s.read("pillar_cell", out.pillar_cell);
  s.read("pillar_extent", out.pillar_extent);
  s.read("ground_height", out.ground_height);
  if (s.has("oracle")) {
    Section o = s.child("oracle");
    auto& c = out.oracle;
    o.read("box2d_jitter", c.box2d_jitter);
    o.read("score2d_noise", c.score2d_noise);
    o.read("min_box_size", c.min_box_size);
    o.read("fn_rate_2d", c.fn_rate_2d);
    o.read("center_jitter", c.center_jitter);
    o.read("size_jitter", c.size_jitter);
    o.read("yaw_jitter", c.yaw_jitter);
    o.read("min_points", c.min_points);
    o.read("fn_rate_3d", c.fn_rate_3d);
    o.read("feature_noise", c.feature_noise);
    o.read("map_noise", c.map_noise);
    o.read("point_coord_scale", c.point_coord_scale);
    o.read("embedding_seed", c.embedding_seed, 0);
    // tied to the model; accepted so effective configs parse back
    std::optional<std::size_t> dim;
    std::optional<double> stride;
    o.read("feature_dim", dim);
    o.read("feature_stride", stride);
    if (dim) c.feature_dim = *dim;
    if (stride) c.feature_stride = *stride;
    o.finish();
  }
  s.finish();
}

void parse_model(Section s, train::ModelConfig& out) {
  auto& d = out.decoder;
  s.read("layers", d.layers);
  s.read("width", d.width);
  s.read("heads", d.heads);
  s.read("samples", d.samples);
  s.read("depth_bins", d.depth_bins);
  s.read("use_cross_attention", d.use_cross_attention);
  s.read("uncertainty_aware", d.uncertainty_aware);
  s.read("sinpos_channels", d.sinpos_channels);
  s.read("temperature", d.temperature);
  s.read("offset_range", d.offset_range);
  s.read("upe_position_scale", d.upe_position_scale);
  s.read("history_sinpos_channels", d.history_sinpos_channels);
  s.read("depth_min", out.depth_min);
  s.read("depth_max", out.depth_max);
  s.read("history_frames", out.history_frames);
  s.read("history_top_k", out.history_top_k);
  s.read("pc_cap", out.pc.cap);
  s.read("pc_sinpos_channels", out.pc.sinpos_channels);
  s.read("img_cap_per_view", out.img.cap_per_view);
  s.read("intrinsics_scale", out.img.intrinsics_scale);
  std::vector<int> roi;
  s.read("roi", roi);
  if (!roi.empty()) {
    if (roi.size() != 2 || roi[0] <= 0 || roi[1] <= 0) throw ConfigError("model.roi: expected [width, height] > 0");
    out.img.roi = {roi[0], roi[1]};
  }
  s.finish();
}

void parse_weights(Section s, train::LossWeights& w) {
  s.read("cls", w.cls);
  s.read("out", w.out);
  s.read("aux", w.aux);
  s.read("focal_alpha", w.focal_alpha);
  s.read("focal_gamma", w.focal_gamma);
  s.read("iou_threshold", w.iou_threshold);
  s.read("aux_all_layers", w.aux_all_layers);
  s.finish();
}

void parse_training(Section s, train::TrainConfig& t) {
  s.read("steps", t.steps);
  s.read("batch", t.batch);
  s.read("lr", t.lr);
  s.read("min_lr", t.min_lr);
  s.read("weight_decay", t.weight_decay);
  s.read("max_grad_norm", t.max_grad_norm);
  std::vector<double> mix;
  s.read("modality_mix", mix);
  if (!mix.empty()) {
    if (mix.size() != 3) throw ConfigError("training.modality_mix: expected [camera, lidar, both]");
    t.modality_mix = {mix[0], mix[1], mix[2]};
  }
  if (s.has("loss")) parse_weights(s.child("loss"), t.weights);
  s.finish();
}

void parse_eval(Section s, EvalSection& e) {
  s.read("thresholds", e.thresholds);
  std::string modality = modality_name(e.modality);
  s.read("modality", modality);
  e.modality = parse_modality(modality);
  s.read("require_evidence", e.require_evidence);
  s.finish();
}

void parse_ablate(Section s, AblateSection& a) {
  s.read("formulation", a.formulation);
  s.read("cross_attention", a.cross_attention);
  s.read("history", a.history);
  s.read("modality", a.modality);
  s.finish();
}

void parse_bench(Section s, BenchSection& b) {
  s.read("pillar_cell", b.pillar_cell);
  s.read("half_extent", b.half_extent);
  s.read("dense_cell", b.dense_cell);
  s.read("dense_extent", b.dense_extent);
  s.read("sequences", b.sequences);
  s.read("preset", b.preset);
  s.finish();
}

sim::SceneConfig preset_config(const std::string& name) {
  if (name == "desk") return sim::SceneConfig::desk();
  if (name == "long_range") return sim::SceneConfig::long_range();
  throw ConfigError("unknown scene preset '" + name + "'");
}

template <typename T>
bool unique_levels(const std::vector<T>& v) {
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j)
      if (v[i] == v[j]) return false;
  return true;
}

void validate(ExperimentConfig& cfg) {
  preset_config(cfg.scene.preset);
  preset_config(cfg.bench.preset);
  if (cfg.scene.train_sequences == 0) throw ConfigError("scene.train_sequences must be positive");
  if (cfg.scene.frames == 0) throw ConfigError("scene.frames must be positive");
  if (cfg.scene.eval_split != "eval" && cfg.scene.eval_split != "train")
    throw ConfigError("scene.eval_split must be \"eval\" or \"train\"");
  if (cfg.scene.eval_split == "eval" && cfg.scene.eval_sequences == 0)
    throw ConfigError("scene.eval_sequences must be positive");
  if (!cfg.scene.scene_file.empty() && !std::filesystem::is_regular_file(cfg.scene.scene_file))
    throw ConfigError("scene.scene_file does not exist: " + cfg.scene.scene_file);
  cfg.scene_config(false).validate();
  cfg.scene_config(true).validate();

  cfg.model.finalize();
  if (cfg.model.decoder.layers < 1) throw ConfigError("model.layers must be at least 1");
  // the oracle embeds appearance and renders maps in the model's layout
  const bool explicit_dim = cfg.source.contains("observation") && cfg.source["observation"].contains("oracle") &&
                            cfg.source["observation"]["oracle"].contains("feature_dim");
  const bool explicit_stride = cfg.source.contains("observation") && cfg.source["observation"].contains("oracle") &&
                               cfg.source["observation"]["oracle"].contains("feature_stride");
  if (explicit_dim && cfg.observation.oracle.feature_dim != cfg.model.decoder.width)
    throw ConfigError("observation.oracle.feature_dim must equal model.width");
  if (explicit_stride && cfg.observation.oracle.feature_stride != cfg.model.decoder.feature_stride)
    throw ConfigError("observation.oracle.feature_stride must equal the decoder feature stride");
  cfg.observation.oracle.feature_dim = cfg.model.decoder.width;
  cfg.observation.oracle.feature_stride = cfg.model.decoder.feature_stride;
  cfg.observation.oracle.validate();
  if (!(cfg.observation.pillar_cell > 0.0) || !(cfg.observation.pillar_extent > 0.0))
    throw ConfigError("observation pillar cell and extent must be positive");

  const auto& t = cfg.training.train;
  if (t.steps == 0 || t.batch == 0) throw ConfigError("training.steps and training.batch must be positive");
  if (!(t.lr >= 0.0) || !(t.min_lr >= 0.0) || !(t.max_grad_norm > 0.0) || !(t.weight_decay >= 0.0))
    throw ConfigError("training: learning rates, decay and clip norm must be non-negative");
  nn::Rng probe(1);
  train::sample_modality_mix(probe, t.modality_mix);

  evaluate_center_ap({}, cfg.eval.thresholds, sim::kNumClasses);

  const auto& a = cfg.ablate;
  if (a.formulation.empty() || a.cross_attention.empty() || a.history.empty() || a.modality.empty())
    throw ConfigError("ablate: every factor needs at least one level");
  for (const auto& f : a.formulation)
    if (f != "point" && f != "distribution") throw ConfigError("ablate.formulation: unknown level '" + f + "'");
  for (const auto& m : a.modality)
    if (m != "mix") parse_modality(m);
  if (!unique_levels(a.formulation) || !unique_levels(a.cross_attention) || !unique_levels(a.history) ||
      !unique_levels(a.modality))
    throw ConfigError("ablate: factor levels must be unique");

  dense_grid_count(cfg.bench.dense_extent, cfg.bench.dense_extent, cfg.bench.dense_cell);
  if (!(cfg.bench.pillar_cell > 0.0) || !(cfg.bench.half_extent > 0.0) || cfg.bench.sequences == 0)
    throw ConfigError("bench: cell, extent and sequence count must be positive");
}

}  // namespace

train::Modality parse_modality(const std::string& s) {
  if (s == "camera") return train::Modality::kCamera;
  if (s == "lidar") return train::Modality::kLidar;
  if (s == "both") return train::Modality::kBoth;
  throw ConfigError("unknown modality '" + s + "'");
}

sim::SceneConfig ExperimentConfig::scene_config(bool eval_split) const {
  sim::SceneConfig c = preset_config(scene.preset);
  c.frames = scene.frames;
  if (scene.min_objects) c.min_objects = *scene.min_objects;
  if (scene.max_objects) c.max_objects = *scene.max_objects;
  if (scene.extent) c.extent = *scene.extent;
  if (scene.ego_speed) c.ego_speed = *scene.ego_speed;
  if (scene.ego_yaw_rate) c.ego_yaw_rate = *scene.ego_yaw_rate;
  if (scene.speed_scale) c.speed_scale = *scene.speed_scale;
  if (scene.points_per_steradian) c.lidar.points_per_steradian = *scene.points_per_steradian;
  if (scene.max_range) c.lidar.max_range = *scene.max_range;
  if (scene.dropout) c.lidar.dropout = *scene.dropout;
  if (scene.ground_points) c.lidar.ground_points = *scene.ground_points;
  c.seed = sim::derive_seed(seed, eval_split ? 2 : 1);
  return c;
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  cfg.source = doc;
  Section root(doc, "");
  root.read("name", cfg.name);
  root.read("seed", cfg.seed, 0);
  if (root.has("scene")) parse_scene(root.child("scene"), cfg.scene);
  if (root.has("observation")) parse_observation(root.child("observation"), cfg.observation);
  if (root.has("model")) parse_model(root.child("model"), cfg.model);
  if (root.has("training")) parse_training(root.child("training"), cfg.training.train);
  if (root.has("eval")) parse_eval(root.child("eval"), cfg.eval);
  if (root.has("ablate")) parse_ablate(root.child("ablate"), cfg.ablate);
  if (root.has("bench")) parse_bench(root.child("bench"), cfg.bench);
  root.finish();
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  // scene files resolve relative to the config file
  if (doc.is_object() && doc.contains("scene") && doc["scene"].is_object() && doc["scene"].contains("scene_file") &&
      doc["scene"]["scene_file"].is_string()) {
    std::filesystem::path f = doc["scene"]["scene_file"].get<std::string>();
    if (f.is_relative()) doc["scene"]["scene_file"] = (path.parent_path() / f).lexically_normal().string();
  }
  return parse_config(doc);
}

json effective_config(const ExperimentConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;

  const auto& s = cfg.scene;
  json scene = {{"preset", s.preset},
                {"train_sequences", s.train_sequences},
                {"eval_sequences", s.eval_sequences},
                {"frames", s.frames},
                {"eval_split", s.eval_split},
                {"scene_file", s.scene_file}};
  auto opt = [&](const char* k, const auto& v) {
    if (v) scene[k] = *v;
  };
  opt("min_objects", s.min_objects);
  opt("max_objects", s.max_objects);
  opt("extent", s.extent);
  opt("ego_speed", s.ego_speed);
  opt("ego_yaw_rate", s.ego_yaw_rate);
  opt("speed_scale", s.speed_scale);
  opt("points_per_steradian", s.points_per_steradian);
  opt("max_range", s.max_range);
  opt("dropout", s.dropout);
  opt("ground_points", s.ground_points);
  j["scene"] = scene;

  const auto& o = cfg.observation.oracle;
  j["observation"] = {{"pillar_cell", cfg.observation.pillar_cell},
                      {"pillar_extent", cfg.observation.pillar_extent},
                      {"ground_height", cfg.observation.ground_height},
                      {"oracle",
                       {{"box2d_jitter", o.box2d_jitter},
                        {"score2d_noise", o.score2d_noise},
                        {"min_box_size", o.min_box_size},
                        {"fn_rate_2d", o.fn_rate_2d},
                        {"center_jitter", o.center_jitter},
                        {"size_jitter", o.size_jitter},
                        {"yaw_jitter", o.yaw_jitter},
                        {"min_points", o.min_points},
                        {"fn_rate_3d", o.fn_rate_3d},
                        {"feature_dim", o.feature_dim},
                        {"feature_noise", o.feature_noise},
                        {"map_noise", o.map_noise},
                        {"point_coord_scale", o.point_coord_scale},
                        {"feature_stride", o.feature_stride},
                        {"embedding_seed", o.embedding_seed}}}};

  const auto& m = cfg.model;
  const auto& d = m.decoder;
  j["model"] = {{"layers", d.layers},
                {"width", d.width},
                {"heads", d.heads},
                {"samples", d.samples},
                {"depth_bins", d.depth_bins},
                {"use_cross_attention", d.use_cross_attention},
                {"uncertainty_aware", d.uncertainty_aware},
                {"sinpos_channels", d.sinpos_channels},
                {"temperature", d.temperature},
                {"offset_range", d.offset_range},
                {"upe_position_scale", d.upe_position_scale},
                {"history_sinpos_channels", d.history_sinpos_channels},
                {"depth_min", m.depth_min},
                {"depth_max", m.depth_max},
                {"history_frames", m.history_frames},
                {"history_top_k", m.history_top_k},
                {"pc_cap", m.pc.cap},
                {"pc_sinpos_channels", m.pc.sinpos_channels},
                {"img_cap_per_view", m.img.cap_per_view},
                {"intrinsics_scale", m.img.intrinsics_scale},
                {"roi", {m.img.roi.width, m.img.roi.height}}};

  const auto& t = cfg.training.train;
  j["training"] = {{"steps", t.steps},
                   {"batch", t.batch},
                   {"lr", t.lr},
                   {"min_lr", t.min_lr},
                   {"weight_decay", t.weight_decay},
                   {"max_grad_norm", t.max_grad_norm},
                   {"modality_mix", t.modality_mix},
                   {"loss",
                    {{"cls", t.weights.cls},
                     {"out", t.weights.out},
                     {"aux", t.weights.aux},
                     {"focal_alpha", t.weights.focal_alpha},
                     {"focal_gamma", t.weights.focal_gamma},
                     {"iou_threshold", t.weights.iou_threshold},
                     {"aux_all_layers", t.weights.aux_all_layers}}}};

  j["eval"] = {{"thresholds", cfg.eval.thresholds},
               {"modality", train::modality_name(cfg.eval.modality)},
               {"require_evidence", cfg.eval.require_evidence}};
  j["ablate"] = {{"formulation", cfg.ablate.formulation},
                 {"cross_attention", cfg.ablate.cross_attention},
                 {"history", cfg.ablate.history},
                 {"modality", cfg.ablate.modality}};
  j["bench"] = {{"pillar_cell", cfg.bench.pillar_cell},
                {"half_extent", cfg.bench.half_extent},
                {"dense_cell", cfg.bench.dense_cell},
                {"dense_extent", cfg.bench.dense_extent},
                {"sequences", cfg.bench.sequences},
                {"preset", cfg.bench.preset}};
  return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = effective_config(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string artifact_stamp(const ExperimentConfig& cfg) {
  return "config_hash=" + config_hash(cfg) + " seed=" + std::to_string(cfg.seed);
}

}  // namespace fusionq::harness
