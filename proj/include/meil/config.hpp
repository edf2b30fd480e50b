#pragma once

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meil/trainers.hpp"

namespace meil {

/// Everything a generate/train/eval run needs. Defaults are the CI-scale
/// reference benchmark.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  unsigned threads = 1;

  bool reference_scene = true;
  SceneDef scene = meil::reference_scene();
  TrajectorySpec trajectory = reference_trajectory();
  Intrinsics camera = reference_intrinsics();

  TrainConfig train = default_train();
  Method method = Method::Meil;         // the method a single run trains
  std::vector<Method> methods{method};  // every method `train` runs, in order; front() == method
  bool heldout_eval = false;            // score on interleaved held-out views instead of the training views
  double lambda_constant = 1.0;  // used when the schedule is "constant"

  static TrainConfig default_train() {
    TrainConfig t;
    t.arch.depth = 3;
    t.arch.width = 64;
    t.arch.color_width = 32;
    t.random_ray_bounds = meil::reference_scene().bounds;
    return t;
  }

  /// Trainer config with the run-level seed and thread count folded in.
  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    t.threads = threads;
    t.random_ray_bounds = scene.bounds;
    return t;
  }

  void validate() const {
    try {
      scene.validate();
      camera.validate();
      (void)trajectory_poses(trajectory);
      train.arch.layout();
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    train.validate();
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed, const std::string& path) {
  if (!obj.is_object()) throw ConfigError(path + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown config key '" + (path.empty() ? "" : path + ".") + it.key() + "'");
  }
}

template <class T>
void read_opt(const nlohmann::json& obj, const char* key, T& out, const std::string& path) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + path + "." + key + "' has the wrong type");
  }
}

inline Vec3 read_vec3(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(path + ": expected [x, y, z]");
  try {
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + ": expected numbers");
  }
}

inline nlohmann::json vec3_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline const char* schedule_name(LambdaSchedule::Kind k) {
  switch (k) {
    case LambdaSchedule::Kind::S1: return "S1";
    case LambdaSchedule::Kind::S2: return "S2";
    case LambdaSchedule::Kind::S3: return "S3";
    case LambdaSchedule::Kind::S4: return "S4";
    case LambdaSchedule::Kind::S5: return "S5";
    case LambdaSchedule::Kind::Constant: return "constant";
  }
  return "?";
}

inline LambdaSchedule::Kind parse_schedule(const std::string& s) {
  for (auto k : {LambdaSchedule::Kind::S1, LambdaSchedule::Kind::S2, LambdaSchedule::Kind::S3, LambdaSchedule::Kind::S4,
                 LambdaSchedule::Kind::S5, LambdaSchedule::Kind::Constant})
    if (s == schedule_name(k)) return k;
  throw ConfigError("unknown lambda schedule '" + s + "'");
}

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::L2: return "l2";
    case LossKind::L1: return "l1";
    case LossKind::Charbonnier: return "charbonnier";
  }
  return "?";
}

inline LossKind parse_loss(const std::string& s) {
  for (auto k : {LossKind::L2, LossKind::L1, LossKind::Charbonnier})
    if (s == loss_name(k)) return k;
  throw ConfigError("unknown loss '" + s + "'");
}

inline const char* past_rays_name(PastRaySource s) {
  switch (s) {
    case PastRaySource::Generator: return "generator";
    case PastRaySource::GroundTruth: return "ground_truth";
    case PastRaySource::Random: return "random";
  }
  return "?";
}

inline PastRaySource parse_past_rays(const std::string& s) {
  for (auto k : {PastRaySource::Generator, PastRaySource::GroundTruth, PastRaySource::Random})
    if (s == past_rays_name(k)) return k;
  throw ConfigError("unknown past ray source '" + s + "'");
}

}  // namespace detail

/// Parses a config document. Unknown keys and wrong types are ConfigErrors;
/// missing keys keep their defaults.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read_opt;
  ExperimentConfig c;
  check_keys(j, {"seed", "threads", "scene", "trajectory", "camera", "render", "model", "train", "rgn", "eval"}, "");
  read_opt(j, "seed", c.seed, "");
  read_opt(j, "threads", c.threads, "");

  if (j.contains("scene")) {
    const auto& s = j["scene"];
    check_keys(s, {"preset", "spheres", "bounds"}, "scene");
    std::string preset = "reference";
    read_opt(s, "preset", preset, "scene");
    if (preset == "reference") {
      if (s.contains("spheres") || s.contains("bounds")) throw ConfigError("scene: 'preset: reference' cannot be combined with spheres/bounds");
    } else if (preset == "custom") {
      c.reference_scene = false;
      c.scene = SceneDef{};
      if (!s.contains("spheres") || !s.contains("bounds")) throw ConfigError("scene: custom scenes need 'spheres' and 'bounds'");
      check_keys(s["bounds"], {"lo", "hi"}, "scene.bounds");
      c.scene.bounds = {detail::read_vec3(s["bounds"].value("lo", nlohmann::json()), "scene.bounds.lo"),
                        detail::read_vec3(s["bounds"].value("hi", nlohmann::json()), "scene.bounds.hi")};
      if (!s["spheres"].is_array()) throw ConfigError("scene.spheres: expected an array");
      for (std::size_t i = 0; i < s["spheres"].size(); ++i) {
        const auto& js = s["spheres"][i];
        const std::string path = "scene.spheres[" + std::to_string(i) + "]";
        check_keys(js, {"center", "radius", "density", "color"}, path);
        Sphere sp;
        if (js.contains("center")) sp.center = detail::read_vec3(js["center"], path + ".center");
        if (js.contains("color")) sp.color = detail::read_vec3(js["color"], path + ".color");
        read_opt(js, "radius", sp.radius, path);
        read_opt(js, "density", sp.density, path);
        c.scene.spheres.push_back(sp);
      }
    } else {
      throw ConfigError("scene.preset must be 'reference' or 'custom'");
    }
  }

  if (j.contains("trajectory")) {
    const auto& t = j["trajectory"];
    check_keys(t, {"kind", "tasks", "views", "arc_degrees", "start_degrees", "radius", "height", "facing", "target", "start", "end"},
               "trajectory");
    std::string kind = "orbit_arc", facing = "outward";
    read_opt(t, "kind", kind, "trajectory");
    if (kind == "orbit_arc")
      c.trajectory.kind = TrajectoryKind::OrbitArc;
    else if (kind == "line_sweep")
      c.trajectory.kind = TrajectoryKind::LineSweep;
    else
      throw ConfigError("trajectory.kind must be 'orbit_arc' or 'line_sweep'");
    read_opt(t, "facing", facing, "trajectory");
    if (facing != "outward" && facing != "inward") throw ConfigError("trajectory.facing must be 'inward' or 'outward'");
    c.trajectory.facing = facing == "outward" ? Facing::Outward : Facing::Inward;
    read_opt(t, "tasks", c.trajectory.tasks, "trajectory");
    read_opt(t, "views", c.trajectory.views, "trajectory");
    read_opt(t, "arc_degrees", c.trajectory.arc_degrees, "trajectory");
    read_opt(t, "start_degrees", c.trajectory.start_degrees, "trajectory");
    read_opt(t, "radius", c.trajectory.radius, "trajectory");
    read_opt(t, "height", c.trajectory.height, "trajectory");
    if (t.contains("target")) c.trajectory.target = detail::read_vec3(t["target"], "trajectory.target");
    if (t.contains("start")) c.trajectory.start = detail::read_vec3(t["start"], "trajectory.start");
    if (t.contains("end")) c.trajectory.end = detail::read_vec3(t["end"], "trajectory.end");
    if (c.trajectory.tasks < 1) throw ConfigError("trajectory.tasks must be >= 1");
    if (c.trajectory.views < 2) throw ConfigError("trajectory.views must be >= 2 (a single view leaves geometry unobservable)");
  }

  if (j.contains("camera")) {
    const auto& cam = j["camera"];
    check_keys(cam, {"width", "height", "focal"}, "camera");
    int w = c.camera.width, h = c.camera.height;
    double f = c.camera.focal;
    read_opt(cam, "width", w, "camera");
    read_opt(cam, "height", h, "camera");
    read_opt(cam, "focal", f, "camera");
    if (w < 1 || h < 1 || !(f > 0.0)) throw ConfigError("camera: width, height and focal must be positive");
    c.camera = Intrinsics::centered(w, h, f);
  }

  if (j.contains("render")) {
    const auto& r = j["render"];
    check_keys(r, {"samples", "z_near", "z_far", "stratified"}, "render");
    read_opt(r, "samples", c.train.samples.samples, "render");
    read_opt(r, "z_near", c.train.samples.z_near, "render");
    read_opt(r, "z_far", c.train.samples.z_far, "render");
    read_opt(r, "stratified", c.train.samples.stratified, "render");
  }

  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"depth", "width", "color_width", "pos_bands", "dir_bands"}, "model");
    read_opt(m, "depth", c.train.arch.depth, "model");
    read_opt(m, "width", c.train.arch.width, "model");
    read_opt(m, "color_width", c.train.arch.color_width, "model");
    read_opt(m, "pos_bands", c.train.arch.enc.pos_bands, "model");
    read_opt(m, "dir_bands", c.train.arch.enc.dir_bands, "model");
    if (c.train.arch.enc.pos_bands < 0 || c.train.arch.enc.dir_bands < 0) throw ConfigError("model: band counts must be >= 0");
  }

  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, {"method", "iterations_per_view", "m_c", "m_p", "lr", "charbonnier_eps", "schedule", "lambda", "past_loss",
                   "past_rays", "ewc_weight", "ewc_fisher_batches", "packnet_prune_rate", "packnet_retrain_fraction", "replay_capacity"},
               "train");
    std::string s;
    if (t.contains("method")) {
      std::vector<std::string> names;
      if (t["method"].is_array()) read_opt(t, "method", names, "train");
      else {
        read_opt(t, "method", s, "train");
        names = {s};
      }
      if (names.empty()) throw ConfigError("train.method: list must name at least one method");
      c.methods.clear();
      for (const std::string& n : names) {
        const Method m = parse_method(n);
        if (std::find(c.methods.begin(), c.methods.end(), m) != c.methods.end()) throw ConfigError("train.method: '" + n + "' listed twice");
        c.methods.push_back(m);
      }
      c.method = c.methods.front();
    }
    read_opt(t, "iterations_per_view", c.train.iterations_per_view, "train");
    read_opt(t, "m_c", c.train.m_c, "train");
    read_opt(t, "m_p", c.train.m_p, "train");
    read_opt(t, "lr", c.train.adam.lr, "train");
    read_opt(t, "charbonnier_eps", c.train.eps, "train");
    if (t.contains("schedule")) {
      read_opt(t, "schedule", s, "train");
      c.train.schedule.kind = detail::parse_schedule(s);
    }
    read_opt(t, "lambda", c.lambda_constant, "train");
    c.train.schedule.value = c.lambda_constant;
    if (t.contains("past_loss")) {
      read_opt(t, "past_loss", s, "train");
      c.train.past_loss = detail::parse_loss(s);
    }
    if (t.contains("past_rays")) {
      read_opt(t, "past_rays", s, "train");
      c.train.past_rays = detail::parse_past_rays(s);
    }
    read_opt(t, "ewc_weight", c.train.ewc_weight, "train");
    read_opt(t, "ewc_fisher_batches", c.train.ewc_fisher_batches, "train");
    read_opt(t, "packnet_prune_rate", c.train.packnet_prune_rate, "train");
    read_opt(t, "packnet_retrain_fraction", c.train.packnet_retrain_fraction, "train");
    read_opt(t, "replay_capacity", c.train.replay_capacity, "train");
  }

  if (j.contains("rgn")) {
    const auto& r = j["rgn"];
    check_keys(r, {"hidden", "bands", "steps", "lr"}, "rgn");
    read_opt(r, "hidden", c.train.rgn.hidden, "rgn");
    read_opt(r, "bands", c.train.rgn.bands, "rgn");
    read_opt(r, "steps", c.train.rgn.steps, "rgn");
    read_opt(r, "lr", c.train.rgn.lr, "rgn");
    for (int h : c.train.rgn.hidden)
      if (h < 1) throw ConfigError("rgn.hidden: layer widths must be positive");
    if (c.train.rgn.bands < 0 || c.train.rgn.steps < 1 || !(c.train.rgn.lr > 0.0)) throw ConfigError("rgn: invalid bands/steps/lr");
  }

  if (j.contains("eval")) {
    const auto& e = j["eval"];
    check_keys(e, {"split"}, "eval");
    std::string split = "train";
    read_opt(e, "split", split, "eval");
    if (split != "train" && split != "heldout") throw ConfigError("eval.split must be 'train' or 'heldout', got '" + split + "'");
    c.heldout_eval = split == "heldout";
  }

  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Fully resolved config: every key explicit, so a run can be reproduced
/// from this document alone.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using detail::vec3_json;
  nlohmann::json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  if (c.reference_scene) {
    j["scene"] = {{"preset", "reference"}};
  } else {
    nlohmann::json spheres = nlohmann::json::array();
    for (const Sphere& s : c.scene.spheres)
      spheres.push_back({{"center", vec3_json(s.center)}, {"radius", s.radius}, {"density", s.density}, {"color", vec3_json(s.color)}});
    j["scene"] = {{"preset", "custom"}, {"spheres", spheres}, {"bounds", {{"lo", vec3_json(c.scene.bounds.lo)}, {"hi", vec3_json(c.scene.bounds.hi)}}}};
  }
  const TrajectorySpec& t = c.trajectory;
  j["trajectory"] = {{"kind", t.kind == TrajectoryKind::OrbitArc ? "orbit_arc" : "line_sweep"},
                     {"tasks", t.tasks},
                     {"views", t.views},
                     {"arc_degrees", t.arc_degrees},
                     {"start_degrees", t.start_degrees},
                     {"radius", t.radius},
                     {"height", t.height},
                     {"facing", t.facing == Facing::Outward ? "outward" : "inward"},
                     {"target", vec3_json(t.target)},
                     {"start", vec3_json(t.start)},
                     {"end", vec3_json(t.end)}};
  j["camera"] = {{"width", c.camera.width}, {"height", c.camera.height}, {"focal", c.camera.focal}};
  const TrainConfig& tr = c.train;
  j["render"] = {{"samples", tr.samples.samples}, {"z_near", tr.samples.z_near}, {"z_far", tr.samples.z_far}, {"stratified", tr.samples.stratified}};
  j["model"] = {{"depth", tr.arch.depth},
                {"width", tr.arch.width},
                {"color_width", tr.arch.color_width},
                {"pos_bands", tr.arch.enc.pos_bands},
                {"dir_bands", tr.arch.enc.dir_bands}};
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : c.methods) methods.push_back(method_name(m));
  j["train"] = {{"method", c.methods.size() == 1 ? nlohmann::json(method_name(c.method)) : methods},
                {"iterations_per_view", tr.iterations_per_view},
                {"m_c", tr.m_c},
                {"m_p", tr.m_p},
                {"lr", tr.adam.lr},
                {"charbonnier_eps", tr.eps},
                {"schedule", detail::schedule_name(tr.schedule.kind)},
                {"lambda", c.lambda_constant},
                {"past_loss", detail::loss_name(tr.past_loss)},
                {"past_rays", detail::past_rays_name(tr.past_rays)},
                {"ewc_weight", tr.ewc_weight},
                {"ewc_fisher_batches", tr.ewc_fisher_batches},
                {"packnet_prune_rate", tr.packnet_prune_rate},
                {"packnet_retrain_fraction", tr.packnet_retrain_fraction},
                {"replay_capacity", tr.replay_capacity}};
  j["rgn"] = {{"hidden", tr.rgn.hidden}, {"bands", tr.rgn.bands}, {"steps", tr.rgn.steps}, {"lr", tr.rgn.lr}};
  j["eval"] = {{"split", c.heldout_eval ? "heldout" : "train"}};
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  const std::string s = config_to_json(c).dump();
  return fnv1a(s.data(), s.size());
}

}  // namespace meil
