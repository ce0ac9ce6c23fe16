#include "fusedet/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "fusedet/ops.hpp"
#include "fusedet/optim.hpp"

namespace fusedet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Noise draws of probe_losses and evaluate do not depend on the run seed, so two
// models are always compared on the same boxes, times and noise.
constexpr std::uint64_t kProbeSeed = 0x5eed'0f'9120be5ULL;

const Var& param(const Bindings& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

std::size_t detector_inputs(const OrpptConfig& orppt, const DetectorConfig& det) {
  return std::accumulate(orppt.backbone_channels.begin(), orppt.backbone_channels.end(), std::size_t{0}) * det.grid *
             det.grid +
         4 + det.time_dim;
}

json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

json optional_json(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

std::string schedule_name(ScheduleKind k) { return k == ScheduleKind::Cosine ? "cosine" : "linear"; }

ScheduleKind schedule_from(const std::string& s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear") return ScheduleKind::Linear;
  throw std::invalid_argument("unknown diffusion schedule '" + s + "' (expected cosine or linear)");
}

std::vector<ScenePair> checked_split(const fs::path& root, const std::string& split) {
  auto scenes = read_split(root, split);
  if (scenes.empty()) throw std::runtime_error("dataset split '" + (root / split).string() + "' has no scenes");
  return scenes;
}

struct DetectorSample {
  Tensor z0;
  Tensor z_t;
  std::size_t t = 0;
};

DetectorSample draw_detector_sample(const BoxSet& gt, const RunConfig& config, const DiffusionSchedule& schedule,
                                    SplitMix64& rng) {
  DetectorSample s;
  s.z0 = boxes_to_tensor(pad_boxes(gt, config.diffusion.boxes, rng));
  s.t = 1 + rng.below(config.diffusion.steps);
  const Tensor eps = rng.normal_tensor(Shape{config.diffusion.boxes, 4});
  s.z_t = forward_noise(s.z0, s.t, eps, schedule);
  return s;
}

struct Losses {
  Var loss_u;
  Var loss_d;
  FusionOutput fusion;
};

Losses forward_losses(const ToyModel& model, Tape& tape, const Bindings& b, const ScenePair& scene,
                      const SaliencyWeights& saliency, const Tensor& mask, const DetectorSample& sample,
                      const RunConfig& config) {
  Losses out;
  const Var x = tape.constant(scene.visible);
  const Var y = tape.constant(scene.infrared);
  out.fusion = orppt_forward(b, x, y, model.orppt);
  out.loss_u = fusion_loss(out.fusion.fused, scene.visible, scene.infrared, mask, config.loss_weights, saliency).total;
  const Var pred =
      detector_forward(b, out.fusion.pyramid, sample.z_t, sample.t, config.diffusion.steps, model.detector);
  out.loss_d = detector_loss(pred, tape.constant(scale_boxes(sample.z0)));
  return out;
}

template <typename Job>
void run_parallel(std::size_t jobs, std::size_t threads, const Job& job) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, jobs);
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < jobs;) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

json ToyModel::to_json() const {
  json params_json = json::object();
  for (const auto& [name, value] : params.values()) {
    json entry = tensor_json(value);
    entry["shared"] = params.is_shared(name);
    params_json[name] = entry;
  }
  return {{"format", "fusedet-model/1"},
          {"orppt",
           {{"backbone_channels", orppt.backbone_channels},
            {"backbone_strides", orppt.backbone_strides},
            {"region_channels", orppt.region_channels},
            {"prompts", orppt.prompts},
            {"fuse_channels", orppt.fuse_channels},
            {"recon_stages", orppt.recon_stages},
            {"branches", orppt.branches}}},
          {"detector", {{"hidden", detector.hidden}, {"time_dim", detector.time_dim}, {"grid", detector.grid}}},
          {"params", params_json}};
}

ToyModel ToyModel::from_json(const json& j) {
  if (j.value("format", "") != "fusedet-model/1") throw std::runtime_error("model file: unknown or missing format tag");
  ToyModel m;
  const json& o = j.at("orppt");
  m.orppt.backbone_channels = o.at("backbone_channels").get<std::vector<std::size_t>>();
  m.orppt.backbone_strides = o.at("backbone_strides").get<std::vector<std::size_t>>();
  m.orppt.region_channels = o.at("region_channels").get<std::size_t>();
  m.orppt.prompts = o.at("prompts").get<std::size_t>();
  m.orppt.fuse_channels = o.at("fuse_channels").get<std::size_t>();
  m.orppt.recon_stages = o.at("recon_stages").get<std::size_t>();
  m.orppt.branches = o.at("branches").get<std::vector<std::size_t>>();
  m.orppt.validate();
  m.detector.hidden = j.at("detector").at("hidden").get<std::size_t>();
  m.detector.time_dim = j.at("detector").at("time_dim").get<std::size_t>();
  m.detector.grid = j.at("detector").at("grid").get<std::size_t>();
  for (const auto& [name, entry] : j.at("params").items())
    m.params.add(name, tensor_from(entry), entry.at("shared").get<bool>());
  return m;
}

void ToyModel::save(const fs::path& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << to_json().dump() << "\n";
}

ToyModel ToyModel::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open model file '" + path.string() + "'");
  try {
    return from_json(json::parse(f));
  } catch (const json::exception& e) {
    throw std::runtime_error("model file '" + path.string() + "': " + e.what());
  }
}

ToyModel init_model(const OrpptConfig& orppt, const DetectorConfig& detector, std::uint64_t seed) {
  orppt.validate();
  if (detector.hidden == 0 || detector.grid == 0 || detector.time_dim == 0 || detector.time_dim % 2 != 0)
    throw std::invalid_argument("detector: hidden and grid must be positive and time_dim positive and even");
  ToyModel m;
  m.orppt = orppt;
  m.detector = detector;
  SplitMix64 backbone_rng(derive_seed(seed, 0)), fusion_rng(derive_seed(seed, 1)), det_rng(derive_seed(seed, 2));
  init_backbone(m.params, orppt, backbone_rng);
  init_fusion_head(m.params, orppt, fusion_rng);
  const std::string d = kDetectorPrefix;
  const std::size_t K = detector_inputs(orppt, detector), Hd = detector.hidden;
  m.params.add(d + "fc1.w", det_rng.normal_tensor(Shape{Hd, K}, std::sqrt(2.0 / static_cast<double>(K))));
  m.params.add(d + "fc1.b", Tensor(Shape{Hd}));
  m.params.add(d + "fc2.w", det_rng.normal_tensor(Shape{4, Hd}, 0.1 / std::sqrt(static_cast<double>(Hd))));
  m.params.add(d + "fc2.b", Tensor(Shape{4}));
  return m;
}

Tensor roi_pool_matrix(const BoxSet& boxes, std::size_t height, std::size_t width) {
  Tensor m(Shape{height * width, boxes.size()});
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    const Box& b = boxes[n];
    std::vector<std::size_t> inside;
    for (std::size_t i = 0; i < height; ++i) {
      const double py = (static_cast<double>(i) + 0.5) / static_cast<double>(height);
      if (py < b.y0() || py > b.y1()) continue;
      for (std::size_t j = 0; j < width; ++j) {
        const double px = (static_cast<double>(j) + 0.5) / static_cast<double>(width);
        if (px >= b.x0() && px <= b.x1()) inside.push_back(i * width + j);
      }
    }
    if (inside.empty()) {
      auto nearest = [](double c, std::size_t size) {
        const double p = std::floor(c * static_cast<double>(size));
        return static_cast<std::size_t>(std::clamp(p, 0.0, static_cast<double>(size - 1)));
      };
      inside.push_back(nearest(b.cy, height) * width + nearest(b.cx, width));
    }
    for (std::size_t k : inside) m.at(k, n) = 1.0 / static_cast<double>(inside.size());
  }
  return m;
}

Box grid_cell(const Box& b, std::size_t grid, std::size_t gy, std::size_t gx) {
  const double w = b.w / static_cast<double>(grid), h = b.h / static_cast<double>(grid);
  return {b.x0() + (static_cast<double>(gx) + 0.5) * w, b.y0() + (static_cast<double>(gy) + 0.5) * h, w, h};
}

Var detector_forward(const Bindings& params, const FeaturePyramid& pyramid, const Tensor& z_t, std::size_t t,
                     std::size_t total_steps, const DetectorConfig& config) {
  if (pyramid.levels.empty()) throw std::invalid_argument("detector_forward: empty feature pyramid");
  if (z_t.rank() != 2 || z_t.dim(1) != 4)
    throw ShapeError("detector_forward: noisy boxes must be N x 4, got " + shape_string(z_t.shape()));
  Tape& tape = *pyramid.levels.front().tape();
  const std::size_t N = z_t.dim(0);

  BoxSet boxes = boxes_from_tensor(unscale_boxes(z_t));
  for (Box& b : boxes) b = clamp_box(b);
  const Tensor anchor = scale_boxes(boxes_to_tensor(boxes));

  std::vector<Var> parts;
  for (const Var& level : pyramid.levels) {
    const Shape s = level.shape();
    const Var flat = reshape(level, Shape{s[0], s[1] * s[2]});
    // Whole-box mean, then each cell's contrast against it (the last cell is implied).
    const Tensor whole = roi_pool_matrix(boxes, s[1], s[2]);
    parts.push_back(matmul(flat, tape.constant(whole)));
    for (std::size_t c = 0; c + 1 < config.grid * config.grid; ++c) {
      BoxSet cells;
      for (const Box& b : boxes) cells.push_back(grid_cell(b, config.grid, c / config.grid, c % config.grid));
      Tensor contrast = roi_pool_matrix(cells, s[1], s[2]);
      for (std::size_t k = 0; k < contrast.size(); ++k) contrast[k] -= whole[k];
      parts.push_back(matmul(flat, tape.constant(std::move(contrast))));
    }
  }
  Tensor anchor_cols(Shape{4, N});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < 4; ++k) anchor_cols.at(k, n) = anchor.at(n, k);
  parts.push_back(tape.constant(std::move(anchor_cols)));
  const Tensor emb = time_embedding(t, total_steps, config.time_dim);
  Tensor emb_cols(Shape{config.time_dim, N});
  for (std::size_t k = 0; k < config.time_dim; ++k)
    for (std::size_t n = 0; n < N; ++n) emb_cols.at(k, n) = emb[k];
  parts.push_back(tape.constant(std::move(emb_cols)));

  const std::string d = kDetectorPrefix;
  const Var features = concat(parts);
  const Var hidden =
      relu(add_channel_bias(matmul(param(params, d + "fc1.w"), features), param(params, d + "fc1.b")));
  const Var out = add_channel_bias(matmul(param(params, d + "fc2.w"), hidden), param(params, d + "fc2.b"));
  return tape.constant(anchor) + transpose(out);
}

void RunConfig::validate() const {
  task_weights.validate(2);
  loss_weights.validate();
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be positive and finite");
  if (optimizer != "sgd" && optimizer != "adamw")
    throw std::invalid_argument("optimizer must be 'sgd' or 'adamw', got '" + optimizer + "'");
  if (gmta_period == 0) throw std::invalid_argument("gmta.period must be at least 1");
  if (diffusion.steps == 0 || diffusion.boxes == 0) throw std::invalid_argument("diffusion steps and boxes must be positive");
  if (diffusion.sampling_steps == 0 || diffusion.sampling_steps > diffusion.steps)
    throw std::invalid_argument("diffusion.sampling_steps must lie in [1, steps]");
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) throw std::invalid_argument("nms_iou must lie in [0, 1]");
  orppt().validate();
}

GmtaConfig RunConfig::gmta() const {
  GmtaConfig g;
  g.enabled = gmta_enabled;
  g.period = gmta_period;
  g.weights = task_weights;
  return g;
}

OrpptConfig RunConfig::orppt() const {
  OrpptConfig c;
  c.branches = branches;
  return c;
}

json RunConfig::to_json() const {
  return {{"seed", seed},
          {"iterations", iterations},
          {"learning_rate", learning_rate},
          {"optimizer", optimizer},
          {"task_weights", task_weights.w},
          {"loss_weights", {loss_weights.eta1, loss_weights.eta2, loss_weights.eta3}},
          {"gmta", {{"enabled", gmta_enabled}, {"period", gmta_period}}},
          {"diffusion",
           {{"steps", diffusion.steps},
            {"boxes", diffusion.boxes},
            {"sampling_steps", diffusion.sampling_steps},
            {"schedule", schedule_name(diffusion.schedule)}}},
          {"branches", branches},
          {"nms_iou", nms_iou},
          {"dataset_root", dataset_root.string()},
          {"output_dir", output_dir.string()},
          {"train_split", train_split},
          {"eval_split", eval_split}};
}

RunConfig RunConfig::from_json(const json& j) {
  static const std::vector<std::string> known{"seed",      "iterations",   "learning_rate", "optimizer",
                                              "task_weights", "loss_weights", "gmta",        "diffusion",
                                              "branches",  "nms_iou",      "dataset_root",  "output_dir",
                                              "train_split", "eval_split"};
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("config: unknown key '" + key + "'");
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.iterations = j.value("iterations", c.iterations);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.optimizer = j.value("optimizer", c.optimizer);
    if (j.contains("task_weights")) c.task_weights.w = j.at("task_weights").get<std::vector<double>>();
    if (j.contains("loss_weights")) {
      const auto lw = j.at("loss_weights").get<std::vector<double>>();
      if (lw.size() != 3) throw std::invalid_argument("config: loss_weights needs three entries");
      c.loss_weights = {lw[0], lw[1], lw[2]};
    }
    if (j.contains("gmta")) {
      const json& g = j.at("gmta");
      c.gmta_enabled = g.value("enabled", c.gmta_enabled);
      c.gmta_period = g.value("period", c.gmta_period);
    }
    if (j.contains("diffusion")) {
      const json& d = j.at("diffusion");
      c.diffusion.steps = d.value("steps", c.diffusion.steps);
      c.diffusion.boxes = d.value("boxes", c.diffusion.boxes);
      c.diffusion.sampling_steps = d.value("sampling_steps", c.diffusion.sampling_steps);
      if (d.contains("schedule")) c.diffusion.schedule = schedule_from(d.at("schedule").get<std::string>());
    }
    if (j.contains("branches")) c.branches = j.at("branches").get<std::vector<std::size_t>>();
    c.nms_iou = j.value("nms_iou", c.nms_iou);
    c.dataset_root = j.value("dataset_root", std::string{});
    c.output_dir = j.value("output_dir", std::string{});
    c.train_split = j.value("train_split", c.train_split);
    c.eval_split = j.value("eval_split", c.eval_split);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

json TrainRecord::to_json() const {
  return {{"step", step},
          {"scene", scene},
          {"t", t},
          {"loss_u", loss_u},
          {"loss_d", loss_d},
          {"grad_norm_u", grad_norm_u},
          {"grad_norm_d", grad_norm_d},
          {"kappa_before", optional_json(kappa_before)},
          {"kappa_after", optional_json(kappa_after)},
          {"singular_values", singular_values},
          {"aligned_column_norms", aligned_column_norms}};
}

TrainResult train(const RunConfig& config, const std::vector<ScenePair>& scenes, const StepCallback& on_step) {
  config.validate();
  TrainResult result;
  result.model = init_model(config.orppt(), DetectorConfig{}, config.seed);
  if (config.iterations == 0) return result;
  if (scenes.empty()) throw std::invalid_argument("train: no training scenes");

  std::vector<SaliencyWeights> saliency;
  std::vector<Tensor> masks;
  for (const ScenePair& s : scenes) {
    saliency.push_back(saliency_weights(s.visible, s.infrared));
    masks.push_back(object_mask(s.boxes, s.visible.dim(0), s.visible.dim(1)));
  }
  const DiffusionSchedule schedule = build_schedule(config.diffusion.steps, config.diffusion.schedule);
  const GmtaConfig gmta = config.gmta();
  auto optimizer = make_optimizer(config.optimizer, config.learning_rate);
  SplitMix64 rng(derive_seed(config.seed, 3));

  ToyModel& model = result.model;
  for (std::size_t step = 0; step < config.iterations; ++step) {
    const std::size_t k = rng.below(scenes.size());
    const DetectorSample sample = draw_detector_sample(scenes[k].boxes, config, schedule, rng);
    Tape tape;
    const Bindings b = model.params.bind(tape);
    const Losses l = forward_losses(model, tape, b, scenes[k], saliency[k], masks[k], sample, config);
    const double lu = l.loss_u.value()[0], ld = l.loss_d.value()[0];
    if (!std::isfinite(lu) || !std::isfinite(ld)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (scene " << k << "): L_u=" << lu << " L_d=" << ld;
      throw std::runtime_error(msg.str());
    }
    const GmtaStepResult r = gmta_step(model.params, b, l.loss_u, l.loss_d, gmta, step, *optimizer);

    TrainRecord rec;
    rec.step = step;
    rec.scene = k;
    rec.t = sample.t;
    rec.loss_u = r.loss_u;
    rec.loss_d = r.loss_d;
    rec.grad_norm_u = r.grad_norm_u;
    rec.grad_norm_d = r.grad_norm_d;
    rec.kappa_before = r.kappa_before;
    if (r.report) rec.kappa_after = r.report->kappa_after;
    rec.singular_values = r.singular_values;
    rec.aligned_column_norms = r.aligned_column_norms;
    if (on_step) on_step(rec);
    result.log.push_back(std::move(rec));
  }
  return result;
}

TrainResult train(const RunConfig& config) {
  config.validate();
  if (!fs::is_directory(config.dataset_root))
    throw std::runtime_error("dataset_root '" + config.dataset_root.string() + "' does not exist");
  const auto scenes = checked_split(config.dataset_root, config.train_split);
  std::ofstream log;
  if (!config.output_dir.empty()) {
    fs::create_directories(config.output_dir);
    log.open(config.output_dir / "train_log.jsonl");
    if (!log) throw std::runtime_error("cannot write '" + (config.output_dir / "train_log.jsonl").string() + "'");
  }
  TrainResult result = train(config, scenes, [&](const TrainRecord& r) {
    if (log.is_open()) log << r.to_json().dump() << "\n";
  });
  if (!config.output_dir.empty()) result.model.save(config.output_dir / "model.json");
  return result;
}

Tensor fuse(const ToyModel& model, const Tensor& visible, const Tensor& infrared) {
  Tape tape;
  const Bindings b = model.params.bind(tape, false);
  return orppt_forward(b, tape.constant(visible), tape.constant(infrared), model.orppt).fused.value();
}

Detections detect_with(const Denoiser& denoiser, const DetectOptions& options, const DiffusionSchedule& schedule) {
  const Tensor z = sample_latent(denoiser, options.boxes, options.sampling_steps, schedule, options.seed);
  const Tensor again = denoiser(z, 1);
  const BoxSet boxes = boxes_from_tensor(unscale_boxes(z));
  Detections out;
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    double r2 = 0.0;
    for (std::size_t k = 0; k < 4; ++k) r2 += (again.at(n, k) - z.at(n, k)) * (again.at(n, k) - z.at(n, k));
    out.push_back({clamp_box(boxes[n]), std::clamp(1.0 - std::sqrt(r2) / kSignalScale, 0.0, 1.0)});
  }
  return out;
}

namespace {

Detections detect_on(const ToyModel& model, const FeaturePyramid& pyramid, const DetectOptions& options,
                     const DiffusionSchedule& schedule, const Bindings& b) {
  const Denoiser denoiser = [&](const Tensor& z_t, std::size_t t) {
    return detector_forward(b, pyramid, z_t, t, options.total_steps, model.detector).value();
  };
  return detect_with(denoiser, options, schedule);
}

}  // namespace

Detections detect(const ToyModel& model, const Tensor& visible, const Tensor& infrared, const DetectOptions& options) {
  const DiffusionSchedule schedule = build_schedule(options.total_steps, options.schedule);
  Tape tape;
  const Bindings b = model.params.bind(tape, false);
  const FeaturePyramid pyramid =
      backbone_forward(b, tape.constant(visible), tape.constant(infrared), model.orppt);
  return detect_on(model, pyramid, options, schedule, b);
}

Detections nms(const Detections& detections, double iou_threshold) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
  Detections kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                        [&](const ScoredBox& k) { return iou(k.box, detections[i].box) > iou_threshold; });
    if (!suppressed) kept.push_back(detections[i]);
  }
  return kept;
}

LossProbe probe_losses(const ToyModel& model, const std::vector<ScenePair>& scenes, const RunConfig& config) {
  if (scenes.empty()) throw std::invalid_argument("probe_losses: no scenes");
  const DiffusionSchedule schedule = build_schedule(config.diffusion.steps, config.diffusion.schedule);
  LossProbe p;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const ScenePair& s = scenes[i];
    SplitMix64 rng(derive_seed(kProbeSeed, i));
    const DetectorSample sample = draw_detector_sample(s.boxes, config, schedule, rng);
    Tape tape;
    const Bindings b = model.params.bind(tape, false);
    const Losses l = forward_losses(model, tape, b, s, saliency_weights(s.visible, s.infrared),
                                    object_mask(s.boxes, s.visible.dim(0), s.visible.dim(1)), sample, config);
    p.loss_u += l.loss_u.value()[0];
    p.loss_d += l.loss_d.value()[0];
  }
  p.loss_u /= static_cast<double>(scenes.size());
  p.loss_d /= static_cast<double>(scenes.size());
  return p;
}

namespace {

DetectOptions detect_options(const RunConfig& config, std::size_t scene) {
  DetectOptions o;
  o.boxes = config.diffusion.boxes;
  o.sampling_steps = config.diffusion.sampling_steps;
  o.total_steps = config.diffusion.steps;
  o.schedule = config.diffusion.schedule;
  o.seed = derive_seed(kProbeSeed ^ 0xd37ecULL, scene);
  return o;
}

}  // namespace

std::vector<Detections> detect_all(const ToyModel& model, const std::vector<ScenePair>& scenes,
                                   const RunConfig& config) {
  std::vector<Detections> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    Detections d = detect(model, scenes[i].visible, scenes[i].infrared, detect_options(config, i));
    out.push_back(config.nms_iou > 0.0 ? nms(d, config.nms_iou) : std::move(d));
  }
  return out;
}

json EvalReport::to_json() const {
  return {{"scenes", scenes},
          {"loss_u", losses.loss_u},
          {"loss_d", losses.loss_d},
          {"fusion", fusion.to_json()},
          {"en_floor_rate", en_floor_rate},
          {"detection", detection.to_json()}};
}

EvalReport evaluate(const ToyModel& model, const std::vector<ScenePair>& scenes, const RunConfig& config) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");
  EvalReport r;
  r.scenes = scenes.size();
  r.losses = probe_losses(model, scenes, config);
  const DiffusionSchedule schedule = build_schedule(config.diffusion.steps, config.diffusion.schedule);
  std::vector<Detections> preds;
  std::vector<BoxSet> gt;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const ScenePair& s = scenes[i];
    Tape tape;
    const Bindings b = model.params.bind(tape, false);
    const FusionOutput f = orppt_forward(b, tape.constant(s.visible), tape.constant(s.infrared), model.orppt);
    const FusionMetricsReport m = fusion_metrics(f.fused.value(), s.visible, s.infrared);
    if (m.en >= std::min(entropy_en(s.visible), entropy_en(s.infrared)) - 0.5) r.en_floor_rate += 1.0;
    r.fusion.en += m.en;
    r.fusion.mi += m.mi;
    r.fusion.vif += m.vif;
    Detections d = detect_on(model, f.pyramid, detect_options(config, i), schedule, b);
    preds.push_back(config.nms_iou > 0.0 ? nms(d, config.nms_iou) : std::move(d));
    gt.push_back(s.boxes);
  }
  const double n = static_cast<double>(scenes.size());
  r.fusion.en /= n;
  r.fusion.mi /= n;
  r.fusion.vif /= n;
  r.en_floor_rate /= n;
  r.detection = map_eval(preds, gt);
  return r;
}

double mean_best_iou(const std::vector<Detections>& predictions, const std::vector<BoxSet>& ground_truth) {
  if (predictions.size() != ground_truth.size()) throw std::invalid_argument("mean_best_iou: scene count mismatch");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < ground_truth.size(); ++i)
    for (const Box& g : ground_truth[i]) {
      double best = 0.0;
      for (const ScoredBox& p : predictions[i]) best = std::max(best, iou(p.box, g));
      total += best;
      ++count;
    }
  return count ? total / static_cast<double>(count) : 0.0;
}

json detections_to_json(const std::vector<std::string>& ids, const std::vector<Detections>& detections) {
  if (ids.size() != detections.size()) throw std::invalid_argument("detections_to_json: id/scene count mismatch");
  json scenes = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    json dets = json::array();
    for (const ScoredBox& d : detections[i])
      dets.push_back({{"cx", d.box.cx}, {"cy", d.box.cy}, {"w", d.box.w}, {"h", d.box.h}, {"score", d.score}});
    scenes.push_back({{"scene", ids[i]}, {"detections", dets}});
  }
  return {{"scenes", scenes}};
}

std::vector<std::pair<std::string, Detections>> detections_from_json(const json& j) {
  std::vector<std::pair<std::string, Detections>> out;
  try {
    for (const json& s : j.at("scenes")) {
      Detections d;
      for (const json& b : s.at("detections"))
        d.push_back({{b.at("cx").get<double>(), b.at("cy").get<double>(), b.at("w").get<double>(),
                      b.at("h").get<double>()},
                     b.at("score").get<double>()});
      out.emplace_back(s.at("scene").get<std::string>(), std::move(d));
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("detections file: ") + e.what());
  }
  return out;
}

json RunSummary::to_json() const {
  json j = eval.to_json();
  j["seed"] = seed;
  j["initial_loss_u"] = initial.loss_u;
  j["initial_loss_d"] = initial.loss_d;
  j["train_best_iou"] = train_best_iou;
  j["dominance"] = dominance;
  j["aligned_norm_gap"] = aligned_norm_gap;
  j["aligned_steps"] = aligned_steps;
  return j;
}

RunSummary run_once(const RunConfig& config, const std::vector<ScenePair>& train_scenes,
                    const std::vector<ScenePair>& eval_scenes) {
  RunSummary s;
  s.seed = config.seed;
  double ratio_sum = 0.0;
  std::size_t ratio_count = 0;
  const TrainResult t = train(config, train_scenes, [&](const TrainRecord& r) {
    if (r.grad_norm_u > 0.0) {
      ratio_sum += r.grad_norm_d / r.grad_norm_u;
      ++ratio_count;
    }
    if (r.aligned_column_norms.size() == 2) {
      const double a = r.aligned_column_norms[0], b = r.aligned_column_norms[1];
      if (std::max(a, b) > 0.0) s.aligned_norm_gap = std::max(s.aligned_norm_gap, std::abs(a - b) / std::max(a, b));
      ++s.aligned_steps;
    }
  });
  s.dominance = ratio_count ? ratio_sum / static_cast<double>(ratio_count) : 0.0;
  s.eval = evaluate(t.model, eval_scenes, config);
  s.initial = probe_losses(init_model(config.orppt(), t.model.detector, config.seed), eval_scenes, config);
  const std::size_t n = std::min(kTrainIouScenes, train_scenes.size());
  const std::vector<ScenePair> head(train_scenes.begin(), train_scenes.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<BoxSet> gt;
  for (const ScenePair& p : head) gt.push_back(p.boxes);
  RunConfig raw = config;
  raw.nms_iou = 0.0;
  s.train_best_iou = mean_best_iou(detect_all(t.model, head, raw), gt);
  return s;
}

double ArmReport::mean(const std::function<double(const RunSummary&)>& field) const {
  if (runs.empty()) return 0.0;
  double total = 0.0;
  for (const RunSummary& r : runs) total += field(r);
  return total / static_cast<double>(runs.size());
}

namespace {

struct MetricField {
  const char* name;
  double (*get)(const RunSummary&);
};

const MetricField kMetricFields[] = {
    {"loss_u", [](const RunSummary& r) { return r.eval.losses.loss_u; }},
    {"loss_d", [](const RunSummary& r) { return r.eval.losses.loss_d; }},
    {"loss_total", [](const RunSummary& r) { return r.eval.losses.loss_u + r.eval.losses.loss_d; }},
    {"en", [](const RunSummary& r) { return r.eval.fusion.en; }},
    {"mi", [](const RunSummary& r) { return r.eval.fusion.mi; }},
    {"vif", [](const RunSummary& r) { return r.eval.fusion.vif; }},
    {"map50", [](const RunSummary& r) { return r.eval.detection.map50; }},
    {"map5095", [](const RunSummary& r) { return r.eval.detection.map5095; }},
    {"en_floor_rate", [](const RunSummary& r) { return r.eval.en_floor_rate; }},
    {"train_best_iou", [](const RunSummary& r) { return r.train_best_iou; }},
    {"dominance", [](const RunSummary& r) { return r.dominance; }},
};

std::string csv_header(const std::string& first) {
  std::string h = first + ",seed";
  for (const MetricField& f : kMetricFields) h += std::string(",") + f.name;
  return h + "\n";
}

std::string csv_rows(const std::string& label, const ArmReport& arm) {
  std::ostringstream out;
  out.precision(10);
  for (const RunSummary& r : arm.runs) {
    out << label << "," << r.seed;
    for (const MetricField& f : kMetricFields) out << "," << f.get(r);
    out << "\n";
  }
  out << label << ",mean";
  for (const MetricField& f : kMetricFields) out << "," << arm.mean(f.get);
  out << "\n";
  return out.str();
}

std::string branch_label(const std::vector<std::size_t>& set) {
  std::string s;
  for (std::size_t b : set) s += (s.empty() ? "" : " ") + std::to_string(b);
  return s;
}

std::vector<RunSummary> run_grid(const std::vector<RunConfig>& configs, const std::vector<ScenePair>& train_scenes,
                                 const std::vector<ScenePair>& eval_scenes, std::size_t threads) {
  std::vector<RunSummary> out(configs.size());
  run_parallel(configs.size(), threads,
               [&](std::size_t i) { out[i] = run_once(configs[i], train_scenes, eval_scenes); });
  return out;
}

}  // namespace

json ArmReport::to_json() const {
  json means = json::object();
  for (const MetricField& f : kMetricFields) means[f.name] = mean(f.get);
  json runs_json = json::array();
  for (const RunSummary& r : runs) runs_json.push_back(r.to_json());
  return {{"name", name}, {"mean", means}, {"runs", runs_json}};
}

json GmtaExperiment::to_json() const {
  return {{"arms", {{"gmta", with_gmta.to_json()}, {"no_gmta", without_gmta.to_json()}}}};
}

std::string GmtaExperiment::to_csv() const {
  return csv_header("arm") + csv_rows(with_gmta.name, with_gmta) + csv_rows(without_gmta.name, without_gmta);
}

GmtaExperiment experiment_gmta(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                               const std::vector<ScenePair>& train_scenes, const std::vector<ScenePair>& eval_scenes,
                               std::size_t threads) {
  base.validate();
  if (seeds.empty()) throw std::invalid_argument("experiment_gmta: no seeds");
  std::vector<RunConfig> configs;
  for (bool enabled : {true, false})
    for (std::uint64_t seed : seeds) {
      RunConfig c = base;
      c.seed = seed;
      c.gmta_enabled = enabled;
      configs.push_back(c);
    }
  const auto runs = run_grid(configs, train_scenes, eval_scenes, threads);
  GmtaExperiment e;
  e.with_gmta.name = "gmta";
  e.without_gmta.name = "no_gmta";
  e.with_gmta.runs.assign(runs.begin(), runs.begin() + static_cast<std::ptrdiff_t>(seeds.size()));
  e.without_gmta.runs.assign(runs.begin() + static_cast<std::ptrdiff_t>(seeds.size()), runs.end());
  return e;
}

json BranchExperiment::to_json() const {
  json rows_json = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json r = rows[i].to_json();
    r["branches"] = branch_sets[i];
    rows_json.push_back(r);
  }
  return {{"rows", rows_json}};
}

std::string BranchExperiment::to_csv() const {
  std::string out = csv_header("branches");
  for (std::size_t i = 0; i < rows.size(); ++i) out += csv_rows(branch_label(branch_sets[i]), rows[i]);
  return out;
}

BranchExperiment experiment_branches(const RunConfig& base, const std::vector<std::vector<std::size_t>>& branch_sets,
                                     const std::vector<std::uint64_t>& seeds,
                                     const std::vector<ScenePair>& train_scenes,
                                     const std::vector<ScenePair>& eval_scenes, std::size_t threads) {
  if (branch_sets.empty() || seeds.empty()) throw std::invalid_argument("experiment_branches: no branch sets or seeds");
  std::vector<RunConfig> configs;
  for (const auto& set : branch_sets)
    for (std::uint64_t seed : seeds) {
      RunConfig c = base;
      c.branches = set;
      c.seed = seed;
      c.validate();
      configs.push_back(c);
    }
  const auto runs = run_grid(configs, train_scenes, eval_scenes, threads);
  BranchExperiment e;
  e.branch_sets = branch_sets;
  for (std::size_t i = 0; i < branch_sets.size(); ++i) {
    ArmReport arm;
    arm.name = branch_label(branch_sets[i]);
    const auto first = runs.begin() + static_cast<std::ptrdiff_t>(i * seeds.size());
    arm.runs.assign(first, first + static_cast<std::ptrdiff_t>(seeds.size()));
    e.rows.push_back(std::move(arm));
  }
  return e;
}

std::size_t fusion_wins(const ArmReport& candidate, const ArmReport& reference) {
  if (candidate.runs.size() != reference.runs.size())
    throw std::invalid_argument("fusion_wins: arms have different seed counts");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < candidate.runs.size(); ++i) {
    const FusionMetricsReport& a = candidate.runs[i].eval.fusion;
    const FusionMetricsReport& b = reference.runs[i].eval.fusion;
    const int better = (a.en >= b.en) + (a.mi >= b.mi) + (a.vif >= b.vif);
    if (better >= 2) ++wins;
  }
  return wins;
}

}  // namespace fusedet
