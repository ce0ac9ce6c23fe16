#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusedet/cfdp.hpp"
#include "fusedet/fusion_losses.hpp"
#include "fusedet/gmta.hpp"
#include "fusedet/metrics.hpp"
#include "fusedet/orppt.hpp"
#include "fusedet/synthdata.hpp"

namespace fusedet {

inline constexpr const char* kDetectorPrefix = "detector.";

/// Box-denoising head. Each noisy box is clamped to a valid box b; features
/// average-pooled over a grid x grid split of b on every backbone level, scale(b)
/// and a time embedding feed a two-layer perceptron whose output is added to
/// scale(b) to predict scale(z0).
struct DetectorConfig {
  std::size_t hidden = 64;
  std::size_t time_dim = 8;
  std::size_t grid = 2;
};

struct ToyModel {
  OrpptConfig orppt;
  DetectorConfig detector;
  ParamSet params;

  nlohmann::json to_json() const;
  static ToyModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ToyModel load(const std::filesystem::path& path);
};

/// Backbone (shared), fusion head and detector head from one seed.
ToyModel init_model(const OrpptConfig& orppt, const DetectorConfig& detector, std::uint64_t seed);

/// (H*W) x N averaging matrix: column n averages the pixels whose centres fall in
/// boxes[n], or the pixel nearest its centre when none do.
Tensor roi_pool_matrix(const BoxSet& boxes, std::size_t height, std::size_t width);

/// Cell (gy, gx) of a grid x grid split of b.
Box grid_cell(const Box& b, std::size_t grid, std::size_t gy, std::size_t gx);

/// Predicted scale(z0), N x 4, for the scaled noisy boxes z_t (N x 4) at time t.
Var detector_forward(const Bindings& params, const FeaturePyramid& pyramid, const Tensor& z_t, std::size_t t,
                     std::size_t total_steps, const DetectorConfig& config);

struct DiffusionConfig {
  std::size_t steps = 1000;
  std::size_t boxes = 16;
  std::size_t sampling_steps = 4;
  ScheduleKind schedule = ScheduleKind::Cosine;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t iterations = 1000;
  double learning_rate = 0.01;
  std::string optimizer = "sgd";
  TaskWeights task_weights;
  LossWeights loss_weights;
  bool gmta_enabled = true;
  std::size_t gmta_period = 1;
  DiffusionConfig diffusion;
  std::vector<std::size_t> branches{0, 1, 2, 3};
  /// NMS IoU applied to detections before scoring; 0 disables it.
  double nms_iou = 0.5;
  std::filesystem::path dataset_root;
  std::filesystem::path output_dir;
  std::string train_split = "train";
  std::string eval_split = "eval";

  void validate() const;
  GmtaConfig gmta() const;
  OrpptConfig orppt() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
};

struct TrainRecord {
  std::size_t step = 0;
  std::size_t scene = 0;
  std::size_t t = 0;
  double loss_u = 0.0;
  double loss_d = 0.0;
  double grad_norm_u = 0.0;
  double grad_norm_d = 0.0;
  std::optional<double> kappa_before;
  std::optional<double> kappa_after;
  std::vector<double> singular_values;
  std::vector<double> aligned_column_norms;

  nlohmann::json to_json() const;
};

struct TrainResult {
  ToyModel model;
  std::vector<TrainRecord> log;
};

using StepCallback = std::function<void(const TrainRecord&)>;

/// Joint training on `scenes`. Deterministic given config.seed. Throws
/// std::runtime_error on a non-finite loss, before the update is applied.
TrainResult train(const RunConfig& config, const std::vector<ScenePair>& scenes, const StepCallback& on_step = {});
/// Loads <dataset_root>/<train_split>; writes train_log.jsonl and model.json into
/// output_dir when it is set.
TrainResult train(const RunConfig& config);

/// Fused image in [0, 1].
Tensor fuse(const ToyModel& model, const Tensor& visible, const Tensor& infrared);

struct DetectOptions {
  std::size_t boxes = 16;
  std::size_t sampling_steps = 4;
  std::size_t total_steps = 1000;
  ScheduleKind schedule = ScheduleKind::Cosine;
  std::uint64_t seed = 0;
};

/// Reverse diffusion with `denoiser`; every box is scored 1 - r / kSignalScale
/// (clamped to [0, 1]) where r is the l2 self-consistency residual of the
/// denoiser re-applied to the final latent at t = 1.
Detections detect_with(const Denoiser& denoiser, const DetectOptions& options, const DiffusionSchedule& schedule);
/// All N sampled boxes, unsuppressed.
Detections detect(const ToyModel& model, const Tensor& visible, const Tensor& infrared, const DetectOptions& options);

/// Greedy non-maximum suppression in score order (stable for ties).
Detections nms(const Detections& detections, double iou_threshold);

struct LossProbe {
  double loss_u = 0.0;
  double loss_d = 0.0;
};

/// Mean losses over `scenes` with fixed per-scene noise, independent of any seed.
LossProbe probe_losses(const ToyModel& model, const std::vector<ScenePair>& scenes, const RunConfig& config);

struct EvalReport {
  LossProbe losses;
  FusionMetricsReport fusion;
  DetectionEval detection;
  /// Fraction of scenes with EN(u) >= min(EN(x), EN(y)) - 0.5.
  double en_floor_rate = 0.0;
  std::size_t scenes = 0;

  nlohmann::json to_json() const;
};

/// Mean fusion metrics, losses and mAP over `scenes`.
EvalReport evaluate(const ToyModel& model, const std::vector<ScenePair>& scenes, const RunConfig& config);

std::vector<Detections> detect_all(const ToyModel& model, const std::vector<ScenePair>& scenes,
                                   const RunConfig& config);

/// Mean over ground-truth boxes of the best IoU any prediction of the same scene reaches.
double mean_best_iou(const std::vector<Detections>& predictions, const std::vector<BoxSet>& ground_truth);

/// {"scenes": [{"scene": id, "detections": [{cx, cy, w, h, score}]}]}.
nlohmann::json detections_to_json(const std::vector<std::string>& ids, const std::vector<Detections>& detections);
std::vector<std::pair<std::string, Detections>> detections_from_json(const nlohmann::json& j);

struct RunSummary {
  std::uint64_t seed = 0;
  /// Eval-split losses of the untrained model.
  LossProbe initial;
  EvalReport eval;
  /// mean_best_iou on the first kTrainIouScenes training scenes.
  double train_best_iou = 0.0;
  /// Mean of ||g_d|| / ||g_u|| over training steps.
  double dominance = 0.0;
  /// Largest | ||a_1|| - ||a_2|| | / max(||a_1||, ||a_2||) over aligned steps (0 when none).
  double aligned_norm_gap = 0.0;
  std::size_t aligned_steps = 0;

  nlohmann::json to_json() const;
};

inline constexpr std::size_t kTrainIouScenes = 20;

/// Trains on the train split and evaluates on the eval split.
RunSummary run_once(const RunConfig& config, const std::vector<ScenePair>& train_scenes,
                    const std::vector<ScenePair>& eval_scenes);

struct ArmReport {
  std::string name;
  std::vector<RunSummary> runs;

  double mean(const std::function<double(const RunSummary&)>& field) const;
  nlohmann::json to_json() const;
};

struct GmtaExperiment {
  ArmReport with_gmta;
  ArmReport without_gmta;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Runs both arms of `base` (GMTA on and off) for every seed; runs are spread
/// over up to `threads` worker threads (0 = hardware concurrency).
GmtaExperiment experiment_gmta(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                               const std::vector<ScenePair>& train_scenes, const std::vector<ScenePair>& eval_scenes,
                               std::size_t threads = 0);

struct BranchExperiment {
  std::vector<std::vector<std::size_t>> branch_sets;
  std::vector<ArmReport> rows;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// One arm per branch set, rows in the given order, shared seeds.
BranchExperiment experiment_branches(const RunConfig& base, const std::vector<std::vector<std::size_t>>& branch_sets,
                                     const std::vector<std::uint64_t>& seeds,
                                     const std::vector<ScenePair>& train_scenes,
                                     const std::vector<ScenePair>& eval_scenes, std::size_t threads = 0);

/// Seeds on which `candidate` has at least two of EN, MI, VIF >= `reference`.
std::size_t fusion_wins(const ArmReport& candidate, const ArmReport& reference);

}  // namespace fusedet
