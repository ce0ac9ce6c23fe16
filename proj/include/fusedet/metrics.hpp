#pragma once

#include <vector>

#include <json.hpp>

#include "fusedet/boxes.hpp"

namespace fusedet {

/// Sensor-noise variance of the VIF model, on the 0..255 intensity scale.
inline constexpr double kVifNoiseVariance = 2.0;
inline constexpr std::size_t kVifScales = 4;

/// Shannon entropy in bits of the 256-level quantized image.
double entropy_en(const Tensor& image);

/// Mutual information in bits between two quantized images of equal shape.
double pairwise_mi(const Tensor& a, const Tensor& b);
/// MI(x; u) + MI(y; u).
double mutual_information(const Tensor& fused, const Tensor& visible, const Tensor& infrared);

/// Multi-scale pixel-domain VIF of `distorted` against `reference` (images in [0, 1]).
/// Throws ShapeError for images too small for the coarsest scale.
double vif(const Tensor& reference, const Tensor& distorted);
/// VIF(x -> u) + VIF(y -> u).
double vif_fusion(const Tensor& fused, const Tensor& visible, const Tensor& infrared);

struct FusionMetricsReport {
  double en = 0.0;
  double mi = 0.0;
  double vif = 0.0;
  nlohmann::json to_json() const { return {{"en", en}, {"mi", mi}, {"vif", vif}}; }
};

FusionMetricsReport fusion_metrics(const Tensor& fused, const Tensor& visible, const Tensor& infrared);

double iou(const Box& a, const Box& b);

struct ScoredBox {
  Box box;
  double score = 0.0;
};
using Detections = std::vector<ScoredBox>;

struct DetectionEval {
  std::vector<double> thresholds;
  std::vector<double> ap;
  double map50 = 0.0;
  double map5095 = 0.0;
  nlohmann::json to_json() const;
};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

/// Single-class AP at one IoU threshold with greedy score-ordered matching and
/// 101-point interpolation. Scenes are matched independently; with no ground
/// truth anywhere the AP is 0.
double average_precision(const std::vector<Detections>& predictions, const std::vector<BoxSet>& ground_truth,
                         double iou_threshold);

/// Throws std::invalid_argument for boxes with w or h <= 0, scores outside [0, 1],
/// or mismatched scene counts.
DetectionEval map_eval(const std::vector<Detections>& predictions, const std::vector<BoxSet>& ground_truth);

}  // namespace fusedet
