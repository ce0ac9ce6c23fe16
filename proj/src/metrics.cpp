#include "fusedet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fusedet/fusion_losses.hpp"

namespace fusedet {

namespace {

void require_image(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected an H x W image, got " + shape_string(t.shape()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

double plogp_sum(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log2(v);
  return h;
}

// Plain 2-D image stored row-major; VIF works on shrinking valid-region copies.
struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t i, std::size_t j) const { return v[i * w + j]; }
};

std::vector<double> normalized_gaussian(std::size_t n, double sd) {
  std::vector<double> k(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2.0 * sd * sd));
  }
  const double s = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& x : k) x /= s;
  return k;
}

// Separable "valid" filtering with a symmetric kernel.
Plane filter_valid(const Plane& p, const std::vector<double>& k) {
  const std::size_t n = k.size();
  Plane rows{p.h, p.w - n + 1, {}};
  rows.v.assign(rows.h * rows.w, 0.0);
  for (std::size_t i = 0; i < rows.h; ++i)
    for (std::size_t j = 0; j < rows.w; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += k[t] * p.at(i, j + t);
      rows.v[i * rows.w + j] = s;
    }
  Plane out{p.h - n + 1, rows.w, {}};
  out.v.assign(out.h * out.w, 0.0);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t j = 0; j < out.w; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += k[t] * rows.at(i + t, j);
      out.v[i * out.w + j] = s;
    }
  return out;
}

Plane downsample(const Plane& p) {
  Plane out{(p.h + 1) / 2, (p.w + 1) / 2, {}};
  out.v.resize(out.h * out.w);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t j = 0; j < out.w; ++j) out.v[i * out.w + j] = p.at(2 * i, 2 * j);
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

std::size_t vif_window(std::size_t scale) { return (std::size_t{1} << (kVifScales - scale + 1)) + 1; }

}  // namespace

double entropy_en(const Tensor& image) {
  if (image.size() == 0) throw std::invalid_argument("entropy_en: empty image");
  std::vector<double> p(256, 0.0);
  for (double v : image.data()) p[static_cast<std::size_t>(quantize_level(v))] += 1.0;
  for (double& v : p) v /= static_cast<double>(image.size());
  return plogp_sum(p);
}

double pairwise_mi(const Tensor& a, const Tensor& b) {
  require_same("mutual_information", a, b);
  const double n = static_cast<double>(a.size());
  std::vector<double> joint(256 * 256, 0.0), pa(256, 0.0), pb(256, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto qa = static_cast<std::size_t>(quantize_level(a[i]));
    const auto qb = static_cast<std::size_t>(quantize_level(b[i]));
    joint[qa * 256 + qb] += 1.0;
    pa[qa] += 1.0;
    pb[qb] += 1.0;
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < 256; ++i) {
    if (pa[i] == 0.0) continue;
    for (std::size_t j = 0; j < 256; ++j) {
      const double c = joint[i * 256 + j];
      if (c == 0.0) continue;
      // p(a,b) log(p(a,b) / (p(a) p(b))) with counts: c/n * log(c n / (ca cb)).
      mi += c / n * std::log2(c * n / (pa[i] * pb[j]));
    }
  }
  return std::max(mi, 0.0);
}

double mutual_information(const Tensor& fused, const Tensor& visible, const Tensor& infrared) {
  return pairwise_mi(visible, fused) + pairwise_mi(infrared, fused);
}

double vif(const Tensor& reference, const Tensor& distorted) {
  require_image("vif", reference);
  require_same("vif", reference, distorted);
  Plane ref{reference.dim(0), reference.dim(1), {}}, dist{reference.dim(0), reference.dim(1), {}};
  for (double v : reference.data()) ref.v.push_back(255.0 * v);
  for (double v : distorted.data()) dist.v.push_back(255.0 * v);

  double num = 0.0, den = 0.0;
  for (std::size_t scale = 1; scale <= kVifScales; ++scale) {
    const std::size_t n = vif_window(scale);
    const auto win = normalized_gaussian(n, static_cast<double>(n) / 5.0);
    auto require_fits = [&] {
      if (ref.h < n || ref.w < n)
        throw ShapeError("vif: image " + shape_string(reference.shape()) + " too small for scale " + std::to_string(scale));
    };
    require_fits();
    if (scale > 1) {
      ref = downsample(filter_valid(ref, win));
      dist = downsample(filter_valid(dist, win));
      require_fits();
    }
    const Plane mu1 = filter_valid(ref, win);
    const Plane mu2 = filter_valid(dist, win);
    const Plane e11 = filter_valid(product(ref, ref), win);
    const Plane e22 = filter_valid(product(dist, dist), win);
    const Plane e12 = filter_valid(product(ref, dist), win);
    constexpr double tiny = 1e-10;
    for (std::size_t i = 0; i < mu1.v.size(); ++i) {
      double s1 = std::max(0.0, e11.v[i] - mu1.v[i] * mu1.v[i]);
      const double s2 = std::max(0.0, e22.v[i] - mu2.v[i] * mu2.v[i]);
      const double s12 = e12.v[i] - mu1.v[i] * mu2.v[i];
      double g = 0.0, sv = s2;
      if (s1 >= tiny) {
        g = s12 / s1;
        sv = s2 - g * s12;
      } else {
        s1 = 0.0;
      }
      if (s2 < tiny) {
        g = 0.0;
        sv = 0.0;
      }
      if (g < 0.0) {
        sv = s2;
        g = 0.0;
      }
      sv = std::max(sv, tiny);
      num += std::log10(1.0 + g * g * s1 / (sv + kVifNoiseVariance));
      den += std::log10(1.0 + s1 / kVifNoiseVariance);
    }
  }
  return den > 0.0 ? num / den : 0.0;
}

double vif_fusion(const Tensor& fused, const Tensor& visible, const Tensor& infrared) {
  return vif(visible, fused) + vif(infrared, fused);
}

FusionMetricsReport fusion_metrics(const Tensor& fused, const Tensor& visible, const Tensor& infrared) {
  return {entropy_en(fused), mutual_information(fused, visible, infrared), vif_fusion(fused, visible, infrared)};
}

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double area_a = (a.x1() - a.x0()) * (a.y1() - a.y0());
  const double area_b = (b.x1() - b.x0()) * (b.y1() - b.y0());
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

nlohmann::json DetectionEval::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    char key[16];
    std::snprintf(key, sizeof key, "ap%02d", static_cast<int>(std::lround(thresholds[i] * 100.0)));
    per[key] = ap[i];
  }
  return {{"map50", map50}, {"map5095", map5095}, {"per_threshold", per}};
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50.0 + 5.0 * i) / 100.0);
  return t;
}

double average_precision(const std::vector<Detections>& predictions, const std::vector<BoxSet>& ground_truth,
                         double iou_threshold) {
  if (predictions.size() != ground_truth.size())
    throw std::invalid_argument("average_precision: " + std::to_string(predictions.size()) + " prediction sets for " +
                                std::to_string(ground_truth.size()) + " scenes");
  std::size_t total_gt = 0;
  for (const BoxSet& g : ground_truth) total_gt += g.size();
  if (total_gt == 0) return 0.0;

  struct Entry {
    double score;
    std::size_t scene, index;
  };
  std::vector<Entry> order;
  for (std::size_t s = 0; s < predictions.size(); ++s)
    for (std::size_t i = 0; i < predictions[s].size(); ++i) order.push_back({predictions[s][i].score, s, i});
  std::stable_sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> taken(ground_truth.size());
  for (std::size_t s = 0; s < ground_truth.size(); ++s) taken[s].assign(ground_truth[s].size(), false);

  std::vector<double> precision, recall;
  double tp = 0.0, fp = 0.0;
  for (const Entry& e : order) {
    const Box& p = predictions[e.scene][e.index].box;
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < ground_truth[e.scene].size(); ++j) {
      if (taken[e.scene][j]) continue;
      const double o = iou(p, ground_truth[e.scene][j]);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= iou_threshold) {
      taken[e.scene][best_j] = true;
      tp += 1.0;
    } else {
      fp += 1.0;
    }
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(total_gt));
  }
  // Make precision non-increasing from the right, then sample at 101 recall points.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return ap / 101.0;
}

DetectionEval map_eval(const std::vector<Detections>& predictions, const std::vector<BoxSet>& ground_truth) {
  if (predictions.size() != ground_truth.size())
    throw std::invalid_argument("map_eval: " + std::to_string(predictions.size()) + " prediction sets for " +
                                std::to_string(ground_truth.size()) + " scenes");
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    for (const ScoredBox& p : predictions[s]) {
      if (!(p.box.w > 0.0) || !(p.box.h > 0.0))
        throw std::invalid_argument("map_eval: degenerate predicted box in scene " + std::to_string(s));
      if (!(p.score >= 0.0 && p.score <= 1.0))
        throw std::invalid_argument("map_eval: score outside [0, 1] in scene " + std::to_string(s));
    }
    for (const Box& g : ground_truth[s])
      if (!(g.w > 0.0) || !(g.h > 0.0))
        throw std::invalid_argument("map_eval: degenerate ground-truth box in scene " + std::to_string(s));
  }
  DetectionEval out;
  out.thresholds = coco_thresholds();
  for (double t : out.thresholds) out.ap.push_back(average_precision(predictions, ground_truth, t));
  out.map50 = out.ap.front();
  out.map5095 = std::accumulate(out.ap.begin(), out.ap.end(), 0.0) / static_cast<double>(out.ap.size());
  return out;
}

}  // namespace fusedet
