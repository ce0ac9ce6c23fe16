#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fusedet/harness.hpp"
#include "fusedet/ops.hpp"
#include "gradcheck.hpp"

using namespace fusedet;
using fusedet::testing::check_gradients;
using fusedet::testing::random_tensor;

namespace {

std::vector<ScenePair> scenes(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<ScenePair> out;
  SceneSpec spec;
  spec.width = spec.height = size;
  for (std::size_t i = 0; i < n; ++i) {
    spec.seed = scene_seed(seed, "t", i);
    out.push_back(generate_scene(spec));
  }
  return out;
}

RunConfig small_config(std::size_t iterations) {
  RunConfig c;
  c.iterations = iterations;
  c.diffusion.steps = 100;
  c.diffusion.boxes = 4;
  c.diffusion.sampling_steps = 2;
  return c;
}

}  // namespace

TEST(ToyModel, SharedMaskIsBackboneAndSetsAreDisjoint) {
  const ToyModel m = init_model(OrpptConfig{}, DetectorConfig{}, 3);
  ASSERT_FALSE(m.params.shared_names().empty());
  for (const std::string& name : m.params.names()) {
    const bool backbone = name.rfind(kBackbonePrefix, 0) == 0;
    EXPECT_EQ(m.params.is_shared(name), backbone) << name;
    const bool fusion = name.rfind(kFusionPrefix, 0) == 0, detector = name.rfind(kDetectorPrefix, 0) == 0;
    EXPECT_EQ(int(backbone) + int(fusion) + int(detector), 1) << name;
  }
  EXPECT_TRUE(m.params.contains("detector.fc1.w"));
}

TEST(ToyModel, SaveLoadRoundTripIsExact) {
  const ToyModel m = init_model(OrpptConfig{}, DetectorConfig{}, 4);
  const auto path = std::filesystem::temp_directory_path() / "fusedet_model_roundtrip.json";
  m.save(path);
  const ToyModel back = ToyModel::load(path);
  EXPECT_TRUE(back.params == m.params);
  EXPECT_EQ(back.orppt.branches, m.orppt.branches);
  EXPECT_EQ(back.detector.grid, m.detector.grid);
}

TEST(RoiPool, ColumnsAverageTheRightPixels) {
  const BoxSet boxes{{0.5, 0.5, 1.0, 1.0}, {0.25, 0.25, 0.5, 0.5}, {0.9, 0.1, 0.01, 0.01}};
  const Tensor m = roi_pool_matrix(boxes, 4, 4);
  for (std::size_t n = 0; n < 3; ++n) {
    double total = 0.0;
    for (std::size_t k = 0; k < 16; ++k) total += m.at(k, n);
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
  EXPECT_EQ(m.at(0, 0), 1.0 / 16.0);
  // Top-left quarter of a 4 x 4 grid: pixels 0, 1, 4, 5.
  for (std::size_t k : {0u, 1u, 4u, 5u}) EXPECT_EQ(m.at(k, 1), 0.25);
  EXPECT_EQ(m.at(2, 1), 0.0);
  // A box smaller than a pixel falls back to the pixel under its centre (row 0, column 3).
  EXPECT_EQ(m.at(3, 2), 1.0);
}

TEST(RoiPool, GridCellsTileTheBox) {
  const Box b{0.4, 0.6, 0.2, 0.4};
  double area = 0.0;
  for (std::size_t gy = 0; gy < 2; ++gy)
    for (std::size_t gx = 0; gx < 2; ++gx) {
      const Box c = grid_cell(b, 2, gy, gx);
      EXPECT_GE(c.x0(), b.x0() - 1e-15);
      EXPECT_LE(c.x1(), b.x1() + 1e-15);
      area += c.w * c.h;
    }
  EXPECT_NEAR(area, b.w * b.h, 1e-15);
  EXPECT_EQ(grid_cell(b, 1, 0, 0), b);
}

TEST(Detector, FiniteDifferences) {
  const OrpptConfig oc;
  const DetectorConfig dc;
  const ToyModel m = init_model(oc, dc, 5);
  SplitMix64 rng(6);
  std::vector<Tensor> inputs;
  const std::size_t sizes[] = {8, 4, 2, 2};
  for (std::size_t l = 0; l < 4; ++l) inputs.push_back(random_tensor(rng, Shape{oc.backbone_channels[l], sizes[l], sizes[l]}, 0.0, 1.0));
  const std::vector<std::string> names{"detector.fc1.w", "detector.fc1.b", "detector.fc2.w", "detector.fc2.b"};
  for (const auto& n : names) inputs.push_back(m.params.get(n));
  inputs[5] = random_tensor(rng, inputs[5].shape(), -0.3, 0.3);
  Tensor z(Shape{3, 4});
  for (double& v : z.data()) v = rng.uniform(-1.0, 1.0);
  const auto builder = [&](Tape&, const std::vector<Var>& v) {
    FeaturePyramid p;
    p.levels.assign(v.begin(), v.begin() + 4);
    Bindings b;
    for (std::size_t k = 0; k < names.size(); ++k) b.emplace(names[k], v[4 + k]);
    return sum(square(detector_forward(b, p, z, 37, 100, dc)));
  };
  EXPECT_LT(check_gradients(builder, inputs, 1e-6, 8).relative_error, 1e-6);
}

TEST(Detector, ResidualAroundTheClampedBox) {
  ToyModel m = init_model(OrpptConfig{}, DetectorConfig{}, 7);
  Tensor& w2 = m.params.get("detector.fc2.w");
  for (double& v : w2.data()) v = 0.0;
  const Tensor image(Shape{32, 32}, 0.5);
  Tape tape;
  const Bindings b = m.params.bind(tape, false);
  const FeaturePyramid p = backbone_forward(b, tape.constant(image), tape.constant(image), m.orppt);
  const Tensor z(Shape{2, 4}, {0.0, 0.0, -1.6, -1.2, 5.0, -5.0, 0.0, 0.0});
  const Tensor out = detector_forward(b, p, z, 10, 100, m.detector).value();
  const Tensor expect = scale_boxes(boxes_to_tensor({clamp_box(boxes_from_tensor(unscale_boxes(z))[0]),
                                                     clamp_box(boxes_from_tensor(unscale_boxes(z))[1])}));
  EXPECT_LT(max_abs_diff(out, expect), 1e-12);
}

TEST(RunConfigJson, RoundTripAndValidation) {
  RunConfig c;
  c.seed = 9;
  c.branches = {0, 2};
  c.gmta_period = 3;
  c.diffusion.schedule = ScheduleKind::Linear;
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(RunConfig::from_json(nlohmann::json::object()).to_json(), RunConfig{}.to_json());
  EXPECT_THROW(RunConfig::from_json({{"sede", 1}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json({{"branches", {1, 2}}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json({{"branches", {0, 5}}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json({{"task_weights", {-1.0, 1.0}}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json({{"optimizer", "lbfgs"}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json({{"iterations", "many"}}), std::invalid_argument);
  RunConfig missing = c;
  missing.dataset_root = "/nonexistent/fusedet";
  EXPECT_THROW(train(missing), std::runtime_error);
}

TEST(Train, ZeroIterationsReturnsInitialModel) {
  const RunConfig c = small_config(0);
  const TrainResult r = train(c, scenes(2, 32, 1));
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(r.model.params == init_model(c.orppt(), DetectorConfig{}, c.seed).params);
}

TEST(Train, GmtaEveryStepGivesUnitConditionAndEqualColumns) {
  const TrainResult r = train(small_config(4), scenes(3, 32, 2));
  ASSERT_EQ(r.log.size(), 4u);
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    const TrainRecord& rec = r.log[i];
    EXPECT_EQ(rec.step, i);
    ASSERT_TRUE(rec.kappa_after.has_value());
    EXPECT_NEAR(*rec.kappa_after, 1.0, 1e-9);
    ASSERT_EQ(rec.aligned_column_norms.size(), 2u);
    EXPECT_NEAR(rec.aligned_column_norms[0], rec.aligned_column_norms[1], 1e-9 * rec.aligned_column_norms[0]);
    EXPECT_TRUE(std::isfinite(rec.loss_u) && std::isfinite(rec.loss_d));
    EXPECT_GT(rec.grad_norm_u, 0.0);
    EXPECT_GT(rec.grad_norm_d, 0.0);
  }
}

TEST(Train, PeriodAndDisabledModes) {
  RunConfig c = small_config(4);
  c.gmta_period = 2;
  const TrainResult r = train(c, scenes(3, 32, 2));
  EXPECT_TRUE(r.log[0].kappa_after.has_value());
  EXPECT_FALSE(r.log[1].kappa_after.has_value());
  EXPECT_TRUE(r.log[1].kappa_before.has_value());
  c.gmta_enabled = false;
  for (const TrainRecord& rec : train(c, scenes(3, 32, 2)).log) EXPECT_FALSE(rec.kappa_after.has_value());
}

TEST(Train, DeterministicPerSeed) {
  const auto data = scenes(3, 32, 3);
  const TrainResult a = train(small_config(3), data), b = train(small_config(3), data);
  EXPECT_TRUE(a.model.params == b.model.params);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].to_json().dump(), b.log[i].to_json().dump());
  RunConfig other = small_config(3);
  other.seed = 1;
  EXPECT_FALSE(train(other, data).model.params == a.model.params);
}

TEST(Train, NonFiniteLossAbortsWithStep) {
  auto data = scenes(1, 32, 4);
  data[0].visible[10] = 1e200;
  try {
    train(small_config(2), data);
    FAIL() << "expected an abort";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("L_u="), std::string::npos);
  }
}

TEST(Train, WritesLogAndModel) {
  const auto root = std::filesystem::temp_directory_path() / "fusedet_train_io";
  std::filesystem::remove_all(root);
  SceneSpec spec;
  spec.width = spec.height = 32;
  write_split(root / "data", "train", 2, spec, 1);
  RunConfig c = small_config(3);
  c.dataset_root = root / "data";
  c.output_dir = root / "out";
  const TrainResult r = train(c);
  std::ifstream log(c.output_dir / "train_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    EXPECT_EQ(nlohmann::json::parse(line)["step"], lines);
    ++lines;
  }
  EXPECT_EQ(lines, 3u);
  EXPECT_TRUE(ToyModel::load(c.output_dir / "model.json").params == r.model.params);
}

TEST(Fuse, RangeShapeAndPurity) {
  const ToyModel m = init_model(OrpptConfig{}, DetectorConfig{}, 8);
  const ScenePair s = scenes(1, 32, 5)[0];
  const Tensor u = fuse(m, s.visible, s.infrared);
  ASSERT_EQ(u.shape(), s.visible.shape());
  for (double v : u.data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  const Tensor a = fuse(m, s.visible, s.visible), b = fuse(m, s.visible, s.visible);
  EXPECT_TRUE(a == b);
}

TEST(Detect, OracleDenoiserReturnsGroundTruth) {
  // Dyadic coordinates survive scale/unscale exactly.
  const BoxSet gt{{0.25, 0.5, 0.125, 0.25}, {0.75, 0.375, 0.25, 0.125}, {0.5, 0.5, 0.5, 0.5}};
  const Tensor target = scale_boxes(boxes_to_tensor(gt));
  const Denoiser oracle = [&](const Tensor&, std::size_t) { return target; };
  DetectOptions o;
  o.boxes = 3;
  o.total_steps = 100;
  const Detections d = detect_with(oracle, o, build_schedule(100));
  ASSERT_EQ(d.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(d[i].box, gt[i]);
    EXPECT_EQ(d[i].score, 1.0);
  }
}

TEST(Detect, ReturnsNBoxesForAnyStepCount) {
  const ToyModel m = init_model(OrpptConfig{}, DetectorConfig{}, 9);
  const ScenePair s = scenes(1, 32, 6)[0];
  for (std::size_t steps : {1u, 4u}) {
    DetectOptions o;
    o.boxes = 5;
    o.sampling_steps = steps;
    const Detections d = detect(m, s.visible, s.infrared, o);
    ASSERT_EQ(d.size(), 5u);
    for (const ScoredBox& b : d) {
      EXPECT_TRUE(b.score >= 0.0 && b.score <= 1.0);
      EXPECT_GE(b.box.w, kMinBoxSize);
    }
  }
}

TEST(Detect, NmsKeepsBestOfOverlappingBoxes) {
  const Detections d{{{0.5, 0.5, 0.2, 0.2}, 0.6},
                     {{0.51, 0.5, 0.2, 0.2}, 0.9},
                     {{0.2, 0.2, 0.1, 0.1}, 0.6},
                     {{0.2, 0.2, 0.1, 0.1}, 0.6}};
  const Detections k = nms(d, 0.5);
  ASSERT_EQ(k.size(), 2u);
  EXPECT_EQ(k[0].score, 0.9);
  EXPECT_EQ(k[1].box, d[2].box);
  EXPECT_EQ(nms(d, 1.0).size(), 4u);
}

TEST(Detect, MeanBestIou) {
  const std::vector<BoxSet> gt{{{0.5, 0.5, 0.2, 0.2}, {0.2, 0.2, 0.1, 0.1}}};
  const std::vector<Detections> preds{{{{0.5, 0.5, 0.2, 0.2}, 0.1}}};
  EXPECT_DOUBLE_EQ(mean_best_iou(preds, gt), 0.5);
}

TEST(Detect, DetectionsJsonRoundTrip) {
  const std::vector<Detections> d{{{{0.1, 0.2, 0.3, 0.4}, 0.5}}, {}};
  const auto back = detections_from_json(detections_to_json({"a", "b"}, d));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, "a");
  EXPECT_EQ(back[0].second[0].box, d[0][0].box);
  EXPECT_EQ(back[0].second[0].score, 0.5);
  EXPECT_TRUE(back[1].second.empty());
  EXPECT_THROW(detections_from_json({{"scenes", {{{"scene", "a"}}}}}), std::invalid_argument);
}

TEST(Experiments, IdenticalRunsGiveIdenticalReports) {
  const auto train_set = scenes(2, 64, 7), eval_set = scenes(2, 64, 8);
  RunConfig c = small_config(2);
  c.gmta_enabled = false;
  EXPECT_EQ(run_once(c, train_set, eval_set).to_json(), run_once(c, train_set, eval_set).to_json());
}

TEST(Experiments, GmtaReportSchema) {
  const auto train_set = scenes(2, 64, 7), eval_set = scenes(2, 64, 8);
  const GmtaExperiment e = experiment_gmta(small_config(2), {1, 2}, train_set, eval_set, 1);
  const auto j = e.to_json();
  for (const char* arm : {"gmta", "no_gmta"}) {
    ASSERT_TRUE(j["arms"].contains(arm));
    EXPECT_EQ(j["arms"][arm]["runs"].size(), 2u);
    for (const char* key : {"loss_u", "loss_d", "loss_total", "en", "mi", "vif", "map50", "map5095"})
      EXPECT_TRUE(j["arms"][arm]["mean"].contains(key)) << arm << " " << key;
  }
  EXPECT_GT(e.with_gmta.runs[0].aligned_steps, 0u);
  EXPECT_EQ(e.without_gmta.runs[0].aligned_steps, 0u);
  const std::string csv = e.to_csv();
  EXPECT_EQ(csv.rfind("arm,seed,loss_u", 0), 0u);
  EXPECT_NE(csv.find("no_gmta,mean"), std::string::npos);
}

TEST(Experiments, BranchRowsFollowTheGivenOrder) {
  const auto train_set = scenes(2, 64, 7), eval_set = scenes(1, 64, 8);
  const BranchExperiment single = experiment_branches(small_config(1), {{0}}, {1}, train_set, eval_set, 1);
  EXPECT_EQ(single.rows.size(), 1u);
  const BranchExperiment two = experiment_branches(small_config(1), {{0, 1}, {0}}, {1}, train_set, eval_set, 1);
  ASSERT_EQ(two.rows.size(), 2u);
  EXPECT_EQ(two.rows[0].name, "0 1");
  EXPECT_EQ(two.rows[1].name, "0");
  EXPECT_EQ(two.to_json()["rows"][0]["branches"], nlohmann::json({0, 1}));
  EXPECT_THROW(experiment_branches(small_config(1), {{1}}, {1}, train_set, eval_set, 1), std::invalid_argument);
  EXPECT_LE(fusion_wins(two.rows[0], two.rows[1]), 1u);
}
