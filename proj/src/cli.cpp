#include "fusedet/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "fusedet/harness.hpp"

namespace fusedet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty() || !std::all_of(item.begin(), item.end(), ::isdigit))
      throw UsageError("expected a comma-separated list of non-negative integers, got '" + text + "'");
    out.push_back(std::stoul(item));
  }
  if (out.empty()) throw UsageError("empty index list");
  return out;
}

std::vector<std::vector<std::size_t>> parse_branch_sets(const std::string& text) {
  std::vector<std::vector<std::size_t>> out;
  std::stringstream ss(text);
  std::string set;
  while (std::getline(ss, set, ';')) out.push_back(parse_index_list(set));
  if (out.empty()) throw UsageError("no branch sets given");
  return out;
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw UsageError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

// Flags shared by the commands that build a RunConfig.
struct RunFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string out;
  std::size_t iterations = 0;
  double lr = 0.0;
  std::string optimizer;
  std::string gmta;
  std::size_t period = 0;
  std::string branches;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* iterations_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* period_opt = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration");
    seed_opt = app->add_option("--seed", seed, "Run seed");
    app->add_option("--dataset", dataset, "Dataset root");
    app->add_option("--out", out, "Output directory");
    iterations_opt = app->add_option("--iterations", iterations, "Training iterations");
    lr_opt = app->add_option("--lr", lr, "Learning rate");
    app->add_option("--optimizer", optimizer, "sgd or adamw")->check(CLI::IsMember({"sgd", "adamw"}));
    app->add_option("--gmta", gmta, "Gradient alignment on or off")->check(CLI::IsMember({"on", "off"}));
    period_opt = app->add_option("--period", period, "Align every k-th step");
    app->add_option("--branches", branches, "Branch set, e.g. 0,1,2,3");
  }

  RunConfig build() const {
    RunConfig c;
    try {
      json j = config.empty() ? json::object() : read_json_file(config);
      c = RunConfig::from_json(j);
      if (*seed_opt) c.seed = seed;
      if (!dataset.empty()) c.dataset_root = dataset;
      if (!out.empty()) c.output_dir = out;
      if (*iterations_opt) c.iterations = iterations;
      if (*lr_opt) c.learning_rate = lr;
      if (!optimizer.empty()) c.optimizer = optimizer;
      if (!gmta.empty()) c.gmta_enabled = gmta == "on";
      if (*period_opt) c.gmta_period = period;
      if (!branches.empty()) c.branches = parse_index_list(branches);
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

struct SceneInput {
  std::string visible;
  std::string infrared;
  std::string dataset;
  std::string split = "eval";

  void attach(CLI::App* app) {
    app->add_option("--visible", visible, "Visible PGM image");
    app->add_option("--infrared", infrared, "Infrared PGM image");
    app->add_option("--dataset", dataset, "Dataset root (alternative to --visible/--infrared)");
    app->add_option("--split", split, "Dataset split");
  }

  std::vector<ScenePair> load() const {
    const bool single = !visible.empty() || !infrared.empty();
    if (single == !dataset.empty())
      throw UsageError("give either --visible and --infrared, or --dataset");
    if (!single) return read_split(dataset, split);
    if (visible.empty() || infrared.empty()) throw UsageError("--visible and --infrared must be given together");
    ScenePair s;
    s.id = fs::path(visible).stem().string();
    s.visible = read_image(visible);
    s.infrared = read_image(infrared);
    if (s.visible.shape() != s.infrared.shape()) throw std::runtime_error("visible and infrared sizes differ");
    return {s};
  }
};

std::vector<std::uint64_t> seed_list(std::uint64_t first, std::size_t count, const std::string& explicit_list) {
  std::vector<std::uint64_t> seeds;
  if (!explicit_list.empty()) {
    for (std::size_t s : parse_index_list(explicit_list)) seeds.push_back(s);
    return seeds;
  }
  for (std::size_t i = 0; i < count; ++i) seeds.push_back(first + i);
  return seeds;
}

Tensor matrix_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("--matrix is not valid JSON: ") + e.what());
  }
  if (!j.is_array() || j.empty() || !j[0].is_array() || j[0].empty())
    throw UsageError("--matrix must be a non-empty array of rows");
  const std::size_t rows = j.size(), cols = j[0].size();
  Tensor g(Shape{rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    if (!j[i].is_array() || j[i].size() != cols) throw UsageError("--matrix rows must all have the same length");
    for (std::size_t k = 0; k < cols; ++k) {
      if (!j[i][k].is_number()) throw UsageError("--matrix entries must be numbers");
      g.at(i, k) = j[i][k].get<double>();
    }
  }
  return g;
}

json matrix_json(const Tensor& g) {
  json rows = json::array();
  for (std::size_t i = 0; i < g.dim(0); ++i) {
    json row = json::array();
    for (std::size_t k = 0; k < g.dim(1); ++k) row.push_back(g.at(i, k));
    rows.push_back(row);
  }
  return rows;
}

std::pair<std::vector<ScenePair>, std::vector<ScenePair>> load_splits(const RunConfig& c) {
  if (c.dataset_root.empty()) throw UsageError("a dataset root is required (--dataset or dataset_root in --config)");
  if (!fs::is_directory(c.dataset_root))
    throw std::runtime_error("dataset_root '" + c.dataset_root.string() + "' does not exist");
  return {read_split(c.dataset_root, c.train_split), read_split(c.dataset_root, c.eval_split)};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint visible/infrared fusion and detection toolkit", "fusedet"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic paired dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_train = 200, gen_eval = 50;
  SceneSpec gen_spec;
  gen->add_option("--out", gen_out, "Dataset root")->required();
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--scenes", gen_train, "Training scenes");
  gen->add_option("--eval-scenes", gen_eval, "Evaluation scenes");
  gen->add_option("--width", gen_spec.width, "Image width");
  gen->add_option("--height", gen_spec.height, "Image height");
  gen->add_option("--min-objects", gen_spec.min_objects, "Fewest objects per scene");
  gen->add_option("--max-objects", gen_spec.max_objects, "Most objects per scene");
  gen->add_option("--contrast", gen_spec.hotspot_contrast, "Infrared hotspot contrast");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the joint model");
  RunFlags train_flags;
  train_flags.attach(train_cmd);

  // fuse
  auto* fuse_cmd = app.add_subcommand("fuse", "Write fused images");
  std::string fuse_model, fuse_out;
  std::uint64_t fuse_seed = 0;
  SceneInput fuse_in;
  fuse_cmd->add_option("--model", fuse_model, "Model file")->required();
  fuse_cmd->add_option("--out", fuse_out, "Output PGM (single scene) or directory")->required();
  fuse_cmd->add_option("--seed", fuse_seed, "Unused: fusion is deterministic");
  fuse_in.attach(fuse_cmd);

  // detect
  auto* detect_cmd = app.add_subcommand("detect", "Detect objects by reverse diffusion");
  std::string detect_model, detect_out;
  std::uint64_t detect_seed = 0;
  DetectOptions detect_opts;
  double detect_nms = 0.5;
  SceneInput detect_in;
  detect_cmd->add_option("--model", detect_model, "Model file")->required();
  detect_cmd->add_option("--out", detect_out, "Detections JSON (stdout when omitted)");
  detect_cmd->add_option("--seed", detect_seed, "Sampling seed");
  detect_cmd->add_option("--steps", detect_opts.sampling_steps, "Sampling steps");
  detect_cmd->add_option("--boxes", detect_opts.boxes, "Boxes per scene");
  detect_cmd->add_option("--nms", detect_nms, "NMS IoU threshold, 0 disables")->check(CLI::Range(0.0, 1.0));
  detect_in.attach(detect_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions or a model on a dataset split");
  std::string eval_preds, eval_model, eval_dataset, eval_split = "eval", eval_out;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--predictions", eval_preds, "Detections JSON");
  eval_cmd->add_option("--model", eval_model, "Model file");
  eval_cmd->add_option("--dataset", eval_dataset, "Dataset root")->required();
  eval_cmd->add_option("--split", eval_split, "Dataset split");
  eval_cmd->add_option("--out", eval_out, "Report JSON");
  eval_cmd->add_option("--seed", eval_seed, "Unused: evaluation noise is fixed");

  // gmta-demo
  auto* demo = app.add_subcommand("gmta-demo", "Align a gradient matrix and print the report");
  std::string demo_matrix;
  std::uint64_t demo_seed = 0;
  std::size_t demo_rows = 8, demo_cols = 2;
  demo->add_option("--matrix", demo_matrix, "P x T matrix as JSON rows, e.g. [[2,0],[0,1]]");
  demo->add_option("--seed", demo_seed, "Seed of the random matrix used without --matrix");
  demo->add_option("--rows", demo_rows, "Rows of the random matrix");
  demo->add_option("--cols", demo_cols, "Columns of the random matrix");

  // exp-gmta
  auto* exp_gmta = app.add_subcommand("exp-gmta", "Compare training with and without alignment over seeds");
  RunFlags exp_flags;
  exp_flags.attach(exp_gmta);
  std::size_t exp_seeds = 5, exp_threads = 0;
  std::string exp_seed_list;
  exp_gmta->add_option("--num-seeds", exp_seeds, "Seeds seed, seed+1, ...");
  exp_gmta->add_option("--seeds", exp_seed_list, "Explicit comma-separated seeds");
  exp_gmta->add_option("--threads", exp_threads, "Worker threads, 0 = all cores");

  // exp-branches
  auto* exp_branch = app.add_subcommand("exp-branches", "Sweep fusion branch sets");
  RunFlags branch_flags;
  branch_flags.attach(exp_branch);
  std::string branch_sets = "0;0,1;0,1,2;0,1,2,3;0,1,2,3,4";
  std::size_t branch_seeds = 5, branch_threads = 0;
  std::string branch_seed_list;
  exp_branch->add_option("--sets", branch_sets, "Branch sets separated by ';'");
  exp_branch->add_option("--num-seeds", branch_seeds, "Seeds seed, seed+1, ...");
  exp_branch->add_option("--seeds", branch_seed_list, "Explicit comma-separated seeds");
  exp_branch->add_option("--threads", branch_threads, "Worker threads, 0 = all cores");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      gen_spec.validate();
      write_split(gen_out, "train", gen_train, gen_spec, gen_seed);
      write_split(gen_out, "eval", gen_eval, gen_spec, gen_seed);
      out << "wrote " << gen_train << " train and " << gen_eval << " eval scenes to " << gen_out << "\n";
    } else if (*train_cmd) {
      const RunConfig c = train_flags.build();
      if (c.dataset_root.empty()) throw UsageError("train needs --dataset or dataset_root in --config");
      if (c.output_dir.empty()) throw UsageError("train needs --out or output_dir in --config");
      fs::create_directories(c.output_dir);
      write_text(c.output_dir / "config.json", c.to_json().dump(2) + "\n");
      const TrainResult r = train(c);
      const TrainRecord& last = r.log.empty() ? TrainRecord{} : r.log.back();
      out << "trained " << r.log.size() << " steps; last L_u " << last.loss_u << ", L_d " << last.loss_d << "\n";
    } else if (*fuse_cmd) {
      const ToyModel m = ToyModel::load(fuse_model);
      const auto scenes = fuse_in.load();
      if (fuse_in.dataset.empty()) {
        write_image(fuse_out, fuse(m, scenes[0].visible, scenes[0].infrared));
      } else {
        fs::create_directories(fuse_out);
        for (const ScenePair& s : scenes)
          write_image(fs::path(fuse_out) / (s.id + ".fused.pgm"), fuse(m, s.visible, s.infrared));
      }
      out << "fused " << scenes.size() << " scene(s)\n";
    } else if (*detect_cmd) {
      const ToyModel m = ToyModel::load(detect_model);
      const auto scenes = detect_in.load();
      std::vector<std::string> ids;
      std::vector<Detections> dets;
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        DetectOptions o = detect_opts;
        o.seed = derive_seed(detect_seed, i);
        Detections d = detect(m, scenes[i].visible, scenes[i].infrared, o);
        dets.push_back(detect_nms > 0.0 ? nms(d, detect_nms) : std::move(d));
        ids.push_back(scenes[i].id);
      }
      const std::string text = detections_to_json(ids, dets).dump(2) + "\n";
      if (detect_out.empty())
        out << text;
      else
        write_text(detect_out, text);
    } else if (*eval_cmd) {
      if (eval_preds.empty() == eval_model.empty()) throw UsageError("eval needs exactly one of --predictions, --model");
      const auto scenes = read_split(eval_dataset, eval_split);
      json report;
      if (!eval_preds.empty()) {
        const auto preds = detections_from_json(read_json_file(eval_preds));
        std::vector<Detections> ordered;
        std::vector<BoxSet> gt;
        for (const ScenePair& s : scenes) {
          auto it = std::find_if(preds.begin(), preds.end(), [&](const auto& p) { return p.first == s.id; });
          ordered.push_back(it == preds.end() ? Detections{} : it->second);
          gt.push_back(s.boxes);
        }
        for (const auto& p : preds)
          if (std::none_of(scenes.begin(), scenes.end(), [&](const ScenePair& s) { return s.id == p.first; }))
            throw std::runtime_error("predictions name unknown scene '" + p.first + "'");
        report = map_eval(ordered, gt).to_json();
      } else {
        RunConfig c;
        report = evaluate(ToyModel::load(eval_model), scenes, c).to_json();
      }
      const std::string text = report.dump(2) + "\n";
      out << text;
      if (!eval_out.empty()) write_text(eval_out, text);
    } else if (*demo) {
      Tensor g;
      if (!demo_matrix.empty()) {
        g = matrix_from_json(demo_matrix);
      } else {
        SplitMix64 rng(demo_seed);
        g = rng.normal_tensor(Shape{demo_rows, demo_cols});
      }
      if (g.dim(0) < g.dim(1)) throw UsageError("the matrix needs at least as many rows as columns");
      const Alignment a = align(g);
      out << json{{"matrix", matrix_json(g)}, {"aligned", matrix_json(a.aligned)}, {"report", a.report.to_json()}}
                 .dump(2)
          << "\n";
    } else if (*exp_gmta) {
      const RunConfig c = exp_flags.build();
      const auto [train_set, eval_set] = load_splits(c);
      const GmtaExperiment e = experiment_gmta(c, seed_list(c.seed, exp_seeds, exp_seed_list), train_set, eval_set,
                                               exp_threads);
      if (!c.output_dir.empty()) {
        write_text(c.output_dir / "gmta_report.json", e.to_json().dump(2) + "\n");
        write_text(c.output_dir / "gmta_report.csv", e.to_csv());
      }
      out << e.to_csv();
    } else if (*exp_branch) {
      const RunConfig c = branch_flags.build();
      const auto sets = parse_branch_sets(branch_sets);
      for (const auto& s : sets) {
        RunConfig probe = c;
        probe.branches = s;
        try {
          probe.validate();
        } catch (const std::invalid_argument& ex) {
          throw UsageError(ex.what());
        }
      }
      const auto [train_set, eval_set] = load_splits(c);
      const BranchExperiment e = experiment_branches(c, sets, seed_list(c.seed, branch_seeds, branch_seed_list),
                                                     train_set, eval_set, branch_threads);
      if (!c.output_dir.empty()) {
        write_text(c.output_dir / "branches_report.json", e.to_json().dump(2) + "\n");
        write_text(c.output_dir / "branches_report.csv", e.to_csv());
      }
      out << e.to_csv();
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace fusedet
