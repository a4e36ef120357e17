#pragma once

// Command-line front end. Exit codes: 0 success, 1 invalid input or
// arguments, 2 runtime failure.

#include "kpdeform/eval.hpp"
#include "kpdeform/service.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

namespace kpd {

namespace cli_detail {

namespace fs = std::filesystem;

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidInput(path + ": " + e.what());
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

/// Writes to `path`, or to `out` when the path is empty or "-".
inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-")
    out << text;
  else
    write_text(path, text);
}

inline std::vector<std::string> obj_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw InvalidInput("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".obj") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InvalidInput("no .obj files in " + dir);
  return files;
}

/// Shapes either from a directory of OBJ files or from a synthetic family.
struct ShapeSource {
  std::string data_dir;
  std::string family;
  int count = 200;
  std::uint64_t seed = 0;

  void add_options(CLI::App* app) {
    auto* d = app->add_option("--data", data_dir, "directory of .obj files");
    auto* s = app->add_option("--synthetic", family, "synthetic family: winged, table or box");
    d->excludes(s);
    app->add_option("--count", count, "number of synthetic shapes")->check(CLI::PositiveNumber);
  }

  std::vector<Mesh> load() const {
    std::vector<Mesh> meshes;
    if (!data_dir.empty()) {
      for (const auto& f : obj_files(data_dir)) meshes.push_back(load_obj(f));
    } else if (!family.empty()) {
      Rng rng = Rng(seed).split(2);
      for (auto& s : generate_synthetic_family(family_from_string(family), count, rng)) meshes.push_back(std::move(s.mesh));
    } else {
      throw InvalidInput("one of --data or --synthetic is required");
    }
    return meshes;
  }

  json describe() const {
    if (!data_dir.empty()) return {{"source", "directory"}, {"path", data_dir}};
    return {{"source", "synthetic"}, {"family", family}, {"count", count}, {"seed", seed}};
  }
};

struct AnnotatedShape {
  Mesh mesh;
  ShapeAnnotation annotation;
};

/// {"shapes": [{"mesh": "a.obj", "keypoints": .., "points": .., "labels": ..}],
///  "landmark_names": [..], "part_names": [..]}; mesh paths are relative to
/// the annotation file, coordinates are in each mesh's own frame.
struct AnnotationSet {
  std::vector<AnnotatedShape> shapes;
  std::vector<std::string> landmark_names;
  std::vector<std::string> part_names;
};

inline AnnotationSet load_annotations(const std::string& path) {
  const json j = read_json_file(path);
  AnnotationSet set;
  const fs::path base = fs::path(path).parent_path();
  try {
    set.landmark_names = j.value("landmark_names", std::vector<std::string>{});
    set.part_names = j.value("part_names", std::vector<std::string>{});
    for (const auto& s : j.at("shapes")) {
      fs::path mesh_path = s.at("mesh").get<std::string>();
      if (mesh_path.is_relative()) mesh_path = base / mesh_path;
      set.shapes.push_back({load_obj(mesh_path.string()), annotation_from_json(s)});
    }
  } catch (const json::exception& e) {
    throw InvalidInput(path + ": " + e.what());
  }
  if (set.shapes.empty()) throw InvalidInput(path + ": no shapes");
  return set;
}

inline ShapeAnnotation to_model_frame(const ShapeAnnotation& a, const UnitBoxTransform& t) {
  ShapeAnnotation out = a;
  if (a.keypoints.rows() > 0) out.keypoints = t.apply(a.keypoints);
  if (a.labeled_points.rows() > 0) out.labeled_points = t.apply(a.labeled_points);
  return out;
}

inline std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct SweepSpec {
  int basis = 0;
  double min = -2.0, max = 2.0;
  int steps = 5;
};

/// "b,min,max,steps" with an optional "basis:" prefix; min/max in standard
/// deviations of that basis.
inline SweepSpec parse_sweep(std::string text) {
  if (text.rfind("basis:", 0) == 0) text = text.substr(6);
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) parts.push_back(item);
  if (parts.size() != 4) throw InvalidInput("--sweep expects basis,min,max,steps");
  SweepSpec s;
  try {
    s.basis = std::stoi(parts[0]);
    s.min = std::stod(parts[1]);
    s.max = std::stod(parts[2]);
    s.steps = std::stoi(parts[3]);
  } catch (const std::exception&) {
    throw InvalidInput("--sweep has a non-numeric field: " + text);
  }
  if (s.steps < 1) throw InvalidInput("--sweep steps must be >= 1");
  if (!std::isfinite(s.min) || !std::isfinite(s.max)) throw InvalidInput("--sweep bounds must be finite");
  return s;
}

}  // namespace cli_detail

inline int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Keypoint-driven cage deformation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // ---- train
  TrainConfig tc;
  ShapeSource train_src;
  std::string train_out, train_log, train_prior;
  bool quiet = false;
  auto* cmd_train = app.add_subcommand("train", "train a model on a shape collection");
  train_src.add_options(cmd_train);
  cmd_train->add_option("--keypoints", tc.num_keypoints, "number of keypoints K")->check(CLI::PositiveNumber);
  cmd_train->add_option("--iters", tc.iterations, "training iterations")->check(CLI::NonNegativeNumber);
  cmd_train->add_option("--batch", tc.batch_size, "pairs per iteration")->check(CLI::PositiveNumber);
  cmd_train->add_option("--points", tc.num_points, "points sampled per shape")->check(CLI::PositiveNumber);
  cmd_train->add_option("--farthest", tc.num_farthest, "farthest points J (0 means 2K)")->check(CLI::NonNegativeNumber);
  cmd_train->add_option("--lr", tc.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  cmd_train->add_option("--alpha-kpt", tc.alpha_kpt, "keypoint regularizer weight")->check(CLI::NonNegativeNumber);
  cmd_train->add_option("--alpha-inf", tc.alpha_inf, "influence offset weight")->check(CLI::NonNegativeNumber);
  cmd_train->add_flag("--kpt-on-target", tc.kpt_on_target, "also regularize target keypoints");
  cmd_train->add_option("--seed", tc.seed, "random seed");
  cmd_train->add_option("--out", train_out, "checkpoint path")->required();
  cmd_train->add_option("--log", train_log, "training log (JSONL); default <out>.log.jsonl");
  cmd_train->add_option("--prior-out", train_prior, "also fit a keypoint prior on the training shapes");
  cmd_train->add_flag("--quiet", quiet, "no progress output");

  // ---- keypoints
  std::string ckpt, mesh_path, out_path, prior_path;
  auto* cmd_keypoints = app.add_subcommand("keypoints", "predict keypoints for a mesh");
  cmd_keypoints->add_option("--ckpt", ckpt, "checkpoint")->required();
  cmd_keypoints->add_option("--mesh", mesh_path, "input OBJ")->required();
  cmd_keypoints->add_option("--out", out_path, "output JSON (default stdout)");

  // ---- deform
  std::string target_path;
  auto* cmd_deform = app.add_subcommand("deform", "deform a mesh to target keypoints");
  cmd_deform->add_option("--ckpt", ckpt, "checkpoint")->required();
  cmd_deform->add_option("--mesh", mesh_path, "input OBJ")->required();
  cmd_deform->add_option("--target-keypoints", target_path, "JSON keypoints in the mesh's frame")->required();
  cmd_deform->add_option("--out", out_path, "output OBJ (default stdout)");

  // ---- eval
  std::string protocol, annotations_path, csv_path;
  double train_fraction = 0.5, radius = 0.05;
  int eval_points = 1024;
  std::uint64_t eval_seed = 0;
  auto* cmd_eval = app.add_subcommand("eval", "evaluate keypoints against annotations");
  cmd_eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  cmd_eval->add_option("--protocol", protocol, "pck, parts or align")->required()->check(CLI::IsMember({"pck", "parts", "align"}));
  cmd_eval->add_option("--annotations", annotations_path, "annotation JSON")->required();
  cmd_eval->add_option("--out", out_path, "report JSON (default stdout)");
  cmd_eval->add_option("--csv", csv_path, "per-pair CSV for align");
  cmd_eval->add_option("--train-fraction", train_fraction, "pck: leading fraction used to fit the regressor")
      ->check(CLI::Range(0.0, 1.0));
  cmd_eval->add_option("--radius", radius, "parts: association radius")->check(CLI::PositiveNumber);
  cmd_eval->add_option("--eval-points", eval_points, "align: points per evaluation cloud")->check(CLI::PositiveNumber);
  cmd_eval->add_option("--seed", eval_seed, "align: sampling seed");

  // ---- prior
  ShapeSource prior_src;
  int n_basis = 8;
  auto* cmd_prior = app.add_subcommand("prior", "fit a keypoint prior from predictions on a collection");
  cmd_prior->add_option("--ckpt", ckpt, "checkpoint")->required();
  prior_src.add_options(cmd_prior);
  cmd_prior->add_option("--seed", prior_src.seed, "synthetic seed");
  cmd_prior->add_option("--basis", n_basis, "number of basis vectors")->check(CLI::PositiveNumber);
  cmd_prior->add_option("--out", out_path, "prior JSON")->required();

  // ---- amplify
  std::string sweep_text, out_dir;
  auto* cmd_amplify = app.add_subcommand("amplify", "deform a mesh along one prior basis");
  cmd_amplify->add_option("--ckpt", ckpt, "checkpoint")->required();
  cmd_amplify->add_option("--prior", prior_path, "prior JSON")->required();
  cmd_amplify->add_option("--mesh", mesh_path, "input OBJ")->required();
  cmd_amplify->add_option("--sweep", sweep_text, "basis,min,max,steps (min/max in standard deviations)")->required();
  cmd_amplify->add_option("--out", out_dir, "output directory")->required();

  // ---- serve
  int port = default_port();
  std::string host = "127.0.0.1", static_dir;
  double max_upload_mb = 2.0;
  auto* cmd_serve = app.add_subcommand("serve", "serve the editing API over HTTP");
  cmd_serve->add_option("--ckpt", ckpt, "checkpoint")->required();
  cmd_serve->add_option("--prior", prior_path, "prior JSON");
  cmd_serve->add_option("--port", port, "port (default $KPD_PORT or 8080)")->check(CLI::Range(1, 65535));
  cmd_serve->add_option("--host", host, "bind address");
  cmd_serve->add_option("--static", static_dir, "directory served at /");
  cmd_serve->add_option("--max-upload-mb", max_upload_mb, "mesh upload limit")->check(CLI::PositiveNumber);

  // ---- synth
  std::string family = "winged";
  int count = 10, labelled = 2048;
  std::uint64_t synth_seed = 0;
  auto* cmd_synth = app.add_subcommand("synth", "write synthetic shapes and their annotations");
  cmd_synth->add_option("--family", family, "winged, table or box");
  cmd_synth->add_option("--count", count, "number of shapes")->check(CLI::PositiveNumber);
  cmd_synth->add_option("--seed", synth_seed, "random seed");
  cmd_synth->add_option("--labelled-points", labelled, "part-labelled surface points per shape")->check(CLI::NonNegativeNumber);
  cmd_synth->add_option("--out", out_dir, "output directory")->required();

  std::vector<const char*> argv{"kpd"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (cmd_train->parsed()) {
      train_src.seed = tc.seed;
      tc.category = train_src.family.empty() ? fs::path(train_src.data_dir).filename().string() : train_src.family;
      const auto meshes = train_src.load();
      const std::string log_path = train_log.empty() ? train_out + ".log.jsonl" : train_log;
      std::ofstream log(log_path);
      if (!log) throw Error("cannot write " + log_path);
      const auto t0 = std::chrono::steady_clock::now();
      auto result = train(meshes, tc, [&](const TrainLogEntry& e) {
        log << to_json(e).dump() << '\n';
        if (!quiet && (e.iteration % 100 == 0 || e.iteration + 1 == tc.iterations))
          err << "iter " << e.iteration << " total " << e.loss.total << " sim " << e.loss.sim << " kpt " << e.loss.kpt
              << "\n";
      });
      json training = train_header(tc);
      training["dataset"] = train_src.describe();
      training["diverged"] = result.diverged;
      if (!result.log.empty()) training["final"] = to_json(result.log.back());
      save_model(result.model, train_out, training);
      if (!quiet) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        err << "wrote " << train_out << " (" << secs << " s)\n";
      }
      if (result.diverged) {
        err << "error: training diverged at " << result.message << "; last finite state saved\n";
        return 2;
      }
      if (!train_prior.empty()) save_prior(fit_prior_from_model(result.model, meshes), train_prior);
      return 0;
    }

    if (cmd_keypoints->parsed()) {
      const Model model = load_model(ckpt);
      const EditableShape s = make_editable(model, load_obj(mesh_path));
      const json j = {{"keypoints", points_to_json(s.keypoints())},
                      {"num_keypoints", s.num_keypoints()},
                      {"model_checksum", model_checksum(model)}};
      emit(out_path, j.dump(1) + "\n", out);
      return 0;
    }

    if (cmd_deform->parsed()) {
      const Model model = load_model(ckpt);
      const EditableShape s = make_editable(model, load_obj(mesh_path));
      const Points target = keypoints_from_json(read_json_file(target_path));
      emit(out_path, deformed_obj(s, target), out);
      return 0;
    }

    if (cmd_eval->parsed()) {
      const Model model = load_model(ckpt);
      const AnnotationSet set = load_annotations(annotations_path);
      json report = {{"protocol", protocol}, {"num_shapes", set.shapes.size()}, {"model_checksum", model_checksum(model)}};
      if (protocol == "align") {
        Rng rng(eval_seed);
        std::vector<EvalShape> shapes;
        for (const auto& s : set.shapes) shapes.push_back(prepare_eval_shape(model, s.mesh, eval_points, rng));
        const auto rep = alignment_benchmark(shapes, all_ordered_pairs(shapes.size()));
        report["num_pairs"] = rep.pairs.size();
        report["mean_deformed_chamfer"] = rep.mean_deformed;
        report["mean_identity_chamfer"] = rep.mean_identity;
        report["ratio"] = rep.mean_identity > 0 ? rep.mean_deformed / rep.mean_identity : 0.0;
        if (!csv_path.empty()) {
          std::string csv = "source,target,deformed_chamfer,identity_chamfer\n";
          for (const auto& p : rep.pairs)
            csv += std::to_string(p.source) + "," + std::to_string(p.target) + "," + csv_number(p.deformed) + "," +
                   csv_number(p.identity) + "\n";
          write_text(csv_path, csv);
        }
      } else {
        std::vector<Points> keypoints;
        std::vector<ShapeAnnotation> annotations;
        for (const auto& s : set.shapes) {
          const InferenceShape inf = analyze_shape(model, s.mesh);
          keypoints.push_back(inf.keypoints.points);
          annotations.push_back(to_model_frame(s.annotation, inf.shape.transform));
        }
        if (protocol == "pck") {
          const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(keypoints.size())));
          if (n_train == 0 || n_train >= keypoints.size())
            throw InvalidInput("--train-fraction leaves no training or no test shapes");
          const std::vector<Points> kp_train(keypoints.begin(), keypoints.begin() + static_cast<long>(n_train));
          const std::vector<ShapeAnnotation> an_train(annotations.begin(), annotations.begin() + static_cast<long>(n_train));
          const KeypointRegressor reg = fit_keypoint_regressor(kp_train, an_train);
          const std::vector<Points> kp_test(keypoints.begin() + static_cast<long>(n_train), keypoints.end());
          const std::vector<ShapeAnnotation> an_test(annotations.begin() + static_cast<long>(n_train), annotations.end());
          json thresholds = json::array(), curve = json::array();
          for (int i = 0; i <= 10; ++i) {
            const double thr = 0.01 * i;
            thresholds.push_back(thr);
            curve.push_back(mean_pck(reg, kp_test, an_test, thr));
          }
          report["num_train"] = n_train;
          report["num_test"] = kp_test.size();
          report["thresholds"] = thresholds;
          report["pck"] = curve;
          report["pck_at_0.05"] = curve[5];
          report["regressor_rank_deficient"] = reg.rank_deficient;
        } else {
          const PartCorrelation pc = part_correlation(keypoints, annotations, radius);
          report["radius"] = radius;
          report["score"] = pc.score;
          report["per_keypoint"] = pc.per_keypoint;
          json best = json::array();
          for (int p : pc.best_part)
            best.push_back(static_cast<std::size_t>(p) < set.part_names.size() ? json(set.part_names[p]) : json(p));
          report["best_part"] = best;
          json freq = json::array();
          for (Eigen::Index k = 0; k < pc.frequency.rows(); ++k)
            freq.push_back(std::vector<double>(pc.frequency.row(k).data(), pc.frequency.row(k).data() + pc.frequency.cols()));
          report["frequency"] = freq;
        }
      }
      emit(out_path, report.dump(1) + "\n", out);
      return 0;
    }

    if (cmd_prior->parsed()) {
      const Model model = load_model(ckpt);
      save_prior(fit_prior_from_model(model, prior_src.load(), n_basis), out_path);
      return 0;
    }

    if (cmd_amplify->parsed()) {
      const Model model = load_model(ckpt);
      const PCAPrior prior = load_prior(prior_path);
      if (prior.num_keypoints != model.config.num_keypoints)
        throw InvalidInput("prior has K=" + std::to_string(prior.num_keypoints) + " but the checkpoint has K=" +
                           std::to_string(model.config.num_keypoints));
      if (!prior.model_checksum.empty() && prior.model_checksum != model_checksum(model))
        err << "warning: prior was fitted with a different checkpoint\n";
      const SweepSpec sweep = parse_sweep(sweep_text);
      const EditableShape s = make_editable(model, load_obj(mesh_path));
      fs::create_directories(out_dir);
      json manifest = {{"basis", sweep.basis}, {"mesh", mesh_path}, {"steps", json::array()}};
      for (int i = 0; i < sweep.steps; ++i) {
        const double c = sweep.steps == 1 ? sweep.min
                                           : sweep.min + (sweep.max - sweep.min) * i / static_cast<double>(sweep.steps - 1);
        const Points target = s.to_input_frame(shift_along_basis(prior, s.inference.keypoints, sweep.basis, c).points);
        char name[64];
        std::snprintf(name, sizeof name, "amplify_b%d_%03d.obj", sweep.basis, i);
        write_text((fs::path(out_dir) / name).string(), deformed_obj(s, target));
        manifest["steps"].push_back({{"file", name}, {"sigmas", c}, {"keypoints", points_to_json(target)}});
      }
      write_text((fs::path(out_dir) / "manifest.json").string(), manifest.dump(1) + "\n");
      return 0;
    }

    if (cmd_serve->parsed()) {
      Model model = load_model(ckpt);
      std::optional<PCAPrior> prior;
      if (!prior_path.empty()) prior = load_prior(prior_path);
      ServiceOptions opt;
      opt.max_upload_bytes = static_cast<std::size_t>(max_upload_mb * (1 << 20));
      Service svc(std::move(model), std::move(prior), opt);
      if (!prior_path.empty() && !svc.prior_matches())
        err << "warning: prior K does not match the checkpoint; synchronization requests will return 409\n";
      httplib::Server server;
      server.set_payload_max_length(2 * opt.max_upload_bytes + (64u << 10));
      if (!static_dir.empty() && !server.set_mount_point("/", static_dir))
        throw InvalidInput("static directory not found: " + static_dir);
      register_routes(server, svc);
      err << "listening on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
      return 0;
    }

    if (cmd_synth->parsed()) {
      const Family f = family_from_string(family);
      Rng rng(synth_seed);
      const auto shapes = generate_synthetic_family(f, count, rng);
      fs::create_directories(out_dir);
      json ann = {{"family", family},
                  {"landmark_names", shapes.front().landmark_names},
                  {"part_names", shapes.front().part_names},
                  {"shapes", json::array()}};
      Rng label_rng = Rng(synth_seed).split(1);
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "shape_%04zu.obj", i);
        save_obj(shapes[i].mesh, (fs::path(out_dir) / name).string());
        json entry = annotation_to_json(synthetic_annotation(shapes[i], static_cast<std::size_t>(labelled), label_rng));
        entry["mesh"] = name;
        json params = json::object();
        for (const auto& [k, v] : shapes[i].params) params[k] = round9(v);
        entry["params"] = params;
        ann["shapes"].push_back(entry);
      }
      write_text((fs::path(out_dir) / "annotations.json").string(), ann.dump() + "\n");
      return 0;
    }
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace kpd
