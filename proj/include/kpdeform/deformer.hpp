#pragma once

// Keypoint-driven cage deformation model.
//
//   keypoints      p  = Phi(x)             (shared encoder for source and target)
//   influence      W  = (W_C + Gamma(x)) . mask     C x K, mask keeps the
//                                                   floor(C/K) cage vertices
//                                                   nearest each keypoint
//   deformed cage  c* = c + W (p' - p)
//   deformed shape x* = MVC(x, c) c*
//
// Training aligns random source/target pairs with
//   L = chamfer(x*, x') + a_kpt chamfer(p, FPS(x, J)) + a_inf |W_I|_F^2

#include "kpdeform/cage.hpp"
#include "kpdeform/geom.hpp"
#include "kpdeform/net.hpp"

#include <functional>
#include <numeric>
#include <optional>

namespace kpd {

struct NetConfig {
  std::vector<int> encoder_widths{64, 128, 256};
  int head_hidden = 128;
  double keypoint_bound = 0.6;
  double keypoint_init_std = 0.05;
};

struct ModelConfig {
  int num_keypoints = 12;
  int num_points = 1024;
  int cage_subdivisions = 1;
  NetConfig net;
  CageInitOptions cage_init;
  std::uint64_t sample_seed = 0;  // surface sampling at inference time
  std::string category = "unnamed";
};

struct KeypointSet {
  Points points;  // K x 3; row index is the keypoint's identity

  KeypointSet() = default;
  explicit KeypointSet(Points p) : points(std::move(p)) {}
  int size() const { return static_cast<int>(points.rows()); }
};

struct InfluenceMatrix {
  RowMatrix canonical;  // W_C
  RowMatrix offset;     // W_I
  RowMatrix mask;       // 1 where a cage vertex is among the M nearest to the keypoint

  RowMatrix effective() const { return (canonical + offset).cwiseProduct(mask); }
  int max_per_column() const { return static_cast<int>(mask.colwise().sum().maxCoeff()); }
};

class Model {
 public:
  ModelConfig config;
  Cage cage_template;
  PointEncoder keypoint_encoder;
  Head keypoint_head;
  PointEncoder influence_encoder;
  Head influence_head;
  Tensor canonical_influence;  // C x K

  static Model create(const ModelConfig& cfg, Rng& rng) {
    Model m;
    m.config = cfg;
    m.cage_template = icosphere(cfg.cage_subdivisions);
    const int k = cfg.num_keypoints;
    const int c = static_cast<int>(m.cage_template.size());
    if (k < 1) throw InvalidInput("number of keypoints must be >= 1");
    if (c / k < 1) throw InvalidInput("more keypoints than cage vertices (M = floor(C/K) < 1)");
    m.keypoint_encoder = PointEncoder("keypoint_encoder", cfg.net.encoder_widths);
    m.keypoint_head = Head("keypoint_head", m.keypoint_encoder.feature_size(), cfg.net.head_hidden, 3 * k,
                           cfg.net.keypoint_bound);
    m.influence_encoder = PointEncoder("influence_encoder", cfg.net.encoder_widths);
    m.influence_head = Head("influence_head", m.influence_encoder.feature_size(), cfg.net.head_hidden, c * k, 0.0);
    m.canonical_influence = Tensor("canonical_influence", {c, k});
    m.keypoint_encoder.init(rng);
    m.keypoint_head.init(rng, cfg.net.keypoint_init_std);
    m.influence_encoder.init(rng);
    m.influence_head.init(rng, 0.0);  // identity deformation at start
    return m;
  }

  int num_keypoints() const { return config.num_keypoints; }
  int num_cage_vertices() const { return static_cast<int>(cage_template.size()); }
  int influence_support() const { return num_cage_vertices() / num_keypoints(); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Tensor* t : keypoint_encoder.parameters()) out.push_back(t);
    for (Tensor* t : keypoint_head.parameters()) out.push_back(t);
    for (Tensor* t : influence_encoder.parameters()) out.push_back(t);
    for (Tensor* t : influence_head.parameters()) out.push_back(t);
    out.push_back(&canonical_influence);
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }
  void zero_grad() {
    for (Tensor* t : parameters()) t->zero_grad();
  }
};

// ------------------------------------------------------- per-shape data

struct PreparedShape {
  Mesh mesh;  // unit-box normalized
  UnitBoxTransform transform;
  PointCloud cloud;
  Cage cage;
  CageWeights cloud_weights;
};

/// Normalizes, samples `num_points`, shrink-wraps the cage and computes the
/// cloud's cage coordinates.
inline PreparedShape prepare_shape(const Mesh& mesh, const ModelConfig& cfg, const Cage& templ, Rng& rng) {
  validate_mesh(mesh);
  PreparedShape s;
  std::tie(s.mesh, s.transform) = normalize_unit_box(mesh);
  s.cloud = sample_surface(s.mesh, static_cast<std::size_t>(cfg.num_points), rng);
  s.cage = init_cage(s.cloud, templ, cfg.cage_init);
  s.cloud_weights = mean_value_coordinates(s.cloud, s.cage);
  return s;
}

// ---------------------------------------------------------- operations

struct KeypointTrace {
  EncoderTrace encoder;
  HeadTrace head;
};

inline KeypointSet predict_keypoints(const Model& model, const PointCloud& x, KeypointTrace* trace = nullptr) {
  if (x.empty()) throw InvalidInput("predict_keypoints: empty point cloud");
  const Eigen::VectorXd f = model.keypoint_encoder.forward(x.points, trace ? &trace->encoder : nullptr);
  const Eigen::VectorXd y = model.keypoint_head.forward(f, trace ? &trace->head : nullptr);
  return KeypointSet(Eigen::Map<const Points>(y.data(), model.num_keypoints(), 3));
}

/// For each keypoint column, 1 for the `m` cage vertices nearest to it
/// (ties to the lower vertex index), 0 elsewhere.
inline RowMatrix influence_mask(const Points& cage_vertices, const Points& keypoints, int m) {
  const auto c = cage_vertices.rows();
  const auto k = keypoints.rows();
  if (m < 1) throw InvalidInput("influence support M must be >= 1 (K > C?)");
  RowMatrix mask = RowMatrix::Zero(c, k);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(c));
  std::vector<double> dist(static_cast<std::size_t>(c));
  for (Eigen::Index j = 0; j < k; ++j) {
    for (Eigen::Index v = 0; v < c; ++v) dist[static_cast<std::size_t>(v)] = (cage_vertices.row(v) - keypoints.row(j)).squaredNorm();
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)]; });
    for (int r = 0; r < std::min<int>(m, static_cast<int>(c)); ++r) mask(order[static_cast<std::size_t>(r)], j) = 1.0;
  }
  return mask;
}

struct InfluenceTrace {
  EncoderTrace encoder;
  HeadTrace head;
};

inline InfluenceMatrix compose_influence(const Model& model, const PointCloud& x, const KeypointSet& p, const Cage& cage,
                                         InfluenceTrace* trace = nullptr) {
  const int c = model.num_cage_vertices(), k = model.num_keypoints();
  if (cage.size() != c) throw InvalidInput("compose_influence: cage has the wrong number of vertices");
  if (p.size() != k) throw InvalidInput("compose_influence: wrong number of keypoints");
  InfluenceMatrix w;
  w.canonical = model.canonical_influence.mat();
  const Eigen::VectorXd f = model.influence_encoder.forward(x.points, trace ? &trace->encoder : nullptr);
  const Eigen::VectorXd y = model.influence_head.forward(f, trace ? &trace->head : nullptr);
  w.offset = Eigen::Map<const RowMatrix>(y.data(), c, k);
  w.mask = influence_mask(cage.vertices, p.points, c / k);
  return w;
}

/// c* = c + W (p_target - p)
inline Points skin_cage(const Points& cage_vertices, const RowMatrix& w, const Points& p, const Points& p_target) {
  if (w.rows() != cage_vertices.rows() || w.cols() != p.rows() || p.rows() != p_target.rows())
    throw InvalidInput("skin_cage: dimension mismatch");
  return cage_vertices + w * (p_target - p);
}

struct SkinGradients {
  RowMatrix w;  // C x K
  Points dp;    // K x 3; d/dp_target, and the negative of d/dp
};

inline SkinGradients skin_cage_backward(const RowMatrix& w, const Points& dp, const Points& grad_cage) {
  return {grad_cage * dp.transpose(), w.transpose() * grad_cage};
}

inline Points deform_shape(const CageWeights& weights, const Cage& cage, const RowMatrix& w, const Points& p,
                           const Points& p_target) {
  return deform(weights, skin_cage(cage.vertices, w, p, p_target));
}

struct RegularizerResult {
  double value = 0.0;
  Points grad;  // d value / d p
};

/// Chamfer distance between the keypoints and a fresh farthest-point subset
/// of the cloud (random start drawn from `rng`).
inline RegularizerResult fps_regularizer(const Points& p, const PointCloud& x, int j, Rng& rng) {
  const auto q = farthest_point_sample(x.points, static_cast<std::size_t>(j), rng);
  auto r = chamfer_distance_with_grad(p, q.points);
  return {r.value, std::move(r.grad_a)};
}

struct LossWeights {
  double kpt = 1.0;
  double inf = 1e-6;
  bool kpt_on_target = false;
};

struct LossTerms {
  double sim = 0.0;
  double kpt = 0.0;
  double inf = 0.0;
  double total = 0.0;
};

inline LossTerms combine_losses(double sim, double kpt, double inf, const LossWeights& w) {
  LossTerms t{sim, kpt, inf, sim + w.kpt * kpt + w.inf * inf};
  if (!std::isfinite(sim)) throw NumericalError("similarity loss is not finite");
  if (!std::isfinite(kpt)) throw NumericalError("keypoint regularizer is not finite");
  if (!std::isfinite(inf)) throw NumericalError("influence regularizer is not finite");
  return t;
}

/// Weighted three-term objective from already computed pieces.
inline LossTerms total_loss(const Points& x_star, const Points& x_target, const Points& p, const Points& fps_points,
                            const RowMatrix& influence_offset, const LossWeights& w) {
  return combine_losses(chamfer_distance(x_star, x_target), chamfer_distance(p, fps_points),
                        influence_offset.squaredNorm(), w);
}

/// One source/target alignment step: forward, loss and (optionally)
/// accumulation of `grad_scale * dL/dtheta` into the model's gradients.
inline LossTerms pair_step(Model& model, const PreparedShape& src, const PreparedShape& tgt, const LossWeights& lw,
                           int num_farthest, Rng& rng, bool backward, double grad_scale = 1.0) {
  KeypointTrace src_trace, tgt_trace;
  InfluenceTrace inf_trace;
  const KeypointSet p = predict_keypoints(model, src.cloud, &src_trace);
  const KeypointSet pt = predict_keypoints(model, tgt.cloud, &tgt_trace);
  const InfluenceMatrix infl = compose_influence(model, src.cloud, p, src.cage, &inf_trace);
  const RowMatrix w = infl.effective();
  const Points dp = pt.points - p.points;
  const Points cage_star = src.cage.vertices + w * dp;
  const Points x_star = deform(src.cloud_weights, cage_star);

  auto sim = chamfer_distance_with_grad(x_star, tgt.cloud.points, backward);
  RegularizerResult kpt = fps_regularizer(p.points, src.cloud, num_farthest, rng);
  RegularizerResult kpt_t;
  if (lw.kpt_on_target) {
    kpt_t = fps_regularizer(pt.points, tgt.cloud, num_farthest, rng);
    kpt.value += kpt_t.value;
  }
  const LossTerms terms = combine_losses(sim.value, kpt.value, infl.offset.squaredNorm(), lw);
  if (!backward) return terms;

  const Points g_cage = deform_backward(src.cloud_weights, sim.grad_a) * grad_scale;  // C x 3
  const SkinGradients gs = skin_cage_backward(w, dp, g_cage);
  const RowMatrix g_w = gs.w.cwiseProduct(infl.mask);  // mask is constant in backward
  const Points& g_dp = gs.dp;
  Points g_p = -g_dp + (lw.kpt * grad_scale) * kpt.grad;
  Points g_pt = g_dp;
  if (lw.kpt_on_target) g_pt += (lw.kpt * grad_scale) * kpt_t.grad;

  model.canonical_influence.grad_mat() += g_w;
  const RowMatrix g_offset = g_w + (2.0 * lw.inf * grad_scale) * infl.offset;

  auto flat = [](const auto& m) {
    Eigen::VectorXd v(m.size());
    for (Eigen::Index r = 0, i = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v(i++) = m(r, c);
    return v;
  };
  model.influence_encoder.backward(inf_trace.encoder, model.influence_head.backward(inf_trace.head, flat(g_offset)));
  model.keypoint_encoder.backward(src_trace.encoder, model.keypoint_head.backward(src_trace.head, flat(g_p)));
  model.keypoint_encoder.backward(tgt_trace.encoder, model.keypoint_head.backward(tgt_trace.head, flat(g_pt)));
  return terms;
}

// ------------------------------------------------------------- training

struct TrainConfig {
  int num_keypoints = 12;
  int num_farthest = 0;  // 0 means 2K
  int num_points = 1024;
  int iterations = 2000;
  int batch_size = 1;
  double lr = 1e-3;
  double alpha_kpt = 1.0;
  double alpha_inf = 1e-6;
  bool kpt_on_target = false;
  std::uint64_t seed = 0;
  std::string category = "unnamed";
  NetConfig net;
  CageInitOptions cage_init;
  int cage_subdivisions = 1;

  int farthest() const { return num_farthest > 0 ? num_farthest : 2 * num_keypoints; }
  ModelConfig model_config() const {
    ModelConfig m;
    m.num_keypoints = num_keypoints;
    m.num_points = num_points;
    m.cage_subdivisions = cage_subdivisions;
    m.net = net;
    m.cage_init = cage_init;
    m.category = category;
    return m;
  }
  LossWeights loss_weights() const { return {alpha_kpt, alpha_inf, kpt_on_target}; }
};

struct TrainLogEntry {
  int iteration = 0;
  LossTerms loss;
};

inline json to_json(const TrainLogEntry& e) {
  return {{"iteration", e.iteration}, {"L_sim", e.loss.sim}, {"L_kpt", e.loss.kpt}, {"L_inf", e.loss.inf}, {"total", e.loss.total}};
}

struct TrainResult {
  Model model;
  std::vector<TrainLogEntry> log;
  bool diverged = false;
  std::string message;
};

inline std::vector<PreparedShape> prepare_dataset(const std::vector<Mesh>& meshes, const ModelConfig& cfg,
                                                  const Cage& templ, std::uint64_t seed) {
  std::vector<PreparedShape> out;
  out.reserve(meshes.size());
  const Rng base(seed);
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    Rng r = base.split(1000 + i);
    out.push_back(prepare_shape(meshes[i], cfg, templ, r));
  }
  return out;
}

/// Deterministic given the config seed. On a non-finite loss the returned
/// model is the last finite state and `diverged` is set.
inline TrainResult train(const std::vector<Mesh>& dataset, const TrainConfig& cfg,
                         const std::function<void(const TrainLogEntry&)>& on_step = {}) {
  if (dataset.size() < 2) throw InvalidInput("training needs at least two shapes");
  if (cfg.batch_size < 1 || cfg.iterations < 0) throw InvalidInput("invalid batch size or iteration count");
  const Rng root(cfg.seed);
  Rng init_rng = root.split(0);
  TrainResult result{Model::create(cfg.model_config(), init_rng), {}, false, {}};
  Model& model = result.model;
  const auto shapes = prepare_dataset(dataset, model.config, model.cage_template, cfg.seed);
  if (cfg.farthest() > model.config.num_points) throw InvalidInput("more farthest points than cloud points");

  AdamState adam;
  adam.lr = cfg.lr;
  Rng rng = root.split(1);
  const auto params = model.parameters();
  const LossWeights lw = cfg.loss_weights();
  const double scale = 1.0 / cfg.batch_size;
  auto snapshot = [&] {
    std::vector<std::vector<double>> v;
    for (const Tensor* t : params) v.push_back(t->values);
    return v;
  };
  auto last_good = snapshot();  // parameters whose loss was last seen finite
  for (int it = 0; it < cfg.iterations; ++it) {
    auto current = snapshot();
    model.zero_grad();
    LossTerms mean{};
    try {
      for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t s = rng.index(shapes.size());
        std::size_t t = rng.index(shapes.size() - 1);
        if (t >= s) ++t;
        const LossTerms l = pair_step(model, shapes[s], shapes[t], lw, cfg.farthest(), rng, true, scale);
        mean.sim += scale * l.sim;
        mean.kpt += scale * l.kpt;
        mean.inf += scale * l.inf;
        mean.total += scale * l.total;
      }
      last_good = std::move(current);
      adam_step(adam, params);
    } catch (const NumericalError& e) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->values = last_good[i];
      model.zero_grad();
      result.diverged = true;
      result.message = "iteration " + std::to_string(it) + ": " + e.what();
      return result;
    }
    result.log.push_back({it, mean});
    if (on_step) on_step(result.log.back());
  }
  return result;
}

// ------------------------------------------------------------ checkpoint

inline json model_header(const Model& m) {
  const auto& c = m.config;
  return {{"category", c.category},
          {"K", c.num_keypoints},
          {"C", m.num_cage_vertices()},
          {"N", c.num_points},
          {"sample_seed", c.sample_seed},
          {"encoder_widths", c.net.encoder_widths},
          {"head_hidden", c.net.head_hidden},
          {"keypoint_bound", c.net.keypoint_bound},
          {"keypoint_init_std", c.net.keypoint_init_std},
          {"cage_template", {{"type", "icosphere"}, {"subdivisions", c.cage_subdivisions}}},
          {"cage_init",
           {{"margin", c.cage_init.margin},
            {"step", c.cage_init.step},
            {"max_iters", c.cage_init.max_iters},
            {"initial_scale", c.cage_init.initial_scale}}}};
}

inline json train_header(const TrainConfig& t) {
  return {{"iterations", t.iterations}, {"batch_size", t.batch_size}, {"lr", t.lr},
          {"alpha_kpt", t.alpha_kpt},   {"alpha_inf", t.alpha_inf},   {"J", t.farthest()},
          {"seed", t.seed},             {"kpt_on_target", t.kpt_on_target}};
}

inline void save_model(const Model& model, const std::string& path, const json& training = json::object()) {
  json header = model_header(model);
  header["training"] = training;
  write_checkpoint(path, header, model.parameters());
}

inline Model load_model(const std::string& path) {
  const CheckpointBlob blob = read_checkpoint(path);
  const json& h = blob.header;
  ModelConfig cfg;
  try {
    cfg.category = h.at("category").get<std::string>();
    cfg.num_keypoints = h.at("K").get<int>();
    cfg.num_points = h.at("N").get<int>();
    cfg.sample_seed = h.at("sample_seed").get<std::uint64_t>();
    cfg.net.encoder_widths = h.at("encoder_widths").get<std::vector<int>>();
    cfg.net.head_hidden = h.at("head_hidden").get<int>();
    cfg.net.keypoint_bound = h.at("keypoint_bound").get<double>();
    cfg.net.keypoint_init_std = h.value("keypoint_init_std", cfg.net.keypoint_init_std);
    cfg.cage_subdivisions = h.at("cage_template").at("subdivisions").get<int>();
    const auto& ci = h.at("cage_init");
    cfg.cage_init = {ci.at("margin").get<double>(), ci.at("step").get<double>(), ci.at("max_iters").get<int>(),
                     ci.at("initial_scale").get<double>()};
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("checkpoint header: ") + e.what());
  }
  Rng dummy(0);
  Model m = Model::create(cfg, dummy);
  auto params = m.parameters();
  if (params.size() != blob.tensors.size()) throw InvalidInput("checkpoint tensor count does not match the architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != blob.tensors[i].first || params[i]->size() != blob.tensors[i].second.size())
      throw InvalidInput("checkpoint tensor '" + blob.tensors[i].first + "' does not match the architecture");
    params[i]->values = blob.tensors[i].second;
  }
  if (h.at("C").get<int>() != m.num_cage_vertices()) throw InvalidInput("checkpoint cage size mismatch");
  return m;
}

inline std::string model_checksum(const Model& m) {
  Hasher h;
  for (const Tensor* t : m.parameters()) h.doubles(t->values);
  return h.hex();
}

// ------------------------------------------------------------- inference

/// Everything needed to deform one mesh with a trained model. Coordinates
/// are in the normalized frame; `shape.transform` maps back.
struct InferenceShape {
  PreparedShape shape;
  CageWeights vertex_weights;
  KeypointSet keypoints;
  InfluenceMatrix influence;
};

inline InferenceShape analyze_shape(const Model& model, const Mesh& mesh) {
  InferenceShape s;
  Rng rng(model.config.sample_seed);
  s.shape = prepare_shape(mesh, model.config, model.cage_template, rng);
  s.vertex_weights = mean_value_coordinates(s.shape.mesh.vertices, s.shape.cage);
  s.keypoints = predict_keypoints(model, s.shape.cloud);
  s.influence = compose_influence(model, s.shape.cloud, s.keypoints, s.shape.cage);
  return s;
}

/// Deformed mesh vertices (normalized frame) for target keypoints given in
/// the normalized frame. Always starts from the original shape.
inline Points deform_mesh_vertices(const InferenceShape& s, const Points& target_keypoints) {
  if (target_keypoints.rows() != s.keypoints.points.rows())
    throw InvalidInput("expected " + std::to_string(s.keypoints.points.rows()) + " target keypoints, got " +
                       std::to_string(target_keypoints.rows()));
  if (!target_keypoints.allFinite()) throw InvalidInput("target keypoints must be finite");
  return deform_shape(s.vertex_weights, s.shape.cage, s.influence.effective(), s.keypoints.points, target_keypoints);
}

}  // namespace kpd
