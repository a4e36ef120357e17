#pragma once

// Evaluation protocols for unsupervised keypoints:
//  - PCK of a linear regressor from unsupervised to annotated keypoints
//  - part correlation with a fixed association radius
//  - keypoint-guided pairwise alignment (Chamfer after deformation)
// plus the property metrics used on synthetic families.

#include "kpdeform/deformer.hpp"
#include "kpdeform/synthetic.hpp"

#include <map>

namespace kpd {

/// Annotations for one shape. Either part may be empty.
struct ShapeAnnotation {
  Points keypoints;            // L x 3
  std::vector<bool> present;   // L flags; empty means all present
  Points labeled_points;       // points with part labels
  std::vector<int> labels;     // parallel to labeled_points

  bool has(std::size_t l) const { return present.empty() || present[l]; }
};

// ------------------------------------------------------------- regressor

/// Linear map (with bias) from flattened unsupervised keypoints to flattened
/// annotated keypoints.
struct KeypointRegressor {
  RowMatrix coefficients;  // (3K + 1) x 3L, last row is the bias
  bool rank_deficient = false;
  bool has_bias = true;
  int num_keypoints = 0;
  int num_landmarks = 0;

  Points predict(const Points& keypoints) const {
    if (keypoints.rows() != num_keypoints) throw InvalidInput("regressor: wrong number of input keypoints");
    Eigen::RowVectorXd x(3 * num_keypoints + 1);
    x.head(3 * num_keypoints) = Eigen::Map<const Eigen::RowVectorXd>(keypoints.data(), 3 * num_keypoints);
    x(3 * num_keypoints) = 1.0;
    const Eigen::RowVectorXd y = x * coefficients;
    return Eigen::Map<const Points>(y.data(), num_landmarks, 3);
  }
};

inline Eigen::RowVectorXd flatten_with_bias(const Points& p) {
  Eigen::RowVectorXd x(p.size() + 1);
  x.head(p.size()) = Eigen::Map<const Eigen::RowVectorXd>(p.data(), p.size());
  x(p.size()) = 1.0;
  return x;
}

/// Least squares per annotated landmark, using only the training shapes
/// where that landmark is present. Rank-deficient systems get the
/// minimum-norm solution and set `rank_deficient`.
inline KeypointRegressor fit_keypoint_regressor(const std::vector<Points>& unsupervised,
                                                const std::vector<ShapeAnnotation>& annotations) {
  if (unsupervised.size() != annotations.size() || unsupervised.empty())
    throw InvalidInput("regressor: need matching, non-empty keypoint and annotation lists");
  const int k = static_cast<int>(unsupervised[0].rows());
  const int l = static_cast<int>(annotations[0].keypoints.rows());
  if (static_cast<int>(unsupervised.size()) < 3 * k + 2)
    throw InvalidInput("regressor: need at least 3K+2 = " + std::to_string(3 * k + 2) + " training shapes");
  KeypointRegressor reg;
  reg.num_keypoints = k;
  reg.num_landmarks = l;
  reg.coefficients = RowMatrix::Zero(3 * k + 1, 3 * l);
  for (int lm = 0; lm < l; ++lm) {
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < annotations.size(); ++s) {
      if (unsupervised[s].rows() != k || annotations[s].keypoints.rows() != l)
        throw InvalidInput("regressor: inconsistent keypoint counts across shapes");
      if (annotations[s].has(static_cast<std::size_t>(lm))) rows.push_back(s);
    }
    if (rows.empty()) {
      reg.rank_deficient = true;
      continue;
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), 3 * k + 1);
    Eigen::MatrixXd y(static_cast<Eigen::Index>(rows.size()), 3);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      x.row(static_cast<Eigen::Index>(r)) = flatten_with_bias(unsupervised[rows[r]]);
      y.row(static_cast<Eigen::Index>(r)) = annotations[rows[r]].keypoints.row(lm);
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(x);
    if (cod.rank() < x.cols()) reg.rank_deficient = true;
    reg.coefficients.middleCols(3 * lm, 3) = cod.solve(y);
  }
  return reg;
}

// ------------------------------------------------------------------- pck

/// Fraction of present keypoints within `threshold` of the annotation.
inline double pck(const Points& pred, const Points& gt, double threshold = 0.05, const std::vector<bool>& present = {}) {
  if (pred.rows() != gt.rows()) throw InvalidInput("pck: keypoint counts differ");
  int total = 0, hit = 0;
  for (Eigen::Index i = 0; i < gt.rows(); ++i) {
    if (!present.empty() && !present[static_cast<std::size_t>(i)]) continue;
    ++total;
    if ((pred.row(i) - gt.row(i)).norm() <= threshold) ++hit;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / total;
}

/// Mean PCK over test shapes.
inline double mean_pck(const KeypointRegressor& reg, const std::vector<Points>& unsupervised,
                       const std::vector<ShapeAnnotation>& annotations, double threshold) {
  if (unsupervised.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t s = 0; s < unsupervised.size(); ++s)
    sum += pck(reg.predict(unsupervised[s]), annotations[s].keypoints, threshold, annotations[s].present);
  return sum / static_cast<double>(unsupervised.size());
}

// ------------------------------------------------------ part correlation

struct PartCorrelation {
  double score = 0.0;                 // mean over keypoints of the best part frequency
  std::vector<double> per_keypoint;   // best frequency per keypoint
  std::vector<int> best_part;         // arg max part per keypoint
  RowMatrix frequency;                // K x num_parts association frequency
};

/// Keypoint k is associated with part l on a shape when some point labelled
/// l lies within `radius`; a keypoint may associate with several parts.
inline PartCorrelation part_correlation(const std::vector<Points>& keypoints, const std::vector<ShapeAnnotation>& shapes,
                                        double radius = 0.05) {
  if (keypoints.size() != shapes.size() || keypoints.empty())
    throw InvalidInput("part_correlation: need matching, non-empty inputs");
  const auto k = keypoints[0].rows();
  int num_parts = 0;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    if (shapes[s].labels.empty() || shapes[s].labeled_points.rows() == 0)
      throw InvalidInput("part_correlation: shape " + std::to_string(s) + " has no labelled points");
    if (shapes[s].labels.size() != static_cast<std::size_t>(shapes[s].labeled_points.rows()))
      throw InvalidInput("part_correlation: labels and points differ in length");
    if (keypoints[s].rows() != k) throw InvalidInput("part_correlation: inconsistent keypoint counts");
    for (int lab : shapes[s].labels) {
      if (lab < 0) throw InvalidInput("part_correlation: negative part label");
      num_parts = std::max(num_parts, lab + 1);
    }
  }
  PartCorrelation out;
  out.frequency = RowMatrix::Zero(k, num_parts);
  const double r2 = radius * radius;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    RowMatrix assoc = RowMatrix::Zero(k, num_parts);
    const auto& pts = shapes[s].labeled_points;
    for (Eigen::Index j = 0; j < k; ++j)
      for (Eigen::Index i = 0; i < pts.rows(); ++i)
        if ((pts.row(i) - keypoints[s].row(j)).squaredNorm() <= r2) assoc(j, shapes[s].labels[static_cast<std::size_t>(i)]) = 1.0;
    out.frequency += assoc;
  }
  out.frequency /= static_cast<double>(shapes.size());
  for (Eigen::Index j = 0; j < k; ++j) {
    Eigen::Index arg = 0;
    const double best = out.frequency.row(j).maxCoeff(&arg);
    out.per_keypoint.push_back(best);
    out.best_part.push_back(static_cast<int>(arg));
  }
  out.score = std::accumulate(out.per_keypoint.begin(), out.per_keypoint.end(), 0.0) / static_cast<double>(k);
  return out;
}

// ---------------------------------------------------- alignment benchmark

/// Held-out shape prepared for alignment: model-resolution cloud for
/// prediction plus a separate evaluation cloud with its own cage weights.
struct EvalShape {
  PreparedShape shape;
  KeypointSet keypoints;
  InfluenceMatrix influence;
  PointCloud eval_cloud;
  CageWeights eval_weights;
};

inline EvalShape prepare_eval_shape(const Model& model, const Mesh& mesh, int eval_points, Rng& rng) {
  EvalShape e;
  e.shape = prepare_shape(mesh, model.config, model.cage_template, rng);
  e.keypoints = predict_keypoints(model, e.shape.cloud);
  e.influence = compose_influence(model, e.shape.cloud, e.keypoints, e.shape.cage);
  e.eval_cloud = sample_surface(e.shape.mesh, static_cast<std::size_t>(eval_points), rng);
  e.eval_weights = mean_value_coordinates(e.eval_cloud, e.shape.cage);
  return e;
}

struct AlignmentPairResult {
  std::size_t source = 0, target = 0;
  double deformed = 0.0;
  double identity = 0.0;
};

struct AlignmentReport {
  double mean_deformed = 0.0;
  double mean_identity = 0.0;
  std::vector<AlignmentPairResult> pairs;
};

inline AlignmentReport alignment_benchmark(const std::vector<EvalShape>& shapes,
                                           const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  AlignmentReport rep;
  for (const auto& [s, t] : pairs) {
    if (s >= shapes.size() || t >= shapes.size()) throw InvalidInput("alignment pair index out of range");
    const EvalShape& src = shapes[s];
    const EvalShape& tgt = shapes[t];
    const Points x_star = deform_shape(src.eval_weights, src.shape.cage, src.influence.effective(), src.keypoints.points,
                                       tgt.keypoints.points);
    AlignmentPairResult r{s, t, chamfer_distance(x_star, tgt.eval_cloud.points),
                          chamfer_distance(src.eval_cloud.points, tgt.eval_cloud.points)};
    rep.mean_deformed += r.deformed;
    rep.mean_identity += r.identity;
    rep.pairs.push_back(r);
  }
  if (!pairs.empty()) {
    rep.mean_deformed /= static_cast<double>(pairs.size());
    rep.mean_identity /= static_cast<double>(pairs.size());
  }
  return rep;
}

inline std::vector<std::pair<std::size_t, std::size_t>> all_ordered_pairs(std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out.emplace_back(i, j);
  return out;
}

// ------------------------------------------- synthetic-family properties

struct LandmarkConsistency {
  std::vector<int> landmark;          // modal nearest landmark per keypoint
  std::vector<double> frequency;      // fraction of shapes agreeing with the mode
  double min_frequency = 0.0;
  double mean_frequency = 0.0;
};

/// For each keypoint index, how often its nearest ground-truth landmark is
/// the most common one across shapes.
inline LandmarkConsistency landmark_consistency(const std::vector<Points>& keypoints, const std::vector<Points>& landmarks) {
  if (keypoints.empty() || keypoints.size() != landmarks.size()) throw InvalidInput("landmark_consistency: bad inputs");
  const auto k = keypoints[0].rows();
  const auto l = landmarks[0].rows();
  LandmarkConsistency out;
  out.min_frequency = 1.0;
  for (Eigen::Index j = 0; j < k; ++j) {
    std::vector<int> counts(static_cast<std::size_t>(l), 0);
    for (std::size_t s = 0; s < keypoints.size(); ++s) {
      Eigen::Index nearest = 0;
      (landmarks[s].rowwise() - keypoints[s].row(j)).rowwise().squaredNorm().minCoeff(&nearest);
      ++counts[static_cast<std::size_t>(nearest)];
    }
    const auto it = std::max_element(counts.begin(), counts.end());
    out.landmark.push_back(static_cast<int>(it - counts.begin()));
    const double f = static_cast<double>(*it) / static_cast<double>(keypoints.size());
    out.frequency.push_back(f);
    out.min_frequency = std::min(out.min_frequency, f);
    out.mean_frequency += f / static_cast<double>(k);
  }
  return out;
}

/// Mean Euclidean distance from keypoints to the mesh surface.
inline double mean_surface_distance(const Points& keypoints, const Mesh& mesh) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < keypoints.rows(); ++i) sum += distance_to_mesh(keypoints.row(i).transpose(), mesh);
  return sum / static_cast<double>(keypoints.rows());
}

/// Chamfer between a keypoint set and its mirror image across x = 0.
inline double mirror_symmetry_error(const Points& keypoints) { return chamfer_distance(keypoints, mirror_x(keypoints)); }

// ------------------------------------------------------------ annotations

/// Reads {"shapes": [{"keypoints": [[x,y,z]..], "present": [..],
/// "points": [[x,y,z]..], "labels": [..], ...}, ...]}.
inline ShapeAnnotation annotation_from_json(const json& j) {
  ShapeAnnotation a;
  if (j.contains("keypoints")) a.keypoints = points_from_json(j.at("keypoints"));
  if (j.contains("present")) a.present = j.at("present").get<std::vector<bool>>();
  if (!a.present.empty() && a.present.size() != static_cast<std::size_t>(a.keypoints.rows()))
    throw InvalidInput("annotation: presence flags and keypoints differ in length");
  if (j.contains("points")) a.labeled_points = points_from_json(j.at("points"));
  if (j.contains("labels")) a.labels = j.at("labels").get<std::vector<int>>();
  if (a.labels.size() != static_cast<std::size_t>(a.labeled_points.rows()))
    throw InvalidInput("annotation: labels and points differ in length");
  return a;
}

inline json annotation_to_json(const ShapeAnnotation& a) {
  json j = {{"keypoints", points_to_json(a.keypoints)}};
  if (!a.present.empty()) j["present"] = a.present;
  if (a.labeled_points.rows() > 0) {
    j["points"] = points_to_json(a.labeled_points);
    j["labels"] = a.labels;
  }
  return j;
}

/// Annotation of a synthetic shape: its landmarks and `n` labelled surface
/// samples.
inline ShapeAnnotation synthetic_annotation(const SyntheticShape& s, std::size_t n, Rng& rng) {
  ShapeAnnotation a;
  a.keypoints = s.landmarks;
  const auto sample = sample_surface_with_faces(s.mesh, n, rng);
  a.labeled_points = sample.cloud.points;
  for (int f : sample.face_index) a.labels.push_back(s.face_part[static_cast<std::size_t>(f)]);
  return a;
}

}  // namespace kpd
