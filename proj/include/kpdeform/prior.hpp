#pragma once

// Linear (PCA) prior over keypoint sets. A set of K keypoints is treated as
// a 3K vector laid out k*3 + d.

#include "kpdeform/deformer.hpp"

#include <fstream>

namespace kpd {

struct PCAPrior {
  int num_keypoints = 0;
  Eigen::VectorXd mean;             // 3K
  RowMatrix basis;                  // n_basis x 3K; zero rows past `rank`
  Eigen::VectorXd singular_values;  // n_basis, decreasing
  int rank = 0;
  bool rank_deficient = false;
  std::string model_checksum;
  std::size_t num_samples = 0;

  int num_basis() const { return static_cast<int>(basis.rows()); }

  /// Per-basis standard deviation of the training coefficients.
  Eigen::VectorXd stddev() const {
    const double denom = num_samples > 1 ? std::sqrt(static_cast<double>(num_samples - 1)) : 1.0;
    return singular_values / denom;
  }
};

inline Eigen::VectorXd flatten_keypoints(const Points& p) {
  Eigen::VectorXd v(p.size());
  for (Eigen::Index k = 0; k < p.rows(); ++k)
    for (int d = 0; d < 3; ++d) v(k * 3 + d) = p(k, d);
  return v;
}

inline Points unflatten_keypoints(const Eigen::VectorXd& v) {
  if (v.size() % 3 != 0) throw InvalidInput("keypoint vector length is not a multiple of 3");
  Points p(v.size() / 3, 3);
  for (Eigen::Index k = 0; k < p.rows(); ++k)
    for (int d = 0; d < 3; ++d) p(k, d) = v(k * 3 + d);
  return p;
}

inline PCAPrior fit_pca(const std::vector<KeypointSet>& sets, int n_basis = 8) {
  if (n_basis < 1) throw InvalidInput("n_basis must be >= 1");
  if (sets.size() < static_cast<std::size_t>(n_basis) + 1)
    throw InvalidInput("fit_pca needs at least " + std::to_string(n_basis + 1) + " keypoint sets, got " +
                       std::to_string(sets.size()));
  const int k = sets.front().size();
  if (k < 1) throw InvalidInput("empty keypoint set");
  const Eigen::Index dim = 3 * k;
  RowMatrix x(static_cast<Eigen::Index>(sets.size()), dim);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].size() != k) throw InvalidInput("keypoint sets have different K");
    if (!sets[i].points.allFinite()) throw InvalidInput("non-finite keypoint in set " + std::to_string(i));
    x.row(static_cast<Eigen::Index>(i)) = flatten_keypoints(sets[i].points).transpose();
  }

  PCAPrior prior;
  prior.num_keypoints = k;
  prior.num_samples = sets.size();
  prior.mean = x.colwise().mean().transpose();
  x.rowwise() -= prior.mean.transpose();

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  const Eigen::MatrixXd v = svd.matrixV();
  // directions whose spread is at rounding level carry no information
  const double tol = 1e-10 * std::max(1.0, s.size() > 0 ? s(0) : 0.0);

  prior.basis = RowMatrix::Zero(n_basis, dim);
  prior.singular_values = Eigen::VectorXd::Zero(n_basis);
  for (int b = 0; b < n_basis && b < s.size(); ++b) {
    if (s(b) <= tol) break;
    Eigen::VectorXd dir = v.col(b);
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);  // first index on ties
    if (dir(arg) < 0) dir = -dir;
    prior.basis.row(b) = dir.transpose();
    prior.singular_values(b) = s(b);
    prior.rank = b + 1;
  }
  prior.rank_deficient = prior.rank < n_basis;
  return prior;
}

inline void check_keypoints(const PCAPrior& prior, const Points& p) {
  if (p.rows() != prior.num_keypoints || p.cols() != 3)
    throw InvalidInput("expected " + std::to_string(prior.num_keypoints) + " keypoints, got " +
                       std::to_string(p.rows()));
}

inline Eigen::VectorXd project(const PCAPrior& prior, const KeypointSet& p) {
  check_keypoints(prior, p.points);
  return prior.basis * (flatten_keypoints(p.points) - prior.mean);
}

inline KeypointSet sample_prior(const PCAPrior& prior, const Eigen::VectorXd& coefficients) {
  if (coefficients.size() != prior.num_basis())
    throw InvalidInput("expected " + std::to_string(prior.num_basis()) + " coefficients, got " +
                       std::to_string(coefficients.size()));
  return KeypointSet(unflatten_keypoints(prior.mean + prior.basis.transpose() * coefficients));
}

inline KeypointSet reconstruct(const PCAPrior& prior, const KeypointSet& p) {
  return sample_prior(prior, project(prior, p));
}

/// `p` with its coefficient along basis `b` shifted by `sigmas` standard
/// deviations; the residual outside the prior's subspace is kept, so zero
/// shift returns `p` itself.
inline KeypointSet shift_along_basis(const PCAPrior& prior, const KeypointSet& p, int b, double sigmas) {
  check_keypoints(prior, p.points);
  if (b < 0 || b >= prior.num_basis())
    throw InvalidInput("basis index " + std::to_string(b) + " out of range [0, " + std::to_string(prior.num_basis()) + ")");
  const double step = sigmas * prior.stddev()(b);
  Eigen::VectorXd v = flatten_keypoints(p.points) + step * prior.basis.row(b).transpose();
  return KeypointSet(unflatten_keypoints(v));
}

struct KeypointEdit {
  int index = 0;
  Vec3 position = Vec3::Zero();
};

/// Ridge solve for the coefficients that best explain the edited keypoints,
/// then the edits are written back exactly. Unedited entries of `p` only fix K.
inline KeypointSet synchronize(const PCAPrior& prior, const KeypointSet& p, const std::vector<KeypointEdit>& edits,
                               double lambda = 1e-4) {
  check_keypoints(prior, p.points);
  if (edits.empty()) throw InvalidInput("synchronize needs at least one edit");
  std::vector<int> order;  // distinct indices; a later edit of the same index wins
  std::map<int, Vec3> target;
  for (const auto& e : edits) {
    if (e.index < 0 || e.index >= prior.num_keypoints)
      throw InvalidInput("edit index " + std::to_string(e.index) + " out of range [0, " +
                         std::to_string(prior.num_keypoints) + ")");
    if (!e.position.allFinite()) throw InvalidInput("non-finite edit position");
    if (!target.count(e.index)) order.push_back(e.index);
    target[e.index] = e.position;
  }
  const int nb = prior.num_basis();
  const Eigen::Index rows = 3 * static_cast<Eigen::Index>(order.size());
  Eigen::MatrixXd a(rows, nb);
  Eigen::VectorXd r(rows);
  for (std::size_t i = 0; i < order.size(); ++i)
    for (int d = 0; d < 3; ++d) {
      const Eigen::Index row = static_cast<Eigen::Index>(i) * 3 + d;
      const Eigen::Index col = static_cast<Eigen::Index>(order[i]) * 3 + d;
      a.row(row) = prior.basis.col(col).transpose();
      r(row) = target[order[i]](d) - prior.mean(col);
    }
  const Eigen::MatrixXd normal = a.transpose() * a + lambda * Eigen::MatrixXd::Identity(nb, nb);
  const Eigen::VectorXd z = normal.ldlt().solve(a.transpose() * r);
  KeypointSet out = sample_prior(prior, z);
  for (const auto& [idx, pos] : target) out.points.row(idx) = pos.transpose();
  return out;
}

inline json prior_to_json(const PCAPrior& prior) {
  json basis = json::array();
  for (Eigen::Index b = 0; b < prior.basis.rows(); ++b)
    basis.push_back(std::vector<double>(prior.basis.row(b).data(), prior.basis.row(b).data() + prior.basis.cols()));
  return json{{"format", "kpdeform-prior"},
              {"version", 1},
              {"num_keypoints", prior.num_keypoints},
              {"num_basis", prior.num_basis()},
              {"num_samples", prior.num_samples},
              {"rank", prior.rank},
              {"rank_deficient", prior.rank_deficient},
              {"model_checksum", prior.model_checksum},
              {"mean", std::vector<double>(prior.mean.data(), prior.mean.data() + prior.mean.size())},
              {"singular_values", std::vector<double>(prior.singular_values.data(),
                                                      prior.singular_values.data() + prior.singular_values.size())},
              {"basis", basis}};
}

inline PCAPrior prior_from_json(const json& j) {
  try {
    if (j.at("format") != "kpdeform-prior") throw InvalidInput("not a prior file");
    PCAPrior p;
    p.num_keypoints = j.at("num_keypoints").get<int>();
    p.num_samples = j.value("num_samples", std::size_t{0});
    p.rank = j.at("rank").get<int>();
    p.rank_deficient = j.at("rank_deficient").get<bool>();
    p.model_checksum = j.value("model_checksum", std::string());
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto sv = j.at("singular_values").get<std::vector<double>>();
    const auto rows = j.at("basis").get<std::vector<std::vector<double>>>();
    const std::size_t dim = 3 * static_cast<std::size_t>(p.num_keypoints);
    if (p.num_keypoints < 1 || mean.size() != dim || rows.size() != sv.size() || rows.empty())
      throw InvalidInput("prior dimensions are inconsistent");
    p.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(dim));
    p.singular_values = Eigen::Map<const Eigen::VectorXd>(sv.data(), static_cast<Eigen::Index>(sv.size()));
    p.basis.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t b = 0; b < rows.size(); ++b) {
      if (rows[b].size() != dim) throw InvalidInput("prior basis row has wrong length");
      for (std::size_t c = 0; c < dim; ++c) p.basis(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) = rows[b][c];
    }
    if (!p.mean.allFinite() || !p.basis.allFinite() || !p.singular_values.allFinite())
      throw InvalidInput("prior contains non-finite values");
    return p;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed prior: ") + e.what());
  }
}

inline void save_prior(const PCAPrior& prior, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << prior_to_json(prior).dump(1) << '\n';
}

inline PCAPrior load_prior(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open prior " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(std::string("prior is not valid JSON: ") + e.what(), 0);
  }
  return prior_from_json(j);
}

/// Keypoints predicted for every shape, stacked into a prior.
inline PCAPrior fit_prior_from_model(const Model& model, const std::vector<Mesh>& meshes, int n_basis = 8) {
  std::vector<KeypointSet> sets;
  sets.reserve(meshes.size());
  for (const auto& m : meshes) sets.push_back(analyze_shape(model, m).keypoints);
  PCAPrior p = fit_pca(sets, n_basis);
  p.model_checksum = model_checksum(model);
  return p;
}

}  // namespace kpd
