#pragma once

// Cage construction and cage-based deformation with mean value coordinates
// for closed triangle meshes.

#include "kpdeform/geom.hpp"

#include <fstream>
#include <map>

namespace kpd {

/// Closed, consistently oriented triangle mesh. Topology is shared by every
/// cage derived from the same template.
struct Cage {
  Points vertices;
  std::vector<Face> faces;

  Eigen::Index size() const { return vertices.rows(); }
};

/// Row i holds the coordinates of point i with respect to every cage vertex.
struct CageWeights {
  RowMatrix weights;

  Eigen::Index num_points() const { return weights.rows(); }
  Eigen::Index num_cage_vertices() const { return weights.cols(); }
};

// -------------------------------------------------------------- icosphere

inline Cage icosphere(int subdivisions) {
  if (subdivisions < 0) throw InvalidInput("icosphere: subdivisions must be >= 0");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                         {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                         {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back((v[static_cast<std::size_t>(a)] + v[static_cast<std::size_t>(b)]).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const int a = mid(tri[0], tri[1]), b = mid(tri[1], tri[2]), c = mid(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  Cage cage;
  cage.vertices.resize(static_cast<Eigen::Index>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i) cage.vertices.row(static_cast<Eigen::Index>(i)) = v[i].transpose();
  cage.faces = std::move(f);
  return cage;
}

// ----------------------------------------------------- shrink-wrap init

struct CageInitOptions {
  double margin = 0.05;        // stop once this close to the target
  double step = 0.05;          // fraction of the current distance to the center
  int max_iters = 100;
  double initial_scale = 1.2;  // template radius relative to the target's bounding radius
};

/// Scales the template around the target's centroid, then pulls each vertex
/// toward the centroid until it is within `margin` of some target point.
inline Cage init_cage(const PointCloud& target, const Cage& templ, const CageInitOptions& opt = {}) {
  if (target.empty()) throw InvalidInput("init_cage: empty target");
  const Vec3 center = centroid(target.points);
  double radius = 0.0;
  for (Eigen::Index i = 0; i < target.size(); ++i)
    radius = std::max(radius, (target.points.row(i).transpose() - center).norm());
  if (!(radius > 0.0)) throw InvalidInput("init_cage: target has zero extent");

  const Vec3 tc = centroid(templ.vertices);
  double templ_radius = 0.0;
  for (Eigen::Index i = 0; i < templ.size(); ++i)
    templ_radius = std::max(templ_radius, (templ.vertices.row(i).transpose() - tc).norm());

  Cage cage = templ;
  const double scale = opt.initial_scale * radius / templ_radius;
  const double margin_sq = opt.margin * opt.margin;
  for (Eigen::Index v = 0; v < cage.size(); ++v) {
    Vec3 pos = center + scale * (templ.vertices.row(v).transpose() - tc);
    for (int it = 0; it < opt.max_iters; ++it) {
      const double nearest = (target.points.rowwise() - pos.transpose()).rowwise().squaredNorm().minCoeff();
      if (nearest <= margin_sq) break;
      pos += opt.step * (center - pos);
    }
    cage.vertices.row(v) = pos.transpose();
  }
  return cage;
}

// ------------------------------------------------ mean value coordinates

namespace detail {

// Mean value coordinates of one point, following the robust closed-mesh
// construction (per-triangle spherical projection). Returns false if the
// point sits on the cage so that only a face-local interpolation applies;
// in that case `w` already holds those barycentric weights.
inline void mvc_point(const Vec3& x, const Points& cv, const std::vector<Face>& faces, Eigen::Ref<Eigen::RowVectorXd> w,
                      std::vector<double>& d, std::vector<Vec3>& u) {
  constexpr double kEps = 1e-12;
  const auto nc = cv.rows();
  w.setZero();
  for (Eigen::Index j = 0; j < nc; ++j) {
    const Vec3 diff = cv.row(j).transpose() - x;
    d[static_cast<std::size_t>(j)] = diff.norm();
    if (d[static_cast<std::size_t>(j)] < kEps) {
      w(j) = 1.0;
      return;
    }
    u[static_cast<std::size_t>(j)] = diff / d[static_cast<std::size_t>(j)];
  }

  double total = 0.0;
  for (const auto& f : faces) {
    const std::array<std::size_t, 3> id{static_cast<std::size_t>(f[0]), static_cast<std::size_t>(f[1]),
                                        static_cast<std::size_t>(f[2])};
    std::array<double, 3> theta{}, c{}, s{};
    double h = 0.0;
    for (int m = 0; m < 3; ++m) {
      const double l = (u[id[(m + 1) % 3]] - u[id[(m + 2) % 3]]).norm();
      theta[m] = 2.0 * std::asin(std::min(1.0, 0.5 * l));
      h += 0.5 * theta[m];
    }
    if (M_PI - h < 1e-10) {
      // on the triangle: 2D barycentric interpolation
      w.setZero();
      double sum = 0.0;
      for (int m = 0; m < 3; ++m) {
        const double bw = std::sin(theta[m]) * d[id[(m + 2) % 3]] * d[id[(m + 1) % 3]];
        w(f[m]) += bw;
        sum += bw;
      }
      w /= sum;
      return;
    }
    const double det = u[id[0]].dot(u[id[1]].cross(u[id[2]]));
    const double sign = det < 0.0 ? -1.0 : 1.0;
    bool coplanar = false;
    for (int m = 0; m < 3; ++m) {
      c[m] = 2.0 * std::sin(h) * std::sin(h - theta[m]) / (std::sin(theta[(m + 1) % 3]) * std::sin(theta[(m + 2) % 3])) - 1.0;
      c[m] = std::clamp(c[m], -1.0, 1.0);
      s[m] = sign * std::sqrt(1.0 - c[m] * c[m]);
      if (std::abs(s[m]) <= kEps) coplanar = true;
    }
    if (coplanar) continue;  // x outside t but in its plane: no contribution
    for (int m = 0; m < 3; ++m) {
      const int p = (m + 1) % 3, q = (m + 2) % 3;
      const double wm = (theta[m] - c[p] * theta[q] - c[q] * theta[p]) / (d[id[m]] * std::sin(theta[p]) * s[q]);
      w(f[m]) += wm;
      total += wm;
    }
  }
  if (!std::isfinite(total) || std::abs(total) < 1e-300)
    throw NumericalError("mean value coordinates: degenerate weight sum");
  w /= total;
}

inline double distance_to_cage(const Vec3& p, const Cage& cage) { return distance_to_mesh(p, cage.vertices, cage.faces); }

}  // namespace detail

/// Mean value coordinates of every point with respect to `cage`. Points lying
/// on the cage surface are nudged 1e-9 toward the cage centroid first.
inline CageWeights mean_value_coordinates(const Points& points, const Cage& cage) {
  if (cage.size() < 4 || cage.faces.empty()) throw InvalidInput("mean_value_coordinates: cage is not a closed mesh");
  CageWeights out;
  out.weights.resize(points.rows(), cage.size());
  std::vector<double> d(static_cast<std::size_t>(cage.size()));
  std::vector<Vec3> u(static_cast<std::size_t>(cage.size()));
  const Vec3 cage_center = centroid(cage.vertices);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Vec3 x = points.row(i).transpose();
    if (detail::distance_to_cage(x, cage) < 1e-9) {
      Vec3 dir = cage_center - x;
      if (dir.norm() > 0) x += 1e-9 * dir.normalized();
      if (detail::distance_to_cage(x, cage) < 1e-12)
        throw NumericalError("mean value coordinates: point " + std::to_string(i) + " lies on the cage surface");
    }
    detail::mvc_point(x, cage.vertices, cage.faces, out.weights.row(i), d, u);
  }
  return out;
}

inline CageWeights mean_value_coordinates(const PointCloud& cloud, const Cage& cage) {
  return mean_value_coordinates(cloud.points, cage);
}

/// x*_i = sum_v weights(i, v) * deformed_vertices(v). Linear in the vertices,
/// so the Jacobian with respect to them is the weight matrix.
inline Points deform(const CageWeights& weights, const Points& deformed_vertices) {
  if (weights.num_cage_vertices() != deformed_vertices.rows())
    throw InvalidInput("deform: weights have " + std::to_string(weights.num_cage_vertices()) +
                       " columns but the cage has " + std::to_string(deformed_vertices.rows()) + " vertices");
  return weights.weights * deformed_vertices;
}

/// Gradient of a loss with respect to the cage vertices given its gradient
/// with respect to the deformed points.
inline Points deform_backward(const CageWeights& weights, const Points& grad_points) {
  return weights.weights.transpose() * grad_points;
}

// ------------------------------------------------------- serialization

inline Mesh cage_mesh(const Cage& cage) { return Mesh{cage.vertices, cage.faces}; }

/// Writes the row-major little-endian float64 blob to `path` and a JSON
/// sidecar (`path` + ".json") with dimensions and source hashes.
inline void save_weights(const CageWeights& w, const std::string& path, const std::string& points_hash,
                         const std::string& cage_hash) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    for (Eigen::Index i = 0; i < w.weights.rows(); ++i)
      for (Eigen::Index j = 0; j < w.weights.cols(); ++j) {
        const std::uint64_t bits = Hasher::to_le(w.weights(i, j));
        out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
      }
  }
  json side = {{"rows", w.weights.rows()},
               {"cols", w.weights.cols()},
               {"dtype", "float64-le"},
               {"layout", "row-major"},
               {"points_hash", points_hash},
               {"cage_hash", cage_hash},
               {"blob_hash", Hasher().doubles({w.weights.data(), static_cast<std::size_t>(w.weights.size())}).hex()}};
  std::ofstream(path + ".json") << side.dump(2) << "\n";
}

struct LoadedWeights {
  CageWeights weights;
  std::string points_hash;
  std::string cage_hash;
};

inline LoadedWeights load_weights(const std::string& path) {
  std::ifstream side_in(path + ".json");
  if (!side_in) throw InvalidInput("missing weights sidecar " + path + ".json");
  json side;
  try {
    side = json::parse(side_in);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("weights sidecar: ") + e.what());
  }
  const auto rows = side.at("rows").get<Eigen::Index>();
  const auto cols = side.at("cols").get<Eigen::Index>();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path);
  LoadedWeights out;
  out.weights.weights.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      std::uint64_t bits;
      if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw InvalidInput("weights blob truncated");
      double v;
      std::memcpy(&v, &bits, sizeof v);
      out.weights.weights(i, j) = v;
    }
  const auto& w = out.weights.weights;
  if (Hasher().doubles({w.data(), static_cast<std::size_t>(w.size())}).hex() != side.value("blob_hash", ""))
    throw InvalidInput("weights blob checksum mismatch");
  out.points_hash = side.value("points_hash", "");
  out.cage_hash = side.value("cage_hash", "");
  return out;
}

}  // namespace kpd
