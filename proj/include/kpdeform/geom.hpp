#pragma once

// Mesh and point-cloud primitives.

#include "kpdeform/common.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace kpd {

struct Mesh {
  Points vertices;
  std::vector<Face> faces;

  Eigen::Index num_vertices() const { return vertices.rows(); }
  std::size_t num_faces() const { return faces.size(); }
};

struct PointCloud {
  Points points;

  PointCloud() = default;
  explicit PointCloud(Points p) : points(std::move(p)) {}
  Eigen::Index size() const { return points.rows(); }
  bool empty() const { return points.rows() == 0; }
};

/// normalized = scale * original + translation
struct UnitBoxTransform {
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();

  Points apply(const Points& p) const {
    Points out = p * scale;
    out.rowwise() += translation.transpose();
    return out;
  }
  Points invert(const Points& p) const {
    Points out = p;
    out.rowwise() -= translation.transpose();
    return out / scale;
  }
};

inline void validate_mesh(const Mesh& mesh) {
  if (mesh.vertices.rows() == 0 || mesh.faces.empty()) throw InvalidInput("mesh is empty");
  const int n = static_cast<int>(mesh.vertices.rows());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    for (int i : t)
      if (i < 0 || i >= n) throw InvalidInput("face " + std::to_string(f) + " index out of range");
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
      throw InvalidInput("face " + std::to_string(f) + " is degenerate");
  }
  if (!mesh.vertices.allFinite()) throw InvalidInput("mesh has non-finite vertices");
}

// ---------------------------------------------------------------- OBJ I/O

/// Parses ASCII OBJ `v` and `f` records. Polygons are fan-triangulated from
/// their first corner; negative indices count back from the latest vertex.
inline Mesh parse_obj(std::istream& in) {
  Mesh mesh;
  std::vector<Vec3> verts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z())) throw ParseError("malformed vertex record", lineno);
      if (!v.allFinite()) throw ParseError("non-finite vertex coordinate", lineno);
      verts.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        const auto slash = tok.find('/');
        const std::string head = tok.substr(0, slash);
        char* end = nullptr;
        const long raw = std::strtol(head.c_str(), &end, 10);
        if (head.empty() || *end != '\0' || raw == 0) throw ParseError("malformed face index '" + tok + "'", lineno);
        const long resolved = raw > 0 ? raw - 1 : static_cast<long>(verts.size()) + raw;
        if (resolved < 0 || resolved >= static_cast<long>(verts.size()))
          throw ParseError("face index " + std::to_string(raw) + " out of range", lineno);
        idx.push_back(static_cast<int>(resolved));
      }
      if (idx.size() < 3) throw ParseError("face with fewer than 3 corners", lineno);
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) {
        Face f{idx[0], idx[k], idx[k + 1]};
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) throw ParseError("degenerate face", lineno);
        mesh.faces.push_back(f);
      }
    }
    // vn, vt, g, o, s, usemtl, mtllib: ignored
  }
  if (verts.empty() || mesh.faces.empty()) throw ParseError("mesh is empty", 0);
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  return mesh;
}

inline Mesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path);
  return parse_obj(in);
}

inline std::string format_obj_vertices(const Points& v) {
  std::string out;
  char buf[96];
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v(i, 0), v(i, 1), v(i, 2));
    out += buf;
  }
  return out;
}

inline std::string format_obj(const Mesh& mesh) {
  std::string out = format_obj_vertices(mesh.vertices);
  char buf[64];
  for (const auto& f : mesh.faces) {
    std::snprintf(buf, sizeof buf, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    out += buf;
  }
  return out;
}

inline void save_obj(const Mesh& mesh, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << format_obj(mesh);
}

// ---------------------------------------------------------- normalization

inline std::pair<Mesh, UnitBoxTransform> normalize_unit_box(const Mesh& mesh) {
  if (mesh.vertices.rows() == 0) throw InvalidInput("mesh is empty");
  const Vec3 lo = mesh.vertices.colwise().minCoeff().transpose();
  const Vec3 hi = mesh.vertices.colwise().maxCoeff().transpose();
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0)) throw InvalidInput("mesh has zero extent");
  UnitBoxTransform tf;
  tf.scale = 1.0 / extent;
  tf.translation = -tf.scale * (0.5 * (lo + hi));
  Mesh out = mesh;
  out.vertices = tf.apply(mesh.vertices);
  return {std::move(out), tf};
}

// ------------------------------------------------------- surface sampling

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

struct SurfaceSample {
  PointCloud cloud;
  std::vector<int> face_index;  // source triangle of each point
};

/// Area-weighted triangle choice, uniform barycentric position within it.
inline SurfaceSample sample_surface_with_faces(const Mesh& mesh, std::size_t n, Rng& rng) {
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    total += triangle_area(mesh.vertices.row(t[0]), mesh.vertices.row(t[1]), mesh.vertices.row(t[2]));
    cumulative[f] = total;
  }
  if (!(total > 0.0)) throw InvalidInput("mesh has zero surface area");

  SurfaceSample out;
  out.cloud.points.resize(static_cast<Eigen::Index>(n), 3);
  out.face_index.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    if (it == cumulative.end()) --it;
    const auto f = static_cast<std::size_t>(it - cumulative.begin());
    const double r1 = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    const auto& t = mesh.faces[f];
    const Vec3 p = (1.0 - r1) * mesh.vertices.row(t[0]).transpose() +
                   r1 * (1.0 - r2) * mesh.vertices.row(t[1]).transpose() +
                   r1 * r2 * mesh.vertices.row(t[2]).transpose();
    out.cloud.points.row(static_cast<Eigen::Index>(i)) = p.transpose();
    out.face_index[i] = static_cast<int>(f);
  }
  return out;
}

inline PointCloud sample_surface(const Mesh& mesh, std::size_t n, Rng& rng) {
  return sample_surface_with_faces(mesh, n, rng).cloud;
}

// ------------------------------------------------------ chamfer distance

struct ChamferResult {
  double value = 0.0;
  Points grad_a;
  Points grad_b;
};

namespace detail {
// Nearest neighbour in both directions from one pass over the pair matrix.
inline void nearest_both_ways(const Points& a, const Points& b, std::vector<int>& nn_ab, std::vector<double>& d_ab,
                              std::vector<int>& nn_ba, std::vector<double>& d_ba) {
  const auto na = a.rows(), nb = b.rows();
  nn_ab.assign(na, -1);
  d_ab.assign(na, std::numeric_limits<double>::infinity());
  nn_ba.assign(nb, -1);
  d_ba.assign(nb, std::numeric_limits<double>::infinity());
  for (Eigen::Index i = 0; i < na; ++i) {
    const double ax = a(i, 0), ay = a(i, 1), az = a(i, 2);
    for (Eigen::Index j = 0; j < nb; ++j) {
      const double dx = ax - b(j, 0), dy = ay - b(j, 1), dz = az - b(j, 2);
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < d_ab[i]) {
        d_ab[i] = d;
        nn_ab[i] = static_cast<int>(j);
      }
      if (d < d_ba[j]) {
        d_ba[j] = d;
        nn_ba[j] = static_cast<int>(i);
      }
    }
  }
}
}  // namespace detail

/// Mean squared nearest-neighbour distance a->b plus b->a. Gradients hold the
/// nearest-neighbour assignment fixed at the evaluation point.
inline ChamferResult chamfer_distance_with_grad(const Points& a, const Points& b, bool want_grad = true) {
  if (a.rows() == 0 || b.rows() == 0) throw InvalidInput("chamfer_distance: empty point cloud");
  std::vector<int> nn_ab, nn_ba;
  std::vector<double> d_ab, d_ba;
  detail::nearest_both_ways(a, b, nn_ab, d_ab, nn_ba, d_ba);
  const double inv_a = 1.0 / static_cast<double>(a.rows());
  const double inv_b = 1.0 / static_cast<double>(b.rows());

  ChamferResult r;
  double sa = 0.0, sb = 0.0;
  for (double d : d_ab) sa += d;
  for (double d : d_ba) sb += d;
  r.value = sa * inv_a + sb * inv_b;
  // non-finite inputs leave some neighbours unassigned; callers report the value
  if (!want_grad || !std::isfinite(r.value)) return r;

  r.grad_a = Points::Zero(a.rows(), 3);
  r.grad_b = Points::Zero(b.rows(), 3);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Eigen::RowVector3d g = 2.0 * inv_a * (a.row(i) - b.row(nn_ab[i]));
    r.grad_a.row(i) += g;
    r.grad_b.row(nn_ab[i]) -= g;
  }
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    const Eigen::RowVector3d g = 2.0 * inv_b * (b.row(j) - a.row(nn_ba[j]));
    r.grad_b.row(j) += g;
    r.grad_a.row(nn_ba[j]) -= g;
  }
  return r;
}

inline double chamfer_distance(const Points& a, const Points& b) {
  return chamfer_distance_with_grad(a, b, false).value;
}
inline double chamfer_distance(const PointCloud& a, const PointCloud& b) { return chamfer_distance(a.points, b.points); }

// ------------------------------------------------ farthest point sampling

struct FpsResult {
  std::vector<int> indices;
  Points points;
};

/// Greedy max-min selection. The first index is drawn from `rng` unless
/// `start` is given; ties go to the lowest index.
inline FpsResult farthest_point_sample(const Points& cloud, std::size_t j, Rng& rng, int start = -1) {
  const auto n = static_cast<std::size_t>(cloud.rows());
  if (n == 0) throw InvalidInput("farthest_point_sample: empty cloud");
  if (j < 1 || j > n) throw InvalidInput("farthest_point_sample: requested " + std::to_string(j) +
                                         " points from a cloud of " + std::to_string(n));
  FpsResult out;
  out.indices.reserve(j);
  int current = start >= 0 ? start : static_cast<int>(rng.index(n));
  if (current >= static_cast<int>(n)) throw InvalidInput("farthest_point_sample: start index out of range");
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < j; ++s) {
    out.indices.push_back(current);
    const Eigen::RowVector3d c = cloud.row(current);
    int best = -1;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (cloud.row(static_cast<Eigen::Index>(i)) - c).squaredNorm();
      if (d < min_d[i]) min_d[i] = d;
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = static_cast<int>(i);
      }
    }
    current = best;
  }
  out.points.resize(static_cast<Eigen::Index>(j), 3);
  for (std::size_t s = 0; s < j; ++s) out.points.row(static_cast<Eigen::Index>(s)) = cloud.row(out.indices[s]);
  return out;
}

inline PointCloud farthest_point_sample(const PointCloud& cloud, std::size_t j, Rng& rng) {
  return PointCloud(farthest_point_sample(cloud.points, j, rng).points);
}

/// Largest distance from any cloud point to its nearest center.
inline double covering_radius(const Points& cloud, const Points& centers) {
  double r = 0.0;
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) best = std::min(best, (cloud.row(i) - centers.row(c)).squaredNorm());
    r = std::max(r, best);
  }
  return std::sqrt(r);
}

// --------------------------------------------------- point-mesh distance

inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + ab * (d1 / (d1 - d3));
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + ac * (d2 / (d2 - d6));
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

inline double distance_to_mesh(const Vec3& p, const Points& vertices, const std::vector<Face>& faces) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& f : faces) {
    const Vec3 q = closest_point_on_triangle(p, vertices.row(f[0]), vertices.row(f[1]), vertices.row(f[2]));
    best = std::min(best, (p - q).squaredNorm());
  }
  return std::sqrt(best);
}

inline double distance_to_mesh(const Vec3& p, const Mesh& mesh) { return distance_to_mesh(p, mesh.vertices, mesh.faces); }

inline Vec3 centroid(const Points& p) { return p.colwise().mean().transpose(); }

}  // namespace kpd
