#pragma once

// Procedural shape families used as a desk-scale training collection.
// Every instance is mirror-symmetric about the x = 0 plane and carries
// analytically known landmarks (for evaluation only) and part labels.
//
// Frame: x lateral, y up, z forward.

#include "kpdeform/geom.hpp"

#include <map>
#include <optional>

namespace kpd {

enum class Family { winged, table, box };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::winged: return "winged";
    case Family::table: return "table";
    case Family::box: return "box";
  }
  return "unknown";
}

inline Family family_from_string(const std::string& name) {
  if (name == "winged") return Family::winged;
  if (name == "table") return Family::table;
  if (name == "box") return Family::box;
  throw InvalidInput("unknown synthetic family '" + name + "' (expected winged, table or box)");
}

struct SyntheticShape {
  Family family = Family::winged;
  Mesh mesh;                            // unit-box normalized
  std::vector<int> face_part;           // part label per face
  std::vector<std::string> part_names;  // indexed by label
  std::vector<std::string> landmark_names;
  Points landmarks;                     // rows parallel to landmark_names
  std::map<std::string, double> params; // lengths in normalized units

  double param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidInput("no parameter '" + name + "'");
    return it->second;
  }
  Vec3 landmark(const std::string& name) const {
    for (std::size_t i = 0; i < landmark_names.size(); ++i)
      if (landmark_names[i] == name) return landmarks.row(static_cast<Eigen::Index>(i)).transpose();
    throw InvalidInput("no landmark '" + name + "'");
  }
};

namespace detail {

class MeshBuilder {
 public:
  int add_vertex(const Vec3& v) {
    verts_.push_back(v);
    return static_cast<int>(verts_.size()) - 1;
  }
  void add_face(int a, int b, int c, int part) {
    faces_.push_back({a, b, c});
    parts_.push_back(part);
  }
  void add_quad(int a, int b, int c, int d, int part) {
    add_face(a, b, c, part);
    add_face(a, c, d, part);
  }

  /// Thin hexahedron from four mid-plane corners offset by +-half_thickness
  /// along `normal`. Corners go around the outline.
  void add_slab(const std::array<Vec3, 4>& outline, const Vec3& normal, double half_thickness, int part) {
    std::array<int, 8> v{};
    for (int i = 0; i < 4; ++i) {
      v[i] = add_vertex(outline[i] + half_thickness * normal);
      v[i + 4] = add_vertex(outline[i] - half_thickness * normal);
    }
    add_quad(v[0], v[1], v[2], v[3], part);
    add_quad(v[7], v[6], v[5], v[4], part);
    for (int i = 0; i < 4; ++i) {
      const int j = (i + 1) % 4;
      add_quad(v[i], v[i + 4], v[j + 4], v[j], part);
    }
  }

  /// Axis-aligned box.
  void add_box(const Vec3& lo, const Vec3& hi, int part) {
    std::array<Vec3, 4> outline{Vec3(lo.x(), 0, lo.z()), Vec3(hi.x(), 0, lo.z()), Vec3(hi.x(), 0, hi.z()),
                                Vec3(lo.x(), 0, hi.z())};
    const double mid = 0.5 * (lo.y() + hi.y());
    for (auto& o : outline) o.y() = mid;
    add_slab(outline, Vec3::UnitY(), 0.5 * (hi.y() - lo.y()), part);
  }

  /// Appends the mirror image (x -> -x) of vertices [first_vertex, end) and
  /// faces [first_face, end) with reversed winding.
  void mirror_since(int first_vertex, std::size_t first_face) {
    const int offset = static_cast<int>(verts_.size()) - first_vertex;
    const int last_vertex = static_cast<int>(verts_.size());
    for (int i = first_vertex; i < last_vertex; ++i) {
      Vec3 m = verts_[static_cast<std::size_t>(i)];
      m.x() = -m.x();
      verts_.push_back(m);
    }
    const std::size_t last_face = faces_.size();
    for (std::size_t f = first_face; f < last_face; ++f) {
      const Face t = faces_[f];
      add_face(t[0] + offset, t[2] + offset, t[1] + offset, parts_[f]);
    }
  }

  int vertex_count() const { return static_cast<int>(verts_.size()); }
  std::size_t face_count() const { return faces_.size(); }

  Mesh mesh() const {
    Mesh m;
    m.vertices.resize(static_cast<Eigen::Index>(verts_.size()), 3);
    for (std::size_t i = 0; i < verts_.size(); ++i) m.vertices.row(static_cast<Eigen::Index>(i)) = verts_[i].transpose();
    m.faces = faces_;
    return m;
  }
  const std::vector<int>& parts() const { return parts_; }

 private:
  std::vector<Vec3> verts_;
  std::vector<Face> faces_;
  std::vector<int> parts_;
};

constexpr int kFuselageRings = 16;
// profile breakpoints as fractions of the length from the nose
constexpr double kNoseConeEnd = 0.18;
constexpr double kTailConeStart = 0.7;

inline double fuselage_ring_scale(int ring) {
  const double t = static_cast<double>(ring) / (kFuselageRings + 1);
  if (ring <= 0 || ring > kFuselageRings) return 0.0;
  if (t < kNoseConeEnd) return std::sqrt(t / kNoseConeEnd);
  if (t > kTailConeStart) return 1.0 - 0.7 * (t - kTailConeStart) / (1.0 - kTailConeStart);
  return 1.0;
}

/// Height of the fuselage's top seam (the x = 0 ring vertices and the
/// straight edges between them) at station z.
inline double fuselage_top(double half_length, double radius, double z) {
  const double t = (half_length - z) / (2.0 * half_length) * (kFuselageRings + 1);
  const int r0 = std::clamp(static_cast<int>(std::floor(t)), 0, kFuselageRings);
  const double f = t - r0;
  return radius * ((1.0 - f) * fuselage_ring_scale(r0) + f * fuselage_ring_scale(r0 + 1));
}

// Lofted body of revolution along z, nose at +half_length. Ring vertices are
// placed at angles symmetric about the x = 0 plane.
inline void add_fuselage(MeshBuilder& mb, double half_length, double radius, int part) {
  constexpr int kAround = 12;
  constexpr int kRings = kFuselageRings;
  const int nose = mb.add_vertex(Vec3(0, 0, half_length));
  std::vector<std::array<int, kAround>> rings;
  for (int r = 1; r <= kRings; ++r) {
    const double t = static_cast<double>(r) / (kRings + 1);
    const double scale = fuselage_ring_scale(r);
    const double z = half_length - 2.0 * half_length * t;
    std::array<int, kAround> ring{};
    for (int k = 0; k < kAround; ++k) {
      const double theta = 2.0 * M_PI * k / kAround;
      double x = radius * scale * std::sin(theta);
      if (k == 0 || k == kAround / 2) x = 0.0;
      ring[k] = mb.add_vertex(Vec3(x, radius * scale * std::cos(theta), z));
    }
    rings.push_back(ring);
  }
  const int tail = mb.add_vertex(Vec3(0, 0, -half_length));
  for (int k = 0; k < kAround; ++k) mb.add_face(nose, rings.front()[(k + 1) % kAround], rings.front()[k], part);
  for (std::size_t r = 0; r + 1 < rings.size(); ++r)
    for (int k = 0; k < kAround; ++k) {
      const int j = (k + 1) % kAround;
      mb.add_quad(rings[r][k], rings[r][j], rings[r + 1][j], rings[r + 1][k], part);
    }
  for (int k = 0; k < kAround; ++k) mb.add_face(tail, rings.back()[k], rings.back()[(k + 1) % kAround], part);
}

struct RawShape {
  MeshBuilder builder;
  std::vector<std::string> part_names;
  std::vector<std::pair<std::string, Vec3>> landmarks;
  std::map<std::string, double> lengths;  // scaled by normalization
  std::map<std::string, double> scalars;  // dimensionless, copied verbatim
};

inline RawShape make_winged(Rng& rng) {
  RawShape s;
  s.part_names = {"fuselage", "wing", "tail"};
  const double half_length = 0.5;
  const double radius = rng.uniform(0.035, 0.06);
  const double span = rng.uniform(0.45, 0.95);
  const double chord = rng.uniform(0.12, 0.22);
  const double taper = rng.uniform(0.35, 0.7);
  const double sweep = rng.uniform(0.0, 0.3);
  const double wing_z = rng.uniform(0.0, 0.15);
  const double tail_height = rng.uniform(0.08, 0.22);
  const double stab_span = rng.uniform(0.15, 0.35);
  constexpr double kWingHalfThickness = 0.01;

  auto& mb = s.builder;
  add_fuselage(mb, half_length, radius, 0);

  // wings: left half built, then mirrored
  const double tip_chord = chord * taper;
  {
    const int v0 = mb.vertex_count();
    const std::size_t f0 = mb.face_count();
    const double root_x = -0.7 * radius, tip_x = -0.5 * span;
    mb.add_slab({Vec3(root_x, 0, wing_z), Vec3(tip_x, 0, wing_z - sweep), Vec3(tip_x, 0, wing_z - sweep - tip_chord),
                 Vec3(root_x, 0, wing_z - chord)},
                Vec3::UnitY(), kWingHalfThickness, 1);
    mb.mirror_since(v0, f0);
  }
  // horizontal stabilizers
  const double stab_le = -0.36, stab_chord = 0.1, stab_sweep = 0.04, stab_tip_chord = 0.05;
  {
    const int v0 = mb.vertex_count();
    const std::size_t f0 = mb.face_count();
    const double root_x = -0.5 * radius, tip_x = -0.5 * stab_span;
    mb.add_slab({Vec3(root_x, 0, stab_le), Vec3(tip_x, 0, stab_le - stab_sweep),
                 Vec3(tip_x, 0, stab_le - stab_sweep - stab_tip_chord), Vec3(root_x, 0, stab_le - stab_chord)},
                Vec3::UnitY(), 0.006, 2);
    mb.mirror_since(v0, f0);
  }
  // vertical fin, itself symmetric about x = 0
  const double fin_le = -0.34, fin_chord = 0.13, fin_sweep = 0.08, fin_top_chord = 0.06;
  mb.add_slab({Vec3(0, 0.5 * radius, fin_le), Vec3(0, tail_height, fin_le - fin_sweep),
               Vec3(0, tail_height, fin_le - fin_sweep - fin_top_chord), Vec3(0, 0.5 * radius, fin_le - fin_chord)},
              Vec3::UnitX(), 0.008, 2);

  const double tip_z = wing_z - sweep - 0.5 * tip_chord;
  const double stab_tip_z = stab_le - stab_sweep - 0.5 * stab_tip_chord;
  // junctions on the symmetry plane, on the fuselage's top seam
  const double wing_root_z = wing_z - 0.5 * chord;
  const double stab_root_z = stab_le - 0.5 * stab_chord;
  const double nose_cone_z = half_length - 2.0 * half_length * kNoseConeEnd;
  const double tail_cone_z = half_length - 2.0 * half_length * kTailConeStart;
  s.landmarks = {
      {"nose", Vec3(0, 0, half_length)},
      {"tail", Vec3(0, 0, -half_length)},
      {"nose_cone", Vec3(0, fuselage_top(half_length, radius, nose_cone_z), nose_cone_z)},
      {"tail_cone", Vec3(0, fuselage_top(half_length, radius, tail_cone_z), tail_cone_z)},
      {"wing_root", Vec3(0, fuselage_top(half_length, radius, wing_root_z), wing_root_z)},
      {"stabilizer_root", Vec3(0, fuselage_top(half_length, radius, stab_root_z), stab_root_z)},
      {"left_wing_tip", Vec3(-0.5 * span, 0, tip_z)},
      {"right_wing_tip", Vec3(0.5 * span, 0, tip_z)},
      {"fin_top", Vec3(0, tail_height, fin_le - fin_sweep - 0.5 * fin_top_chord)},
      {"left_stabilizer_tip", Vec3(-0.5 * stab_span, 0, stab_tip_z)},
      {"right_stabilizer_tip", Vec3(0.5 * stab_span, 0, stab_tip_z)},
  };
  s.lengths = {{"fuselage_length", 2 * half_length}, {"fuselage_radius", radius}, {"span", span},
               {"chord", chord}, {"sweep", sweep}, {"wing_position", wing_z},
               {"tail_height", tail_height}, {"stabilizer_span", stab_span}};
  s.scalars = {{"taper", taper}};
  return s;
}

inline RawShape make_table(Rng& rng) {
  RawShape s;
  s.part_names = {"top", "leg"};
  const double width = rng.uniform(0.6, 1.0);
  const double depth = rng.uniform(0.4, 0.8);
  const double height = rng.uniform(0.4, 0.9);
  const double top_thickness = rng.uniform(0.03, 0.07);
  const double leg = rng.uniform(0.04, 0.08);
  const double inset = rng.uniform(0.0, 0.08);

  auto& mb = s.builder;
  const double hx = 0.5 * width, hz = 0.5 * depth;
  mb.add_box(Vec3(-hx, height - top_thickness, -hz), Vec3(hx, height, hz), 0);
  const int v0 = mb.vertex_count();
  const std::size_t f0 = mb.face_count();
  const double lx0 = -hx + inset, lx1 = lx0 + leg;
  for (double zs : {-1.0, 1.0}) {
    const double z_out = zs * (hz - inset);
    const double z_in = z_out - zs * leg;
    mb.add_box(Vec3(lx0, 0, std::min(z_in, z_out)), Vec3(lx1, height - top_thickness, std::max(z_in, z_out)), 1);
  }
  mb.mirror_since(v0, f0);

  const double lcx = lx0 + 0.5 * leg;
  const double lcz = hz - inset - 0.5 * leg;
  s.landmarks = {
      {"left_front_leg_bottom", Vec3(lcx, 0, lcz)},   {"right_front_leg_bottom", Vec3(-lcx, 0, lcz)},
      {"left_back_leg_bottom", Vec3(lcx, 0, -lcz)},   {"right_back_leg_bottom", Vec3(-lcx, 0, -lcz)},
      {"left_front_top_corner", Vec3(-hx, height, hz)}, {"right_front_top_corner", Vec3(hx, height, hz)},
      {"left_back_top_corner", Vec3(-hx, height, -hz)}, {"right_back_top_corner", Vec3(hx, height, -hz)},
  };
  s.lengths = {{"width", width}, {"depth", depth}, {"height", height}, {"top_thickness", top_thickness},
               {"leg_size", leg}, {"leg_inset", inset}};
  return s;
}

inline RawShape make_box(Rng& rng) {
  RawShape s;
  s.part_names = {"body", "lid"};
  const double width = rng.uniform(0.4, 1.0);
  const double depth = rng.uniform(0.4, 1.0);
  const double height = rng.uniform(0.3, 0.9);
  const double lid = rng.uniform(0.03, 0.08);
  auto& mb = s.builder;
  const double hx = 0.5 * width, hz = 0.5 * depth;
  mb.add_box(Vec3(-hx, 0, -hz), Vec3(hx, height, hz), 0);
  mb.add_box(Vec3(-hx - 0.01, height, -hz - 0.01), Vec3(hx + 0.01, height + lid, hz + 0.01), 1);
  s.landmarks = {
      {"left_front_bottom", Vec3(-hx, 0, hz)},  {"right_front_bottom", Vec3(hx, 0, hz)},
      {"left_back_bottom", Vec3(-hx, 0, -hz)},  {"right_back_bottom", Vec3(hx, 0, -hz)},
      {"left_front_top", Vec3(-hx - 0.01, height + lid, hz + 0.01)},
      {"right_front_top", Vec3(hx + 0.01, height + lid, hz + 0.01)},
      {"left_back_top", Vec3(-hx - 0.01, height + lid, -hz - 0.01)},
      {"right_back_top", Vec3(hx + 0.01, height + lid, -hz - 0.01)},
  };
  s.lengths = {{"width", width}, {"depth", depth}, {"height", height}, {"lid_thickness", lid}};
  return s;
}

}  // namespace detail

inline SyntheticShape generate_synthetic_shape(Family family, Rng& rng) {
  detail::RawShape raw = family == Family::winged  ? detail::make_winged(rng)
                         : family == Family::table ? detail::make_table(rng)
                                                   : detail::make_box(rng);
  auto [mesh, tf] = normalize_unit_box(raw.builder.mesh());
  SyntheticShape s;
  s.family = family;
  s.mesh = std::move(mesh);
  s.face_part = raw.builder.parts();
  s.part_names = raw.part_names;
  Points lm(static_cast<Eigen::Index>(raw.landmarks.size()), 3);
  for (std::size_t i = 0; i < raw.landmarks.size(); ++i) {
    s.landmark_names.push_back(raw.landmarks[i].first);
    lm.row(static_cast<Eigen::Index>(i)) = raw.landmarks[i].second.transpose();
  }
  s.landmarks = tf.apply(lm);
  for (const auto& [k, v] : raw.lengths) s.params[k] = v * tf.scale;
  for (const auto& [k, v] : raw.scalars) s.params[k] = v;
  return s;
}

inline std::vector<SyntheticShape> generate_synthetic_family(Family family, int count, Rng& rng) {
  if (count < 1) throw InvalidInput("synthetic family count must be >= 1");
  std::vector<SyntheticShape> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_synthetic_shape(family, rng));
  return out;
}

/// Index of the mirror partner (x -> -x) of each landmark, or itself.
inline std::vector<int> landmark_mirror_map(const SyntheticShape& s, double tol = 1e-9) {
  std::vector<int> partner(s.landmark_names.size());
  for (Eigen::Index i = 0; i < s.landmarks.rows(); ++i) {
    Vec3 m = s.landmarks.row(i).transpose();
    m.x() = -m.x();
    int best = static_cast<int>(i);
    for (Eigen::Index j = 0; j < s.landmarks.rows(); ++j)
      if ((s.landmarks.row(j).transpose() - m).norm() < tol) best = static_cast<int>(j);
    partner[static_cast<std::size_t>(i)] = best;
  }
  return partner;
}

/// Mirror across the x = 0 plane.
inline Points mirror_x(Points p) {
  p.col(0) = -p.col(0);
  return p;
}

}  // namespace kpd
