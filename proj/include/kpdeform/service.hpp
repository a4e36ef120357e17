#pragma once

// Session-oriented editing service. The request handlers are plain member
// functions returning status + body so they can be exercised without a
// socket; register_routes binds them to an httplib server.

#include "kpdeform/prior.hpp"
#include "kpdeform/synthetic.hpp"

#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>

#include <httplib.h>

namespace kpd {

// ------------------------------------------------ shared with the CLI

/// A mesh prepared for editing. Keypoints and vertices cross the API in the
/// mesh's own frame; the model works in the unit-box frame.
struct EditableShape {
  Mesh original;
  InferenceShape inference;

  const UnitBoxTransform& transform() const { return inference.shape.transform; }
  int num_keypoints() const { return inference.keypoints.size(); }
  Points keypoints() const { return transform().invert(inference.keypoints.points); }
  Points to_model_frame(const Points& p) const { return transform().apply(p); }
  Points to_input_frame(const Points& p) const { return transform().invert(p); }
};

inline EditableShape make_editable(const Model& model, const Mesh& mesh) {
  validate_mesh(mesh);
  return EditableShape{mesh, analyze_shape(model, mesh)};
}

inline void check_target_keypoints(const EditableShape& s, const Points& target) {
  if (target.rows() != s.num_keypoints() || target.cols() != 3)
    throw InvalidInput("expected " + std::to_string(s.num_keypoints()) + " keypoints, got " +
                       std::to_string(target.rows()));
  if (!target.allFinite()) throw InvalidInput("keypoints must be finite");
}

/// Deformed vertices in the input frame for target keypoints in the input
/// frame, always starting from the original mesh.
inline Points deform_editable(const EditableShape& s, const Points& target) {
  check_target_keypoints(s, target);
  return s.to_input_frame(deform_mesh_vertices(s.inference, s.to_model_frame(target)));
}

inline std::string deformed_obj(const EditableShape& s, const Points& target) {
  return format_obj(Mesh{deform_editable(s, target), s.original.faces});
}

/// Accepts {"keypoints": [[x,y,z], ...]} or a bare array.
inline Points keypoints_from_json(const json& j) {
  if (j.is_array()) return points_from_json(j);
  if (j.is_object() && j.contains("keypoints")) return points_from_json(j.at("keypoints"));
  throw InvalidInput("expected a keypoint array or an object with \"keypoints\"");
}

inline constexpr std::uint64_t kBuiltinSeed = 2024;
inline constexpr int kMaxBuiltinIndex = 999;

/// Builtin shapes are named "<family>:<index>", e.g. "winged:3".
inline Mesh builtin_mesh(const std::string& id) {
  const auto colon = id.find(':');
  if (colon == std::string::npos) throw InvalidInput("builtin id must look like 'winged:0'");
  const Family f = family_from_string(id.substr(0, colon));
  int index = -1;
  try {
    std::size_t used = 0;
    index = std::stoi(id.substr(colon + 1), &used);
    if (used != id.size() - colon - 1) index = -1;
  } catch (const std::exception&) {
    index = -1;
  }
  if (index < 0 || index > kMaxBuiltinIndex)
    throw InvalidInput("builtin index must be an integer in [0, " + std::to_string(kMaxBuiltinIndex) + "]");
  Rng rng(kBuiltinSeed);
  return generate_synthetic_family(f, index + 1, rng).back().mesh;
}

// ------------------------------------------------------------ service

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

struct ServiceOptions {
  std::size_t max_upload_bytes = 2u << 20;
};

class Service {
 public:
  Service(Model model, std::optional<PCAPrior> prior, ServiceOptions opt = {})
      : model_(std::move(model)), prior_(std::move(prior)), opt_(opt) {}

  const Model& model() const { return model_; }
  bool prior_matches() const { return prior_ && prior_->num_keypoints == model_.config.num_keypoints; }

  HttpResponse health() const {
    json j = {{"status", "ok"},
              {"num_keypoints", model_.config.num_keypoints},
              {"category", model_.config.category},
              {"prior", prior_.has_value()},
              {"prior_matches", prior_matches()}};
    std::shared_lock lock(table_mutex_);
    j["sessions"] = sessions_.size();
    return ok(j);
  }

  HttpResponse prior_info() const {
    return guarded([&] {
      require_prior();
      const PCAPrior& p = *prior_;
      const Eigen::VectorXd sd = p.stddev();
      return ok({{"num_basis", p.num_basis()},
                 {"rank", p.rank},
                 {"rank_deficient", p.rank_deficient},
                 {"stddev", std::vector<double>(sd.data(), sd.data() + sd.size())},
                 {"model_checksum", p.model_checksum}});
    });
  }

  /// Body: {"obj": "<OBJ text>"} or {"builtin": "winged:0"}.
  HttpResponse create_session(const std::string& body) {
    return guarded([&] {
      const json req = parse_body(body);
      Mesh mesh;
      std::string source;
      if (req.contains("obj")) {
        if (!req.at("obj").is_string()) throw InvalidInput("\"obj\" must be a string");
        const auto& text = req.at("obj").get_ref<const std::string&>();
        if (text.size() > opt_.max_upload_bytes)
          throw HttpError(413, "mesh upload exceeds " + std::to_string(opt_.max_upload_bytes) + " bytes");
        std::istringstream in(text);
        mesh = parse_obj(in);
        source = "upload";
      } else if (req.contains("builtin")) {
        source = req.at("builtin").get<std::string>();
        mesh = builtin_mesh(source);
      } else {
        throw InvalidInput("request needs \"obj\" or \"builtin\"");
      }
      auto session = std::make_shared<Session>();
      session->shape = make_editable(model_, mesh);
      session->source = source;
      session->cache_key = cache_key(session->shape);
      session->current_keypoints = session->shape.keypoints();
      session->current_vertices = mesh.vertices;
      {
        std::unique_lock lock(table_mutex_);
        session->id = "s" + std::to_string(++next_id_);
        sessions_[session->id] = session;
      }
      const EditableShape& s = session->shape;
      const Cage cage_in{s.to_input_frame(s.inference.shape.cage.vertices), s.inference.shape.cage.faces};
      return ok({{"session_id", session->id},
                 {"num_keypoints", s.num_keypoints()},
                 {"mesh", {{"vertices", points_to_json(mesh.vertices)}, {"faces", mesh.faces}}},
                 {"keypoints", points_to_json(session->current_keypoints)},
                 {"cage", {{"vertices", points_to_json(cage_in.vertices)}, {"faces", cage_in.faces}}}});
    });
  }

  /// Body: {"keypoints": [[x,y,z] x K]} or {"edits": [{"index": i,
  /// "position": [x,y,z]}, ...]}, optionally "sync": true.
  HttpResponse deform(const std::string& id, const std::string& body) {
    return guarded([&] {
      auto session = find(id);
      const json req = parse_body(body);
      std::lock_guard lock(session->mutex);
      check_cache(*session);
      const auto [target, synced] = resolve_target(*session, req);
      apply(*session, target, req);
      session->synchronized = synced;
      return ok(deform_response(*session));
    });
  }

  /// Body: {"coefficients": [..]} in units of each basis' standard deviation;
  /// keypoints become the prior sample, then the shape is deformed to them.
  HttpResponse sample(const std::string& id, const std::string& body) {
    return guarded([&] {
      auto session = find(id);
      const json req = parse_body(body);
      require_prior();
      std::lock_guard lock(session->mutex);
      check_cache(*session);
      const auto c = req.at("coefficients").get<std::vector<double>>();
      if (c.size() != static_cast<std::size_t>(prior_->num_basis()))
        throw InvalidInput("expected " + std::to_string(prior_->num_basis()) + " coefficients");
      const Eigen::VectorXd z = prior_->stddev().cwiseProduct(Eigen::Map<const Eigen::VectorXd>(c.data(), c.size()));
      if (!z.allFinite()) throw InvalidInput("coefficients must be finite");
      const Points target = session->shape.to_input_frame(sample_prior(*prior_, z).points);
      apply(*session, target, req);
      session->synchronized = false;
      return ok(deform_response(*session));
    });
  }

  HttpResponse reset(const std::string& id) {
    return guarded([&] {
      auto session = find(id);
      std::lock_guard lock(session->mutex);
      session->current_keypoints = session->shape.keypoints();
      session->current_vertices = session->shape.original.vertices;
      session->synchronized = false;
      session->last_request = json();
      return ok(deform_response(*session));
    });
  }

  HttpResponse get_session(const std::string& id) const {
    return guarded([&] {
      auto session = find(id);
      std::lock_guard lock(session->mutex);
      return ok({{"session_id", session->id},
                 {"source", session->source},
                 {"num_keypoints", session->shape.num_keypoints()},
                 {"num_vertices", session->shape.original.vertices.rows()},
                 {"original_keypoints", points_to_json(session->shape.keypoints())},
                 {"keypoints", points_to_json(session->current_keypoints)},
                 {"last_request", session->last_request},
                 {"mesh_hash", hash_points(session->current_vertices)}});
    });
  }

  HttpResponse mesh_obj(const std::string& id) const {
    return guarded([&] {
      auto session = find(id);
      std::lock_guard lock(session->mutex);
      return HttpResponse{200, format_obj(Mesh{session->current_vertices, session->shape.original.faces}),
                          "text/plain"};
    });
  }

  HttpResponse delete_session(const std::string& id) {
    return guarded([&] {
      std::unique_lock lock(table_mutex_);
      if (sessions_.erase(id) == 0) throw HttpError(404, "unknown session '" + id + "'");
      return ok({{"deleted", id}});
    });
  }

 private:
  struct HttpError : std::runtime_error {
    HttpError(int s, const std::string& m) : std::runtime_error(m), status(s) {}
    int status;
  };

  struct Session {
    std::string id;
    std::string source;
    EditableShape shape;
    std::string cache_key;
    Points current_keypoints;
    Points current_vertices;
    bool synchronized = false;
    json last_request;
    mutable std::mutex mutex;
  };

  static HttpResponse ok(const json& j) { return {200, j.dump(), "application/json"}; }
  static HttpResponse fail(int status, const std::string& msg) {
    return {status, json{{"error", msg}}.dump(), "application/json"};
  }

  template <class F>
  static HttpResponse guarded(F&& f) {
    try {
      return f();
    } catch (const HttpError& e) {
      return fail(e.status, e.what());
    } catch (const json::parse_error& e) {
      return fail(400, std::string("malformed JSON: ") + e.what());
    } catch (const json::exception& e) {
      return fail(422, std::string("malformed request: ") + e.what());
    } catch (const InvalidInput& e) {
      return fail(422, e.what());
    } catch (const std::exception& e) {
      return fail(500, e.what());
    }
  }

  static json parse_body(const std::string& body) {
    json j = json::parse(body);
    if (!j.is_object()) throw InvalidInput("request body must be a JSON object");
    return j;
  }

  static std::string cache_key(const EditableShape& s) {
    const auto& sh = s.inference.shape;
    const auto& w = s.inference.vertex_weights.weights;
    Hasher h;
    h.doubles({sh.mesh.vertices.data(), static_cast<std::size_t>(sh.mesh.vertices.size())});
    h.doubles({sh.cage.vertices.data(), static_cast<std::size_t>(sh.cage.vertices.size())});
    h.doubles({w.data(), static_cast<std::size_t>(w.size())});
    return h.hex();
  }

  static void check_cache(const Session& s) {
    const auto& w = s.shape.inference.vertex_weights.weights;
    if (w.rows() != s.shape.original.vertices.rows() || w.cols() != s.shape.inference.shape.cage.size() ||
        cache_key(s.shape) != s.cache_key)
      throw std::logic_error("session cache is inconsistent with its mesh and cage");
  }

  void require_prior() const {
    if (!prior_) throw HttpError(409, "no prior loaded");
    if (!prior_matches())
      throw HttpError(409, "prior has K=" + std::to_string(prior_->num_keypoints) + " but the checkpoint has K=" +
                               std::to_string(model_.config.num_keypoints));
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::shared_lock lock(table_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw HttpError(404, "unknown session '" + id + "'");
    return it->second;
  }

  /// Target keypoints (input frame) and whether the prior filled them in.
  std::pair<Points, bool> resolve_target(const Session& s, const json& req) const {
    const EditableShape& shape = s.shape;
    const Points original = shape.keypoints();
    const bool sync = req.value("sync", false);
    const bool has_full = req.contains("keypoints") || req.contains("edited_keypoints");
    const bool has_edits = req.contains("edits");
    if (has_full == has_edits) throw InvalidInput("request needs exactly one of \"keypoints\" or \"edits\"");

    std::vector<KeypointEdit> edits;  // input frame
    Points target = original;
    if (has_full) {
      target = points_from_json(req.contains("keypoints") ? req.at("keypoints") : req.at("edited_keypoints"));
      check_target_keypoints(shape, target);
      for (int k = 0; k < target.rows(); ++k)
        if (target.row(k) != original.row(k)) edits.push_back({k, target.row(k).transpose()});
    } else {
      for (const auto& e : req.at("edits")) {
        const int idx = e.at("index").get<int>();
        if (idx < 0 || idx >= shape.num_keypoints())
          throw InvalidInput("edit index " + std::to_string(idx) + " out of range");
        const Points pos = points_from_json(json::array({e.at("position")}));
        target.row(idx) = pos.row(0);
        edits.push_back({idx, pos.row(0).transpose()});
      }
      if (edits.empty()) throw InvalidInput("\"edits\" is empty");
    }
    if (!sync || edits.empty()) return {target, false};

    require_prior();
    for (auto& e : edits) e.position = shape.to_model_frame(Points(e.position.transpose())).row(0).transpose();
    const KeypointSet synced = synchronize(*prior_, shape.inference.keypoints, edits);
    Points out = shape.to_input_frame(synced.points);
    for (const auto& e : edits) out.row(e.index) = target.row(e.index);  // honor the request bit-exactly
    return {out, true};
  }

  void apply(Session& s, const Points& target, const json& req) const {
    s.current_vertices = deform_editable(s.shape, target);
    s.current_keypoints = target;
    s.last_request = req;
  }

  static json deform_response(const Session& s) {
    return {{"session_id", s.id},
            {"vertices", points_to_json(s.current_vertices)},
            {"keypoints", points_to_json(s.current_keypoints)},
            {"synchronized", s.synchronized},
            {"mesh_hash", hash_points(s.current_vertices)}};
  }

  const Model model_;
  const std::optional<PCAPrior> prior_;
  const ServiceOptions opt_;
  mutable std::shared_mutex table_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 0;
};

inline void register_routes(httplib::Server& server, Service& svc) {
  auto send = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get("/health", [&svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc.health()); });
  server.Get("/prior", [&svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc.prior_info()); });
  server.Post("/sessions", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.create_session(req.body));
  });
  server.Get(R"(/sessions/([^/]+))", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.get_session(req.matches[1]));
  });
  server.Delete(R"(/sessions/([^/]+))", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.delete_session(req.matches[1]));
  });
  server.Get(R"(/sessions/([^/]+)/mesh\.obj)", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.mesh_obj(req.matches[1]));
  });
  server.Post(R"(/sessions/([^/]+)/deform)", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.deform(req.matches[1], req.body));
  });
  server.Post(R"(/sessions/([^/]+)/sample)", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.sample(req.matches[1], req.body));
  });
  server.Post(R"(/sessions/([^/]+)/reset)", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.reset(req.matches[1]));
  });
}

inline constexpr int kDefaultPort = 8080;

/// Port from KPD_PORT when set and valid, otherwise 8080.
inline int default_port() {
  if (const char* env = std::getenv("KPD_PORT")) {
    try {
      const int p = std::stoi(env);
      if (p > 0 && p < 65536) return p;
    } catch (const std::exception&) {
    }
  }
  return kDefaultPort;
}

}  // namespace kpd
