#include "mecca/server.hpp"

#include <httplib.h>

#include "mecca/error.hpp"

namespace mecca {

namespace {

int status_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kNotFound: return 404;
    case ErrorKind::kConflict: return 409;
    case ErrorKind::kIo: return 500;
    default: return 400;
  }
}

void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind, const std::string& msg) {
  send_json(res, {{"error", kind}, {"message", msg}}, status);
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kValidation, std::string("request body is not JSON: ") + e.what());
  }
}

int int_param(const httplib::Request& req, const char* name) {
  if (!req.has_param(name)) fail(ErrorKind::kInvalidArgument, std::string("missing query parameter '") + name + "'");
  const std::string v = req.get_param_value(name);
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail(ErrorKind::kInvalidArgument, std::string("query parameter '") + name + "' must be an integer");
  }
}

// Wraps a handler so library errors map to status codes.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, status_for(e.kind()), to_string(e.kind()), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace

struct HttpServer::Impl {
  SessionManager& sessions;
  httplib::Server srv;

  explicit Impl(SessionManager& s) : sessions(s) { routes(); }

  void routes() {
    const std::string sid = R"(/sessions/([A-Za-z0-9_-]+))";

    srv.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = sessions.create(create_request_from_json(parse_body(req)));
      send_json(res, sessions.describe(id), 201);
    }));
    srv.Get(sid, guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, sessions.describe(req.matches[1]));
    }));
    srv.Delete(sid, guarded([this](const httplib::Request& req, httplib::Response& res) {
      sessions.remove(req.matches[1]);
      send_json(res, {{"deleted", std::string(req.matches[1])}});
    }));
    srv.Post(sid + "/hints", guarded([this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body = parse_body(req);
      // Accept a bare list or {"points": [...]}.
      if (body.is_object()) body = body.value("points", nlohmann::json::array());
      send_json(res, sessions.submit_hints(req.matches[1], hints_from_json(body)));
    }));
    srv.Post(sid + "/step", guarded([this](const httplib::Request& req, httplib::Response& res) {
      auto fut = sessions.step(req.matches[1]);
      if (req.has_param("wait") && req.get_param_value("wait") == "0") {
        send_json(res, {{"queued", true}}, 202);
        return;
      }
      send_json(res, fut.get());
    }));
    srv.Get(sid + "/slice", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const Plane plane = parse_plane(req.has_param("plane") ? req.get_param_value("plane") : "");
      const SliceLayer layer = parse_layer(req.has_param("layer") ? req.get_param_value("layer") : "image");
      const Slice s = sessions.slice(req.matches[1], plane, int_param(req, "index"), layer);
      res.set_content(s.encode(), "application/octet-stream");
    }));
    srv.Get(sid + "/suggestions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, sessions.suggestions(req.matches[1]));
    }));
    srv.Get(sid + "/metrics", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, sessions.metrics(req.matches[1]));
    }));
  }
};

HttpServer::HttpServer(SessionManager& sessions) : impl_(std::make_unique<Impl>(sessions)) {}
HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->srv.bind_to_any_port(host);
    if (p < 0) fail(ErrorKind::kIo, "cannot bind " + host);
    return p;
  }
  if (!impl_->srv.bind_to_port(host, port)) fail(ErrorKind::kIo, "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::serve() {
  if (!impl_->srv.listen_after_bind()) fail(ErrorKind::kIo, "server stopped with an error");
}

void HttpServer::stop() { impl_->srv.stop(); }

}  // namespace mecca
