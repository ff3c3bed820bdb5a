#pragma once

#include <memory>
#include <string>

#include "mecca/session.hpp"

namespace mecca {

/// HTTP front end over a SessionManager. Errors come back as
/// {"error": kind, "message": text} with a 4xx/5xx status.
class HttpServer {
 public:
  explicit HttpServer(SessionManager& sessions);
  ~HttpServer();

  /// Binds without serving; port 0 picks a free port. Returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop(). Call after bind().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mecca
