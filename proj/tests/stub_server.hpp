#pragma once

// In-process HTTP server on a loopback port for remote-service tests.

#include <string>
#include <thread>

#include <httplib.h>

namespace testutil {

class StubServer {
 public:
  StubServer() = default;
  ~StubServer() { stop(); }

  httplib::Server& server() { return server_; }

  std::string start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return "http://127.0.0.1:" + std::to_string(port_);
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace testutil
