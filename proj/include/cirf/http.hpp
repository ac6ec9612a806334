#pragma once

#include <optional>
#include <string>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace cirf {

struct HttpEndpoint {
  std::string origin;       // scheme://host[:port]
  std::string path_prefix;  // "" or "/api"
};

inline HttpEndpoint split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto host_start = scheme == std::string::npos ? 0 : scheme + 3;
  const auto slash = url.find('/', host_start);
  if (slash == std::string::npos) return {url, ""};
  std::string prefix = url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, slash), prefix};
}

struct HttpReply {
  int status = 0;
  std::string body;
};

/// POSTs a JSON document; nullopt on transport failure.
inline std::optional<HttpReply> post_json(const std::string& url, const std::string& route,
                                          const nlohmann::json& body, int timeout_seconds = 60) {
  const HttpEndpoint ep = split_url(url);
  httplib::Client client(ep.origin);
  client.set_connection_timeout(timeout_seconds, 0);
  client.set_read_timeout(timeout_seconds, 0);
  auto res = client.Post(ep.path_prefix + route, body.dump(), "application/json");
  if (!res) return std::nullopt;
  return HttpReply{res->status, res->body};
}

}  // namespace cirf
