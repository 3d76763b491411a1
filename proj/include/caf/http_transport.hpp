#pragma once

// cpp-httplib backed Transport. Kept apart from providers.hpp so only the
// CLI and service pay for the httplib include.

#include <httplib.h>

#include <chrono>
#include <string>

#include "caf/error.hpp"
#include "caf/providers.hpp"

namespace caf {

class HttplibTransport : public Transport {
 public:
  /// base_url is "scheme://host[:port][/prefix]", e.g. https://api.openai.com/v1
  explicit HttplibTransport(const std::string& base_url, std::chrono::seconds timeout = std::chrono::seconds(60)) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorKind::config, "base URL needs a scheme: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    origin_ = base_url.substr(0, path_start);
    if (path_start != std::string::npos) prefix_ = base_url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    timeout_ = timeout;
    if (!httplib::Client(origin_).is_valid()) throw Error(ErrorKind::config, "unsupported base URL: " + base_url);
  }

  HttpResponse post_json(const std::string& path, const std::string& body, const Headers& headers) override {
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    // one client per call: httplib::Client is not safe for concurrent use
    httplib::Client client(origin_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    auto result = client.Post(prefix_ + path, h, body, "application/json");
    if (!result) return {0, {}, httplib::to_string(result.error())};
    return {result->status, result->body, {}};
  }

 private:
  std::string origin_;
  std::string prefix_;
  std::chrono::seconds timeout_;
};

}  // namespace caf
