#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

#include "pc4d/bootstrap.hpp"

namespace pc4d {

namespace {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Url split_url(const std::string& url, ErrorKind kind) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) fail(kind, "endpoint is not a URL: " + url);
  const std::string proto = url.substr(0, scheme);
#ifdef CPPHTTPLIB_OPENSSL_SUPPORT
  if (proto != "http" && proto != "https") fail(kind, "unsupported URL scheme: " + url);
#else
  if (proto != "http") fail(kind, "only plain http endpoints are supported (no TLS in this build): " + url);
#endif
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

nlohmann::json post_json(const std::string& url, const std::string& body, const std::string& auth_env,
                         double timeout_s, ErrorKind kind) {
  const Url u = split_url(url, kind);
  httplib::Client cli(u.origin);
  const auto secs = static_cast<time_t>(timeout_s);
  const auto usecs = static_cast<time_t>((timeout_s - double(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (const char* token = std::getenv(auth_env.c_str()); token && *token)
    headers.emplace("Authorization", std::string("Bearer ") + token);
  auto res = cli.Post(u.path, headers, body, "application/json");
  if (!res) fail(kind, "request to " + url + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) fail(kind, "request to " + url + " returned HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    fail(kind, std::string("response is not JSON: ") + e.what());
  }
}

}  // namespace

std::string HttpTeacher::request_body(const TeacherClientConfig& cfg, const std::string& prompt) {
  nlohmann::ordered_json j;
  j["model"] = cfg.model;
  j["temperature"] = cfg.temperature;
  j["max_tokens"] = cfg.max_tokens;
  j["messages"] = nlohmann::ordered_json::array({{{"role", "user"}, {"content", prompt}}});
  return j.dump();
}

std::string HttpTeacher::complete(const std::string& prompt, const FailureCase&, int) {
  const auto j = post_json(cfg_.endpoint, request_body(cfg_, prompt), cfg_.auth_env, cfg_.timeout_s,
                           ErrorKind::kTransport);
  try {
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kTransport, std::string("unexpected chat response shape: ") + e.what());
  }
}

std::vector<float> ExternalEmbedder::embed(std::string_view text) {
  nlohmann::ordered_json req;
  req["model"] = cfg_.model;
  req["input"] = std::string(text);
  const auto j = post_json(cfg_.endpoint, req.dump(), cfg_.auth_env, cfg_.timeout_s, ErrorKind::kEmbedderUnavailable);
  std::vector<float> v;
  try {
    for (const auto& x : j.at("data").at(0).at("embedding")) v.push_back(x.get<float>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kEmbedderUnavailable, std::string("unexpected embedding response shape: ") + e.what());
  }
  if (v.empty()) fail(ErrorKind::kEmbedderUnavailable, "embedding response is empty");
  return v;
}

}  // namespace pc4d
