// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#pragma once

#include <chrono>
#include <cstdlib>
#include <stdexcept>
#include <string>

// Eigen (via prompts.hpp) must come first: <resolv.h>, pulled in by
// httplib, defines a `_res` macro that clashes with Eigen parameter names.
#include "promptalign/prompts.hpp"

#include <httplib.h>
#include <json.hpp>

namespace promptalign {

/// Remote text-generation endpoint. The request body is
/// {"model": ..., "prompt": ..., "stream": false}; the reply text is read
/// from `response_field`, a dot-separated path into the JSON reply where
/// numeric components index arrays (e.g. "choices.0.text").
struct LlmEndpoint {
  std::string base_url;               // scheme://host[:port]
  std::string path = "/api/generate";
  std::string model;
  std::string api_key_env;            // empty: no Authorization header
  double timeout_seconds = 30.0;
  std::string response_field = "response";
};

/// Walks a dot-separated path through a JSON document.
inline const nlohmann::json& json_at_path(const nlohmann::json& doc, const std::string& path) {
  const nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (start <= path.size()) {
    const auto end = std::min(path.find('.', start), path.size());
    const std::string key = path.substr(start, end - start);
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw std::runtime_error("reply field '" + path + "': '" + key + "' is not an index");
      }
      if (idx >= node->size())
        throw std::runtime_error("reply field '" + path + "': index " + key + " out of range");
      node = &(*node)[idx];
    } else if (node->is_object() && node->contains(key)) {
      node = &(*node)[key];
    } else {
      throw std::runtime_error("reply has no field '" + path + "'");
    }
    start = end + 1;
  }
  return *node;
}

class HttpLlmClient final : public LlmClient {
 public:
  explicit HttpLlmClient(LlmEndpoint endpoint) : endpoint_(std::move(endpoint)) {
    if (endpoint_.base_url.empty()) throw std::invalid_argument("llm endpoint: empty base_url");
    if (endpoint_.model.empty()) throw std::invalid_argument("llm endpoint: empty model");
  }

  std::string complete(const std::string& prompt) override {
    httplib::Client client(endpoint_.base_url);
    if (!client.is_valid())
      throw std::runtime_error("unsupported endpoint '" + endpoint_.base_url + "'");
    const auto timeout = std::chrono::duration<double>(endpoint_.timeout_seconds);
    client.set_connection_timeout(
        std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    if (!endpoint_.api_key_env.empty()) {
      const char* key = std::getenv(endpoint_.api_key_env.c_str());
      if (key == nullptr || *key == '\0')
        throw std::runtime_error("environment variable " + endpoint_.api_key_env +
                                 " is not set");
      client.set_bearer_token_auth(key);
    }
    const nlohmann::json body = {
        {"model", endpoint_.model}, {"prompt", prompt}, {"stream", false}};
    auto res = client.Post(endpoint_.path, body.dump(), "application/json");
    if (!res) throw std::runtime_error("request failed: " + httplib::to_string(res.error()));
    if (res->status != 200)
      throw std::runtime_error("HTTP status " + std::to_string(res->status));
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("reply is not JSON: ") + e.what());
    }
    const auto& field = json_at_path(reply, endpoint_.response_field);
    if (!field.is_string())
      throw std::runtime_error("reply field '" + endpoint_.response_field +
                               "' is not a string");
    return field.get<std::string>();
  }

 private:
  LlmEndpoint endpoint_;
};

}  // namespace promptalign
