/*
 * Copyright 2026 The FASL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// HTTP+JSON binding for fasl::Service.

#include <string>

// Eigen must be seen before httplib: <resolv.h> defines a _res macro.
#include "fasl/service.hpp"

#include <httplib.h>
#include <json.hpp>

namespace fasl {

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::parse:
    case ErrorCode::validation: return 400;
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict: return 409;
    case ErrorCode::busy: return 503;
    case ErrorCode::io: return 500;
  }
  return 500;
}

inline json error_body(ErrorCode code, const std::string& message,
                       const std::vector<std::string>& details = {}) {
  return {{"code", std::string(to_string(code))}, {"message", message}, {"details", details}};
}

namespace detail {

template <typename Handler>
void respond(httplib::Response& res, Handler&& handler, int ok_status = 200) {
  try {
    json out = handler();
    const bool training = out.is_object() && out.value("status", std::string()) == "training";
    res.status = training ? 202 : ok_status;
    res.set_content(out.dump(), "application/json");
  } catch (const Error& e) {
    res.status = http_status(e.code());
    if (e.code() == ErrorCode::busy) res.set_header("Retry-After", "1");
    res.set_content(error_body(e.code(), e.what(), e.details()).dump(), "application/json");
  } catch (const json::exception& e) {
    res.status = 400;
    res.set_content(error_body(ErrorCode::parse, e.what()).dump(), "application/json");
  } catch (const std::exception& e) {
    res.status = 500;
    res.set_content(error_body(ErrorCode::io, e.what()).dump(), "application/json");
  }
}

inline json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::parse, std::string("malformed JSON body: ") + e.what());
  }
}

}  // namespace detail

inline void install_routes(httplib::Server& server, Service& service) {
  using httplib::Request;
  using httplib::Response;
  server.Get("/health", [](const Request&, Response& res) {
    res.set_content(R"({"status":"ok"})", "application/json");
  });
  server.Post("/pools", [&service](const Request& req, Response& res) {
    detail::respond(res, [&] { return service.register_pool(detail::parse_body(req)); }, 201);
  });
  server.Post("/models", [&service](const Request& req, Response& res) {
    detail::respond(res, [&] { return service.create(detail::parse_body(req)); }, 201);
  });
  server.Get(R"(/models/([A-Za-z0-9_.\-]+))", [&service](const Request& req, Response& res) {
    detail::respond(res, [&] { return service.get_model(req.matches[1]); });
  });
  server.Post(R"(/models/([A-Za-z0-9_.\-]+)/request-instances)",
              [&service](const Request& req, Response& res) {
                detail::respond(res, [&] {
                  return service.request_instances(req.matches[1], detail::parse_body(req));
                });
              });
  server.Post(R"(/models/([A-Za-z0-9_.\-]+)/update)", [&service](const Request& req, Response& res) {
    detail::respond(res, [&] { return service.update(req.matches[1], detail::parse_body(req)); });
  });
  server.Post(R"(/models/([A-Za-z0-9_.\-]+)/run)", [&service](const Request& req, Response& res) {
    detail::respond(res, [&] { return service.run(req.matches[1], detail::parse_body(req)); });
  });
  server.Get(R"(/models/([A-Za-z0-9_.\-]+)/evaluate)", [&service](const Request& req, Response& res) {
    detail::respond(res, [&] { return service.evaluate(req.matches[1]); });
  });
}

}  // namespace fasl
