// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON-over-HTTP front end for PipelineService. Schemas are in docs/api.md.
// Every failure answers {"error": {"code", "message"}}.

#include <httplib.h>

#include <string>

#include <nlohmann/json.hpp>

#include "atelier/pipeline/service.hpp"

namespace atelier::pipeline {

inline int http_status(const std::string& code) {
  if (code == "not_found") return 404;
  if (code == "invalid_state") return 409;
  if (code == "invalid_argument" || code == "invalid_json" || code == "shape_mismatch" || code == "bad_image" ||
      code == "malformed_manifest")
    return 400;
  return 500;
}

inline nlohmann::json error_envelope(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

namespace detail {

inline void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, const std::string& code, const std::string& message) {
  send_json(res, error_envelope(code, message), http_status(code));
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw Error("invalid_json", "request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("invalid_json", std::string("request body is not valid JSON: ") + e.what());
  }
}

inline std::size_t query_size(const httplib::Request& req, const char* key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const long n = std::stol(v, &used);
    if (used == v.size() && n >= 0) return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw Error("invalid_argument", std::string("query parameter '") + key + "' must be a non-negative integer");
}

template <class T>
T field(const nlohmann::json& body, const char* key, T fallback) {
  if (!body.contains(key)) return fallback;
  try {
    return body.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error("invalid_argument", std::string("field '") + key + "' has the wrong type");
  }
}

// Wraps a handler so Error codes map onto statuses.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, "invalid_argument", e.what());
    } catch (const std::exception& e) {
      send_error(res, "internal", e.what());
    }
  };
}

}  // namespace detail

// Routes:
//   GET  /health
//   POST /jobs                 {"text", "seed"?, "overrides"?}   -> 201 job
//   GET  /jobs?page=&page_size=&state=                           -> page
//   GET  /jobs/{id}                                              -> job
//   POST /jobs/{id}/style      {"style", "mode"?, "iters"?}      -> job
//   POST /jobs/{id}/reshuffle                                    -> job
//   GET  /styles?genre=&k=                                       -> recommendation
//   GET  /artifacts/{hash}                                       -> image/png
//   GET  /artifacts/{hash}/provenance                            -> json
inline void install_routes(httplib::Server& srv, PipelineService& svc) {
  using detail::guarded;
  using detail::send_json;

  srv.Get("/health", guarded([&](const httplib::Request&, httplib::Response& res) {
            send_json(res, {{"status", "ok"}, {"jobs", svc.jobs().size()}});
          }));

  srv.Post("/jobs", guarded([&](const httplib::Request& req, httplib::Response& res) {
             const auto body = detail::parse_body(req);
             if (!body.contains("text") || !body["text"].is_string())
               throw Error("invalid_argument", "field 'text' is required and must be a string");
             const auto job = svc.create_job(body["text"], detail::field<std::uint64_t>(body, "seed", 0),
                                             detail::field<nlohmann::json>(body, "overrides", nlohmann::json::object()));
             svc.submit(job.id);
             send_json(res, job, 201);
           }));

  srv.Get("/jobs", guarded([&](const httplib::Request& req, httplib::Response& res) {
            const auto page = detail::query_size(req, "page", 1);
            const auto size = detail::query_size(req, "page_size", 20);
            send_json(res, svc.list_jobs(page, size, req.has_param("state") ? req.get_param_value("state") : "").to_json());
          }));

  srv.Get("/jobs/:id", guarded([&](const httplib::Request& req, httplib::Response& res) {
            send_json(res, svc.get_job(req.path_params.at("id")));
          }));

  srv.Post("/jobs/:id/style", guarded([&](const httplib::Request& req, httplib::Response& res) {
             const auto body = detail::parse_body(req);
             if (!body.contains("style") || !body["style"].is_string())
               throw Error("invalid_argument", "field 'style' is required and must be a string");
             std::optional<std::size_t> iters;
             if (body.contains("iters")) iters = detail::field<std::size_t>(body, "iters", 0);
             const auto& id = req.path_params.at("id");
             svc.get_job(id);  // 404 before any validation of the style
             send_json(res, svc.choose_style(id, body["style"], detail::field<std::string>(body, "mode", "feedforward"), iters));
           }));

  srv.Post("/jobs/:id/reshuffle", guarded([&](const httplib::Request& req, httplib::Response& res) {
             send_json(res, svc.reshuffle(req.path_params.at("id")));
           }));

  srv.Get("/styles", guarded([&](const httplib::Request& req, httplib::Response& res) {
            if (!req.has_param("genre")) throw Error("invalid_argument", "query parameter 'genre' is required");
            const auto k = detail::query_size(req, "k", static_cast<std::size_t>(svc.config().recommend_k));
            send_json(res, svc.preview_styles(req.get_param_value("genre"), static_cast<long>(k)).to_json());
          }));

  srv.Get("/artifacts/:hash", guarded([&](const httplib::Request& req, httplib::Response& res) {
            const auto bytes = svc.artifacts().bytes(req.path_params.at("hash"));
            res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
          }));

  srv.Get("/artifacts/:hash/provenance", guarded([&](const httplib::Request& req, httplib::Response& res) {
            send_json(res, svc.artifacts().provenance(req.path_params.at("hash")));
          }));

  // Unmatched routes and bad methods still get the envelope.
  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const std::string code = res.status == 404 ? "not_found" : "invalid_argument";
    res.set_content(error_envelope(code, "no route for " + req.method + " " + req.path).dump(), "application/json");
  });
}

}  // namespace atelier::pipeline
