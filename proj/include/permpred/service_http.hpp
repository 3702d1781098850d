#ifndef PERMPRED_SERVICE_HTTP_HPP
#define PERMPRED_SERVICE_HTTP_HPP

// Requires httplib.h on the include path.

#include "permpred/service.hpp"

#include "httplib.h"

namespace permpred::service {

inline int http_status(ErrorCode code) {
    switch (code) {
    case ErrorCode::UnknownUser:
    case ErrorCode::UnknownItem:
    case ErrorCode::NoSuchRule: return 404;
    case ErrorCode::AlreadyDecided: return 409;
    case ErrorCode::ProviderUnavailable: return 503;
    case ErrorCode::TrainingFailure:
    case ErrorCode::StoreError:
    case ErrorCode::Divergence: return 500;
    default: return 400;
    }
}

/// Problem document: {type, title, status, code, detail}.
inline json problem(int status, std::string_view code, const std::string& detail,
                    const std::vector<std::string>& details = {}) {
    json j = {{"type", "urn:permpred:problem:" + std::string(code)},
              {"title", std::string(code)},
              {"status", status},
              {"code", std::string(code)},
              {"detail", detail}};
    if (!details.empty()) j["errors"] = details;
    return j;
}

class HttpFrontend {
public:
    /// An empty token disables the bearer check.
    HttpFrontend(AssistantService& service, std::string api_token = {})
        : service_(service), token_(std::move(api_token)) {
        routes();
    }

    httplib::Server& server() { return server_; }

    bool listen(const std::string& host, int port) { return server_.listen(host, port); }
    /// Returns the bound port, or -1.
    int bind_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

private:
    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    static void send(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), status >= 400 ? "application/problem+json" : "application/json");
    }

    static json body_of(const httplib::Request& req) {
        try {
            return json::parse(req.body);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::SchemaError, std::string("request body is not JSON: ") + e.what());
        }
    }

    static std::string user_param(const httplib::Request& req) {
        if (!req.has_param("user")) throw Error(ErrorCode::InvalidArgument, "query parameter 'user' is required");
        return normalize_id(req.get_param_value("user"));
    }

    Handler guarded(Handler inner) {
        return [this, inner = std::move(inner)](const httplib::Request& req, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", "*");
            if (!token_.empty() && req.get_header_value("Authorization") != "Bearer " + token_) {
                send(res, 401, problem(401, "Unauthorized", "missing or wrong bearer token"));
                return;
            }
            try {
                inner(req, res);
            } catch (const Error& e) {
                const int status = http_status(e.code());
                send(res, status, problem(status, to_string(e.code()), e.what(), e.details()));
            } catch (const json::exception& e) {
                send(res, 400, problem(400, "SchemaError", e.what()));
            } catch (const std::exception& e) {
                send(res, 500, problem(500, "InternalError", e.what()));
            }
        };
    }

    template <typename F>
    auto collect(F&& items) {
        json arr = json::array();
        for (const auto& x : items) arr.push_back(to_json(x));
        return arr;
    }

    void routes() {
        server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", "*");
            res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
            res.status = 204;
        });

        server_.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
                        send(res, 200, {{"status", "ok"}, {"version", std::string(kVersion)}});
                    }));

        server_.Post("/users", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         send(res, 201, permpred::to_json(service_.register_user(profile_from_json(body_of(req)))));
                     }));

        server_.Post("/requests", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         send(res, 200, to_json(service_.submit(request_from_json(body_of(req)))));
                     }));

        server_.Get("/pending", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        send(res, 200, collect(service_.pending(user_param(req))));
                    }));

        server_.Post(R"(/pending/(\d+)/decision)", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         const auto id = std::stoll(req.matches[1].str());
                         const json body = body_of(req);
                         if (!body.contains("option")) throw Error(ErrorCode::SchemaError, "field 'option' is required");
                         const auto option = parse_option(body.at("option").get<std::string>());
                         send(res, 200, to_json(service_.decide(id, option)));
                     }));

        server_.Delete(R"(/rules/([^/]+)/([^/]+)/([^/]+))",
                       guarded([this](const httplib::Request& req, httplib::Response& res) {
                           send(res, 200,
                                to_json(service_.revoke(normalize_id(req.matches[1].str()),
                                                        normalize_id(req.matches[2].str()),
                                                        normalize_id(req.matches[3].str()))));
                       }));

        server_.Get("/rules", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        send(res, 200, collect(service_.rules(user_param(req))));
                    }));

        server_.Get("/history", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        send(res, 200, collect(service_.history(user_param(req))));
                    }));

        server_.Get("/predictions", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        send(res, 200, collect(service_.outcomes(user_param(req))));
                    }));

        server_.Get("/metrics", guarded([this](const httplib::Request&, httplib::Response& res) {
                        send(res, 200, service_.metrics());
                    }));

        server_.Post("/admin/refresh", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         std::optional<std::string> user;
                         if (req.has_param("user")) user = normalize_id(req.get_param_value("user"));
                         send(res, 200, to_json(service_.refresh_models(user)));
                     }));
    }

    AssistantService& service_;
    std::string token_;
    httplib::Server server_;
};

} // namespace permpred::service

#endif // PERMPRED_SERVICE_HTTP_HPP
