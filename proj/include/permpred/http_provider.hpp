#ifndef PERMPRED_HTTP_PROVIDER_HPP
#define PERMPRED_HTTP_PROVIDER_HPP

// Requires httplib.h on the include path. Define CPPHTTPLIB_OPENSSL_SUPPORT
// before including for https endpoints.

#include "permpred/icl.hpp"

#include "httplib.h"
#include "json.hpp"

#include <regex>

namespace permpred::icl {

/// OpenAI-compatible chat-completions client.
class HttpProvider : public TextProvider {
public:
    explicit HttpProvider(ProviderConfig config) : config_(std::move(config)) {
        static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
        std::smatch m;
        if (!std::regex_match(config_.endpoint, m, url)) {
            throw Error(ErrorCode::InvalidConfig, "provider endpoint must be an http(s) URL, got '" + config_.endpoint + "'");
        }
        base_ = m[1].str();
        path_ = m[2].matched ? m[2].str() : "/v1/chat/completions";
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
        if (base_.rfind("https://", 0) == 0) {
            throw Error(ErrorCode::InvalidConfig, "https endpoints need a build with TLS support");
        }
#endif
    }

    std::string complete(const std::string& prompt) override {
        httplib::Client client(base_);
        client.set_connection_timeout(config_.timeout_seconds, 0);
        client.set_read_timeout(config_.timeout_seconds, 0);
        client.set_write_timeout(config_.timeout_seconds, 0);
        httplib::Headers headers;
        if (!config_.credential.empty()) headers.emplace("Authorization", "Bearer " + config_.credential);

        const nlohmann::json body = {{"model", config_.model},
                                     {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
        auto res = client.Post(path_, headers, body.dump(), "application/json");
        if (!res) {
            throw Error(ErrorCode::ProviderUnavailable, "provider request failed: " + httplib::to_string(res.error()));
        }
        if (res->status != 200) {
            throw Error(ErrorCode::ProviderUnavailable, "provider returned HTTP " + std::to_string(res->status),
                        {res->body.substr(0, 500)});
        }
        // Anything other than a well-formed completion is handed back verbatim
        // and fails answer parsing.
        try {
            const auto reply = nlohmann::json::parse(res->body);
            return reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            return res->body;
        }
    }

    std::string name() const override { return "http:" + config_.model; }

private:
    ProviderConfig config_;
    std::string base_;
    std::string path_;
};

} // namespace permpred::icl

#endif // PERMPRED_HTTP_PROVIDER_HPP
