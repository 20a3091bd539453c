#include "ilog/http.hpp"
#include "ilog/wire.hpp"

#include <httplib.h>

#include <charconv>
#include <chrono>
#include <thread>

namespace ilog {

namespace {

int http_status(Errc c) {
    switch (c) {
        case Errc::parse_error:
        case Errc::validation_error:
        case Errc::invalid_answer:
        case Errc::arity_mismatch:
        case Errc::empty_buffer:
        case Errc::duplicate_task:
        case Errc::wrong_kind:
        case Errc::not_deterministic: return 400;
        case Errc::auth_failure:
        case Errc::unauthorized: return 401;
        case Errc::bad_study_code:
        case Errc::pseudonym_mismatch: return 403;
        case Errc::unknown_participant:
        case Errc::unknown_task: return 404;
        case Errc::window_expired:
        case Errc::study_closed: return 410;
        case Errc::decode_error:
        case Errc::corrupt_payload:
        case Errc::count_mismatch: return 422;
        case Errc::storage_full: return 507;
        case Errc::backend_unavailable: return 503;
        case Errc::io_failure: return 500;
    }
    return 500;
}

std::string credential_of(const httplib::Request& req) {
    auto v = req.get_header_value("Authorization");
    if (v.rfind("Bearer ", 0) == 0) v.erase(0, 7);
    return v;
}

std::optional<TimestampMs> query_ts(const httplib::Request& req, const char* name) {
    if (!req.has_param(name)) return std::nullopt;
    auto s = req.get_param_value(name);
    TimestampMs v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw Error(Errc::parse_error, std::string(name) + " must be an integer millisecond timestamp", name);
    return v;
}

Id128 path_id(const httplib::Request& req) {
    auto id = Id128::from_hex(req.matches[1].str());
    if (!id) throw Error(Errc::parse_error, "pseudonym must be 32 hex digits");
    return *id;
}

}  // namespace

HttpServer::HttpServer(Backend& backend, ManualClock* sim_clock)
    : backend_(backend), sim_clock_(sim_clock), server_(std::make_unique<httplib::Server>()) {
    auto& s = *server_;
    s.set_payload_max_length(64u << 20);
    s.set_keep_alive_timeout(2);
    s.set_tcp_nodelay(true);

    using Handler = std::function<json(const httplib::Request&)>;
    auto wrap = [this](Handler fn) {
        return [this, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                json body;
                if (sim_clock_) {
                    std::lock_guard lock(sim_mutex_);
                    if (auto t = query_ts(req, "now")) sim_clock_->set(*t);
                    if (req.has_header(kSimTimeHeader)) {
                        auto v = req.get_header_value(kSimTimeHeader);
                        TimestampMs t = 0;
                        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), t);
                        if (ec != std::errc{} || p != v.data() + v.size())
                            throw Error(Errc::parse_error, "bad X-Ilog-Sim-Time header");
                        sim_clock_->set(t);
                    }
                    body = fn(req);
                } else {
                    body = fn(req);
                }
                res.status = 200;
                res.set_content(body.dump(), "application/json");
            } catch (const Error& e) {
                res.status = http_status(e.code());
                res.set_content(error_body(e).dump(), "application/json");
            } catch (const std::exception& e) {
                res.status = 500;
                res.set_content(json{{"error", "IoFailure"}, {"message", e.what()}}.dump(), "application/json");
            }
        };
    };

    s.Get("/v1/health", wrap([](const httplib::Request&) { return json{{"status", "ok"}}; }));
    s.Post("/v1/register", wrap([this](const httplib::Request& req) {
               return json(backend_.register_participant(parse_body<RegisterRequest>(req.body)));
           }));
    s.Post("/v1/chunks", wrap([this](const httplib::Request& req) {
               ByteView bytes(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size());
               return json(backend_.receive_chunk(credential_of(req), bytes));
           }));
    s.Get("/v1/tasks", wrap([this](const httplib::Request& req) {
              return json(backend_.fetch_tasks(credential_of(req), query_ts(req, "since"),
                                               query_ts(req, "offline_since")));
          }));
    s.Post("/v1/answers", wrap([this](const httplib::Request& req) {
               auto body = parse_body<json>(req.body);
               std::vector<AnswerSubmission> subs;
               try {
                   subs = (body.is_array() ? body : body.at("answers")).get<std::vector<AnswerSubmission>>();
               } catch (const json::exception& e) {
                   throw Error(Errc::parse_error, std::string("answers: ") + e.what());
               }
               return json{{"results", backend_.submit_answers(credential_of(req), subs)}};
           }));
    s.Get("/v1/supervisor/status", wrap([this](const httplib::Request& req) {
              return json(backend_.supervisor_status(credential_of(req)));
          }));
    s.Post(R"(/v1/supervisor/sync/([0-9A-Za-z]+))", wrap([this](const httplib::Request& req) {
               return json(backend_.trigger_sync(credential_of(req), path_id(req)));
           }));
    s.Delete(R"(/v1/participants/([0-9A-Za-z]+))", wrap([this](const httplib::Request& req) {
                 return json(backend_.erase_participant(credential_of(req), path_id(req)));
             }));
    s.Get("/v1/admin/identity", wrap([this](const httplib::Request& req) {
              return json{{"identities", backend_.identity_export(credential_of(req))}};
          }));
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) {
        int p = server_->bind_to_any_port(host);
        if (p < 0) throw Error(Errc::io_failure, "cannot bind " + host);
        return p;
    }
    if (!server_->bind_to_port(host, port)) throw Error(Errc::io_failure, "cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void HttpServer::run() { server_->listen_after_bind(); }

void HttpServer::stop() {
    if (server_) server_->stop();
}

// ---- client ----

HttpApi::HttpApi(const std::string& base_url, bool send_sim_time, int retries)
    : client_(std::make_unique<httplib::Client>(base_url)), send_sim_time_(send_sim_time), retries_(retries) {
    if (!client_->is_valid()) throw Error(Errc::validation_error, "bad server url " + base_url, "server");
    client_->set_connection_timeout(std::chrono::seconds(5));
    client_->set_read_timeout(std::chrono::seconds(60));
    client_->set_write_timeout(std::chrono::seconds(60));
    client_->set_keep_alive(true);
    client_->set_tcp_nodelay(true);
}

HttpApi::~HttpApi() = default;

std::pair<int, std::string> HttpApi::request(const std::string& method, const std::string& path,
                                             const std::string& credential, const std::string& body,
                                             const std::string& content_type) {
    std::lock_guard lock(mutex_);
    httplib::Headers headers;
    if (!credential.empty()) headers.emplace("Authorization", "Bearer " + credential);
    if (send_sim_time_) headers.emplace(kSimTimeHeader, std::to_string(now_));
    std::string last_error;
    for (int attempt = 0; attempt <= retries_; ++attempt) {
        if (attempt) std::this_thread::sleep_for(std::chrono::milliseconds(50 << (attempt - 1)));
        httplib::Result res;
        if (method == "GET") res = client_->Get(path, headers);
        else if (method == "POST") res = client_->Post(path, headers, body, content_type);
        else if (method == "DELETE") res = client_->Delete(path, headers);
        else throw Error(Errc::validation_error, "unsupported method " + method);
        if (res) return {res->status, res->body};
        last_error = httplib::to_string(res.error());
    }
    throw Error(Errc::backend_unavailable, method + " " + path + ": " + last_error);
}

namespace {
json checked(const std::pair<int, std::string>& r) {
    json body;
    try {
        body = json::parse(r.second);
    } catch (const json::exception&) {
        throw Error(Errc::backend_unavailable, "HTTP " + std::to_string(r.first) + " with a non-JSON body");
    }
    if (r.first == 200) return body;
    auto code = body.is_object() && body.contains("error")
                    ? errc_from_string(body["error"].get<std::string>()).value_or(Errc::io_failure)
                    : Errc::io_failure;
    std::string msg = body.is_object() ? body.value("message", "") : "";
    // The message already carries the "<Code>: " prefix of the server side.
    if (auto prefix = std::string(to_string(code)) + ": "; msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
    throw Error(code, msg, body.is_object() ? body.value("field", "") : "");
}

template <typename T>
T decode(const json& j) {
    try {
        return j.get<T>();
    } catch (const json::exception& e) {
        throw Error(Errc::backend_unavailable, std::string("unexpected response: ") + e.what());
    }
}
}  // namespace

Registration HttpApi::register_participant(const RegisterRequest& req) {
    return decode<Registration>(checked(request("POST", "/v1/register", "", json(req).dump())));
}

UploadReceipt HttpApi::upload_chunk(const std::string& token, ByteView chunk_bytes) {
    std::string body(reinterpret_cast<const char*>(chunk_bytes.data()), chunk_bytes.size());
    return decode<UploadReceipt>(checked(request("POST", "/v1/chunks", token, body, "application/octet-stream")));
}

TaskFeed HttpApi::fetch_tasks(const std::string& token, std::optional<TimestampMs> offline_since) {
    std::string path = "/v1/tasks";
    if (offline_since) path += "?offline_since=" + std::to_string(*offline_since);
    return decode<TaskFeed>(checked(request("GET", path, token, "")));
}

std::vector<AnswerStatus> HttpApi::submit_answers(const std::string& token,
                                                  const std::vector<AnswerSubmission>& answers) {
    auto body = checked(request("POST", "/v1/answers", token, json{{"answers", answers}}.dump()));
    return decode<std::vector<AnswerStatus>>(body.at("results"));
}

SupervisorStatus HttpApi::supervisor_status(const std::string& credential) {
    return decode<SupervisorStatus>(checked(request("GET", "/v1/supervisor/status", credential, "")));
}

SyncCommand HttpApi::trigger_sync(const std::string& credential, const Id128& pseudonym_id) {
    return decode<SyncCommand>(checked(request("POST", "/v1/supervisor/sync/" + pseudonym_id.hex(), credential, "")));
}

ErasureReport HttpApi::erase_participant(const std::string& credential, const Id128& pseudonym_id) {
    return decode<ErasureReport>(checked(request("DELETE", "/v1/participants/" + pseudonym_id.hex(), credential, "")));
}

std::vector<IdentityRecord> HttpApi::identity_export(const std::string& credential) {
    auto body = checked(request("GET", "/v1/admin/identity", credential, ""));
    return decode<std::vector<IdentityRecord>>(body.at("identities"));
}

}  // namespace ilog
