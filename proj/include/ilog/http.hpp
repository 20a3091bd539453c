#pragma once

#include "ilog/api.hpp"

#include <memory>
#include <mutex>
#include <string>

namespace httplib {
class Server;
class Client;
}  // namespace httplib

namespace ilog {

inline constexpr const char* kSimTimeHeader = "X-Ilog-Sim-Time";

/// HTTP front of a Backend. With `sim_clock` set the server runs on
/// simulation time taken from the X-Ilog-Sim-Time request header, and
/// requests are serialized.
class HttpServer {
public:
    explicit HttpServer(Backend& backend, ManualClock* sim_clock = nullptr);
    ~HttpServer();

    /// Binds; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop(). Call after bind().
    void run();
    void stop();

private:
    Backend& backend_;
    ManualClock* sim_clock_;
    std::mutex sim_mutex_;
    std::unique_ptr<httplib::Server> server_;
};

/// Client side of the HTTP API. Transport failures after `retries`
/// attempts become BackendUnavailable; server errors are rethrown with
/// their original code.
class HttpApi final : public BackendApi {
public:
    explicit HttpApi(const std::string& base_url, bool send_sim_time = false, int retries = 3);
    ~HttpApi() override;

    void set_time(TimestampMs now) override { now_ = now; }
    Registration register_participant(const RegisterRequest& req) override;
    UploadReceipt upload_chunk(const std::string& token, ByteView chunk_bytes) override;
    TaskFeed fetch_tasks(const std::string& token, std::optional<TimestampMs> offline_since) override;
    std::vector<AnswerStatus> submit_answers(const std::string& token,
                                             const std::vector<AnswerSubmission>& answers) override;

    SupervisorStatus supervisor_status(const std::string& credential);
    SyncCommand trigger_sync(const std::string& credential, const Id128& pseudonym_id);
    ErasureReport erase_participant(const std::string& credential, const Id128& pseudonym_id);
    std::vector<IdentityRecord> identity_export(const std::string& credential);

    /// Raw request for tests: returns (status, body).
    std::pair<int, std::string> request(const std::string& method, const std::string& path,
                                        const std::string& credential, const std::string& body,
                                        const std::string& content_type = "application/json");

private:
    std::unique_ptr<httplib::Client> client_;
    bool send_sim_time_;
    int retries_;
    TimestampMs now_ = 0;
    std::mutex mutex_;
};

}  // namespace ilog
