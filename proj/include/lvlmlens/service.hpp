#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "lvlmlens/trace.hpp"

namespace httplib {
class Server;
}

namespace lvlmlens::service {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::filesystem::path traces_dir;  // empty: start with no traces
    std::size_t max_traces = 64;
    std::size_t max_upload_bytes = std::size_t{256} << 20;
    std::size_t cache_entries = 256;
    std::ostream* log = nullptr;  // defaults to std::cerr
};

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

using Params = std::map<std::string, std::string>;

struct TraceSession {
    std::string trace_id;
    std::shared_ptr<const trace::Trace> trace;
    std::string manifest;  // exact bytes the id was derived from
    std::chrono::system_clock::time_point created_at;
};

/// Bounded LRU keyed by (trace, operation, parameters).
class ResponseCache {
public:
    explicit ResponseCache(std::size_t capacity) : capacity_(capacity) {}

    std::optional<Response> get(const std::string& key);
    void put(const std::string& key, const Response& value);
    void drop_prefix(const std::string& prefix);
    std::size_t size() const;
    std::size_t hits() const;

private:
    using Entry = std::pair<std::string, Response>;
    mutable std::mutex mutex_;
    std::size_t capacity_;
    std::size_t hits_ = 0;
    std::list<Entry> order_;  // most recent first
    std::unordered_map<std::string, std::list<Entry>::iterator> index_;
};

class Service {
public:
    /// Pre-loads every valid container under traces_dir; invalid ones are logged and skipped.
    /// Throws BadTracesDir when traces_dir is set but not a readable directory.
    explicit Service(ServiceConfig config);
    ~Service();

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Routes one request. Safe to call from many threads.
    Response handle(const std::string& method, const std::string& path, const Params& params,
                    const std::string& body);

    /// Binds and serves on a background thread. Throws PortInUse.
    void start();
    /// Blocks serving on the calling thread. Throws PortInUse.
    void run();
    void stop();
    int port() const noexcept { return bound_port_; }

    std::vector<std::string> trace_ids() const;
    const ResponseCache& cache() const noexcept { return cache_; }

private:
    Response list_traces() const;
    Response upload(const std::string& body);
    Response analysis(const TraceSession& session, const std::string& op, const Params& params);
    std::shared_ptr<const TraceSession> find(const std::string& id) const;
    bool insert(std::shared_ptr<const TraceSession> session);
    void preload();
    void bind();
    void log(const std::string& line);

    ServiceConfig config_;
    mutable std::shared_mutex registry_mutex_;
    std::map<std::string, std::shared_ptr<const TraceSession>> sessions_;
    ResponseCache cache_;
    std::mutex log_mutex_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    int bound_port_ = 0;
};

/// Loads a container directory into a session, or returns the validation report on failure.
std::shared_ptr<TraceSession> open_session(const std::filesystem::path& dir, trace::ValidationReport& report);

}  // namespace lvlmlens::service
