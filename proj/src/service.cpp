#include "lvlmlens/service.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <httplib.h>

#include "lvlmlens/digest.hpp"
#include "lvlmlens/payloads.hpp"
#include "lvlmlens/tar.hpp"

namespace fs = std::filesystem;

namespace lvlmlens::service {

using nlohmann::json;

namespace {

Response json_response(int status, const json& doc) { return {status, "application/json", payloads::dump(doc)}; }

Response error_response(int status, std::string_view code, const std::string& message) {
    return json_response(status, payloads::error(code, message));
}

Response png_response(std::vector<std::uint8_t> png) {
    return {200, "image/png", std::string(png.begin(), png.end())};
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(path);
    while (std::getline(in, item, '/'))
        if (!item.empty()) parts.push_back(item);
    return parts;
}

const std::string* param(const Params& params, const std::string& name) {
    auto it = params.find(name);
    return it == params.end() ? nullptr : &it->second;
}

const std::string& require(const Params& params, const std::string& name) {
    if (const auto* v = param(params, name)) return *v;
    throw Error(ErrorCode::BadParams, "missing parameter '" + name + "'");
}

int int_param(const Params& params, const std::string& name, int fallback) {
    const auto* v = param(params, name);
    return v ? payloads::parse_int(*v, name.c_str()) : fallback;
}

double double_param(const Params& params, const std::string& name, double fallback) {
    const auto* v = param(params, name);
    return v ? payloads::parse_double(*v, name.c_str()) : fallback;
}

// Thrown for token indices that name nothing in the trace.
struct UnknownToken {
    std::string message;
};

int token_param(const Params& params, const trace::Trace& t, const std::string& name = "token") {
    const int token = payloads::parse_int(require(params, name), name.c_str());
    if (token < 0 || token >= t.seq_len) throw UnknownToken{"token " + std::to_string(token) + " not in trace"};
    return token;
}

int generated_param(const Params& params, const trace::Trace& t) {
    const int g = token_param(params, t);
    if (!t.is_generated(g)) throw UnknownToken{"token " + std::to_string(g) + " is not generated"};
    return g;
}

attn::Colormap colormap_param(const Params& params) {
    const auto* v = param(params, "colormap");
    if (!v) return attn::Colormap::Viridis;
    if (auto cm = attn::parse_colormap(*v)) return *cm;
    throw Error(ErrorCode::BadParams, "unknown colormap '" + *v + "'");
}

trace::HeadSelector head_param(const Params& params) {
    const auto* v = param(params, "head");
    return v ? trace::HeadSelector::parse(*v) : trace::HeadSelector::mean();
}

std::vector<int> tokens_param(const Params& params, const trace::Trace& t) {
    const auto* v = param(params, "tokens");
    std::vector<int> tokens = v ? payloads::parse_int_list(*v) : t.generated_indices;
    for (int tok : tokens)
        if (tok < 0 || tok >= t.seq_len) throw UnknownToken{"token " + std::to_string(tok) + " not in trace"};
    return tokens;
}

std::string cache_key(const std::string& id, const std::string& op, const Params& params) {
    std::string key = id + "/" + op + "?";
    for (const auto& [k, v] : params) key += k + "=" + v + "&";  // std::map: sorted by name
    return key;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, "cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh_temp_dir() {
    static std::atomic<unsigned> counter{0};
    std::random_device rd;
    const fs::path dir = fs::temp_directory_path() /
                         ("lvlmlens-upload-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    fs::create_directories(dir);
    return dir;
}

}  // namespace

// ---- cache ----

std::optional<Response> ResponseCache::get(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second);
    ++hits_;
    return it->second->second;
}

void ResponseCache::put(const std::string& key, const Response& value) {
    if (capacity_ == 0) return;
    std::lock_guard lock(mutex_);
    if (auto it = index_.find(key); it != index_.end()) {
        it->second->second = value;
        order_.splice(order_.begin(), order_, it->second);
        return;
    }
    order_.emplace_front(key, value);
    index_[key] = order_.begin();
    while (order_.size() > capacity_) {
        index_.erase(order_.back().first);
        order_.pop_back();
    }
}

void ResponseCache::drop_prefix(const std::string& prefix) {
    std::lock_guard lock(mutex_);
    for (auto it = order_.begin(); it != order_.end();) {
        if (it->first.starts_with(prefix)) {
            index_.erase(it->first);
            it = order_.erase(it);
        } else {
            ++it;
        }
    }
}

std::size_t ResponseCache::size() const {
    std::lock_guard lock(mutex_);
    return order_.size();
}

std::size_t ResponseCache::hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
}

// ---- sessions ----

std::shared_ptr<TraceSession> open_session(const fs::path& dir, trace::ValidationReport& report) {
    report = trace::validate_trace(dir);
    if (!report.ok()) return nullptr;
    auto session = std::make_shared<TraceSession>();
    session->manifest = read_file(dir / "manifest.json");
    session->trace_id = sha256_hex(std::string_view(session->manifest));
    session->trace = std::make_shared<const trace::Trace>(trace::load_trace(dir));
    session->created_at = std::chrono::system_clock::now();
    return session;
}

Service::Service(ServiceConfig config) : config_(std::move(config)), cache_(config_.cache_entries) {
    if (!config_.log) config_.log = &std::cerr;
    if (!config_.traces_dir.empty()) {
        std::error_code ec;
        if (!fs::is_directory(config_.traces_dir, ec))
            throw Error(ErrorCode::BadTracesDir, config_.traces_dir.string() + " is not a directory");
        fs::directory_iterator probe(config_.traces_dir, ec);
        if (ec) throw Error(ErrorCode::BadTracesDir, config_.traces_dir.string() + ": " + ec.message());
        preload();
    }
}

Service::~Service() { stop(); }

void Service::log(const std::string& line) {
    std::lock_guard lock(log_mutex_);
    *config_.log << "[lvlmlens] " << line << std::endl;
}

void Service::preload() {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(config_.traces_dir))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
        try {
            trace::ValidationReport report;
            auto session = open_session(dir, report);
            if (!session) {
                log("skipping " + dir.string() + ": " + report.errors.front().message);
                continue;
            }
            if (!insert(session)) {
                log("skipping " + dir.string() + ": registry full");
                continue;
            }
            log("loaded " + dir.string() + " as " + session->trace_id);
        } catch (const std::exception& e) {
            log("skipping " + dir.string() + ": " + e.what());
        }
    }
}

bool Service::insert(std::shared_ptr<const TraceSession> session) {
    std::unique_lock lock(registry_mutex_);
    if (sessions_.contains(session->trace_id)) return true;
    if (sessions_.size() >= config_.max_traces) return false;
    sessions_.emplace(session->trace_id, std::move(session));
    return true;
}

std::shared_ptr<const TraceSession> Service::find(const std::string& id) const {
    std::shared_lock lock(registry_mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

std::vector<std::string> Service::trace_ids() const {
    std::shared_lock lock(registry_mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, s] : sessions_) ids.push_back(id);
    return ids;
}

// ---- routing ----

Response Service::list_traces() const {
    json list = json::array();
    {
        std::shared_lock lock(registry_mutex_);
        for (const auto& [id, s] : sessions_) list.push_back(payloads::trace_listing(id, *s->trace));
    }
    return json_response(200, list);
}

Response Service::upload(const std::string& body) {
    if (body.size() > config_.max_upload_bytes)
        return error_response(413, "TooLarge", "archive exceeds " + std::to_string(config_.max_upload_bytes) + " bytes");
    const fs::path tmp = fresh_temp_dir();
    struct Cleanup {
        fs::path p;
        ~Cleanup() {
            std::error_code ec;
            fs::remove_all(p, ec);
        }
    } cleanup{tmp};

    trace::ValidationReport report;
    std::shared_ptr<TraceSession> session;
    try {
        tar::unpack({reinterpret_cast<const std::uint8_t*>(body.data()), body.size()}, tmp);
        session = open_session(tar::find_container_root(tmp), report);
    } catch (const Error& e) {
        report.errors.push_back({e.code(), e.what(), "archive"});
    }
    if (!session) {
        json doc = payloads::error("ValidationFailed", report.errors.front().message);
        doc["code"] = std::string(to_string(report.errors.front().code));
        doc["report"] = report.to_json();
        return json_response(422, doc);
    }
    const std::string id = session->trace_id;
    if (!insert(session))
        return error_response(507, "RegistryFull", "already holding " + std::to_string(config_.max_traces) + " traces");
    log("uploaded " + id);
    json doc = {{"trace_id", id}, {"engine_version", payloads::kEngineVersion}};
    return json_response(201, doc);
}

Response Service::analysis(const TraceSession& session, const std::string& op, const Params& params) {
    const trace::Trace& t = *session.trace;
    if (op == "attention") {
        const std::string mode = param(params, "mode") ? *param(params, "mode") : "img2q";
        const int layer = int_param(params, "layer", t.num_layers - 1);
        if (mode == "img2q") return json_response(200, payloads::img2q(t, tokens_param(params, t), layer, head_param(params)));
        if (mode == "q2img")
            return json_response(
                200, payloads::q2img(t, payloads::parse_patch_list(require(params, "patches")), layer, head_param(params)));
        throw Error(ErrorCode::BadParams, "mode must be img2q or q2img");
    }
    if (op == "attention/summary") return json_response(200, payloads::summary(t, token_param(params, t)));
    if (op == "relevancy") {
        relevancy::LayerRange range{int_param(params, "layer_begin", 0), int_param(params, "layer_end", -1)};
        return json_response(200, payloads::relevancy(t, generated_param(params, t), range));
    }
    if (op == "causal") {
        causal::CausalParams p;
        const int g = generated_param(params, t);
        p.k = int_param(params, "k", p.k);
        p.alpha = double_param(params, "alpha", p.alpha);
        p.head = int_param(params, "head", p.head);
        p.radius = int_param(params, "radius", p.radius);
        p.max_cond_size = int_param(params, "max_cond", p.max_cond_size);
        if (const auto* v = param(params, "n_eff")) p.n_eff = payloads::parse_double(*v, "n_eff");
        if (const auto* v = param(params, "filter")) {
            auto f = causal::parse_filter(*v);
            if (!f) throw Error(ErrorCode::BadParams, "unknown filter '" + *v + "'");
            p.filter = *f;
        }
        if (const auto* v = param(params, "feature_axis")) {
            auto a = causal::parse_feature_axis(*v);
            if (!a) throw Error(ErrorCode::BadParams, "unknown feature_axis '" + *v + "'");
            p.feature_axis = *a;
        }
        return json_response(200, payloads::causal(t, causal::explain_token(t, g, p)));
    }
    if (op == "render/relevancy.png")
        return png_response(payloads::relevancy_png(t, generated_param(params, t), double_param(params, "alpha", 0.5),
                                                    colormap_param(params)));
    if (op == "render/attention.png")
        return png_response(payloads::attention_png(t, tokens_param(params, t),
                                                    int_param(params, "layer", t.num_layers - 1), head_param(params),
                                                    double_param(params, "alpha", 0.5), colormap_param(params)));
    return error_response(404, "NotFound", "no endpoint " + op);
}

Response Service::handle(const std::string& method, const std::string& path, const Params& params,
                         const std::string& body) {
    const auto parts = split_path(path);
    if (parts.size() < 2 || parts[0] != "api" || parts[1] != "traces")
        return error_response(404, "NotFound", "no endpoint " + path);

    if (parts.size() == 2) {
        if (method == "GET") return list_traces();
        if (method == "POST") return upload(body);
        return error_response(405, "MethodNotAllowed", method + " " + path);
    }

    const std::string& id = parts[2];
    auto session = find(id);
    if (!session) return error_response(404, "UnknownTrace", "no trace " + id);

    if (parts.size() == 3) {
        if (method != "DELETE") return error_response(405, "MethodNotAllowed", method + " " + path);
        {
            std::unique_lock lock(registry_mutex_);
            sessions_.erase(id);
        }
        cache_.drop_prefix(id + "/");
        log("deleted " + id);
        return json_response(200, {{"deleted", id}, {"engine_version", payloads::kEngineVersion}});
    }
    if (method != "GET") return error_response(405, "MethodNotAllowed", method + " " + path);

    std::string op = parts[3];
    for (std::size_t i = 4; i < parts.size(); ++i) op += "/" + parts[i];

    if (op == "manifest") {
        json doc = json::parse(session->manifest);
        doc["engine_version"] = payloads::kEngineVersion;
        return json_response(200, doc);
    }
    if (op == "image") {
        const auto& img = session->trace->image;
        if (!img || img->png.empty()) return error_response(404, "NoImage", "trace has no image");
        return png_response(img->png);
    }

    const std::string key = cache_key(id, op, params);
    if (auto hit = cache_.get(key)) return *hit;
    Response res;
    try {
        res = analysis(*session, op, params);
    } catch (const UnknownToken& e) {
        return error_response(404, "UnknownToken", e.message);
    } catch (const Error& e) {
        switch (e.code()) {
            case ErrorCode::NotAGeneratedToken: return error_response(404, "UnknownToken", e.what());
            case ErrorCode::NoImage: return error_response(404, "NoImage", e.what());
            default: return error_response(422, to_string(e.code()), e.what());
        }
    }
    if (res.status == 200) cache_.put(key, res);
    return res;
}

// ---- transport ----

void Service::bind() {
    server_ = std::make_unique<httplib::Server>();
    server_->set_payload_max_length(config_.max_upload_bytes);
    // httplib defaults to SO_REUSEPORT, which would let a second server share the port silently.
    server_->set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
        Params params;
        for (const auto& [k, v] : req.params) params.emplace(k, v);  // first value wins
        Response r;
        try {
            r = handle(req.method, req.path, params, req.body);
        } catch (const std::exception& e) {
            log(std::string("internal error: ") + e.what());
            r = error_response(500, "Internal", e.what());
        }
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    server_->Get(".*", route);
    server_->Post(".*", route);
    server_->Delete(".*", route);
    server_->set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
        const std::string code = res.status == 413 ? "TooLarge" : "Http" + std::to_string(res.status);
        res.set_content(payloads::dump(payloads::error(code, "request rejected")), "application/json");
        return httplib::Server::HandlerResponse::Handled;
    });

    if (config_.port == 0) {
        bound_port_ = server_->bind_to_any_port(config_.host);
        if (bound_port_ <= 0) throw Error(ErrorCode::PortInUse, "no free port on " + config_.host);
    } else {
        if (!server_->bind_to_port(config_.host, config_.port))
            throw Error(ErrorCode::PortInUse, config_.host + ":" + std::to_string(config_.port) + " unavailable");
        bound_port_ = config_.port;
    }
    log("listening on " + config_.host + ":" + std::to_string(bound_port_));
}

void Service::start() {
    bind();
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
}

void Service::run() {
    bind();
    server_->listen_after_bind();
}

void Service::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace lvlmlens::service
