#pragma once

#include "sketch3d/pipeline.hpp"

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>

namespace httplib {
class Server;
}

namespace sketch3d {

inline constexpr int kDefaultPort = 8472;
// Sketches with fewer foreground pixels are rejected as empty.
inline constexpr std::size_t kMinSketchPixels = 10;

struct HttpReply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

// GET /health. A null model means the checkpoint is still loading.
HttpReply health_reply(const InferenceModel* model);

// POST /infer. `body` is either JSON {"sketch_png_base64": ..., "resolution": n?}
// or, with an image/png or application/octet-stream content type, the PNG itself.
// Foreground is every pixel at or above half intensity.
HttpReply infer_reply(const InferenceModel& model, std::string_view body, std::string_view content_type);

struct ServerOptions {
    std::string host = "0.0.0.0";
    int port = kDefaultPort;
    std::string cors_origin = "*";
};

// HTTP front end serving one read-only model. Requests may run concurrently.
class InferenceServer {
public:
    explicit InferenceServer(ServerOptions options);
    ~InferenceServer();
    InferenceServer(const InferenceServer&) = delete;
    InferenceServer& operator=(const InferenceServer&) = delete;

    void set_model(std::shared_ptr<const InferenceModel> model);
    // Loads the checkpoint on a background thread; /health answers 503 until it
    // finishes. On failure `on_error` receives the exception.
    void load_async(std::filesystem::path checkpoint, std::function<void(std::exception_ptr)> on_error = {});
    bool ready() const;

    // Binds the listening socket and returns the bound port (useful with port 0).
    int bind();
    // Serves until stop(); bind() must have succeeded. Returns at once if stop()
    // came first.
    void listen();
    // Safe from any thread, including the loader's error callback.
    void stop();

private:
    std::shared_ptr<const InferenceModel> model() const;

    ServerOptions options_;
    std::unique_ptr<httplib::Server> http_;
    mutable std::mutex mutex_;
    std::shared_ptr<const InferenceModel> model_;
    std::atomic<bool> stop_requested_{false}, entered_listen_{false}, left_listen_{false};
    std::jthread loader_;
};

}  // namespace sketch3d
