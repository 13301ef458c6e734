#include "sketch3d/server.hpp"

#include "sketch3d/digest.hpp"
#include "sketch3d/image.hpp"
#include "sketch3d/rasterizer.hpp"

#include <httplib.h>

#include <cmath>
#include <sstream>

namespace sketch3d {

namespace {

HttpReply json_reply(int status, const nlohmann::json& body) { return {status, "application/json", body.dump()}; }

HttpReply error_reply(int status, const std::string& message, nlohmann::json extra = nlohmann::json::object())
{
    extra["error"] = message;
    return json_reply(status, extra);
}

bool is_raw_image(std::string_view content_type)
{
    return content_type.starts_with("image/png") || content_type.starts_with("application/octet-stream");
}

}  // namespace

HttpReply health_reply(const InferenceModel* model)
{
    if (!model) return json_reply(503, {{"status", "loading"}});
    return json_reply(200, {{"status", "ready"},
                            {"checkpoint_digest", model->digest()},
                            {"model_resolution", model->resolution()}});
}

HttpReply infer_reply(const InferenceModel& model, std::string_view body, std::string_view content_type)
{
    const std::size_t res = model.resolution();
    std::vector<std::uint8_t> png;
    if (is_raw_image(content_type)) {
        png.assign(body.begin(), body.end());
    } else {
        nlohmann::json request;
        try {
            request = nlohmann::json::parse(body);
        } catch (const nlohmann::json::parse_error&) {
            return error_reply(400, "request body is neither JSON nor a PNG image");
        }
        if (!request.is_object() || !request.contains("sketch_png_base64") || !request["sketch_png_base64"].is_string()) {
            return error_reply(400, "missing sketch_png_base64");
        }
        if (request.contains("resolution")) {
            const auto& r = request["resolution"];
            if (!r.is_number_integer() || r.get<std::int64_t>() != static_cast<std::int64_t>(res)) {
                return error_reply(422, "model resolution is " + std::to_string(res), {{"expected_resolution", res}});
            }
        }
        try {
            png = base64_decode(request["sketch_png_base64"].get<std::string>());
        } catch (const std::invalid_argument&) {
            return error_reply(400, "sketch_png_base64 is not valid base64");
        }
    }

    GrayImage image;
    try {
        image = decode_png(png);
    } catch (const ImageError& e) {
        return error_reply(400, std::string("undecodable image: ") + e.what());
    }
    if (image.width != res || image.height != res) {
        return error_reply(422,
                           "sketch is " + std::to_string(image.width) + "x" + std::to_string(image.height) + ", expected " +
                               std::to_string(res) + "x" + std::to_string(res),
                           {{"expected_resolution", res}});
    }
    const Tensor sketch = binarize(image, 0.5);
    std::size_t foreground = 0;
    for (double v : sketch.values()) foreground += v == 1.0;
    if (foreground < kMinSketchPixels) return error_reply(422, "empty sketch");

    try {
        const Prediction p = model.infer(sketch);
        for (double v : p.mesh.vertices.values())
            if (!std::isfinite(v)) return error_reply(500, "inference produced non-finite vertices");
        std::ostringstream obj;
        write_obj(obj, p.mesh);
        const double iou = silhouette_iou(hard_render(p.mesh, p.pose, res), fill_sketch(sketch));
        return json_reply(200, {{"mesh_obj", obj.str()}, {"pose", p.pose}, {"iou_preview", iou}});
    } catch (const std::exception& e) {
        return error_reply(500, std::string("inference failed: ") + e.what());
    }
}

InferenceServer::InferenceServer(ServerOptions options)
    : options_(std::move(options)), http_(std::make_unique<httplib::Server>())
{
    const auto send = [](httplib::Response& res, const HttpReply& reply) {
        res.status = reply.status;
        res.set_content(reply.body, reply.content_type);
    };
    http_->set_default_headers({{"Access-Control-Allow-Origin", options_.cors_origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    http_->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    http_->Get("/health", [this, send](const httplib::Request&, httplib::Response& res) {
        const auto m = model();
        send(res, health_reply(m.get()));
    });
    http_->Post("/infer", [this, send](const httplib::Request& req, httplib::Response& res) {
        const auto m = model();
        if (!m) return send(res, health_reply(nullptr));
        send(res, infer_reply(*m, req.body, req.get_header_value("Content-Type")));
    });
}

InferenceServer::~InferenceServer() { stop(); }

void InferenceServer::set_model(std::shared_ptr<const InferenceModel> model)
{
    std::lock_guard lock(mutex_);
    model_ = std::move(model);
}

std::shared_ptr<const InferenceModel> InferenceServer::model() const
{
    std::lock_guard lock(mutex_);
    return model_;
}

bool InferenceServer::ready() const { return model() != nullptr; }

void InferenceServer::load_async(std::filesystem::path checkpoint, std::function<void(std::exception_ptr)> on_error)
{
    loader_ = std::jthread([this, checkpoint = std::move(checkpoint), on_error = std::move(on_error)] {
        try {
            set_model(std::make_shared<const InferenceModel>(InferenceModel::load(checkpoint)));
        } catch (...) {
            if (on_error) on_error(std::current_exception());
        }
    });
}

int InferenceServer::bind()
{
    const int port = options_.port == 0 ? http_->bind_to_any_port(options_.host)
                                        : (http_->bind_to_port(options_.host, options_.port) ? options_.port : -1);
    if (port < 0) throw std::runtime_error("cannot listen on " + options_.host + ":" + std::to_string(options_.port));
    return port;
}

void InferenceServer::listen()
{
    entered_listen_ = true;
    if (!stop_requested_) http_->listen_after_bind();
    left_listen_ = true;
}

void InferenceServer::stop()
{
    stop_requested_ = true;
    // a concurrent listen() may not have started serving yet
    if (entered_listen_) {
        while (!http_->is_running() && !left_listen_) std::this_thread::yield();
    }
    http_->stop();
    if (loader_.joinable() && loader_.get_id() != std::this_thread::get_id()) loader_.join();
}

}  // namespace sketch3d
