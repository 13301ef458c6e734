#include "cli.hpp"

#include "sketch3d/digest.hpp"
#include "sketch3d/evalkit.hpp"
#include "sketch3d/image.hpp"
#include "sketch3d/rasterizer.hpp"
#include "sketch3d/server.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

namespace sketch3d::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const std::string& what)
{
    if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void write_json(const fs::path& p, const nlohmann::json& j)
{
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

// Training flags shared by train and ablate.
struct TrainFlags {
    std::size_t epochs = TrainConfig{}.epochs;
    double lr = TrainConfig{}.lr;
    std::size_t views = TrainConfig{}.views;
    std::size_t batch = TrainConfig{}.batch_size;
    std::size_t res = 0;
    std::uint64_t seed = 0;
    std::string supervision = "pred";
    std::size_t checkpoint_every = 0;
    bool pose_gradient = false;

    void add_to(CLI::App& app)
    {
        app.add_option("--epochs", epochs, "training epochs")->capture_default_str();
        app.add_option("--lr", lr, "initial learning rate")->capture_default_str();
        app.add_option("--views", views, "camera poses sampled per mesh")->capture_default_str();
        app.add_option("--batch", batch, "sketches per step")->capture_default_str();
        app.add_option("--res", res, "image resolution (defaults to the dataset's)");
        app.add_option("--seed", seed, "random seed")->capture_default_str();
        app.add_option("--supervision", supervision, "pose used to render the supervised silhouette")
            ->check(CLI::IsMember({"gt", "pred"}))
            ->capture_default_str();
        app.add_option("--checkpoint-every", checkpoint_every, "epochs between intermediate checkpoints (0: final only)");
        app.add_flag("--pose-gradient", pose_gradient, "let the silhouette loss train the view predictor in pred mode");
    }

    TrainConfig config(const Dataset& data) const
    {
        TrainConfig c;
        c.model.resolution = res == 0 ? data.resolution() : res;
        c.model.disc_max_resolution = std::min(c.model.disc_max_resolution, c.model.resolution);
        c.model.disc_base_resolution = std::min(c.model.disc_base_resolution, c.model.disc_max_resolution);
        c.epochs = epochs;
        c.lr = lr;
        c.views = views;
        c.batch_size = batch;
        c.seed = seed;
        c.supervision = supervision_from_name(supervision);
        c.checkpoint_every = checkpoint_every;
        c.pose_gradient = pose_gradient;
        c.validate();
        return c;
    }
};

int cmd_gen(const fs::path& out_dir, const DatasetConfig& config, std::ostream& out)
{
    try {
        config.validate();
    } catch (const DatasetError& e) {
        throw UsageError(e.what());
    }
    const Manifest m = build_dataset(config, out_dir);
    std::size_t train = 0;
    for (const auto& s : m.samples) train += s.split == Split::train;
    out << "wrote " << m.samples.size() << " samples (" << train << " train, " << m.samples.size() - train
        << " test) to " << out_dir.string() << "\n";
    out << "manifest digest " << manifest_digest(out_dir) << "\n";
    return kOk;
}

int cmd_train(const fs::path& data_dir, const fs::path& out_dir, const TrainFlags& flags, bool no_rps, bool no_cd,
              const std::string& resume, std::ostream& out)
{
    const Dataset data = Dataset::load(data_dir);
    std::optional<Trainer> trainer;
    if (!resume.empty()) {
        require_file(resume, "checkpoint");
        trainer.emplace(Trainer::resume(load_checkpoint(resume), data));
        out << "resuming at epoch " << trainer->epoch() << " with the checkpoint's configuration\n";
    } else {
        TrainConfig config = flags.config(data);
        config.rps_on = !no_rps;
        config.cd_on = !no_cd;
        trainer.emplace(config, data);
    }
    const TrainConfig& config = trainer->config();
    fs::create_directories(out_dir);
    std::ofstream log(out_dir / kTrainLog, resume.empty() ? std::ios::trunc : std::ios::app);

    LossReport sum;
    double d_sum = 0.0;
    std::size_t steps = 0;
    const std::size_t per_epoch = trainer->steps_per_epoch();
    trainer->run(out_dir, &log, [&](const StepLog& s) {
        sum.sp += s.g.sp;
        sum.v += s.g.v;
        sum.r += s.g.r;
        sum.sd += s.g.sd;
        sum.total += s.g.total;
        d_sum += s.d_loss;
        if (++steps < per_epoch) return;
        const double n = static_cast<double>(steps);
        char line[256];
        std::snprintf(line, sizeof line, "epoch %zu/%zu  lr %.3g  sp %.4f  v %.4f  r %.4f  sd %.4f  d %.4f  total %.4f\n",
                      s.epoch + 1, config.epochs, s.lr, sum.sp / n, sum.v / n, sum.r / n, sum.sd / n, d_sum / n,
                      sum.total / n);
        out << line << std::flush;
        sum = {};
        d_sum = 0.0;
        steps = 0;
    });
    const fs::path final_path = out_dir / kFinalCheckpoint;
    out << "checkpoint " << final_path.string() << " sha256 " << file_sha256_hex(final_path.string()) << "\n";
    return kOk;
}

Tensor read_sketch(const fs::path& path, std::size_t resolution)
{
    require_file(path, "sketch");
    const GrayImage image = read_png(path);
    if (image.width != resolution || image.height != resolution) {
        throw UsageError("sketch is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                         ", the model expects " + std::to_string(resolution) + "x" + std::to_string(resolution));
    }
    return binarize(image, 0.5);
}

int cmd_infer(const fs::path& ckpt, const fs::path& in, const fs::path& out_mesh, const fs::path& out_pose,
              std::ostream& out)
{
    require_file(ckpt, "checkpoint");
    const auto model = InferenceModel::load(ckpt);
    const Prediction p = model.infer(read_sketch(in, model.resolution()));
    if (out_mesh.has_parent_path()) fs::create_directories(out_mesh.parent_path());
    write_obj(out_mesh, p.mesh);
    const nlohmann::json pose = p.pose;
    if (!out_pose.empty()) write_json(out_pose, pose);
    out << "mesh " << out_mesh.string() << " (" << p.mesh.vertex_count() << " vertices, " << p.mesh.faces.size()
        << " faces)\npose " << pose.dump() << "\n";
    return kOk;
}

int cmd_eval(const fs::path& data_dir, const fs::path& ckpt, bool reference, const std::string& mode,
             std::size_t voxel_res, const fs::path& json_path, std::ostream& out)
{
    if (ckpt.empty() == !reference) throw UsageError("give exactly one of --ckpt and --reference");
    const Dataset data = Dataset::load(data_dir);
    EvalTable table;
    if (reference) {
        table = evaluate_reference(data, voxel_res);
    } else {
        require_file(ckpt, "checkpoint");
        table = evaluate(InferenceModel::load(ckpt), data, pose_mode_from_name(mode), voxel_res);
    }
    out << table.to_text(reference ? "reference" : (mode == "gt" ? "GT pose" : "pred pose"));
    if (!json_path.empty()) write_json(json_path, table.to_json());
    return kOk;
}

int cmd_ablate(const fs::path& data_dir, const fs::path& out_dir, const TrainFlags& flags, std::size_t voxel_res,
               std::ostream& out)
{
    const Dataset data = Dataset::load(data_dir);
    const auto matrix = ablation_matrix(flags.config(data), data, out_dir, voxel_res,
                                        [&](const std::string& msg) { out << msg << "\n" << std::flush; });
    out << matrix.to_text();
    write_json(out_dir / "ablation.json", matrix.to_json());
    return kOk;
}

int cmd_render(const fs::path& obj, double elevation, double azimuth, double distance, std::size_t res,
               const std::vector<double>& sigmas, const fs::path& out_png, std::ostream& out)
{
    require_file(obj, "mesh");
    const Mesh mesh = read_obj(obj);
    if (res == 0) throw UsageError("--res must be positive");
    CameraPose pose;
    try {
        pose = CameraPose::normalized(elevation, azimuth, distance);
        pose.validate();
    } catch (const GeometryError& e) {
        throw UsageError(e.what());
    }
    const Tensor hard = hard_render(mesh, pose, res);

    GrayImage sheet;
    sheet.width = res * (1 + sigmas.size());
    sheet.height = res;
    sheet.pixels.assign(sheet.width * sheet.height, 0);
    const auto paste = [&](const Tensor& tile, std::size_t slot) {
        const GrayImage img = to_image(tile);
        for (std::size_t r = 0; r < res; ++r)
            for (std::size_t c = 0; c < res; ++c) sheet.pixels[r * sheet.width + slot * res + c] = img.at(r, c);
    };
    paste(hard, 0);
    out << "sigma        mean|soft-hard|\n";
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        NoGradGuard no_grad;
        const Tensor soft = soft_render(mesh, pose, res, sigmas[i]);
        double diff = 0.0;
        for (std::size_t k = 0; k < soft.numel(); ++k) diff += std::abs(soft[k] - hard[k]);
        char line[64];
        std::snprintf(line, sizeof line, "%-12.3g %.6f\n", sigmas[i], diff / static_cast<double>(soft.numel()));
        out << line;
        paste(soft, i + 1);
    }
    if (out_png.has_parent_path()) fs::create_directories(out_png.parent_path());
    write_png(out_png, sheet);
    out << "wrote " << out_png.string() << " (hard mask, then one soft tile per sigma)\n";
    return kOk;
}

int cmd_serve(const fs::path& ckpt, const ServerOptions& options, std::ostream& out, std::ostream& err)
{
    require_file(ckpt, "checkpoint");
    InferenceServer server(options);
    const int port = server.bind();
    std::atomic<bool> failed{false};
    std::string failure;
    server.load_async(ckpt, [&](std::exception_ptr e) {
        try {
            std::rethrow_exception(e);
        } catch (const std::exception& ex) {
            failure = ex.what();
        }
        failed = true;
        server.stop();
    });
    out << "listening on " << options.host << ":" << port << "\n" << std::flush;
    server.listen();
    server.stop();
    if (failed) {
        err << "error: " << failure << "\n";
        return kIntegrity;
    }
    return kOk;
}

template <class F>
int guarded(std::ostream& err, F&& body)
{
    try {
        return body();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << "\n";
        return kUsage;
    } catch (const NetworkError& e) {
        err << "configuration error: " << e.what() << "\n";
        return kUsage;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
        return kIntegrity;
    } catch (const DatasetError& e) {
        err << "dataset error: " << e.what() << "\n";
        return kIntegrity;
    } catch (const ImageError& e) {
        err << "image error: " << e.what() << "\n";
        return kIntegrity;
    } catch (const GeometryError& e) {
        err << "geometry error: " << e.what() << "\n";
        return kIntegrity;
    } catch (const LossError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const RasterError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const TensorError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Sketch-to-mesh reconstruction with view-aware adversarial training", "sketch3d"};
    app.require_subcommand(1);
    int code = kOk;

    auto* gen = app.add_subcommand("gen", "generate the procedural sketch dataset");
    fs::path gen_out;
    DatasetConfig dc;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--shapes", dc.shapes, "number of shapes")->capture_default_str();
    gen->add_option("--poses", dc.poses_per_shape, "poses per shape")->capture_default_str();
    gen->add_option("--res", dc.resolution, "image resolution")->capture_default_str();
    gen->add_option("--seed", dc.seed, "random seed")->capture_default_str();
    gen->add_option("--jitter", dc.jitter, "relative size jitter of primitives")->capture_default_str();
    gen->add_option("--noise", dc.sketch_noise, "probability of displacing a stroke pixel")->capture_default_str();
    gen->callback([&] { code = guarded(err, [&] { return cmd_gen(gen_out, dc, out); }); });

    auto* train = app.add_subcommand("train", "train the generator and discriminator");
    fs::path train_data, train_out;
    std::string resume;
    bool no_rps = false, no_cd = false;
    TrainFlags train_flags;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "output directory for checkpoints and the log")->required();
    train_flags.add_to(*train);
    train->add_flag("--no-rps", no_rps, "disable random pose sampling (and with it the discriminator)");
    train->add_flag("--no-cd", no_cd, "use the MLP discriminator instead of the progressive one");
    train->add_option("--resume", resume, "continue from this checkpoint");
    train->callback([&] {
        code = guarded(err, [&] { return cmd_train(train_data, train_out, train_flags, no_rps, no_cd, resume, out); });
    });

    auto* infer = app.add_subcommand("infer", "reconstruct a mesh from a sketch PNG");
    fs::path infer_ckpt, infer_in, infer_mesh, infer_pose;
    infer->add_option("--ckpt", infer_ckpt, "checkpoint")->required();
    infer->add_option("--in", infer_in, "sketch PNG")->required();
    infer->add_option("--out-mesh", infer_mesh, "output OBJ")->required();
    infer->add_option("--out-pose", infer_pose, "output pose JSON");
    infer->callback([&] { code = guarded(err, [&] { return cmd_infer(infer_ckpt, infer_in, infer_mesh, infer_pose, out); }); });

    auto* eval = app.add_subcommand("eval", "voxel IoU of the test split");
    fs::path eval_data, eval_ckpt, eval_json;
    bool eval_reference = false;
    std::string eval_mode = "gt";
    std::size_t eval_voxels = kDefaultVoxelResolution;
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate");
    eval->add_flag("--reference", eval_reference, "score the ground-truth meshes against themselves");
    eval->add_option("--mode", eval_mode, "pose that conditions the decoder")
        ->check(CLI::IsMember({"gt", "pred"}))
        ->capture_default_str();
    eval->add_option("--voxel-res", eval_voxels, "voxel grid resolution")->capture_default_str();
    eval->add_option("--json", eval_json, "write the table as JSON");
    eval->callback([&] {
        code = guarded(err, [&] {
            return cmd_eval(eval_data, eval_ckpt, eval_reference, eval_mode, eval_voxels, eval_json, out);
        });
    });

    auto* ablate = app.add_subcommand("ablate", "train and evaluate baseline, +RPS and +RPS+CD");
    fs::path ablate_data, ablate_out;
    TrainFlags ablate_flags;
    std::size_t ablate_voxels = kDefaultVoxelResolution;
    ablate->add_option("--data", ablate_data, "dataset directory")->required();
    ablate->add_option("--out", ablate_out, "output directory")->required();
    ablate_flags.add_to(*ablate);
    ablate->add_option("--voxel-res", ablate_voxels, "voxel grid resolution")->capture_default_str();
    ablate->callback([&] {
        code = guarded(err, [&] { return cmd_ablate(ablate_data, ablate_out, ablate_flags, ablate_voxels, out); });
    });

    auto* render = app.add_subcommand("render", "render soft and hard silhouettes of an OBJ");
    fs::path render_obj, render_out;
    double elevation = 0.0, azimuth = 0.0, distance = kCameraDistance;
    std::size_t render_res = 64;
    std::vector<double> sigmas{kDefaultSigma};
    render->add_option("--obj", render_obj, "mesh")->required();
    render->add_option("--elevation", elevation, "degrees")->capture_default_str();
    render->add_option("--azimuth", azimuth, "degrees")->capture_default_str();
    render->add_option("--distance", distance, "camera distance")->capture_default_str();
    render->add_option("--res", render_res, "image resolution")->capture_default_str();
    render->add_option("--sigma", sigmas, "one or more soft rasterizer sharpness values")->capture_default_str();
    render->add_option("--out", render_out, "contact sheet PNG")->required();
    render->callback([&] {
        code = guarded(err, [&] {
            return cmd_render(render_obj, elevation, azimuth, distance, render_res, sigmas, render_out, out);
        });
    });

    auto* serve = app.add_subcommand("serve", "HTTP inference service");
    fs::path serve_ckpt;
    ServerOptions options;
    serve->add_option("--ckpt", serve_ckpt, "checkpoint")->required();
    serve->add_option("--host", options.host, "listen address")->capture_default_str();
    serve->add_option("--port", options.port, "listen port")->capture_default_str();
    serve->add_option("--cors-origin", options.cors_origin, "Access-Control-Allow-Origin value")->capture_default_str();
    serve->callback([&] { code = guarded(err, [&] { return cmd_serve(serve_ckpt, options, out, err); }); });

    std::vector<const char*> argv{"sketch3d"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int status = app.exit(e, out, err);
        return status == 0 ? kOk : kUsage;
    }
    return code;
}

}  // namespace sketch3d::cli
