#include <doctest.h>

#include "cli.hpp"
#include "sketch3d/dataset.hpp"
#include "sketch3d/image.hpp"
#include "sketch3d/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <regex>
#include <set>
#include <sstream>

using namespace sketch3d;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string file_bytes(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// 12 shapes x 2 poses at 16 x 16, generated once through the CLI.
const fs::path& small_data()
{
    static const TempDir dir("sketch3d_test_cli_data");
    static const bool built = [] {
        const auto r = run({"gen", "--out", dir.path.string(), "--shapes", "12", "--poses", "2", "--res", "16",
                            "--seed", "4"});
        REQUIRE(r.code == 0);
        return true;
    }();
    (void)built;
    return dir.path;
}

// One epoch of training on the small dataset.
const fs::path& small_checkpoint()
{
    static const TempDir dir("sketch3d_test_cli_model");
    static const fs::path ckpt = [] {
        const auto r = run({"train", "--data", small_data().string(), "--out", dir.path.string(), "--epochs", "1",
                            "--seed", "2", "--lr", "1e-3"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        return dir.path / kFinalCheckpoint;
    }();
    return ckpt;
}

fs::path write_sketch(const TempDir& dir, const std::string& name, std::size_t size)
{
    const Dataset data = Dataset::load(small_data());
    GrayImage img;
    if (size == data.resolution()) {
        img = to_image(data.samples.front().sketch);
    } else {
        img.width = img.height = size;
        img.pixels.assign(size * size, 255);
    }
    const fs::path p = dir.path / name;
    fs::create_directories(dir.path);
    write_png(p, img);
    return p;
}

}  // namespace

TEST_CASE("usage errors exit with 2")
{
    CHECK(run({}).code == cli::kUsage);
    CHECK(run({"frobnicate"}).code == cli::kUsage);
    CHECK(run({"gen"}).code == cli::kUsage);
    CHECK(run({"train", "--data", "x"}).code == cli::kUsage);
    CHECK(run({"eval", "--data", small_data().string(), "--mode", "sideways", "--reference"}).code == cli::kUsage);
    CHECK(run({"--help"}).code == cli::kOk);
}

TEST_CASE("gen writes a dataset and reports a reproducible digest")
{
    const auto r = run({"gen", "--out", small_data().string() + "_again", "--shapes", "12", "--poses", "2", "--res",
                        "16", "--seed", "4"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("wrote 24 samples") != std::string::npos);
    CHECK(r.out.find("manifest digest " + manifest_digest(small_data())) != std::string::npos);

    const Manifest m = load_manifest(small_data());
    std::size_t train = 0;
    for (const auto& s : m.samples) train += s.split == Split::train;
    CHECK(r.out.find("(" + std::to_string(train) + " train, " + std::to_string(24 - train) + " test)") !=
          std::string::npos);
    fs::remove_all(small_data().string() + "_again");

    TempDir bad("sketch3d_test_cli_bad");
    CHECK(run({"gen", "--out", bad.path.string(), "--shapes", "0"}).code == cli::kUsage);
    CHECK(run({"gen", "--out", bad.path.string(), "--res", "0"}).code == cli::kUsage);
}

TEST_CASE("train writes a checkpoint and a log")
{
    const fs::path& ckpt = small_checkpoint();
    CHECK(fs::is_regular_file(ckpt));
    const auto log = file_bytes(ckpt.parent_path() / kTrainLog);
    CHECK(!log.empty());
    const auto model = InferenceModel::load(ckpt);
    CHECK(model.resolution() == 16);

    TempDir dir("sketch3d_test_cli_train");
    CHECK(run({"train", "--data", small_data().string(), "--out", dir.path.string(), "--epochs", "1", "--res", "32"})
              .code == cli::kUsage);
    CHECK(run({"train", "--data", small_data().string(), "--out", dir.path.string(), "--supervision", "both"}).code ==
          cli::kUsage);
    CHECK(run({"train", "--data", small_data().string(), "--out", dir.path.string(), "--epochs", "0"}).code ==
          cli::kUsage);
    CHECK(run({"train", "--data", (dir.path / "missing").string(), "--out", dir.path.string()}).code ==
          cli::kIntegrity);
}

TEST_CASE("train prints one summary per epoch and resumes to the same result")
{
    TempDir dir("sketch3d_test_cli_resume");
    const std::vector<std::string> common{"--data", small_data().string(), "--epochs", "2", "--seed", "9",
                                          "--checkpoint-every", "1", "--no-cd", "--batch", "4"};
    auto args = common;
    args.insert(args.begin(), {"train", "--out", dir / "full"});
    const auto full = run(args);
    REQUIRE_MESSAGE(full.code == 0, full.err);
    CHECK(full.out.find("epoch 1/2") != std::string::npos);
    CHECK(full.out.find("epoch 2/2") != std::string::npos);
    CHECK(full.out.find("epoch 3/2") == std::string::npos);
    REQUIRE(fs::is_regular_file(dir.path / "full" / "epoch_00001.skf"));

    const auto resumed = run({"train", "--data", small_data().string(), "--out", dir / "resumed", "--resume",
                              dir / "full/epoch_00001.skf"});
    REQUIRE_MESSAGE(resumed.code == 0, resumed.err);
    CHECK(resumed.out.find("resuming at epoch 1") != std::string::npos);
    CHECK(resumed.out.find("epoch 1/2") == std::string::npos);
    CHECK(resumed.out.find("epoch 2/2") != std::string::npos);
    CHECK(file_bytes(dir.path / "full" / kFinalCheckpoint) == file_bytes(dir.path / "resumed" / kFinalCheckpoint));

    CHECK(run({"train", "--data", small_data().string(), "--out", dir / "x", "--resume", dir / "nope.skf"}).code ==
          cli::kUsage);
}

TEST_CASE("infer writes a closed mesh and the predicted pose")
{
    TempDir dir("sketch3d_test_cli_infer");
    const auto sketch = write_sketch(dir, "sketch.png", 16);
    const auto r = run({"infer", "--ckpt", small_checkpoint().string(), "--in", sketch.string(), "--out-mesh",
                        dir / "out/mesh.obj", "--out-pose", dir / "out/pose.json"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const Mesh mesh = read_obj(fs::path(dir / "out/mesh.obj"));
    CHECK(is_watertight(mesh.faces, mesh.vertex_count()));
    std::ifstream pose_file(dir / "out/pose.json");
    const auto pose = nlohmann::json::parse(pose_file).get<CameraPose>();
    CHECK_NOTHROW(pose.validate());

    const auto expected = InferenceModel::load(small_checkpoint()).infer(binarize(read_png(sketch), 0.5));
    CHECK(mesh.vertex_count() == expected.mesh.vertex_count());
    CHECK(pose.azimuth_deg == doctest::Approx(expected.pose.azimuth_deg).epsilon(1e-9));
}

TEST_CASE("infer rejects bad inputs with distinct exit codes")
{
    TempDir dir("sketch3d_test_cli_infer_bad");
    const auto wrong_size = write_sketch(dir, "big.png", 32);
    const auto ok = write_sketch(dir, "ok.png", 16);
    CHECK(run({"infer", "--ckpt", small_checkpoint().string(), "--in", wrong_size.string(), "--out-mesh",
               dir / "m.obj"})
              .code == cli::kUsage);
    CHECK(run({"infer", "--ckpt", small_checkpoint().string(), "--in", dir / "absent.png", "--out-mesh",
               dir / "m.obj"})
              .code == cli::kUsage);

    auto bytes = file_bytes(small_checkpoint());
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x5a);
    const fs::path corrupt = dir.path / "corrupt.skf";
    std::ofstream(corrupt, std::ios::binary) << bytes;
    CHECK(run({"infer", "--ckpt", corrupt.string(), "--in", ok.string(), "--out-mesh", dir / "m.obj"}).code ==
          cli::kIntegrity);
    std::ofstream(dir.path / "garbage.png") << "not a png";
    CHECK(run({"infer", "--ckpt", small_checkpoint().string(), "--in", dir / "garbage.png", "--out-mesh",
               dir / "m.obj"})
              .code == cli::kIntegrity);
}

TEST_CASE("eval of the reference scores every test category at 1")
{
    TempDir dir("sketch3d_test_cli_eval");
    const auto r = run({"eval", "--data", small_data().string(), "--reference", "--voxel-res", "16", "--json",
                        dir / "ref.json"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("1.000") != std::string::npos);
    std::ifstream in(dir / "ref.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("mean").get<double>() == doctest::Approx(1.0));

    std::set<std::string> expected, reported;
    for (const auto& s : load_manifest(small_data()).samples)
        if (s.split == Split::test) expected.insert(std::string(category_name(s.category)));
    for (const auto& [name, _] : j.at("categories").items()) reported.insert(name);
    CHECK(reported == expected);

    CHECK(run({"eval", "--data", small_data().string()}).code == cli::kUsage);
    CHECK(run({"eval", "--data", small_data().string(), "--reference", "--ckpt", small_checkpoint().string()}).code ==
          cli::kUsage);
    CHECK(run({"eval", "--data", small_data().string(), "--ckpt", small_checkpoint().string(), "--mode", "pred",
               "--voxel-res", "16"})
              .code == cli::kOk);
}

TEST_CASE("ablate trains the three variants in order")
{
    TempDir dir("sketch3d_test_cli_ablate");
    const auto r = run({"ablate", "--data", small_data().string(), "--out", dir.path.string(), "--epochs", "1",
                        "--voxel-res", "16", "--seed", "3"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    std::ifstream in(dir.path / "ablation.json");
    const auto rows = nlohmann::json::parse(in).at("rows");
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].at("name") == "baseline");
    CHECK(rows[1].at("name") == "+RPS");
    CHECK(rows[2].at("name") == "+RPS+CD");
    CHECK(rows[0].at("rps_on") == false);
    CHECK(rows[2].at("cd_on") == true);
    CHECK(r.out.find("GT pose") != std::string::npos);
    CHECK(r.out.find("Predicted pose") != std::string::npos);
}

TEST_CASE("render sweeps sigma towards the hard mask")
{
    TempDir dir("sketch3d_test_cli_render");
    fs::create_directories(dir.path);
    write_obj(dir.path / "sphere.obj", icosphere(3));
    const auto r = run({"render", "--obj", dir / "sphere.obj", "--res", "48", "--sigma", "1e-2", "--sigma", "1e-3",
                        "--sigma", "1e-4", "--sigma", "1e-5", "--out", dir / "sheet.png"});
    REQUIRE_MESSAGE(r.code == 0, r.err);

    std::vector<double> diffs;
    const std::regex row(R"(^([0-9.e+-]+)\s+([0-9.]+)$)");
    std::istringstream lines(r.out);
    for (std::string line; std::getline(lines, line);) {
        std::smatch m;
        if (std::regex_match(line, m, row)) diffs.push_back(std::stod(m[2]));
    }
    REQUIRE(diffs.size() == 4);
    for (std::size_t i = 1; i < diffs.size(); ++i) CHECK(diffs[i] < diffs[i - 1]);

    const GrayImage sheet = read_png(dir.path / "sheet.png");
    REQUIRE(sheet.width == 48 * 5);
    REQUIRE(sheet.height == 48);
    // The hard tile of a sphere is a centred disc: its area matches its extent.
    std::size_t area = 0, top = 48, bottom = 0;
    for (std::size_t y = 0; y < 48; ++y)
        for (std::size_t x = 0; x < 48; ++x)
            if (sheet.pixels[y * sheet.width + x] > 127) {
                ++area;
                top = std::min(top, y);
                bottom = std::max(bottom, y);
            }
    REQUIRE(area > 0);
    const double radius = (bottom - top + 1) / 2.0;
    CHECK(std::abs(static_cast<double>(area) - std::numbers::pi * radius * radius) < 0.1 * area);
    CHECK((top + bottom) / 2.0 == doctest::Approx(23.5).epsilon(0.05));
    CHECK(sheet.pixels[0] == 0);
}

TEST_CASE("render rejects missing and malformed meshes")
{
    TempDir dir("sketch3d_test_cli_render_bad");
    fs::create_directories(dir.path);
    CHECK(run({"render", "--obj", dir / "none.obj", "--out", dir / "x.png"}).code == cli::kUsage);
    std::ofstream(dir.path / "bad.obj") << "v 0 0 0\nf 1 2 3\n";
    CHECK(run({"render", "--obj", dir / "bad.obj", "--out", dir / "x.png"}).code == cli::kIntegrity);
    write_obj(dir.path / "ok.obj", icosphere(1));
    CHECK(run({"render", "--obj", dir / "ok.obj", "--out", dir / "x.png", "--distance", "-1"}).code == cli::kUsage);
}
