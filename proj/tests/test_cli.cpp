#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "refine/cli.hpp"
#include "refine/image.hpp"
#include "refine/metrics.hpp"
#include "refine/shapes.hpp"

using namespace refine;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
    auto dir = fs::temp_directory_path() / "refine_cli_tests";
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// tiny instance files reused across cases
struct Fixture {
    fs::path dir, mesh, sil, cam, gt;
};

Fixture make_fixture(const std::string& name) {
    Fixture f;
    f.dir = work_dir() / name;
    fs::create_directories(f.dir);
    auto coarse = make_octahedron<float>(0.7f);
    auto gt_mesh = make_box<float>(0.5f, 0.42f, 0.56f);
    auto pose = CameraPose::from_angles(30, 20, 3.0, 40.0, 48, 48);
    f.mesh = f.dir / "mesh.obj";
    f.gt = f.dir / "gt.obj";
    f.sil = f.dir / "silhouette.png";
    f.cam = f.dir / "camera.json";
    save_mesh(coarse, f.mesh.string());
    save_mesh(gt_mesh, f.gt.string());
    write_png(f.sil.string(), hard_silhouette(gt_mesh, pose, 48, 48));
    write_file(f.cam, R"({"azimuth": 30, "elevation": 20, "distance": 3.0, "fov_y": 40, "image_size": [48, 48]})");
    return f;
}

std::string small_config_json(int iterations) {
    return "{\"iterations\": " + std::to_string(iterations) +
           ", \"render_size\": [48,48], \"encoder_resolution\": 32, \"sym_views\": [[15,45]] }";
}

int trace_rows(const fs::path& trace) {
    std::ifstream in(trace);
    REQUIRE(in.good());
    std::string line;
    int rows = -1;  // skip header
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    return rows;
}

// minimal structural JSON-schema checker (type / required / properties /
// items) covering the subset the shipped schemas use
bool validate_schema(const json& value, const json& schema, std::string& err, const std::string& at = "$") {
    if (schema.contains("type")) {
        const std::string t = schema.at("type").get<std::string>();
        bool ok = (t == "object" && value.is_object()) || (t == "array" && value.is_array()) ||
                  (t == "string" && value.is_string()) || (t == "number" && value.is_number()) ||
                  (t == "integer" && value.is_number_integer()) || (t == "boolean" && value.is_boolean());
        if (!ok) {
            err = at + ": expected " + t;
            return false;
        }
    }
    if (schema.contains("required"))
        for (const auto& key : schema.at("required"))
            if (!value.contains(key.get<std::string>())) {
                err = at + ": missing required key " + key.get<std::string>();
                return false;
            }
    if (schema.contains("properties") && value.is_object())
        for (const auto& [key, sub] : schema.at("properties").items())
            if (value.contains(key) && !validate_schema(value.at(key), sub, err, at + "." + key)) return false;
    if (schema.contains("items") && value.is_array())
        for (size_t i = 0; i < value.size(); ++i)
            if (!validate_schema(value.at(i), schema.at("items"), err, at + "[" + std::to_string(i) + "]"))
                return false;
    return true;
}

json load_json(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    return json::parse(in);
}

fs::path schema_path(const std::string& name) { return fs::path(REFINE_SOURCE_DIR) / "schemas" / name; }

}  // namespace

TEST_CASE("ablation presets carry the published weight configurations") {
    auto total = cli::ablation_preset("total");
    CHECK(total.sil == 10.0f);
    CHECK(total.isym == 80.0f);
    CHECK(total.vsym == 20.0f);
    CHECK(total.symb == 0.0005f);
    CHECK(total.dis == 100.0f);
    CHECK(total.nc == 10.0f);
    CHECK(total.lp == 10.0f);

    auto sil = cli::ablation_preset("sil");
    CHECK(sil.sil == 10.0f);
    CHECK(sil.isym == 0.0f);
    CHECK(sil.vsym == 0.0f);
    CHECK(sil.dis == 0.0f);
    CHECK(sil.nc == 0.0f);
    CHECK(sil.lp == 0.0f);

    auto reg = cli::ablation_preset("sil+reg");
    CHECK(reg.dis == 100.0f);
    CHECK(reg.nc == 10.0f);
    CHECK(reg.lp == 10.0f);
    CHECK(reg.vsym == 0.0f);
    CHECK(reg.isym == 0.0f);

    auto vsym = cli::ablation_preset("sil+reg+vsym");
    CHECK(vsym.vsym == 20.0f);
    CHECK(vsym.symb == 0.0005f);
    CHECK(vsym.isym == 0.0f);

    auto symb1 = cli::ablation_preset("total-symb1");
    CHECK(symb1.symb == 1.0f);
    CHECK(symb1.isym == 80.0f);

    CHECK_THROWS(cli::ablation_preset("nope"));
}

TEST_CASE("camera json: angular and extrinsic forms") {
    auto dir = work_dir();
    write_file(dir / "cam_a.json", R"({"azimuth": 15, "elevation": -30, "distance": 2.5, "fov_y": 35})");
    auto a = cli::load_camera_json((dir / "cam_a.json").string());
    CHECK(a.azimuth_deg() == doctest::Approx(15.0));
    CHECK(a.elevation_deg() == doctest::Approx(-30.0));
    CHECK(a.distance() == doctest::Approx(2.5));
    CHECK(a.fov_y_deg == 35.0);

    // extrinsic equivalent of the same pose
    auto pose = CameraPose::from_angles(15, -30, 2.5, 35.0);
    Mat3d frame = camera_frame(pose);
    Vec3d t = -frame * pose.eye;
    std::string ext = "{\"extrinsic\": [";
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            double v = r < 3 ? (c < 3 ? frame(r, c) : t(r)) : (c == 3 ? 1.0 : 0.0);
            ext += std::to_string(v) + (r == 3 && c == 3 ? "" : ",");
        }
    ext += "], \"fov_y\": 35}";
    write_file(dir / "cam_e.json", ext);
    auto e = cli::load_camera_json((dir / "cam_e.json").string());
    CHECK((e.eye - pose.eye).norm() < 1e-4);
    CHECK(e.fov_y_deg == 35.0);
}

TEST_CASE("config precedence: flags beat config file beats defaults") {
    auto f = make_fixture("precedence");
    auto cfg_path = f.dir / "config.json";
    write_file(cfg_path, small_config_json(4));

    struct Case {
        bool use_config;
        int flag_iters;  // -1 = unset
        int expect_rows;
    };
    // defaults would be 400 iterations; keep the no-config cases flag-driven
    for (const Case c : {Case{true, -1, 4}, Case{true, 2, 2}, Case{false, 3, 3}}) {
        fs::path out = f.dir / ("out_" + std::to_string(c.use_config) + "_" + std::to_string(c.flag_iters) + ".obj");
        std::vector<std::string> args = {"refine",        "--mesh",   f.mesh.string(), "--silhouette",
                                         f.sil.string(),  "--camera", f.cam.string(),  "--out",
                                         out.string(),    "--seed",   "1"};
        if (c.use_config) {
            args.push_back("--config");
            args.push_back(cfg_path.string());
        } else {
            // without a config file the render would default to 224; keep it small
            auto small = f.dir / "small.json";
            write_file(small, small_config_json(400));
            args.push_back("--config");
            args.push_back(small.string());
        }
        if (c.flag_iters > 0) {
            args.push_back("--iters");
            args.push_back(std::to_string(c.flag_iters));
        }
        REQUIRE(cli::run(args) == 0);
        CHECK(trace_rows(fs::path(out.string() + ".trace.csv")) == c.expect_rows);
    }
}

TEST_CASE("refine: usage errors exit 1") {
    auto f = make_fixture("usage");
    CHECK(cli::run({"refine", "--mesh", f.mesh.string(), "--silhouette", f.sil.string(), "--camera", f.cam.string(),
                    "--out", (f.dir / "o.obj").string(), "--iters", "0"}) == 1);
    CHECK(cli::run({"refine", "--mesh", "/nonexistent.obj", "--silhouette", f.sil.string(), "--camera",
                    f.cam.string(), "--out", (f.dir / "o.obj").string()}) == 1);
    CHECK(cli::run({"refine"}) == 1);
    CHECK(cli::run({"bogus-subcommand"}) == 1);
}

TEST_CASE("batch: partial failure exits 2 and is recorded in the manifest") {
    auto base = work_dir() / "batch";
    fs::remove_all(base);
    for (int i = 0; i < 3; ++i) {
        auto f = make_fixture("batch/inst" + std::to_string(i));
        (void)f;
    }
    // corrupt the middle camera file
    write_file(work_dir() / "batch/inst1/camera.json", "{\"azimuth\": }");
    auto cfg_path = work_dir() / "batch_cfg.json";
    write_file(cfg_path, small_config_json(2));
    auto out_dir = work_dir() / "batch_out";
    fs::remove_all(out_dir);
    int rc = cli::run({"refine", "--batch", base.string(), "--out", out_dir.string(), "--config", cfg_path.string(),
                       "--jobs", "2"});
    CHECK(rc == 2);
    CHECK(fs::exists(out_dir / "inst0/refined.obj"));
    CHECK_FALSE(fs::exists(out_dir / "inst1/refined.obj"));
    CHECK(fs::exists(out_dir / "inst2/refined.obj"));

    auto manifest = load_json(out_dir / "manifest.json");
    std::string err;
    CHECK_MESSAGE(validate_schema(manifest, load_json(schema_path("manifest.schema.json")), err), err);
    CHECK(manifest.at("instances").size() == 3);
    CHECK(manifest.at("instances").at(1).at("status") == "failed");
    CHECK(manifest.at("instances").at(0).at("status") == "ok");
}

TEST_CASE("determinism: identical seeds byte-identical outputs; manifest replay") {
    auto f = make_fixture("determinism");
    auto cfg_path = f.dir / "config.json";
    write_file(cfg_path, small_config_json(3));

    auto run_to = [&](const fs::path& out) {
        REQUIRE(cli::run({"refine", "--mesh", f.mesh.string(), "--silhouette", f.sil.string(), "--camera",
                          f.cam.string(), "--out", out.string(), "--config", cfg_path.string(), "--seed", "7"}) == 0);
    };
    run_to(f.dir / "a.obj");
    run_to(f.dir / "b.obj");
    CHECK(read_file(f.dir / "a.obj") == read_file(f.dir / "b.obj"));
    CHECK(read_file(f.dir / "a.obj.trace.csv") == read_file(f.dir / "b.obj.trace.csv"));

    // replay from the manifest reproduces the batch outputs byte for byte
    auto batch_dir = work_dir() / "replay_batch";
    fs::remove_all(batch_dir);
    make_fixture("replay_batch/only");
    auto out1 = work_dir() / "replay_out1";
    auto out2 = work_dir() / "replay_out2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    REQUIRE(cli::run({"refine", "--batch", batch_dir.string(), "--out", out1.string(), "--config", cfg_path.string(),
                      "--seed", "9"}) == 0);
    REQUIRE(cli::run({"refine", "--manifest", (out1 / "manifest.json").string(), "--out", out2.string()}) == 0);
    CHECK(read_file(out1 / "only/refined.obj") == read_file(out2 / "only/refined.obj"));
    CHECK(read_file(out1 / "only/trace.csv") == read_file(out2 / "only/trace.csv"));
    CHECK(read_file(out1 / "only/confidences.csv") == read_file(out2 / "only/confidences.csv"));
}

TEST_CASE("evaluate: identity metrics, gains, schema-valid report") {
    auto f = make_fixture("evaluate");
    auto report = f.dir / "report.json";
    auto csv = f.dir / "report.csv";
    REQUIRE(cli::run({"evaluate", "--pred", f.gt.string(), "--gt", f.gt.string(), "--pred-before", f.mesh.string(),
                      "--camera", f.cam.string(), "--silhouette", f.sil.string(), "--out", report.string(), "--csv",
                      csv.string(), "--emd-samples", "64"}) == 0);
    auto j = load_json(report);
    std::string err;
    CHECK_MESSAGE(validate_schema(j, load_json(schema_path("report.schema.json")), err), err);

    const auto& m = j.at("instances").at(0).at("metrics");
    CHECK(m.at("chamfer_l2_x1000").get<double>() == doctest::Approx(0.0));
    CHECK(m.at("emd").get<double>() == doctest::Approx(0.0));
    CHECK(m.at("fscore_pct").get<double>() == doctest::Approx(100.0));
    CHECK(m.at("vol_iou_pct").get<double>() == doctest::Approx(100.0));
    CHECK(m.at("iou2d_pct").get<double>() >= 99.0);

    // delta column is after - before, exactly
    const auto& before = j.at("instances").at(0).at("before");
    const auto& gain = j.at("instances").at(0).at("gain");
    for (const std::string key : {"chamfer_l2_x1000", "fscore_pct", "vol_iou_pct"}) {
        double a = m.at(key).get<double>(), b = before.at(key).get<double>();
        CHECK(gain.at(key).get<double>() == a - b);
    }
    CHECK(fs::exists(csv));
}

TEST_CASE("render: centered box silhouette, soft/hard boundary band, confidence gray") {
    auto f = make_fixture("render");
    auto front = f.dir / "front.json";
    write_file(front, R"({"azimuth": 0, "elevation": 0, "distance": 3.0, "fov_y": 40, "image_size": [64, 64]})");

    auto hard_png = f.dir / "hard.png";
    REQUIRE(cli::run({"render", "--mesh", f.gt.string(), "--camera", front.string(), "--out", hard_png.string(),
                      "--width", "64", "--height", "64"}) == 0);
    auto hard = read_png(hard_png.string());
    CHECK(hard(32, 32) == 1.0f);  // center covered
    CHECK(hard(2, 2) == 0.0f);    // corner background
    // silhouette is a centered box: symmetric about the vertical axis
    ImageF flipped = horizontal_flip(hard);
    CHECK((flipped - hard).cwiseAbs().maxCoeff() == 0.0f);

    auto soft_png = f.dir / "soft.png";
    REQUIRE(cli::run({"render", "--mesh", f.gt.string(), "--camera", front.string(), "--out", soft_png.string(),
                      "--soft", "--width", "64", "--height", "64"}) == 0);
    auto soft = read_png(soft_png.string());
    int disagree_off_boundary = 0;
    for (int j = 1; j < 63; ++j)
        for (int k = 1; k < 63; ++k) {
            bool s = soft(j, k) > 0.5f, h = hard(j, k) > 0.5f;
            if (s == h) continue;
            bool boundary = false;
            for (int dj = -1; dj <= 1; ++dj)
                for (int dk = -1; dk <= 1; ++dk)
                    if (hard(j + dj, k + dk) != hard(j, k)) boundary = true;
            if (!boundary) ++disagree_off_boundary;
        }
    CHECK(disagree_off_boundary == 0);

    // constant 0.5 confidence renders mid-gray over the coverage
    auto conf_file = f.dir / "conf.txt";
    std::string conf_text;
    for (int i = 0; i < 8; ++i) conf_text += "0.5\n";
    write_file(conf_file, conf_text);
    auto conf_png = f.dir / "conf.png";
    REQUIRE(cli::run({"render", "--mesh", f.gt.string(), "--camera", front.string(), "--out", conf_png.string(),
                      "--confidence", conf_file.string(), "--width", "64", "--height", "64"}) == 0);
    auto conf = read_png(conf_png.string());
    CHECK(conf(32, 32) == doctest::Approx(128.0f / 255.0f).epsilon(1e-6));
    CHECK(conf(2, 2) == 1.0f);  // uncovered pixels carry confidence 1
}

TEST_CASE("ablate: unknown preset rejected, runs produce the comparison table") {
    auto base = work_dir() / "ablate_batch";
    fs::remove_all(base);
    make_fixture("ablate_batch/one");
    auto out_dir = work_dir() / "ablate_out";
    fs::remove_all(out_dir);
    auto cfg_path = work_dir() / "ablate_cfg.json";
    write_file(cfg_path, small_config_json(2));

    CHECK(cli::run({"ablate", "--batch", base.string(), "--out", out_dir.string(), "--configs", "nope"}) == 1);

    REQUIRE(cli::run({"ablate", "--batch", base.string(), "--out", out_dir.string(), "--configs", "sil", "total",
                      "--config", cfg_path.string(), "--jobs", "2"}) == 0);
    CHECK(fs::exists(out_dir / "sil/one/refined.obj"));
    CHECK(fs::exists(out_dir / "total/one/refined.obj"));
    auto table = load_json(out_dir / "ablation.json");
    CHECK(table.at("presets").size() == 2);
    CHECK(table.at("presets").at(0).at("preset") == "sil");
    CHECK(table.at("presets").at(0).contains("metrics"));  // gt.obj present in fixture
}
