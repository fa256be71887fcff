#include "refine/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "refine/image.hpp"
#include "refine/log.hpp"
#include "refine/metrics.hpp"
#include "refine/shapes.hpp"

namespace refine::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSchemaVersion = "1";

std::string format_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        out << text;
    }
    fs::rename(tmp, path);
}

Image<float> load_silhouette(const std::string& path) {
    ImageF img = read_png(path);
    return img;
}

// ---------------------------------------------------------------------------
// config plumbing

struct RunOptions {
    RefineConfig<float> config;
    std::string normalize = "none";  // none | unit-cube
};

json config_to_json(const RefineConfig<float>& c, const std::string& normalize) {
    json j;
    j["iterations"] = c.iterations;
    j["lr"] = c.lr;
    j["seed"] = c.seed;
    j["render_size"] = {c.render_width, c.render_height};
    j["encoder_resolution"] = c.encoder_resolution;
    j["sigma_rast"] = c.sigma_rast;
    j["keep_best"] = c.keep_best;
    j["plateau_window"] = c.plateau_window;
    j["weights"] = {{"sil", c.weights.sil}, {"isym", c.weights.isym}, {"vsym", c.weights.vsym},
                    {"symb", c.weights.symb}, {"dis", c.weights.dis}, {"nc", c.weights.nc}, {"lp", c.weights.lp}};
    json views = json::array();
    for (auto [az, el] : c.sym_view_angles) views.push_back({az, el});
    j["sym_views"] = views;
    j["plane"] = {{"normal", {c.plane.normal.x(), c.plane.normal.y(), c.plane.normal.z()}},
                  {"offset", c.plane.offset}};
    j["normalize"] = normalize;
    return j;
}

void config_from_json(const json& j, RefineConfig<float>& c, std::string* normalize) {
    if (j.contains("iterations")) c.iterations = j.at("iterations").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<float>();
    if (j.contains("seed")) c.seed = j.at("seed").get<unsigned>();
    if (j.contains("render_size")) {
        auto rs = j.at("render_size");
        c.render_width = rs.at(0).get<int>();
        c.render_height = rs.at(1).get<int>();
    }
    if (j.contains("encoder_resolution")) c.encoder_resolution = j.at("encoder_resolution").get<int>();
    if (j.contains("sigma_rast")) c.sigma_rast = j.at("sigma_rast").get<float>();
    if (j.contains("keep_best")) c.keep_best = j.at("keep_best").get<bool>();
    if (j.contains("plateau_window")) c.plateau_window = j.at("plateau_window").get<int>();
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        if (w.contains("sil")) c.weights.sil = w.at("sil").get<float>();
        if (w.contains("isym")) c.weights.isym = w.at("isym").get<float>();
        if (w.contains("vsym")) c.weights.vsym = w.at("vsym").get<float>();
        if (w.contains("symb")) c.weights.symb = w.at("symb").get<float>();
        if (w.contains("dis")) c.weights.dis = w.at("dis").get<float>();
        if (w.contains("nc")) c.weights.nc = w.at("nc").get<float>();
        if (w.contains("lp")) c.weights.lp = w.at("lp").get<float>();
    }
    if (j.contains("sym_views")) {
        c.sym_view_angles.clear();
        for (const auto& v : j.at("sym_views")) c.sym_view_angles.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
    }
    if (j.contains("plane")) {
        const auto& p = j.at("plane");
        Vec3d n(p.at("normal").at(0).get<double>(), p.at("normal").at(1).get<double>(),
                p.at("normal").at(2).get<double>());
        c.plane = ReflectionPlane(n.normalized(), p.value("offset", 0.0));
    }
    if (normalize != nullptr && j.contains("normalize")) *normalize = j.at("normalize").get<std::string>();
}

// ---------------------------------------------------------------------------
// per-instance refinement and outputs

struct InstancePaths {
    std::string id;
    std::string mesh, silhouette, camera;
    std::string gt;  // optional, used by ablate
};

std::string trace_csv(const RefineResult<float>& res) {
    std::string out = "iter,total,sil,isym,vsym,dis,nc,lp,iou2d\n";
    for (const auto& row : res.trace) {
        out += std::to_string(row.iter);
        for (double v : {double(row.losses.total), double(row.losses.sil), double(row.losses.isym),
                         double(row.losses.vsym), double(row.losses.dis), double(row.losses.nc),
                         double(row.losses.lp), row.iou2d})
            out += "," + format_g(v);
        out += "\n";
    }
    return out;
}

std::string confidences_csv(const RefineResult<float>& res) {
    std::string out;
    for (Eigen::Index i = 0; i < res.confidences.size(); ++i) out += format_g(res.confidences[i]) + "\n";
    return out;
}

struct InstanceOutcome {
    std::string id;
    std::string status = "ok";
    std::string error;
    std::string refined_path, trace_path, conf_path;
    double wall_seconds = 0.0;
};

InstanceOutcome run_one(const InstancePaths& inst, const RunOptions& opts, unsigned seed_offset,
                        const fs::path& out_mesh, const fs::path& out_trace, const fs::path& out_conf) {
    InstanceOutcome oc;
    oc.id = inst.id;
    try {
        for (const std::string& p : {inst.mesh, inst.silhouette, inst.camera})
            if (!fs::exists(p)) throw std::runtime_error("missing input: " + p);
        auto mesh = load_mesh<float>(inst.mesh);
        auto sil = load_silhouette(inst.silhouette);
        auto pose = load_camera_json(inst.camera);

        NormalizeTransform<float> t;
        const bool normalize = opts.normalize == "unit-cube";
        if (normalize) {
            t = unit_cube_transform(mesh);
            mesh = apply_transform(mesh, t);
        }

        RefineConfig<float> cfg = opts.config;
        cfg.seed = opts.config.seed + seed_offset;
        auto res = refine_instance(mesh, sil, pose, cfg);
        if (normalize) res.refined = apply_transform(res.refined, t, /*inverse=*/true);

        save_mesh(res.refined, out_mesh.string());
        write_text_atomic(out_trace, trace_csv(res));
        write_text_atomic(out_conf, confidences_csv(res));
        oc.refined_path = out_mesh.string();
        oc.trace_path = out_trace.string();
        oc.conf_path = out_conf.string();
        oc.wall_seconds = res.wall_seconds;
    } catch (const std::exception& e) {
        oc.status = "failed";
        oc.error = e.what();
        log_error("instance %s failed: %s", inst.id.c_str(), e.what());
    }
    return oc;
}

json manifest_json(const RunOptions& opts, const std::vector<InstancePaths>& instances,
                   const std::vector<InstanceOutcome>& outcomes) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "refine-manifest";
    j["config"] = config_to_json(opts.config, opts.normalize);
    json insts = json::array();
    double total_wall = 0.0;
    for (size_t i = 0; i < instances.size(); ++i) {
        json e;
        e["id"] = instances[i].id;
        e["mesh"] = instances[i].mesh;
        e["silhouette"] = instances[i].silhouette;
        e["camera"] = instances[i].camera;
        if (!instances[i].gt.empty()) e["ground_truth"] = instances[i].gt;
        e["status"] = outcomes[i].status;
        if (!outcomes[i].error.empty()) e["error"] = outcomes[i].error;
        json outs = json::object();
        if (!outcomes[i].refined_path.empty()) {
            outs["refined"] = outcomes[i].refined_path;
            outs["trace"] = outcomes[i].trace_path;
            outs["confidences"] = outcomes[i].conf_path;
        }
        e["outputs"] = outs;
        insts.push_back(e);
        total_wall += outcomes[i].wall_seconds;
    }
    j["instances"] = insts;
    j["timing"] = {{"total_seconds", total_wall}};
    return j;
}

std::vector<InstancePaths> scan_batch_dir(const std::string& dir) {
    std::vector<InstancePaths> out;
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
    std::vector<fs::path> subdirs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) subdirs.push_back(entry.path());
    std::sort(subdirs.begin(), subdirs.end());
    for (const auto& sub : subdirs) {
        InstancePaths inst;
        inst.id = sub.filename().string();
        inst.mesh = (sub / "mesh.obj").string();
        inst.silhouette = (sub / "silhouette.png").string();
        inst.camera = (sub / "camera.json").string();
        if (fs::exists(sub / "gt.obj")) inst.gt = (sub / "gt.obj").string();
        out.push_back(inst);
    }
    if (out.empty()) throw std::runtime_error("no instance subdirectories in " + dir);
    return out;
}

// Sequential-equivalent batch execution over instance paths.
int run_batch(const std::vector<InstancePaths>& instances, const RunOptions& opts, int jobs, const fs::path& out_dir,
              const fs::path& manifest_path) {
    fs::create_directories(out_dir);
    std::vector<InstanceOutcome> outcomes(instances.size());
    std::atomic<size_t> next{0};
    auto worker = [&] {
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= instances.size()) return;
            fs::path inst_dir = out_dir / instances[i].id;
            fs::create_directories(inst_dir);
            outcomes[i] = run_one(instances[i], opts, static_cast<unsigned>(i), inst_dir / "refined.obj",
                                  inst_dir / "trace.csv", inst_dir / "confidences.csv");
        }
    };
    int parallel = std::max(1, std::min<int>(jobs, static_cast<int>(instances.size())));
    if (parallel == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < parallel; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    write_text_atomic(manifest_path, manifest_json(opts, instances, outcomes).dump(2) + "\n");
    int failed = 0;
    for (const auto& oc : outcomes) failed += oc.status != "ok";
    if (failed == static_cast<int>(outcomes.size())) return 1;
    return failed > 0 ? 2 : 0;
}

// ---------------------------------------------------------------------------
// evaluation

struct MetricRow {
    double emd_v = -1, chamfer_x1000 = -1, fscore_pct = -1, vol_iou_pct = -1, iou2d_pct = -1;
};

json metrics_to_json(const MetricRow& m) {
    json j;
    if (m.emd_v >= 0) j["emd"] = m.emd_v;
    if (m.chamfer_x1000 >= 0) j["chamfer_l2_x1000"] = m.chamfer_x1000;
    if (m.fscore_pct >= 0) j["fscore_pct"] = m.fscore_pct;
    if (m.vol_iou_pct >= 0) j["vol_iou_pct"] = m.vol_iou_pct;
    if (m.iou2d_pct >= 0) j["iou2d_pct"] = m.iou2d_pct;
    return j;
}

struct EvalSettings {
    int samples = 2048;
    unsigned seed = 0;
    int resolution = 32;
    int emd_samples = 256;
    std::vector<std::string> metrics = {"emd", "chamfer", "fscore", "iou3d", "iou2d"};
    std::string align = "none";  // none | center | unit-cube
    std::string camera, silhouette;
};

bool wants(const EvalSettings& s, const std::string& name) {
    return std::find(s.metrics.begin(), s.metrics.end(), name) != s.metrics.end();
}

TriangleMesh<double> aligned(const TriangleMesh<double>& mesh, const std::string& mode) {
    if (mode == "none") return mesh;
    auto t = unit_cube_transform(mesh);
    if (mode == "center") t.scale = 1.0;
    return apply_transform(mesh, t);
}

MetricRow evaluate_pair(const TriangleMesh<double>& pred_raw, const TriangleMesh<double>& gt_raw,
                        const EvalSettings& s) {
    MetricRow row;
    auto pred = aligned(pred_raw, s.align);
    auto gt = aligned(gt_raw, s.align);
    std::optional<PointSample<double>> sp, sg, sp_emd, sg_emd;
    auto ensure_samples = [&] {
        if (!sp) {
            // identical seeds on both sides: identical meshes sample identical
            // points, so self-evaluation reports exact zeros
            sp = sample_surface(pred, s.samples, s.seed + 1);
            sg = sample_surface(gt, s.samples, s.seed + 1);
        }
    };
    if (wants(s, "chamfer")) {
        ensure_samples();
        row.chamfer_x1000 = 1000.0 * chamfer_l2(*sp, *sg);
    }
    if (wants(s, "fscore")) {
        ensure_samples();
        row.fscore_pct = fscore(*sp, *sg, default_fscore_tau(gt));
    }
    if (wants(s, "emd")) {
        sp_emd = sample_surface(pred, s.emd_samples, s.seed + 3);
        sg_emd = sample_surface(gt, s.emd_samples, s.seed + 3);
        row.emd_v = emd(*sp_emd, *sg_emd);
    }
    if (wants(s, "iou3d")) row.vol_iou_pct = 100.0 * volumetric_iou(pred, gt, s.resolution);
    if (wants(s, "iou2d") && !s.camera.empty() && !s.silhouette.empty()) {
        auto pose = load_camera_json(s.camera);
        ImageF sil = read_png(s.silhouette);
        row.iou2d_pct = 100.0 * silhouette_iou_2d(pred_raw, pose, Image<double>(sil.cast<double>()));
    }
    return row;
}

std::string gain_str(double before, double after) {
    double gain = after - before;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.4g → %.4g (%+.4g)", before, after, gain);
    return buf;
}

void print_eval_table(const MetricRow& after, const MetricRow* before) {
    auto line = [&](const char* name, double b, double a) {
        if (a < 0) return;
        if (before != nullptr && b >= 0)
            std::printf("  %-12s %s\n", name, gain_str(b, a).c_str());
        else
            std::printf("  %-12s %.4g\n", name, a);
    };
    line("EMD", before ? before->emd_v : -1, after.emd_v);
    line("CD-l2 (x1e3)", before ? before->chamfer_x1000 : -1, after.chamfer_x1000);
    line("F-Score", before ? before->fscore_pct : -1, after.fscore_pct);
    line("Vol. IoU", before ? before->vol_iou_pct : -1, after.vol_iou_pct);
    line("2D IoU", before ? before->iou2d_pct : -1, after.iou2d_pct);
}

json eval_conventions(const EvalSettings& s) {
    return json{{"samples", s.samples},
                {"emd_samples", s.emd_samples},
                {"seed", s.seed},
                {"fscore_tau", "0.01 x ground-truth bbox diagonal"},
                {"vol_resolution", s.resolution},
                {"chamfer_scale", 1000},
                {"notes", json::array({"sample count and f-score threshold are engine conventions"})}};
}

std::string eval_csv(const std::vector<std::pair<std::string, MetricRow>>& rows,
                     const std::vector<MetricRow>* befores) {
    std::string out = "id,emd,chamfer_l2_x1000,fscore_pct,vol_iou_pct,iou2d_pct";
    if (befores != nullptr) out += ",emd_before,chamfer_before,fscore_before,vol_iou_before,iou2d_before";
    out += "\n";
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& [id, m] = rows[i];
        out += id;
        for (double v : {m.emd_v, m.chamfer_x1000, m.fscore_pct, m.vol_iou_pct, m.iou2d_pct})
            out += "," + (v >= 0 ? format_g(v) : std::string());
        if (befores != nullptr) {
            const auto& b = (*befores)[i];
            for (double v : {b.emd_v, b.chamfer_x1000, b.fscore_pct, b.vol_iou_pct, b.iou2d_pct})
                out += "," + (v >= 0 ? format_g(v) : std::string());
        }
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_refine(const std::string& mesh, const std::string& silhouette, const std::string& camera,
               const std::string& batch, const std::string& manifest_in, const std::string& out,
               const std::string& config_path, int iters_flag, long seed_flag, const std::string& report,
               int jobs, const std::string& normalize_flag) {
    RunOptions opts;
    std::vector<InstancePaths> instances;
    fs::path manifest_path;
    fs::path out_dir;

    if (!manifest_in.empty()) {
        std::ifstream in(manifest_in);
        if (!in) {
            log_error("cannot open manifest: %s", manifest_in.c_str());
            return 1;
        }
        json j = json::parse(in);
        config_from_json(j.at("config"), opts.config, &opts.normalize);
        for (const auto& e : j.at("instances")) {
            InstancePaths inst;
            inst.id = e.at("id").get<std::string>();
            inst.mesh = e.at("mesh").get<std::string>();
            inst.silhouette = e.at("silhouette").get<std::string>();
            inst.camera = e.at("camera").get<std::string>();
            instances.push_back(inst);
        }
        out_dir = out.empty() ? fs::path(manifest_in).parent_path() : fs::path(out);
        manifest_path = out_dir / "manifest.json";
    } else {
        if (!config_path.empty()) opts.config = load_config_json(config_path, &opts.normalize);
        if (!batch.empty()) {
            try {
                instances = scan_batch_dir(batch);
            } catch (const std::exception& e) {
                log_error("%s", e.what());
                return 1;
            }
            out_dir = out;
            manifest_path = out_dir / "manifest.json";
        }
    }
    if (iters_flag > 0) opts.config.iterations = iters_flag;
    if (seed_flag >= 0) opts.config.seed = static_cast<unsigned>(seed_flag);
    if (!normalize_flag.empty()) opts.normalize = normalize_flag;
    try {
        opts.config.validate();
    } catch (const std::exception& e) {
        log_error("invalid configuration: %s", e.what());
        return 1;
    }

    if (!instances.empty()) return run_batch(instances, opts, jobs, out_dir, manifest_path);

    // single instance
    if (mesh.empty() || silhouette.empty() || camera.empty() || out.empty()) {
        log_error("%s", "refine needs --mesh/--silhouette/--camera/--out, --batch, or --manifest");
        return 1;
    }
    for (const std::string& p : {mesh, silhouette, camera})
        if (!fs::exists(p)) {
            log_error("missing input: %s", p.c_str());
            return 1;
        }
    InstancePaths inst;
    inst.id = fs::path(mesh).stem().string();
    inst.mesh = mesh;
    inst.silhouette = silhouette;
    inst.camera = camera;
    fs::path out_mesh = out;
    fs::path out_trace = report.empty() ? fs::path(out + ".trace.csv") : fs::path(report);
    fs::path out_conf = out + ".confidences.csv";
    if (out_mesh.has_parent_path()) fs::create_directories(out_mesh.parent_path());
    auto oc = run_one(inst, opts, 0, out_mesh, out_trace, out_conf);
    write_text_atomic(out + ".manifest.json", manifest_json(opts, {inst}, {oc}).dump(2) + "\n");
    return oc.status == "ok" ? 0 : 1;
}

int cmd_evaluate(const std::string& pred, const std::string& gt, const std::string& pred_before,
                 const EvalSettings& settings, const std::string& out_json, const std::string& out_csv) {
    for (const std::string& p : {pred, gt})
        if (!fs::exists(p)) {
            log_error("missing input: %s", p.c_str());
            return 1;
        }
    auto pred_mesh = load_mesh<double>(pred);
    auto gt_mesh = load_mesh<double>(gt);
    MetricRow after = evaluate_pair(pred_mesh, gt_mesh, settings);
    std::optional<MetricRow> before;
    if (!pred_before.empty()) {
        if (!fs::exists(pred_before)) {
            log_error("missing input: %s", pred_before.c_str());
            return 1;
        }
        before = evaluate_pair(load_mesh<double>(pred_before), gt_mesh, settings);
    }

    std::printf("%s vs %s\n", fs::path(pred).filename().c_str(), fs::path(gt).filename().c_str());
    print_eval_table(after, before ? &*before : nullptr);

    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "evaluation-report";
    j["conventions"] = eval_conventions(settings);
    json inst;
    inst["id"] = fs::path(pred).stem().string();
    inst["metrics"] = metrics_to_json(after);
    if (before) {
        inst["before"] = metrics_to_json(*before);
        json gains;
        if (after.emd_v >= 0 && before->emd_v >= 0) gains["emd"] = after.emd_v - before->emd_v;
        if (after.chamfer_x1000 >= 0 && before->chamfer_x1000 >= 0)
            gains["chamfer_l2_x1000"] = after.chamfer_x1000 - before->chamfer_x1000;
        if (after.fscore_pct >= 0 && before->fscore_pct >= 0) gains["fscore_pct"] = after.fscore_pct - before->fscore_pct;
        if (after.vol_iou_pct >= 0 && before->vol_iou_pct >= 0)
            gains["vol_iou_pct"] = after.vol_iou_pct - before->vol_iou_pct;
        if (after.iou2d_pct >= 0 && before->iou2d_pct >= 0) gains["iou2d_pct"] = after.iou2d_pct - before->iou2d_pct;
        inst["gain"] = gains;
    }
    j["instances"] = json::array({inst});
    j["mean"] = inst["metrics"];
    if (!out_json.empty()) write_text_atomic(out_json, j.dump(2) + "\n");
    if (!out_csv.empty()) {
        std::vector<std::pair<std::string, MetricRow>> rows = {{inst["id"].get<std::string>(), after}};
        if (before) {
            std::vector<MetricRow> b = {*before};
            write_text_atomic(out_csv, eval_csv(rows, &b));
        } else {
            write_text_atomic(out_csv, eval_csv(rows, nullptr));
        }
    }
    return 0;
}

int cmd_render(const std::string& mesh_path, const std::string& camera_path, const std::string& out,
               bool soft, const std::string& confidence_path, int width, int height, float sigma) {
    for (const std::string& p : {mesh_path, camera_path})
        if (!fs::exists(p)) {
            log_error("missing input: %s", p.c_str());
            return 1;
        }
    auto mesh = load_mesh<float>(mesh_path);
    auto pose = load_camera_json(camera_path);
    ImageF img;
    if (!confidence_path.empty()) {
        std::ifstream in(confidence_path);
        if (!in) {
            log_error("missing input: %s", confidence_path.c_str());
            return 1;
        }
        Eigen::Matrix<float, Eigen::Dynamic, 1> conf(mesh.vertex_count());
        for (int i = 0; i < mesh.vertex_count(); ++i)
            if (!(in >> conf[i])) {
                log_error("%s", "confidence file has fewer values than vertices");
                return 1;
            }
        img = rasterize_attribute(mesh, pose, conf, width, height);
    } else if (soft) {
        RenderSettings<float> rs;
        rs.sigma_rast = sigma;
        rs.width = width;
        rs.height = height;
        img = soft_silhouette(mesh, pose, rs);
    } else {
        img = hard_silhouette(mesh, pose, width, height);
    }
    write_png(out, img);
    return 0;
}

int cmd_ablate(const std::string& batch, const std::string& out, const std::vector<std::string>& configs,
               const std::string& config_path, int jobs, const EvalSettings& eval_settings) {
    std::vector<InstancePaths> instances;
    try {
        instances = scan_batch_dir(batch);
    } catch (const std::exception& e) {
        log_error("%s", e.what());
        return 1;
    }
    auto known = ablation_preset_names();
    for (const auto& name : configs)
        if (std::find(known.begin(), known.end(), name) == known.end()) {
            log_error("unknown ablation preset: %s", name.c_str());
            return 1;
        }

    RunOptions base;
    if (!config_path.empty()) base.config = load_config_json(config_path, &base.normalize);

    int worst = 0;
    json table = json::array();
    for (const auto& preset : configs) {
        RunOptions opts = base;
        opts.config.weights = ablation_preset(preset);
        if (opts.config.weights.isym == 0.0f) opts.config.sym_view_angles.clear();
        fs::path preset_dir = fs::path(out) / preset;
        int rc = run_batch(instances, opts, jobs, preset_dir, preset_dir / "manifest.json");
        worst = std::max(worst, rc);

        // metric row per preset, averaged over instances with ground truth
        MetricRow mean;
        int counted = 0;
        for (const auto& inst : instances) {
            if (inst.gt.empty()) continue;
            fs::path refined = preset_dir / inst.id / "refined.obj";
            if (!fs::exists(refined)) continue;
            EvalSettings es = eval_settings;
            es.camera = inst.camera;
            es.silhouette = inst.silhouette;
            MetricRow row = evaluate_pair(load_mesh<double>(refined.string()), load_mesh<double>(inst.gt), es);
            if (counted == 0) {
                mean = row;
            } else {
                mean.emd_v += row.emd_v;
                mean.chamfer_x1000 += row.chamfer_x1000;
                mean.fscore_pct += row.fscore_pct;
                mean.vol_iou_pct += row.vol_iou_pct;
                mean.iou2d_pct += row.iou2d_pct;
            }
            ++counted;
        }
        json entry;
        entry["preset"] = preset;
        if (counted > 0) {
            mean.emd_v /= counted;
            mean.chamfer_x1000 /= counted;
            mean.fscore_pct /= counted;
            mean.vol_iou_pct /= counted;
            mean.iou2d_pct /= counted;
            entry["metrics"] = metrics_to_json(mean);
            std::printf("%-16s", preset.c_str());
            if (mean.emd_v >= 0) std::printf("  EMD %.4g", mean.emd_v);
            if (mean.chamfer_x1000 >= 0) std::printf("  CD-l2 %.4g", mean.chamfer_x1000);
            if (mean.fscore_pct >= 0) std::printf("  F %.4g", mean.fscore_pct);
            if (mean.vol_iou_pct >= 0) std::printf("  IoU3D %.4g", mean.vol_iou_pct);
            if (mean.iou2d_pct >= 0) std::printf("  IoU2D %.4g", mean.iou2d_pct);
            std::printf("\n");
        }
        table.push_back(entry);
    }
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "ablation-report";
    j["conventions"] = eval_conventions(eval_settings);
    j["presets"] = table;
    write_text_atomic(fs::path(out) / "ablation.json", j.dump(2) + "\n");
    return worst;
}

}  // namespace

CameraPose load_camera_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open camera file: " + path);
    json j = json::parse(in);
    int width = 224, height = 224;
    if (j.contains("image_size")) {
        width = j.at("image_size").at(0).get<int>();
        height = j.at("image_size").at(1).get<int>();
    }
    double fov = j.value("fov_y", 30.0);
    if (j.contains("extrinsic")) {
        const auto& e = j.at("extrinsic");
        if (e.size() != 16) throw std::runtime_error("extrinsic must hold 16 row-major floats");
        Mat4d m;
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) m(r, c) = e.at(r * 4 + c).get<double>();
        return CameraPose::from_extrinsic(m, fov, width, height);
    }
    Vec3d look_at = Vec3d::Zero();
    if (j.contains("look_at"))
        look_at = Vec3d(j.at("look_at").at(0).get<double>(), j.at("look_at").at(1).get<double>(),
                        j.at("look_at").at(2).get<double>());
    return CameraPose::from_angles(j.at("azimuth").get<double>(), j.at("elevation").get<double>(),
                                   j.at("distance").get<double>(), fov, width, height, look_at);
}

RefineConfig<float> load_config_json(const std::string& path, std::string* normalize_mode) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    json j = json::parse(in);
    RefineConfig<float> cfg;
    config_from_json(j, cfg, normalize_mode);
    return cfg;
}

std::vector<std::string> ablation_preset_names() {
    return {"sil", "sil+reg", "sil+reg+vsym", "total", "total-symb1"};
}

LossWeights<float> ablation_preset(const std::string& name) {
    LossWeights<float> w;  // defaults = the full configuration
    if (name == "total") return w;
    if (name == "total-symb1") {
        w.symb = 1.0f;
        return w;
    }
    if (name == "sil") {
        w.isym = w.vsym = w.dis = w.nc = w.lp = 0.0f;
        return w;
    }
    if (name == "sil+reg") {
        w.isym = w.vsym = 0.0f;
        return w;
    }
    if (name == "sil+reg+vsym") {
        w.isym = 0.0f;
        return w;
    }
    throw std::invalid_argument("unknown ablation preset: " + name);
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"black-box test-time mesh refinement"};
    app.require_subcommand(1);

    // refine
    std::string mesh, silhouette, camera, batch, manifest, out, config_path, report, normalize_flag;
    int iters_flag = -1, jobs = 1;
    long seed_flag = -1;
    auto* refine_cmd = app.add_subcommand("refine", "refine a mesh against a silhouette");
    refine_cmd->add_option("--mesh", mesh);
    refine_cmd->add_option("--silhouette", silhouette);
    refine_cmd->add_option("--camera", camera);
    refine_cmd->add_option("--batch", batch);
    refine_cmd->add_option("--manifest", manifest);
    refine_cmd->add_option("--out", out);
    refine_cmd->add_option("--config", config_path);
    refine_cmd->add_option("--iters", iters_flag)->check(CLI::PositiveNumber);
    refine_cmd->add_option("--seed", seed_flag);
    refine_cmd->add_option("--report", report);
    refine_cmd->add_option("--jobs", jobs);
    refine_cmd->add_option("--normalize", normalize_flag)->check(CLI::IsMember({"none", "unit-cube"}));

    // evaluate
    std::string pred, gt, pred_before, eval_json, eval_csv_path;
    EvalSettings ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "measure reconstruction accuracy");
    eval_cmd->add_option("--pred", pred)->required();
    eval_cmd->add_option("--gt", gt)->required();
    eval_cmd->add_option("--pred-before", pred_before);
    eval_cmd->add_option("--camera", ev.camera);
    eval_cmd->add_option("--silhouette", ev.silhouette);
    eval_cmd->add_option("--metrics", ev.metrics);
    eval_cmd->add_option("--samples", ev.samples);
    eval_cmd->add_option("--emd-samples", ev.emd_samples);
    eval_cmd->add_option("--seed", ev.seed);
    eval_cmd->add_option("--resolution", ev.resolution);
    eval_cmd->add_option("--align", ev.align)->check(CLI::IsMember({"none", "center", "unit-cube"}));
    eval_cmd->add_option("--out", eval_json);
    eval_cmd->add_option("--csv", eval_csv_path);

    // render
    std::string rmesh, rcamera, rout, conf_path;
    bool soft = false;
    int rwidth = 224, rheight = 224;
    float rsigma = 1e-4f;
    auto* render_cmd = app.add_subcommand("render", "render a silhouette or confidence map");
    render_cmd->add_option("--mesh", rmesh)->required();
    render_cmd->add_option("--camera", rcamera)->required();
    render_cmd->add_option("--out", rout)->required();
    render_cmd->add_flag("--soft", soft);
    render_cmd->add_option("--confidence", conf_path);
    render_cmd->add_option("--width", rwidth);
    render_cmd->add_option("--height", rheight);
    render_cmd->add_option("--sigma", rsigma);

    // ablate
    std::string abatch, aout, aconfig;
    std::vector<std::string> configs;
    int ajobs = 1;
    auto* ablate_cmd = app.add_subcommand("ablate", "run loss-subset configurations");
    ablate_cmd->add_option("--batch", abatch)->required();
    ablate_cmd->add_option("--out", aout)->required();
    ablate_cmd->add_option("--configs", configs)->required();
    ablate_cmd->add_option("--config", aconfig);
    ablate_cmd->add_option("--jobs", ajobs);

    std::vector<std::string> argv = args;
    try {
        std::reverse(argv.begin(), argv.end());
        app.parse(argv);
    } catch (const CLI::ParseError& e) {
        CLI::App dummy;
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (refine_cmd->parsed())
            return cmd_refine(mesh, silhouette, camera, batch, manifest, out, config_path, iters_flag, seed_flag,
                              report, jobs, normalize_flag);
        if (eval_cmd->parsed()) return cmd_evaluate(pred, gt, pred_before, ev, eval_json, eval_csv_path);
        if (render_cmd->parsed()) return cmd_render(rmesh, rcamera, rout, soft, conf_path, rwidth, rheight, rsigma);
        if (ablate_cmd->parsed()) return cmd_ablate(abatch, aout, configs, aconfig, ajobs, ev);
    } catch (const std::exception& e) {
        log_error("%s", e.what());
        return 1;
    }
    return 1;
}

}  // namespace refine::cli
