#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <optional>
#include <thread>

#include "refine/losses.hpp"
#include "refine/network.hpp"

namespace refine {

// Per-instance optimization settings. Weight defaults come from LossWeights;
// the six symmetry viewpoints default to azimuths {15,45,75} crossed with
// elevations {-45,45}, materialized with the input camera's distance and fov.
template <class S = float>
struct RefineConfig {
    int iterations = 400;
    S lr = S(7e-5);
    LossWeights<S> weights;
    std::vector<std::pair<double, double>> sym_view_angles = default_sym_view_angles();
    int render_width = 224;
    int render_height = 224;
    int encoder_resolution = 224;
    S sigma_rast = S(1e-4);
    unsigned seed = 0;
    ReflectionPlane plane;
    bool keep_best = true;
    int plateau_window = 0;  // 0 disables the optional plateau stop
    int log_every = 25;

    static std::vector<std::pair<double, double>> default_sym_view_angles() {
        std::vector<std::pair<double, double>> v;
        for (double az : {15.0, 45.0, 75.0})
            for (double el : {-45.0, 45.0}) v.emplace_back(az, el);
        return v;
    }

    void validate() const {
        if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
        if (lr <= S(0)) throw std::invalid_argument("learning rate must be positive");
        weights.validate();
    }
};

template <class S>
struct TraceRow {
    int iter = 0;
    LossBreakdown<S> losses;
    double iou2d = 0.0;
};

template <class S>
struct RefineResult {
    TriangleMesh<S> refined;
    Eigen::Matrix<S, Eigen::Dynamic, 1> confidences;
    std::vector<TraceRow<S>> trace;
    double wall_seconds = 0.0;
    int iterations_run = 0;
    int best_iter = 0;
    S best_loss = S(0);
};

// Loss became NaN/inf; names the first offending term for the diagnostic.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(const std::string& term, int iter, double value)
        : std::runtime_error("non-finite loss term '" + term + "' at iteration " + std::to_string(iter) + " (" +
                             std::to_string(value) + ")") {}
};

namespace loop_detail {

template <class S>
void check_finite(const LossBreakdown<S>& b, int iter) {
    const std::pair<const char*, S> terms[] = {{"sil", b.sil}, {"isym", b.isym}, {"vsym", b.vsym},
                                               {"dis", b.dis}, {"nc", b.nc},     {"lp", b.lp},
                                               {"total", b.total}};
    for (const auto& [name, v] : terms)
        if (!std::isfinite(static_cast<double>(v))) throw NonFiniteLossError(name, iter, static_cast<double>(v));
}

template <class S>
double binary_iou(const Image<S>& a, const Image<S>& b) {
    int inter = 0, uni = 0;
    for (Eigen::Index j = 0; j < a.rows(); ++j)
        for (Eigen::Index k = 0; k < a.cols(); ++k) {
            bool x = a(j, k) > S(0.5), y = b(j, k) > S(0.5);
            inter += x && y;
            uni += x || y;
        }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

}  // namespace loop_detail

// One test-time refinement: fresh random weights, `iterations` rounds of
// forward / loss / backward / Adam, tracking the best iterate by total loss.
template <class S>
RefineResult<S> refine_instance(const TriangleMesh<S>& coarse, const Image<S>& silhouette, const CameraPose& pose,
                                const RefineConfig<S>& config) {
    config.validate();
    if (coarse.vertex_count() == 0) throw std::invalid_argument("empty mesh");
    const auto t_start = std::chrono::steady_clock::now();

    const int n = coarse.vertex_count();
    auto model = make_refine_model<S>(config.seed, config.encoder_resolution);
    auto fwd_ctx = make_forward_context(coarse, silhouette, pose, config.encoder_resolution);

    LossContext<S> loss_ctx;
    loss_ctx.target = resize_bilinear(silhouette, config.render_height, config.render_width);
    loss_ctx.pose = pose;
    loss_ctx.faces = std::make_shared<const FaceMatrix>(coarse.faces);
    loss_ctx.topology = make_topology(coarse);
    loss_ctx.plane = config.plane;
    loss_ctx.settings.sigma_rast = config.sigma_rast;
    loss_ctx.settings.width = config.render_width;
    loss_ctx.settings.height = config.render_height;

    LossWeights<S> weights = config.weights;
    weights.sym_views.clear();
    for (const auto& [az, el] : config.sym_view_angles)
        weights.sym_views.push_back(CameraPose::from_angles(az, el, pose.distance(), pose.fov_y_deg,
                                                            config.render_width, config.render_height, pose.look_at,
                                                            pose.up_hint));

    ad::AdamConfig<S> adam_cfg;
    adam_cfg.lr = config.lr;

    const ad::ArrayX<S> vc_data = Eigen::Map<const ad::ArrayX<S>>(coarse.vertices.data(), coarse.vertices.size());
    ad::ArrayX<S> best_dis = ad::ArrayX<S>::Zero(n * 3);
    ad::ArrayX<S> best_conf = ad::ArrayX<S>::Constant(n, S(0.5));
    S best_loss = std::numeric_limits<S>::max();
    int best_iter = -1;

    RefineResult<S> result;
    int iterations_run = 0;
    for (int iter = 0; iter < config.iterations; ++iter) {
        ad::Tape<S> tape;
        auto mv = register_params(tape, model);
        auto [v_dis, v_conf] = network_forward(tape, mv, fwd_ctx);
        auto vc = tape.constant({n, 3}, vc_data);
        auto vr = ad::add(vc, v_dis);
        auto terms = loss_total(tape, vr, v_dis, v_conf, loss_ctx, weights);
        loop_detail::check_finite(terms.breakdown, iter);

        TraceRow<S> row;
        row.iter = iter;
        row.losses = terms.breakdown;
        {
            Eigen::Map<const VertexMatrix<S>> V(vr.value().data(), n, 3);
            CameraPose sized = pose;
            sized.width = config.render_width;
            sized.height = config.render_height;
            auto hard = hard_silhouette_at<S>(V, coarse.faces, sized, config.render_width, config.render_height);
            row.iou2d = loop_detail::binary_iou(hard, loss_ctx.target);
        }
        result.trace.push_back(row);
        ++iterations_run;

        if (terms.breakdown.total < best_loss) {
            best_loss = terms.breakdown.total;
            best_iter = iter;
            best_dis = v_dis.value();
            best_conf = v_conf.value();
        }

        if (config.log_every > 0 && iter % config.log_every == 0)
            log_info("iter %4d  total %.6g  sil %.4g isym %.4g vsym %.4g dis %.4g nc %.4g lp %.4g  iou2d %.3f",
                     iter, double(terms.breakdown.total), double(terms.breakdown.sil), double(terms.breakdown.isym),
                     double(terms.breakdown.vsym), double(terms.breakdown.dis), double(terms.breakdown.nc),
                     double(terms.breakdown.lp), row.iou2d);

        tape.backward(terms.total);
        for (auto& p : model.params) {
            auto var = mv.at(p.name);
            ad::adam_step<S>(p.data, tape.grad_or_zero(var), p.adam, adam_cfg);
        }

        if (config.plateau_window > 0 && iter - best_iter >= config.plateau_window) {
            log_info("plateau stop at iteration %d (best %d)", iter, best_iter);
            break;
        }
    }

    if (!config.keep_best) {
        // final iterate: rerun the forward pass with the updated weights
        ad::Tape<S> tape;
        auto mv = register_params(tape, model);
        auto [v_dis, v_conf] = network_forward(tape, mv, fwd_ctx);
        best_dis = v_dis.value();
        best_conf = v_conf.value();
        best_iter = iterations_run - 1;
        best_loss = result.trace.back().losses.total;
    }

    result.refined = coarse;
    Eigen::Map<const VertexMatrix<S>> D(best_dis.data(), n, 3);
    result.refined.vertices = coarse.vertices + D;
    result.confidences = best_conf.matrix();
    result.iterations_run = iterations_run;
    result.best_iter = best_iter;
    result.best_loss = best_loss;
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

// ---------------------------------------------------------------------------
// batch refinement: independent instances, instance-level parallelism only

template <class S>
struct RefineInstanceInput {
    std::string id;
    TriangleMesh<S> coarse;
    Image<S> silhouette;
    CameraPose pose;
};

template <class S>
struct BatchEntry {
    std::string id;
    std::optional<RefineResult<S>> result;
    std::string error;  // empty on success
};

// Results are identical to sequential execution: each instance derives its
// seed from config.seed + its index and owns all of its state.
template <class S>
std::vector<BatchEntry<S>> refine_batch(const std::vector<RefineInstanceInput<S>>& instances,
                                        const RefineConfig<S>& config, int parallelism) {
    std::vector<BatchEntry<S>> out(instances.size());
    if (instances.empty()) return out;
    parallelism = std::max(1, std::min<int>(parallelism, static_cast<int>(instances.size())));

    std::atomic<size_t> next{0};
    auto worker = [&] {
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= instances.size()) return;
            const auto& inst = instances[i];
            out[i].id = inst.id;
            try {
                RefineConfig<S> cfg = config;
                cfg.seed = config.seed + static_cast<unsigned>(i);
                out[i].result = refine_instance(inst.coarse, inst.silhouette, inst.pose, cfg);
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    if (parallelism == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < parallelism; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return out;
}

}  // namespace refine
