#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <string>

#include "refine/camera.hpp"
#include "refine/image.hpp"
#include "refine/mesh.hpp"
#include "refine/tape.hpp"

namespace refine {

// Architecture constants. Two feature levels with C1=256 / C2=512 channels at
// strides 8 and 16; channel widths elsewhere are sized so the whole model
// lands near 0.9M parameters.
struct NetworkArch {
    static constexpr int kLevel1Channels = 256;
    static constexpr int kLevel2Channels = 512;
    static constexpr int kStemChannels = 16;
    static constexpr int kStageChannels[3] = {32, 64, 128};
    static constexpr int kGcnWidth = 256;
    static constexpr int kGcnLayers = 3;
    static constexpr int kHeadHidden = 128;
    static constexpr long kMaxParams = 1'200'000;
};

template <class S>
struct ParamTensor {
    std::string name;
    ad::Shape shape;
    ad::ArrayX<S> data;
    ad::AdamState<S> adam;
};

// All trainable parameters of one refinement instance, initialized fresh from
// the seed. Encoder convs ("encoder.*"), graph refiner ("refiner.*"), and the
// two output branches ("head_dis.*", "head_conf.*").
template <class S>
struct RefineModel {
    unsigned seed = 0;
    int encoder_resolution = 224;
    std::vector<ParamTensor<S>> params;

    ParamTensor<S>& find(const std::string& name) {
        for (auto& p : params)
            if (p.name == name) return p;
        throw std::invalid_argument("no parameter named " + name);
    }
    long parameter_count() const {
        long n = 0;
        for (const auto& p : params) n += p.data.size();
        return n;
    }
};

namespace net_detail {

template <class S>
void add_param(RefineModel<S>& m, std::mt19937& rng, const std::string& name, ad::Shape shape, int fan_in,
               S init_scale = S(1)) {
    ParamTensor<S> p;
    p.name = name;
    p.shape = shape;
    const int n = ad::numel(shape);
    p.data.resize(n);
    if (fan_in > 0) {
        const S limit = init_scale * S(std::sqrt(6.0 / fan_in));
        std::uniform_real_distribution<double> d(-1.0, 1.0);
        for (int i = 0; i < n; ++i) p.data[i] = limit * S(d(rng));
    } else {
        p.data.setZero();  // biases
    }
    m.params.push_back(std::move(p));
}

}  // namespace net_detail

// Fresh model with He-uniform weights and zero biases; the output layers of
// both heads start near zero so refinement begins at the identity mapping.
template <class S>
RefineModel<S> make_refine_model(unsigned seed, int encoder_resolution = 224) {
    using namespace net_detail;
    using A = NetworkArch;
    RefineModel<S> m;
    m.seed = seed;
    m.encoder_resolution = encoder_resolution;
    std::mt19937 rng(seed);

    add_param(m, rng, "encoder.stem.w", {A::kStemChannels, 1, 7, 7}, 1 * 7 * 7);
    add_param(m, rng, "encoder.stem.b", {A::kStemChannels}, 0);
    int prev = A::kStemChannels;
    for (int s = 0; s < 3; ++s) {
        const int ch = A::kStageChannels[s];
        const std::string base = "encoder.stage" + std::to_string(s + 1);
        add_param(m, rng, base + ".down.w", {ch, prev, 3, 3}, prev * 9);
        add_param(m, rng, base + ".down.b", {ch}, 0);
        add_param(m, rng, base + ".res1.w", {ch, ch, 3, 3}, ch * 9);
        add_param(m, rng, base + ".res1.b", {ch}, 0);
        add_param(m, rng, base + ".res2.w", {ch, ch, 3, 3}, ch * 9);
        add_param(m, rng, base + ".res2.b", {ch}, 0);
        prev = ch;
    }
    add_param(m, rng, "encoder.proj1.w", {A::kLevel1Channels, A::kStageChannels[1], 1, 1}, A::kStageChannels[1]);
    add_param(m, rng, "encoder.proj1.b", {A::kLevel1Channels}, 0);
    add_param(m, rng, "encoder.proj2.w", {A::kLevel2Channels, A::kStageChannels[2], 1, 1}, A::kStageChannels[2]);
    add_param(m, rng, "encoder.proj2.b", {A::kLevel2Channels}, 0);

    // first graph layer consumes the concatenated 256+512 features, split as
    // two blocks so the concatenation never has to be materialized
    add_param(m, rng, "refiner.l1.wa", {A::kLevel1Channels, A::kGcnWidth}, A::kLevel1Channels + A::kLevel2Channels);
    add_param(m, rng, "refiner.l1.wb", {A::kLevel2Channels, A::kGcnWidth}, A::kLevel1Channels + A::kLevel2Channels);
    for (int l = 2; l <= A::kGcnLayers; ++l)
        add_param(m, rng, "refiner.l" + std::to_string(l) + ".w", {A::kGcnWidth, A::kGcnWidth}, A::kGcnWidth);

    for (const char* head : {"head_dis", "head_conf"}) {
        const int out = head[5] == 'd' ? 3 : 1;
        add_param(m, rng, std::string(head) + ".fc1.w", {A::kGcnWidth, A::kHeadHidden}, A::kGcnWidth);
        add_param(m, rng, std::string(head) + ".fc1.b", {A::kHeadHidden}, 0);
        add_param(m, rng, std::string(head) + ".fc2.w", {A::kHeadHidden, out}, A::kHeadHidden, S(0.01));
        add_param(m, rng, std::string(head) + ".fc2.b", {out}, 0);
    }

    if (m.parameter_count() > NetworkArch::kMaxParams)
        throw std::runtime_error("model exceeds the parameter budget: " + std::to_string(m.parameter_count()));
    return m;
}

// Parameters registered on a tape for one forward/backward pass.
template <class S>
struct ModelVars {
    std::map<std::string, ad::Var<S>> vars;
    ad::Var<S> at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw std::invalid_argument("no parameter named " + name);
        return it->second;
    }
};

template <class S>
ModelVars<S> register_params(ad::Tape<S>& tape, const RefineModel<S>& model) {
    ModelVars<S> out;
    for (const auto& p : model.params) out.vars[p.name] = tape.leaf(p.shape, p.data, true);
    return out;
}

// Silhouette encoder: strided stem, three residual stages, and 1x1
// projections to the two feature levels (strides 8 and 16).
template <class S>
struct EncoderMaps {
    ad::Var<S> level1;  // {256, H/8,  W/8}
    ad::Var<S> level2;  // {512, H/16, W/16}
};

template <class S>
EncoderMaps<S> encode(ad::Tape<S>& tape, const ModelVars<S>& mv, ad::Var<S> input) {
    using namespace ad;
    auto stage = [&](Var<S> x, const std::string& base) {
        auto y = relu(conv2d(x, mv.at(base + ".down.w"), mv.at(base + ".down.b"), {2, 1}));
        auto r1 = relu(conv2d(y, mv.at(base + ".res1.w"), mv.at(base + ".res1.b"), {1, 1}));
        auto r2 = conv2d(r1, mv.at(base + ".res2.w"), mv.at(base + ".res2.b"), {1, 1});
        return relu(add(y, r2));
    };
    auto x = relu(conv2d(input, mv.at("encoder.stem.w"), mv.at("encoder.stem.b"), {2, 3}));
    x = stage(x, "encoder.stage1");
    auto s2 = stage(x, "encoder.stage2");
    auto s3 = stage(s2, "encoder.stage3");
    EncoderMaps<S> maps;
    maps.level1 = conv2d(s2, mv.at("encoder.proj1.w"), mv.at("encoder.proj1.b"), {1, 0});
    maps.level2 = conv2d(s3, mv.at("encoder.proj2.w"), mv.at("encoder.proj2.b"), {1, 0});
    return maps;
}

// Projected sampling locations of the coarse vertices in feature-map
// coordinates for both levels. Projection happens at the pose's image size
// and is rescaled, which matches resizing the silhouette to the encoder
// resolution. Vertices behind the near plane are marked invalid and pool
// zeros; off-image locations clamp to the map border inside bilinear_sample.
template <class S>
struct PoolingPoints {
    std::shared_ptr<ad::SamplePoints<S>> level1;
    std::shared_ptr<ad::SamplePoints<S>> level2;
};

template <class S>
PoolingPoints<S> pooling_points(const TriangleMesh<S>& coarse, const CameraPose& pose, int encoder_resolution,
                                int map1_size, int map2_size) {
    auto proj = project_vertices(coarse, pose);
    const int n = static_cast<int>(proj.size());
    PoolingPoints<S> out;
    out.level1 = std::make_shared<ad::SamplePoints<S>>();
    out.level2 = std::make_shared<ad::SamplePoints<S>>();
    for (auto* pts : {out.level1.get(), out.level2.get()}) {
        pts->xy.resize(n, 2);
        pts->valid.resize(n);
    }
    const double sx = static_cast<double>(encoder_resolution) / pose.width;
    const double sy = static_cast<double>(encoder_resolution) / pose.height;
    const double stride1 = static_cast<double>(encoder_resolution) / map1_size;
    const double stride2 = static_cast<double>(encoder_resolution) / map2_size;
    for (int i = 0; i < n; ++i) {
        const double ex = proj[i].x * sx;
        const double ey = proj[i].y * sy;
        out.level1->xy(i, 0) = S((ex + 0.5) / stride1 - 0.5);
        out.level1->xy(i, 1) = S((ey + 0.5) / stride1 - 0.5);
        out.level2->xy(i, 0) = S((ex + 0.5) / stride2 - 0.5);
        out.level2->xy(i, 1) = S((ey + 0.5) / stride2 - 0.5);
        out.level1->valid[i] = proj[i].valid;
        out.level2->valid[i] = proj[i].valid;
    }
    return out;
}

// Per-vertex bilinear pooling from both feature levels.
template <class S>
std::pair<ad::Var<S>, ad::Var<S>> pool_vertex_features(ad::Tape<S>& tape, const EncoderMaps<S>& maps,
                                                       const PoolingPoints<S>& points) {
    (void)tape;
    return {ad::bilinear_sample(maps.level1, points.level1), ad::bilinear_sample(maps.level2, points.level2)};
}

// Symmetric-normalized adjacency with self loops for the graph refiner.
template <class S>
std::shared_ptr<ad::SparseMat<S>> normalized_adjacency(const TriangleMesh<S>& mesh) {
    const int n = mesh.vertex_count();
    std::vector<Eigen::Triplet<S>> trip;
    std::vector<S> degree(n, S(1));  // self loop
    for (const auto& [a, b] : mesh.edges) {
        degree[a] += S(1);
        degree[b] += S(1);
    }
    std::vector<S> inv_sqrt(n);
    for (int i = 0; i < n; ++i) inv_sqrt[i] = S(1) / std::sqrt(degree[i]);
    for (int i = 0; i < n; ++i) trip.emplace_back(i, i, inv_sqrt[i] * inv_sqrt[i]);
    for (const auto& [a, b] : mesh.edges) {
        trip.emplace_back(a, b, inv_sqrt[a] * inv_sqrt[b]);
        trip.emplace_back(b, a, inv_sqrt[a] * inv_sqrt[b]);
    }
    auto A = std::make_shared<ad::SparseMat<S>>(n, n);
    A->setFromTriplets(trip.begin(), trip.end());
    return A;
}

// Three graph-convolution layers H' = relu(A H W); the first layer consumes
// the two pooled feature blocks through its split weight.
template <class S>
ad::Var<S> refine_features(ad::Tape<S>& tape, const ModelVars<S>& mv, std::shared_ptr<ad::SparseMat<S>> adj,
                           ad::Var<S> f1, ad::Var<S> f2) {
    using namespace ad;
    (void)tape;
    auto mixed = add(matmul(f1, mv.at("refiner.l1.wa")), matmul(f2, mv.at("refiner.l1.wb")));
    auto h = relu(spmm(adj, mixed));
    for (int l = 2; l <= NetworkArch::kGcnLayers; ++l)
        h = relu(spmm(adj, matmul(h, mv.at("refiner.l" + std::to_string(l) + ".w"))));
    return h;
}

template <class S>
ad::Var<S> head_displacement(ad::Tape<S>& tape, const ModelVars<S>& mv, ad::Var<S> h) {
    using namespace ad;
    (void)tape;
    auto z = relu(add(matmul(h, mv.at("head_dis.fc1.w")), mv.at("head_dis.fc1.b")));
    return add(matmul(z, mv.at("head_dis.fc2.w")), mv.at("head_dis.fc2.b"));
}

constexpr double kConfidenceFloor = 1e-4;

template <class S>
ad::Var<S> head_confidence(ad::Tape<S>& tape, const ModelVars<S>& mv, ad::Var<S> h) {
    using namespace ad;
    (void)tape;
    auto z = relu(add(matmul(h, mv.at("head_conf.fc1.w")), mv.at("head_conf.fc1.b")));
    auto logit = add(matmul(z, mv.at("head_conf.fc2.w")), mv.at("head_conf.fc2.b"));
    return clamp(sigmoid(logit), S(kConfidenceFloor), S(1));
}

// Everything fixed per instance: the resized silhouette, pooling locations,
// and graph adjacency.
template <class S>
struct ForwardContext {
    ad::ArrayX<S> input;  // {1, R, R} flattened
    int resolution = 0;
    PoolingPoints<S> points;
    std::shared_ptr<ad::SparseMat<S>> adjacency;
};

// Expected encoder map sizes; the stem is 7x7 stride-2 pad-3, stages halve.
inline std::pair<int, int> encoder_map_sizes(int resolution) {
    int s = (resolution + 2 * 3 - 7) / 2 + 1;    // stem
    int s1 = (s + 2 - 3) / 2 + 1;                // stage1
    int s2 = (s1 + 2 - 3) / 2 + 1;               // stage2 -> level 1
    int s3 = (s2 + 2 - 3) / 2 + 1;               // stage3 -> level 2
    return {s2, s3};
}

template <class S>
ForwardContext<S> make_forward_context(const TriangleMesh<S>& coarse, const Image<S>& silhouette,
                                       const CameraPose& pose, int encoder_resolution) {
    ForwardContext<S> ctx;
    ctx.resolution = encoder_resolution;
    Image<S> resized = resize_bilinear(silhouette, encoder_resolution, encoder_resolution);
    ctx.input = Eigen::Map<const ad::ArrayX<S>>(resized.data(), resized.size());
    auto [m1, m2] = encoder_map_sizes(encoder_resolution);
    ctx.points = pooling_points(coarse, pose, encoder_resolution, m1, m2);
    ctx.adjacency = normalized_adjacency(coarse);
    return ctx;
}

// The full network: silhouette encoding, vertex pooling, graph refinement,
// and both output branches. Returns {V_dis {N,3}, V_sConf {N,1}}.
template <class S>
std::pair<ad::Var<S>, ad::Var<S>> network_forward(ad::Tape<S>& tape, const ModelVars<S>& mv,
                                                  const ForwardContext<S>& ctx) {
    auto input = tape.constant({1, ctx.resolution, ctx.resolution}, ctx.input);
    auto maps = encode(tape, mv, input);
    auto [f1, f2] = pool_vertex_features(tape, maps, ctx.points);
    auto h = refine_features(tape, mv, ctx.adjacency, f1, f2);
    return {head_displacement(tape, mv, h), head_confidence(tape, mv, h)};
}

// ---------------------------------------------------------------------------
// debug checkpoint: raw little-endian array blob + text manifest

template <class S>
void save_checkpoint(const RefineModel<S>& model, const std::string& bin_path, const std::string& manifest_path) {
    std::FILE* f = std::fopen(bin_path.c_str(), "wb");
    if (f == nullptr) throw std::runtime_error("cannot write checkpoint: " + bin_path);
    std::ofstream man(manifest_path);
    if (!man) {
        std::fclose(f);
        throw std::runtime_error("cannot write manifest: " + manifest_path);
    }
    long offset = 0;
    for (const auto& p : model.params) {
        std::fwrite(p.data.data(), sizeof(S), p.data.size(), f);
        man << p.name;
        for (int d : p.shape) man << ' ' << d;
        man << " @ " << offset << '\n';
        offset += static_cast<long>(p.data.size() * sizeof(S));
    }
    std::fclose(f);
}

template <class S>
void load_checkpoint(RefineModel<S>& model, const std::string& bin_path) {
    std::FILE* f = std::fopen(bin_path.c_str(), "rb");
    if (f == nullptr) throw std::runtime_error("cannot read checkpoint: " + bin_path);
    for (auto& p : model.params) {
        size_t got = std::fread(p.data.data(), sizeof(S), p.data.size(), f);
        if (got != static_cast<size_t>(p.data.size())) {
            std::fclose(f);
            throw std::runtime_error("checkpoint truncated: " + bin_path);
        }
    }
    std::fclose(f);
}

}  // namespace refine
