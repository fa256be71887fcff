#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <random>

#include "refine/losses.hpp"
#include "refine/network.hpp"
#include "refine/shapes.hpp"

using namespace refine;
using namespace refine::ad;

namespace {

Image<float> random_silhouette(int size, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> d(0.f, 1.f);
    Image<float> img(size, size);
    for (int j = 0; j < size; ++j)
        for (int k = 0; k < size; ++k) img(j, k) = d(rng);
    return img;
}

}  // namespace

TEST_CASE("parameter budget sits in the anchored band") {
    auto model = make_refine_model<float>(0);
    CHECK(model.parameter_count() >= 500'000);
    CHECK(model.parameter_count() <= 1'200'000);
}

TEST_CASE("encoder map shapes at 224 are 28 and 14 with 256/512 channels") {
    auto [m1, m2] = encoder_map_sizes(224);
    CHECK(m1 == 28);
    CHECK(m2 == 14);

    auto model = make_refine_model<float>(1, 224);
    Tape<float> t;
    auto mv = register_params(t, model);
    Image<float> sil = random_silhouette(224, 2);
    auto input = t.constant({1, 224, 224}, Eigen::Map<const ArrayX<float>>(sil.data(), sil.size()));
    auto maps = encode(t, mv, input);
    CHECK(maps.level1.shape() == Shape{256, 28, 28});
    CHECK(maps.level2.shape() == Shape{512, 14, 14});
}

TEST_CASE("all-zero silhouette gives deterministic bias-driven maps") {
    auto model = make_refine_model<float>(3, 64);
    auto run = [&] {
        Tape<float> t;
        auto mv = register_params(t, model);
        auto input = t.constant({1, 64, 64}, ArrayX<float>::Zero(64 * 64));
        auto maps = encode(t, mv, input);
        return ArrayX<float>(maps.level1.value());
    };
    auto a = run(), b = run();
    CHECK((a == b).all());
    CHECK(a.isFinite().all());
}

TEST_CASE("encoder is bit-deterministic per seed") {
    Image<float> sil = random_silhouette(64, 7);
    auto run = [&] {
        auto model = make_refine_model<float>(42, 64);
        Tape<float> t;
        auto mv = register_params(t, model);
        auto input = t.constant({1, 64, 64}, Eigen::Map<const ArrayX<float>>(sil.data(), sil.size()));
        auto maps = encode(t, mv, input);
        return std::make_pair(ArrayX<float>(maps.level1.value()), ArrayX<float>(maps.level2.value()));
    };
    auto [a1, a2] = run();
    auto [b1, b2] = run();
    CHECK((a1 == b1).all());
    CHECK((a2 == b2).all());

    // different seeds give different weights
    auto m1 = make_refine_model<float>(1);
    auto m2 = make_refine_model<float>(2);
    CHECK_FALSE((m1.params[0].data == m2.params[0].data).all());
}

TEST_CASE("pooling: grid-point and midpoint bilinear semantics") {
    Tape<float> t;
    // 2 channels, 3x4 map with known values
    ArrayX<float> md(24);
    for (int i = 0; i < 24; ++i) md[i] = float(i);
    auto map = t.constant({2, 3, 4}, md);
    auto pts = std::make_shared<SamplePoints<float>>();
    pts->xy.resize(3, 2);
    pts->xy << 1.f, 2.f,   // exact cell center -> that cell's vector
        1.5f, 2.f,          // midway between two cells -> their mean
        100.f, -5.f;        // far off-image -> border clamp
    pts->valid = {1, 1, 1};
    auto out = bilinear_sample(map, pts);
    CHECK(out.shape() == Shape{3, 2});
    CHECK(out.value()[0] == doctest::Approx(9.f));        // channel 0, (y=2,x=1)
    CHECK(out.value()[1] == doctest::Approx(12.f + 9.f)); // channel 1 plane offset 12
    CHECK(out.value()[2] == doctest::Approx(9.5f));
    CHECK(out.value()[4] == doctest::Approx(3.f));        // clamped to (y=0,x=3)
}

TEST_CASE("pooling matches a hand-computed 4-neighbor weighted sum") {
    std::mt19937 rng(19);
    std::uniform_real_distribution<float> d(0.f, 1.f);
    ArrayX<float> md(30);
    for (int i = 0; i < 30; ++i) md[i] = d(rng);
    Tape<float> t;
    auto map = t.constant({1, 5, 6}, md);
    auto pts = std::make_shared<SamplePoints<float>>();
    const float px = 2.3f, py = 1.7f;
    pts->xy.resize(1, 2);
    pts->xy << px, py;
    pts->valid = {1};
    auto out = bilinear_sample(map, pts);
    auto at = [&](int y, int x) { return md[y * 6 + x]; };
    float fx = px - 2.f, fy = py - 1.f;
    float expect = (1 - fy) * ((1 - fx) * at(1, 2) + fx * at(1, 3)) + fy * ((1 - fx) * at(2, 2) + fx * at(2, 3));
    CHECK(out.value()[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("graph refiner: isolated vertex and equal-feature neighbors") {
    // single vertex: A_hat = 1, the layer reduces to relu(H W)
    TriangleMesh<float> single;
    single.vertices.resize(1, 3);
    single.vertices.setZero();
    single.faces.resize(0, 3);
    single.neighbors = {{}};
    auto adj = normalized_adjacency(single);
    CHECK(adj->coeff(0, 0) == doctest::Approx(1.f));

    // two connected vertices with identical features produce identical rows
    TriangleMesh<float> pair;
    pair.vertices.resize(2, 3);
    pair.vertices.setZero();
    pair.faces.resize(0, 3);
    pair.edges = {{0, 1}};
    pair.neighbors = {{1}, {0}};
    auto adj2 = normalized_adjacency(pair);
    auto model = make_refine_model<float>(5, 64);
    Tape<float> t;
    auto mv = register_params(t, model);
    ArrayX<float> f1d(2 * 256), f2d(2 * 512);
    std::mt19937 rng(23);
    std::uniform_real_distribution<float> d(-1.f, 1.f);
    for (int i = 0; i < 256; ++i) f1d[i] = f1d[256 + i] = d(rng);
    for (int i = 0; i < 512; ++i) f2d[i] = f2d[512 + i] = d(rng);
    auto h = refine_features(t, mv, adj2, t.constant({2, 256}, f1d), t.constant({2, 512}, f2d));
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> H(h.value().data(), 2,
                                                                                              256);
    CHECK((H.row(0) - H.row(1)).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("graph refiner matches a hand-computed path graph layer") {
    // path 0-1-2: degrees with self loops are 2,3,2
    TriangleMesh<double> path;
    path.vertices.resize(3, 3);
    path.vertices.setZero();
    path.faces.resize(0, 3);
    path.edges = {{0, 1}, {1, 2}};
    path.neighbors = {{1}, {0, 2}, {1}};
    auto adj = normalized_adjacency(path);
    Eigen::Matrix3d expect;
    const double s2 = 1.0 / std::sqrt(2.0), s3 = 1.0 / std::sqrt(3.0);
    expect << 0.5, s2 * s3, 0, s2 * s3, 1.0 / 3.0, s2 * s3, 0, s2 * s3, 0.5;
    Eigen::Matrix3d got = Eigen::Matrix3d(*adj);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);

    // relu(A H W) against an explicit product with a hand-set weight
    Tape<double> t;
    ArrayX<double> hd(3 * 2);
    hd << 1, -1, 0.5, 2, -0.25, 0.75;
    auto H = t.constant({3, 2}, hd);
    ArrayX<double> wd(2 * 2);
    wd << 0.5, -1, 1, 0.25;
    auto W = t.constant({2, 2}, wd);
    auto out = relu(spmm(adj, matmul(H, W)));
    Eigen::Matrix<double, 3, 2, Eigen::RowMajor> Hm, Wm2;
    Hm << 1, -1, 0.5, 2, -0.25, 0.75;
    Eigen::Matrix2d Wm;
    Wm << 0.5, -1, 1, 0.25;
    Eigen::Matrix<double, 3, 2> manual = (expect * (Hm * Wm)).cwiseMax(0.0);
    Eigen::Map<const Eigen::Matrix<double, 3, 2, Eigen::RowMajor>> got2(out.value().data());
    CHECK((got2 - manual).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("heads: zero features give zero displacement and 0.5 confidence") {
    auto model = make_refine_model<float>(9, 64);
    // zero the biases is already true; zero features kill the linear parts
    Tape<float> t;
    auto mv = register_params(t, model);
    auto h = t.constant({4, 256}, ArrayX<float>::Zero(4 * 256));
    auto dis = head_displacement(t, mv, h);
    auto conf = head_confidence(t, mv, h);
    CHECK(dis.shape() == Shape{4, 3});
    CHECK(conf.shape() == Shape{4, 1});
    CHECK((dis.value() == 0.f).all());
    for (int i = 0; i < 4; ++i) CHECK(conf.value()[i] == doctest::Approx(0.5f));
}

TEST_CASE("confidences always stay within [1e-4, 1]") {
    auto model = make_refine_model<float>(11, 64);
    Tape<float> t;
    auto mv = register_params(t, model);
    std::mt19937 rng(31);
    std::uniform_real_distribution<float> d(-50.f, 50.f);
    ArrayX<float> hd(8 * 256);
    for (int i = 0; i < hd.size(); ++i) hd[i] = d(rng);
    auto conf = head_confidence(t, mv, t.constant({8, 256}, hd));
    CHECK(conf.value().minCoeff() >= float(kConfidenceFloor));
    CHECK(conf.value().maxCoeff() <= 1.f);
}

TEST_CASE("full forward: shapes, init scale, vertex permutation equivariance") {
    auto coarse = make_icosphere<float>(1, 0.8f);
    auto pose = CameraPose::from_angles(30.0, 20.0, 3.0, 40.0, 64, 64);
    Image<float> sil = random_silhouette(64, 3);
    auto ctx = make_forward_context(coarse, sil, pose, 64);

    auto model = make_refine_model<float>(17, 64);
    Tape<float> t;
    auto mv = register_params(t, model);
    auto [dis, conf] = network_forward(t, mv, ctx);
    const int n = coarse.vertex_count();
    CHECK(dis.shape() == Shape{n, 3});
    CHECK(conf.shape() == Shape{n, 1});

    // init scale sanity across seeds
    float worst = 0.f;
    for (unsigned seed = 0; seed < 100; ++seed) {
        auto m = make_refine_model<float>(seed, 64);
        Tape<float> t2;
        auto mv2 = register_params(t2, m);
        auto [d2, c2] = network_forward(t2, mv2, ctx);
        worst = std::max(worst, d2.value().abs().maxCoeff());
    }
    CHECK(worst < 1.f);

    // permuting vertices (with faces relabeled) permutes outputs exactly
    std::mt19937 rng(41);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);  // perm[new] = old? define: new i holds old perm[i]
    TriangleMesh<float> shuffled;
    shuffled.vertices.resize(n, 3);
    std::vector<int> inverse(n);
    for (int i = 0; i < n; ++i) inverse[perm[i]] = i;
    for (int i = 0; i < n; ++i) shuffled.vertices.row(i) = coarse.vertices.row(perm[i]);
    std::vector<std::array<int, 3>> relabeled;
    for (int f = 0; f < coarse.face_count(); ++f)
        relabeled.push_back({inverse[coarse.faces(f, 0)], inverse[coarse.faces(f, 1)], inverse[coarse.faces(f, 2)]});
    auto shuffled_mesh = make_mesh<float>(std::move(shuffled.vertices), relabeled);
    auto ctx2 = make_forward_context(shuffled_mesh, sil, pose, 64);
    Tape<float> t3;
    auto mv3 = register_params(t3, model);
    auto [d3, c3] = network_forward(t3, mv3, ctx2);
    // equivariance holds to roundoff: relabeling reorders the neighbor sums
    // inside the graph aggregation, which moves the last ulp
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            float a = d3.value()[i * 3 + k], b = dis.value()[perm[i] * 3 + k];
            CHECK(std::abs(a - b) <= 1e-6f + 1e-4f * std::abs(b));
        }
        CHECK(std::abs(c3.value()[i] - conf.value()[perm[i]]) <= 1e-5f);
    }
}

TEST_CASE("heads are permutation equivariant to roundoff") {
    auto model = make_refine_model<float>(29, 64);
    Tape<float> t;
    auto mv = register_params(t, model);
    const int n = 10;
    std::mt19937 rng(43);
    std::uniform_real_distribution<float> d(-1.f, 1.f);
    ArrayX<float> hd(n * 256);
    for (int i = 0; i < hd.size(); ++i) hd[i] = d(rng);
    auto h = t.constant({n, 256}, hd);
    auto dis = head_displacement(t, mv, h);
    auto conf = head_confidence(t, mv, h);

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ArrayX<float> hp(n * 256);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 256; ++c) hp[i * 256 + c] = hd[perm[i] * 256 + c];
    auto dis_p = head_displacement(t, mv, t.constant({n, 256}, hp));
    auto conf_p = head_confidence(t, mv, t.constant({n, 256}, hp));
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            float a = dis_p.value()[i * 3 + k], b = dis.value()[perm[i] * 3 + k];
            CHECK(std::abs(a - b) <= 1e-7f + 1e-5f * std::abs(b));
        }
        CHECK(std::abs(conf_p.value()[i] - conf.value()[perm[i]]) <= 1e-6f);
    }
}

TEST_CASE("gradients reach every parameter group") {
    auto coarse = make_octahedron<float>(0.7f);
    auto pose = CameraPose::from_angles(10.0, 5.0, 3.0, 40.0, 32, 32);
    Image<float> sil = random_silhouette(32, 13);
    auto ctx = make_forward_context(coarse, sil, pose, 32);
    auto model = make_refine_model<float>(19, 32);
    Tape<float> t;
    auto mv = register_params(t, model);
    auto [dis, conf] = network_forward(t, mv, ctx);
    auto loss = add(sum(dis), sum(conf));
    t.backward(loss);
    for (const auto& [name, var] : mv.vars) {
        ArrayX<float> g = t.grad_or_zero(var);
        bool nonzero = (g != 0.f).any();
        CHECK_MESSAGE(nonzero, "zero gradient for ", name);
    }
}

TEST_CASE("checkpoint round trip restores weights") {
    auto model = make_refine_model<float>(23, 64);
    auto dir = std::filesystem::temp_directory_path() / "refine_net_tests";
    std::filesystem::create_directories(dir);
    auto bin = (dir / "ckpt.bin").string();
    auto man = (dir / "ckpt.manifest.txt").string();
    save_checkpoint(model, bin, man);
    auto other = make_refine_model<float>(24, 64);
    CHECK_FALSE((other.params[0].data == model.params[0].data).all());
    load_checkpoint(other, bin);
    for (size_t i = 0; i < model.params.size(); ++i) CHECK((other.params[i].data == model.params[i].data).all());
}
