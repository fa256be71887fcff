#pragma once

#include <unordered_map>

#include "refine/rasterizer.hpp"
#include "refine/tape.hpp"

namespace refine::ad {

// Soft-silhouette render as a tape node: {N,3} vertex positions -> {H,W}
// image. The camera is fixed; gradients flow to vertices only.
template <class S>
Var<S> render_silhouette(Var<S> verts, std::shared_ptr<const FaceMatrix> faces, const CameraPose& pose,
                         const RenderSettings<S>& settings) {
    Tape<S>& t = *verts.tape;
    const Shape& vs = verts.shape();
    if (vs.size() != 2 || vs[1] != 3) throw std::invalid_argument("render_silhouette expects {N,3} vertices");
    const int N = vs[0];

    Eigen::Map<const VertexMatrix<S>> V(verts.value().data(), N, 3);
    auto cache = std::make_shared<RasterCache<S>>();
    Image<S> img = soft_silhouette_at<S>(V, *faces, pose, settings, cache.get());

    ArrayX<S> out = Eigen::Map<const ArrayX<S>>(img.data(), img.size());
    int vid = verts.id;
    return t.record({settings.height, settings.width}, std::move(out), t.requires_grad(verts),
                    [vid, faces, pose, settings, cache, N](Tape<S>& tp, int out_id) {
                        Image<S> up(settings.height, settings.width);
                        Eigen::Map<ArrayX<S>>(up.data(), up.size()) = tp.grad(out_id);
                        Eigen::Map<const VertexMatrix<S>> V2(tp.value(vid).data(), N, 3);
                        VertexMatrix<S> g = silhouette_vjp_at<S>(V2, *faces, pose, settings, up, cache.get());
                        Eigen::Map<VertexMatrix<S>>(tp.grad(vid).data(), N, 3) += g;
                    });
}

namespace nn_detail {

// Exact nearest neighbor from each query to the point set. Brute force below
// 2000 points, uniform spatial grid above; both exact, ties to lowest index.
template <class S>
std::vector<int> nearest_indices(const Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor>& queries,
                                 const Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor>& points) {
    const int nq = static_cast<int>(queries.rows());
    const int np = static_cast<int>(points.rows());
    std::vector<int> best(nq, 0);
    if (np == 0) throw std::invalid_argument("nearest_indices on empty point set");

    if (np <= 2000) {
        for (int i = 0; i < nq; ++i) {
            S bd = std::numeric_limits<S>::max();
            int bj = 0;
            for (int j = 0; j < np; ++j) {
                S d = (queries.row(i) - points.row(j)).squaredNorm();
                if (d < bd) {
                    bd = d;
                    bj = j;
                }
            }
            best[i] = bj;
        }
        return best;
    }

    Eigen::Matrix<S, 1, 3> lo = points.colwise().minCoeff();
    Eigen::Matrix<S, 1, 3> hi = points.colwise().maxCoeff();
    S diag = (hi - lo).norm();
    S cell = std::max(S(diag / std::cbrt(static_cast<double>(np))), S(1e-12));
    auto key = [&](int cx, int cy, int cz) {
        return (static_cast<long long>(cx) * 73856093LL) ^ (static_cast<long long>(cy) * 19349663LL) ^
               (static_cast<long long>(cz) * 83492791LL);
    };
    auto cell_of = [&](const Eigen::Matrix<S, 1, 3>& p, int& cx, int& cy, int& cz) {
        cx = static_cast<int>(std::floor((p.x() - lo.x()) / cell));
        cy = static_cast<int>(std::floor((p.y() - lo.y()) / cell));
        cz = static_cast<int>(std::floor((p.z() - lo.z()) / cell));
    };
    std::unordered_map<long long, std::vector<int>> grid;
    for (int j = 0; j < np; ++j) {
        int cx, cy, cz;
        Eigen::Matrix<S, 1, 3> p = points.row(j);
        cell_of(p, cx, cy, cz);
        grid[key(cx, cy, cz)].push_back(j);
    }
    // grid span bounds the ring expansion
    int span = 2;
    {
        int lx, ly, lz, hx, hy, hz;
        Eigen::Matrix<S, 1, 3> lorow = lo, hirow = hi;
        cell_of(lorow, lx, ly, lz);
        cell_of(hirow, hx, hy, hz);
        span = std::max({hx - lx, hy - ly, hz - lz}) + 2;
    }
    for (int i = 0; i < nq; ++i) {
        Eigen::Matrix<S, 1, 3> q = queries.row(i);
        int cx, cy, cz;
        cell_of(q, cx, cy, cz);
        S bd = std::numeric_limits<S>::max();
        int bj = -1;
        for (int ring = 0; ring <= 2 * span; ++ring) {
            // a point in ring r is at least (r-1)*cell away: once the best
            // candidate is closer than that, no further ring can win
            if (bj >= 0 && S(ring - 1) * cell > S(0) &&
                (S(ring - 1) * cell) * (S(ring - 1) * cell) >= bd)
                break;
            for (int dz = -ring; dz <= ring; ++dz)
                for (int dy = -ring; dy <= ring; ++dy)
                    for (int dx = -ring; dx <= ring; ++dx) {
                        if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                        auto it = grid.find(key(cx + dx, cy + dy, cz + dz));
                        if (it == grid.end()) continue;
                        for (int j : it->second) {
                            S d = (q - points.row(j)).squaredNorm();
                            if (d < bd || (d == bd && j < bj)) {
                                bd = d;
                                bj = j;
                            }
                        }
                    }
        }
        if (bj < 0) {  // query far outside the grid: fall back to brute force
            for (int j = 0; j < np; ++j) {
                S d = (q - points.row(j)).squaredNorm();
                if (d < bd) {
                    bd = d;
                    bj = j;
                }
            }
        }
        best[i] = bj;
    }
    return best;
}

}  // namespace nn_detail

// Per-vertex squared distance to the nearest vertex of the reflected set:
// out[i] = min_j || T v_i - v_j ||^2. Backward routes through the selected
// pair only (min subgradient, ties to lowest index).
template <class S>
Var<S> reflected_nn_sqdist(Var<S> verts, const Eigen::Matrix<S, 3, 3>& reflect) {
    Tape<S>& t = *verts.tape;
    const Shape& vs = verts.shape();
    if (vs.size() != 2 || vs[1] != 3) throw std::invalid_argument("reflected_nn_sqdist expects {N,3}");
    const int N = vs[0];
    if (N == 0) throw std::invalid_argument("reflected_nn_sqdist on empty vertex set");

    using VM = Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor>;
    Eigen::Map<const VM> V(verts.value().data(), N, 3);
    VM R = V * reflect.transpose();  // rows are T v_i
    auto nn = std::make_shared<std::vector<int>>(nn_detail::nearest_indices<S>(R, V));

    ArrayX<S> out(N);
    for (int i = 0; i < N; ++i) out[i] = (R.row(i) - V.row((*nn)[i])).squaredNorm();

    int vid = verts.id;
    Eigen::Matrix<S, 3, 3> Tm = reflect;
    return t.record({N}, std::move(out), t.requires_grad(verts), [vid, nn, Tm, N](Tape<S>& tp, int out_id) {
        const ArrayX<S>& g = tp.grad(out_id);
        Eigen::Map<const VM> V2(tp.value(vid).data(), N, 3);
        Eigen::Map<VM> GV(tp.grad(vid).data(), N, 3);
        for (int i = 0; i < N; ++i) {
            if (g[i] == S(0)) continue;
            int j = (*nn)[i];
            Eigen::Matrix<S, 1, 3> diff = V2.row(i) * Tm.transpose() - V2.row(j);
            GV.row(i) += S(2) * g[i] * diff * Tm;  // d/dv_i = 2 T^T diff
            GV.row(j) -= S(2) * g[i] * diff;
        }
    });
}

}  // namespace refine::ad
