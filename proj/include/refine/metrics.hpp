#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "refine/camera.hpp"
#include "refine/image.hpp"
#include "refine/log.hpp"
#include "refine/mesh.hpp"
#include "refine/rasterizer.hpp"

namespace refine {

template <class S = double>
struct PointSample {
    Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor> points;
    unsigned seed = 0;
    int count() const { return static_cast<int>(points.rows()); }
};

// Area-weighted face choice + uniform barycentric point, deterministic per
// seed (cumulative-sum search over mt19937 uniforms).
template <class S>
PointSample<S> sample_surface(const TriangleMesh<S>& mesh, int k, unsigned seed) {
    if (mesh.face_count() == 0) throw std::invalid_argument("sample_surface requires faces");
    std::vector<double> cumulative(mesh.face_count());
    double total = 0.0;
    for (int f = 0; f < mesh.face_count(); ++f) {
        Eigen::Matrix<S, 3, 1> a = mesh.vertices.row(mesh.faces(f, 0));
        Eigen::Matrix<S, 3, 1> b = mesh.vertices.row(mesh.faces(f, 1));
        Eigen::Matrix<S, 3, 1> c = mesh.vertices.row(mesh.faces(f, 2));
        total += 0.5 * static_cast<double>(((b - a).cross(c - a)).norm());
        cumulative[f] = total;
    }
    if (total <= 0.0) throw std::invalid_argument("sample_surface on a zero-area mesh");

    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    PointSample<S> out;
    out.seed = seed;
    out.points.resize(k, 3);
    for (int i = 0; i < k; ++i) {
        double r = uni(rng) * total;
        int f = static_cast<int>(std::lower_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
        f = std::min(f, mesh.face_count() - 1);
        double u = uni(rng), v = uni(rng);
        if (u + v > 1.0) {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        Eigen::Matrix<S, 1, 3> a = mesh.vertices.row(mesh.faces(f, 0));
        Eigen::Matrix<S, 1, 3> b = mesh.vertices.row(mesh.faces(f, 1));
        Eigen::Matrix<S, 1, 3> c = mesh.vertices.row(mesh.faces(f, 2));
        out.points.row(i) = a + S(u) * (b - a) + S(v) * (c - a);
    }
    return out;
}

namespace metric_detail {

template <class S>
S min_sq_dist(const Eigen::Matrix<S, 1, 3>& p, const Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor>& set) {
    S best = std::numeric_limits<S>::max();
    for (Eigen::Index j = 0; j < set.rows(); ++j) best = std::min(best, (p - set.row(j)).squaredNorm());
    return best;
}

}  // namespace metric_detail

// Symmetric mean of squared nearest-neighbor distances.
template <class S>
S chamfer_l2(const PointSample<S>& a, const PointSample<S>& b) {
    if (a.count() == 0 || b.count() == 0) throw std::invalid_argument("chamfer on empty point set");
    S ab = S(0), ba = S(0);
    for (int i = 0; i < a.count(); ++i) ab += metric_detail::min_sq_dist<S>(a.points.row(i), b.points);
    for (int i = 0; i < b.count(); ++i) ba += metric_detail::min_sq_dist<S>(b.points.row(i), a.points);
    return ab / S(a.count()) + ba / S(b.count());
}

// F-score (percentage) at distance threshold tau.
template <class S>
S fscore(const PointSample<S>& a, const PointSample<S>& b, S tau) {
    if (tau <= S(0)) throw std::invalid_argument("fscore threshold must be positive");
    if (a.count() == 0 || b.count() == 0) throw std::invalid_argument("fscore on empty point set");
    const S tau2 = tau * tau;
    int close_a = 0, close_b = 0;
    for (int i = 0; i < a.count(); ++i)
        close_a += metric_detail::min_sq_dist<S>(a.points.row(i), b.points) <= tau2;
    for (int i = 0; i < b.count(); ++i)
        close_b += metric_detail::min_sq_dist<S>(b.points.row(i), a.points) <= tau2;
    const S precision = S(close_a) / S(a.count());
    const S recall = S(close_b) / S(b.count());
    if (precision + recall == S(0)) return S(0);
    return S(100) * S(2) * precision * recall / (precision + recall);
}

// 1% of the bounding-box diagonal, the conventional F-score threshold.
template <class S>
S default_fscore_tau(const TriangleMesh<S>& ground_truth) {
    Eigen::Matrix<S, 1, 3> lo = ground_truth.vertices.colwise().minCoeff();
    Eigen::Matrix<S, 1, 3> hi = ground_truth.vertices.colwise().maxCoeff();
    return S(0.01) * (hi - lo).norm();
}

// ---------------------------------------------------------------------------
// assignment solvers for EMD

// Exact O(n^3) assignment via shortest augmenting paths with potentials.
// Returns the column matched to each row.
template <class S>
std::vector<int> hungarian_assignment(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& cost) {
    const int n = static_cast<int>(cost.rows());
    const int m = static_cast<int>(cost.cols());
    if (n != m) throw std::invalid_argument("assignment requires a square cost matrix");
    const S INF = std::numeric_limits<S>::max() / 4;
    std::vector<S> u(n + 1, S(0)), v(m + 1, S(0)), minv(m + 1);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), INF);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = 0;
            S delta = INF;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                S cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(n);
    for (int j = 1; j <= m; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

// Forward auction with epsilon scaling; near-optimal assignment for large
// point sets. The final epsilon bounds the suboptimality by n * eps_final.
template <class S>
std::vector<int> auction_assignment(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& cost) {
    const int n = static_cast<int>(cost.rows());
    if (n != cost.cols()) throw std::invalid_argument("assignment requires a square cost matrix");
    const S cmax = cost.maxCoeff();
    // benefits: maximize (cmax - cost)
    std::vector<S> price(n, S(0));
    std::vector<int> owner(n, -1), assigned(n, -1);

    const S range = std::max(cmax - cost.minCoeff(), S(1e-12));
    S eps = range / S(4);
    const S eps_final = range * S(1e-5) / S(n) + std::numeric_limits<S>::epsilon();
    while (true) {
        std::fill(owner.begin(), owner.end(), -1);
        std::fill(assigned.begin(), assigned.end(), -1);
        std::vector<int> queue(n);
        std::iota(queue.begin(), queue.end(), 0);
        while (!queue.empty()) {
            int i = queue.back();
            queue.pop_back();
            S best = -std::numeric_limits<S>::max(), second = best;
            int bj = -1;
            for (int j = 0; j < n; ++j) {
                S value = (cmax - cost(i, j)) - price[j];
                if (value > best) {
                    second = best;
                    best = value;
                    bj = j;
                } else if (value > second) {
                    second = value;
                }
            }
            S bid = best - second + eps;
            price[bj] += bid;
            if (owner[bj] >= 0) {
                assigned[owner[bj]] = -1;
                queue.push_back(owner[bj]);
            }
            owner[bj] = i;
            assigned[i] = bj;
        }
        if (eps <= eps_final) break;
        eps = std::max(eps / S(5), eps_final);
    }
    return assigned;
}

// Mean Euclidean matching distance under a minimum-cost bijection; exact
// Hungarian up to 256 points, scaled auction above.
template <class S>
S emd(const PointSample<S>& a, const PointSample<S>& b) {
    const int n = a.count();
    if (n != b.count()) throw std::invalid_argument("emd requires equal-size point sets");
    if (n == 0) throw std::invalid_argument("emd on empty point set");
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cost(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) cost(i, j) = (a.points.row(i) - b.points.row(j)).norm();
    std::vector<int> match = n <= 256 ? hungarian_assignment(cost) : auction_assignment(cost);
    S total = S(0);
    for (int i = 0; i < n; ++i) total += cost(i, match[i]);
    return total / S(n);
}

// ---------------------------------------------------------------------------
// volumetric IoU

// Occupancy by ray parity: for each cell center, rays along +x, +y, +z
// entering from the low side of the padded bounding box; a cell is inside
// when a majority of the three rays report odd crossing parity.
template <class S>
struct OccupancyGrid {
    int resolution = 0;
    Eigen::Matrix<S, 1, 3> origin;  // low corner of the padded box
    Eigen::Matrix<S, 1, 3> step;
    std::vector<char> occupied;  // r^3, x fastest

    int index(int ix, int iy, int iz) const { return (iz * resolution + iy) * resolution + ix; }
};

namespace metric_detail {

// Moller-Trumbore for an axis-aligned ray; returns the hit parameter.
template <class S>
bool ray_triangle(const Eigen::Matrix<S, 1, 3>& origin, int axis, const Eigen::Matrix<S, 1, 3>& a,
                  const Eigen::Matrix<S, 1, 3>& b, const Eigen::Matrix<S, 1, 3>& c, S& t_out) {
    Eigen::Matrix<S, 1, 3> dir = Eigen::Matrix<S, 1, 3>::Zero();
    dir[axis] = S(1);
    Eigen::Matrix<S, 1, 3> e1 = b - a, e2 = c - a;
    Eigen::Matrix<S, 1, 3> pvec = dir.cross(e2);
    S det = e1.dot(pvec);
    if (det == S(0)) return false;
    S inv = S(1) / det;
    Eigen::Matrix<S, 1, 3> tvec = origin - a;
    S u = tvec.dot(pvec) * inv;
    if (u < S(0) || u > S(1)) return false;
    Eigen::Matrix<S, 1, 3> qvec = tvec.cross(e1);
    S v = dir.dot(qvec) * inv;
    if (v < S(0) || u + v > S(1)) return false;
    t_out = e2.dot(qvec) * inv;
    return t_out > S(0);
}

}  // namespace metric_detail

template <class S>
OccupancyGrid<S> voxelize(const TriangleMesh<S>& mesh, const Eigen::Matrix<S, 1, 3>& lo,
                          const Eigen::Matrix<S, 1, 3>& hi, int resolution) {
    OccupancyGrid<S> grid;
    grid.resolution = resolution;
    grid.origin = lo;
    grid.step = (hi - lo) / S(resolution);
    grid.occupied.assign(resolution * resolution * resolution, 0);

    std::vector<int> votes(resolution * resolution * resolution, 0);
    std::vector<S> hits;
    for (int axis = 0; axis < 3; ++axis) {
        const int u_axis = (axis + 1) % 3, v_axis = (axis + 2) % 3;
        for (int iu = 0; iu < resolution; ++iu) {
            for (int iv = 0; iv < resolution; ++iv) {
                Eigen::Matrix<S, 1, 3> origin;
                origin[axis] = lo[axis] - grid.step[axis];  // enter from outside
                origin[u_axis] = lo[u_axis] + (S(iu) + S(0.5)) * grid.step[u_axis];
                origin[v_axis] = lo[v_axis] + (S(iv) + S(0.5)) * grid.step[v_axis];
                hits.clear();
                for (int f = 0; f < mesh.face_count(); ++f) {
                    S t;
                    if (metric_detail::ray_triangle<S>(origin, axis, mesh.vertices.row(mesh.faces(f, 0)),
                                                       mesh.vertices.row(mesh.faces(f, 1)),
                                                       mesh.vertices.row(mesh.faces(f, 2)), t))
                        hits.push_back(origin[axis] + t);
                }
                std::sort(hits.begin(), hits.end());
                for (int ic = 0; ic < resolution; ++ic) {
                    S coord = lo[axis] + (S(ic) + S(0.5)) * grid.step[axis];
                    size_t crossed = std::lower_bound(hits.begin(), hits.end(), coord) - hits.begin();
                    // odd number of surface crossings beyond the cell center
                    bool inside = ((hits.size() - crossed) % 2) == 1;
                    if (inside) {
                        int ix = axis == 0 ? ic : (u_axis == 0 ? iu : iv);
                        int iy = axis == 1 ? ic : (u_axis == 1 ? iu : iv);
                        int iz = axis == 2 ? ic : (u_axis == 2 ? iu : iv);
                        ++votes[grid.index(ix, iy, iz)];
                    }
                }
            }
        }
    }
    for (size_t i = 0; i < votes.size(); ++i) grid.occupied[i] = votes[i] >= 2;
    return grid;
}

template <class S>
bool is_closed(const TriangleMesh<S>& mesh) {
    std::map<std::pair<int, int>, int> count;
    for (int f = 0; f < mesh.face_count(); ++f)
        for (int k = 0; k < 3; ++k) {
            int a = mesh.faces(f, k), b = mesh.faces(f, (k + 1) % 3);
            ++count[{std::min(a, b), std::max(a, b)}];
        }
    for (const auto& [e, c] : count)
        if (c != 2) return false;
    return true;
}

// IoU of ray-parity occupancies over the union bounding box.
template <class S>
S volumetric_iou(const TriangleMesh<S>& mesh_a, const TriangleMesh<S>& mesh_b, int resolution = 32) {
    if (!is_closed(mesh_a) || !is_closed(mesh_b))
        log_info("%s", "volumetric_iou: non-closed input; ray parity applied regardless");
    Eigen::Matrix<S, 1, 3> lo = mesh_a.vertices.colwise().minCoeff().cwiseMin(
        Eigen::Matrix<S, 1, 3>(mesh_b.vertices.colwise().minCoeff()));
    Eigen::Matrix<S, 1, 3> hi = mesh_a.vertices.colwise().maxCoeff().cwiseMax(
        Eigen::Matrix<S, 1, 3>(mesh_b.vertices.colwise().maxCoeff()));
    const S pad = S(1e-3) * (hi - lo).norm() + S(1e-9);
    lo.array() -= pad;
    hi.array() += pad;
    auto ga = voxelize(mesh_a, lo, hi, resolution);
    auto gb = voxelize(mesh_b, lo, hi, resolution);
    long inter = 0, uni = 0;
    for (size_t i = 0; i < ga.occupied.size(); ++i) {
        inter += ga.occupied[i] && gb.occupied[i];
        uni += ga.occupied[i] || gb.occupied[i];
    }
    if (uni == 0) {
        log_info("%s", "volumetric_iou: both occupancies empty, defining IoU = 1");
        return S(1);
    }
    return S(inter) / S(uni);
}

// 2D IoU between the mesh's hard silhouette and the reference mask, both
// thresholded at 0.5.
template <class S>
S silhouette_iou_2d(const TriangleMesh<S>& mesh, const CameraPose& pose, const Image<S>& reference) {
    const int h = static_cast<int>(reference.rows());
    const int w = static_cast<int>(reference.cols());
    auto render = hard_silhouette(mesh, pose, w, h);
    long inter = 0, uni = 0;
    for (int j = 0; j < h; ++j)
        for (int k = 0; k < w; ++k) {
            bool x = render(j, k) > S(0.5), y = reference(j, k) > S(0.5);
            inter += x && y;
            uni += x || y;
        }
    if (uni == 0) {
        log_info("%s", "silhouette_iou_2d: empty union, defining IoU = 1");
        return S(1);
    }
    return S(inter) / S(uni);
}

}  // namespace refine
