#pragma once

#include <cmath>
#include <map>

#include "refine/mesh.hpp"

namespace refine {

// Axis-aligned box centered at the origin with the given half-extents.
template <class S = double>
TriangleMesh<S> make_box(S hx, S hy, S hz) {
    VertexMatrix<S> V(8, 3);
    int idx = 0;
    for (int zi : {-1, 1})
        for (int yi : {-1, 1})
            for (int xi : {-1, 1}) V.row(idx++) << S(xi) * hx, S(yi) * hy, S(zi) * hz;
    // 12 triangles, outward winding
    std::vector<std::array<int, 3>> F = {
        {0, 2, 1}, {1, 2, 3},  // z = -hz
        {4, 5, 6}, {5, 7, 6},  // z = +hz
        {0, 1, 4}, {1, 5, 4},  // y = -hy
        {2, 6, 3}, {3, 6, 7},  // y = +hy
        {0, 4, 2}, {2, 4, 6},  // x = -hx
        {1, 3, 5}, {3, 7, 5},  // x = +hx
    };
    return make_mesh<S>(std::move(V), F);
}

// Regular octahedron with unit-radius vertices; mirror symmetric about z=0.
template <class S = double>
TriangleMesh<S> make_octahedron(S radius = S(1)) {
    VertexMatrix<S> V(6, 3);
    V << radius, 0, 0, -radius, 0, 0, 0, radius, 0, 0, -radius, 0, 0, 0, radius, 0, 0, -radius;
    std::vector<std::array<int, 3>> F = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4},
                                         {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
    return make_mesh<S>(std::move(V), F);
}

// Icosphere by midpoint subdivision of an icosahedron, vertices on the unit
// sphere. Level 0 = 12 vertices, 1 = 42, 2 = 162, 3 = 642. The vertex set is
// exactly mirror symmetric about z=0 (negation is exact in floating point).
template <class S = double>
TriangleMesh<S> make_icosphere(int subdivisions, S radius = S(1)) {
    const S phi = S((1.0 + std::sqrt(5.0)) / 2.0);
    std::vector<std::array<S, 3>> verts = {
        {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0}, {0, -1, phi},  {0, 1, phi},
        {0, -1, -phi}, {0, 1, -phi}, {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
    std::vector<std::array<int, 3>> faces = {
        {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},  {5, 11, 4},
        {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6},  {3, 6, 8},
        {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};

    auto normalize = [&](std::array<S, 3>& v) {
        S len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        v = {v[0] / len * radius, v[1] / len * radius, v[2] / len * radius};
    };
    for (auto& v : verts) normalize(v);

    for (int level = 0; level < subdivisions; ++level) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            auto key = std::make_pair(std::min(a, b), std::max(a, b));
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            std::array<S, 3> m = {(verts[a][0] + verts[b][0]) / S(2), (verts[a][1] + verts[b][1]) / S(2),
                                  (verts[a][2] + verts[b][2]) / S(2)};
            normalize(m);
            verts.push_back(m);
            int idx = static_cast<int>(verts.size()) - 1;
            midpoint[key] = idx;
            return idx;
        };
        std::vector<std::array<int, 3>> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        faces = std::move(next);
    }

    VertexMatrix<S> V(static_cast<Eigen::Index>(verts.size()), 3);
    for (size_t i = 0; i < verts.size(); ++i) V.row(static_cast<Eigen::Index>(i)) << verts[i][0], verts[i][1], verts[i][2];
    return make_mesh<S>(std::move(V), faces);
}

// L-shaped prism: a box cross-section with the +x/+y quadrant removed,
// extruded along z and mirror symmetric about z=0. The concave step makes it
// a harder silhouette target than a convex box.
template <class S = double>
TriangleMesh<S> make_l_prism(S half_z = S(0.55), S extent = S(0.8)) {
    const S e = extent;
    const S corners[6][2] = {{-e, -e}, {e, -e}, {e, 0}, {0, 0}, {0, e}, {-e, e}};  // CCW
    VertexMatrix<S> V(12, 3);
    for (int i = 0; i < 6; ++i) {
        V.row(i) << corners[i][0], corners[i][1], -half_z;
        V.row(i + 6) << corners[i][0], corners[i][1], half_z;
    }
    std::vector<std::array<int, 3>> F;
    for (int i = 0; i < 6; ++i) {
        int j = (i + 1) % 6;
        F.push_back({i, j, i + 6});
        F.push_back({j, j + 6, i + 6});
    }
    // caps fan from corner 0, which sees the whole L
    for (int k = 1; k < 5; ++k) {
        F.push_back({0, k + 1, k});
        F.push_back({6, 6 + k, 6 + k + 1});
    }
    return make_mesh<S>(std::move(V), F);
}

// Flatten every vertex with z above the cut plane onto it. Used to build
// asymmetric variants of symmetric shapes.
template <class S>
TriangleMesh<S> truncate_lobe(const TriangleMesh<S>& mesh, S z_cut) {
    TriangleMesh<S> out = mesh;
    for (Eigen::Index i = 0; i < out.vertices.rows(); ++i)
        if (out.vertices(i, 2) > z_cut) out.vertices(i, 2) = z_cut;
    return out;
}

}  // namespace refine
