#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "refine/log.hpp"

namespace refine {

template <class S>
using VertexMatrix = Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor>;
using FaceMatrix = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Triangle mesh: vertices, faces, and connectivity derived from the faces.
// Immutable after construction; all operations below are pure.
template <class S = double>
struct TriangleMesh {
    VertexMatrix<S> vertices;                      // N x 3
    FaceMatrix faces;                              // F x 3, indices into vertices
    std::vector<std::pair<int, int>> edges;        // unique undirected pairs, first < second
    std::vector<std::vector<int>> neighbors;       // vertex -> sorted adjacent vertices

    int vertex_count() const { return static_cast<int>(vertices.rows()); }
    int face_count() const { return static_cast<int>(faces.rows()); }

    template <class T>
    TriangleMesh<T> cast() const {
        TriangleMesh<T> out;
        out.vertices = vertices.template cast<T>();
        out.faces = faces;
        out.edges = edges;
        out.neighbors = neighbors;
        return out;
    }
};

namespace detail {

inline void build_connectivity(const FaceMatrix& faces, int n_vertices,
                               std::vector<std::pair<int, int>>& edges,
                               std::vector<std::vector<int>>& neighbors) {
    std::set<std::pair<int, int>> edge_set;
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        for (int k = 0; k < 3; ++k) {
            int a = faces(f, k);
            int b = faces(f, (k + 1) % 3);
            edge_set.insert({std::min(a, b), std::max(a, b)});
        }
    }
    edges.assign(edge_set.begin(), edge_set.end());
    neighbors.assign(n_vertices, {});
    for (const auto& [a, b] : edges) {
        neighbors[a].push_back(b);
        neighbors[b].push_back(a);
    }
    for (auto& nbrs : neighbors) std::sort(nbrs.begin(), nbrs.end());
}

}  // namespace detail

// Assemble a mesh from raw arrays. Degenerate faces (repeated indices) are
// dropped with a warning; out-of-range indices are an error.
template <class S = double>
TriangleMesh<S> make_mesh(VertexMatrix<S> vertices, const std::vector<std::array<int, 3>>& face_list) {
    const int n = static_cast<int>(vertices.rows());
    std::vector<std::array<int, 3>> kept;
    kept.reserve(face_list.size());
    int dropped = 0;
    for (const auto& f : face_list) {
        for (int idx : f) {
            if (idx < 0 || idx >= n)
                throw std::invalid_argument("face index " + std::to_string(idx) + " out of range [0," +
                                            std::to_string(n) + ")");
        }
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) {
            ++dropped;
            continue;
        }
        kept.push_back(f);
    }
    if (dropped > 0) log_info("dropped %d degenerate face(s)", dropped);

    // non-manifold geometry is accepted; it only degrades the smoothness terms
    std::map<std::pair<int, int>, int> edge_mult;
    for (const auto& f : kept)
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            ++edge_mult[{std::min(a, b), std::max(a, b)}];
        }
    int non_manifold = 0;
    for (const auto& [e, c] : edge_mult) non_manifold += c > 2;
    if (non_manifold > 0) log_info("mesh is non-manifold: %d edge(s) with more than two faces", non_manifold);

    TriangleMesh<S> mesh;
    mesh.vertices = std::move(vertices);
    mesh.faces.resize(static_cast<Eigen::Index>(kept.size()), 3);
    for (size_t i = 0; i < kept.size(); ++i) {
        mesh.faces(static_cast<Eigen::Index>(i), 0) = kept[i][0];
        mesh.faces(static_cast<Eigen::Index>(i), 1) = kept[i][1];
        mesh.faces(static_cast<Eigen::Index>(i), 2) = kept[i][2];
    }
    detail::build_connectivity(mesh.faces, n, mesh.edges, mesh.neighbors);
    return mesh;
}

// Wavefront OBJ reader. Triangle geometry only; polygons are fan-triangulated,
// normals/UVs and other statements are ignored. Vertex order is preserved.
template <class S = double>
TriangleMesh<S> load_mesh(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mesh file: " + path);

    std::vector<std::array<S, 3>> verts;
    std::vector<std::array<int, 3>> faces;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "v") {
            std::array<S, 3> v;
            double x, y, z;
            if (!(ss >> x >> y >> z))
                throw std::runtime_error(path + ":" + std::to_string(line_no) + ": unparseable vertex line");
            v = {static_cast<S>(x), static_cast<S>(y), static_cast<S>(z)};
            verts.push_back(v);
        } else if (tag == "f") {
            std::vector<int> idx;
            std::string tok;
            while (ss >> tok) {
                // "i", "i/t", "i/t/n", "i//n" all start with the vertex index
                size_t slash = tok.find('/');
                std::string head = slash == std::string::npos ? tok : tok.substr(0, slash);
                int i = 0;
                try {
                    i = std::stoi(head);
                } catch (const std::exception&) {
                    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": unparseable face token '" +
                                             tok + "'");
                }
                if (i < 0) i = static_cast<int>(verts.size()) + i + 1;  // negative = relative
                idx.push_back(i - 1);
            }
            if (idx.size() < 3)
                throw std::runtime_error(path + ":" + std::to_string(line_no) + ": face with fewer than 3 vertices");
            for (size_t k = 1; k + 1 < idx.size(); ++k)
                faces.push_back({idx[0], idx[k], idx[k + 1]});
        }
        // every other statement (vn, vt, o, g, usemtl, s, ...) is ignored
    }

    VertexMatrix<S> V(static_cast<Eigen::Index>(verts.size()), 3);
    for (size_t i = 0; i < verts.size(); ++i) {
        V(static_cast<Eigen::Index>(i), 0) = verts[i][0];
        V(static_cast<Eigen::Index>(i), 1) = verts[i][1];
        V(static_cast<Eigen::Index>(i), 2) = verts[i][2];
    }
    return make_mesh<S>(std::move(V), faces);
}

// OBJ writer; vertices printed with enough digits to round-trip exactly.
template <class S>
void save_mesh(const TriangleMesh<S>& mesh, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw std::runtime_error("cannot write mesh file: " + path);
    constexpr const char* fmt = sizeof(S) == 8 ? "v %.17g %.17g %.17g\n" : "v %.9g %.9g %.9g\n";
    for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i)
        std::fprintf(f, fmt, static_cast<double>(mesh.vertices(i, 0)), static_cast<double>(mesh.vertices(i, 1)),
                     static_cast<double>(mesh.vertices(i, 2)));
    for (Eigen::Index i = 0; i < mesh.faces.rows(); ++i)
        std::fprintf(f, "f %d %d %d\n", mesh.faces(i, 0) + 1, mesh.faces(i, 1) + 1, mesh.faces(i, 2) + 1);
    std::fclose(f);
}

// vertices_out[i] = vertices_in[i] + displacement[i]; topology untouched.
template <class S>
TriangleMesh<S> displace(const TriangleMesh<S>& mesh, const VertexMatrix<S>& displacement) {
    if (displacement.rows() != mesh.vertices.rows())
        throw std::invalid_argument("displacement field length " + std::to_string(displacement.rows()) +
                                    " does not match vertex count " + std::to_string(mesh.vertices.rows()));
    TriangleMesh<S> out = mesh;
    out.vertices = mesh.vertices + displacement;
    return out;
}

// Unit normals by right-hand winding. Zero-area faces yield a zero vector;
// their count is reported through the optional out parameter.
template <class S>
VertexMatrix<S> face_normals(const TriangleMesh<S>& mesh, int* zero_area_count = nullptr) {
    VertexMatrix<S> normals(mesh.faces.rows(), 3);
    int zeros = 0;
    for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f) {
        Eigen::Matrix<S, 3, 1> a = mesh.vertices.row(mesh.faces(f, 0));
        Eigen::Matrix<S, 3, 1> b = mesh.vertices.row(mesh.faces(f, 1));
        Eigen::Matrix<S, 3, 1> c = mesh.vertices.row(mesh.faces(f, 2));
        Eigen::Matrix<S, 3, 1> n = (b - a).cross(c - a);
        S len = n.norm();
        if (len > S(0)) {
            normals.row(f) = (n / len).transpose();
        } else {
            normals.row(f).setZero();
            ++zeros;
        }
    }
    if (zeros > 0 && zero_area_count == nullptr) log_debug("%d zero-area face(s) in normal computation", zeros);
    if (zero_area_count != nullptr) *zero_area_count = zeros;
    return normals;
}

// Uniform (combinatorial) Laplacian: out[i] = mean_j positions[j] - positions[i]
// over the mesh neighbors of i. Isolated vertices get zero.
template <class S>
VertexMatrix<S> uniform_laplacian(const TriangleMesh<S>& mesh, const VertexMatrix<S>& positions) {
    if (positions.rows() != mesh.vertices.rows())
        throw std::invalid_argument("position field length does not match vertex count");
    VertexMatrix<S> out(positions.rows(), 3);
    int isolated = 0;
    for (size_t i = 0; i < mesh.neighbors.size(); ++i) {
        const auto& nbrs = mesh.neighbors[i];
        if (nbrs.empty()) {
            out.row(static_cast<Eigen::Index>(i)).setZero();
            ++isolated;
            continue;
        }
        Eigen::Matrix<S, 1, 3> mean = Eigen::Matrix<S, 1, 3>::Zero();
        for (int j : nbrs) mean += positions.row(j);
        mean /= static_cast<S>(nbrs.size());
        out.row(static_cast<Eigen::Index>(i)) = mean - positions.row(static_cast<Eigen::Index>(i));
    }
    if (isolated > 0) log_info("uniform_laplacian: %d isolated vertex/vertices, zero output", isolated);
    return out;
}

// Pairs of faces sharing an edge, for the normal-consistency loss. On
// non-manifold edges (> 2 incident faces) every incident pair contributes.
inline std::vector<std::pair<int, int>> adjacent_face_pairs(const FaceMatrix& faces) {
    std::map<std::pair<int, int>, std::vector<int>> edge_faces;
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        for (int k = 0; k < 3; ++k) {
            int a = faces(f, k);
            int b = faces(f, (k + 1) % 3);
            edge_faces[{std::min(a, b), std::max(a, b)}].push_back(static_cast<int>(f));
        }
    }
    std::vector<std::pair<int, int>> pairs;
    for (const auto& [edge, incident] : edge_faces) {
        for (size_t i = 0; i < incident.size(); ++i)
            for (size_t j = i + 1; j < incident.size(); ++j) pairs.emplace_back(incident[i], incident[j]);
    }
    return pairs;
}

// Recenter to the origin and scale the longest bounding-box extent to 1.
// Returns the transform so it can be inverted on output: p' = (p - center) * scale.
template <class S>
struct NormalizeTransform {
    Eigen::Matrix<S, 3, 1> center = Eigen::Matrix<S, 3, 1>::Zero();
    S scale = S(1);

    Eigen::Matrix<S, 3, 1> apply(const Eigen::Matrix<S, 3, 1>& p) const { return (p - center) * scale; }
    Eigen::Matrix<S, 3, 1> invert(const Eigen::Matrix<S, 3, 1>& p) const { return p / scale + center; }
};

template <class S>
NormalizeTransform<S> unit_cube_transform(const TriangleMesh<S>& mesh) {
    NormalizeTransform<S> t;
    if (mesh.vertices.rows() == 0) return t;
    Eigen::Matrix<S, 1, 3> lo = mesh.vertices.colwise().minCoeff();
    Eigen::Matrix<S, 1, 3> hi = mesh.vertices.colwise().maxCoeff();
    t.center = S(0.5) * (lo + hi).transpose();
    S extent = (hi - lo).maxCoeff();
    t.scale = extent > S(0) ? S(1) / extent : S(1);
    return t;
}

template <class S>
TriangleMesh<S> apply_transform(const TriangleMesh<S>& mesh, const NormalizeTransform<S>& t, bool inverse = false) {
    TriangleMesh<S> out = mesh;
    for (Eigen::Index i = 0; i < out.vertices.rows(); ++i) {
        Eigen::Matrix<S, 3, 1> p = out.vertices.row(i).transpose();
        out.vertices.row(i) = (inverse ? t.invert(p) : t.apply(p)).transpose();
    }
    return out;
}

}  // namespace refine
