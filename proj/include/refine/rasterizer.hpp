#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "refine/camera.hpp"
#include "refine/image.hpp"
#include "refine/mesh.hpp"

namespace refine {

// Soft-silhouette sharpness. sigma_rast is the squared-distance temperature in
// normalized image coordinates ([-1,1] across each axis).
template <class S>
struct RenderSettings {
    S sigma_rast = S(1e-4);
    int width = 224;
    int height = 224;
};

constexpr double kLogitCutoff = 120.0;     // sigmoid saturates to exact 1 above this
constexpr double kSilhouetteClamp = 1e-7;  // final image values in [1e-7, 1-1e-7]

// Occupancies below half an ulp of 1 are defined as exact zeros: multiplying
// the survival product by (1 - D) would be a no-op at this precision anyway.
// This makes bounding-box culling bit-exact against a full per-pixel loop.
template <class S>
constexpr S occupancy_skip_logit() {
    return S((std::numeric_limits<S>::digits + 2) * 0.6931471805599453);
}

namespace raster_detail {

template <class S>
struct Vert2 {
    S x, y, depth;
    bool valid;
};

// Perspective projection to normalized coordinates, x right, y down, both in
// [-1,1] over the image. Runs in the render scalar type so the same
// arithmetic backs forward, VJP, and finite-difference checks.
template <class S>
std::vector<Vert2<S>> project_normalized(const VertexMatrix<S>& verts, const CameraPose& pose) {
    const Eigen::Matrix<S, 3, 3> frame = camera_frame(pose).template cast<S>();
    const Eigen::Matrix<S, 3, 1> eye = pose.eye.template cast<S>();
    const S near = S(0.01) * S(pose.distance());
    const S tan_half = std::tan(S(deg2rad(pose.fov_y_deg)) / S(2));
    const S aspect = S(pose.width) / S(pose.height);

    std::vector<Vert2<S>> out(verts.rows());
    for (Eigen::Index i = 0; i < verts.rows(); ++i) {
        Eigen::Matrix<S, 3, 1> cam = frame * (verts.row(i).transpose() - eye);
        S depth = -cam.z();
        Vert2<S>& v = out[i];
        v.depth = depth;
        if (depth < near) {
            v.x = v.y = S(0);
            v.valid = false;
            continue;
        }
        v.x = cam.x() / (depth * tan_half * aspect);
        v.y = -cam.y() / (depth * tan_half);
        v.valid = true;
    }
    return out;
}

template <class S>
S stable_sigmoid(S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    S e = std::exp(x);
    return e / (S(1) + e);
}

// Squared distance from p to segment [a,b] plus the clamped parameter t.
// The distance is evaluated through the closest point c = a + t (b - a); the
// VJP differentiates the same expression.
template <class S>
S point_segment_sq(S px, S py, S ax, S ay, S bx, S by, S& t_out) {
    S ex = bx - ax, ey = by - ay;
    S len2 = ex * ex + ey * ey;
    S t = len2 > S(0) ? ((px - ax) * ex + (py - ay) * ey) / len2 : S(0);
    t = std::min(S(1), std::max(S(0), t));
    S dx = px - (ax + t * ex), dy = py - (ay + t * ey);
    t_out = t;
    return dx * dx + dy * dy;
}

// Signed squared distance datum for one pixel against one projected triangle:
// distance to the nearest boundary edge, inside flag, and which edge/t won.
template <class S>
struct PixelFace {
    S d2;
    S t;       // parameter along the winning edge
    int edge;  // 0:(a,b) 1:(b,c) 2:(c,a)
    bool inside;
};

template <class S>
PixelFace<S> pixel_face_distance(S px, S py, const Vert2<S>& a, const Vert2<S>& b, const Vert2<S>& c) {
    PixelFace<S> out;
    S c0 = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
    S c1 = (c.x - b.x) * (py - b.y) - (c.y - b.y) * (px - b.x);
    S c2 = (a.x - c.x) * (py - c.y) - (a.y - c.y) * (px - c.x);
    out.inside = (c0 > S(0) && c1 > S(0) && c2 > S(0)) || (c0 < S(0) && c1 < S(0) && c2 < S(0));

    S t0, t1, t2;
    S d0 = point_segment_sq(px, py, a.x, a.y, b.x, b.y, t0);
    S d1 = point_segment_sq(px, py, b.x, b.y, c.x, c.y, t1);
    S d2 = point_segment_sq(px, py, c.x, c.y, a.x, a.y, t2);
    out.d2 = d0;
    out.t = t0;
    out.edge = 0;
    if (d1 < out.d2) {
        out.d2 = d1;
        out.t = t1;
        out.edge = 1;
    }
    if (d2 < out.d2) {
        out.d2 = d2;
        out.t = t2;
        out.edge = 2;
    }
    return out;
}

// Occupancy of one face at one pixel under the saturating soft formula.
template <class S>
S face_occupancy(const PixelFace<S>& pf, S sigma) {
    S logit = (pf.inside ? pf.d2 : -pf.d2) / sigma;
    if (logit <= -occupancy_skip_logit<S>()) return S(0);
    if (logit >= S(kLogitCutoff)) return S(1);
    return stable_sigmoid(logit);
}

// Pixel index range [lo, hi] covered by a face expanded by `margin`
// (normalized units) along one image axis of `size` pixels.
inline std::pair<int, int> pixel_range(double nmin, double nmax, double margin, int size) {
    // pixel center k has normalized coordinate 2*(k+0.5)/size - 1
    double lo = (nmin - margin + 1.0) * 0.5 * size - 0.5;
    double hi = (nmax + margin + 1.0) * 0.5 * size - 0.5;
    int a = std::max(0, static_cast<int>(std::ceil(lo)));
    int b = std::min(size - 1, static_cast<int>(std::floor(hi)));
    return {a, b};
}

template <class S>
S pixel_center_x(int k, int width) {
    return S(2) * (S(k) + S(0.5)) / S(width) - S(1);
}
template <class S>
S pixel_center_y(int j, int height) {
    return S(2) * (S(j) + S(0.5)) / S(height) - S(1);
}

}  // namespace raster_detail

// Per-pixel survival product kept from the forward pass for the VJP.
template <class S>
struct RasterCache {
    Image<S> survival;  // prod_f (1 - D_f) before the final clamp
};

// Differentiable soft silhouette at explicit vertex positions.
// Faces with a vertex behind the near plane are skipped whole.
template <class S>
Image<S> soft_silhouette_at(const VertexMatrix<S>& verts, const FaceMatrix& faces, const CameraPose& pose,
                            const RenderSettings<S>& settings, RasterCache<S>* cache = nullptr) {
    using namespace raster_detail;
    CameraPose view = pose;
    view.width = settings.width;
    view.height = settings.height;
    const int W = settings.width, H = settings.height;
    auto proj = project_normalized<S>(verts, view);

    Image<S> survival = Image<S>::Ones(H, W);
    const double margin = std::sqrt(double(occupancy_skip_logit<S>()) * static_cast<double>(settings.sigma_rast));
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const Vert2<S>&a = proj[faces(f, 0)], &b = proj[faces(f, 1)], &c = proj[faces(f, 2)];
        if (!a.valid || !b.valid || !c.valid) continue;
        double xmin = std::min({double(a.x), double(b.x), double(c.x)});
        double xmax = std::max({double(a.x), double(b.x), double(c.x)});
        double ymin = std::min({double(a.y), double(b.y), double(c.y)});
        double ymax = std::max({double(a.y), double(b.y), double(c.y)});
        auto [k0, k1] = pixel_range(xmin, xmax, margin, W);
        auto [j0, j1] = pixel_range(ymin, ymax, margin, H);
        for (int j = j0; j <= j1; ++j) {
            S py = pixel_center_y<S>(j, H);
            for (int k = k0; k <= k1; ++k) {
                S px = pixel_center_x<S>(k, W);
                auto pf = pixel_face_distance(px, py, a, b, c);
                S D = face_occupancy(pf, settings.sigma_rast);
                if (D != S(0)) survival(j, k) *= S(1) - D;
            }
        }
    }

    if (cache != nullptr) cache->survival = survival;
    Image<S> out(H, W);
    const S lo = S(kSilhouetteClamp), hi = S(1) - S(kSilhouetteClamp);
    for (int j = 0; j < H; ++j)
        for (int k = 0; k < W; ++k) out(j, k) = std::min(hi, std::max(lo, S(1) - survival(j, k)));
    return out;
}

template <class S>
Image<S> soft_silhouette(const TriangleMesh<S>& mesh, const CameraPose& pose, const RenderSettings<S>& settings) {
    return soft_silhouette_at<S>(mesh.vertices, mesh.faces, pose, settings);
}

// Reverse-mode gradient of soft_silhouette contracted with `upstream`.
// Pixels clamped by the output range have exactly zero gradient, matching the
// forward clamp. The cache argument avoids re-running the forward pass.
template <class S>
VertexMatrix<S> silhouette_vjp_at(const VertexMatrix<S>& verts, const FaceMatrix& faces, const CameraPose& pose,
                                  const RenderSettings<S>& settings, const Image<S>& upstream,
                                  const RasterCache<S>* cache = nullptr) {
    using namespace raster_detail;
    CameraPose view = pose;
    view.width = settings.width;
    view.height = settings.height;
    const int W = settings.width, H = settings.height;
    if (upstream.rows() != H || upstream.cols() != W)
        throw std::invalid_argument("upstream cotangent size does not match render settings");
    auto proj = project_normalized<S>(verts, view);

    RasterCache<S> local;
    if (cache == nullptr) {
        soft_silhouette_at<S>(verts, faces, pose, settings, &local);
        cache = &local;
    }
    const Image<S>& P = cache->survival;

    // accumulate gradients in normalized image coordinates first
    Eigen::Matrix<S, Eigen::Dynamic, 2, Eigen::RowMajor> grad2(verts.rows(), 2);
    grad2.setZero();
    const S lo = S(kSilhouetteClamp);
    const double margin = std::sqrt(double(occupancy_skip_logit<S>()) * static_cast<double>(settings.sigma_rast));
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const int ia = faces(f, 0), ib = faces(f, 1), ic = faces(f, 2);
        const Vert2<S>&a = proj[ia], &b = proj[ib], &c = proj[ic];
        if (!a.valid || !b.valid || !c.valid) continue;
        double xmin = std::min({double(a.x), double(b.x), double(c.x)});
        double xmax = std::max({double(a.x), double(b.x), double(c.x)});
        double ymin = std::min({double(a.y), double(b.y), double(c.y)});
        double ymax = std::max({double(a.y), double(b.y), double(c.y)});
        auto [k0, k1] = pixel_range(xmin, xmax, margin, W);
        auto [j0, j1] = pixel_range(ymin, ymax, margin, H);
        const int edge_verts[3][2] = {{ia, ib}, {ib, ic}, {ic, ia}};
        for (int j = j0; j <= j1; ++j) {
            S py = pixel_center_y<S>(j, H);
            for (int k = k0; k <= k1; ++k) {
                S up = upstream(j, k);
                if (up == S(0)) continue;
                S surv = P(j, k);
                if (surv < lo || S(1) - surv < lo) continue;  // output clamped: zero gradient
                S px = pixel_center_x<S>(k, W);
                auto pf = pixel_face_distance(px, py, a, b, c);
                S D = face_occupancy(pf, settings.sigma_rast);
                if (D == S(0) || D == S(1)) continue;  // saturated: zero slope
                // dA/d(d2) = P * D * s / sigma, with s = +1 inside, -1 outside
                S s = pf.inside ? S(1) : S(-1);
                S g_d2 = up * surv * D * s / settings.sigma_rast;
                // d(d2)/d endpoints of the winning edge (envelope through t)
                const Vert2<S>& ea = proj[edge_verts[pf.edge][0]];
                const Vert2<S>& eb = proj[edge_verts[pf.edge][1]];
                S t = pf.t;
                S cx = ea.x + t * (eb.x - ea.x);
                S cy = ea.y + t * (eb.y - ea.y);
                S dvx = px - cx, dvy = py - cy;
                S ga = S(-2) * (S(1) - t) * g_d2;
                S gb = S(-2) * t * g_d2;
                grad2(edge_verts[pf.edge][0], 0) += ga * dvx;
                grad2(edge_verts[pf.edge][0], 1) += ga * dvy;
                grad2(edge_verts[pf.edge][1], 0) += gb * dvx;
                grad2(edge_verts[pf.edge][1], 1) += gb * dvy;
            }
        }
    }

    // chain through the projection Jacobian to 3D world coordinates
    const Eigen::Matrix<S, 3, 3> frame = camera_frame(view).template cast<S>();
    const Eigen::Matrix<S, 3, 1> eye = view.eye.template cast<S>();
    const S tan_half = std::tan(S(deg2rad(view.fov_y_deg)) / S(2));
    const S aspect = S(view.width) / S(view.height);
    VertexMatrix<S> grad3(verts.rows(), 3);
    grad3.setZero();
    for (Eigen::Index i = 0; i < verts.rows(); ++i) {
        if (!proj[i].valid) continue;
        S gx = grad2(i, 0), gy = grad2(i, 1);
        if (gx == S(0) && gy == S(0)) continue;
        Eigen::Matrix<S, 3, 1> cam = frame * (verts.row(i).transpose() - eye);
        S depth = -cam.z();
        S nx = proj[i].x, ny = proj[i].y;
        Eigen::Matrix<S, 3, 1> gcam;
        gcam.x() = gx / (depth * tan_half * aspect);
        gcam.y() = -gy / (depth * tan_half);
        gcam.z() = (gx * nx + gy * ny) / depth;
        grad3.row(i) = (frame.transpose() * gcam).transpose();
    }
    return grad3;
}

template <class S>
VertexMatrix<S> silhouette_vjp(const TriangleMesh<S>& mesh, const CameraPose& pose, const RenderSettings<S>& settings,
                               const Image<S>& upstream) {
    return silhouette_vjp_at<S>(mesh.vertices, mesh.faces, pose, settings, upstream);
}

// Binary pixel-center coverage, union over faces.
template <class S>
Image<S> hard_silhouette_at(const VertexMatrix<S>& verts, const FaceMatrix& faces, const CameraPose& pose, int width,
                            int height) {
    using namespace raster_detail;
    CameraPose view = pose;
    view.width = width;
    view.height = height;
    auto proj = project_normalized<S>(verts, view);
    Image<S> out = Image<S>::Zero(height, width);
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const Vert2<S>&a = proj[faces(f, 0)], &b = proj[faces(f, 1)], &c = proj[faces(f, 2)];
        if (!a.valid || !b.valid || !c.valid) continue;
        auto [k0, k1] = pixel_range(std::min({double(a.x), double(b.x), double(c.x)}),
                                    std::max({double(a.x), double(b.x), double(c.x)}), 0.0, width);
        auto [j0, j1] = pixel_range(std::min({double(a.y), double(b.y), double(c.y)}),
                                    std::max({double(a.y), double(b.y), double(c.y)}), 0.0, height);
        for (int j = j0; j <= j1; ++j) {
            S py = pixel_center_y<S>(j, height);
            for (int k = k0; k <= k1; ++k) {
                if (out(j, k) != S(0)) continue;
                S px = pixel_center_x<S>(k, width);
                S c0 = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
                S c1 = (c.x - b.x) * (py - b.y) - (c.y - b.y) * (px - b.x);
                S c2 = (a.x - c.x) * (py - c.y) - (a.y - c.y) * (px - c.x);
                bool covered = (c0 >= S(0) && c1 >= S(0) && c2 >= S(0)) || (c0 <= S(0) && c1 <= S(0) && c2 <= S(0));
                // skip degenerate faces: they cover nothing
                S area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                if (covered && area != S(0)) out(j, k) = S(1);
            }
        }
    }
    return out;
}

template <class S>
Image<S> hard_silhouette(const TriangleMesh<S>& mesh, const CameraPose& pose, int width, int height) {
    return hard_silhouette_at<S>(mesh.vertices, mesh.faces, pose, width, height);
}

// Front-most-face barycentric interpolation of a per-vertex attribute at
// covered pixel centers; uncovered pixels get 1.0.
template <class S>
Image<S> rasterize_attribute_at(const VertexMatrix<S>& verts, const FaceMatrix& faces, const CameraPose& pose,
                                const Eigen::Matrix<S, Eigen::Dynamic, 1>& attr, int width, int height) {
    using namespace raster_detail;
    if (attr.size() != verts.rows()) throw std::invalid_argument("attribute length does not match vertex count");
    CameraPose view = pose;
    view.width = width;
    view.height = height;
    auto proj = project_normalized<S>(verts, view);
    Image<S> out = Image<S>::Ones(height, width);
    Image<S> zbuf = Image<S>::Constant(height, width, std::numeric_limits<S>::max());
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const int ia = faces(f, 0), ib = faces(f, 1), ic = faces(f, 2);
        const Vert2<S>&a = proj[ia], &b = proj[ib], &c = proj[ic];
        if (!a.valid || !b.valid || !c.valid) continue;
        S area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        if (area == S(0)) continue;
        auto [k0, k1] = pixel_range(std::min({double(a.x), double(b.x), double(c.x)}),
                                    std::max({double(a.x), double(b.x), double(c.x)}), 0.0, width);
        auto [j0, j1] = pixel_range(std::min({double(a.y), double(b.y), double(c.y)}),
                                    std::max({double(a.y), double(b.y), double(c.y)}), 0.0, height);
        for (int j = j0; j <= j1; ++j) {
            S py = pixel_center_y<S>(j, height);
            for (int k = k0; k <= k1; ++k) {
                S px = pixel_center_x<S>(k, width);
                S wa = ((c.x - b.x) * (py - b.y) - (c.y - b.y) * (px - b.x)) / area;
                S wb = ((a.x - c.x) * (py - c.y) - (a.y - c.y) * (px - c.x)) / area;
                S wc = S(1) - wa - wb;
                if (wa < S(0) || wb < S(0) || wc < S(0)) continue;
                S depth = wa * a.depth + wb * b.depth + wc * c.depth;
                if (depth >= zbuf(j, k)) continue;
                zbuf(j, k) = depth;
                out(j, k) = wa * attr(ia) + wb * attr(ib) + wc * attr(ic);
            }
        }
    }
    return out;
}

template <class S>
Image<S> rasterize_attribute(const TriangleMesh<S>& mesh, const CameraPose& pose,
                             const Eigen::Matrix<S, Eigen::Dynamic, 1>& attr, int width, int height) {
    return rasterize_attribute_at<S>(mesh.vertices, mesh.faces, pose, attr, width, height);
}

}  // namespace refine
