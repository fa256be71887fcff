#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <stdexcept>

#include "refine/mesh.hpp"

namespace refine {

using Vec3d = Eigen::Vector3d;
using Mat3d = Eigen::Matrix3d;
using Mat4d = Eigen::Matrix4d;

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

// Plane through n.x = offset with unit normal n.
struct ReflectionPlane {
    Vec3d normal = Vec3d(0, 0, 1);
    double offset = 0.0;

    ReflectionPlane() = default;
    ReflectionPlane(const Vec3d& n, double off) : normal(n), offset(off) {
        if (std::abs(normal.norm() - 1.0) > 1e-9)
            throw std::invalid_argument("reflection plane normal must be unit length");
    }
};

// T = I - 2 n n^T. Symmetric, orthogonal, determinant -1.
inline Mat3d reflect_matrix(const ReflectionPlane& plane) {
    return Mat3d::Identity() - 2.0 * plane.normal * plane.normal.transpose();
}

// Reflect a point about the plane. Axis-aligned normals take the exact
// sign-flip path so that double application is a bitwise identity.
inline Vec3d reflect_point(const Vec3d& p, const ReflectionPlane& plane) {
    const Vec3d& n = plane.normal;
    for (int axis = 0; axis < 3; ++axis) {
        if (std::abs(n[axis]) == 1.0 && n[(axis + 1) % 3] == 0.0 && n[(axis + 2) % 3] == 0.0) {
            Vec3d out = p;
            out[axis] = 2.0 * plane.offset * n[axis] - p[axis];
            return out;
        }
    }
    return p - 2.0 * (n.dot(p) - plane.offset) * n;
}

// Perspective camera. Orientation is held as eye/look_at/up so reflection is
// exact; azimuth/elevation/distance are the construction parameters, with
//   eye = look_at + distance * (cos e sin a, sin e, cos e cos a).
// Azimuth 0 looks down -z toward the target, y is up, image y points down.
struct CameraPose {
    Vec3d eye = Vec3d(0, 0, 1);
    Vec3d look_at = Vec3d::Zero();
    Vec3d up_hint = Vec3d(0, 1, 0);
    double fov_y_deg = 30.0;
    int width = 224;
    int height = 224;

    static CameraPose from_angles(double azimuth_deg, double elevation_deg, double distance, double fov_y_deg = 30.0,
                                  int width = 224, int height = 224, const Vec3d& look_at = Vec3d::Zero(),
                                  const Vec3d& up_hint = Vec3d(0, 1, 0)) {
        if (distance <= 0.0) throw std::invalid_argument("camera distance must be positive");
        if (fov_y_deg <= 0.0 || fov_y_deg >= 180.0) throw std::invalid_argument("fov_y must be in (0, 180)");
        if (width < 8 || height < 8) throw std::invalid_argument("image size must be at least 8x8");
        const double a = deg2rad(azimuth_deg);
        const double e = deg2rad(elevation_deg);
        CameraPose p;
        p.look_at = look_at;
        p.eye = look_at + distance * Vec3d(std::cos(e) * std::sin(a), std::sin(e), std::cos(e) * std::cos(a));
        p.up_hint = up_hint;
        p.fov_y_deg = fov_y_deg;
        p.width = width;
        p.height = height;
        return p;
    }

    // World-to-camera rotation+translation as a 4x4 (camera looks down -z).
    static CameraPose from_extrinsic(const Mat4d& world_to_cam, double fov_y_deg, int width = 224, int height = 224) {
        Mat3d R = world_to_cam.topLeftCorner<3, 3>();
        Vec3d t = world_to_cam.topRightCorner<3, 1>();
        CameraPose p;
        p.eye = -R.transpose() * t;
        Vec3d forward = -R.row(2).transpose();  // camera -z in world coordinates
        p.look_at = p.eye + forward;
        p.up_hint = R.row(1).transpose();
        p.fov_y_deg = fov_y_deg;
        p.width = width;
        p.height = height;
        return p;
    }

    double distance() const { return (eye - look_at).norm(); }
    double azimuth_deg() const {
        Vec3d d = eye - look_at;
        return rad2deg(std::atan2(d.x(), d.z()));
    }
    double elevation_deg() const {
        Vec3d d = eye - look_at;
        return rad2deg(std::asin(d.y() / d.norm()));
    }
};

// Orthonormal camera frame: rows are right, up, backward (camera z).
inline Mat3d camera_frame(const CameraPose& pose) {
    Vec3d forward = (pose.look_at - pose.eye).normalized();
    Vec3d right = forward.cross(pose.up_hint);
    double rn = right.norm();
    if (rn < 1e-12) {
        // looking straight along the up hint; pick any stable perpendicular
        Vec3d alt = std::abs(forward.x()) < 0.9 ? Vec3d(1, 0, 0) : Vec3d(0, 0, 1);
        right = forward.cross(alt);
        rn = right.norm();
    }
    right /= rn;
    Vec3d up = right.cross(forward);
    Mat3d frame;
    frame.row(0) = right.transpose();
    frame.row(1) = up.transpose();
    frame.row(2) = -forward.transpose();
    return frame;
}

// Eye and target mapped through the plane; the up hint is kept so that the
// reflected render is the horizontal flip of the original for a symmetric
// scene. For n=(0,0,1) this is azimuth -> 180 - azimuth, elevation unchanged.
inline CameraPose reflect_camera(const CameraPose& pose, const ReflectionPlane& plane) {
    CameraPose out = pose;
    out.eye = reflect_point(pose.eye, plane);
    out.look_at = reflect_point(pose.look_at, plane);
    return out;
}

struct ProjectedVertex {
    double x = 0.0;  // pixel coordinates, origin top-left, y down
    double y = 0.0;
    double depth = 0.0;  // distance along the viewing axis, positive in front
    bool valid = false;  // false when behind the near plane
};

// Look-at + perspective divide to pixel coordinates. Near plane at
// 0.01 * camera distance; vertices behind it are flagged invalid.
template <class S>
std::vector<ProjectedVertex> project_vertices(const TriangleMesh<S>& mesh, const CameraPose& pose) {
    const Mat3d frame = camera_frame(pose);
    const double near = 0.01 * pose.distance();
    const double tan_half = std::tan(deg2rad(pose.fov_y_deg) / 2.0);
    const double aspect = static_cast<double>(pose.width) / pose.height;

    std::vector<ProjectedVertex> out(mesh.vertices.rows());
    for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
        Vec3d rel = mesh.vertices.row(i).template cast<double>().transpose() - pose.eye;
        Vec3d cam = frame * rel;            // (x right, y up, z backward)
        double depth = -cam.z();            // positive in front of the camera
        ProjectedVertex& p = out[i];
        p.depth = depth;
        if (depth < near) {
            p.valid = false;
            continue;
        }
        double x_ndc = cam.x() / (depth * tan_half * aspect);
        double y_ndc = cam.y() / (depth * tan_half);
        p.x = (x_ndc + 1.0) * 0.5 * pose.width;
        p.y = (1.0 - y_ndc) * 0.5 * pose.height;
        p.valid = true;
    }
    return out;
}

}  // namespace refine
