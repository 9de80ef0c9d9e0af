#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "billiard/geometry.hpp"
#include "billiard/vec2.hpp"

namespace billiard {

/// Collision coordinate on the phase space M = boundary x [-pi/2, pi/2]:
/// scatterer, arclength r along it, and the angle phi between the outgoing
/// velocity and the inward normal (positive toward increasing r).
struct PhasePoint {
    int scatterer_id = 0;
    double r = 0.0;
    double phi = 0.0;
    double cos_phi = 1.0;
};

PhasePoint make_phase_point(const TableGeometry& table, int scatterer_id, double r,
                            double phi);

/// Involution (r, phi) -> (r, -phi); conjugates the map and its inverse.
inline PhasePoint time_reverse(const PhasePoint& x) {
    return {x.scatterer_id, x.r, -x.phi, x.cos_phi};
}

struct Mat2 {
    double a00 = 1.0, a01 = 0.0, a10 = 0.0, a11 = 1.0;

    Vec2 apply(const Vec2& v) const {
        return {a00 * v.x + a01 * v.y, a10 * v.x + a11 * v.y};
    }
    double det() const { return a00 * a11 - a01 * a10; }
    Vec2 solve(const Vec2& v) const {
        const double d = det();
        return {(a11 * v.x - a01 * v.y) / d, (-a10 * v.x + a00 * v.y) / d};
    }
    Mat2 mul(const Mat2& o) const {
        return {a00 * o.a00 + a01 * o.a10, a00 * o.a01 + a01 * o.a11,
                a10 * o.a00 + a11 * o.a10, a10 * o.a01 + a11 * o.a11};
    }
};

/// First intersection of a boundary ray with any scatterer lift.
struct FlightResult {
    bool hit = false;
    int target_id = -1;
    int cell_dx = 0, cell_dy = 0; // lattice cell of the lift that was hit
    double tau = 0.0;
    Vec2 hit_point;
};

FlightResult cast_ray(const TableGeometry& table, int scatterer_id, double r, double phi,
                      double horizon_bound);

enum class StepStatus { ok, near_tangential, horizon };

struct MapOptions {
    double tol_tangent = 1e-9;   // refuse points with cos(phi) below this
    double horizon_bound = 15.0; // flights beyond this are reported, not followed
};

/// One application of the collision map with its differential in (r, phi)
/// coordinates. grazing_margin is cos(phi) at arrival.
struct CollisionStep {
    PhasePoint from;
    PhasePoint to;
    double tau = 0.0;
    Mat2 dT;
    double grazing_margin = 0.0;
    int cell_dx = 0, cell_dy = 0;
    StepStatus status = StepStatus::ok;
};

class NearTangentialError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class HorizonError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class InsufficientDepthError : public std::runtime_error {
public:
    InsufficientDepthError(const std::string& msg, double achieved)
        : std::runtime_error(msg), achieved_accuracy(achieved) {}
    double achieved_accuracy;
};

/// Non-throwing step; hot loops branch on status.
CollisionStep try_step(const TableGeometry& table, const PhasePoint& x,
                       const MapOptions& opts = {});
CollisionStep step(const TableGeometry& table, const PhasePoint& x,
                   const MapOptions& opts = {});

/// Backward map, realized as the conjugation of the forward map by the
/// time-reversal involution.
CollisionStep try_step_inverse(const TableGeometry& table, const PhasePoint& x,
                               const MapOptions& opts = {});
CollisionStep step_inverse(const TableGeometry& table, const PhasePoint& x,
                           const MapOptions& opts = {});

/// Direction of a stable/unstable line through a point, with the achieved
/// angular accuracy (the residual width of the iterated cone image).
struct DirectionResult {
    Vec2 dir;          // unit vector, dr >= 0
    double slope = 0.0; // dphi/dr
    double err = 0.0;   // angular gap between the two iterated cone edges
    int depth_used = 0;
    bool converged = false;
};

DirectionResult stable_direction(const TableGeometry& table, const PhasePoint& x,
                                 int depth = 60, double tol = 1e-12,
                                 const MapOptions& opts = {});
DirectionResult unstable_direction(const TableGeometry& table, const PhasePoint& x,
                                   int depth = 60, double tol = 1e-12,
                                   const MapOptions& opts = {});

/// Arclength Jacobians of the n-step map along the stable/unstable line,
/// products of one-step factors along the orbit.
double stable_jacobian(const TableGeometry& table, const PhasePoint& x, int n,
                       const MapOptions& opts = {});
double unstable_jacobian(const TableGeometry& table, const PhasePoint& x, int n,
                         const MapOptions& opts = {});

/// sin of the angle between the stable and unstable directions at x.
double stable_unstable_angle_sin(const TableGeometry& table, const PhasePoint& x,
                                 const MapOptions& opts = {});

/// Adapted norm K|dr| + |dphi|; unit expansion constant for cone vectors.
inline double adapted_norm(double curvature, const Vec2& v) {
    return curvature * std::abs(v.x) + std::abs(v.y);
}

/// One forward orbit segment together with per-point stable slopes obtained
/// from a single backward sweep of the iterated cone. Points keep slope_err
/// as the convergence certificate; consumers skip points that did not reach
/// their tolerance (orbit truncated by a grazing or long flight).
struct OrbitWithSlopes {
    std::vector<PhasePoint> points;  // x, Tx, ..., length n_points
    std::vector<Mat2> mats;          // differential at points[k], k < n_points-1
    std::vector<double> taus;
    std::vector<int> target_ids;     // flight k lands on this scatterer
    std::vector<int> cell_dx, cell_dy;
    std::vector<double> slope_s;     // stable slope at points[k]
    std::vector<double> slope_err;
    std::vector<double> log_js;      // log one-step stable Jacobian at points[k]
    std::vector<double> slope_u;     // unstable slope (converges after ~15 steps)
    std::vector<double> slope_u_err;
    std::vector<double> log_ju;      // log one-step unstable Jacobian at points[k]
    int steps_completed = 0;         // number of flights realized
    StepStatus stop_reason = StepStatus::ok;
};

OrbitWithSlopes forward_orbit_with_slopes(const TableGeometry& table, const PhasePoint& x0,
                                          int n, int depth = 40,
                                          const MapOptions& opts = {});

/// Seed vectors spanning the stable cone at a point of the given table.
inline Vec2 stable_cone_edge_low(const TableGeometry& t) { return {1.0, -t.cone_slope_min()}; }
inline Vec2 stable_cone_edge_high(const TableGeometry& t) { return {1.0, -t.cone_slope_max()}; }
inline Vec2 unstable_cone_edge_low(const TableGeometry& t) { return {1.0, t.cone_slope_min()}; }
inline Vec2 unstable_cone_edge_high(const TableGeometry& t) { return {1.0, t.cone_slope_max()}; }

} // namespace billiard
