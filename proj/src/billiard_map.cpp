#include "billiard/billiard_map.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace billiard {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;
constexpr double kTieTol = 1e-12;
constexpr double kMinAdvance = 1e-12;

struct RingTable {
    // lattice offsets sorted by Chebyshev ring, lexicographic inside a ring
    std::vector<std::pair<int, int>> cells;
    std::vector<std::size_t> ring_begin; // index of first cell of ring R
};

const RingTable& ring_table(int max_ring) {
    static RingTable tab = [] {
        RingTable t;
        const int R_MAX = 64;
        t.ring_begin.push_back(0);
        for (int R = 0; R <= R_MAX; ++R) {
            for (int mx = -R; mx <= R; ++mx) {
                for (int my = -R; my <= R; ++my) {
                    if (std::max(std::abs(mx), std::abs(my)) != R) continue;
                    t.cells.emplace_back(mx, my);
                }
            }
            t.ring_begin.push_back(t.cells.size());
        }
        return t;
    }();
    if (max_ring + 1 >= static_cast<int>(tab.ring_begin.size()))
        throw std::invalid_argument("horizon_bound too large for the lattice ring table");
    return tab;
}


} // namespace

PhasePoint make_phase_point(const TableGeometry& table, int scatterer_id, double r,
                            double phi) {
    if (scatterer_id < 0 || scatterer_id >= table.num_scatterers())
        throw std::domain_error("make_phase_point: invalid scatterer id");
    if (std::abs(phi) > kHalfPi)
        throw std::domain_error("make_phase_point: |phi| must be <= pi/2");
    const double per = table.perimeter(scatterer_id);
    double rr = std::fmod(r, per);
    if (rr < 0.0) rr += per;
    return {scatterer_id, rr, phi, std::cos(phi)};
}

FlightResult cast_ray(const TableGeometry& table, int scatterer_id, double r, double phi,
                      double horizon_bound) {
    const Disk& src = table.disks()[scatterer_id];
    const double ang = r / src.radius;
    const Vec2 n{std::cos(ang), std::sin(ang)};
    const Vec2 t = n.perp();
    const Vec2 p = src.center + n * src.radius;
    const Vec2 v = n * std::cos(phi) + t * std::sin(phi);

    const int max_ring = static_cast<int>(std::ceil(horizon_bound)) + 3;
    const RingTable& rings = ring_table(max_ring);

    FlightResult best;
    double best_tau = std::numeric_limits<double>::infinity();
    const double r_max = 1.0 / table.K_min();

    for (int R = 0; R <= max_ring; ++R) {
        // everything in ring R is at least this far away
        const double ring_floor = static_cast<double>(R) - 2.0 - r_max;
        if (ring_floor > std::min(best_tau, horizon_bound)) break;
        for (std::size_t ci = rings.ring_begin[R]; ci < rings.ring_begin[R + 1]; ++ci) {
            const auto [mx, my] = rings.cells[ci];
            const Vec2 off{static_cast<double>(mx), static_cast<double>(my)};
            for (int j = 0; j < table.num_scatterers(); ++j) {
                const Disk& d = table.disks()[j];
                const Vec2 c = d.center + off;
                const Vec2 w = c - p;
                const double beta = w.dot(v);
                if (beta <= kMinAdvance) continue;
                const double gamma = w.norm2() - d.radius * d.radius;
                const double disc = beta * beta - gamma;
                if (disc < 0.0) continue;
                const double s = beta - std::sqrt(disc);
                if (s <= kMinAdvance) continue;
                if (s < best_tau - kTieTol) {
                    best_tau = s;
                    best.hit = true;
                    best.target_id = j;
                    best.cell_dx = mx;
                    best.cell_dy = my;
                } else if (std::abs(s - best_tau) <= kTieTol && best.hit) {
                    // deterministic tie break
                    const std::array<int, 3> cand{j, mx, my};
                    const std::array<int, 3> cur{best.target_id, best.cell_dx, best.cell_dy};
                    if (cand < cur) {
                        best.target_id = j;
                        best.cell_dx = mx;
                        best.cell_dy = my;
                    }
                }
            }
        }
    }
    if (!best.hit || best_tau > horizon_bound) return {};
    best.tau = best_tau;
    best.hit_point = p + v * best_tau;
    return best;
}

CollisionStep try_step(const TableGeometry& table, const PhasePoint& x,
                       const MapOptions& opts) {
    CollisionStep cs;
    cs.from = x;
    if (x.cos_phi < opts.tol_tangent) {
        cs.status = StepStatus::near_tangential;
        return cs;
    }

    FlightResult fr = cast_ray(table, x.scatterer_id, x.r, x.phi, opts.horizon_bound);
    if (!fr.hit) {
        cs.status = StepStatus::horizon;
        return cs;
    }

    const Disk& src = table.disks()[x.scatterer_id];
    const Disk& dst = table.disks()[fr.target_id];
    const Vec2 off{static_cast<double>(fr.cell_dx), static_cast<double>(fr.cell_dy)};
    const Vec2 c1 = dst.center + off;

    const double ang0 = x.r / src.radius;
    const Vec2 n0{std::cos(ang0), std::sin(ang0)};
    const Vec2 t0 = n0.perp();
    const Vec2 v = n0 * x.cos_phi + t0 * std::sin(x.phi);

    const Vec2 n1 = (fr.hit_point - c1) * (1.0 / dst.radius);
    const Vec2 t1 = n1.perp();
    const Vec2 v_out = v - n1 * (2.0 * v.dot(n1));

    double ang1 = std::atan2(n1.y, n1.x);
    if (ang1 < 0.0) ang1 += 2.0 * std::numbers::pi;

    PhasePoint to;
    to.scatterer_id = fr.target_id;
    to.r = ang1 * dst.radius;
    to.phi = std::atan2(v_out.dot(t1), v_out.dot(n1));
    to.cos_phi = std::cos(to.phi);

    cs.to = to;
    cs.tau = fr.tau;
    cs.grazing_margin = to.cos_phi;
    cs.cell_dx = fr.cell_dx;
    cs.cell_dy = fr.cell_dy;

    if (to.cos_phi < opts.tol_tangent) {
        cs.status = StepStatus::near_tangential;
        return cs;
    }

    // classical differential of the collision map in (r, phi) coordinates,
    // specialized to constant curvature per scatterer
    const double K0 = 1.0 / src.radius;
    const double K1 = 1.0 / dst.radius;
    const double tau = fr.tau;
    const double c0 = x.cos_phi;
    const double c1v = to.cos_phi;
    const double inv = -1.0 / c1v;
    cs.dT.a00 = inv * (tau * K0 + c0);
    cs.dT.a01 = inv * tau;
    cs.dT.a10 = inv * (tau * K0 * K1 + K1 * c0 + K0 * c1v);
    cs.dT.a11 = inv * (tau * K1 + c1v);

    cs.status = StepStatus::ok;
    return cs;
}

CollisionStep step(const TableGeometry& table, const PhasePoint& x, const MapOptions& opts) {
    CollisionStep cs = try_step(table, x, opts);
    if (cs.status == StepStatus::near_tangential)
        throw NearTangentialError("step: collision within tangency tolerance");
    if (cs.status == StepStatus::horizon)
        throw HorizonError("step: no collision within horizon bound");
    return cs;
}

CollisionStep try_step_inverse(const TableGeometry& table, const PhasePoint& x,
                               const MapOptions& opts) {
    CollisionStep fwd = try_step(table, time_reverse(x), opts);
    CollisionStep cs;
    cs.from = x;
    cs.status = fwd.status;
    cs.tau = fwd.tau;
    cs.grazing_margin = fwd.grazing_margin;
    cs.cell_dx = fwd.cell_dx;
    cs.cell_dy = fwd.cell_dy;
    if (fwd.status == StepStatus::horizon) return cs;
    cs.to = time_reverse(fwd.to);
    if (fwd.status != StepStatus::ok) return cs;
    // D(T^{-1})(x) = J DT(i x) J with J = diag(1,-1)
    cs.dT.a00 = fwd.dT.a00;
    cs.dT.a01 = -fwd.dT.a01;
    cs.dT.a10 = -fwd.dT.a10;
    cs.dT.a11 = fwd.dT.a11;
    return cs;
}

CollisionStep step_inverse(const TableGeometry& table, const PhasePoint& x,
                           const MapOptions& opts) {
    CollisionStep cs = try_step_inverse(table, x, opts);
    if (cs.status == StepStatus::near_tangential)
        throw NearTangentialError("step_inverse: collision within tangency tolerance");
    if (cs.status == StepStatus::horizon)
        throw HorizonError("step_inverse: no collision within horizon bound");
    return cs;
}

namespace {

double line_angle_gap(const Vec2& a, const Vec2& b) {
    // angle between the lines spanned by a and b
    const double cross = std::abs(a.cross(b));
    const double dot = std::abs(a.dot(b));
    return std::atan2(cross, dot);
}

Vec2 canonical_dir(Vec2 v) {
    const double n = v.norm();
    v = v * (1.0 / n);
    if (v.x < 0.0 || (v.x == 0.0 && v.y < 0.0)) v = -v;
    return v;
}

DirectionResult cone_limit_direction(const TableGeometry& table, const PhasePoint& x,
                                     int depth, double tol, const MapOptions& opts,
                                     bool stable) {
    // Walk the orbit (forward for stable, backward for unstable), then carry
    // the two cone edge vectors back to x. The angular width of the carried
    // cone is the convergence certificate.
    std::vector<Mat2> mats;
    mats.reserve(depth);
    PhasePoint cur = x;
    for (int k = 0; k < depth; ++k) {
        CollisionStep cs = stable ? try_step(table, cur, opts) : try_step_inverse(table, cur, opts);
        if (cs.status != StepStatus::ok) break;
        mats.push_back(cs.dT);
        cur = cs.to;
    }

    Vec2 lo = stable ? stable_cone_edge_low(table) : unstable_cone_edge_low(table);
    Vec2 hi = stable ? stable_cone_edge_high(table) : unstable_cone_edge_high(table);
    // Stable: mats[k] maps tangent(T^k x) -> tangent(T^{k+1} x); pulling a
    // vector from the deep end to x inverts each factor. Unstable: mats[k]
    // is the backward differential tangent(T^{-k} x) -> tangent(T^{-k-1} x),
    // and pushing forward to x inverts each factor as well.
    for (int k = static_cast<int>(mats.size()) - 1; k >= 0; --k) {
        lo = canonical_dir(mats[k].solve(lo));
        hi = canonical_dir(mats[k].solve(hi));
    }

    DirectionResult res;
    res.depth_used = static_cast<int>(mats.size());
    res.err = line_angle_gap(lo, hi);
    if (lo.dot(hi) < 0.0) hi = -hi;
    res.dir = canonical_dir(lo + hi);
    res.slope = res.dir.y / res.dir.x;
    res.converged = res.err < tol;
    return res;
}

} // namespace

DirectionResult stable_direction(const TableGeometry& table, const PhasePoint& x, int depth,
                                 double tol, const MapOptions& opts) {
    DirectionResult res = cone_limit_direction(table, x, depth, tol, opts, true);
    if (!res.converged && res.depth_used < depth) {
        std::ostringstream os;
        os << "stable_direction: orbit truncated after " << res.depth_used
           << " steps, cone width " << res.err;
        throw InsufficientDepthError(os.str(), res.err);
    }
    return res;
}

DirectionResult unstable_direction(const TableGeometry& table, const PhasePoint& x, int depth,
                                   double tol, const MapOptions& opts) {
    DirectionResult res = cone_limit_direction(table, x, depth, tol, opts, false);
    if (!res.converged && res.depth_used < depth) {
        std::ostringstream os;
        os << "unstable_direction: orbit truncated after " << res.depth_used
           << " steps, cone width " << res.err;
        throw InsufficientDepthError(os.str(), res.err);
    }
    return res;
}

OrbitWithSlopes forward_orbit_with_slopes(const TableGeometry& table, const PhasePoint& x0,
                                          int n, int depth, const MapOptions& opts) {
    OrbitWithSlopes orbit;
    const int total = n + depth;
    orbit.points.reserve(total + 1);
    orbit.points.push_back(x0);
    PhasePoint cur = x0;
    for (int k = 0; k < total; ++k) {
        CollisionStep cs = try_step(table, cur, opts);
        if (cs.status != StepStatus::ok) {
            orbit.stop_reason = cs.status;
            break;
        }
        orbit.mats.push_back(cs.dT);
        orbit.taus.push_back(cs.tau);
        orbit.target_ids.push_back(cs.to.scatterer_id);
        orbit.cell_dx.push_back(cs.cell_dx);
        orbit.cell_dy.push_back(cs.cell_dy);
        orbit.points.push_back(cs.to);
        cur = cs.to;
    }
    orbit.steps_completed = static_cast<int>(orbit.mats.size());

    const int npts = static_cast<int>(orbit.points.size());
    orbit.slope_s.assign(npts, 0.0);
    orbit.slope_err.assign(npts, std::numeric_limits<double>::infinity());

    // one backward sweep of the cone edges serves every orbit point
    Vec2 lo = stable_cone_edge_low(table);
    Vec2 hi = stable_cone_edge_high(table);
    {
        const int last = npts - 1;
        Vec2 mid = canonical_dir(lo + hi);
        orbit.slope_s[last] = mid.y / mid.x;
        orbit.slope_err[last] = line_angle_gap(lo, hi);
    }
    for (int k = static_cast<int>(orbit.mats.size()) - 1; k >= 0; --k) {
        lo = canonical_dir(orbit.mats[k].solve(lo));
        hi = canonical_dir(orbit.mats[k].solve(hi));
        Vec2 h = hi;
        if (lo.dot(h) < 0.0) h = -h;
        const Vec2 mid = canonical_dir(lo + h);
        orbit.slope_s[k] = mid.y / mid.x;
        orbit.slope_err[k] = line_angle_gap(lo, hi);
    }

    // per-point one-step stable Jacobians where a next point exists
    orbit.log_js.assign(orbit.mats.size(), 0.0);
    for (std::size_t k = 0; k < orbit.mats.size(); ++k) {
        const Vec2 v{1.0, orbit.slope_s[k]};
        const Vec2 w = orbit.mats[k].apply(v);
        orbit.log_js[k] = std::log(w.norm() / v.norm());
    }

    // mirror sweep for the unstable line: push the cone forward from the
    // start; the certificate converges after enough accumulated steps
    orbit.slope_u.assign(npts, 0.0);
    orbit.slope_u_err.assign(npts, std::numeric_limits<double>::infinity());
    {
        Vec2 ulo = unstable_cone_edge_low(table);
        Vec2 uhi = unstable_cone_edge_high(table);
        auto record = [&](int k) {
            Vec2 h = uhi;
            if (ulo.dot(h) < 0.0) h = -h;
            const Vec2 mid = canonical_dir(ulo + h);
            orbit.slope_u[k] = mid.y / mid.x;
            orbit.slope_u_err[k] = line_angle_gap(ulo, uhi);
        };
        record(0);
        for (std::size_t k = 0; k < orbit.mats.size(); ++k) {
            ulo = canonical_dir(orbit.mats[k].apply(ulo));
            uhi = canonical_dir(orbit.mats[k].apply(uhi));
            record(static_cast<int>(k) + 1);
        }
    }
    orbit.log_ju.assign(orbit.mats.size(), 0.0);
    for (std::size_t k = 0; k < orbit.mats.size(); ++k) {
        const Vec2 v{1.0, orbit.slope_u[k]};
        const Vec2 w = orbit.mats[k].apply(v);
        orbit.log_ju[k] = std::log(w.norm() / v.norm());
    }
    return orbit;
}

double stable_jacobian(const TableGeometry& table, const PhasePoint& x, int n,
                       const MapOptions& opts) {
    OrbitWithSlopes orbit = forward_orbit_with_slopes(table, x, n, 40, opts);
    if (orbit.steps_completed < n)
        throw(orbit.stop_reason == StepStatus::near_tangential
                  ? std::runtime_error("stable_jacobian: orbit hit tangency band")
                  : std::runtime_error("stable_jacobian: orbit exceeded horizon"));
    double log_j = 0.0;
    for (int k = 0; k < n; ++k) log_j += orbit.log_js[k];
    return std::exp(log_j);
}

double unstable_jacobian(const TableGeometry& table, const PhasePoint& x, int n,
                         const MapOptions& opts) {
    DirectionResult eu = unstable_direction(table, x, 60, 1e-12, opts);
    Vec2 v = eu.dir;
    double log_j = 0.0;
    PhasePoint cur = x;
    for (int k = 0; k < n; ++k) {
        CollisionStep cs = step(table, cur, opts);
        const Vec2 w = cs.dT.apply(v);
        log_j += std::log(w.norm() / v.norm());
        v = canonical_dir(w);
        cur = cs.to;
    }
    return std::exp(log_j);
}

double stable_unstable_angle_sin(const TableGeometry& table, const PhasePoint& x,
                                 const MapOptions& opts) {
    DirectionResult es = stable_direction(table, x, 60, 1e-12, opts);
    DirectionResult eu = unstable_direction(table, x, 60, 1e-12, opts);
    return std::abs(es.dir.cross(eu.dir));
}

} // namespace billiard
