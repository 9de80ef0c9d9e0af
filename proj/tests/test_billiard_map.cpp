#include <cmath>
#include <numbers>

#include "billiard/billiard_map.hpp"
#include "billiard/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace billiard;
using testutil::random_bi_regular_point;
using testutil::random_phase_point;

namespace {

const TableGeometry& table() {
    static TableGeometry t = default_table();
    return t;
}

double wrap_diff(double a, double b, double period) {
    double d = std::fmod(a - b, period);
    if (d > period / 2) d -= period;
    if (d < -period / 2) d += period;
    return d;
}

/// Independent backward step: reverse the incoming velocity at x and cast a
/// fresh ray. Shares only the ray primitive with the forward map.
PhasePoint backward_by_ray(const TableGeometry& t, const PhasePoint& x) {
    const Disk& d = t.disks()[x.scatterer_id];
    const double ang = x.r / d.radius;
    const Vec2 n{std::cos(ang), std::sin(ang)};
    const Vec2 tt = n.perp();
    const Vec2 v_out = n * x.cos_phi + tt * std::sin(x.phi);
    const Vec2 v_in = v_out - n * (2.0 * v_out.dot(n)); // pre-collision velocity
    const Vec2 back = -v_in;
    const double psi = std::atan2(back.dot(tt), back.dot(n));
    FlightResult fr = cast_ray(t, x.scatterer_id, x.r, psi, 15.0);
    REQUIRE(fr.hit);
    const Disk& src = t.disks()[fr.target_id];
    const Vec2 c = src.center + Vec2{double(fr.cell_dx), double(fr.cell_dy)};
    const Vec2 n0 = (fr.hit_point - c) * (1.0 / src.radius);
    double a0 = std::atan2(n0.y, n0.x);
    if (a0 < 0) a0 += 2 * std::numbers::pi;
    // at the previous collision the outgoing velocity was v_in
    const double phi_prev = std::atan2(v_in.dot(n0.perp()), v_in.dot(n0));
    return make_phase_point(t, fr.target_id, a0 * src.radius, phi_prev);
}

} // namespace

TEST_CASE("normal-incidence period-2 orbit between the two disks") {
    const auto& t = table();
    const double r_a = 0.25 * std::numbers::pi / 4.0; // facing (0.5,0.5)
    PhasePoint x = make_phase_point(t, 0, r_a, 0.0);
    CollisionStep cs = step(t, x);
    CHECK(cs.to.scatterer_id == 1);
    CHECK(cs.tau == doctest::Approx(std::sqrt(0.5) - 0.5).epsilon(1e-12));
    CHECK(cs.to.phi == doctest::Approx(0.0).epsilon(1e-12));
    // arrival faces back toward disk 0
    CHECK(cs.to.r == doctest::Approx(0.25 * 5.0 * std::numbers::pi / 4.0).epsilon(1e-10));

    CollisionStep back = step(t, cs.to);
    CHECK(back.to.scatterer_id == 0);
    CHECK(wrap_diff(back.to.r, x.r, t.perimeter(0)) == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(back.to.phi == doctest::Approx(0.0).epsilon(1e-12));

    // on the 2-cycle the backward map coincides with the forward map
    CollisionStep inv = step_inverse(t, x);
    CHECK(inv.to.scatterer_id == 1);
    CHECK(std::abs(wrap_diff(inv.to.r, cs.to.r, t.perimeter(1))) < 1e-10);
    CHECK(inv.to.phi == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("step then step_inverse is the identity") {
    const auto& t = table();
    Rng rng(20240611);
    for (int i = 0; i < 300; ++i) {
        PhasePoint x = random_phase_point(t, rng);
        CollisionStep f = try_step(t, x);
        if (f.status != StepStatus::ok) continue;
        CollisionStep b = try_step_inverse(t, f.to);
        REQUIRE(b.status == StepStatus::ok);
        CHECK(b.to.scatterer_id == x.scatterer_id);
        CHECK(std::abs(wrap_diff(b.to.r, x.r, t.perimeter(x.scatterer_id))) < 1e-10);
        CHECK(std::abs(b.to.phi - x.phi) < 1e-10);
    }
}

TEST_CASE("five steps forward then five steps back") {
    const auto& t = table();
    Rng rng(77);
    int tested = 0;
    while (tested < 50) {
        PhasePoint x = random_bi_regular_point(t, rng, 6);
        if (x.cos_phi < 0.15) continue;
        PhasePoint cur = x;
        bool ok = true;
        for (int k = 0; k < 5 && ok; ++k) {
            CollisionStep cs = try_step(t, cur);
            // stay away from grazing collisions; the differential norm grows
            // like 1/cos(phi) and the roundtrip amplifies roundoff by its product
            ok = cs.status == StepStatus::ok && cs.grazing_margin > 0.15 && cs.tau < 1.5;
            cur = cs.to;
        }
        if (!ok) continue;
        for (int k = 0; k < 5 && ok; ++k) {
            CollisionStep cs = try_step_inverse(t, cur);
            ok = cs.status == StepStatus::ok;
            cur = cs.to;
        }
        if (!ok) continue;
        ++tested;
        CHECK(cur.scatterer_id == x.scatterer_id);
        CHECK(std::abs(wrap_diff(cur.r, x.r, t.perimeter(x.scatterer_id))) < 1e-8);
        CHECK(std::abs(cur.phi - x.phi) < 1e-8);
    }
}

TEST_CASE("differential matches central finite differences") {
    const auto& t = table();
    Rng rng(1234);
    const double h = 1e-6;
    int tested = 0;
    while (tested < 100) {
        PhasePoint x = random_phase_point(t, rng, 1.3);
        CollisionStep cs = try_step(t, x);
        if (cs.status != StepStatus::ok || cs.grazing_margin < 0.05) continue;

        CollisionStep rp = try_step(t, make_phase_point(t, x.scatterer_id, x.r + h, x.phi));
        CollisionStep rm = try_step(t, make_phase_point(t, x.scatterer_id, x.r - h, x.phi));
        CollisionStep pp = try_step(t, make_phase_point(t, x.scatterer_id, x.r, x.phi + h));
        CollisionStep pm = try_step(t, make_phase_point(t, x.scatterer_id, x.r, x.phi - h));
        if (rp.status != StepStatus::ok || rm.status != StepStatus::ok ||
            pp.status != StepStatus::ok || pm.status != StepStatus::ok)
            continue;
        // all four perturbed orbits must land on the same branch
        if (rp.to.scatterer_id != cs.to.scatterer_id || rm.to.scatterer_id != cs.to.scatterer_id ||
            pp.to.scatterer_id != cs.to.scatterer_id || pm.to.scatterer_id != cs.to.scatterer_id)
            continue;
        ++tested;

        const double per1 = t.perimeter(cs.to.scatterer_id);
        const double fd00 = wrap_diff(rp.to.r, rm.to.r, per1) / (2 * h);
        const double fd10 = (rp.to.phi - rm.to.phi) / (2 * h);
        const double fd01 = wrap_diff(pp.to.r, pm.to.r, per1) / (2 * h);
        const double fd11 = (pp.to.phi - pm.to.phi) / (2 * h);

        const double scale = std::max({std::abs(fd00), std::abs(fd10), std::abs(fd01),
                                       std::abs(fd11), 1.0});
        CHECK(std::abs(cs.dT.a00 - fd00) / scale < 1e-5);
        CHECK(std::abs(cs.dT.a10 - fd10) / scale < 1e-5);
        CHECK(std::abs(cs.dT.a01 - fd01) / scale < 1e-5);
        CHECK(std::abs(cs.dT.a11 - fd11) / scale < 1e-5);
    }
}

TEST_CASE("determinant of the differential is the ratio of cosines") {
    const auto& t = table();
    Rng rng(555);
    for (int i = 0; i < 200; ++i) {
        PhasePoint x = random_phase_point(t, rng);
        CollisionStep cs = try_step(t, x);
        if (cs.status != StepStatus::ok) continue;
        CHECK(cs.dT.det() == doctest::Approx(x.cos_phi / cs.to.cos_phi).epsilon(1e-10));
    }
}

TEST_CASE("inverse map agrees with independent backward ray casting") {
    const auto& t = table();
    Rng rng(90210);
    int tested = 0;
    while (tested < 1000) {
        PhasePoint x = random_phase_point(t, rng);
        CollisionStep inv = try_step_inverse(t, x);
        if (inv.status != StepStatus::ok) continue;
        ++tested;
        PhasePoint oracle = backward_by_ray(t, x);
        CHECK(oracle.scatterer_id == inv.to.scatterer_id);
        CHECK(std::abs(wrap_diff(oracle.r, inv.to.r, t.perimeter(oracle.scatterer_id))) < 1e-10);
        CHECK(std::abs(oracle.phi - inv.to.phi) < 1e-10);
    }
}

TEST_CASE("cone fields are strictly invariant") {
    const auto& t = table();
    Rng rng(31337);
    const double lo = t.cone_slope_min();
    const double hi = t.cone_slope_max();
    for (int i = 0; i < 500; ++i) {
        PhasePoint x = random_phase_point(t, rng);
        CollisionStep cs = try_step(t, x);
        if (cs.status != StepStatus::ok) continue;
        for (double s : {lo, 0.5 * (lo + hi), hi}) {
            const Vec2 u = cs.dT.apply({1.0, s});
            const double su = u.y / u.x;
            CHECK(su > lo);
            CHECK(su < hi);
            const Vec2 w = cs.dT.solve({1.0, -s});
            const double sw = w.y / w.x;
            CHECK(sw < -lo);
            CHECK(sw > -hi);
        }
    }
}

TEST_CASE("adapted norm expands cone vectors by at least Lambda each step") {
    const auto& t = table();
    Rng rng(4242);
    const double Lambda = t.Lambda();
    for (int i = 0; i < 300; ++i) {
        PhasePoint x = random_phase_point(t, rng);
        CollisionStep cs = try_step(t, x);
        if (cs.status != StepStatus::ok) continue;
        const double K0 = t.curvature(x.scatterer_id);
        const double K1 = t.curvature(cs.to.scatterer_id);
        for (double s : {t.cone_slope_min(), 2.0, t.cone_slope_max()}) {
            const Vec2 v{1.0, s};
            const Vec2 w = cs.dT.apply(v);
            const double growth = adapted_norm(K1, w) / adapted_norm(K0, v);
            CHECK(growth >= Lambda * (1.0 - 1e-12));
        }
    }
}

TEST_CASE("stable direction lies in the stable cone and is equivariant") {
    const auto& t = table();
    Rng rng(2718);
    int tested = 0;
    while (tested < 200) {
        PhasePoint x = random_bi_regular_point(t, rng, 3);
        DirectionResult es, es1;
        CollisionStep cs = try_step(t, x);
        if (cs.status != StepStatus::ok) continue;
        try {
            es = stable_direction(t, x);
            es1 = stable_direction(t, cs.to);
        } catch (const InsufficientDepthError&) {
            continue;
        }
        if (!es.converged || !es1.converged) continue;
        ++tested;
        CHECK(es.slope <= -t.cone_slope_min() + 1e-9);
        CHECK(es.slope >= -t.cone_slope_max() - 1e-9);

        // push the stable line one step forward; it must be the stable line there
        const Vec2 pushed = cs.dT.apply(es.dir);
        const double mis = std::abs(pushed.cross(es1.dir)) / pushed.norm();
        CHECK(mis < 10 * std::max(es.err, es1.err) + 1e-11);
    }
}

TEST_CASE("unstable direction mirrors the stable one under time reversal") {
    const auto& t = table();
    Rng rng(161803);
    int tested = 0;
    while (tested < 100) {
        PhasePoint x = random_bi_regular_point(t, rng, 3);
        DirectionResult eu, es_rev;
        try {
            eu = unstable_direction(t, x);
            es_rev = stable_direction(t, time_reverse(x));
        } catch (const InsufficientDepthError&) {
            continue;
        }
        if (!eu.converged || !es_rev.converged) continue;
        ++tested;
        CHECK(eu.slope >= t.cone_slope_min() - 1e-9);
        CHECK(eu.slope <= t.cone_slope_max() + 1e-9);
        CHECK(eu.slope == doctest::Approx(-es_rev.slope).epsilon(1e-8));
    }
}

TEST_CASE("two different stable seeds converge to the same direction") {
    const auto& t = table();
    Rng rng(5150);
    int tested = 0;
    while (tested < 50) {
        PhasePoint x = random_bi_regular_point(t, rng, 3);
        DirectionResult es;
        try {
            es = stable_direction(t, x, 60, 1e-12);
        } catch (const InsufficientDepthError&) {
            continue;
        }
        if (!es.converged) continue;
        ++tested;
        // the returned err bounds the distance between any two seeds
        CHECK(es.err < 1e-12);
    }
}

TEST_CASE("one-step stable Jacobian equals the differential applied to the stable line") {
    const auto& t = table();
    Rng rng(864);
    int tested = 0;
    while (tested < 100) {
        PhasePoint x = random_bi_regular_point(t, rng, 3);
        OrbitWithSlopes orbit = forward_orbit_with_slopes(t, x, 1, 40);
        if (orbit.steps_completed < 1 || orbit.slope_err[0] > 1e-10) continue;
        DirectionResult es;
        try {
            es = stable_direction(t, x);
        } catch (const InsufficientDepthError&) {
            continue;
        }
        if (!es.converged) continue;
        ++tested;
        const Vec2 w = orbit.mats[0].apply(es.dir);
        const double direct = w.norm() / es.dir.norm();
        CHECK(std::exp(orbit.log_js[0]) == doctest::Approx(direct).epsilon(1e-8));
    }
}

TEST_CASE("stable Jacobian cocycle identity") {
    const auto& t = table();
    Rng rng(11235);
    int tested = 0;
    while (tested < 60) {
        PhasePoint x = random_bi_regular_point(t, rng, 9);
        OrbitWithSlopes orbit = forward_orbit_with_slopes(t, x, 7, 40);
        if (orbit.steps_completed < 7) continue;
        ++tested;
        const int n = 3, m = 4;
        double log_nm = 0.0, log_n = 0.0, log_m = 0.0;
        for (int k = 0; k < n + m; ++k) log_nm += orbit.log_js[k];
        for (int k = 0; k < n; ++k) log_n += orbit.log_js[k];
        for (int k = n; k < n + m; ++k) log_m += orbit.log_js[k];
        CHECK(std::exp(log_nm) == doctest::Approx(std::exp(log_n) * std::exp(log_m)).epsilon(1e-9));
    }
}

TEST_CASE("stable Jacobian contracts at the certified rate") {
    const auto& t = table();
    Rng rng(321);
    int tested = 0;
    while (tested < 60) {
        PhasePoint x = random_bi_regular_point(t, rng, 8);
        double js;
        try {
            js = stable_jacobian(t, x, 6);
        } catch (const std::exception&) {
            continue;
        }
        ++tested;
        CHECK(js > 0.0);
        CHECK(js < 1.0);
        // adapted and Euclidean norms differ by bounded factors, so allow slack
        const double euclid_slack = 40.0;
        CHECK(js <= euclid_slack * std::pow(t.Lambda(), -6.0));
    }
}

TEST_CASE("unstable Jacobian expands and satisfies the factorization identity") {
    const auto& t = table();
    Rng rng(777);
    int tested = 0;
    while (tested < 200) {
        PhasePoint x = random_bi_regular_point(t, rng, 4);
        CollisionStep cs = try_step(t, x);
        if (cs.status != StepStatus::ok) continue;
        double ju, js, ex, ex1;
        try {
            ju = unstable_jacobian(t, x, 1);
            js = stable_jacobian(t, x, 1);
            ex = stable_unstable_angle_sin(t, x);
            ex1 = stable_unstable_angle_sin(t, cs.to);
        } catch (const std::exception&) {
            continue;
        }
        ++tested;
        CHECK(ju > 1.0);
        const double lhs = x.cos_phi / cs.to.cos_phi;
        const double rhs = ju * js * ex1 / ex;
        CHECK(std::abs(lhs - rhs) / std::abs(lhs) < 1e-6);
    }
}

TEST_CASE("near-tangential points are refused") {
    const auto& t = table();
    PhasePoint x = make_phase_point(t, 0, 0.1, std::numbers::pi / 2.0 - 1e-12);
    CHECK_THROWS_AS(step(t, x), NearTangentialError);
}
