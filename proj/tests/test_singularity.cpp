#include <cmath>
#include <numbers>
#include <set>

#include "billiard/singularity.hpp"
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
constexpr double kHalfPi = std::numbers::pi / 2;
} // namespace

TEST_CASE("strip index basics (q=3, k0=3)") {
    const auto& t = table();
    CHECK(strip_index(t, 0.0).k == 0);

    // pi/2 - phi = 3.5^-3 lies between 4^-3 and 3^-3
    CHECK(strip_index(t, kHalfPi - std::pow(3.5, -3.0)).k == 3);

    // mirrored band on the phi < 0 side
    CHECK(strip_index(t, -(kHalfPi - std::pow(5.0, -3.0) * 0.99)).k == -5);

    // an exact band boundary goes to the larger index
    CHECK(strip_index(t, kHalfPi - std::pow(5.0, -3.0)).k == 5);

    // the bulk band reaches exactly to k0^-q
    CHECK(strip_index(t, kHalfPi - std::pow(3.0, -3.0)).k == 0);
    CHECK(strip_index(t, kHalfPi - std::pow(3.0, -3.0) * 0.999).k >= 3);
}

TEST_CASE("strip index partitions the angle interval monotonically") {
    const auto& t = table();
    int prev = std::numeric_limits<int>::min();
    for (int i = 1; i < 20000; ++i) {
        const double phi = -kHalfPi + std::numbers::pi * i / 20000.0;
        const int k = strip_index(t, phi).k;
        CHECK(k >= prev);
        prev = k;
        if (k != 0) CHECK(std::abs(k) >= t.k0());
    }
}

TEST_CASE("period-2 orbit alternates scatterers in the bulk band") {
    const auto& t = table();
    PhasePoint x = make_phase_point(t, 0, 0.25 * std::numbers::pi / 4.0, 0.0);
    Itinerary it = itinerary(t, x, 4, OrbitDirection::forward);
    REQUIRE(it.symbols.size() == 4);
    for (int j = 0; j < 4; ++j) {
        CHECK(it.symbols[j].scatterer_id == (j % 2 == 0 ? 0 : 1));
        CHECK(it.symbols[j].strip_k == 0);
    }
}

TEST_CASE("itinerary prefix property") {
    const auto& t = table();
    Rng rng(808);
    int tested = 0;
    while (tested < 100) {
        PhasePoint x = random_bi_regular_point(t, rng, 7);
        Itinerary a = try_itinerary(t, x, 5, OrbitDirection::forward);
        Itinerary b = try_itinerary(t, x, 6, OrbitDirection::forward);
        if (!a.complete || !b.complete) continue;
        ++tested;
        for (std::size_t j = 0; j < a.symbols.size(); ++j) {
            CHECK(a.symbols[j].scatterer_id == b.symbols[j].scatterer_id);
            CHECK(a.symbols[j].strip_k == b.symbols[j].strip_k);
        }
    }
}

TEST_CASE("backward itinerary mirrors the forward itinerary of the reversed point") {
    const auto& t = table();
    Rng rng(909);
    int tested = 0;
    while (tested < 100) {
        PhasePoint x = random_bi_regular_point(t, rng, 7);
        Itinerary back = try_itinerary(t, x, 6, OrbitDirection::backward);
        Itinerary fwd = try_itinerary(t, time_reverse(x), 6, OrbitDirection::forward);
        if (!back.complete || !fwd.complete) continue;
        ++tested;
        for (std::size_t j = 0; j < back.symbols.size(); ++j) {
            CHECK(back.symbols[j].scatterer_id == fwd.symbols[j].scatterer_id);
            CHECK(back.symbols[j].strip_k == -fwd.symbols[j].strip_k);
        }
    }
}

TEST_CASE("truncated itineraries report the achieved length") {
    const auto& t = table();
    PhasePoint x = make_phase_point(t, 0, 0.1, kHalfPi - 1e-12);
    CHECK_THROWS_AS(itinerary(t, x, 3, OrbitDirection::forward), TruncatedItineraryError);
    try {
        itinerary(t, x, 3, OrbitDirection::forward);
    } catch (const TruncatedItineraryError& e) {
        CHECK(e.achieved.symbols.size() == 1);
        CHECK_FALSE(e.achieved.complete);
    }
}

TEST_CASE("first-preimage branch vertices map onto the tangency lines") {
    const auto& t = table();
    MapOptions opts;
    opts.horizon_bound = 4.0;
    SingularCurveSet s1 = singularity_curves(t, 1, 2e-3, 400000, opts);
    REQUIRE(s1.branches.size() > 0);
    std::size_t checked = 0;
    for (const auto& br : s1.branches) {
        for (std::size_t i = 0; i < br.vertices.size(); i += 7) {
            const Vec2 v = br.vertices[i];
            PhasePoint x = make_phase_point(t, br.scatterer_id, v.x, v.y);
            if (x.cos_phi < opts.tol_tangent) continue; // cannot step from there
            CollisionStep cs = try_step(t, x, opts);
            if (cs.status == StepStatus::horizon) continue;
            // arrival data is filled even when flagged near-tangential
            CHECK(std::abs(cs.to.phi) > kHalfPi - 1e-6);
            ++checked;
        }
    }
    CHECK(checked > 200);
}

TEST_CASE("forward-image branches are transverse to the stable cone") {
    const auto& t = table();
    MapOptions opts;
    opts.horizon_bound = 4.0;
    SingularCurveSet sm1 = singularity_curves(t, -1, 2e-3, 400000, opts);
    REQUIRE(sm1.branches.size() > 0);
    const double lo = t.cone_slope_min() - 1e-6;
    const double hi = t.cone_slope_max() + 1e-6;
    std::size_t checked = 0;
    for (const auto& br : sm1.branches) {
        for (std::size_t i = 0; i + 1 < br.vertices.size(); i += 5) {
            const Vec2 a = br.vertices[i], b = br.vertices[i + 1];
            const double dr = b.x - a.x;
            if (std::abs(dr) < 1e-9) continue;
            const double slope = (b.y - a.y) / dr;
            CHECK(slope >= lo);
            CHECK(slope <= hi);
            ++checked;
        }
    }
    CHECK(checked > 200);
}

TEST_CASE("distance to the singular set") {
    const auto& t = table();
    MapOptions opts;
    opts.horizon_bound = 4.0;
    SingularCurveSet s1 = singularity_curves(t, 1, 2e-3, 400000, opts);

    // a polyline vertex is at distance ~0
    const auto& br = s1.branches.front();
    const Vec2 v = br.vertices[br.vertices.size() / 2];
    PhasePoint on = make_phase_point(t, br.scatterer_id, v.x, v.y);
    CHECK(distance_to_singularity(t, on, s1) < s1.resolution);

    // the period-2 point is strictly off the singular set, and no farther
    // than the tangency lines
    PhasePoint p2 = make_phase_point(t, 0, 0.25 * std::numbers::pi / 4.0, 0.0);
    const double d = distance_to_singularity(t, p2, s1);
    CHECK(d > 0.0);
    CHECK(d <= kHalfPi + 1e-12);

    // brute-force oracle over all branch segments
    Rng rng(313);
    for (int i = 0; i < 40; ++i) {
        PhasePoint x = random_phase_point(t, rng);
        double best = kHalfPi - std::abs(x.phi);
        for (const auto& b2 : s1.branches) {
            if (b2.scatterer_id != x.scatterer_id) continue;
            for (std::size_t k = 0; k + 1 < b2.vertices.size(); ++k) {
                const Vec2 a = b2.vertices[k], c = b2.vertices[k + 1];
                const Vec2 p{x.r, x.phi};
                const Vec2 ab = c - a;
                double tt = ab.norm2() > 0 ? (p - a).dot(ab) / ab.norm2() : 0.0;
                tt = std::clamp(tt, 0.0, 1.0);
                best = std::min(best, (p - (a + ab * tt)).norm());
            }
        }
        CHECK(distance_to_singularity(t, x, s1) == doctest::Approx(best).epsilon(1e-9));
    }
}

TEST_CASE("distance estimates settle as the resolution is refined") {
    const auto& t = table();
    MapOptions opts;
    opts.horizon_bound = 3.0;
    SingularCurveSet coarse = singularity_curves(t, 1, 8e-3, 400000, opts);
    SingularCurveSet mid = singularity_curves(t, 1, 4e-3, 400000, opts);
    SingularCurveSet fine = singularity_curves(t, 1, 2e-3, 400000, opts);

    Rng rng(1414);
    double step1 = 0.0, step2 = 0.0;
    for (int i = 0; i < 100; ++i) {
        PhasePoint x = random_phase_point(t, rng);
        const double dc = distance_to_singularity(t, x, coarse);
        const double dm = distance_to_singularity(t, x, mid);
        const double df = distance_to_singularity(t, x, fine);
        step1 += std::abs(dc - dm);
        step2 += std::abs(dm - df);
    }
    CHECK(step2 <= step1 + 1e-9);
}
