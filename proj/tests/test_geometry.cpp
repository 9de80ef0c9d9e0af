#include <cmath>
#include <numbers>

#include "billiard/geometry.hpp"
#include "doctest.h"

using namespace billiard;

TEST_CASE("boundary_point parametrizes circles counterclockwise") {
    TableGeometry table({{{0.0, 0.0}, 0.25}}, 3.0, 3, 0.05);

    BoundaryPoint bp = boundary_point(table, 0, 0.0);
    CHECK(bp.position.x == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(bp.position.y == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(bp.inward_normal.x == doctest::Approx(1.0));
    CHECK(bp.inward_normal.y == doctest::Approx(0.0));
    CHECK(bp.curvature == doctest::Approx(4.0));

    const double quarter = std::numbers::pi * 0.25 / 2.0;
    BoundaryPoint q = boundary_point(table, 0, quarter);
    CHECK(q.position.x == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(q.position.y == doctest::Approx(0.25));
    CHECK(q.inward_normal.x == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(q.inward_normal.y == doctest::Approx(1.0));

    const double per = table.perimeter(0);
    BoundaryPoint a = boundary_point(table, 0, per + 0.1);
    BoundaryPoint b = boundary_point(table, 0, 0.1);
    CHECK(a.r == doctest::Approx(b.r).epsilon(1e-13));
    CHECK(a.position.x == doctest::Approx(b.position.x).epsilon(1e-13));
    CHECK(a.position.y == doctest::Approx(b.position.y).epsilon(1e-13));

    CHECK_THROWS_AS(boundary_point(table, 3, 0.0), std::domain_error);
}

TEST_CASE("boundary points sit at exact distance radius from the center") {
    TableGeometry table = default_table();
    for (int id = 0; id < table.num_scatterers(); ++id) {
        for (int i = 0; i < 100; ++i) {
            const double r = table.perimeter(id) * (i / 100.0 + 0.003);
            BoundaryPoint bp = boundary_point(table, id, r);
            const double d = (bp.position - table.disks()[id].center).norm();
            CHECK(std::abs(d - table.radius(id)) < 1e-12);
            CHECK(std::abs(bp.inward_normal.norm() - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("derived constants of the default table") {
    TableGeometry table = default_table();
    CHECK(table.K_min() == doctest::Approx(4.0));
    CHECK(table.K_max() == doctest::Approx(4.0));
    // closest pair: centers sqrt(0.5) apart, radii 0.25 each
    CHECK(table.tau_min() == doctest::Approx(std::sqrt(0.5) - 0.5).epsilon(1e-12));
    CHECK(table.Lambda() == doctest::Approx(1.0 + 2.0 * table.tau_min() * 4.0).epsilon(1e-12));
    CHECK(table.boundary_length() == doctest::Approx(2.0 * 2.0 * std::numbers::pi * 0.25));
}

TEST_CASE("overlapping disks are rejected") {
    CHECK_THROWS_AS(TableGeometry({{{0.0, 0.0}, 0.5}, {{0.5, 0.0}, 0.5}}, 3.0, 3, 0.05),
                    InvalidTableError);
    // touching is rejected as well: the closed disks must be disjoint
    CHECK_THROWS_AS(TableGeometry({{{0.0, 0.0}, 0.25}, {{0.5, 0.0}, 0.25}}, 3.0, 3, 0.05),
                    InvalidTableError);
}

TEST_CASE("validate_table on the default two-disk layout") {
    TableGeometry table = default_table();
    ValidationReport rep = validate_table(table, 2000, 10.0, ExecPolicy::serial);
    CHECK(rep.valid);
    CHECK(rep.tau_min == doctest::Approx(std::sqrt(0.5) - 0.5).epsilon(1e-12));
    CHECK(rep.tau_min <= std::sqrt(0.5) - 0.5 + 1e-12);
    CHECK(rep.Lambda == doctest::Approx(table.Lambda()));
    CHECK(rep.tau_max_empirical > rep.tau_min);
    // this layout has zero-width grazing corridors along both diagonals; the
    // continuation search must chase them into long flights
    CHECK(rep.longest_flight > 2.0);
}

TEST_CASE("validate_table is deterministic and thread-count independent") {
    TableGeometry table = default_table();
    ValidationReport a = validate_table(table, 1500, 8.0, ExecPolicy::serial);
    ValidationReport b = validate_table(table, 1500, 8.0, ExecPolicy::parallel);
    CHECK(a.tau_max_empirical == b.tau_max_empirical);
    CHECK(a.finite_horizon == b.finite_horizon);
    CHECK(a.rays_escaped == b.rays_escaped);
    CHECK(a.to_json() == b.to_json());
}

TEST_CASE("single disk has open corridors along the axes") {
    TableGeometry table({{{0.0, 0.0}, 0.25}}, 3.0, 3, 0.05);
    ValidationReport rep = validate_table(table, 4000, 6.0, ExecPolicy::serial);
    CHECK_FALSE(rep.finite_horizon);
}

TEST_CASE("table JSON round trip") {
    TableGeometry table = default_table();
    TableGeometry back = table_from_json(table_to_json(table));
    CHECK(back.num_scatterers() == 2);
    CHECK(back.tau_min() == doctest::Approx(table.tau_min()));
    CHECK(back.q_exponent() == table.q_exponent());
    CHECK(back.k0() == table.k0());
    CHECK(back.delta0() == table.delta0());
}
