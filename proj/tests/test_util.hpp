#pragma once

#include "billiard/billiard_map.hpp"
#include "billiard/geometry.hpp"
#include "billiard/rng.hpp"

namespace billiard::testutil {

/// Uniform draw on phase space, rejecting points too close to tangency or
/// with truncated orbits so that oracle comparisons stay well-posed.
inline PhasePoint random_phase_point(const TableGeometry& table, Rng& rng,
                                     double phi_cap = 1.45) {
    for (;;) {
        const int id = static_cast<int>(rng.below(table.num_scatterers()));
        const double r = rng.uniform(0.0, table.perimeter(id));
        const double phi = rng.uniform(-phi_cap, phi_cap);
        PhasePoint x = make_phase_point(table, id, r, phi);
        CollisionStep cs = try_step(table, x);
        if (cs.status == StepStatus::ok) return x;
    }
}

/// Random point whose forward and backward orbits both survive n steps.
inline PhasePoint random_bi_regular_point(const TableGeometry& table, Rng& rng, int n,
                                          double phi_cap = 1.45) {
    for (;;) {
        PhasePoint x = random_phase_point(table, rng, phi_cap);
        bool ok = true;
        PhasePoint f = x;
        for (int k = 0; k < n && ok; ++k) {
            CollisionStep cs = try_step(table, f);
            ok = cs.status == StepStatus::ok;
            f = cs.to;
        }
        PhasePoint b = x;
        for (int k = 0; k < n && ok; ++k) {
            CollisionStep cs = try_step_inverse(table, b);
            ok = cs.status == StepStatus::ok;
            b = cs.to;
        }
        if (ok) return x;
    }
}

} // namespace billiard::testutil
