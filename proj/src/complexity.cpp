#include "billiard/complexity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "billiard/rng.hpp"

namespace billiard {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;
constexpr double kSlopeTol = 1e-9; // convergence requirement on per-point slopes

int strip_index_custom(double phi, double q, int k0) {
    const double v_top = kHalfPi - phi;
    const double v_bot = kHalfPi + phi;
    const double v_min = std::min(v_top, v_bot);
    const double edge = std::pow(static_cast<double>(k0), -q);
    if (v_min >= edge * (1.0 - 1e-12)) return 0;
    int k;
    if (v_min <= 0.0) {
        k = 1 << 20;
    } else {
        const double u = std::pow(v_min, -1.0 / q);
        const double nearest = std::round(u);
        if (std::abs(u - nearest) <= 1e-9 * u)
            k = static_cast<int>(nearest);
        else
            k = static_cast<int>(std::ceil(u)) - 1;
        k = std::clamp(k, k0, 1 << 20);
    }
    return v_top <= v_bot ? k : -k;
}

struct SampleRow {
    int scatterer = 0;
    double s_lo = 0.0, s_hi = 0.0;
    std::uint64_t row_id = 0;
};

std::vector<SampleRow> build_rows(const TableGeometry& table, const SamplingPlan& plan) {
    std::vector<SampleRow> rows;
    std::uint64_t rid = 0;
    for (int sc = 0; sc < table.num_scatterers(); ++sc) {
        const double h = 2.0 / plan.grid_s;
        for (int i = 0; i < plan.grid_s; ++i)
            rows.push_back({sc, -1.0 + i * h, -1.0 + (i + 1) * h, rid++});
        // dyadic refinement bands inside the outermost base rows
        for (int side = 0; side < 2; ++side) {
            double outer = h;
            for (int L = 1; L <= plan.tangency_layers; ++L) {
                const double inner = outer / 2.0;
                const double lo = 1.0 - outer, hi = 1.0 - inner;
                const double width = (hi - lo) / plan.tangency_rows;
                for (int i = 0; i < plan.tangency_rows; ++i) {
                    double a = lo + i * width, b = lo + (i + 1) * width;
                    if (side == 1) {
                        a = -a;
                        b = -b;
                    }
                    rows.push_back({sc, std::min(a, b), std::max(a, b), rid++});
                }
                outer = inner;
            }
        }
    }
    return rows;
}

struct SweepAccumulator {
    std::vector<ClassMap> with_strips;
    std::vector<ClassMap> plain;
    std::vector<std::size_t> skipped;
    std::size_t samples = 0;

    explicit SweepAccumulator(int n_max)
        : with_strips(n_max), plain(n_max), skipped(n_max, 0) {}

    void merge_from(SweepAccumulator& o) {
        for (std::size_t n = 0; n < with_strips.size(); ++n) {
            for (auto& [k, agg] : o.with_strips[n]) {
                auto [it, fresh] = with_strips[n].try_emplace(k, agg);
                if (!fresh) {
                    auto& a = it->second;
                    a.max_log_weight = std::max(a.max_log_weight, agg.max_log_weight);
                    a.count += agg.count;
                    a.r_min = std::min(a.r_min, agg.r_min);
                    a.r_max = std::max(a.r_max, agg.r_max);
                    a.phi_min = std::min(a.phi_min, agg.phi_min);
                    a.phi_max = std::max(a.phi_max, agg.phi_max);
                }
            }
            for (auto& [k, agg] : o.plain[n]) {
                auto [it, fresh] = plain[n].try_emplace(k, agg);
                if (!fresh) it->second.count += agg.count;
            }
            skipped[n] += o.skipped[n];
        }
        samples += o.samples;
    }
};

void update_class(ClassMap& m, const ClassKey& key, double log_weight, const PhasePoint& x) {
    auto [it, fresh] = m.try_emplace(key);
    auto& a = it->second;
    if (fresh) {
        a.max_log_weight = log_weight;
        a.count = 1;
        a.r_min = a.r_max = static_cast<float>(x.r);
        a.phi_min = a.phi_max = static_cast<float>(x.phi);
        return;
    }
    a.max_log_weight = std::max(a.max_log_weight, log_weight);
    ++a.count;
    a.r_min = std::min(a.r_min, static_cast<float>(x.r));
    a.r_max = std::max(a.r_max, static_cast<float>(x.r));
    a.phi_min = std::min(a.phi_min, static_cast<float>(x.phi));
    a.phi_max = std::max(a.phi_max, static_cast<float>(x.phi));
}

void sweep_sample(const TableGeometry& table, const PhasePoint& x, int n_max,
                  const MapOptions& opts, SweepAccumulator& acc) {
    ++acc.samples;
    OrbitWithSlopes orbit = forward_orbit_with_slopes(table, x, n_max, 22, opts);

    // flights give the addresses; Jacobian factors additionally need the
    // per-point slope certificate
    const int flights = orbit.steps_completed;
    int j_usable = 0;
    while (j_usable < flights && j_usable < n_max && orbit.slope_err[j_usable] <= kSlopeTol)
        ++j_usable;

    ClassKey key_s, key_p;
    key_s.push(static_cast<std::uint64_t>(x.scatterer_id));
    key_p.push(static_cast<std::uint64_t>(x.scatterer_id));
    double log_sum = 0.0;
    for (int n = 1; n <= n_max; ++n) {
        const int j = n - 1; // index of the flight entering horizon n
        if (j >= flights || j >= j_usable) {
            for (int m = n; m <= n_max; ++m) ++acc.skipped[m - 1];
            // plain addressing only needs flights
            ClassKey kp = key_p;
            for (int m = n; m <= n_max && m - 1 < flights; ++m) {
                kp.push_flight(orbit.target_ids[m - 1], orbit.cell_dx[m - 1],
                               orbit.cell_dy[m - 1]);
                update_class(acc.plain[m - 1], kp, 0.0, x);
            }
            return;
        }
        key_s.push_strip(strip_index(table, orbit.points[j]).k);
        key_s.push_flight(orbit.target_ids[j], orbit.cell_dx[j], orbit.cell_dy[j]);
        key_p.push_flight(orbit.target_ids[j], orbit.cell_dx[j], orbit.cell_dy[j]);
        log_sum += orbit.log_js[j];
        update_class(acc.with_strips[n - 1], key_s, log_sum, x);
        update_class(acc.plain[n - 1], key_p, 0.0, x);
    }
}

} // namespace

double GridObservable::eval(const TableGeometry& table, const PhasePoint& x) const {
    const auto& grid = values[x.scatterer_id];
    const double per = table.perimeter(x.scatterer_id);
    const double fx = x.r / per * n_r - 0.5;
    const double fy = (std::sin(x.phi) + 1.0) / 2.0 * n_s - 0.5;
    const int ix = static_cast<int>(std::floor(fx));
    const int iy = static_cast<int>(std::floor(fy));
    const double ax = fx - ix, ay = fy - iy;
    auto at = [&](int i, int j) {
        const int iw = ((i % n_r) + n_r) % n_r;
        const int jw = std::clamp(j, 0, n_s - 1);
        return grid[static_cast<std::size_t>(iw) * n_s + jw];
    };
    return (1 - ax) * (1 - ay) * at(ix, iy) + ax * (1 - ay) * at(ix + 1, iy) +
           (1 - ax) * ay * at(ix, iy + 1) + ax * ay * at(ix + 1, iy + 1);
}

GridObservable make_grid_observable(const TableGeometry& table, int n_r, int n_s,
                                    const std::function<double(const PhasePoint&)>& f) {
    GridObservable g;
    g.n_r = n_r;
    g.n_s = n_s;
    g.values.resize(table.num_scatterers());
    for (int sc = 0; sc < table.num_scatterers(); ++sc) {
        auto& grid = g.values[sc];
        grid.resize(static_cast<std::size_t>(n_r) * n_s);
        const double per = table.perimeter(sc);
        for (int i = 0; i < n_r; ++i) {
            for (int j = 0; j < n_s; ++j) {
                const double r = per * (i + 0.5) / n_r;
                const double s = -1.0 + 2.0 * (j + 0.5) / n_s;
                const PhasePoint x = make_phase_point(table, sc, r, std::asin(s));
                const double v = f(x);
                grid[static_cast<std::size_t>(i) * n_s + j] = v;
                g.sup_norm = std::max(g.sup_norm, std::abs(v));
            }
        }
        // crude gradient bound from neighboring cells
        for (int i = 0; i < n_r; ++i) {
            for (int j = 0; j + 1 < n_s; ++j) {
                const double dv = std::abs(grid[static_cast<std::size_t>(i) * n_s + j + 1] -
                                           grid[static_cast<std::size_t>(i) * n_s + j]);
                g.grad_norm = std::max(g.grad_norm, dv / (2.0 / n_s));
            }
        }
    }
    return g;
}

QnSweep sweep_qn(const TableGeometry& table, int n_max, const SamplingPlan& plan,
                 ExecPolicy policy, const MapOptions& opts) {
    const std::vector<SampleRow> rows = build_rows(table, plan);

    const int n_blocks = policy == ExecPolicy::parallel ? 8 : 1;
    std::vector<SweepAccumulator> blocks(static_cast<std::size_t>(n_blocks),
                                         SweepAccumulator(n_max));

    const std::size_t rows_per_block = (rows.size() + n_blocks - 1) / n_blocks;
    for_each_index(static_cast<std::size_t>(n_blocks), policy, [&](std::size_t b) {
        SweepAccumulator& acc = blocks[b];
        const std::size_t lo = b * rows_per_block;
        const std::size_t hi = std::min(rows.size(), lo + rows_per_block);
        for (std::size_t ri = lo; ri < hi; ++ri) {
            const SampleRow& row = rows[ri];
            const double per = table.perimeter(row.scatterer);
            for (int c = 0; c < plan.grid_r; ++c) {
                Rng rng(derive_seed(plan.seed, row.row_id, static_cast<std::uint64_t>(c)));
                const double r = per * (c + rng.uniform()) / plan.grid_r;
                const double s = row.s_lo + (row.s_hi - row.s_lo) * rng.uniform();
                const double phi = std::asin(std::clamp(s, -1.0, 1.0));
                sweep_sample(table, make_phase_point(table, row.scatterer, r, phi), n_max,
                             opts, acc);
            }
        }
    });

    for (int b = 1; b < n_blocks; ++b) blocks[0].merge_from(blocks[b]);

    QnSweep sweep;
    sweep.n_max = n_max;
    sweep.with_strips = std::move(blocks[0].with_strips);
    sweep.plain = std::move(blocks[0].plain);
    sweep.samples_total = blocks[0].samples;
    sweep.skipped = std::move(blocks[0].skipped);
    sweep.plan = plan;
    return sweep;
}

namespace {

/// Deterministic sum over a class map: terms are sorted by key first so the
/// result does not depend on hash-map iteration history.
template <typename Term>
double sorted_class_sum(const ClassMap& m, Term&& term) {
    std::vector<std::pair<ClassKey, const ClassAggregate*>> items;
    items.reserve(m.size());
    for (const auto& [k, a] : m) items.emplace_back(k, &a);
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        return a.first.hi != b.first.hi ? a.first.hi < b.first.hi : a.first.lo < b.first.lo;
    });
    std::vector<double> terms;
    terms.reserve(items.size());
    for (const auto& [k, a] : items) terms.push_back(term(*a));
    return ordered_sum(terms);
}

} // namespace

DistortionFit fit_distortion_constant(const TableGeometry& table, int n_steps, int curve_count,
                                      std::uint64_t seed, const MapOptions& opts) {
    DistortionFit fit;
    fit.exponent = 1.0 / (table.q_exponent() + 1.0);
    double worst = 0.0;
    std::size_t pairs = 0;
    for (int c = 0; c < curve_count; ++c) {
        Rng rng(derive_seed(seed, 0x600d, c));
        const int id = static_cast<int>(rng.below(table.num_scatterers()));
        const double r = rng.uniform(0.0, table.perimeter(id));
        const double phi = rng.uniform(-1.2, 1.2);
        const PhasePoint x0 = make_phase_point(table, id, r, phi);
        auto curve =
            grow_stable_curve(table, x0, table.delta0() / 3.0, table.delta0() / 40.0, opts);
        if (!curve || curve->vertices.size() < 5 || !curve->homogeneous) continue;

        // log-Jacobians at the curve's vertices; compared pairs must share
        // their strip history so the homogeneous distortion bound applies
        const std::size_t nv = curve->vertices.size();
        std::vector<double> logj(nv, 0.0);
        std::vector<bool> ok(nv, true);
        std::vector<std::vector<int>> strips(nv);
        for (std::size_t i = 0; i < nv; ++i) {
            const auto& v = curve->vertices[i];
            OrbitWithSlopes orbit = forward_orbit_with_slopes(
                table, make_phase_point(table, curve->scatterer_id, v.r, v.phi), n_steps, 22,
                opts);
            if (orbit.steps_completed < n_steps) {
                ok[i] = false;
                continue;
            }
            for (int j = 0; j < n_steps; ++j) {
                if (orbit.slope_err[j] > kSlopeTol) ok[i] = false;
                logj[i] += orbit.log_js[j];
                strips[i].push_back(strip_index(table, orbit.points[j]).k);
            }
        }
        for (std::size_t i = 0; i + 1 < nv; i += 2) {
            for (std::size_t j = i + 1; j < std::min(nv, i + 8); ++j) {
                if (!ok[i] || !ok[j] || strips[i] != strips[j]) continue;
                const auto& a = curve->vertices[i];
                const auto& b = curve->vertices[j];
                const double d = std::hypot(a.r - b.r, a.phi - b.phi);
                if (d < 1e-6) continue;
                const double ratio = std::abs(1.0 - std::exp(logj[i] - logj[j]));
                worst = std::max(worst, ratio / std::pow(d, fit.exponent));
                ++pairs;
            }
        }
    }
    fit.c_fitted = worst;
    fit.pairs = pairs;
    return fit;
}

ComplexityEstimate estimate_Qn(const TableGeometry& table, double t, int n,
                               const QnSweep& sweep, double distortion_c) {
    if (n < 1 || n > sweep.n_max) throw std::invalid_argument("estimate_Qn: n out of range");
    if (!(t > 0.0)) throw std::invalid_argument("estimate_Qn: t must be positive");
    const ClassMap& m = sweep.with_strips[n - 1];
    const double expn = 1.0 / (table.q_exponent() + 1.0);

    ComplexityEstimate est;
    est.n = n;
    est.t = t;
    est.class_count = m.size();
    est.samples = sweep.samples_total;
    est.skipped = sweep.skipped[n - 1];
    est.skip_warning = est.skipped > est.samples / 100;
    est.value_raw = sorted_class_sum(m, [&](const ClassAggregate& a) {
        return std::exp(t * a.max_log_weight);
    });
    est.value = sorted_class_sum(m, [&](const ClassAggregate& a) {
        const double infl = std::min(1.0, distortion_c * std::pow(a.diam(), expn));
        return std::exp(t * a.max_log_weight) * (1.0 + infl);
    });
    return est;
}

ComplexityEstimate estimate_Qn_weighted(const TableGeometry& table, double t, int n,
                                        const GridObservable& g, const SamplingPlan& plan,
                                        double distortion_c, ExecPolicy policy) {
    // the per-class maximizer depends on g, so this runs its own pass
    const std::vector<SampleRow> rows = build_rows(table, plan);
    const int n_blocks = policy == ExecPolicy::parallel ? 8 : 1;
    std::vector<ClassMap> maps(static_cast<std::size_t>(n_blocks));
    std::vector<std::size_t> skips(static_cast<std::size_t>(n_blocks), 0);
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_blocks), 0);
    const MapOptions opts;

    const std::size_t rows_per_block = (rows.size() + n_blocks - 1) / n_blocks;
    for_each_index(static_cast<std::size_t>(n_blocks), policy, [&](std::size_t b) {
        const std::size_t lo = b * rows_per_block;
        const std::size_t hi = std::min(rows.size(), lo + rows_per_block);
        for (std::size_t ri = lo; ri < hi; ++ri) {
            const SampleRow& row = rows[ri];
            const double per = table.perimeter(row.scatterer);
            for (int c = 0; c < plan.grid_r; ++c) {
                Rng rng(derive_seed(plan.seed, row.row_id, static_cast<std::uint64_t>(c)));
                const double r = per * (c + rng.uniform()) / plan.grid_r;
                const double s = row.s_lo + (row.s_hi - row.s_lo) * rng.uniform();
                const PhasePoint x = make_phase_point(table, row.scatterer, r,
                                                      std::asin(std::clamp(s, -1.0, 1.0)));
                ++counts[b];
                OrbitWithSlopes orbit = forward_orbit_with_slopes(table, x, n, 22, opts);
                bool usable = orbit.steps_completed >= n;
                for (int j = 0; usable && j < n; ++j) usable = orbit.slope_err[j] <= kSlopeTol;
                if (!usable) {
                    ++skips[b];
                    continue;
                }
                ClassKey key;
                key.push(static_cast<std::uint64_t>(x.scatterer_id));
                double w = 0.0;
                for (int j = 0; j < n; ++j) {
                    key.push_strip(strip_index(table, orbit.points[j]).k);
                    key.push_flight(orbit.target_ids[j], orbit.cell_dx[j], orbit.cell_dy[j]);
                    w += t * orbit.log_js[j] + g.eval(table, orbit.points[j]);
                }
                update_class(maps[b], key, w, x);
            }
        }
    });

    ClassMap merged = std::move(maps[0]);
    for (int b = 1; b < n_blocks; ++b) {
        for (auto& [k, agg] : maps[b]) {
            auto [it, fresh] = merged.try_emplace(k, agg);
            if (!fresh) {
                auto& a = it->second;
                a.max_log_weight = std::max(a.max_log_weight, agg.max_log_weight);
                a.count += agg.count;
                a.r_min = std::min(a.r_min, agg.r_min);
                a.r_max = std::max(a.r_max, agg.r_max);
                a.phi_min = std::min(a.phi_min, agg.phi_min);
                a.phi_max = std::max(a.phi_max, agg.phi_max);
            }
        }
    }

    const double expn = 1.0 / (table.q_exponent() + 1.0);
    ComplexityEstimate est;
    est.n = n;
    est.t = t;
    est.class_count = merged.size();
    for (std::size_t b = 0; b < skips.size(); ++b) {
        est.skipped += skips[b];
        est.samples += counts[b];
    }
    est.skip_warning = est.skipped > est.samples / 100;
    est.value_raw = sorted_class_sum(merged, [&](const ClassAggregate& a) {
        return std::exp(a.max_log_weight); // t and g folded in already
    });
    est.value = sorted_class_sum(merged, [&](const ClassAggregate& a) {
        const double infl = std::min(1.0, distortion_c * std::pow(a.diam(), expn));
        return std::exp(a.max_log_weight) * (1.0 + infl);
    });
    return est;
}

PressurePoint estimate_pressure(const TableGeometry& table, double t, int n_max,
                                const QnSweep& sweep, double distortion_c) {
    if (n_max < 4) throw std::invalid_argument("estimate_pressure: n_max must be at least 4");
    PressurePoint pt;
    pt.t = t;
    pt.n_max = std::min(n_max, sweep.n_max);

    std::size_t usable = sweep.samples_total;
    for (int n = 1; n <= pt.n_max; ++n) {
        const ComplexityEstimate est = estimate_Qn(table, t, n, sweep, distortion_c);
        pt.log_qn.push_back(std::log(est.value));
        pt.class_count = est.class_count;
        usable = est.samples - est.skipped;
    }
    pt.resolution_exhausted = pt.class_count * 2 >= usable;

    pt.inf_estimate = std::numeric_limits<double>::infinity();
    for (int n = 1; n <= pt.n_max; ++n)
        pt.inf_estimate = std::min(pt.inf_estimate, pt.log_qn[n - 1] / n);

    // least-squares growth rate over n >= 2; the first step carries the
    // one-off constant
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (int n = 2; n <= pt.n_max; ++n) {
        sx += n;
        sy += pt.log_qn[n - 1];
        sxx += static_cast<double>(n) * n;
        sxy += n * pt.log_qn[n - 1];
        ++m;
    }
    pt.slope_fit = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    pt.last_over_n = pt.log_qn[pt.n_max - 1] / pt.n_max;

    const double lo = std::min({pt.inf_estimate, pt.slope_fit, pt.last_over_n});
    const double hi = std::max({pt.inf_estimate, pt.slope_fit, pt.last_over_n});
    pt.spread = hi - lo;
    pt.estimate = pt.slope_fit;
    return pt;
}

HStarEstimate estimate_h_star(const TableGeometry& table, int n_max, const QnSweep& sweep) {
    (void)table;
    HStarEstimate h;
    const int N = std::min(n_max, sweep.n_max);
    for (int n = 1; n <= N; ++n) h.counts.push_back(sweep.plain[n - 1].size());

    h.inf_estimate = std::numeric_limits<double>::infinity();
    for (int n = 1; n <= N; ++n)
        h.inf_estimate = std::min(h.inf_estimate, std::log(double(h.counts[n - 1])) / n);

    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (int n = 2; n <= N; ++n) {
        sx += n;
        sy += std::log(double(h.counts[n - 1]));
        sxx += static_cast<double>(n) * n;
        sxy += n * std::log(double(h.counts[n - 1]));
        ++m;
    }
    h.estimate = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    h.spread = std::abs(h.estimate - h.inf_estimate);
    return h;
}

SparseRecurrenceEstimate sparse_recurrence_statistic(const TableGeometry& table, double phi0,
                                                     int n0, std::size_t segments,
                                                     std::uint64_t seed, double h_star,
                                                     ExecPolicy policy) {
    if (!(phi0 < kHalfPi)) throw std::invalid_argument("sparse_recurrence: phi0 must be < pi/2");
    std::vector<double> per_segment(segments, 0.0);
    const MapOptions opts;
    for_each_index(segments, policy, [&](std::size_t i) {
        Rng rng(derive_seed(seed, 0x5fa5, i));
        const int id = static_cast<int>(rng.below(table.num_scatterers()));
        const double r = rng.uniform(0.0, table.perimeter(id));
        const double phi = std::asin(rng.uniform(-1.0, 1.0));
        PhasePoint x = make_phase_point(table, id, r, phi);
        int high = 0, n = 0;
        for (; n < n0; ++n) {
            if (std::abs(x.phi) > phi0) ++high;
            CollisionStep cs = try_step(table, x, opts);
            if (cs.status != StepStatus::ok) break;
            x = cs.to;
        }
        per_segment[i] = n == n0 ? static_cast<double>(high) / n0 : 0.0;
    });
    SparseRecurrenceEstimate est;
    est.phi0 = phi0;
    est.n0 = n0;
    est.segments = segments;
    for (double v : per_segment) est.s0 = std::max(est.s0, v);
    est.h_star = h_star;
    est.verdict = h_star > est.s0 * std::log(2.0);
    return est;
}

TStarEstimate estimate_t_star(const std::vector<PressurePoint>& curve, double Lambda) {
    TStarEstimate est;
    if (curve.size() < 2) throw std::invalid_argument("estimate_t_star: need a pressure curve");
    const double logL = std::log(Lambda);

    auto crossing = [&](auto&& value) -> std::optional<double> {
        // last sign change of value(t) + t log Lambda on the grid
        std::optional<double> root;
        for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
            const double f0 = value(curve[i]) + curve[i].t * logL;
            const double f1 = value(curve[i + 1]) + curve[i + 1].t * logL;
            if (f0 > 0.0 && f1 <= 0.0) {
                const double w = f0 / (f0 - f1);
                root = curve[i].t + w * (curve[i + 1].t - curve[i].t);
            }
        }
        return root;
    };

    auto mid = crossing([](const PressurePoint& p) { return p.estimate; });
    auto lo = crossing([](const PressurePoint& p) { return p.estimate - p.spread; });
    auto hi = crossing([](const PressurePoint& p) { return p.estimate + p.spread; });

    if (!mid) {
        const double f_end = curve.back().estimate + curve.back().t * logL;
        est.bounded = false;
        est.lower = f_end > 0.0 ? curve.back().t : curve.front().t;
        est.value = est.lower;
        est.upper = std::numeric_limits<double>::infinity();
        return est;
    }
    est.bounded = true;
    est.value = *mid;
    est.lower = lo.value_or(curve.front().t);
    est.upper = hi.value_or(curve.back().t);
    if (est.lower > est.upper) std::swap(est.lower, est.upper);
    return est;
}

// ---------------------------------------------------------------------------

double StableCurve::length() const {
    double len = 0.0;
    for (std::size_t i = 0; i + 1 < vertices.size(); ++i)
        len += std::hypot(vertices[i + 1].r - vertices[i].r,
                          vertices[i + 1].phi - vertices[i].phi);
    return len;
}

std::optional<StableCurve> grow_stable_curve(const TableGeometry& table, const PhasePoint& x,
                                             double half_len, double step_len,
                                             const MapOptions& opts) {
    auto slope_at = [&](double r, double phi) -> std::optional<double> {
        if (std::abs(phi) > kHalfPi - 1e-6) return std::nullopt;
        try {
            DirectionResult d = stable_direction(
                table, make_phase_point(table, x.scatterer_id, r, phi), 40, 1e-10, opts);
            if (!d.converged) return std::nullopt;
            return d.slope;
        } catch (const std::exception&) {
            return std::nullopt;
        }
    };

    auto base = slope_at(x.r, x.phi);
    if (!base) return std::nullopt;

    auto advance = [&](double dir_sign, std::vector<CurveVertex>& out) {
        double r = x.r, phi = x.phi, slope = *base, s = 0.0;
        while (s < half_len) {
            const double h = step_len * dir_sign;
            const double n1 = std::sqrt(1.0 + slope * slope);
            const double r_mid = r + h / n1, phi_mid = phi + h * slope / n1;
            auto smid = slope_at(r_mid, phi_mid);
            if (!smid) break;
            const double n2 = std::sqrt(1.0 + *smid * *smid);
            const double r2 = r + 0.5 * h * (1.0 / n1 + 1.0 / n2);
            const double phi2 = phi + 0.5 * h * (slope / n1 + *smid / n2);
            auto s2 = slope_at(r2, phi2);
            if (!s2) break;
            r = r2;
            phi = phi2;
            slope = *s2;
            s += step_len;
            out.push_back({r, phi, slope, dir_sign * s, 0.0});
        }
    };

    std::vector<CurveVertex> backward, forward;
    advance(-1.0, backward);
    advance(+1.0, forward);

    StableCurve curve;
    curve.scatterer_id = x.scatterer_id;
    std::reverse(backward.begin(), backward.end());
    curve.vertices = std::move(backward);
    curve.vertices.push_back({x.r, x.phi, *base, 0.0, 0.0});
    curve.vertices.insert(curve.vertices.end(), forward.begin(), forward.end());
    if (curve.vertices.size() < 3) return std::nullopt;

    // re-anchor the parameter at the first vertex
    const double p0 = curve.vertices.front().param;
    for (auto& v : curve.vertices) v.param -= p0;

    const int k_first = strip_index(table, curve.vertices.front().phi).k;
    for (const auto& v : curve.vertices)
        if (strip_index(table, v.phi).k != k_first) curve.homogeneous = false;
    return curve;
}

namespace {

struct PulledVertex {
    bool ok = false;
    int scatterer = -1;
    int strip = 0;
    CurveVertex v;
};

PulledVertex pull_vertex(const TableGeometry& table, int scatterer, const CurveVertex& src,
                         const MapOptions& opts) {
    PulledVertex out;
    if (std::abs(src.phi) > kHalfPi - 1e-9) return out;
    const PhasePoint x = make_phase_point(table, scatterer, src.r, src.phi);
    const CollisionStep cs = try_step_inverse(table, x, opts);
    if (cs.status != StepStatus::ok) return out;
    const Vec2 u{1.0, src.slope};
    const Vec2 w = cs.dT.apply(u);
    out.ok = true;
    out.scatterer = cs.to.scatterer_id;
    out.strip = strip_index(table, cs.to.phi).k;
    out.v.r = cs.to.r;
    out.v.phi = cs.to.phi;
    out.v.slope = w.y / w.x;
    out.v.param = src.param;
    // forward one-step Jacobian along the curve, evaluated at the image point
    out.v.log_j = src.log_j + std::log(u.norm() / w.norm());
    return out;
}

CurveVertex lerp_vertex(const CurveVertex& a, const CurveVertex& b, double w) {
    CurveVertex m;
    m.r = a.r + (b.r - a.r) * w;
    m.phi = a.phi + (b.phi - a.phi) * w;
    m.slope = a.slope + (b.slope - a.slope) * w;
    m.param = a.param + (b.param - a.param) * w;
    m.log_j = a.log_j + (b.log_j - a.log_j) * w;
    return m;
}

} // namespace

namespace {

/// One backward generation: pull every piece, cut into weakly homogeneous
/// runs, subdivide long runs to the working scale delta.
std::vector<StableCurve> evolve_one_generation(const TableGeometry& table,
                                               const std::vector<StableCurve>& cur,
                                               double delta, std::size_t& budget,
                                               bool& complete, std::size_t roulette_target,
                                               Rng& roulette_rng, const MapOptions& opts);

} // namespace

CurveEvolution evolve_stable_curve(const TableGeometry& table, const StableCurve& W, int n,
                                   double delta, const MapOptions& opts) {
    CurveEvolution evo;
    std::vector<StableCurve> cur{W};
    Rng roulette_rng(0x715ab1e5u);
    for (int gen = 0; gen < n; ++gen) {
        std::size_t budget = 4000000; // refinement allowance per generation
        cur = evolve_one_generation(table, cur, delta, budget, evo.complete, 120000,
                                    roulette_rng, opts);
    }

    for (auto& piece : cur) {
        double sup = -1e300;
        double p_lo = 1e300, p_hi = -1e300;
        for (const auto& v : piece.vertices) {
            sup = std::max(sup, v.log_j);
            p_lo = std::min(p_lo, v.param);
            p_hi = std::max(p_hi, v.param);
        }
        evo.sup_jacobian.push_back(std::exp(sup));
        evo.image_length.push_back(p_hi - p_lo);
        evo.pieces.push_back(std::move(piece));
    }
    return evo;
}

namespace {

std::vector<StableCurve> evolve_one_generation(const TableGeometry& table,
                                               const std::vector<StableCurve>& cur,
                                               double delta, std::size_t& budget,
                                               bool& complete, std::size_t roulette_target,
                                               Rng& roulette_rng, const MapOptions& opts) {
    // Pieces near the bulk weight are decomposed at full band granularity;
    // pieces already far below it get the tangency fan lumped into a single
    // band per side. Without this the sliver subtrees multiply geometrically
    // while contributing nothing at the exponents in use.
    double gen_max = -1e300;
    std::vector<double> piece_sup(cur.size(), -1e300);
    for (std::size_t pi = 0; pi < cur.size(); ++pi) {
        for (const auto& v : cur[pi].vertices)
            piece_sup[pi] = std::max(piece_sup[pi], v.log_j);
        gen_max = std::max(gen_max, piece_sup[pi]);
    }
    {
        std::vector<StableCurve> next;
        for (std::size_t piece_idx = 0; piece_idx < cur.size(); ++piece_idx) {
            const auto& piece = cur[piece_idx];
            const bool coarse = piece_sup[piece_idx] < gen_max - 12.0;
            const int deep_band = coarse ? table.k0() : 32;
            auto band = [&](const PulledVertex& p) {
                return std::clamp(p.strip, -deep_band, deep_band);
            };
            std::vector<PulledVertex> line;
            for (std::size_t i = 0; i < piece.vertices.size(); ++i) {
                PulledVertex p = pull_vertex(table, piece.scatterer_id, piece.vertices[i], opts);
                if (i == 0) {
                    line.push_back(p);
                    continue;
                }
                struct Frame {
                    CurveVertex a, b;
                    PulledVertex pa, pb;
                    int depth;
                };
                std::vector<Frame> stack{
                    {piece.vertices[i - 1], piece.vertices[i], line.back(), p, 0}};
                while (!stack.empty()) {
                    Frame f = stack.back();
                    stack.pop_back();
                    const bool both_dead = !f.pa.ok && !f.pb.ok;
                    const bool same = f.pa.ok && f.pb.ok && f.pa.scatterer == f.pb.scatterer &&
                                      band(f.pa) == band(f.pb);
                    double gap = std::numeric_limits<double>::infinity();
                    if (same) gap = std::hypot(f.pb.v.r - f.pa.v.r, f.pb.v.phi - f.pa.v.phi);
                    if (both_dead || (same && gap <= delta / 4) || f.depth >= 11 ||
                        budget == 0) {
                        if (budget == 0) complete = false;
                        line.push_back(f.pb);
                        continue;
                    }
                    --budget;
                    const CurveVertex m = lerp_vertex(f.a, f.b, 0.5);
                    PulledVertex pm = pull_vertex(table, piece.scatterer_id, m, opts);
                    stack.push_back({m, f.b, pm, f.pb, f.depth + 1});
                    stack.push_back({f.a, m, f.pa, pm, f.depth + 1});
                }
            }

            // cut the pulled line into weakly homogeneous runs
            StableCurve run;
            run.weight_mult = piece.weight_mult;
            run.scatterer_id = -1;
            int run_strip = 0;
            auto flush = [&] {
                if (run.vertices.size() >= 2) next.push_back(std::move(run));
                run = StableCurve{};
                run.weight_mult = piece.weight_mult;
                run.scatterer_id = -1;
            };
            for (const auto& p : line) {
                if (!p.ok) {
                    flush();
                    continue;
                }
                if (run.scatterer_id != p.scatterer || run_strip != band(p)) {
                    flush();
                    run.scatterer_id = p.scatterer;
                    run_strip = band(p);
                } else if (!run.vertices.empty()) {
                    const CurveVertex& prev = run.vertices.back();
                    const double gap = std::hypot(p.v.r - prev.r, p.v.phi - prev.phi);
                    // a real curve segment advances the source parameter at
                    // the local Jacobian rate; anything faster is a tear the
                    // refinement could not resolve
                    const double jloc = std::exp(std::max(prev.log_j, p.v.log_j));
                    const bool torn = gap > std::max(4.0 * delta, 0.05) ||
                                      std::abs(p.v.param - prev.param) >
                                          8.0 * jloc * gap + 1e-12;
                    if (torn) {
                        flush();
                        run.scatterer_id = p.scatterer;
                        run_strip = band(p);
                    }
                }
                run.vertices.push_back(p.v);
            }
            flush();
        }

        // subdivide long runs to the working length scale
        std::vector<StableCurve> sized;
        for (auto& piece : next) {
            const double len = piece.length();
            if (len <= delta) {
                sized.push_back(std::move(piece));
                continue;
            }
            const int parts = static_cast<int>(std::ceil(len / delta));
            const double target = len / parts;
            StableCurve chunk;
            chunk.scatterer_id = piece.scatterer_id;
            chunk.weight_mult = piece.weight_mult;
            double acc = 0.0;
            chunk.vertices.push_back(piece.vertices.front());
            for (std::size_t i = 1; i < piece.vertices.size(); ++i) {
                acc += std::hypot(piece.vertices[i].r - piece.vertices[i - 1].r,
                                  piece.vertices[i].phi - piece.vertices[i - 1].phi);
                chunk.vertices.push_back(piece.vertices[i]);
                if (acc >= target && i + 1 < piece.vertices.size()) {
                    sized.push_back(chunk);
                    chunk.vertices.clear();
                    chunk.vertices.push_back(piece.vertices[i]);
                    acc = 0.0;
                }
            }
            if (chunk.vertices.size() >= 2) sized.push_back(std::move(chunk));
        }

        if (roulette_target == 0 || sized.size() <= roulette_target) return sized;

        // Weight-proportional roulette: keep piece i with probability
        // p_i = min(1, b_i / tau), b_i = sqrt of its sup Jacobian, and scale
        // the survivor by 1/p_i. Every weighted sum over the decomposition
        // stays unbiased, and the population is pinned near the target.
        std::vector<double> base(sized.size());
        for (std::size_t i = 0; i < sized.size(); ++i) {
            double sup = -1e300;
            for (const auto& v : sized[i].vertices) sup = std::max(sup, v.log_j);
            base[i] = std::exp(0.5 * sup);
        }
        double tau_lo = 0.0, tau_hi = 1.0;
        for (double b : base) tau_hi = std::max(tau_hi, b);
        for (int it = 0; it < 60; ++it) {
            const double tau = 0.5 * (tau_lo + tau_hi);
            double expected = 0.0;
            for (double b : base) expected += std::min(1.0, b / tau);
            (expected > static_cast<double>(roulette_target) ? tau_lo : tau_hi) = tau;
        }
        const double tau = 0.5 * (tau_lo + tau_hi);
        std::vector<StableCurve> kept;
        kept.reserve(roulette_target + roulette_target / 4);
        for (std::size_t i = 0; i < sized.size(); ++i) {
            const double p = std::min(1.0, base[i] / tau);
            if (p >= 1.0) {
                kept.push_back(std::move(sized[i]));
                continue;
            }
            if (roulette_rng.uniform() < p) {
                sized[i].weight_mult /= p;
                kept.push_back(std::move(sized[i]));
            }
        }
        return kept;
    }
}

} // namespace

GrowthSweep sweep_growth(const TableGeometry& table, int n_max, int curve_count, double delta,
                         std::uint64_t seed, ExecPolicy policy, const MapOptions& opts) {
    GrowthSweep sweep;
    sweep.n_max = n_max;
    sweep.delta = delta;

    // seed curves, grown deterministically; short ones are discarded
    std::vector<StableCurve> seeds;
    Rng rng(derive_seed(seed, 0x9042));
    int attempts = 0;
    while (static_cast<int>(seeds.size()) < curve_count && attempts < curve_count * 40) {
        ++attempts;
        const int id = static_cast<int>(rng.below(table.num_scatterers()));
        const double r = rng.uniform(0.0, table.perimeter(id));
        const double phi = std::asin(rng.uniform(-0.95, 0.95));
        const PhasePoint x = make_phase_point(table, id, r, phi);
        auto c = grow_stable_curve(table, x, 0.6 * table.delta0(), table.delta0() / 24.0, opts);
        if (c && c->length() > table.delta0() / 2.0) seeds.push_back(std::move(*c));
    }

    sweep.piece_logs.assign(seeds.size(), {});
    sweep.piece_mults.assign(seeds.size(), {});
    sweep.curve_length.assign(seeds.size(), 0.0);
    for_each_index(seeds.size(), policy, [&](std::size_t ci) {
        sweep.curve_length[ci] = seeds[ci].length();
        std::vector<std::vector<double>> per_n(n_max);
        std::vector<std::vector<double>> mult_n(n_max);
        std::vector<StableCurve> cur{seeds[ci]};
        bool complete = true;
        Rng roulette_rng(derive_seed(seed, 0x9017e77e, ci));
        for (int n = 1; n <= n_max; ++n) {
            std::size_t budget = 4000000;
            cur = evolve_one_generation(table, cur, delta, budget, complete, 40000,
                                        roulette_rng, opts);
            per_n[n - 1].reserve(cur.size());
            mult_n[n - 1].reserve(cur.size());
            for (const auto& piece : cur) {
                double sup = -1e300;
                for (const auto& v : piece.vertices) sup = std::max(sup, v.log_j);
                per_n[n - 1].push_back(sup);
                mult_n[n - 1].push_back(piece.weight_mult);
            }
        }
        sweep.piece_logs[ci] = std::move(per_n);
        sweep.piece_mults[ci] = std::move(mult_n);
    });
    return sweep;
}

PressurePoint estimate_pressure(const TableGeometry& table, double t, int n_max,
                                const GrowthSweep& sweep) {
    (void)table;
    if (n_max < 4) throw std::invalid_argument("estimate_pressure: n_max must be at least 4");
    if (sweep.piece_logs.empty())
        throw std::invalid_argument("estimate_pressure: empty curve ensemble");
    PressurePoint pt;
    pt.t = t;
    pt.n_max = std::min(n_max, sweep.n_max);

    for (int n = 1; n <= pt.n_max; ++n) {
        std::vector<double> per_curve;
        for (std::size_t c = 0; c < sweep.piece_logs.size(); ++c) {
            const auto& logs = sweep.piece_logs[c][n - 1];
            const auto& mults = sweep.piece_mults[c][n - 1];
            std::vector<double> terms;
            terms.reserve(logs.size());
            for (std::size_t i = 0; i < logs.size(); ++i)
                terms.push_back(mults[i] * std::exp(t * logs[i]));
            per_curve.push_back(ordered_sum(terms));
        }
        pt.log_qn.push_back(std::log(ordered_sum(per_curve) / per_curve.size()));
        pt.class_count += sweep.piece_logs.front()[n - 1].size();
    }

    pt.inf_estimate = std::numeric_limits<double>::infinity();
    for (int n = 1; n <= pt.n_max; ++n)
        pt.inf_estimate = std::min(pt.inf_estimate, pt.log_qn[n - 1] / n);

    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (int n = 2; n <= pt.n_max; ++n) {
        sx += n;
        sy += pt.log_qn[n - 1];
        sxx += static_cast<double>(n) * n;
        sxy += n * pt.log_qn[n - 1];
        ++m;
    }
    pt.slope_fit = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    pt.last_over_n = pt.log_qn[pt.n_max - 1] / pt.n_max;

    const double lo = std::min({pt.inf_estimate, pt.slope_fit, pt.last_over_n});
    const double hi = std::max({pt.inf_estimate, pt.slope_fit, pt.last_over_n});
    pt.spread = hi - lo;
    pt.estimate = pt.slope_fit;
    return pt;
}

ExpansionSumResult one_step_expansion_sum(const TableGeometry& table, const StableCurve& W,
                                          double t, double q, int k0, const MapOptions& opts) {
    if (W.vertices.size() < 2)
        throw std::invalid_argument("one_step_expansion_sum: degenerate curve");

    struct Probe {
        bool ok = false;
        int scatterer = -1, cdx = 0, cdy = 0, strip = 0;
        double jac_adapted = 0.0;
    };
    auto eval = [&](double s) -> Probe {
        double acc = 0.0;
        std::size_t i = 0;
        for (; i + 2 < W.vertices.size(); ++i) {
            const double seg = std::hypot(W.vertices[i + 1].r - W.vertices[i].r,
                                          W.vertices[i + 1].phi - W.vertices[i].phi);
            if (acc + seg >= s) break;
            acc += seg;
        }
        const double seg = std::hypot(W.vertices[i + 1].r - W.vertices[i].r,
                                      W.vertices[i + 1].phi - W.vertices[i].phi);
        const double w = seg > 0 ? std::clamp((s - acc) / seg, 0.0, 1.0) : 0.0;
        const CurveVertex v = lerp_vertex(W.vertices[i], W.vertices[i + 1], w);

        Probe p;
        if (std::abs(v.phi) > kHalfPi - 1e-9) return p;
        const PhasePoint x = make_phase_point(table, W.scatterer_id, v.r, v.phi);
        const CollisionStep cs = try_step_inverse(table, x, opts);
        if (cs.status != StepStatus::ok) return p;
        const Vec2 u{1.0, v.slope};
        const Vec2 img = cs.dT.apply(u);
        p.ok = true;
        p.scatterer = cs.to.scatterer_id;
        p.cdx = cs.cell_dx;
        p.cdy = cs.cell_dy;
        p.strip = strip_index_custom(cs.to.phi, q, k0);
        const double K_x = table.curvature(x.scatterer_id);
        const double K_y = table.curvature(cs.to.scatterer_id);
        p.jac_adapted = adapted_norm(K_x, u) / adapted_norm(K_y, img);
        return p;
    };

    const double total_len = W.length();
    struct Node {
        double s;
        Probe p;
    };
    std::vector<Node> samples;
    const int base = 200;

    // in-order adaptive refinement keeps the samples sorted by arclength
    std::function<void(double, const Probe&, double, const Probe&, int)> refine =
        [&](double s0, const Probe& p0, double s1, const Probe& p1, int depth) {
            const bool same = p0.ok == p1.ok &&
                              (!p0.ok || (p0.scatterer == p1.scatterer && p0.cdx == p1.cdx &&
                                          p0.cdy == p1.cdy && p0.strip == p1.strip));
            if (same || depth >= 44 || s1 - s0 < 1e-13 * total_len) return;
            const double sm = 0.5 * (s0 + s1);
            const Probe pm = eval(sm);
            refine(s0, p0, sm, pm, depth + 1);
            samples.push_back({sm, pm});
            refine(sm, pm, s1, p1, depth + 1);
        };

    Probe prev = eval(0.0);
    samples.push_back({0.0, prev});
    for (int i = 1; i <= base; ++i) {
        const double s = total_len * i / base;
        const Probe p = eval(s);
        refine(total_len * (i - 1) / base, prev, s, p, 0);
        samples.push_back({s, p});
        prev = p;
    }

    // group ordered samples into maximal components, track per-band sups
    ExpansionSumResult res;
    std::vector<double> terms;
    std::unordered_map<int, double> strip_sup;
    std::unordered_map<int, int> strip_runs;
    int max_strip = 0;

    std::size_t i = 0;
    while (i < samples.size()) {
        if (!samples[i].p.ok) {
            ++i;
            continue;
        }
        const Probe head = samples[i].p;
        double sup = head.jac_adapted;
        std::size_t j = i + 1;
        while (j < samples.size() && samples[j].p.ok &&
               samples[j].p.scatterer == head.scatterer && samples[j].p.cdx == head.cdx &&
               samples[j].p.cdy == head.cdy && samples[j].p.strip == head.strip) {
            sup = std::max(sup, samples[j].p.jac_adapted);
            ++j;
        }
        terms.push_back(std::pow(sup, t));
        ++res.components;
        const int ak = std::abs(head.strip);
        if (ak > 0) {
            auto [it, fresh] = strip_sup.try_emplace(ak, sup);
            if (!fresh) it->second = std::max(it->second, sup);
            max_strip = std::max(max_strip, ak);
            ++strip_runs[ak];
        }
        i = j;
    }
    res.sum = ordered_sum(terms);
    res.strips_resolved = max_strip;

    // analytic bound for the bands beyond the resolved range: component sups
    // decay like C k^-q, with C fitted on the deepest resolved bands
    if (max_strip >= k0) {
        double c_fit = 0.0;
        int fitted = 0;
        for (auto [k, sup] : strip_sup) {
            if (k >= std::max(k0, max_strip / 2)) {
                c_fit = std::max(c_fit, sup * std::pow(double(k), q));
                ++fitted;
            }
        }
        const int accumulations = strip_runs.count(max_strip) ? strip_runs[max_strip] : 1;
        if (fitted > 0) {
            double tail = 0.0;
            for (int k = max_strip + 1; k < max_strip + 2000000; ++k) {
                const double term = std::pow(c_fit * std::pow(double(k), -q), t);
                tail += term;
                if (term < 1e-18 * std::max(tail, 1e-300)) break;
            }
            res.tail = accumulations * tail;
        }
    }
    res.sum += res.tail;
    res.theta_hat = std::pow(res.sum, 1.0 / t);
    return res;
}

ExpansionParams choose_expansion_params(const TableGeometry& table, double t0, double t1,
                                        int probe_curves, std::uint64_t seed,
                                        const MapOptions& opts) {
    ExpansionParams params;
    const double L = table.Lambda();
    params.theta = 0.5 * (1.0 / L + 1.0 / std::sqrt(L));
    // the band spacing must satisfy q * t0 > 2 or the tangential tail decays
    // too slowly at the smallest exponent in use
    params.q = std::max(table.q_exponent(), 2.0 / t0 + 0.5);

    // probe seeds: random points plus points sitting on the forward images
    // of the tangency lines, whose curves cross a tangency fan of the
    // backward map
    MapOptions curve_opts = opts;
    curve_opts.horizon_bound = std::min(opts.horizon_bound, 5.0);
    SingularCurveSet images = singularity_curves(table, -1, 5e-3, 100000, curve_opts);
    Rng rng(derive_seed(seed, 0x1e57));

    auto make_probes = [&](double d0) {
        std::vector<StableCurve> probes;
        int attempts = 0;
        const int want_random = probe_curves, want_fan = std::max(8, probe_curves / 2);
        while (static_cast<int>(probes.size()) < want_random && attempts < want_random * 40) {
            ++attempts;
            const int id = static_cast<int>(rng.below(table.num_scatterers()));
            const double r = rng.uniform(0.0, table.perimeter(id));
            const double phi = std::asin(rng.uniform(-0.97, 0.97));
            auto c = grow_stable_curve(table, make_phase_point(table, id, r, phi), 0.45 * d0,
                                       d0 / 24.0, opts);
            if (c && c->length() > 0.2 * d0 && c->length() < d0) probes.push_back(std::move(*c));
        }
        int fans = 0;
        attempts = 0;
        while (fans < want_fan && attempts < want_fan * 40 && !images.branches.empty()) {
            ++attempts;
            const auto& br = images.branches[rng.below(images.branches.size())];
            const auto& v = br.vertices[rng.below(br.vertices.size())];
            if (std::abs(v.y) > 1.4) continue;
            auto c = grow_stable_curve(
                table, make_phase_point(table, br.scatterer_id, v.x, v.y), 0.45 * d0,
                d0 / 24.0, opts);
            if (c && c->length() > 0.2 * d0 && c->length() < d0) {
                probes.push_back(std::move(*c));
                ++fans;
            }
        }
        return probes;
    };

    const double ts[4] = {t0, 0.5 * (t0 + t1), 1.0, t1};
    for (double d0 : {1e-3, 3e-4, 1e-4, 3e-5}) {
        std::vector<StableCurve> probes = make_probes(d0);
        if (probes.empty()) continue;
        for (int k0 : {4, 5, 6, 8, 12, 16, 24}) {
            double worst = 0.0;
            for (const auto& W : probes) {
                for (double t : ts) {
                    if (t < t0 - 1e-12 || t > t1 + 1e-12) continue;
                    ExpansionSumResult r =
                        one_step_expansion_sum(table, W, t, params.q, k0, opts);
                    worst = std::max(worst, r.sum / std::pow(params.theta, t));
                }
            }
            params.k0 = k0;
            params.delta0_bar = d0;
            params.worst_ratio = worst;
            if (worst < 0.9) return params;
        }
    }
    return params;
}

double short_piece_fraction(const TableGeometry& table, const StableCurve& W, int n,
                            double delta1, double t, const MapOptions& opts) {
    CurveEvolution evo = evolve_stable_curve(table, W, n, delta1, opts);
    std::vector<double> short_terms, all_terms;
    for (std::size_t i = 0; i < evo.pieces.size(); ++i) {
        const double wgt = evo.pieces[i].weight_mult * std::pow(evo.sup_jacobian[i], t);
        all_terms.push_back(wgt);
        if (evo.pieces[i].length() < delta1 / 3.0) short_terms.push_back(wgt);
    }
    const double total = ordered_sum(all_terms);
    if (total <= 0.0) return 1.0;
    return ordered_sum(short_terms) / total;
}

} // namespace billiard
